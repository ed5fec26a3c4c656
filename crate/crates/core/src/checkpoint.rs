//! `GCGR` checkpoints: magic `GCGR\0`, u32 LE version, u32 LE parameter count,
//! then per parameter a u16 LE name length, the UTF-8 name, and the tensor in
//! the same shape/value layout as a GTNS body.

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::gtns::{write_shape_and_values, Reader};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GCGR\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let named = params.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_shape_and_values(&mut buf, t);
    }
    buf
}

/// Named tensors in file order.
pub fn decode_named(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let fail = |m: String| Error::format(path, m);
    let mut r = Reader::new(bytes);
    if r.take(5).map_err(fail)? != MAGIC {
        return Err(Error::format(path, "bad magic bytes (not a GCGR checkpoint)"));
    }
    let version = r.u32().map_err(fail)?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32().map_err(fail)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16().map_err(fail)? as usize;
        let name = std::str::from_utf8(r.take(len).map_err(fail)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let t = r.tensor().map_err(|m| Error::format(path, format!("{name}: {m}")))?;
        out.push((name, t));
    }
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after the last parameter"));
    }
    Ok(out)
}

/// Decode into the parameter layout `cfg` describes. Every expected tensor must
/// be present exactly once with the expected shape.
pub fn decode(bytes: &[u8], path: &Path, cfg: &Config) -> Result<ModelParams> {
    let mut named = decode_named(bytes, path)?;
    let mut params = ModelParams::zeros(cfg);
    {
        let slots = params.named_mut();
        if slots.len() != named.len() {
            return Err(Error::format(
                path,
                format!("{} parameters stored, model `{}` has {}", named.len(), cfg.temporal, slots.len()),
            ));
        }
        for (name, slot) in slots {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::format(path, format!("missing parameter `{name}`")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    path,
                    format!("`{name}` has shape {:?}, config expects {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, cfg: &Config) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TemporalModule;

    fn small(module: TemporalModule) -> Config {
        Config {
            temporal: module,
            channels: 3,
            hidden: 2,
            depth_bins: 4,
            ..Config::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for module in TemporalModule::ALL {
            let cfg = small(module);
            let p = ModelParams::init(&cfg, 99);
            let bytes = encode(&p);
            let q = decode(&bytes, Path::new("x.gcgr"), &cfg).unwrap();
            assert_eq!(encode(&q), bytes);
            for (a, b) in p.tensors().iter().zip(q.tensors()) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn header_layout() {
        let p = ModelParams::init(&small(TemporalModule::Static), 1);
        let bytes = encode(&p);
        assert_eq!(&bytes[..5], b"GCGR\0");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize, p.named().len());
        let name_len = u16::from_le_bytes(bytes[13..15].try_into().unwrap()) as usize;
        assert_eq!(&bytes[15..15 + name_len], b"encoder.conv1");
    }

    #[test]
    fn rejects_bad_files() {
        let cfg = small(TemporalModule::ConvGru);
        let bytes = encode(&ModelParams::init(&cfg, 1));
        let path = Path::new("ck.gcgr");

        let mut v2 = bytes.clone();
        v2[5] = 2;
        assert!(matches!(decode(&v2, path, &cfg), Err(Error::Version { found: 2, .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic, path, &cfg), Err(Error::Format { .. })));

        assert!(decode(&bytes[..bytes.len() - 3], path, &cfg).is_err());

        let other = small(TemporalModule::Static);
        let err = decode(&bytes, path, &other).unwrap_err();
        assert!(err.to_string().contains("ck.gcgr"), "{err}");

        let mut wider = cfg.clone();
        wider.hidden = 3;
        assert!(decode(&bytes, path, &wider).is_err());
    }
}

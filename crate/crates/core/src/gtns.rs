//! `GTNS` tensor files: magic `GTNS\0`, u32 LE version, u8 ndim, ndim u32 LE
//! dims, then the values as little-endian `f64` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GTNS\0";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(10 + 4 * t.ndim() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    write_shape_and_values(&mut buf, t);
    buf
}

pub(crate) fn write_shape_and_values(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.ndim() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little cursor over a byte slice; every read reports truncation as a message.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or("dimension overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data).map_err(|e| e.to_string())
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(5).map_err(|m| Error::format(path, m))?;
    if magic != MAGIC {
        return Err(Error::format(path, "bad magic bytes (not a GTNS tensor)"));
    }
    let version = r.u32().map_err(|m| Error::format(path, m))?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let t = r.tensor().map_err(|m| Error::format(path, m))?;
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok(t)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -0.25]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..5], b"GTNS\0");
        assert_eq!(&b[5..9], &[1, 0, 0, 0]);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[18..26], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let t = Tensor::scalar(1.0);
        let mut b = encode(&t);
        b[0] = b'X';
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::Format { .. })));
        let mut b = encode(&t);
        b[5] = 2;
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::Version { found: 2, .. })));
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1], Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_bit_exact(dims in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let back = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

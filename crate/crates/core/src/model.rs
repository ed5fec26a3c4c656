//! The segmentation network: image encoder, lift-splat projection, temporal
//! module, optional geographical mask and a two-layer prediction head.
//!
//! Every frame of the window is encoded camera by camera with shared weights
//! and splatted to its own BEV feature map. The temporal module fuses the
//! BEV window into one map; the head turns it into class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{BevGridSpec, CameraRig};
use crate::config::{Config, TemporalModule};
use crate::convgru::{
    convgru_backward_through_time, convgru_forward, temporal_conv3d, temporal_conv3d_backward,
    uniform_init, ConvGruParams, ConvGruTape, GruUnit, GATE_NAMES,
};
use crate::error::{Error, Result};
use crate::geo_mask::{apply_geo_mask, apply_geo_mask_backward, build_geo_mask, GeoMask};
use crate::lift_splat::{SplatCache, SplatPlan};
use crate::tensor::{
    add_channel_bias, channel_bias_grad, conv2d_strided, conv2d_strided_backward_into, Tensor,
};

/// Kernel init scale on top of the unit fan-in bound.
pub const INIT_GAIN: f64 = 3.0;
/// Image pixels per feature-map pixel.
pub const FEATURE_STRIDE: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;
const STRIDE1: usize = 4;
const STRIDE2: usize = 2;
const K1: usize = 5;
const K2: usize = 3;
/// RGB plus a normalized image-row coordinate.
const ENCODER_INPUTS: usize = IMAGE_CHANNELS + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub conv1: Tensor,
    pub bias1: Tensor,
    pub conv2: Tensor,
    pub bias2: Tensor,
    pub feat: Tensor,
    pub feat_bias: Tensor,
    pub depth: Tensor,
    pub depth_bias: Tensor,
}

impl EncoderParams {
    pub fn zeros(hidden: usize, channels: usize, depth_bins: usize) -> Self {
        EncoderParams {
            conv1: Tensor::zeros(&[hidden, ENCODER_INPUTS, K1, K1]),
            bias1: Tensor::zeros(&[hidden]),
            conv2: Tensor::zeros(&[channels, hidden, K2, K2]),
            bias2: Tensor::zeros(&[channels]),
            feat: Tensor::zeros(&[channels, channels, 1, 1]),
            feat_bias: Tensor::zeros(&[channels]),
            depth: Tensor::zeros(&[depth_bins, channels, 1, 1]),
            depth_bias: Tensor::zeros(&[depth_bins]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("conv1", &self.conv1),
            ("bias1", &self.bias1),
            ("conv2", &self.conv2),
            ("bias2", &self.bias2),
            ("feat", &self.feat),
            ("feat_bias", &self.feat_bias),
            ("depth", &self.depth),
            ("depth_bias", &self.depth_bias),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("conv1", &mut self.conv1),
            ("bias1", &mut self.bias1),
            ("conv2", &mut self.conv2),
            ("bias2", &mut self.bias2),
            ("feat", &mut self.feat),
            ("feat_bias", &mut self.feat_bias),
            ("depth", &mut self.depth),
            ("depth_bias", &mut self.depth_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemporalParams {
    Static,
    /// `[C_h, C, T, k, k]`
    Conv3d(Tensor),
    ConvGru(ConvGruParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub conv: Tensor,
    pub bias: Tensor,
    pub out: Tensor,
    pub out_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub module: TemporalModule,
    pub encoder: EncoderParams,
    pub temporal: TemporalParams,
    pub head: HeadParams,
}

impl ModelParams {
    /// All-zero parameters with the shapes `cfg` describes.
    pub fn zeros(cfg: &Config) -> Self {
        let k = cfg.kernel;
        let (c, ch) = (cfg.channels, cfg.hidden);
        let (temporal, head_in) = match cfg.temporal {
            TemporalModule::Static => (TemporalParams::Static, c),
            TemporalModule::Conv3d => (
                TemporalParams::Conv3d(Tensor::zeros(&[ch, c, cfg.window, k, k])),
                ch,
            ),
            TemporalModule::ConvGru | TemporalModule::GeoConvGru => {
                let units = (0..cfg.gru_units)
                    .map(|i| GruUnit::zeros(if i == 0 { c } else { ch }, ch, k))
                    .collect();
                (TemporalParams::ConvGru(ConvGruParams { units }), ch)
            }
        };
        ModelParams {
            module: cfg.temporal,
            encoder: EncoderParams::zeros(cfg.encoder_channels, c, cfg.depth_bins),
            temporal,
            head: HeadParams {
                conv: Tensor::zeros(&[cfg.head_hidden, head_in, k, k]),
                bias: Tensor::zeros(&[cfg.head_hidden]),
                out: Tensor::zeros(&[cfg.num_classes, cfg.head_hidden, 1, 1]),
                out_bias: Tensor::zeros(&[cfg.num_classes]),
            },
        }
    }

    /// Seeded kernels from U(-g/sqrt(fan_in), g/sqrt(fan_in)) with g = [`INIT_GAIN`],
    /// zero biases. Kernels are drawn in
    /// [`ModelParams::named`] order from one ChaCha stream.
    pub fn init(cfg: &Config, seed: u64) -> Self {
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.named_mut() {
            if t.ndim() > 1 && !name.ends_with("bias") {
                uniform_init(t, &mut rng);
                for v in t.data_mut() {
                    *v *= INIT_GAIN;
                }
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// Every trainable tensor with a stable, unique name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .named()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        match &self.temporal {
            TemporalParams::Static => {}
            TemporalParams::Conv3d(k) => out.push(("conv3d.kernel".into(), k)),
            TemporalParams::ConvGru(p) => {
                for (u, unit) in p.units.iter().enumerate() {
                    for (g, t) in GATE_NAMES.iter().zip(unit.tensors()) {
                        out.push((format!("convgru.{u}.{g}"), t));
                    }
                }
            }
        }
        out.push(("head.conv".into(), &self.head.conv));
        out.push(("head.bias".into(), &self.head.bias));
        out.push(("head.out".into(), &self.head.out));
        out.push(("head.out_bias".into(), &self.head.out_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        match &mut self.temporal {
            TemporalParams::Static => {}
            TemporalParams::Conv3d(k) => out.push(("conv3d.kernel".into(), k)),
            TemporalParams::ConvGru(p) => {
                for (u, unit) in p.units.iter_mut().enumerate() {
                    for (g, t) in GATE_NAMES.iter().zip(unit.tensors_mut()) {
                        out.push((format!("convgru.{u}.{g}"), t));
                    }
                }
            }
        }
        let h = &mut self.head;
        out.push(("head.conv".into(), &mut h.conv));
        out.push(("head.bias".into(), &mut h.bias));
        out.push(("head.out".into(), &mut h.out));
        out.push(("head.out_bias".into(), &mut h.out_bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Frames consumed per prediction; `None` when any length works.
    pub fn required_window(&self) -> Option<usize> {
        match &self.temporal {
            TemporalParams::Static => Some(1),
            TemporalParams::Conv3d(k) => Some(k.shape()[2]),
            TemporalParams::ConvGru(_) => None,
        }
    }
}

/// Rig-dependent constants shared by every sample: the splat plan and the mask.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub plan: SplatPlan,
    pub mask: Option<GeoMask>,
}

impl Geometry {
    pub fn new(cfg: &Config, rig: &CameraRig) -> Result<Self> {
        let cloud = rig.frustums(cfg.feat_h(), cfg.feat_w(), FEATURE_STRIDE, &cfg.depth_bin_centers())?;
        let grid = cfg.grid();
        let mask = if cfg.temporal.uses_mask() {
            Some(build_geo_mask(&cloud, &grid, cfg.epsilon)?)
        } else {
            None
        };
        Ok(Geometry {
            plan: SplatPlan::new(&cloud, &grid),
            mask,
        })
    }

    pub fn grid(&self) -> &BevGridSpec {
        &self.plan.grid
    }
}

/// Intermediates of one [`encode_image`] call.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    input: Tensor,
    h1: Tensor,
    h2: Tensor,
}

fn with_row_channel(image: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("image must be [3,H,W], got {:?}", image.shape())));
    };
    if c != IMAGE_CHANNELS {
        return Err(Error::shape(format!("image has {c} channels, expected 3")));
    }
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::shape(format!("image {h}x{w} not divisible by stride {FEATURE_STRIDE}")));
    }
    let mut data = Vec::with_capacity(ENCODER_INPUTS * h * w);
    data.extend(image.data().iter().map(|v| 2.0 * v - 1.0));
    for y in 0..h {
        let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        data.extend(std::iter::repeat(v).take(w));
    }
    Tensor::new(&[ENCODER_INPUTS, h, w], data)
}

fn conv_bias(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let mut y = conv2d_strided(x, k, stride)?;
    add_channel_bias(&mut y, b)?;
    Ok(y)
}

pub fn encode_image_cached(image: &Tensor, enc: &EncoderParams) -> Result<(Tensor, Tensor, EncoderCache)> {
    let input = with_row_channel(image)?;
    let h1 = conv_bias(&input, &enc.conv1, &enc.bias1, STRIDE1)?.map(f64::tanh);
    let h2 = conv_bias(&h1, &enc.conv2, &enc.bias2, STRIDE2)?.map(f64::tanh);
    let feat = conv_bias(&h2, &enc.feat, &enc.feat_bias, 1)?;
    let logits = conv_bias(&h2, &enc.depth, &enc.depth_bias, 1)?;
    Ok((feat, logits, EncoderCache { input, h1, h2 }))
}

/// Image `[3, H, W]` to features `[C, H/8, W/8]` and depth logits `[D, H/8, W/8]`.
///
/// Two strided `tanh` convolutions (stride 4, then 2) followed by two 1×1 heads.
/// A row-coordinate channel is appended to the image so depth can depend on
/// where a pixel sits relative to the horizon.
pub fn encode_image(image: &Tensor, enc: &EncoderParams) -> Result<(Tensor, Tensor)> {
    let (f, d, _) = encode_image_cached(image, enc)?;
    Ok((f, d))
}

fn tanh_backward(grad: &Tensor, y: &Tensor) -> Tensor {
    let data = grad.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
    Tensor::new(grad.shape(), data).expect("same shape")
}

/// Accumulate encoder gradients for one image.
pub fn encode_image_backward(
    enc: &EncoderParams,
    cache: &EncoderCache,
    grad_feat: &Tensor,
    grad_logits: &Tensor,
    grads: &mut EncoderParams,
) -> Result<()> {
    let mut g_h2 = Tensor::zeros_like(&cache.h2);
    conv2d_strided_backward_into(&cache.h2, &enc.feat, grad_feat, 1, &mut g_h2, &mut grads.feat)?;
    grads.feat_bias.add_assign(&channel_bias_grad(grad_feat))?;
    conv2d_strided_backward_into(&cache.h2, &enc.depth, grad_logits, 1, &mut g_h2, &mut grads.depth)?;
    grads.depth_bias.add_assign(&channel_bias_grad(grad_logits))?;

    let g_a2 = tanh_backward(&g_h2, &cache.h2);
    let mut g_h1 = Tensor::zeros_like(&cache.h1);
    conv2d_strided_backward_into(&cache.h1, &enc.conv2, &g_a2, STRIDE2, &mut g_h1, &mut grads.conv2)?;
    grads.bias2.add_assign(&channel_bias_grad(&g_a2))?;

    let g_a1 = tanh_backward(&g_h1, &cache.h1);
    let mut g_in = Tensor::zeros_like(&cache.input);
    conv2d_strided_backward_into(&cache.input, &enc.conv1, &g_a1, STRIDE1, &mut g_in, &mut grads.conv1)?;
    grads.bias1.add_assign(&channel_bias_grad(&g_a1))?;
    Ok(())
}

struct FrameTape {
    /// `(features, depth_logits)` per camera.
    inputs: Vec<(Tensor, Tensor)>,
    encoders: Vec<EncoderCache>,
    splat: SplatCache,
}

enum TemporalTape {
    Static,
    Conv3d,
    ConvGru(ConvGruTape),
}

/// Everything [`backward`] needs from a [`forward`] call.
pub struct ForwardTape {
    frames: Vec<FrameTape>,
    bev: Vec<Tensor>,
    temporal: TemporalTape,
    head_in: Tensor,
    head_hidden: Tensor,
}

impl ForwardTape {
    /// Per-frame BEV feature maps, oldest first.
    pub fn bev(&self) -> &[Tensor] {
        &self.bev
    }

    /// Input of the prediction head (after the temporal module and mask).
    pub fn head_input(&self) -> &Tensor {
        &self.head_in
    }
}

fn frames_used<'a>(params: &ModelParams, frames: &'a [Vec<Tensor>]) -> Result<&'a [Vec<Tensor>]> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty temporal window".into()));
    }
    match params.required_window() {
        // The static model only ever looks at the present frame.
        Some(1) => Ok(&frames[frames.len() - 1..]),
        Some(t) if t != frames.len() => Err(Error::shape(format!(
            "conv3d kernel spans {t} frames, window has {}",
            frames.len()
        ))),
        _ => Ok(frames),
    }
}

/// Class logits `[num_classes, H, W]` for a window of frames (oldest first),
/// each frame holding one image per camera.
pub fn forward(params: &ModelParams, geo: &Geometry, frames: &[Vec<Tensor>]) -> Result<(Tensor, ForwardTape)> {
    let frames = frames_used(params, frames)?;
    let mut tapes = Vec::with_capacity(frames.len());
    let mut bev = Vec::with_capacity(frames.len());
    for cams in frames {
        if cams.len() != geo.plan.num_cameras() {
            return Err(Error::shape(format!(
                "{} images for {} cameras",
                cams.len(),
                geo.plan.num_cameras()
            )));
        }
        let encoded = cams
            .par_iter()
            .map(|img| encode_image_cached(img, &params.encoder))
            .collect::<Result<Vec<_>>>()?;
        let (inputs, encoders): (Vec<_>, Vec<_>) = encoded.into_iter().map(|(f, d, c)| ((f, d), c)).unzip();
        let (map, splat) = geo.plan.forward(&inputs)?;
        bev.push(map);
        tapes.push(FrameTape {
            inputs,
            encoders,
            splat,
        });
    }

    let (fused, temporal) = match &params.temporal {
        TemporalParams::Static => (bev[bev.len() - 1].clone(), TemporalTape::Static),
        TemporalParams::Conv3d(k) => (temporal_conv3d(&bev, k)?, TemporalTape::Conv3d),
        TemporalParams::ConvGru(p) => {
            let (out, tape) = convgru_forward(&bev, p)?;
            (out, TemporalTape::ConvGru(tape))
        }
    };
    let head_in = match (&geo.mask, params.module.uses_mask()) {
        (Some(mask), true) => apply_geo_mask(&fused, mask)?,
        (None, true) => return Err(Error::State("model expects a geographical mask".into())),
        _ => fused,
    };
    let head_hidden = conv_bias(&head_in, &params.head.conv, &params.head.bias, 1)?.map(f64::tanh);
    let logits = conv_bias(&head_hidden, &params.head.out, &params.head.out_bias, 1)?;
    Ok((
        logits,
        ForwardTape {
            frames: tapes,
            bev,
            temporal,
            head_in,
            head_hidden,
        },
    ))
}

/// Gradients of every parameter given the cotangent of the logits.
pub fn backward(params: &ModelParams, geo: &Geometry, tape: &ForwardTape, grad_logits: &Tensor) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let head = &params.head;
    let mut g_hidden = Tensor::zeros_like(&tape.head_hidden);
    conv2d_strided_backward_into(&tape.head_hidden, &head.out, grad_logits, 1, &mut g_hidden, &mut grads.head.out)?;
    grads.head.out_bias = channel_bias_grad(grad_logits);
    let g_a = tanh_backward(&g_hidden, &tape.head_hidden);
    let mut g_head_in = Tensor::zeros_like(&tape.head_in);
    conv2d_strided_backward_into(&tape.head_in, &head.conv, &g_a, 1, &mut g_head_in, &mut grads.head.conv)?;
    grads.head.bias = channel_bias_grad(&g_a);

    let g_fused = match (&geo.mask, params.module.uses_mask()) {
        (Some(mask), true) => apply_geo_mask_backward(&g_head_in, mask)?,
        _ => g_head_in,
    };

    let g_bev: Vec<Option<Tensor>> = match (&params.temporal, &tape.temporal) {
        (TemporalParams::Static, TemporalTape::Static) => {
            let mut g = vec![None; tape.bev.len()];
            g[tape.bev.len() - 1] = Some(g_fused);
            g
        }
        (TemporalParams::Conv3d(k), TemporalTape::Conv3d) => {
            let (gw, gk) = temporal_conv3d_backward(&tape.bev, k, &g_fused)?;
            grads.temporal = TemporalParams::Conv3d(gk);
            gw.into_iter().map(Some).collect()
        }
        (TemporalParams::ConvGru(p), TemporalTape::ConvGru(t)) => {
            let (gw, gp) = convgru_backward_through_time(p, t, &g_fused)?;
            grads.temporal = TemporalParams::ConvGru(gp);
            gw.into_iter().map(Some).collect()
        }
        _ => return Err(Error::State("forward tape does not match the parameters".into())),
    };

    for (frame, g) in tape.frames.iter().zip(&g_bev) {
        let Some(g) = g else { continue };
        let cam_grads = geo.plan.backward(&frame.inputs, &frame.splat, g)?;
        // Camera-ordered accumulation keeps the sums bit-reproducible.
        for (cache, (gf, gd)) in frame.encoders.iter().zip(&cam_grads) {
            encode_image_backward(&params.encoder, cache, gf, gd, &mut grads.encoder)?;
        }
    }
    Ok(grads)
}

/// Mean per-cell softmax cross-entropy and its gradient `(softmax - onehot) / cells`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    let &[k, h, w] = logits.shape() else {
        return Err(Error::shape(format!("logits must be [K,H,W], got {:?}", logits.shape())));
    };
    if labels.shape() != [h, w] {
        return Err(Error::shape(format!("labels {:?} vs logits {:?}", labels.shape(), logits.shape())));
    }
    let cells = h * w;
    let x = logits.data();
    let mut grad = Tensor::zeros_like(logits);
    let g = grad.data_mut();
    let mut loss = 0.0;
    for (p, &label) in labels.data().iter().enumerate() {
        if !(label >= 0.0 && label.fract() == 0.0 && (label as usize) < k) {
            return Err(Error::InvalidLabel { label, num_classes: k });
        }
        let max = (0..k).map(|c| x[c * cells + p]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..k).map(|c| (x[c * cells + p] - max).exp()).sum();
        let lse = max + sum.ln();
        let y = label as usize;
        loss += lse - x[y * cells + p];
        for c in 0..k {
            let prob = (x[c * cells + p] - lse).exp();
            g[c * cells + p] = (prob - f64::from(u8::from(c == y))) / cells as f64;
        }
    }
    Ok((loss / cells as f64, grad))
}

/// Argmax over classes; ties go to the lower class id.
pub fn predict_classes(logits: &Tensor) -> Tensor {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let cells = h * w;
    let x = logits.data();
    let data = (0..cells)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if x[c * cells + p] > x[best * cells + p] {
                    best = c;
                }
            }
            best as f64
        })
        .collect();
    Tensor::new(&[h, w], data).expect("valid shape")
}

/// Loss and parameter gradients for one window/label pair.
pub fn loss_and_grad(
    params: &ModelParams,
    geo: &Geometry,
    frames: &[Vec<Tensor>],
    labels: &Tensor,
) -> Result<(f64, ModelParams)> {
    let (logits, tape) = forward(params, geo, frames)?;
    let (loss, g) = cross_entropy_loss(&logits, labels)?;
    Ok((loss, backward(params, geo, &tape, &g)?))
}

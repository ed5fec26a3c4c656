//! Lift per-camera features along a softmax depth distribution and sum-pool
//! the resulting frustum features into BEV cells.

use crate::camera::{ego_to_bev_index, BevGridSpec, CameraFrustum};
use crate::error::{Error, Result};
use crate::tensor::{softmax_channel, softmax_channel_backward, Tensor};

/// `lifted[d,y,x,c] = softmax_d(depth_logits)[d,y,x] * features[c,y,x]`.
pub fn lift(features: &Tensor, depth_logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(features)?;
    let depth = check_logits(depth_logits, h, w)?;
    let prob = softmax_channel(depth_logits);
    let mut out = Tensor::zeros(&[depth, h, w, c]);
    let data = out.data_mut();
    for d in 0..depth {
        for y in 0..h {
            for x in 0..w {
                let p = prob.data()[(d * h + y) * w + x];
                let base = ((d * h + y) * w + x) * c;
                for ch in 0..c {
                    data[base + ch] = p * features.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected [C,h,w], got {:?}", t.shape()))),
    }
}

fn check_logits(logits: &Tensor, h: usize, w: usize) -> Result<usize> {
    match *logits.shape() {
        [d, lh, lw] if lh == h && lw == w => Ok(d),
        _ => Err(Error::shape(format!(
            "depth logits {:?} do not match feature map {h}x{w}",
            logits.shape()
        ))),
    }
}

/// Precomputed scatter targets for a fixed rig and grid.
///
/// Entries per camera are `(point index, cell index)` for in-grid points, in
/// `(y, x, d)` enumeration order. That order is the accumulation order.
#[derive(Clone, Debug)]
pub struct SplatPlan {
    pub grid: BevGridSpec,
    cameras: Vec<CameraPlan>,
}

#[derive(Clone, Debug)]
struct CameraPlan {
    feat_h: usize,
    feat_w: usize,
    depth_bins: usize,
    entries: Vec<(u32, u32)>,
}

/// Forward intermediates needed by [`SplatPlan::backward`].
#[derive(Clone, Debug)]
pub struct SplatCache {
    probs: Vec<Tensor>,
}

impl SplatPlan {
    pub fn new(cloud: &[CameraFrustum], grid: &BevGridSpec) -> Self {
        let cameras = cloud
            .iter()
            .map(|fr| {
                let mut entries = Vec::new();
                for y in 0..fr.feat_h {
                    for x in 0..fr.feat_w {
                        for d in 0..fr.depth_bins {
                            let idx = (d * fr.feat_h + y) * fr.feat_w + x;
                            if let Some((r, c)) = ego_to_bev_index(&fr.points[idx].ego, grid) {
                                entries.push((idx as u32, (r * grid.cols + c) as u32));
                            }
                        }
                    }
                }
                CameraPlan {
                    feat_h: fr.feat_h,
                    feat_w: fr.feat_w,
                    depth_bins: fr.depth_bins,
                    entries,
                }
            })
            .collect();
        SplatPlan {
            grid: *grid,
            cameras,
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    /// Cells receiving at least one frustum point, as a flat `rows*cols` flag list.
    pub fn covered_cells(&self) -> Vec<bool> {
        let mut covered = vec![false; self.grid.num_cells()];
        for cam in &self.cameras {
            for &(_, cell) in &cam.entries {
                covered[cell as usize] = true;
            }
        }
        covered
    }

    fn check_camera(&self, i: usize, features: &Tensor, logits: &Tensor) -> Result<usize> {
        let plan = &self.cameras[i];
        let (c, h, w) = chw(features)?;
        let d = check_logits(logits, h, w)?;
        if (h, w, d) != (plan.feat_h, plan.feat_w, plan.depth_bins) {
            return Err(Error::shape(format!(
                "camera {i}: features {h}x{w} with {d} depth bins, frustum is {}x{} with {}",
                plan.feat_h, plan.feat_w, plan.depth_bins
            )));
        }
        Ok(c)
    }

    /// Splat already-lifted `[D,h,w,C]` tensors, one per camera.
    pub fn splat(&self, lifted: &[Tensor]) -> Result<Tensor> {
        if lifted.len() != self.cameras.len() {
            return Err(Error::shape(format!(
                "{} lifted tensors for {} cameras",
                lifted.len(),
                self.cameras.len()
            )));
        }
        let channels = lifted
            .first()
            .map(|t| *t.shape().last().unwrap())
            .ok_or_else(|| Error::shape("no cameras"))?;
        let cells = self.grid.num_cells();
        let mut bev = Tensor::zeros(&[channels, self.grid.rows, self.grid.cols]);
        for (plan, t) in self.cameras.iter().zip(lifted) {
            let expect = [plan.depth_bins, plan.feat_h, plan.feat_w, channels];
            if t.shape() != expect {
                return Err(Error::shape(format!(
                    "lifted {:?} does not align with frustum {:?}",
                    t.shape(),
                    expect
                )));
            }
            let out = bev.data_mut();
            for &(idx, cell) in &plan.entries {
                let src = &t.data()[idx as usize * channels..(idx as usize + 1) * channels];
                for (ch, v) in src.iter().enumerate() {
                    out[ch * cells + cell as usize] += v;
                }
            }
        }
        Ok(bev)
    }

    /// Fused lift + splat over all cameras: `inputs[i] = (features, depth_logits)`.
    pub fn forward(&self, inputs: &[(Tensor, Tensor)]) -> Result<(Tensor, SplatCache)> {
        if inputs.len() != self.cameras.len() {
            return Err(Error::shape(format!(
                "{} camera inputs for {} cameras",
                inputs.len(),
                self.cameras.len()
            )));
        }
        let channels = inputs[0].0.shape()[0];
        let cells = self.grid.num_cells();
        let mut bev = Tensor::zeros(&[channels, self.grid.rows, self.grid.cols]);
        let mut probs = Vec::with_capacity(inputs.len());
        for (i, (features, logits)) in inputs.iter().enumerate() {
            let c = self.check_camera(i, features, logits)?;
            if c != channels {
                return Err(Error::shape("feature channel count differs between cameras"));
            }
            let plan = &self.cameras[i];
            let plane = plan.feat_h * plan.feat_w;
            let prob = softmax_channel(logits);
            let out = bev.data_mut();
            for &(idx, cell) in &plan.entries {
                let idx = idx as usize;
                let p = prob.data()[idx];
                let pix = idx % plane;
                for ch in 0..channels {
                    out[ch * cells + cell as usize] += p * features.data()[ch * plane + pix];
                }
            }
            probs.push(prob);
        }
        Ok((bev, SplatCache { probs }))
    }

    /// Gradients of [`SplatPlan::forward`] with respect to each camera's
    /// features and depth logits.
    pub fn backward(
        &self,
        inputs: &[(Tensor, Tensor)],
        cache: &SplatCache,
        grad_bev: &Tensor,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        let cells = self.grid.num_cells();
        let channels = grad_bev.shape()[0];
        if grad_bev.shape() != [channels, self.grid.rows, self.grid.cols] {
            return Err(Error::shape("grad_bev does not match the grid"));
        }
        if cache.probs.len() != inputs.len() || inputs.len() != self.cameras.len() {
            return Err(Error::State("splat cache does not match inputs".into()));
        }
        let g = grad_bev.data();
        let mut grads = Vec::with_capacity(inputs.len());
        for (i, (features, logits)) in inputs.iter().enumerate() {
            self.check_camera(i, features, logits)?;
            let plan = &self.cameras[i];
            let plane = plan.feat_h * plan.feat_w;
            let prob = &cache.probs[i];
            let mut grad_feat = Tensor::zeros_like(features);
            let mut grad_prob = Tensor::zeros_like(prob);
            {
                let gf = grad_feat.data_mut();
                let gp = grad_prob.data_mut();
                for &(idx, cell) in &plan.entries {
                    let idx = idx as usize;
                    let p = prob.data()[idx];
                    let pix = idx % plane;
                    let mut acc = 0.0;
                    for ch in 0..channels {
                        let gb = g[ch * cells + cell as usize];
                        gf[ch * plane + pix] += p * gb;
                        acc += features.data()[ch * plane + pix] * gb;
                    }
                    gp[idx] += acc;
                }
            }
            grads.push((grad_feat, softmax_channel_backward(prob, &grad_prob)));
        }
        Ok(grads)
    }
}

/// Splat one set of lifted tensors for an ad-hoc cloud.
pub fn splat(lifted: &[Tensor], cloud: &[CameraFrustum], grid: &BevGridSpec) -> Result<Tensor> {
    SplatPlan::new(cloud, grid).splat(lifted)
}

/// Gradients of `splat ∘ lift` for every camera, returned as
/// `(grad_features, grad_depth_logits)` pairs in camera order.
pub fn splat_backward(
    grad_bev: &Tensor,
    cloud: &[CameraFrustum],
    grid: &BevGridSpec,
    inputs: &[(Tensor, Tensor)],
) -> Result<Vec<(Tensor, Tensor)>> {
    let plan = SplatPlan::new(cloud, grid);
    let (_, cache) = plan.forward(inputs)?;
    plan.backward(inputs, &cache, grad_bev)
}

//! Convolutional GRU over a temporal window of BEV maps, with backpropagation
//! through time, and the 3D-convolution temporal baseline.
//!
//! One cell step:
//!
//! ```text
//! z  = σ(W_z * f + U_z * h)
//! r  = σ(W_r * f + U_r * h)
//! h~ = tanh(W * f + U * (r ⊙ h))
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```
//!
//! Units are stacked in depth: unit `u` reads the per-timestep hidden states
//! of unit `u - 1`. Every unit starts from a zero hidden state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_strided_backward_into, sigmoid, tanh_map, Tensor};

pub const GATE_NAMES: [&str; 6] = ["w_z", "u_z", "w_r", "u_r", "w", "u"];

/// Kernels of one ConvGRU unit. `W*` kernels read the input, `U*` kernels the hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct GruUnit {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub w: Tensor,
    pub u: Tensor,
}

impl GruUnit {
    pub fn zeros(c_in: usize, c_h: usize, k: usize) -> Self {
        let wi = || Tensor::zeros(&[c_h, c_in, k, k]);
        let wh = || Tensor::zeros(&[c_h, c_h, k, k]);
        GruUnit {
            w_z: wi(),
            u_z: wh(),
            w_r: wi(),
            u_r: wh(),
            w: wi(),
            u: wh(),
        }
    }

    pub fn init(c_in: usize, c_h: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut unit = Self::zeros(c_in, c_h, k);
        for t in unit.tensors_mut() {
            uniform_init(t, rng);
        }
        unit
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_channels(), self.hidden_channels(), self.kernel_size())
    }

    pub fn input_channels(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn hidden_channels(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.w_z.shape()[2]
    }

    /// In [`GATE_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_z, &self.u_z, &self.w_r, &self.u_r, &self.w, &self.u]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.w,
            &mut self.u,
        ]
    }
}

/// Uniform in `±sqrt(1 / (fan_in_channels * k²))` for a `[C_out, C_in, k, k]` kernel.
pub fn uniform_init(t: &mut Tensor, rng: &mut impl Rng) {
    let fan_in: usize = t.shape()[1..].iter().product();
    let bound = (1.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGruParams {
    pub units: Vec<GruUnit>,
}

impl ConvGruParams {
    /// First unit reads `c_in` channels, the rest read `c_h`.
    pub fn init(c_in: usize, c_h: usize, num_units: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_units == 0 || k % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ConvGRU needs >= 1 unit and an odd kernel (got {num_units} units, k = {k})"
            )));
        }
        let units = (0..num_units)
            .map(|i| GruUnit::init(if i == 0 { c_in } else { c_h }, c_h, k, rng))
            .collect();
        Ok(ConvGruParams { units })
    }

    pub fn zeros_like(&self) -> Self {
        ConvGruParams {
            units: self.units.iter().map(GruUnit::zeros_like).collect(),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.units.last().map_or(0, GruUnit::hidden_channels)
    }
}

/// Forward intermediates of one cell step.
#[derive(Clone, Debug)]
pub struct CellCache {
    f: Tensor,
    h_prev: Tensor,
    z: Tensor,
    r: Tensor,
    rh: Tensor,
    h_tilde: Tensor,
}

impl CellCache {
    pub fn update_gate(&self) -> &Tensor {
        &self.z
    }

    pub fn reset_gate(&self) -> &Tensor {
        &self.r
    }

    pub fn candidate(&self) -> &Tensor {
        &self.h_tilde
    }
}

fn conv_sum(a: &Tensor, ka: &Tensor, b: &Tensor, kb: &Tensor) -> Result<Tensor> {
    let mut out = conv2d(a, ka)?;
    out.add_assign(&conv2d(b, kb)?)?;
    Ok(out)
}

pub fn convgru_cell(f: &Tensor, h_prev: &Tensor, unit: &GruUnit) -> Result<(Tensor, CellCache)> {
    if f.ndim() != 3 || h_prev.ndim() != 3 || f.shape()[1..] != h_prev.shape()[1..] {
        return Err(Error::shape(format!(
            "ConvGRU input {:?} and hidden {:?} disagree",
            f.shape(),
            h_prev.shape()
        )));
    }
    if h_prev.shape()[0] != unit.hidden_channels() {
        return Err(Error::shape(format!(
            "hidden state has {} channels, unit expects {}",
            h_prev.shape()[0],
            unit.hidden_channels()
        )));
    }
    let z = sigmoid(&conv_sum(f, &unit.w_z, h_prev, &unit.u_z)?);
    let r = sigmoid(&conv_sum(f, &unit.w_r, h_prev, &unit.u_r)?);
    let rh = crate::tensor::mul(&r, h_prev)?;
    let h_tilde = tanh_map(&conv_sum(f, &unit.w, &rh, &unit.u)?);
    let mut h = h_prev.clone();
    for ((hv, zv), cv) in h.data_mut().iter_mut().zip(z.data()).zip(h_tilde.data()) {
        *hv = (1.0 - zv) * *hv + zv * cv;
    }
    Ok((
        h,
        CellCache {
            f: f.clone(),
            h_prev: h_prev.clone(),
            z,
            r,
            rh,
            h_tilde,
        },
    ))
}

/// Backward of one cell step. Kernel gradients are added into `grads`;
/// returns `(grad_f, grad_h_prev)`.
pub fn convgru_cell_backward(
    unit: &GruUnit,
    cache: &CellCache,
    grad_h: &Tensor,
    grads: &mut GruUnit,
) -> Result<(Tensor, Tensor)> {
    if grad_h.shape() != cache.h_prev.shape() {
        return Err(Error::shape(format!(
            "grad_h {:?} does not match hidden {:?}",
            grad_h.shape(),
            cache.h_prev.shape()
        )));
    }
    let n = grad_h.len();
    let (g, z, r, ht, hp) = (
        grad_h.data(),
        cache.z.data(),
        cache.r.data(),
        cache.h_tilde.data(),
        cache.h_prev.data(),
    );
    let mut grad_f = Tensor::zeros_like(&cache.f);
    let mut grad_hp = Tensor::zeros_like(&cache.h_prev);
    let mut pre_z = Tensor::zeros_like(grad_h);
    let mut pre_c = Tensor::zeros_like(grad_h);
    {
        let (gh, pz, pc) = (grad_hp.data_mut(), pre_z.data_mut(), pre_c.data_mut());
        for i in 0..n {
            gh[i] = g[i] * (1.0 - z[i]);
            pz[i] = g[i] * (ht[i] - hp[i]) * z[i] * (1.0 - z[i]);
            pc[i] = g[i] * z[i] * (1.0 - ht[i] * ht[i]);
        }
    }
    // Candidate branch: W * f + U * (r ⊙ h).
    conv2d_strided_backward_into(&cache.f, &unit.w, &pre_c, 1, &mut grad_f, &mut grads.w)?;
    let mut grad_rh = Tensor::zeros_like(&cache.rh);
    conv2d_strided_backward_into(&cache.rh, &unit.u, &pre_c, 1, &mut grad_rh, &mut grads.u)?;
    let mut pre_r = Tensor::zeros_like(grad_h);
    {
        let (grh, gh, pr) = (grad_rh.data(), grad_hp.data_mut(), pre_r.data_mut());
        for i in 0..n {
            gh[i] += grh[i] * r[i];
            pr[i] = grh[i] * hp[i] * r[i] * (1.0 - r[i]);
        }
    }
    conv2d_strided_backward_into(&cache.f, &unit.w_z, &pre_z, 1, &mut grad_f, &mut grads.w_z)?;
    conv2d_strided_backward_into(&cache.h_prev, &unit.u_z, &pre_z, 1, &mut grad_hp, &mut grads.u_z)?;
    conv2d_strided_backward_into(&cache.f, &unit.w_r, &pre_r, 1, &mut grad_f, &mut grads.w_r)?;
    conv2d_strided_backward_into(&cache.h_prev, &unit.u_r, &pre_r, 1, &mut grad_hp, &mut grads.u_r)?;
    Ok((grad_f, grad_hp))
}

/// Cached forward pass: `caches[unit][t]`.
#[derive(Clone, Debug, Default)]
pub struct ConvGruTape {
    pub caches: Vec<Vec<CellCache>>,
}

fn check_window(window: &[Tensor]) -> Result<()> {
    let first = window
        .first()
        .ok_or_else(|| Error::InvalidInput("empty temporal window".into()))?;
    if first.ndim() != 3 || window.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::shape("temporal window frames must share one [C,H,W] shape"));
    }
    Ok(())
}

/// Run the stacked recurrence over `window` (oldest frame first) and return the
/// last unit's final hidden state.
pub fn convgru_forward(window: &[Tensor], params: &ConvGruParams) -> Result<(Tensor, ConvGruTape)> {
    check_window(window)?;
    let (h, w) = (window[0].shape()[1], window[0].shape()[2]);
    let mut inputs: Vec<Tensor> = window.to_vec();
    let mut tape = ConvGruTape::default();
    for unit in &params.units {
        let mut state = Tensor::zeros(&[unit.hidden_channels(), h, w]);
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for f in &inputs {
            let (next, cache) = convgru_cell(f, &state, unit)?;
            outputs.push(next.clone());
            caches.push(cache);
            state = next;
        }
        tape.caches.push(caches);
        inputs = outputs;
    }
    Ok((inputs.pop().expect("non-empty window"), tape))
}

/// Backpropagation through time. Returns the gradient for every window frame
/// and the kernel gradients summed over timesteps.
pub fn convgru_backward_through_time(
    params: &ConvGruParams,
    tape: &ConvGruTape,
    grad_out: &Tensor,
) -> Result<(Vec<Tensor>, ConvGruParams)> {
    if tape.caches.len() != params.units.len() || tape.caches.iter().any(Vec::is_empty) {
        return Err(Error::State("ConvGRU tape does not match the parameters".into()));
    }
    let steps = tape.caches[0].len();
    if tape.caches.iter().any(|c| c.len() != steps) {
        return Err(Error::State("ConvGRU tape has ragged timesteps".into()));
    }
    let mut grads = params.zeros_like();
    // Cotangent arriving at each timestep's output of the current unit.
    let mut incoming: Vec<Option<Tensor>> = vec![None; steps];
    incoming[steps - 1] = Some(grad_out.clone());
    for (u, unit) in params.units.iter().enumerate().rev() {
        let caches = &tape.caches[u];
        let mut carry: Option<Tensor> = None;
        let mut to_input: Vec<Option<Tensor>> = vec![None; steps];
        for t in (0..steps).rev() {
            let mut g = match (carry.take(), incoming[t].take()) {
                (Some(mut c), Some(i)) => {
                    c.add_assign(&i)?;
                    c
                }
                (Some(c), None) | (None, Some(c)) => c,
                (None, None) => Tensor::zeros_like(&caches[t].h_prev),
            };
            if g.shape() != caches[t].h_prev.shape() {
                return Err(Error::shape("grad_out does not match the hidden state"));
            }
            let (gf, gh) = convgru_cell_backward(unit, &caches[t], &g, &mut grads.units[u])?;
            g = gh;
            carry = Some(g);
            to_input[t] = Some(gf);
        }
        incoming = to_input;
    }
    let grad_window = incoming.into_iter().map(|g| g.expect("filled")).collect();
    Ok((grad_window, grads))
}

/// Linear temporal baseline: a 3D convolution whose temporal extent equals
/// the window length, zero-padded in space and "valid" in time.
/// Kernel layout `[C_out, C_in, T, k, k]`.
pub fn temporal_conv3d(window: &[Tensor], kernel: &Tensor) -> Result<Tensor> {
    check_window(window)?;
    let slices = temporal_slices(kernel, window.len())?;
    let mut out: Option<Tensor> = None;
    for (frame, k) in window.iter().zip(&slices) {
        let y = conv2d(frame, k)?;
        match out.as_mut() {
            Some(o) => o.add_assign(&y)?,
            None => out = Some(y),
        }
    }
    Ok(out.expect("non-empty window"))
}

pub fn temporal_conv3d_backward(
    window: &[Tensor],
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Vec<Tensor>, Tensor)> {
    check_window(window)?;
    let slices = temporal_slices(kernel, window.len())?;
    let mut grad_window = Vec::with_capacity(window.len());
    let mut grad_slices = Vec::with_capacity(window.len());
    for (frame, k) in window.iter().zip(&slices) {
        let mut gi = Tensor::zeros_like(frame);
        let mut gk = Tensor::zeros_like(k);
        conv2d_strided_backward_into(frame, k, grad_out, 1, &mut gi, &mut gk)?;
        grad_window.push(gi);
        grad_slices.push(gk);
    }
    Ok((grad_window, assemble_temporal(kernel.shape(), &grad_slices)))
}

fn temporal_slices(kernel: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    let &[co, ci, t, k, k2] = kernel.shape() else {
        return Err(Error::shape(format!("3D kernel must be 5-D, got {:?}", kernel.shape())));
    };
    if t != steps {
        return Err(Error::shape(format!(
            "kernel temporal extent {t} does not match window length {steps}"
        )));
    }
    let plane = k * k2;
    Ok((0..t)
        .map(|ti| {
            let mut data = Vec::with_capacity(co * ci * plane);
            for o in 0..co {
                for i in 0..ci {
                    let base = ((o * ci + i) * t + ti) * plane;
                    data.extend_from_slice(&kernel.data()[base..base + plane]);
                }
            }
            Tensor::new(&[co, ci, k, k2], data).expect("slice shape")
        })
        .collect())
}

fn assemble_temporal(shape: &[usize], slices: &[Tensor]) -> Tensor {
    let (co, ci, t, plane) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
    let mut out = Tensor::zeros(shape);
    for (ti, s) in slices.iter().enumerate() {
        for o in 0..co {
            for i in 0..ci {
                let dst = ((o * ci + i) * t + ti) * plane;
                let src = (o * ci + i) * plane;
                out.data_mut()[dst..dst + plane].copy_from_slice(&s.data()[src..src + plane]);
            }
        }
    }
    out
}

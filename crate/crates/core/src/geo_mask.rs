//! Camera-visibility weighting of BEV cells.
//!
//! A cell is *valid* (weight 1) when at least one frustum point of any camera
//! falls into it, and *invalid* (weight `epsilon`) otherwise.

use std::path::Path;

use crate::camera::{ego_to_bev_index, BevGridSpec, CameraFrustum};
use crate::error::{Error, Result};
use crate::tensor::{mul, Tensor};

pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GeoMask {
    pub weights: Tensor,
    pub epsilon: f64,
}

/// Build the two-level mask. `epsilon` must lie in `[0, 1]`; the model uses
/// values in `(0, 1)`, the endpoints exist for tests.
pub fn build_geo_mask(clouds: &[CameraFrustum], grid: &BevGridSpec, epsilon: f64) -> Result<GeoMask> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("mask epsilon {epsilon} outside [0, 1]")));
    }
    let mut weights = Tensor::full(&[grid.rows, grid.cols], epsilon)?;
    let w = weights.data_mut();
    for fr in clouds {
        for p in &fr.points {
            if let Some((r, c)) = ego_to_bev_index(&p.ego, grid) {
                w[r * grid.cols + c] = 1.0;
            }
        }
    }
    Ok(GeoMask { weights, epsilon })
}

impl GeoMask {
    pub fn ones(grid: &BevGridSpec) -> Self {
        GeoMask {
            weights: Tensor::full(&[grid.rows, grid.cols], 1.0).expect("grid dims"),
            epsilon: 1.0,
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.weights.data()[row * self.cols() + col] == 1.0
    }

    pub fn valid_count(&self) -> usize {
        self.weights.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Binary PGM (P5), forward (+x) up and left (+y) on the left. Valid
    /// cells are 255, invalid cells `round(255 * epsilon)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        for i in 0..rows {
            let r = rows - 1 - i;
            for j in 0..cols {
                let c = cols - 1 - j;
                let v = self.weights.data()[r * cols + c];
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// `out[c, r, col] = mask[r, col] * features[c, r, col]`.
pub fn apply_geo_mask(features: &Tensor, mask: &GeoMask) -> Result<Tensor> {
    if features.ndim() != 3 || features.shape()[1..] != *mask.weights.shape() {
        return Err(Error::shape(format!(
            "features {:?} against mask {:?}",
            features.shape(),
            mask.weights.shape()
        )));
    }
    mul(features, &mask.weights)
}

/// The mask is a constant weighting, so the backward pass is the same product.
pub fn apply_geo_mask_backward(grad_out: &Tensor, mask: &GeoMask) -> Result<Tensor> {
    apply_geo_mask(grad_out, mask)
}

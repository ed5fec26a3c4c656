//! IoU and panoptic quality (PQ = SQ · RQ) with IoU > 0.5 matching.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_binary(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::InvalidMask(v)),
        None => Ok(()),
    }
}

/// Intersection and union cell counts of two binary masks.
pub fn overlap_counts(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape())));
    }
    check_binary(pred)?;
    check_binary(gt)?;
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok((inter, union))
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both masks are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (inter, union) = overlap_counts(pred, gt)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// 4-connected components, ids assigned 1.. in raster-scan discovery order.
pub fn connected_components(mask: &Tensor) -> Result<Tensor> {
    let &[h, w] = mask.shape() else {
        return Err(Error::shape(format!("expected [H,W] mask, got {:?}", mask.shape())));
    };
    check_binary(mask)?;
    let m = mask.data();
    let mut labels = vec![0.0; h * w];
    let mut next = 0.0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if m[start] != 1.0 || labels[start] != 0.0 {
            continue;
        }
        next += 1.0;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if m[j] == 1.0 && labels[j] == 0.0 {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }
    Tensor::new(&[h, w], labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Panoptic {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Matching counts that can be pooled across samples before forming PQ.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PanopticStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PanopticStats {
    pub fn merge(&mut self, other: &PanopticStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    /// SQ is taken as 0 when nothing matched, so `pq == sq * rq` always holds.
    /// With no instances on either side the prediction is perfect.
    pub fn quality(&self) -> Panoptic {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            return Panoptic { pq: 1.0, sq: 1.0, rq: 1.0 };
        }
        let rq = self.tp as f64 / denom;
        let sq = if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 };
        Panoptic { pq: sq * rq, sq, rq }
    }
}

fn instance_areas(labels: &Tensor) -> BTreeMap<i64, usize> {
    let mut areas = BTreeMap::new();
    for &v in labels.data() {
        if v != 0.0 {
            *areas.entry(v as i64).or_insert(0) += 1;
        }
    }
    areas
}

pub fn panoptic_stats(pred: &Tensor, gt: &Tensor) -> Result<PanopticStats> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape())));
    }
    let pred_areas = instance_areas(pred);
    let gt_areas = instance_areas(gt);
    let mut overlaps: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p != 0.0 && g != 0.0 {
            *overlaps.entry((p as i64, g as i64)).or_insert(0) += 1;
        }
    }
    let mut stats = PanopticStats::default();
    for (&(p, g), &inter) in &overlaps {
        let union = pred_areas[&p] + gt_areas[&g] - inter;
        let iou = inter as f64 / union as f64;
        // IoU > 0.5 admits at most one partner per instance.
        if iou > 0.5 {
            stats.tp += 1;
            stats.iou_sum += iou;
        }
    }
    stats.fp = pred_areas.len() - stats.tp;
    stats.fn_ = gt_areas.len() - stats.tp;
    Ok(stats)
}

pub fn panoptic_quality(pred_instances: &Tensor, gt_instances: &Tensor) -> Result<Panoptic> {
    Ok(panoptic_stats(pred_instances, gt_instances)?.quality())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = grid(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &grid(2, 2, &[0.0, 0.0, 1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(iou(&a, &Tensor::full(&[2, 2], 1.0).unwrap()).unwrap(), 0.5);
        assert_eq!(iou(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 2])).unwrap(), 1.0);
        assert!(matches!(iou(&a, &grid(2, 2, &[0.5, 0.0, 0.0, 0.0])), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn components() {
        assert_eq!(connected_components(&Tensor::zeros(&[3, 3])).unwrap().max_abs(), 0.0);
        let two = grid(2, 3, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(connected_components(&two).unwrap().data(), &[1.0, 0.0, 2.0, 1.0, 0.0, 2.0]);
        let diag = grid(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(connected_components(&diag).unwrap().data(), &[1.0, 0.0, 0.0, 2.0]);
        // U-shape discovered from two starting points still merges into one id.
        let u = grid(2, 3, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(connected_components(&u).unwrap().data(), &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn panoptic_examples() {
        let one = grid(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(panoptic_quality(&one, &one).unwrap(), Panoptic { pq: 1.0, sq: 1.0, rq: 1.0 });
        let miss = panoptic_quality(&Tensor::zeros(&[2, 2]), &one).unwrap();
        assert_eq!(miss, Panoptic { pq: 0.0, sq: 0.0, rq: 0.0 });
        // pred covers 3 of the 5 gt cells: IoU = 3/5
        let gt = grid(1, 5, &[1.0; 5]);
        let pred = grid(1, 5, &[0.0, 0.0, 4.0, 4.0, 4.0]);
        let q = panoptic_quality(&pred, &gt).unwrap();
        assert_eq!(q.rq, 1.0);
        assert!((q.sq - 0.6).abs() < 1e-15 && (q.pq - 0.6).abs() < 1e-15);
        assert!(panoptic_quality(&gt, &one).is_err());
    }
}

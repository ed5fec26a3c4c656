//! Training and evaluation loops.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::config::Config;
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{connected_components, Panoptic, PanopticStats, panoptic_stats};
use crate::model::{cross_entropy_loss, forward, loss_and_grad, predict_classes, Geometry, ModelParams};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,loss,val_iou";

/// The last `window` frames of a sample.
pub fn window_of(sample: &Sample, window: usize) -> &[Vec<Tensor>] {
    &sample.frames[sample.frames.len().saturating_sub(window)..]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Vehicle IoU on the held-out samples, NaN without any.
    pub val_iou: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, self.loss, self.val_iou)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

fn check_samples(cfg: &Config, samples: &[Sample]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| s.frames.len() < cfg.window) {
        return Err(Error::config(
            "window",
            format!("sample {} has {} frames, window is {}", s.id, s.frames.len(), cfg.window),
        ));
    }
    Ok(())
}

/// Mean loss and summed-then-averaged gradients over a batch, accumulated in
/// batch order.
pub fn batch_gradient(
    params: &ModelParams,
    geo: &Geometry,
    batch: &[&Sample],
    window: usize,
) -> Result<(f64, ModelParams)> {
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        let (l, g) = loss_and_grad(params, geo, window_of(s, window), &s.labels)?;
        loss += l;
        for (acc, gi) in total.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(gi)?;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for t in total.tensors_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss * scale, total))
}

pub fn adam_config(cfg: &Config) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    }
}

/// Apply one optimizer step from precomputed gradients.
pub fn apply_step(params: &mut ModelParams, grads: &ModelParams, opt: &AdamConfig, state: &mut AdamState) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    adam_step(&mut p, &g, opt, state)
}

/// Train from the seeded initialization for `cfg.epochs` passes over `train`,
/// reshuffled every epoch. `on_epoch` sees each log row as it is produced.
pub fn train_samples(
    cfg: &Config,
    geo: &Geometry,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    check_samples(cfg, train)?;
    check_samples(cfg, val)?;
    let start = Instant::now();
    let mut params = ModelParams::init(cfg, cfg.seed);
    let opt = adam_config(cfg);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_4E55_FF1E);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&params, geo, &batch, cfg.window)?;
            apply_step(&mut params, &grads, &opt, &mut state)?;
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let val_iou = if val.is_empty() {
            f64::NAN
        } else {
            evaluate_samples(&params, geo, cfg, val)?.vehicle_iou()
        };
        let row = EpochLog {
            epoch,
            step,
            loss: if batches == 0 { f64::NAN } else { loss_sum / batches as f64 },
            val_iou,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        params,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-class IoU and vehicle panoptic quality, pooled over samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub class_iou: Vec<f64>,
    pub panoptic: Panoptic,
}

impl EvalReport {
    /// IoU of class 1, the vehicle class.
    pub fn vehicle_iou(&self) -> f64 {
        self.class_iou.get(1).copied().unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("samples,{}\n", self.samples));
        out.push_str(&format!("loss,{}\n", self.loss));
        for (c, v) in self.class_iou.iter().enumerate() {
            out.push_str(&format!("iou_class{c},{v}\n"));
        }
        let p = self.panoptic;
        out.push_str(&format!("pq,{}\nsq,{}\nrq,{}\n", p.pq, p.sq, p.rq));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("samples   {}\nloss      {:.6}\n", self.samples, self.loss);
        for (c, v) in self.class_iou.iter().enumerate() {
            out.push_str(&format!("IoU[{c}]    {:.4}\n", v));
        }
        let p = self.panoptic;
        out.push_str(&format!("PQ        {:.4}\nSQ        {:.4}\nRQ        {:.4}\n", p.pq, p.sq, p.rq));
        out
    }
}

/// Pooled metrics of a predicted class map against labels and GT instances.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    inter: Vec<usize>,
    union: Vec<usize>,
    stats: PanopticStats,
    loss_sum: f64,
    samples: usize,
}

impl MetricAccumulator {
    pub fn new(num_classes: usize) -> Self {
        MetricAccumulator {
            inter: vec![0; num_classes],
            union: vec![0; num_classes],
            ..Default::default()
        }
    }

    pub fn add(&mut self, pred: &Tensor, labels: &Tensor, instances: &Tensor, loss: f64) -> Result<()> {
        if pred.shape() != labels.shape() {
            return Err(Error::shape(format!("prediction {:?} vs labels {:?}", pred.shape(), labels.shape())));
        }
        for (&p, &g) in pred.data().iter().zip(labels.data()) {
            for c in 0..self.inter.len() {
                let (pc, gc) = (p == c as f64, g == c as f64);
                self.inter[c] += usize::from(pc && gc);
                self.union[c] += usize::from(pc || gc);
            }
        }
        let vehicle = pred.map(|v| f64::from(u8::from(v == 1.0)));
        let pred_instances = connected_components(&vehicle)?;
        self.stats.merge(&panoptic_stats(&pred_instances, instances)?);
        self.loss_sum += loss;
        self.samples += 1;
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            samples: self.samples,
            loss: if self.samples == 0 { f64::NAN } else { self.loss_sum / self.samples as f64 },
            class_iou: self
                .inter
                .iter()
                .zip(&self.union)
                .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
                .collect(),
            panoptic: self.stats.quality(),
        }
    }
}

pub fn evaluate_samples(params: &ModelParams, geo: &Geometry, cfg: &Config, samples: &[Sample]) -> Result<EvalReport> {
    check_samples(cfg, samples)?;
    let mut acc = MetricAccumulator::new(cfg.num_classes);
    for s in samples {
        let (logits, _) = forward(params, geo, window_of(s, cfg.window))?;
        let (loss, _) = cross_entropy_loss(&logits, &s.labels)?;
        acc.add(&predict_classes(&logits), &s.labels, &s.instances, loss)?;
    }
    Ok(acc.report())
}

/// Check that a dataset was generated with shapes the config can consume.
pub fn check_dataset(cfg: &Config, ds: &Dataset) -> Result<()> {
    if (ds.meta.img_h, ds.meta.img_w) != (cfg.img_h, cfg.img_w) {
        return Err(Error::config(
            "img_h",
            format!(
                "dataset images are {}x{}, config says {}x{}",
                ds.meta.img_h, ds.meta.img_w, cfg.img_h, cfg.img_w
            ),
        ));
    }
    if (ds.meta.grid_extent, ds.meta.grid_resolution) != (cfg.grid_extent, cfg.grid_resolution) {
        return Err(Error::config("grid_extent", "dataset labels use a different BEV grid"));
    }
    if ds.meta.window < cfg.window {
        return Err(Error::config(
            "window",
            format!("dataset samples hold {} frames, config asks for {}", ds.meta.window, cfg.window),
        ));
    }
    if ds.rig.cameras.len() != cfg.cameras {
        return Err(Error::config("cameras", format!("dataset rig has {} cameras", ds.rig.cameras.len())));
    }
    Ok(())
}

/// Load the train and validation samples with `window` frames each.
pub fn load_split(ds: &Dataset, val_scenes: usize, window: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, val) = ds.split(val_scenes);
    let load = |ids: &[crate::dataset::SampleId]| ids.iter().map(|&id| ds.load(id, window)).collect::<Result<Vec<_>>>();
    Ok((load(&train)?, load(&val)?))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Train on a dataset directory, writing `checkpoint.gcgr`, `metrics.csv` and
/// the effective `config.txt` into `out`.
pub fn train(cfg: &Config, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let ds = Dataset::open(data)?;
    check_dataset(cfg, &ds)?;
    let geo = Geometry::new(cfg, &ds.rig)?;
    let (train_set, val_set) = load_split(&ds, cfg.val_scenes, cfg.window)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write(&out.join("config.txt"))?;
    let csv_path = out.join("metrics.csv");
    let mut csv = create_file(&csv_path)?;
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let mut write_err = None;
    let outcome = train_samples(cfg, &geo, &train_set, &val_set, |row| {
        if let Err(e) = writeln!(csv, "{}", row.csv_row()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&csv_path, e));
    }
    crate::checkpoint::save(&out.join("checkpoint.gcgr"), &outcome.params)?;
    Ok(outcome)
}

/// Evaluate a checkpoint on every sample of a dataset.
pub fn evaluate(cfg: &Config, checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let params = crate::checkpoint::load(checkpoint, cfg)?;
    let ds = Dataset::open(data)?;
    check_dataset(cfg, &ds)?;
    let geo = Geometry::new(cfg, &ds.rig)?;
    let mut acc = MetricAccumulator::new(cfg.num_classes);
    for &id in &ds.samples {
        let s = ds.load(id, cfg.window)?;
        let (logits, _) = forward(&params, &geo, &s.frames)?;
        let (loss, _) = cross_entropy_loss(&logits, &s.labels)?;
        acc.add(&predict_classes(&logits), &s.labels, &s.instances, loss)?;
    }
    Ok(acc.report())
}

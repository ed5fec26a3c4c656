//! Temporal-module × window-length ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{Config, TemporalModule};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Geometry;
use crate::train::{check_dataset, evaluate_samples, load_split, train_samples};

pub const ABLATION_HEADER: &str = "module,T,iou,pq,train_seconds";
pub const WINDOWS: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub module: TemporalModule,
    pub window: usize,
    pub iou: f64,
    pub pq: f64,
    pub train_seconds: f64,
}

/// Grid cells in output order: the static model once at T = 1, then every
/// temporal module at every window length.
pub fn ablation_cells() -> Vec<(TemporalModule, usize)> {
    let mut cells = vec![(TemporalModule::Static, 1)];
    for module in [TemporalModule::Conv3d, TemporalModule::ConvGru, TemporalModule::GeoConvGru] {
        cells.extend(WINDOWS.iter().map(|&t| (module, t)));
    }
    cells
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.3}", r.module, r.window, r.iou, r.pq, r.train_seconds);
    }
    out
}

/// Train and evaluate one cell. Every cell starts from the same seed and
/// takes the same number of optimizer steps.
pub fn run_cell(
    base: &Config,
    rig: &crate::camera::CameraRig,
    module: TemporalModule,
    window: usize,
    train: &[Sample],
    val: &[Sample],
) -> Result<AblationRow> {
    let cfg = Config {
        temporal: module,
        window,
        ..base.clone()
    };
    let geo = Geometry::new(&cfg, rig)?;
    let outcome = train_samples(&cfg, &geo, train, val, |_| {})?;
    let report = evaluate_samples(&outcome.params, &geo, &cfg, val)?;
    Ok(AblationRow {
        module,
        window,
        iou: report.vehicle_iou(),
        pq: report.panoptic.pq,
        train_seconds: outcome.seconds,
    })
}

/// Run the full grid on a dataset and return rows in [`ablation_cells`] order.
/// Cells run in parallel on the current rayon pool; each is deterministic on
/// its own, so the numbers do not depend on the thread count.
pub fn run_ablation(cfg: &Config, data: &Path) -> Result<Vec<AblationRow>> {
    let ds = Dataset::open(data)?;
    let longest = *WINDOWS.iter().max().expect("non-empty");
    let probe = Config {
        window: longest,
        ..cfg.clone()
    };
    check_dataset(&probe, &ds)?;
    if cfg.val_scenes == 0 || cfg.val_scenes >= ds.meta.scenes {
        return Err(Error::config(
            "val_scenes",
            format!("need 1..{} held-out scenes for the ablation", ds.meta.scenes),
        ));
    }
    let (train, val) = load_split(&ds, cfg.val_scenes, longest)?;
    ablation_cells()
        .par_iter()
        .map(|&(module, t)| run_cell(cfg, &ds.rig, module, t, &train, &val))
        .collect()
}

pub fn write_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn find(rows: &[AblationRow], module: TemporalModule, window: usize) -> Option<&AblationRow> {
    rows.iter().find(|r| r.module == module && r.window == window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let cells = ablation_cells();
        assert_eq!(cells.len(), 13);
        assert_eq!(cells[0], (TemporalModule::Static, 1));
        assert_eq!(cells.iter().filter(|c| c.0 == TemporalModule::Static).count(), 1);
        assert!(cells.contains(&(TemporalModule::GeoConvGru, 5)));
    }

    #[test]
    fn csv_schema() {
        let rows = [AblationRow {
            module: TemporalModule::GeoConvGru,
            window: 5,
            iou: 0.25,
            pq: 0.125,
            train_seconds: 1.5,
        }];
        assert_eq!(to_csv(&rows), "module,T,iou,pq,train_seconds\ngeo-convgru,5,0.25,0.125,1.500\n");
    }
}

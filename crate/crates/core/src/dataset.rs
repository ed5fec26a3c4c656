//! On-disk dataset layout:
//!
//! ```text
//! manifest.txt                 one sample id per line (`scene_0003/0006`)
//! dataset.txt                  key = value metadata
//! rig.txt                      camera rig
//! scene_0003/img_<t>_<cam>.gtns
//! scene_0003/label_<t>.gtns
//! scene_0003/inst_<t>.gtns
//! ```
//!
//! A sample id names a scene and the frame that ends its window.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::CameraRig;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gtns;
use crate::tensor::Tensor;
use crate::world::{corrupt, generate_scene, rasterize_bev_gt, render_camera_view, Scene, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId {
    pub scene: usize,
    pub end_frame: usize,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scene_{:04}/{:04}", self.scene, self.end_frame)
    }
}

impl SampleId {
    fn parse(s: &str) -> Option<Self> {
        let (scene, frame) = s.strip_prefix("scene_")?.split_once('/')?;
        Some(SampleId {
            scene: scene.parse().ok()?,
            end_frame: frame.parse().ok()?,
        })
    }
}

pub fn scene_dir_name(scene: usize) -> String {
    format!("scene_{scene:04}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub scenes: usize,
    pub frames: usize,
    pub window: usize,
    pub cameras: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub grid_extent: f64,
    pub grid_resolution: f64,
}

impl DatasetMeta {
    fn to_text(&self) -> String {
        format!(
            "scenes = {}\nframes = {}\nwindow = {}\ncameras = {}\nimg_h = {}\nimg_w = {}\ngrid_extent = {}\ngrid_resolution = {}\n",
            self.scenes, self.frames, self.window, self.cameras, self.img_h, self.img_w, self.grid_extent, self.grid_resolution
        )
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut meta = DatasetMeta {
            scenes: 0,
            frames: 0,
            window: 0,
            cameras: 0,
            img_h: 0,
            img_w: 0,
            grid_extent: 0.0,
            grid_resolution: 0.0,
        };
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |_| Error::format(path, format!("bad value for `{k}`"));
            match k {
                "scenes" => meta.scenes = v.parse().map_err(bad)?,
                "frames" => meta.frames = v.parse().map_err(bad)?,
                "window" => meta.window = v.parse().map_err(bad)?,
                "cameras" => meta.cameras = v.parse().map_err(bad)?,
                "img_h" => meta.img_h = v.parse().map_err(bad)?,
                "img_w" => meta.img_w = v.parse().map_err(bad)?,
                "grid_extent" => meta.grid_extent = v.parse().map_err(|_| Error::format(path, "bad grid_extent"))?,
                "grid_resolution" => {
                    meta.grid_resolution = v.parse().map_err(|_| Error::format(path, "bad grid_resolution"))?
                }
                other => return Err(Error::format(path, format!("unknown key `{other}`"))),
            }
        }
        Ok(meta)
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Camera images per frame (`[frame][camera]`), with sensor corruption applied.
pub fn render_scene(scene: &Scene, cfg: &Config, seed: u64) -> Vec<Vec<Tensor>> {
    let jobs: Vec<(usize, usize)> = (0..scene.frames)
        .flat_map(|f| (0..scene.rig.cameras.len()).map(move |c| (f, c)))
        .collect();
    let mut images: Vec<Tensor> = jobs
        .par_iter()
        .map(|&(f, c)| render_camera_view(scene, f, &scene.rig.cameras[c], cfg.img_h, cfg.img_w))
        .collect();
    // Corruption draws from one stream in (frame, camera) order.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0DE_5EED_C0DE);
    for img in &mut images {
        corrupt(img, cfg.pixel_noise, cfg.camera_dropout, &mut rng);
    }
    let cams = scene.rig.cameras.len();
    let mut frames = Vec::with_capacity(scene.frames);
    let mut it = images.into_iter();
    for _ in 0..scene.frames {
        frames.push(it.by_ref().take(cams).collect());
    }
    frames
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate `count` scenes from `cfg` and write them to `out`. Returns the
/// number of samples listed in the manifest.
pub fn generate_dataset(cfg: &Config, count: usize, out: &Path) -> Result<usize> {
    let world = WorldConfig::from_config(cfg)?;
    create_dir(out)?;
    let grid = cfg.grid();
    let mut manifest = String::new();
    let mut samples = 0;
    for i in 0..count {
        let seed = scene_seed(cfg.seed, i);
        let scene = generate_scene(seed, &world)?;
        let images = render_scene(&scene, cfg, seed);
        let dir = out.join(scene_dir_name(i));
        create_dir(&dir)?;
        for (f, cams) in images.iter().enumerate() {
            for (c, img) in cams.iter().enumerate() {
                gtns::write(&dir.join(format!("img_{f}_{c}.gtns")), img)?;
            }
            let (labels, instances) = rasterize_bev_gt(&scene, f, &grid);
            gtns::write(&dir.join(format!("label_{f}.gtns")), &labels)?;
            gtns::write(&dir.join(format!("inst_{f}.gtns")), &instances)?;
        }
        for end in cfg.window - 1..scene.frames {
            manifest.push_str(&format!("{}\n", SampleId { scene: i, end_frame: end }));
            samples += 1;
        }
    }
    let meta = DatasetMeta {
        scenes: count,
        frames: cfg.scene_frames,
        window: cfg.window,
        cameras: cfg.cameras,
        img_h: cfg.img_h,
        img_w: cfg.img_w,
        grid_extent: cfg.grid_extent,
        grid_resolution: cfg.grid_resolution,
    };
    write_text(&out.join("manifest.txt"), &manifest)?;
    write_text(&out.join("dataset.txt"), &meta.to_text())?;
    world.rig.write(&out.join("rig.txt"))?;
    Ok(samples)
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    /// `[frame][camera]` images, oldest frame first.
    pub frames: Vec<Vec<Tensor>>,
    pub labels: Tensor,
    pub instances: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub rig: CameraRig,
    pub samples: Vec<SampleId>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("dataset.txt");
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = DatasetMeta::parse(&meta_text, &meta_path)?;
        let rig = CameraRig::read(&dir.join("rig.txt"))?;
        let manifest_path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let samples = manifest
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                SampleId::parse(l)
                    .ok_or_else(|| Error::format(&manifest_path, format!("bad sample id `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            meta,
            rig,
            samples,
        })
    }

    /// Samples of scenes `< scenes - val_scenes` and the rest, in manifest order.
    pub fn split(&self, val_scenes: usize) -> (Vec<SampleId>, Vec<SampleId>) {
        let cut = self.meta.scenes.saturating_sub(val_scenes);
        self.samples.iter().partition(|s| s.scene < cut)
    }

    /// Load the `window` frames ending at the sample's end frame.
    pub fn load(&self, id: SampleId, window: usize) -> Result<Sample> {
        if window == 0 || window > id.end_frame + 1 {
            return Err(Error::InvalidInput(format!(
                "sample {id} cannot provide a window of {window} frames"
            )));
        }
        let dir = self.dir.join(scene_dir_name(id.scene));
        let start = id.end_frame + 1 - window;
        let frames = (start..=id.end_frame)
            .map(|f| {
                (0..self.rig.cameras.len())
                    .map(|c| gtns::read(&dir.join(format!("img_{f}_{c}.gtns"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample {
            id,
            frames,
            labels: gtns::read(&dir.join(format!("label_{}.gtns", id.end_frame)))?,
            instances: gtns::read(&dir.join(format!("inst_{}.gtns", id.end_frame)))?,
        })
    }
}

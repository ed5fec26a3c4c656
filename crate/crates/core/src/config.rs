//! Line-based `key = value` configuration with `#` comments.
//!
//! One file drives every command; keys a command does not use are ignored by
//! it, but keys nobody knows are rejected.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalModule {
    /// Present frame only, no temporal fusion.
    Static,
    /// Linear 3D convolution spanning the window.
    Conv3d,
    ConvGru,
    /// ConvGRU whose output is weighted by the visibility mask.
    GeoConvGru,
}

impl TemporalModule {
    pub const ALL: [TemporalModule; 4] = [
        TemporalModule::Static,
        TemporalModule::Conv3d,
        TemporalModule::ConvGru,
        TemporalModule::GeoConvGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemporalModule::Static => "static",
            TemporalModule::Conv3d => "conv3d",
            TemporalModule::ConvGru => "convgru",
            TemporalModule::GeoConvGru => "geo-convgru",
        }
    }

    pub fn uses_mask(self) -> bool {
        self == TemporalModule::GeoConvGru
    }
}

impl fmt::Display for TemporalModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemporalModule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TemporalModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown module `{s}` (static, conv3d, convgru, geo-convgru)"))
    }
}

macro_rules! config_struct {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $field: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|e| {
                            Error::config(key, format!("cannot parse `{value}`: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($field), self.$field)); )*
                out
            }
        }
    };
}

config_struct! {
    seed: u64 = 7,

    // synthetic world
    scene_frames: usize = 8,
    /// Temporal field: frames per sample, oldest first.
    window: usize = 5,
    cameras: usize = 6,
    img_h: usize = 96,
    img_w: usize = 160,
    fov_deg: f64 = 70.0,
    cam_height: f64 = 1.5,
    vehicles_min: usize = 3,
    vehicles_max: usize = 6,
    max_speed: f64 = 8.0,
    spawn_r_min: f64 = 5.0,
    spawn_r_max: f64 = 20.0,
    dt: f64 = 0.5,
    /// Moving vehicles spawned across the visibility boundary at `depth_max`.
    distractors: usize = 0,
    pixel_noise: f64 = 0.0,
    camera_dropout: f64 = 0.0,

    // BEV geometry
    grid_extent: f64 = 100.0,
    grid_resolution: f64 = 0.5,
    depth_min: f64 = 1.0,
    depth_max: f64 = 40.0,
    depth_bins: usize = 16,

    // model
    temporal: TemporalModule = TemporalModule::GeoConvGru,
    channels: usize = 16,
    hidden: usize = 16,
    gru_units: usize = 2,
    kernel: usize = 3,
    encoder_channels: usize = 8,
    head_hidden: usize = 16,
    num_classes: usize = 2,
    epsilon: f64 = 0.1,

    // training
    epochs: usize = 10,
    batch_size: usize = 1,
    lr: f64 = 1e-3,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    /// The last `val_scenes` scenes of a dataset are held out.
    val_scenes: usize = 0,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", idx + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("scene_frames", self.scene_frames),
            ("cameras", self.cameras),
            ("depth_bins", self.depth_bins),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("gru_units", self.gru_units),
            ("encoder_channels", self.encoder_channels),
            ("head_hidden", self.head_hidden),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.window > self.scene_frames {
            return Err(Error::config("window", "exceeds scene_frames"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need background plus at least one class"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel", "must be odd"));
        }
        for (key, v) in [("img_h", self.img_h), ("img_w", self.img_w)] {
            if v == 0 || v % crate::model::FEATURE_STRIDE != 0 {
                return Err(Error::config(key, "must be a positive multiple of 8"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config("epsilon", "must lie in (0, 1]"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::config("fov_deg", "must lie in (0, 180)"));
        }
        if !(self.depth_min > 0.0 && (self.depth_bins == 1 || self.depth_max > self.depth_min)) {
            return Err(Error::config("depth_max", "need 0 < depth_min < depth_max"));
        }
        if self.vehicles_min > self.vehicles_max {
            return Err(Error::config("vehicles_min", "exceeds vehicles_max"));
        }
        if !(self.spawn_r_min >= 0.0 && self.spawn_r_max > self.spawn_r_min) {
            return Err(Error::config("spawn_r_max", "need 0 <= spawn_r_min < spawn_r_max"));
        }
        if !(self.max_speed >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::config("max_speed", "speed must be >= 0 and dt > 0"));
        }
        if !(0.0..=1.0).contains(&self.camera_dropout) || !(self.pixel_noise >= 0.0) {
            return Err(Error::config("camera_dropout", "dropout in [0, 1], noise >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        crate::camera::BevGridSpec::square(self.grid_extent, self.grid_resolution)
            .map_err(|e| Error::config("grid_extent", e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> crate::camera::BevGridSpec {
        crate::camera::BevGridSpec::square(self.grid_extent, self.grid_resolution)
            .expect("validated grid")
    }

    pub fn depth_bin_centers(&self) -> Vec<f64> {
        crate::camera::uniform_depth_bins(self.depth_min, self.depth_max, self.depth_bins)
            .expect("validated depth bins")
    }

    pub fn feat_h(&self) -> usize {
        self.img_h / crate::model::FEATURE_STRIDE
    }

    pub fn feat_w(&self) -> usize {
        self.img_w / crate::model::FEATURE_STRIDE
    }
}

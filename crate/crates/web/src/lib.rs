//! Browser demo: visibility mask of a camera ring, a scalar ConvGRU trace,
//! and a synthetic scene seen from its cameras and from above.

use geobev::camera::{BevGridSpec, CameraRig};
use geobev::convgru::{convgru_cell, GruUnit};
use geobev::geo_mask::build_geo_mask;
use geobev::model::FEATURE_STRIDE;
use geobev::world::{generate_scene, rasterize_bev_gt, render_camera_view, WorldConfig};
use geobev::{Config, Tensor};
use wasm_bindgen::prelude::*;

/// An RGBA raster ready for `ImageData`.
#[wasm_bindgen]
pub struct Raster {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    valid: usize,
}

#[wasm_bindgen]
impl Raster {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Mask rasters: number of valid cells. Scene rasters: vehicle cells.
    #[wasm_bindgen(getter)]
    pub fn valid(&self) -> usize {
        self.valid
    }
}

fn demo_config() -> Config {
    Config {
        img_h: 48,
        img_w: 80,
        grid_extent: 40.0,
        grid_resolution: 0.5,
        depth_min: 2.0,
        depth_max: 15.0,
        depth_bins: 14,
        spawn_r_min: 4.0,
        spawn_r_max: 14.0,
        distractors: 2,
        ..Config::default()
    }
}

/// Grid cell (row, col) drawn at display pixel (y, x): forward up, left on the left.
fn grid_to_display(grid: &BevGridSpec, y: usize, x: usize) -> (usize, usize) {
    (grid.rows - 1 - y, grid.cols - 1 - x)
}

pub fn mask_raster(cameras: usize, fov_deg: f64, depth_max: f64, epsilon: f64) -> Result<Raster, String> {
    let mut cfg = demo_config();
    cfg.cameras = cameras;
    cfg.fov_deg = fov_deg;
    cfg.depth_max = depth_max;
    cfg.epsilon = epsilon;
    cfg.validate().map_err(|e| e.to_string())?;
    let rig = CameraRig::ring(cameras, cfg.img_h, cfg.img_w, fov_deg, cfg.cam_height).map_err(|e| e.to_string())?;
    let cloud = rig
        .frustums(cfg.feat_h(), cfg.feat_w(), FEATURE_STRIDE, &cfg.depth_bin_centers())
        .map_err(|e| e.to_string())?;
    let grid = cfg.grid();
    let mask = build_geo_mask(&cloud, &grid, epsilon).map_err(|e| e.to_string())?;
    let mut rgba = Vec::with_capacity(grid.num_cells() * 4);
    for y in 0..grid.rows {
        for x in 0..grid.cols {
            let (r, c) = grid_to_display(&grid, y, x);
            let v = (mask.weights.data()[r * grid.cols + c] * 255.0).round() as u8;
            rgba.extend_from_slice(&[v, v, v, 255]);
        }
    }
    Ok(Raster { width: grid.cols, height: grid.rows, rgba, valid: mask.valid_count() })
}

/// Unit-weight 1x1 ConvGRU on a single scalar. Returns `[h, z, r]` per input.
pub fn gru_trace(weights: &[f64], inputs: &[f64]) -> Result<Vec<f64>, String> {
    let [w_z, u_z, w_r, u_r, w, u] = weights else {
        return Err(format!("expected 6 weights, got {}", weights.len()));
    };
    let k = |v: f64| Tensor::full(&[1, 1, 1, 1], v).expect("1x1 kernel");
    let unit = GruUnit { w_z: k(*w_z), u_z: k(*u_z), w_r: k(*w_r), u_r: k(*u_r), w: k(*w), u: k(*u) };
    let mut h = Tensor::zeros(&[1, 1, 1]);
    let mut out = Vec::with_capacity(inputs.len() * 3);
    for &x in inputs {
        let f = Tensor::full(&[1, 1, 1], x).expect("scalar map");
        let (next, cache) = convgru_cell(&f, &h, &unit).map_err(|e| e.to_string())?;
        out.extend([next.data()[0], cache.update_gate().data()[0], cache.reset_gate().data()[0]]);
        h = next;
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Camera views tiled three per row.
pub fn scene_cameras(seed: u64, frame: usize) -> Result<Raster, String> {
    let cfg = demo_config();
    let world = WorldConfig::from_config(&cfg).map_err(|e| e.to_string())?;
    let scene = generate_scene(seed, &world).map_err(|e| e.to_string())?;
    let frame = frame.min(scene.frames - 1);
    let (h, w) = (cfg.img_h, cfg.img_w);
    let per_row = 3;
    let tile_rows = scene.rig.cameras.len().div_ceil(per_row);
    let (width, height) = (per_row * w, tile_rows * h);
    let mut rgba = vec![0u8; width * height * 4];
    for (i, cam) in scene.rig.cameras.iter().enumerate() {
        let img = render_camera_view(&scene, frame, cam, h, w);
        let (oy, ox) = ((i / per_row) * h, (i % per_row) * w);
        for y in 0..h {
            for x in 0..w {
                let p = ((oy + y) * width + ox + x) * 4;
                for ch in 0..3 {
                    rgba[p + ch] = to_byte(img.data()[ch * h * w + y * w + x]);
                }
                rgba[p + 3] = 255;
            }
        }
    }
    Ok(Raster { width, height, rgba, valid: scene.vehicles.len() })
}

/// Ground-truth instances from above, visible cells tinted.
pub fn scene_bev(seed: u64, frame: usize) -> Result<Raster, String> {
    let cfg = demo_config();
    let world = WorldConfig::from_config(&cfg).map_err(|e| e.to_string())?;
    let scene = generate_scene(seed, &world).map_err(|e| e.to_string())?;
    let frame = frame.min(scene.frames - 1);
    let grid = cfg.grid();
    let (labels, instances) = rasterize_bev_gt(&scene, frame, &grid);
    let cloud = scene
        .rig
        .frustums(cfg.feat_h(), cfg.feat_w(), FEATURE_STRIDE, &cfg.depth_bin_centers())
        .map_err(|e| e.to_string())?;
    let mask = build_geo_mask(&cloud, &grid, 0.0).map_err(|e| e.to_string())?;
    let mut rgba = Vec::with_capacity(grid.num_cells() * 4);
    let mut vehicle_cells = 0;
    for y in 0..grid.rows {
        for x in 0..grid.cols {
            let (r, c) = grid_to_display(&grid, y, x);
            let i = r * grid.cols + c;
            let px = if labels.data()[i] == 1.0 {
                vehicle_cells += 1;
                let id = instances.data()[i] as usize;
                let color = scene.vehicles[id - 1].color;
                [to_byte(color[0]), to_byte(color[1]), to_byte(color[2])]
            } else if mask.is_valid(r, c) {
                [52, 60, 72]
            } else {
                [20, 22, 26]
            };
            rgba.extend_from_slice(&[px[0], px[1], px[2], 255]);
        }
    }
    Ok(Raster { width: grid.cols, height: grid.rows, rgba, valid: vehicle_cells })
}

#[wasm_bindgen(js_name = maskRaster)]
pub fn mask_raster_js(cameras: usize, fov_deg: f64, depth_max: f64, epsilon: f64) -> Result<Raster, JsError> {
    mask_raster(cameras, fov_deg, depth_max, epsilon).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = gruTrace)]
pub fn gru_trace_js(weights: &[f64], inputs: &[f64]) -> Result<Vec<f64>, JsError> {
    gru_trace(weights, inputs).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sceneCameras)]
pub fn scene_cameras_js(seed: u32, frame: usize) -> Result<Raster, JsError> {
    scene_cameras(seed as u64, frame).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sceneBev)]
pub fn scene_bev_js(seed: u32, frame: usize) -> Result<Raster, JsError> {
    scene_bev(seed as u64, frame).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_weight_trace_matches_hand_value() {
        let out = gru_trace(&[1.0; 6], &[1.0]).unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out[0] - s * 1.0f64.tanh()).abs() < 1e-12);
        assert!((out[1] - s).abs() < 1e-12);
        assert!((out[2] - s).abs() < 1e-12);
    }

    #[test]
    fn trace_rejects_wrong_weight_count() {
        assert!(gru_trace(&[1.0; 5], &[1.0]).is_err());
    }

    #[test]
    fn mask_has_two_levels_and_a_blind_center() {
        let r = mask_raster(6, 70.0, 15.0, 0.2).unwrap();
        assert_eq!(r.rgba.len(), r.width * r.height * 4);
        let eps = (0.2f64 * 255.0).round() as u8;
        assert!(r.rgba.chunks(4).all(|p| p[0] == 255 || p[0] == eps));
        let centre = ((r.height / 2) * r.width + r.width / 2) * 4;
        assert_eq!(r.rgba[centre], eps);
        assert!(r.valid > 0 && r.valid < r.width * r.height);
    }

    #[test]
    fn more_range_sees_more_cells() {
        let near = mask_raster(6, 70.0, 8.0, 0.1).unwrap();
        let far = mask_raster(6, 70.0, 15.0, 0.1).unwrap();
        assert!(far.valid > near.valid);
    }

    #[test]
    fn bad_mask_inputs_are_errors() {
        assert!(mask_raster(0, 70.0, 15.0, 0.1).is_err());
        assert!(mask_raster(6, 70.0, 15.0, 1.5).is_err());
    }

    #[test]
    fn scene_rasters_are_deterministic() {
        let a = scene_cameras(3, 2).unwrap();
        let b = scene_cameras(3, 2).unwrap();
        assert_eq!((a.width, a.height), (240, 96));
        assert_eq!(a.rgba, b.rgba);
        let bev = scene_bev(3, 2).unwrap();
        assert!(bev.valid > 0);
        assert_eq!(bev.rgba, scene_bev(3, 2).unwrap().rgba);
    }
}

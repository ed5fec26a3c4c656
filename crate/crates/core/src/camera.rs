//! Pinhole cameras, frustum construction and BEV rasterization.
//!
//! Camera frame: x right, y down, z along the optical axis.
//! Ego frame: x forward, y left, z up, origin at the vehicle centre on the ground.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: Matrix3<f64>,
    /// Camera-to-ego rotation.
    pub rotation: Matrix3<f64>,
    /// Camera origin in the ego frame, meters.
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        name: impl Into<String>,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidConfig("intrinsics must be upper-triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidConfig(
                "intrinsics need positive focal lengths and K[2][2] = 1".into(),
            ));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).amax() > ORTHO_TOL
            || (rotation.determinant() - 1.0).abs() > ORTHO_TOL
        {
            return Err(Error::InvalidConfig("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(Camera {
            name: name.into(),
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Level camera at `position` whose optical axis points along ego yaw `yaw_rad`
    /// (0 = forward, positive = to the left).
    pub fn looking(
        name: impl Into<String>,
        intrinsics: Matrix3<f64>,
        yaw_rad: f64,
        position: Vector3<f64>,
    ) -> Result<Self> {
        Self::new(name, intrinsics, level_rotation(yaw_rad), position)
    }

    /// Ego-frame point to pixel coordinates and camera-frame depth.
    pub fn project(&self, ego: &Vector3<f64>) -> (f64, f64, f64) {
        let cam = self.rotation.transpose() * (ego - self.translation);
        let (u, v) = project_pixel(&cam, &self.intrinsics);
        (u, v, cam.z)
    }

    /// Horizontal field of view for an image `width` pixels wide.
    pub fn horizontal_fov(&self, width: usize) -> f64 {
        let k = &self.intrinsics;
        let left = (k[(0, 2)] / k[(0, 0)]).atan();
        let right = ((width as f64 - k[(0, 2)]) / k[(0, 0)]).atan();
        left + right
    }
}

/// Rotation taking camera axes (right, down, forward) to a level ego heading `yaw`.
pub fn level_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::from_columns(&[
        Vector3::new(s, -c, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(c, s, 0.0),
    ])
}

pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}

/// `depth * K⁻¹ (u, v, 1)ᵀ`; the returned z equals `depth`.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, k: &Matrix3<f64>) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let (fx, fy, cx, cy, skew) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], k[(0, 1)]);
    let y = (v - cy) / fy;
    let x = (u - cx - skew * y) / fx;
    Ok(Vector3::new(x * depth, y * depth, depth))
}

pub fn project_pixel(p: &Vector3<f64>, k: &Matrix3<f64>) -> (f64, f64) {
    let h = k * p;
    (h.x / h.z, h.y / h.z)
}

pub fn cam_to_ego(p: &Vector3<f64>, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Vector3<f64> {
    rotation * p + translation
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGridSpec {
    pub extent_x: f64,
    pub extent_y: f64,
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl BevGridSpec {
    pub fn new(extent_x: f64, extent_y: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && extent_x > 0.0 && extent_y > 0.0) {
            return Err(Error::InvalidConfig("grid extents and resolution must be positive".into()));
        }
        let cells = |extent: f64| -> Result<usize> {
            let n = (extent / resolution).round();
            if (n * resolution - extent).abs() > 1e-9 * extent.max(1.0) || n < 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "extent {extent} m is not a whole number of {resolution} m cells"
                )));
            }
            Ok(n as usize)
        };
        Ok(BevGridSpec {
            extent_x,
            extent_y,
            resolution,
            rows: cells(extent_x)?,
            cols: cells(extent_y)?,
        })
    }

    pub fn square(extent: f64, resolution: f64) -> Result<Self> {
        Self::new(extent, extent, resolution)
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Ego-frame (x, y) of a cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (row as f64 + 0.5) * self.resolution - self.extent_x / 2.0,
            (col as f64 + 0.5) * self.resolution - self.extent_y / 2.0,
        )
    }
}

impl Default for BevGridSpec {
    fn default() -> Self {
        BevGridSpec::square(100.0, 0.5).expect("default grid")
    }
}

/// Half-open floor rasterization of an ego point; height is ignored.
pub fn ego_to_bev_index(p: &Vector3<f64>, grid: &BevGridSpec) -> Option<(usize, usize)> {
    let r = ((p.x + grid.extent_x / 2.0) / grid.resolution).floor();
    let c = ((p.y + grid.extent_y / 2.0) / grid.resolution).floor();
    (r >= 0.0 && c >= 0.0 && r < grid.rows as f64 && c < grid.cols as f64)
        .then_some((r as usize, c as usize))
}

/// `count` depths evenly spaced over `[min, max]`, endpoints included.
pub fn uniform_depth_bins(min: f64, max: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 || !(min > 0.0) || (count > 1 && !(max > min)) {
        return Err(Error::InvalidConfig(format!(
            "depth bins need 0 < min < max and count >= 1 (got {min}, {max}, {count})"
        )));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    let step = (max - min) / (count - 1) as f64;
    Ok((0..count).map(|i| min + step * i as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrustumPoint {
    pub u: f64,
    pub v: f64,
    pub depth_bin: usize,
    pub ego: Vector3<f64>,
}

/// One camera's frustum. Points are indexed `(d * feat_h + y) * feat_w + x`,
/// matching the `[D, h, w]` layout of lifted features.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrustum {
    pub feat_h: usize,
    pub feat_w: usize,
    pub depth_bins: usize,
    pub points: Vec<FrustumPoint>,
}

pub type FrustumCloud = Vec<CameraFrustum>;

impl CameraFrustum {
    pub fn point(&self, d: usize, y: usize, x: usize) -> &FrustumPoint {
        &self.points[(d * self.feat_h + y) * self.feat_w + x]
    }
}

pub fn build_frustum(
    camera: &Camera,
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    depth_bins: &[f64],
) -> Result<CameraFrustum> {
    if depth_bins.is_empty() {
        return Err(Error::InvalidConfig("empty depth bin list".into()));
    }
    if depth_bins.windows(2).any(|w| !(w[1] > w[0])) || !(depth_bins[0] > 0.0) {
        return Err(Error::InvalidConfig(
            "depth bins must be positive and strictly increasing".into(),
        ));
    }
    let mut points = Vec::with_capacity(feat_h * feat_w * depth_bins.len());
    for (d, &depth) in depth_bins.iter().enumerate() {
        for y in 0..feat_h {
            for x in 0..feat_w {
                let u = (x as f64 + 0.5) * stride as f64;
                let v = (y as f64 + 0.5) * stride as f64;
                let cam = unproject_pixel(u, v, depth, &camera.intrinsics)?;
                points.push(FrustumPoint {
                    u,
                    v,
                    depth_bin: d,
                    ego: cam_to_ego(&cam, &camera.rotation, &camera.translation),
                });
            }
        }
    }
    Ok(CameraFrustum {
        feat_h,
        feat_w,
        depth_bins: depth_bins.len(),
        points,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    /// `count` level cameras evenly spaced in yaw, sharing one pinhole model.
    pub fn ring(count: usize, img_h: usize, img_w: usize, hfov_deg: f64, height: f64) -> Result<Self> {
        if count == 0 || !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::InvalidConfig(format!(
                "ring rig needs >= 1 camera and 0 < fov < 180 (got {count}, {hfov_deg})"
            )));
        }
        let f = (img_w as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let k = intrinsics(f, f, img_w as f64 / 2.0, img_h as f64 / 2.0);
        let cameras = (0..count)
            .map(|i| {
                let yaw = std::f64::consts::TAU * i as f64 / count as f64;
                Camera::looking(format!("cam{i}"), k, yaw, Vector3::new(0.0, 0.0, height))
            })
            .collect::<Result<_>>()?;
        Ok(CameraRig { cameras })
    }

    pub fn frustums(
        &self,
        feat_h: usize,
        feat_w: usize,
        stride: usize,
        depth_bins: &[f64],
    ) -> Result<FrustumCloud> {
        self.cameras
            .iter()
            .map(|c| build_frustum(c, feat_h, feat_w, stride, depth_bins))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# camera rig: K row-major, R camera->ego row-major, t meters\n");
        let fmt = |vals: &[f64]| vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        for c in &self.cameras {
            let k: Vec<f64> = c.intrinsics.transpose().iter().copied().collect();
            let r: Vec<f64> = c.rotation.transpose().iter().copied().collect();
            let _ = writeln!(out, "camera {}", c.name);
            let _ = writeln!(out, "K {}", fmt(&k));
            let _ = writeln!(out, "R {}", fmt(&r));
            let _ = writeln!(out, "t {}", fmt(c.translation.as_slice()));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        struct Partial {
            name: String,
            k: Option<Matrix3<f64>>,
            r: Option<Matrix3<f64>>,
            t: Option<Vector3<f64>>,
        }
        let bad = |line: usize, msg: String| Error::format(path, format!("line {line}: {msg}"));
        let finish = |p: Partial, line: usize| -> Result<Camera> {
            let missing = |what: &str| bad(line, format!("camera `{}` missing {what}", p.name));
            Camera::new(
                p.name.clone(),
                p.k.ok_or_else(|| missing("K"))?,
                p.r.ok_or_else(|| missing("R"))?,
                p.t.ok_or_else(|| missing("t"))?,
            )
            .map_err(|e| bad(line, format!("camera `{}`: {e}", p.name)))
        };
        let mut cameras = Vec::new();
        let mut current: Option<Partial> = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            if key == "camera" {
                if rest.len() != 1 {
                    return Err(bad(lineno, "expected `camera <name>`".into()));
                }
                if let Some(p) = current.take() {
                    cameras.push(finish(p, lineno)?);
                }
                current = Some(Partial {
                    name: rest[0].to_string(),
                    k: None,
                    r: None,
                    t: None,
                });
                continue;
            }
            let cam = current
                .as_mut()
                .ok_or_else(|| bad(lineno, format!("`{key}` before any `camera` line")))?;
            let vals = rest
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(lineno, format!("bad number: {e}")))?;
            let want = if key == "t" { 3 } else { 9 };
            if vals.len() != want {
                return Err(bad(lineno, format!("`{key}` needs {want} values, got {}", vals.len())));
            }
            match key {
                "K" => cam.k = Some(Matrix3::from_row_slice(&vals)),
                "R" => cam.r = Some(Matrix3::from_row_slice(&vals)),
                "t" => cam.t = Some(Vector3::from_row_slice(&vals)),
                other => return Err(bad(lineno, format!("unknown key `{other}`"))),
            }
        }
        if let Some(p) = current.take() {
            cameras.push(finish(p, text.lines().count())?);
        }
        Ok(CameraRig { cameras })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn unproject_examples() {
        let id = Matrix3::identity();
        assert_eq!(unproject_pixel(0.0, 0.0, 2.0, &id).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        let k = intrinsics(2.0, 2.0, 0.0, 0.0);
        assert_eq!(unproject_pixel(1.0, 1.0, 4.0, &k).unwrap(), Vector3::new(2.0, 2.0, 4.0));
        let k = intrinsics(100.0, 90.0, 64.0, 48.0);
        assert_eq!(unproject_pixel(64.0, 48.0, 7.0, &k).unwrap(), Vector3::new(0.0, 0.0, 7.0));
        assert!(matches!(unproject_pixel(1.0, 1.0, 0.0, &k), Err(Error::InvalidDepth(_))));
        assert!(unproject_pixel(1.0, 1.0, -2.0, &k).is_err());
    }

    #[test]
    fn cam_to_ego_examples() {
        let p = Vector3::new(0.3, -1.0, 2.0);
        assert_eq!(cam_to_ego(&p, &Matrix3::identity(), &Vector3::zeros()), p);
        let q = cam_to_ego(&Vector3::new(0.0, 0.0, 2.0), &Matrix3::identity(), &Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(q, Vector3::new(1.0, 0.0, 2.0));
        let (s, c) = std::f64::consts::FRAC_PI_2.sin_cos();
        let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let r = cam_to_ego(&Vector3::new(1.0, 0.0, 0.0), &rz, &Vector3::zeros());
        assert_abs_diff_eq!(r, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn camera_validation() {
        let k = intrinsics(10.0, 10.0, 5.0, 5.0);
        assert!(Camera::new("a", k, Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let mut bad_k = k;
        bad_k[(1, 0)] = 1.0;
        assert!(Camera::new("a", bad_k, Matrix3::identity(), Vector3::zeros()).is_err());
        assert!(Camera::looking("a", k, 0.7, Vector3::zeros()).is_ok());
    }

    #[test]
    fn frustum_counts_and_depths() {
        let cam = Camera::new("id", Matrix3::identity(), Matrix3::identity(), Vector3::zeros()).unwrap();
        let f = build_frustum(&cam, 2, 2, 8, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.points.len(), 12);
        let f = build_frustum(&cam, 2, 3, 1, &[1.0, 2.0]).unwrap();
        assert!(f.points.iter().all(|p| p.ego.z == 1.0 || p.ego.z == 2.0));
        assert!(build_frustum(&cam, 2, 2, 8, &[]).is_err());
        assert!(build_frustum(&cam, 2, 2, 8, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn default_rig_points_respect_min_depth() {
        let rig = CameraRig::ring(6, 96, 160, 70.0, 1.5).unwrap();
        let bins = uniform_depth_bins(1.0, 40.0, 16).unwrap();
        for (cam, fr) in rig.cameras.iter().zip(rig.frustums(12, 20, 8, &bins).unwrap()) {
            for p in &fr.points {
                assert!((p.ego - cam.translation).norm() >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn bev_index_conventions() {
        let g = BevGridSpec::default();
        assert_eq!((g.rows, g.cols), (200, 200));
        assert_eq!(ego_to_bev_index(&Vector3::new(0.0, 0.0, 3.0), &g), Some((100, 100)));
        assert_eq!(ego_to_bev_index(&Vector3::new(-50.0, -50.0, 0.0), &g), Some((0, 0)));
        assert_eq!(ego_to_bev_index(&Vector3::new(50.0, 50.0, 0.0), &g), None);
        assert_eq!(ego_to_bev_index(&Vector3::new(24.9, -10.2, 0.0), &g), Some((149, 79)));
        assert!(BevGridSpec::square(10.0, 0.3).is_err());
    }

    #[test]
    fn level_rotation_forward_axis() {
        let r = level_rotation(0.0);
        assert_eq!(r * Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rig_text_roundtrip() {
        let rig = CameraRig::ring(6, 96, 160, 70.0, 1.5).unwrap();
        let back = CameraRig::parse(&rig.to_text(), Path::new("rig.txt")).unwrap();
        assert_eq!(back, rig);
        let err = CameraRig::parse("camera a\nK 1 0 0 0 1 0 0 0 1\nR 1 0 0\n", Path::new("r")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(CameraRig::parse("K 1 0 0 0 1 0 0 0 1\n", Path::new("r")).is_err());
    }

    proptest! {
        #[test]
        fn unproject_project_roundtrip(u in -50.0..250.0f64, v in -50.0..150.0f64, d in 0.1..80.0f64,
                                       f in 20.0..400.0f64, cx in 0.0..200.0f64, cy in 0.0..120.0f64) {
            let k = intrinsics(f, f * 1.1, cx, cy);
            let p = unproject_pixel(u, v, d, &k).unwrap();
            prop_assert_eq!(p.z, d);
            let (pu, pv) = project_pixel(&p, &k);
            prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }

        #[test]
        fn rigid_transform_preserves_distance(yaw in -3.2..3.2f64, tx in -5.0..5.0f64,
                                              a in proptest::array::uniform3(-20.0..20.0f64),
                                              b in proptest::array::uniform3(-20.0..20.0f64)) {
            let r = level_rotation(yaw);
            let t = Vector3::new(tx, 1.0, 1.5);
            let (pa, pb) = (Vector3::from(a), Vector3::from(b));
            let d0 = (pa - pb).norm();
            let d1 = (cam_to_ego(&pa, &r, &t) - cam_to_ego(&pb, &r, &t)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn bev_index_shift_consistency(i in -90i32..80, frac in 0.05..0.95f64, y in -49.0..49.0f64, k in 0usize..8) {
            let g = BevGridSpec::default();
            let x = (i as f64 + frac) * g.resolution;
            let base = ego_to_bev_index(&Vector3::new(x, y, 0.0), &g);
            let shifted = ego_to_bev_index(&Vector3::new(x + k as f64 * g.resolution, y, 0.0), &g);
            if let (Some((r0, c0)), Some((r1, c1))) = (base, shifted) {
                prop_assert_eq!(r1, r0 + k);
                prop_assert_eq!(c1, c0);
            }
        }
    }
}

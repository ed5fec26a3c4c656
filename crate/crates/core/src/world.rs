//! Synthetic driving scenes: box vehicles on a flat ground plane around a
//! stationary ego vehicle, seen by a ring of cameras.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{BevGridSpec, Camera, CameraRig};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SKY: [f64; 3] = [0.62, 0.76, 0.92];
pub const GROUND: [f64; 3] = [0.32, 0.33, 0.30];
/// Image shown for a camera that dropped a frame.
pub const DROPPED: f64 = 0.5;

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.12],
    [0.12, 0.35, 0.85],
    [0.95, 0.80, 0.10],
    [0.90, 0.90, 0.88],
    [0.10, 0.65, 0.30],
    [0.05, 0.05, 0.08],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vehicle {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Pose at frame 0.
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Meters per second along `heading`.
    pub speed: f64,
    pub color: [f64; 3],
}

impl Vehicle {
    /// Centre position at time `seconds`, exact constant-velocity motion.
    pub fn position_at(&self, seconds: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + self.speed * c * seconds, self.y + self.speed * s * seconds)
    }

    fn bounding_radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// True when ego point `(px, py)` lies inside the footprint at `seconds`.
    pub fn contains(&self, px: f64, py: f64, seconds: f64) -> bool {
        let (cx, cy) = self.position_at(seconds);
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (px - cx, py - cy);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.length / 2.0 && across.abs() <= self.width / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub vehicles: Vec<Vehicle>,
    pub frames: usize,
    pub dt: f64,
    pub rig: CameraRig,
}

impl Scene {
    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub frames: usize,
    pub dt: f64,
    pub vehicles_min: usize,
    pub vehicles_max: usize,
    pub max_speed: f64,
    pub spawn_r_min: f64,
    pub spawn_r_max: f64,
    pub distractors: usize,
    /// Radius of the visibility boundary distractors straddle.
    pub boundary_radius: f64,
    pub rig: CameraRig,
}

impl WorldConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(WorldConfig {
            frames: cfg.scene_frames,
            dt: cfg.dt,
            vehicles_min: cfg.vehicles_min,
            vehicles_max: cfg.vehicles_max,
            max_speed: cfg.max_speed,
            spawn_r_min: cfg.spawn_r_min,
            spawn_r_max: cfg.spawn_r_max,
            distractors: cfg.distractors,
            boundary_radius: cfg.depth_max,
            rig: CameraRig::ring(cfg.cameras, cfg.img_h, cfg.img_w, cfg.fov_deg, cfg.cam_height)?,
        })
    }
}

const MAX_ATTEMPTS: usize = 2000;

fn clear_of(v: &Vehicle, others: &[Vehicle], frames: usize, dt: f64) -> bool {
    others.iter().all(|o| {
        (0..frames).all(|f| {
            let t = f as f64 * dt;
            let (ax, ay) = v.position_at(t);
            let (bx, by) = o.position_at(t);
            (ax - bx).hypot(ay - by) > v.bounding_radius() + o.bounding_radius() + 0.5
        })
    })
}

/// Deterministic scene for `seed`. The first vehicle is parked, the second
/// moves (when `max_speed > 0`), the rest are parked or moving at random.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.vehicles_min..=cfg.vehicles_max);
    let duration = (cfg.frames.saturating_sub(1)) as f64 * cfg.dt;
    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(count + cfg.distractors);
    for i in 0..count + cfg.distractors {
        let distractor = i >= count;
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let speed = if distractor {
                cfg.max_speed
            } else if i == 0 || cfg.max_speed == 0.0 {
                0.0
            } else if i == 1 || rng.gen_bool(0.5) {
                rng.gen_range(0.4 * cfg.max_speed..=cfg.max_speed)
            } else {
                0.0
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (radius, heading) = if distractor {
                // Cross the visibility boundary radially at mid-sequence.
                let inward = rng.gen_bool(0.5);
                let heading = if inward { angle + std::f64::consts::PI } else { angle };
                let r_mid = cfg.boundary_radius + rng.gen_range(-2.0..2.0);
                let r0 = r_mid - (if inward { -1.0 } else { 1.0 }) * speed * duration / 2.0;
                (r0, heading)
            } else {
                (
                    rng.gen_range(cfg.spawn_r_min..cfg.spawn_r_max),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            };
            let palette = PALETTE[rng.gen_range(0..PALETTE.len())];
            let v = Vehicle {
                length: rng.gen_range(3.8..4.8),
                width: rng.gen_range(1.7..2.0),
                height: rng.gen_range(1.4..1.8),
                x: radius * angle.cos(),
                y: radius * angle.sin(),
                heading,
                speed,
                color: palette,
            };
            let in_annulus = distractor
                || (0..cfg.frames).all(|f| {
                    let (x, y) = v.position_at(f as f64 * cfg.dt);
                    let r = x.hypot(y);
                    r - v.bounding_radius() >= cfg.spawn_r_min && r + v.bounding_radius() <= cfg.spawn_r_max
                });
            if in_annulus && clear_of(&v, &vehicles, cfg.frames, cfg.dt) {
                vehicles.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place vehicle {} of {} in the spawn annulus [{}, {}] m after {MAX_ATTEMPTS} attempts",
                i + 1,
                count + cfg.distractors,
                cfg.spawn_r_min,
                cfg.spawn_r_max
            )));
        }
    }
    Ok(Scene {
        vehicles,
        frames: cfg.frames,
        dt: cfg.dt,
        rig: cfg.rig.clone(),
    })
}

/// Ray/box intersection in the vehicle frame. Returns hit distance and a
/// shading factor for the face that was hit.
fn intersect(v: &Vehicle, seconds: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let (cx, cy) = v.position_at(seconds);
    let (s, c) = v.heading.sin_cos();
    let to_local = |x: f64, y: f64| (x * c + y * s, -x * s + y * c);
    let (ox, oy) = to_local(origin.x - cx, origin.y - cy);
    let (dx, dy) = to_local(dir.x, dir.y);
    let o = [ox, oy, origin.z];
    let d = [dx, dy, dir.z];
    let lo = [-v.length / 2.0, -v.width / 2.0, 0.0];
    let hi = [v.length / 2.0, v.width / 2.0, v.height];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let shade = match axis {
        2 => 1.0,
        0 => 0.8,
        _ => 0.65,
    };
    Some((t_near, shade))
}

/// Flat-shaded render of one camera. Each pixel centre casts a ray; the
/// nearest box face wins, otherwise ground below the horizon and sky above.
pub fn render_camera_view(scene: &Scene, frame: usize, camera: &Camera, img_h: usize, img_w: usize) -> Tensor {
    let seconds = scene.time(frame);
    let k_inv = camera
        .intrinsics
        .try_inverse()
        .expect("validated intrinsics are invertible");
    let plane = img_h * img_w;
    let mut img = vec![0.0; 3 * plane];
    for v in 0..img_h {
        for u in 0..img_w {
            let ray_cam = k_inv * Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0);
            let dir = camera.rotation * ray_cam;
            let mut best: Option<(f64, [f64; 3])> = None;
            for veh in &scene.vehicles {
                if let Some((t, shade)) = intersect(veh, seconds, &camera.translation, &dir) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, veh.color.map(|ch| ch * shade)));
                    }
                }
            }
            let rgb = match best {
                Some((_, rgb)) => rgb,
                None if dir.z < 0.0 => GROUND,
                None => SKY,
            };
            for ch in 0..3 {
                img[ch * plane + v * img_w + u] = rgb[ch];
            }
        }
    }
    Tensor::new(&[3, img_h, img_w], img).expect("image shape")
}

/// Per-frame sensor corruption: Gaussian pixel noise, or the whole camera
/// dropping out with probability `dropout`.
pub fn corrupt(image: &mut Tensor, noise: f64, dropout: f64, rng: &mut impl Rng) {
    if dropout > 0.0 && rng.gen_bool(dropout) {
        image.data_mut().iter_mut().for_each(|v| *v = DROPPED);
        return;
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("finite noise");
        for v in image.data_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// Semantic labels (1 = vehicle) and instance ids (vehicle index + 1) of the
/// cells whose centre lies inside a footprint.
pub fn rasterize_bev_gt(scene: &Scene, frame: usize, grid: &BevGridSpec) -> (Tensor, Tensor) {
    let seconds = scene.time(frame);
    let mut labels = vec![0.0; grid.num_cells()];
    let mut instances = vec![0.0; grid.num_cells()];
    for (id, veh) in scene.vehicles.iter().enumerate() {
        let (cx, cy) = veh.position_at(seconds);
        let reach = veh.bounding_radius();
        let to_row = |x: f64| ((x + grid.extent_x / 2.0) / grid.resolution).floor();
        let to_col = |y: f64| ((y + grid.extent_y / 2.0) / grid.resolution).floor();
        let r0 = to_row(cx - reach).max(0.0) as usize;
        let r1 = (to_row(cx + reach) + 1.0).clamp(0.0, grid.rows as f64) as usize;
        let c0 = to_col(cy - reach).max(0.0) as usize;
        let c1 = (to_col(cy + reach) + 1.0).clamp(0.0, grid.cols as f64) as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                let (px, py) = grid.cell_center(r, c);
                if veh.contains(px, py, seconds) {
                    labels[r * grid.cols + c] = 1.0;
                    instances[r * grid.cols + c] = (id + 1) as f64;
                }
            }
        }
    }
    (
        Tensor::new(&[grid.rows, grid.cols], labels).expect("grid shape"),
        Tensor::new(&[grid.rows, grid.cols], instances).expect("grid shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldConfig {
        WorldConfig::from_config(&Config::default()).unwrap()
    }

    fn lone(v: Vehicle) -> Scene {
        Scene { vehicles: vec![v], frames: 2, dt: 0.5, rig: world().rig }
    }

    fn car(x: f64, y: f64, heading: f64, speed: f64) -> Vehicle {
        Vehicle { length: 4.0, width: 2.0, height: 1.5, x, y, heading, speed, color: PALETTE[0] }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_scene(11, &world()).unwrap(), generate_scene(11, &world()).unwrap());
        assert_ne!(generate_scene(11, &world()).unwrap(), generate_scene(12, &world()).unwrap());
    }

    #[test]
    fn moving_and_static_present() {
        for seed in 0..20 {
            let s = generate_scene(seed, &world()).unwrap();
            assert!(s.vehicles.iter().any(|v| v.speed == 0.0));
            assert!(s.vehicles.iter().any(|v| v.speed > 0.0));
            for v in &s.vehicles {
                for f in 0..s.frames {
                    let (x, y) = v.position_at(s.time(f));
                    assert!(x.hypot(y) <= 20.0 && x.hypot(y) >= 5.0);
                }
            }
        }
    }

    #[test]
    fn zero_speed_is_static() {
        let mut w = world();
        w.max_speed = 0.0;
        let s = generate_scene(3, &w).unwrap();
        assert!(s.vehicles.iter().all(|v| v.position_at(0.0) == v.position_at(s.time(s.frames - 1))));
    }

    #[test]
    fn infeasible_annulus_errors() {
        let mut w = world();
        w.spawn_r_min = 5.0;
        w.spawn_r_max = 6.0;
        assert!(matches!(generate_scene(1, &w), Err(Error::Generation(_))));
    }

    #[test]
    fn kinematics() {
        let v = car(10.0, 0.0, 0.0, 5.0);
        assert_eq!(v.position_at(0.5), (12.5, 0.0));
    }

    #[test]
    fn empty_scene_two_bands() {
        let mut s = lone(car(0.0, 0.0, 0.0, 0.0));
        s.vehicles.clear();
        let cam = &s.rig.cameras[0];
        let img = render_camera_view(&s, 0, cam, 96, 160);
        let plane = 96 * 160;
        for v in 0..96 {
            let expect = if v < 48 { SKY } else { GROUND };
            for u in 0..160 {
                for ch in 0..3 {
                    assert_eq!(img.data()[ch * plane + v * 160 + u], expect[ch]);
                }
            }
        }
    }

    #[test]
    fn vehicle_behind_camera_is_absent() {
        let s = lone(car(-10.0, 0.0, 0.0, 0.0));
        let empty = Scene { vehicles: vec![], ..s.clone() };
        let cam = &s.rig.cameras[0];
        assert_eq!(render_camera_view(&s, 0, cam, 96, 160), render_camera_view(&empty, 0, cam, 96, 160));
    }

    #[test]
    fn centred_vehicle_projects_near_principal_column() {
        let s = lone(car(12.0, 0.0, 0.3, 0.0));
        let cam = &s.rig.cameras[0];
        let img = render_camera_view(&s, 0, cam, 96, 160);
        let (mut sum, mut n) = (0.0, 0.0);
        for v in 0..96 {
            for u in 0..160 {
                let px = [0, 1, 2].map(|ch| img.data()[ch * 96 * 160 + v * 160 + u]);
                if px != SKY && px != GROUND {
                    sum += u as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 50.0);
        // Corner-projection oracle: mean column of the 8 projected box corners.
        let veh = &s.vehicles[0];
        let (sn, cs) = veh.heading.sin_cos();
        let mut corner_u = 0.0;
        for (a, b, z) in [(-1.0, -1.0, 0.0), (-1.0, 1.0, 0.0), (1.0, -1.0, 0.0), (1.0, 1.0, 0.0),
                          (-1.0, -1.0, 1.5), (-1.0, 1.0, 1.5), (1.0, -1.0, 1.5), (1.0, 1.0, 1.5)] {
            let lx = a * veh.length / 2.0;
            let ly = b * veh.width / 2.0;
            let p = Vector3::new(veh.x + lx * cs - ly * sn, veh.y + lx * sn + ly * cs, z);
            corner_u += cam.project(&p).0 / 8.0;
        }
        assert!((sum / n - 80.0).abs() < 4.0, "centroid column {}", sum / n);
        assert!((corner_u - 80.0).abs() < 4.0, "corner column {corner_u}");
    }

    #[test]
    fn axis_aligned_footprint_block() {
        let s = lone(car(0.0, 0.0, 0.0, 0.0));
        let grid = BevGridSpec::square(20.0, 0.5).unwrap();
        let (labels, inst) = rasterize_bev_gt(&s, 0, &grid);
        assert_eq!(labels.sum(), 32.0);
        let rows: Vec<usize> = (0..grid.num_cells()).filter(|i| labels.data()[*i] == 1.0).map(|i| i / grid.cols).collect();
        let cols: Vec<usize> = (0..grid.num_cells()).filter(|i| labels.data()[*i] == 1.0).map(|i| i % grid.cols).collect();
        assert_eq!(rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1, 8);
        assert_eq!(cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1, 4);
        assert_eq!(inst.max_abs(), 1.0);
        let empty = Scene { vehicles: vec![], ..s };
        assert_eq!(rasterize_bev_gt(&empty, 0, &grid).0.max_abs(), 0.0);
    }

    #[test]
    fn rotated_footprint_area() {
        let grid = BevGridSpec::square(40.0, 0.5).unwrap();
        for heading in [0.2, 0.7, 1.1, 2.5] {
            let s = lone(car(3.3, -2.1, heading, 0.0));
            let (labels, _) = rasterize_bev_gt(&s, 0, &grid);
            let expect = 4.0 * 2.0 / (0.5 * 0.5);
            // Within one cell-row (length / resolution cells) of the analytic area.
            let slack = 4.0 / 0.5;
            assert!((labels.sum() - expect).abs() <= slack, "heading {heading}: {}", labels.sum());
        }
    }

    #[test]
    fn dropout_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut img = Tensor::zeros(&[3, 2, 2]);
        corrupt(&mut img, 0.0, 1.0, &mut rng);
        assert!(img.data().iter().all(|&v| v == DROPPED));
        let mut img = Tensor::zeros(&[3, 8, 8]);
        corrupt(&mut img, 0.1, 0.0, &mut rng);
        assert!(img.max_abs() > 0.0 && img.max_abs() < 1.0);
    }
}

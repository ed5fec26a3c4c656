use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geobev::camera::{
    cam_to_ego, ego_to_bev_index, intrinsics, level_rotation, uniform_depth_bins, BevGridSpec, Camera, CameraRig,
};
use geobev::convgru::{convgru_cell, convgru_forward, ConvGruParams};
use geobev::geo_mask::{apply_geo_mask, apply_geo_mask_backward, build_geo_mask};
use geobev::lift_splat::{lift, SplatPlan};
use geobev::metrics::{iou, panoptic_quality};
use geobev::tensor::{conv2d, sigmoid, softmax_channel, tanh_map};
use geobev::world::{generate_scene, rasterize_bev_gt, WorldConfig};
use geobev::{Config, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn rig(rng: &mut ChaCha8Rng, cams: usize) -> CameraRig {
    let cameras = (0..cams)
        .map(|i| {
            let f = rng.gen_range(20.0..60.0);
            let pos = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.5);
            Camera::looking(format!("c{i}"), intrinsics(f, f, 16.0, 12.0), rng.gen_range(0.0..6.3), pos).unwrap()
        })
        .collect();
    CameraRig { cameras }
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_kernel_is_identity(seed: u64, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[c, h, w], 10.0);
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.data_mut()[(i * c + i) * 9 + 4] = 1.0;
        }
        prop_assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_is_linear(seed: u64, c in 1usize..4, co in 1usize..4, h in 1usize..6, w in 1usize..6,
                      a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random(&mut rng, &[c, h, w], 1.0), random(&mut rng, &[c, h, w], 1.0));
        let k = random(&mut rng, &[co, c, 3, 3], 1.0);
        let mut mix = x.scale(a);
        mix.axpy(b, &y).unwrap();
        let mut expect = conv2d(&x, &k).unwrap().scale(a);
        expect.axpy(b, &conv2d(&y, &k).unwrap()).unwrap();
        prop_assert!(close(&conv2d(&mix, &k).unwrap(), &expect, 1e-12));
    }

    // f64 tanh rounds to exactly 1 beyond |x| ~ 19, so inputs stay below that.
    #[test]
    fn activation_ranges(seed: u64, scale in 0.1..15.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4, 5], scale);
        prop_assert!(sigmoid(&x).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(tanh_map(&x).data().iter().all(|&v| v > -1.0 && v < 1.0));
        let p = softmax_channel(&x);
        for i in 0..20 {
            let s: f64 = (0..3).map(|c| p.data()[c * 20 + i]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rigid_transform_preserves_distance(yaw in 0.0..6.3f64, t in prop::array::uniform3(-5.0..5.0f64),
                                          p in prop::array::uniform3(-20.0..20.0f64),
                                          q in prop::array::uniform3(-20.0..20.0f64)) {
        let r: Matrix3<f64> = level_rotation(yaw);
        let t = Vector3::from(t);
        let (p, q) = (Vector3::from(p), Vector3::from(q));
        let d = (cam_to_ego(&p, &r, &t) - cam_to_ego(&q, &r, &t)).norm();
        prop_assert!((d - (p - q).norm()).abs() <= 1e-9);
    }

    #[test]
    fn bev_index_is_translation_consistent(x in -20.0..20.0f64, y in -20.0..20.0f64, k in -10i32..10) {
        let grid = BevGridSpec::square(40.0, 0.5).unwrap();
        let p = Vector3::new(x, y, 0.0);
        let moved = Vector3::new(x + k as f64 * grid.resolution, y, 0.0);
        if let (Some((r0, c0)), Some((r1, c1))) = (ego_to_bev_index(&p, &grid), ego_to_bev_index(&moved, &grid)) {
            prop_assert_eq!(c0, c1);
            // Rounding at a cell border may move the point by one cell at most.
            prop_assert!((r1 as i64 - r0 as i64 - k as i64).abs() <= 1);
            let on_border = ((x + 20.0) / 0.5).fract() < 1e-9 || ((x + 20.0) / 0.5).fract() > 1.0 - 1e-9;
            if !on_border {
                prop_assert_eq!(r1 as i64 - r0 as i64, k as i64);
            }
        }
    }

    #[test]
    fn splat_is_additive_over_disjoint_cameras(seed: u64, cams in 2usize..5, c in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = rig(&mut rng, cams);
        let grid = BevGridSpec::square(30.0, 1.0).unwrap();
        let cloud = rig.frustums(3, 4, 8, &[2.0, 6.0, 11.0]).unwrap();
        let lifted: Vec<Tensor> = (0..cams)
            .map(|_| lift(&random(&mut rng, &[c, 3, 4], 2.0), &random(&mut rng, &[3, 3, 4], 2.0)).unwrap())
            .collect();
        let cut = rng.gen_range(1..cams);
        let all = SplatPlan::new(&cloud, &grid).splat(&lifted).unwrap();
        let mut parts = SplatPlan::new(&cloud[..cut], &grid).splat(&lifted[..cut]).unwrap();
        parts.add_assign(&SplatPlan::new(&cloud[cut..], &grid).splat(&lifted[cut..]).unwrap()).unwrap();
        prop_assert!(close(&all, &parts, 1e-12));
        // Same plan, same inputs: bit-identical.
        prop_assert_eq!(SplatPlan::new(&cloud, &grid).splat(&lifted).unwrap(), all);
    }

    #[test]
    fn mask_rebuild_monotone_and_backward(seed: u64, cams in 1usize..5, eps in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = rig(&mut rng, cams + 1);
        let grid = BevGridSpec::square(30.0, 1.0).unwrap();
        let cloud = rig.frustums(3, 4, 8, &[2.0, 6.0, 11.0]).unwrap();
        let mask = build_geo_mask(&cloud[..cams], &grid, eps).unwrap();
        prop_assert_eq!(&build_geo_mask(&cloud[..cams], &grid, eps).unwrap(), &mask);
        let more = build_geo_mask(&cloud, &grid, eps).unwrap();
        for (a, b) in mask.weights.data().iter().zip(more.weights.data()) {
            prop_assert!(*a != 1.0 || *b == 1.0);
        }
        let g = random(&mut rng, &[2, grid.rows, grid.cols], 3.0);
        let back = apply_geo_mask_backward(&g, &mask).unwrap();
        for (i, (bv, gv)) in back.data().iter().zip(g.data()).enumerate() {
            prop_assert_eq!(*bv, gv * mask.weights.data()[i % grid.num_cells()]);
        }
        let one = build_geo_mask(&cloud, &grid, 1.0).unwrap();
        prop_assert_eq!(apply_geo_mask(&g, &one).unwrap(), g);
    }

    #[test]
    fn convgru_gates_bounds_and_shapes(seed: u64, c_in in 1usize..3, c_h in 1usize..3, units in 1usize..3,
                                       t in 1usize..5, h in 1usize..5, w in 1usize..5, scale in 0.1..4.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ConvGruParams::init(c_in, c_h, units, 3, &mut rng).unwrap();
        let window: Vec<Tensor> = (0..t).map(|_| random(&mut rng, &[c_in, h, w], scale)).collect();
        let (out, _) = convgru_forward(&window, &params).unwrap();
        prop_assert_eq!(out.shape(), &[c_h, h, w][..]);

        let unit = &params.units[0];
        let mut state = random(&mut rng, &[c_h, h, w], scale);
        for f in &window {
            let (next, cache) = convgru_cell(f, &state, unit).unwrap();
            prop_assert!(cache.update_gate().data().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(cache.reset_gate().data().iter().all(|&v| v > 0.0 && v < 1.0));
            let bound = state.max_abs().max(1.0);
            prop_assert!(next.data().iter().all(|v| v.abs() <= bound));
            state = next;
        }

        let zeros: Vec<Tensor> = (0..t).map(|_| Tensor::zeros(&[c_in, h, w])).collect();
        let (fixed, _) = convgru_forward(&zeros, &params).unwrap();
        prop_assert!(fixed.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn panoptic_identity_and_relabeling(seed: u64, h in 1usize..9, w in 1usize..9, ids in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = || Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0..=ids) as f64).collect()).unwrap();
        let (pred, gt) = (grid(), grid());
        let q = panoptic_quality(&pred, &gt).unwrap();
        prop_assert_eq!(q.pq, q.sq * q.rq);
        // Reverse the id order on both sides.
        let relabel = |t: &Tensor| t.map(|v| if v == 0.0 { 0.0 } else { (ids + 1) as f64 - v + 10.0 });
        prop_assert_eq!(panoptic_quality(&relabel(&pred), &relabel(&gt)).unwrap(), q);
        let binary = |t: &Tensor| t.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
        prop_assert_eq!(iou(&binary(&pred), &binary(&gt)).unwrap(), iou(&binary(&gt), &binary(&pred)).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Vehicles well inside the camera range sit on cells the mask marks valid.
    #[test]
    fn visible_vehicles_lie_on_valid_cells(seed: u64) {
        let cfg = Config {
            img_h: 96,
            img_w: 160,
            grid_extent: 40.0,
            grid_resolution: 1.0,
            depth_min: 2.0,
            depth_max: 16.0,
            depth_bins: 29,
            spawn_r_min: 5.0,
            spawn_r_max: 11.0,
            vehicles_min: 1,
            vehicles_max: 3,
            max_speed: 0.0,
            ..Config::default()
        };
        let world = WorldConfig::from_config(&cfg).unwrap();
        let scene = generate_scene(seed, &world).unwrap();
        let grid = cfg.grid();
        let bins = uniform_depth_bins(cfg.depth_min, cfg.depth_max, cfg.depth_bins).unwrap();
        let cloud = scene.rig.frustums(cfg.feat_h(), cfg.feat_w(), 8, &bins).unwrap();
        let mask = build_geo_mask(&cloud, &grid, 0.1).unwrap();
        let (labels, _) = rasterize_bev_gt(&scene, 0, &grid);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                if labels.data()[r * grid.cols + c] == 1.0 {
                    let (x, y) = grid.cell_center(r, c);
                    if x.hypot(y) < 13.0 {
                        prop_assert!(mask.is_valid(r, c), "vehicle cell ({}, {}) at {:.1} m is masked", r, c, x.hypot(y));
                    }
                }
            }
        }
    }
}

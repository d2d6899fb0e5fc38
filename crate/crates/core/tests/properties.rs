mod common;

use proptest::prelude::*;

use splatpower::curve::{display_curve, fit_mm, minimize_total_power, rendering_curve, IsoQualityCurve, MmParams};
use splatpower::power::{display_power, DisplayModel};
use splatpower::prune::{compute_prune_scores, prune, prune_count};
use splatpower::quality::{psnr, ssim};
use splatpower::raster::{Framebuffer, RasterSettings, Rasterizer, TileGrid, TileMask};
use splatpower::scene::{load_scene, save_scene, SceneFormat};

use common::small_scene;

fn bits(fb: &Framebuffer) -> Vec<u64> {
    fb.pixels().flat_map(|p| p.map(f64::to_bits)).collect()
}

fn mm() -> impl Strategy<Value = MmParams> {
    (0.05f64..2.0, 0.02f64..3.0).prop_map(|(v, k)| MmParams { v, k })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_does_not_depend_on_worker_count(seed in 0u64..1000, count in 0usize..80, threads in 2usize..6) {
        let (scene, poses) = small_scene(count, seed, 37, 1);
        let a = Rasterizer::with_threads(RasterSettings::default(), 1).unwrap().render(&scene, &poses[0]);
        let b = Rasterizer::with_threads(RasterSettings::default(), threads).unwrap().render(&scene, &poses[0]);
        prop_assert_eq!(bits(&a.framebuffer), bits(&b.framebuffer));
        prop_assert_eq!(a.counters(), b.counters());
    }

    #[test]
    fn counters_add_over_stages_and_tiles(seed in 0u64..1000, count in 1usize..60, split in 0u64..u64::MAX) {
        let (scene, poses) = small_scene(count, seed, 40, 1);
        let r = Rasterizer::default();
        let full = r.render(&scene, &poses[0]);
        prop_assert_eq!(full.counters(), full.stats.point_stage + full.stats.tile_stage);

        let grid = TileGrid::new(40, 40, RasterSettings::default().tile_size);
        let pick: Vec<bool> = (0..grid.tile_count()).map(|t| split >> (t % 64) & 1 == 1).collect();
        let a = r.render_masked(&scene, &poses[0], Some(&TileMask::new(pick.clone())));
        let b = r.render_masked(&scene, &poses[0], Some(&TileMask::new(pick.iter().map(|v| !v).collect())));
        prop_assert_eq!(a.stats.tile_stage + b.stats.tile_stage, full.stats.tile_stage);
        prop_assert_eq!(a.stats.blend_events + b.stats.blend_events, full.stats.blend_events);
    }

    #[test]
    fn more_points_never_mean_less_work(seed in 0u64..1000, count in 2usize..60, keep in 0.0f64..1.0) {
        let (scene, poses) = small_scene(count, seed, 32, 1);
        let n = ((count as f64 * keep) as usize).min(count);
        let mut subset = scene.clone();
        subset.points.truncate(n);
        let r = Rasterizer::default();
        let (small, big) = (r.render(&subset, &poses[0]), r.render(&scene, &poses[0]));
        prop_assert!(small.stats.tile_pairs <= big.stats.tile_pairs);
        prop_assert!(small.stats.blend_events <= big.stats.blend_events);
        let (c, d) = (small.counters(), big.counters());
        prop_assert!(c.flop_count <= d.flop_count && c.sram_bytes <= d.sram_bytes && c.dram_bytes <= d.dram_bytes);
    }

    #[test]
    fn blend_weights_stay_within_transmittance(seed in 0u64..1000, count in 0usize..80) {
        let (scene, poses) = small_scene(count, seed, 32, 1);
        let (out, w) = Rasterizer::default().render_with_weights(&scene, &poses[0], None);
        for total in w.pixel_totals() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&total));
        }
        for p in out.framebuffer.pixels() {
            prop_assert!(p.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn ply_round_trip(seed in 0u64..1000, count in 0usize..40) {
        let (scene, _) = small_scene(count, seed, 8, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        save_scene(&scene, &path).unwrap();
        let back = load_scene(&path, SceneFormat::SplatPly).unwrap();
        prop_assert_eq!(back.len(), scene.len());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * (1.0 + b.abs());
        for (p, q) in back.points.iter().zip(&scene.points) {
            for k in 0..3 {
                prop_assert!(close(p.position[k], q.position[k]));
                prop_assert!(close(p.scale[k], q.scale[k]));
                prop_assert!(close(p.sh_dc[k], q.sh_dc[k]));
            }
            prop_assert!(close(p.opacity, q.opacity));
            prop_assert!(p.rotation.angle_to(&q.rotation) < 1e-5);
        }
        // A second pass changes nothing beyond float32 rounding.
        let again = dir.path().join("t.ply");
        save_scene(&back, &again).unwrap();
        let twice = load_scene(&again, SceneFormat::SplatPly).unwrap();
        let tight = |a: f64, b: f64| (a - b).abs() <= 4.0 * f32::EPSILON as f64 * (1.0 + b.abs());
        for (p, q) in twice.points.iter().zip(&back.points) {
            prop_assert_eq!(p.position, q.position);
            prop_assert_eq!(p.sh_dc, q.sh_dc);
            for k in 0..3 {
                prop_assert!(tight(p.scale[k], q.scale[k]));
            }
            prop_assert!(tight(p.opacity, q.opacity));
            prop_assert!(p.rotation.angle_to(&q.rotation) < 1e-6);
        }
    }

    #[test]
    fn pruning_removes_exactly_the_requested_share(seed in 0u64..1000, count in 1usize..60, rho in 0.0f64..0.99) {
        let (scene, poses) = small_scene(count, seed, 24, 2);
        let scores = compute_prune_scores(&scene, &poses).unwrap();
        let pruned = prune(&scene, &scores, rho).unwrap();
        prop_assert_eq!(pruned.len(), count - prune_count(count, rho));
        prop_assert!(prune_count(count, rho) as f64 >= rho * count as f64 - 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn curves_are_monotone_and_convex(d in mm(), r in mm(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let (lo, hi) = if x < y { (x, y) } else { (y, x) };
        let mid = 0.5 * (lo + hi);
        prop_assert!(display_curve(d, lo) <= display_curve(d, hi) + 1e-15);
        prop_assert!(rendering_curve(r, lo) >= rendering_curve(r, hi) - 1e-15);
        prop_assert!(display_curve(d, mid) <= 0.5 * (display_curve(d, lo) + display_curve(d, hi)) + 1e-12);
        prop_assert!(rendering_curve(r, mid) <= 0.5 * (rendering_curve(r, lo) + rendering_curve(r, hi)) + 1e-12);
    }

    #[test]
    fn closed_form_beats_every_grid_point(d in mm(), r in mm(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let bounds = if a < b { [a, b] } else { [b, a] };
        let curve = IsoQualityCurve::from_params(d, r);
        let opt = minimize_total_power(&curve, bounds).unwrap();
        prop_assert!(opt.rho_star >= bounds[0] && opt.rho_star <= bounds[1]);
        for i in 0..=2000 {
            let x = bounds[0] + (bounds[1] - bounds[0]) * i as f64 / 2000.0;
            prop_assert!(opt.total_watts <= display_curve(d, x) + rendering_curve(r, x) + 1e-12);
        }
    }

    #[test]
    fn noise_free_fit_recovers_parameters(v in 0.3f64..1.5, k in 0.05f64..1.0) {
        let u: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let y: Vec<f64> = u.iter().map(|&x| 1.0 - v * x / (k + x)).collect();
        let fit = fit_mm(&u, &y).unwrap();
        prop_assert!((fit.params.v / v - 1.0).abs() < 1e-6);
        prop_assert!((fit.params.k / k - 1.0).abs() < 1e-6);
    }

    #[test]
    fn display_power_is_affine_in_channel_means(rgb in prop::array::uniform3(0.0f64..1.0), c in prop::array::uniform4(0.0f64..1.0)) {
        let model = DisplayModel { alpha: c[0], beta: c[1], gamma: c[2], s: c[3] };
        let fb = Framebuffer::filled(5, 3, rgb);
        let expect = c[0] * rgb[0] + c[1] * rgb[1] + c[2] * rgb[2] + c[3];
        prop_assert!((display_power(&fb, &model) - expect).abs() <= 1e-12);
    }

    #[test]
    fn quality_metrics_are_symmetric(a in prop::collection::vec(0.0f64..1.0, 3 * 144), b in prop::collection::vec(0.0f64..1.0, 3 * 144)) {
        let img = |v: &[f64]| Framebuffer::from_raw(12, 12, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
        let (x, y) = (img(&a), img(&b));
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }
}

#![allow(dead_code)]

use splatpower::power::DisplayModel;
use splatpower::curve::OptimizeSettings;
use splatpower::scene::{generate_synthetic_scene, sample_poses, CameraPose, ColorDistribution, GeneratorSpec, PoseSpec, Scene};

/// Quality target used on the benchmark scene, dB.
pub const BENCH_Q_MIN: f64 = 29.0;

/// The synthetic benchmark: 4000 mostly opaque, blue-leaning splats seen from 8 poses at 128x128.
pub fn benchmark() -> (Scene, Vec<CameraPose>) {
    let mut spec = GeneratorSpec::new(4000, 7);
    spec.colors = ColorDistribution::BlueHeavy;
    spec.opacity_range = [0.6, 0.99];
    spec.log_scale_mean = -2.5;
    let scene = generate_synthetic_scene(&spec).unwrap();
    let poses = sample_poses(&scene, &PoseSpec { width: 128, height: 128, ..PoseSpec::with_count(8) }, 7).unwrap();
    (scene, poses)
}

pub fn bench_settings() -> OptimizeSettings {
    OptimizeSettings { display: DisplayModel::EXAMPLE, ..OptimizeSettings::default() }
}

/// `count` generated points (possibly none); cameras are framed on at least 8 points
/// from the same generator so tiny scenes still get sensible poses.
pub fn small_scene(count: usize, seed: u64, res: usize, n_poses: usize) -> (Scene, Vec<CameraPose>) {
    let mut scene = generate_synthetic_scene(&GeneratorSpec::new(count.max(8), seed)).unwrap();
    let poses = sample_poses(&scene, &PoseSpec { width: res, height: res, ..PoseSpec::with_count(n_poses) }, seed).unwrap();
    scene.points.truncate(count);
    (scene, poses)
}

#![allow(dead_code)]

use featsplat::gscene::{Camera, GaussianPrimitive, GaussianScene};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn axis_camera(size: usize, focal: f64) -> Camera {
    let c = size as f64 / 2.0;
    Camera::new(
        focal,
        focal,
        c,
        c,
        Matrix3::identity(),
        Vector3::zeros(),
        size,
        size,
    )
    .unwrap()
}

/// Random scene in front of an identity camera: Gaussians spread over the
/// view frustum at depth 2..4.
pub fn random_scene(seed: u64, n: usize, d: usize) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let z = rng.gen_range(2.0..4.0);
            GaussianPrimitive {
                mean: [
                    rng.gen_range(-0.45..0.45) * z,
                    rng.gen_range(-0.45..0.45) * z,
                    z,
                ],
                log_scale: [
                    rng.gen_range(-3.5..-1.5),
                    rng.gen_range(-3.5..-1.5),
                    rng.gen_range(-3.5..-1.5),
                ],
                rotation: [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                opacity_logit: rng.gen_range(-2.0..3.0),
                color: [rng.gen(), rng.gen(), rng.gen()],
                feature: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    GaussianScene::new(gaussians, d, [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

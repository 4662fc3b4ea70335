use diffcore::{backward, finite_difference_check, with_precision, Precision, Tensor};
use featsplat::losses::{
    gan_loss, gan_terms, gaussian_taps, loss_d, loss_r, mse, psnr, ssim, total_loss, Discriminator, LossWeights,
    PerceptualProxy, PROB_CLAMP,
};
use featsplat::nn::ParamStore;
use featsplat::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new((0..c * h * w).map(|_| rng.gen::<f64>()).collect(), &[c, h, w]).unwrap()
}

fn scalar(v: f64) -> Tensor {
    Tensor::scalar(v)
}

#[test]
fn identical_images_have_zero_loss() {
    let proxy = PerceptualProxy::new(1).unwrap();
    let w = LossWeights::default();
    let x = image(2, 3, 32, 32);
    assert_eq!(loss_r(&x, &x, &proxy, &w).unwrap().item().unwrap(), 0.0);
    assert_eq!(loss_d(&x, &x, &proxy, &w).unwrap().item().unwrap(), 0.0);
}

#[test]
fn constant_offset_gives_the_mse_algebra() {
    with_precision(Precision::F64, || {
        let proxy = PerceptualProxy::new(1).unwrap();
        let w = LossWeights {
            l1: 0.7,
            l2: 0.0,
            l3: 1.3,
            l4: 0.0,
            ..LossWeights::default()
        };
        let x = image(3, 3, 16, 16).scale(0.8).unwrap();
        let y = x.add_scalar(0.1).unwrap();
        let r = loss_r(&x, &y, &proxy, &w).unwrap().item().unwrap();
        let d = loss_d(&x, &y, &proxy, &w).unwrap().item().unwrap();
        assert!((r - 0.7 * 0.01).abs() <= 1e-12, "{r}");
        assert!((d - 1.3 * 0.01).abs() <= 1e-12, "{d}");
    });
}

#[test]
fn perceptual_distance_is_symmetric_and_positive() {
    let proxy = PerceptualProxy::new(4).unwrap();
    let (a, b) = (image(5, 3, 32, 32), image(6, 3, 32, 32));
    let ab = proxy.distance_value(&a, &b).unwrap();
    let ba = proxy.distance_value(&b, &a).unwrap();
    assert_eq!(ab, ba);
    assert!(ab > 0.0);
}

#[test]
fn perceptual_proxy_is_deterministic_per_seed() {
    let a = PerceptualProxy::new(9).unwrap();
    let b = PerceptualProxy::new(9).unwrap();
    let c = PerceptualProxy::new(10).unwrap();
    for ((n, x), (_, y)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(x.data(), y.data(), "{n}");
        assert!(a.params().is_frozen(n));
    }
    let w = "proxy.0.w";
    assert_ne!(a.params().get(w).unwrap().data(), c.params().get(w).unwrap().data());
}

#[test]
fn frozen_proxy_receives_no_gradient() {
    let proxy = PerceptualProxy::new(11).unwrap();
    let x = image(12, 3, 16, 16).as_param();
    let y = image(13, 3, 16, 16);
    let g = backward(&proxy.distance(&x, &y).unwrap()).unwrap();
    for (_, p) in proxy.params().iter() {
        assert!(g.get(p).is_none());
    }
    assert!(g.get(&x).unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn mismatched_shapes_are_contract_errors() {
    let proxy = PerceptualProxy::new(1).unwrap();
    let w = LossWeights::default();
    let (a, b) = (image(1, 3, 16, 16), image(2, 3, 16, 8));
    assert!(matches!(loss_r(&a, &b, &proxy, &w), Err(Error::Contract(_))));
    assert!(matches!(loss_d(&a, &b, &proxy, &w), Err(Error::Contract(_))));
    assert!(matches!(psnr(&a, &b), Err(Error::Contract(_))));
    assert!(matches!(ssim(&a, &b), Err(Error::Contract(_))));
    assert!(matches!(ssim(&image(1, 3, 8, 8), &image(2, 3, 8, 8)), Err(Error::Contract(_))));
}

#[test]
fn loss_d_gradients_match_finite_differences() {
    with_precision(Precision::F64, || {
        let proxy = PerceptualProxy::new(14).unwrap();
        let w = LossWeights {
            l4: 0.5,
            ..LossWeights::default()
        };
        let gt = image(15, 3, 16, 16);
        let report = finite_difference_check(
            |p| Ok(loss_d(&p[0], &gt, &proxy, &w).unwrap()),
            &[image(16, 3, 16, 16).as_param()],
            f64::EPSILON.cbrt(),
        )
        .unwrap();
        assert_eq!(report.checked(), 3 * 16 * 16);
        assert_eq!(report.fraction_within(1e-4), 1.0, "{}", report.max_rel_err);
    });
}

#[test]
fn constant_discriminator_gives_two_log_half() {
    with_precision(Precision::F64, || {
        let half = Tensor::full(&[4], 0.5);
        let l5 = 0.7;
        let t = gan_terms(&half, &half, l5).unwrap();
        let expected = l5 * 2.0 * 0.5f64.ln();
        assert!((t.discriminator.item().unwrap() - expected).abs() <= 1e-12);
        assert!((t.generator.item().unwrap() + l5 * 0.5f64.ln()).abs() <= 1e-12);
    });
}

#[test]
fn perfect_discriminator_saturates_at_the_clamp_bound() {
    with_precision(Precision::F64, || {
        let t = gan_terms(&Tensor::full(&[3], 1.0), &Tensor::full(&[3], 0.0), 1.0).unwrap();
        let bound = -PROB_CLAMP.ln();
        let g = t.generator.item().unwrap();
        assert!(g >= 0.999 * bound && g <= bound + 1e-9, "{g} vs {bound}");
        // Clamping keeps the discriminator objective finite.
        assert!(t.discriminator.item().unwrap().is_finite());
    });
}

#[test]
fn one_discriminator_step_lowers_its_loss() {
    let proxy = PerceptualProxy::new(17).unwrap();
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let disc = Discriminator::new(&mut ps, "disc", 8, &mut rng).unwrap();
    let real = Tensor::concat(&[&image(19, 3, 32, 32).unsqueeze(0).unwrap(), &image(20, 3, 32, 32).unsqueeze(0).unwrap()], 0).unwrap();
    let fake = real.scale(0.3).unwrap().add_scalar(0.5).unwrap();
    let w = LossWeights::default();
    let loss = |ps: &ParamStore| {
        gan_loss(&real, &fake, &disc, ps, &proxy, &w)
            .unwrap()
            .discriminator_loss()
            .unwrap()
    };
    let before = loss(&ps);
    let g = backward(&before).unwrap();
    let lr = 1e-2;
    let mut sq = 0.0;
    let names: Vec<String> = ps.names().cloned().collect();
    for n in &names {
        let p = ps.get(n).unwrap();
        let grad = g.get_or_zeros(p);
        sq += grad.iter().map(|v| v * v).sum::<f64>();
        let next: Vec<f64> = p.data().iter().zip(&grad).map(|(x, d)| x - lr * d).collect();
        ps.set(n, next).unwrap();
    }
    assert!(sq > 0.0);
    let after = loss(&ps).item().unwrap();
    assert!(after < before.item().unwrap(), "{after} vs {}", before.item().unwrap());
}

#[test]
fn generator_gradient_reaches_the_generated_image() {
    let proxy = PerceptualProxy::new(21).unwrap();
    let mut ps = ParamStore::new();
    let disc = Discriminator::new(&mut ps, "disc", 8, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    let fake = image(23, 3, 32, 32).as_param();
    let t = gan_loss(&image(24, 3, 32, 32), &fake, &disc, &ps, &proxy, &LossWeights::default()).unwrap();
    let g = backward(&t.generator).unwrap();
    assert!(g.get(&fake).unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn total_loss_combines_with_fixed_weights() {
    let w = LossWeights::default();
    let (r, d, g) = (scalar(1.0), scalar(1.0), scalar(1.0));
    // 1·1 + 1·1 + 0.05·1
    let expected = w.lambda_r * 1.0 + w.lambda_d * 1.0 + w.lambda_g * 1.0;
    assert!((expected - 2.05).abs() < 1e-15);
    let got = total_loss(&r, &d, &g, &w).unwrap().item().unwrap();
    assert!((got - 2.05).abs() <= 1e-6, "{got}");

    let zero = LossWeights::default().scaled(0.0);
    assert_eq!(total_loss(&scalar(3.0), &scalar(4.0), &scalar(5.0), &zero).unwrap().item().unwrap(), 0.0);
    let only_r = LossWeights {
        lambda_r: 1.0,
        lambda_d: 0.0,
        lambda_g: 0.0,
        ..w
    };
    assert_eq!(total_loss(&scalar(0.375), &scalar(4.0), &scalar(5.0), &only_r).unwrap().item().unwrap(), 0.375);
}

#[test]
fn total_loss_is_linear_in_the_weights() {
    with_precision(Precision::F64, || {
        let w = LossWeights {
            lambda_r: 0.3,
            lambda_d: 1.7,
            lambda_g: 0.05,
            ..LossWeights::default()
        };
        let (r, d, g) = (scalar(0.81), scalar(0.23), scalar(-1.9));
        let base = total_loss(&r, &d, &g, &w).unwrap().item().unwrap();
        for c in [0.5, 2.0, 8.0] {
            let scaled = total_loss(&r, &d, &g, &w.scaled(c)).unwrap().item().unwrap();
            assert_eq!(scaled, c * base);
        }
        let scaled = total_loss(&r, &d, &g, &w.scaled(3.0)).unwrap().item().unwrap();
        assert!((scaled - 3.0 * base).abs() <= 1e-12);
    });
}

#[test]
fn weights_must_be_non_negative() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        l4: -0.1,
        ..LossWeights::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn psnr_of_a_tenth_offset_is_twenty_db() {
    let x = image(30, 3, 64, 64).scale(0.9).unwrap();
    let y = x.add_scalar(0.1).unwrap();
    let p = psnr(&x, &y).unwrap();
    assert!((p - 20.0).abs() <= 1e-6, "{p}");
    assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    let m = mse(&x, &y).unwrap().item().unwrap();
    assert!((m - 0.01).abs() < 1e-6);
}

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let x = image(31, 3, 32, 40);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
}

/// Per-window SSIM written out directly: weighted sums over each 11×11
/// window with the 2-D Gaussian, no separable filtering.
fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_taps(11, 1.5);
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let wt = g[u] * g[v];
                    let (a, b) = (x[(i + u) * w + j + v], y[(i + u) * w + j + v]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn inverted_checkerboard_has_negative_ssim() {
    let (h, w) = (24, 24);
    let board: Vec<f64> = (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect();
    let inverse: Vec<f64> = board.iter().map(|v| 1.0 - v).collect();
    let a = Tensor::new(board.clone(), &[1, h, w]).unwrap();
    let b = Tensor::new(inverse.clone(), &[1, h, w]).unwrap();
    let got = ssim(&a, &b).unwrap();
    let oracle = ssim_direct(&board, &inverse, h, w);
    assert!(got < 0.0, "{got}");
    assert!((got - oracle).abs() <= 1e-9, "{got} vs {oracle}");
}

#[test]
fn ssim_matches_the_direct_formula_on_random_images() {
    let (a, b) = (image(32, 1, 20, 17), image(33, 1, 20, 17));
    let got = ssim(&a, &b).unwrap();
    let oracle = ssim_direct(a.data(), b.data(), 20, 17);
    assert!((got - oracle).abs() <= 1e-9, "{got} vs {oracle}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reconstruction_losses_are_non_negative(seed in 0u64..1000, off in 0.0f64..0.5) {
        let proxy = PerceptualProxy::new(seed).unwrap();
        let w = LossWeights::default();
        let a = image(seed, 3, 16, 16);
        let b = image(seed + 1, 3, 16, 16).scale(1.0 - off).unwrap();
        prop_assert!(loss_r(&a, &b, &proxy, &w).unwrap().item().unwrap() >= 0.0);
        prop_assert!(loss_d(&a, &b, &proxy, &w).unwrap().item().unwrap() >= 0.0);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
        let (a, b) = (image(seed, 2, 16, 16), image(seed + 7, 2, 16, 16));
        let s = ssim(&a, &b).unwrap();
        prop_assert_eq!(s, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}

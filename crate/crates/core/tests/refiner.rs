mod common;

use common::max_abs_diff;
use diffcore::{finite_difference_check, with_precision, Precision, Tensor};
use featsplat::nn::ParamStore;
use featsplat::refiner::{feature_concat, mixed_attention, FeatureCnn, MixMode, Refiner, RefinerConfig};
use featsplat::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> RefinerConfig {
    RefinerConfig {
        latent_channels: 4,
        feature_dim: 2,
        base_width: 8,
        levels: 2,
        heads: 2,
    }
}

fn build(cfg: RefinerConfig, seed: u64) -> (ParamStore, Refiner) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Refiner::new(&mut ps, "rf", cfg, &mut rng).unwrap();
    (ps, r)
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Random values for every zero-initialized output layer, leaving the
/// guidance slice of the first U-Net convolution at zero.
fn wake(ps: &mut ParamStore, r: &Refiner, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in [&r.unet.conv_out.w, &r.unet.conv_out.b, &r.dec_out.w, &r.dec_out.b] {
        let n = ps.get(name).unwrap().numel();
        ps.set(name, (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
    }
}

fn readout(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.numel()).map(|i| (1.3 * i as f64 + 0.5).sin()).collect();
    t.mul(&Tensor::new(w, t.shape()).unwrap()).unwrap().sum().unwrap()
}

#[test]
fn latents_are_an_eighth_of_the_image() {
    let (ps, r) = build(small(), 0);
    let x = random(1, &[2, 3, 32, 48]);
    let z = r.latent_encode(&ps, &x).unwrap();
    assert_eq!(z.shape(), &[2, 4, 4, 6]);
    let twice = r.latent_encode(&ps, &x).unwrap();
    assert_eq!(z.data(), twice.data());
    let err = r.latent_encode(&ps, &random(2, &[1, 3, 20, 32])).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn identical_images_give_identical_latents() {
    let (ps, r) = build(small(), 3);
    let one = random(4, &[1, 3, 16, 16]);
    let z = r.latent_encode(&ps, &Tensor::concat(&[&one, &one], 0).unwrap()).unwrap();
    let n = z.numel() / 2;
    assert_eq!(&z.data()[..n], &z.data()[n..]);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    with_precision(Precision::F64, || {
        let (ps, r) = build(small(), 5);
        let x = random(6, &[1, 3, 16, 16]);
        let names: Vec<String> = ps.names().filter(|n| n.starts_with("rf.enc")).cloned().collect();
        let params: Vec<Tensor> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
        let report = finite_difference_check(
            |p| {
                let mut q = ps.clone();
                for (n, t) in names.iter().zip(p) {
                    q.replace(n, t.clone()).unwrap();
                }
                Ok(readout(&r.latent_encode(&q, &x).unwrap()))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.checked() > 20_000);
        assert_eq!(report.fraction_within(1e-4), 1.0, "{}", report.max_rel_err);
    });
}

#[test]
fn concatenation_keeps_the_latent_first() {
    let latent = random(7, &[1, 8, 32, 32]);
    let features = random(8, &[1, 8, 32, 32]);
    let fused = feature_concat(&latent, &features).unwrap();
    assert_eq!(fused.shape(), &[1, 16, 32, 32]);
    assert_eq!(fused.narrow(1, 0, 8).unwrap().data(), latent.data());
    assert_eq!(fused.narrow(1, 8, 8).unwrap().data(), features.data());
    let err = feature_concat(&latent, &random(9, &[1, 8, 16, 32])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Contract(_)));
    assert!(msg.contains("[1, 8, 32, 32]") && msg.contains("[1, 8, 16, 32]"), "{msg}");
}

#[test]
fn guidance_weights_start_at_zero() {
    let (ps, r) = build(small(), 10);
    let w = ps.get(&r.unet.conv_in.w).unwrap();
    let cin = 6;
    for (i, v) in w.data().iter().enumerate() {
        let ch = (i / 9) % cin;
        if ch >= 4 {
            assert_eq!(*v, 0.0);
        }
    }
    assert!(w.data().iter().any(|v| *v != 0.0));
}

#[test]
fn zero_guidance_matches_the_unguided_unet() {
    let (mut ps, r) = build(small(), 11);
    wake(&mut ps, &r, 12);
    let latent = random(13, &[2, 4, 8, 8]);
    let fused = feature_concat(&latent, &Tensor::zeros(&[2, 2, 8, 8])).unwrap();
    let a = r.unet.forward(&ps, &fused, MixMode::Joint).unwrap();
    let b = r.unet.forward_unguided(&ps, &latent, MixMode::Joint).unwrap();
    assert!(max_abs_diff(a.data(), b.data()) <= 1e-6);
    assert!(a.data().iter().any(|v| *v != 0.0));
}

#[test]
fn single_view_mixing_is_plain_self_attention() {
    let (ps, r) = build(small(), 14);
    let z = random(15, &[1, 32, 2, 3]);
    let mixed = mixed_attention(&ps, &r.unet.attn, &z, MixMode::Joint).unwrap();
    let tokens = z.reshape(&[1, 32, 6]).unwrap().permute(&[0, 2, 1]).unwrap();
    let plain = r.unet.attn.forward(&ps, &tokens, &tokens, None).unwrap();
    let plain = plain.permute(&[0, 2, 1]).unwrap();
    assert!(max_abs_diff(mixed.data(), plain.data()) <= 1e-6);
}

#[test]
fn duplicated_views_match_the_single_view_output() {
    let (ps, r) = build(small(), 16);
    let one = random(17, &[1, 32, 2, 2]);
    let three = Tensor::concat(&[&one, &one, &one], 0).unwrap();
    let single = mixed_attention(&ps, &r.unet.attn, &one, MixMode::Joint).unwrap();
    let mixed = mixed_attention(&ps, &r.unet.attn, &three, MixMode::Joint).unwrap();
    for v in 0..3 {
        assert!(max_abs_diff(mixed.narrow(0, v, 1).unwrap().data(), single.data()) <= 1e-6);
    }
}

#[test]
fn per_view_mask_reproduces_separate_attention() {
    let (ps, r) = build(small(), 18);
    let z = random(19, &[3, 32, 2, 2]);
    let masked = mixed_attention(&ps, &r.unet.attn, &z, MixMode::PerView).unwrap();
    for v in 0..3 {
        let alone = mixed_attention(&ps, &r.unet.attn, &z.narrow(0, v, 1).unwrap(), MixMode::Joint).unwrap();
        assert!(max_abs_diff(masked.narrow(0, v, 1).unwrap().data(), alone.data()) <= 1e-6);
    }
    let joint = mixed_attention(&ps, &r.unet.attn, &z, MixMode::Joint).unwrap();
    assert!(max_abs_diff(joint.data(), masked.data()) > 1e-4);
}

#[test]
fn untrained_refiner_passes_the_render_through() {
    let (ps, r) = build(small(), 20);
    let target = random(21, &[3, 32, 32]);
    let out = r
        .denoise_onestep(&ps, &target, None, &random(22, &[2, 4, 4]), None, MixMode::Joint)
        .unwrap();
    assert_eq!(out.data(), target.data());
}

#[test]
fn output_ignores_guidance_before_training() {
    let (mut ps, r) = build(small(), 23);
    wake(&mut ps, &r, 24);
    let target = random(25, &[3, 32, 32]);
    let refs = random(26, &[2, 3, 32, 32]);
    let run = |seed: u64| {
        r.denoise_onestep(
            &ps,
            &target,
            Some(&refs),
            &random(seed, &[2, 4, 4]),
            Some(&random(seed + 1, &[2, 2, 4, 4])),
            MixMode::Joint,
        )
        .unwrap()
    };
    let base = run(27);
    assert!(max_abs_diff(base.data(), target.data()) > 1e-3);
    for seed in [30, 40, 50] {
        assert!(max_abs_diff(run(seed).data(), base.data()) <= 1e-6);
    }
}

#[test]
fn references_change_the_refined_target() {
    let (mut ps, r) = build(small(), 28);
    wake(&mut ps, &r, 29);
    let target = random(30, &[3, 32, 32]);
    let f = random(31, &[2, 4, 4]);
    let alone = r.denoise_onestep(&ps, &target, None, &f, None, MixMode::Joint).unwrap();
    let with_refs = r
        .denoise_onestep(
            &ps,
            &target,
            Some(&random(32, &[1, 3, 32, 32])),
            &f,
            Some(&random(33, &[1, 2, 4, 4])),
            MixMode::Joint,
        )
        .unwrap();
    assert_eq!(alone.shape(), &[3, 32, 32]);
    assert!(max_abs_diff(alone.data(), with_refs.data()) > 1e-5);
}

#[test]
fn one_unet_pass_per_refined_image() {
    let (ps, r) = build(small(), 34);
    let target = random(35, &[3, 32, 32]);
    let f = random(36, &[2, 4, 4]);
    assert_eq!(r.unet_calls(), 0);
    for i in 1..=3 {
        r.denoise_onestep(&ps, &target, None, &f, None, MixMode::Joint).unwrap();
        assert_eq!(r.unet_calls(), i);
    }
}

#[test]
fn mismatched_reference_inputs_are_rejected() {
    let (ps, r) = build(small(), 37);
    let target = random(38, &[3, 32, 32]);
    let err = r
        .denoise_onestep(&ps, &target, Some(&random(39, &[1, 3, 32, 32])), &random(40, &[2, 4, 4]), None, MixMode::Joint)
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let err = r
        .denoise_onestep(&ps, &target, None, &random(41, &[2, 8, 8]), None, MixMode::Joint)
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

fn unet_gradcheck(eps: f64) -> diffcore::GradCheckReport {
    let cfg = RefinerConfig {
        levels: 1,
        ..small()
    };
    let (mut ps, r) = build(cfg, 42);
    wake(&mut ps, &r, 43);
    let fused = random(44, &[2, 6, 4, 4]);
    let names: Vec<String> = ps.names().filter(|n| n.starts_with("rf.unet")).cloned().collect();
    let params: Vec<Tensor> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
    finite_difference_check(
        |p| {
            let mut q = ps.clone();
            for (n, t) in names.iter().zip(p) {
                q.replace(n, t.clone()).unwrap();
            }
            Ok(readout(&r.unet.forward(&q, &fused, MixMode::Joint).unwrap()))
        },
        &params,
        eps,
    )
    .unwrap()
}

#[test]
fn one_block_unet_gradients_in_f64() {
    // Central differences: roundoff falls off as eps/h, so h = cbrt(eps) keeps
    // it under the tolerance for the ~1e-7 gradients of the attention weights.
    let report = with_precision(Precision::F64, || unet_gradcheck(f64::EPSILON.cbrt()));
    assert!(report.checked() > 3000);
    assert_eq!(report.fraction_within(1e-4), 1.0, "{}", report.max_rel_err);
}

#[test]
fn one_block_unet_gradients_in_f32() {
    let report = unet_gradcheck((f32::EPSILON as f64).cbrt());
    let frac = report.fraction_within(1e-2);
    assert!(frac >= 0.95, "{frac}");
}

#[test]
fn feature_cnn_starts_as_passthrough() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let cnn = FeatureCnn::new(&mut ps, "gs", 2, 8, 8, &mut rng).unwrap();
    let img = random(46, &[3, 16, 16]);
    let out = cnn.forward(&ps, &img, &random(47, &[2, 2, 2])).unwrap();
    assert_eq!(out.data(), img.data());
    assert!(cnn.forward(&ps, &img, &random(48, &[2, 4, 4])).is_err());
}

use diffcore::{backward, finite_difference_check, with_precision, Precision, Tensor};
use featsplat::detailmod::{
    ddpm_fuse, frequency_branch, kept_bins, mirror_indices, spatial_branch, DetailConfig, DetailModule, FftMode,
    FrequencySelector, SpatialBranch,
};
use featsplat::nn::ParamStore;
use featsplat::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn random_image(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen::<f64>()).collect(), shape).unwrap()
}

fn selector(h: usize, w: usize, kf: f64, seed: u64) -> (ParamStore, FrequencySelector) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sel = FrequencySelector::new(&mut ps, "sel", h, w, kf, 8, &mut rng).unwrap();
    (ps, sel)
}

fn randomize_gains(ps: &mut ParamStore, sel: &FrequencySelector, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let re = (0..sel.k).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let im = (0..sel.k).map(|_| rng.gen_range(-1.5..1.5)).collect();
    ps.set(&sel.weight_re, re).unwrap();
    ps.set(&sel.weight_im, im).unwrap();
}

fn config(frequency: bool) -> DetailConfig {
    DetailConfig {
        channels: 4,
        k_fraction: 0.25,
        height: 16,
        width: 16,
        score_hidden: 8,
        frequency,
        fft_mode: FftMode::PerChannel,
    }
}

/// Direct O(N²) 2-D DFT of one real channel.
fn dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for ku in 0..h {
        for kv in 0..w {
            for y in 0..h {
                for xx in 0..w {
                    let ph = -2.0 * PI * ((ku * y) as f64 / h as f64 + (kv * xx) as f64 / w as f64);
                    re[ku * w + kv] += x[y * w + xx] * ph.cos();
                    im[ku * w + kv] += x[y * w + xx] * ph.sin();
                }
            }
        }
    }
    (re, im)
}

/// Real part of the direct inverse DFT, with the 1/HW factor.
fn idft2_real(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for ku in 0..h {
                for kv in 0..w {
                    let ph = 2.0 * PI * ((ku * y) as f64 / h as f64 + (kv * xx) as f64 / w as f64);
                    acc += re[ku * w + kv] * ph.cos() - im[ku * w + kv] * ph.sin();
                }
            }
            out[y * w + xx] = acc / (h * w) as f64;
        }
    }
    out
}

fn readout(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.numel()).map(|i| (1.3 * i as f64 + 0.5).sin()).collect();
    t.mul(&Tensor::new(w, t.shape()).unwrap()).unwrap().sum().unwrap()
}

/// Parameters of `ps` as a flat list plus a closure that rebuilds the store
/// from perturbed copies.
fn store_params(ps: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    ps.iter().map(|(n, t)| (n.clone(), t.clone())).unzip()
}

fn with_params(ps: &ParamStore, names: &[String], ts: &[Tensor]) -> ParamStore {
    let mut out = ps.clone();
    for (n, t) in names.iter().zip(ts) {
        out.replace(n, t.clone()).unwrap();
    }
    out
}

#[test]
fn identity_configuration_reproduces_the_image() {
    let (mut ps, sel) = selector(16, 16, 1.0, 1);
    sel.set_identity(&mut ps).unwrap();
    let x = random_image(2, &[2, 3, 16, 16]);
    let y = frequency_branch(&sel, &ps, &x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.max_abs_diff(&x).unwrap() <= 1e-5);
}

#[test]
fn dc_only_selection_gives_the_channel_mean() {
    let (mut ps, sel) = selector(16, 8, 1.0 / 128.0, 3);
    assert_eq!(sel.k, 1);
    sel.set_dc_preferring(&mut ps).unwrap();
    assert_eq!(sel.selection(&ps).unwrap().indices, vec![0]);
    let x = random_image(4, &[1, 3, 16, 8]);
    let y = frequency_branch(&sel, &ps, &x).unwrap();
    for c in 0..3 {
        let chan = &x.data()[c * 128..(c + 1) * 128];
        let mean = chan.iter().sum::<f64>() / 128.0;
        for v in &y.data()[c * 128..(c + 1) * 128] {
            assert!((v - mean).abs() <= 1e-5, "{v} vs {mean}");
        }
    }
}

#[test]
fn filtered_image_matches_direct_dft_and_respects_energy_bound() {
    with_precision(Precision::F64, || {
        let (h, w) = (8, 16);
        let (mut ps, sel) = selector(h, w, 0.25, 5);
        randomize_gains(&mut ps, &sel, 6);
        let x = random_image(7, &[1, 3, h, w]);
        let y = frequency_branch(&sel, &ps, &x).unwrap();

        let scores = sel.scores(&ps).unwrap().to_vec();
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let k = (0.25 * (h * w) as f64).ceil() as usize;
        assert_eq!(sel.k, k);
        let wr = ps.get(&sel.weight_re).unwrap().to_vec();
        let wi = ps.get(&sel.weight_im).unwrap().to_vec();
        let mirror = |i: usize| ((h - i / w) % h) * w + (w - i % w) % w;

        for c in 0..3 {
            let chan = &x.data()[c * h * w..(c + 1) * h * w];
            let (zr, zi) = dft2(chan, h, w);
            let (mut mr, mut mi) = (vec![0.0; h * w], vec![0.0; h * w]);
            let mut bound = 0.0;
            for (rank, &b) in order[..k].iter().enumerate() {
                let g = 2.0 / (1.0 + (-scores[b]).exp());
                let (gr, gi) = (wr[rank] * g, wi[rank] * g);
                mr[b] = zr[b] * gr - zi[b] * gi;
                mi[b] = zr[b] * gi + zi[b] * gr;
                bound += (zr[b].powi(2) + zi[b].powi(2)) * (gr * gr + gi * gi);
            }
            let sr: Vec<f64> = (0..h * w).map(|i| 0.5 * (mr[i] + mr[mirror(i)])).collect();
            let si: Vec<f64> = (0..h * w).map(|i| 0.5 * (mi[i] - mi[mirror(i)])).collect();
            let expect = idft2_real(&sr, &si, h, w);
            let got = &y.data()[c * h * w..(c + 1) * h * w];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
            let energy: f64 = got.iter().map(|v| v * v).sum();
            assert!(energy <= bound / (h * w) as f64 + 1e-12, "{energy} > {}", bound / (h * w) as f64);
        }
    });
}

#[test]
fn unit_modulation_never_adds_energy() {
    let (mut ps, sel) = selector(16, 16, 0.25, 8);
    sel.set_identity(&mut ps).unwrap();
    for seed in 0..5 {
        let x = random_image(seed, &[1, 3, 16, 16]);
        let y = frequency_branch(&sel, &ps, &x).unwrap();
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let ey: f64 = y.data().iter().map(|v| v * v).sum();
        assert!(ey <= ex * (1.0 + 1e-6), "{ey} > {ex}");
    }
}

#[test]
fn non_selected_bins_are_zeroed() {
    let (mut ps, sel) = selector(8, 8, 0.1, 9);
    randomize_gains(&mut ps, &sel, 10);
    let x = random_image(11, &[1, 3, 8, 8]);
    let z = sel.modulated_spectrum(&ps, &x).unwrap();
    let picked = sel.selection(&ps).unwrap().indices;
    let mirror = mirror_indices(8, 8);
    for c in 0..3 {
        for bin in 0..64 {
            let kept = picked.contains(&bin) || picked.contains(&mirror[bin]);
            if !kept {
                assert_eq!(z.re.data()[c * 64 + bin], 0.0);
                assert_eq!(z.im.data()[c * 64 + bin], 0.0);
            }
        }
    }
}

#[test]
fn zero_bin_fraction_is_a_config_error() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = FrequencySelector::new(&mut ps, "sel", 8, 8, 0.0, 8, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
    let err = FrequencySelector::new(&mut ps, "sel2", 12, 8, 0.5, 8, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn random_gains_still_give_a_real_image() {
    for seed in 0..4 {
        let (mut ps, sel) = selector(16, 16, 0.3, seed);
        randomize_gains(&mut ps, &sel, seed + 100);
        let x = random_image(seed, &[1, 3, 16, 16]);
        let y = frequency_branch(&sel, &ps, &x).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn per_image_mode_filters_the_channel_mean() {
    let (mut ps, mut sel) = selector(8, 8, 1.0, 12);
    sel.mode = FftMode::PerImage;
    sel.set_identity(&mut ps).unwrap();
    let x = random_image(13, &[1, 3, 8, 8]);
    let y = frequency_branch(&sel, &ps, &x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 8, 8]);
    for i in 0..64 {
        let mean = (x.data()[i] + x.data()[64 + i] + x.data()[128 + i]) / 3.0;
        for c in 0..3 {
            assert!((y.data()[c * 64 + i] - mean).abs() <= 1e-5);
        }
    }
}

fn spatial(seed: u64) -> (ParamStore, SpatialBranch) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = SpatialBranch::new(&mut ps, "sp", 4, &mut rng).unwrap();
    (ps, b)
}

#[test]
fn spatial_branch_on_zero_image_is_constant() {
    let (mut ps, b) = spatial(20);
    for conv in &b.convs {
        let n = ps.get(&conv.b).unwrap().numel();
        ps.set(&conv.b, (0..n).map(|i| (0.7 * i as f64).sin()).collect()).unwrap();
    }
    let y = spatial_branch(&b, &ps, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 4]);
    for c in 0..4 {
        let cell = &y.data()[c * 16..(c + 1) * 16];
        assert!(cell.iter().all(|v| *v == cell[0]));
    }
    assert!(y.data().iter().any(|v| *v != 0.0));
}

#[test]
fn eight_pixel_shift_moves_output_one_cell() {
    let (ps, b) = spatial(21);
    let big = random_image(22, &[1, 3, 64, 72]);
    let cols_a: Vec<usize> = (8..72).collect();
    let cols_b: Vec<usize> = (0..64).collect();
    let a = big.index_select(3, &cols_a).unwrap();
    let shifted = big.index_select(3, &cols_b).unwrap();
    let ya = spatial_branch(&b, &ps, &a).unwrap();
    let yb = spatial_branch(&b, &ps, &shifted).unwrap();
    assert_eq!(ya.shape(), &[1, 4, 8, 8]);
    for c in 0..4 {
        for i in 0..8 {
            for j in 1..=6 {
                let va = ya.data()[(c * 8 + i) * 8 + j];
                let vb = yb.data()[(c * 8 + i) * 8 + j + 1];
                assert!((va - vb).abs() <= 1e-6, "cell ({i},{j}): {va} vs {vb}");
            }
        }
    }
}

#[test]
fn spatial_branch_gradients_match_finite_differences() {
    with_precision(Precision::F64, || {
        let (ps, b) = spatial(23);
        let x = random_image(24, &[1, 3, 16, 16]);
        let (names, params) = store_params(&ps);
        let report = finite_difference_check(
            |p| Ok(readout(&spatial_branch(&b, &with_params(&ps, &names, p), &x).unwrap())),
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.checked() > 5000);
        assert!(report.max_rel_err <= 1e-3, "{report:?}");
    });
}

#[test]
fn fusing_zero_grids_gives_the_bias() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let m = DetailModule::new(&mut ps, "d", config(true), &mut rng).unwrap();
    let bias: Vec<f64> = (0..4).map(|i| 0.1 * i as f64 - 0.2).collect();
    ps.set(&m.fuse.b, bias.clone()).unwrap();
    let out = ddpm_fuse(&ps, &m.fuse, &Tensor::zeros(&[1, 3, 2, 2]), &Tensor::zeros(&[1, 4, 2, 2])).unwrap();
    for c in 0..4 {
        assert!(out.data()[c * 4..(c + 1) * 4].iter().all(|v| (v - bias[c]).abs() < 1e-7));
    }
}

#[test]
fn fusion_commutes_with_cell_permutation() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let m = DetailModule::new(&mut ps, "d", config(true), &mut rng).unwrap();
    let f = random_image(32, &[1, 3, 4, 4]);
    let s = random_image(33, &[1, 4, 4, 4]);
    // swap cells 1 and 11 of the flattened 4×4 grid
    let mut perm: Vec<usize> = (0..16).collect();
    perm.swap(1, 11);
    let permute = |t: &Tensor| {
        let c = t.dim(1);
        t.reshape(&[1, c, 16]).unwrap().index_select(2, &perm).unwrap().reshape(&[1, c, 4, 4]).unwrap()
    };
    let out = ddpm_fuse(&ps, &m.fuse, &f, &s).unwrap();
    let out_p = ddpm_fuse(&ps, &m.fuse, &permute(&f), &permute(&s)).unwrap();
    assert!(permute(&out).max_abs_diff(&out_p).unwrap() == 0.0);
}

#[test]
fn misaligned_grids_name_both_shapes() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let m = DetailModule::new(&mut ps, "d", config(true), &mut rng).unwrap();
    let err = ddpm_fuse(&ps, &m.fuse, &Tensor::zeros(&[1, 3, 4, 4]), &Tensor::zeros(&[1, 4, 2, 2])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Contract(_)));
    assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[1, 4, 2, 2]"), "{msg}");
}

#[test]
fn module_output_is_on_the_coarse_grid() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let m = DetailModule::new(&mut ps, "d", config(true), &mut rng).unwrap();
    let y = m.forward(&ps, &random_image(36, &[2, 3, 16, 16])).unwrap();
    assert_eq!(y.shape(), &[2, 4, 2, 2]);
    assert!(y.data().iter().all(|v| v.is_finite()));
}

#[test]
fn cnn_only_ablation_drops_the_frequency_parameters() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let m = DetailModule::new(&mut ps, "d", config(false), &mut rng).unwrap();
    assert!(m.selector.is_none());
    assert!(ps.names().all(|n| !n.contains(".freq.")));
    let x = random_image(38, &[1, 3, 16, 16]);
    let spat = m.spatial.forward(&ps, &x).unwrap();
    let expect = ddpm_fuse(&ps, &m.fuse, &Tensor::zeros(&[1, 3, 2, 2]), &spat).unwrap();
    assert_eq!(m.forward(&ps, &x).unwrap().to_vec(), expect.to_vec());
}

fn gradcheck_module(seed: u64) -> (ParamStore, DetailModule) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DetailModule::new(&mut ps, "d", config(true), &mut rng).unwrap();
    let sel = m.selector.as_ref().unwrap();
    randomize_gains(&mut ps, sel, seed + 1);
    (ps, m)
}

#[test]
fn module_gradients_match_finite_differences_in_f64() {
    with_precision(Precision::F64, || {
        let (ps, m) = gradcheck_module(40);
        let x = random_image(41, &[1, 3, 16, 16]);
        let (names, params) = store_params(&ps);
        let report = finite_difference_check(
            |p| Ok(readout(&m.forward(&with_params(&ps, &names, p), &x).unwrap())),
            &params,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.fraction_within(1e-4), 1.0, "{report:?}");
    });
}

#[test]
fn module_gradients_match_finite_differences_in_f32() {
    let (ps, m) = gradcheck_module(42);
    let x = random_image(43, &[1, 3, 16, 16]);
    let (names, params) = store_params(&ps);
    // central differences are most accurate at ε ≈ ∛(unit roundoff)
    let eps = (f32::EPSILON as f64).cbrt();
    let report =
        finite_difference_check(|p| Ok(readout(&m.forward(&with_params(&ps, &names, p), &x).unwrap())), &params, eps)
            .unwrap();
    let frac = report.fraction_within(1e-2);
    assert!(frac >= 0.95, "{frac}");
}

#[test]
fn score_network_receives_gradient() {
    let (ps, m) = gradcheck_module(44);
    let x = random_image(45, &[1, 3, 16, 16]);
    let loss = readout(&m.forward(&ps, &x).unwrap());
    let g = backward(&loss).unwrap();
    for name in ["d.freq.score1.w", "d.freq.score2.w", "d.freq.weight_re", "d.freq.weight_im"] {
        let grad = g.get(ps.get(name).unwrap()).unwrap();
        assert!(grad.iter().any(|v| *v != 0.0), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn selection_keeps_exactly_the_rounded_up_count(hp in 0u32..6, wp in 0u32..6, kf in 0.001f64..1.0, seed in 0u64..1000) {
        let (h, w) = (1usize << hp, 1usize << wp);
        let (ps, sel) = selector(h, w, kf, seed);
        let picked = sel.selection(&ps).unwrap().indices;
        let expect = (kf * (h * w) as f64).ceil() as usize;
        prop_assert_eq!(picked.len(), expect);
        prop_assert_eq!(kept_bins(kf, h, w).unwrap(), expect);
        let mut uniq = picked.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), expect);
    }
}


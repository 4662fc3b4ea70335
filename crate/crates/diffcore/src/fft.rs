//! Radix-2 Cooley–Tukey FFT and the differentiable 2-D transforms built on it.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1/(H·W)` factor, so `ifft2(fft2(x)) == x` and
//! `Σ|x|² == Σ|fft2(x)|² / (H·W)`.

use std::f64::consts::PI;

use crate::error::{contract, Error, Result};
use crate::tape::record;
use crate::tensor::Tensor;

/// Relative bound on the imaginary residue tolerated by [`ifft2`].
pub const IMAG_RESIDUE_TOL: f64 = 1e-4;

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place 1-D transform of a power-of-two length signal. The inverse
/// direction flips the twiddle sign and does not scale.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    debug_assert!(is_power_of_two(n));
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let ang = sign * 2.0 * PI / len as f64;
        let twiddles: Vec<(f64, f64)> = (0..half).map(|k| ((ang * k as f64).cos(), (ang * k as f64).sin())).collect();
        for start in (0..n).step_by(len) {
            for (k, &(wr, wi)) in twiddles.iter().enumerate() {
                let (a, b) = (start + k, start + k + half);
                let (xr, xi) = (re[b] * wr - im[b] * wi, re[b] * wi + im[b] * wr);
                re[b] = re[a] - xr;
                im[b] = im[a] - xi;
                re[a] += xr;
                im[a] += xi;
            }
        }
        len <<= 1;
    }
}

/// Unscaled 2-D transform of one contiguous `h×w` plane (rows, then columns).
pub fn fft2_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft_in_place(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft_in_place(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
}

fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(contract(format!("2-D FFT needs rank >= 2, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    for (axis, n) in [("height", h), ("width", w)] {
        if !is_power_of_two(n) {
            return Err(Error::Config(format!("FFT {axis} {n} is not a power of two")));
        }
    }
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// Complex grid stored as two real tensors of identical shape.
#[derive(Clone, Debug)]
pub struct ComplexGrid {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexGrid {
    pub fn new(re: Tensor, im: Tensor) -> Result<ComplexGrid> {
        if re.shape() != im.shape() {
            return Err(contract(format!(
                "complex grid parts differ: {:?} vs {:?}",
                re.shape(),
                im.shape()
            )));
        }
        Ok(ComplexGrid { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// `Σ |z|²`.
    pub fn energy(&self) -> f64 {
        self.re.data().iter().chain(self.im.data()).map(|v| v * v).sum()
    }
}

/// Forward 2-D DFT over the last two axes of a real tensor.
pub fn fft2(x: &Tensor) -> Result<ComplexGrid> {
    let (count, h, w) = planes(x.shape())?;
    let mut re = x.to_vec();
    let mut im = vec![0.0; re.len()];
    for p in 0..count {
        let r = p * h * w..(p + 1) * h * w;
        fft2_plane(&mut re[r.clone()], &mut im[r], h, w, false);
    }
    let shape = x.shape().to_vec();
    let n = x.numel();
    let mut out = record("fft2", &[x], vec![(re, shape.clone()), (im, shape)], move |g| {
        // dx = Re(F^H g) with F^H the unscaled inverse transform
        let mut gr = g[0].to_vec();
        let mut gi = g[1].to_vec();
        for p in 0..count {
            let r = p * h * w..(p + 1) * h * w;
            fft2_plane(&mut gr[r.clone()], &mut gi[r], h, w, true);
        }
        debug_assert_eq!(gr.len(), n);
        vec![Some(gr)]
    })?;
    let im = out.pop().expect("imag part");
    let re = out.pop().expect("real part");
    Ok(ComplexGrid { re, im })
}

/// Inverse 2-D DFT returning the real part. Fails with a numeric error if the
/// discarded imaginary part exceeds `1e-4 · max|real|`, which means the input
/// spectrum was not Hermitian.
pub fn ifft2(z: &ComplexGrid) -> Result<Tensor> {
    let (count, h, w) = planes(z.shape())?;
    let mut re = z.re.to_vec();
    let mut im = z.im.to_vec();
    let scale = 1.0 / (h * w) as f64;
    for p in 0..count {
        let r = p * h * w..(p + 1) * h * w;
        fft2_plane(&mut re[r.clone()], &mut im[r], h, w, true);
    }
    re.iter_mut().for_each(|v| *v *= scale);
    let real_max = re.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let imag_max = im.iter().fold(0.0f64, |m, v| m.max(v.abs())) * scale;
    if imag_max > IMAG_RESIDUE_TOL * real_max.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric(format!(
            "ifft2 imaginary residue {imag_max:e} exceeds {IMAG_RESIDUE_TOL:e} x max|real| ({real_max:e}); spectrum is not Hermitian"
        )));
    }
    let shape = z.shape().to_vec();
    let mut out = record("ifft2", &[&z.re, &z.im], vec![(re, shape)], move |g| {
        let mut gr = g[0].to_vec();
        let mut gi = vec![0.0; gr.len()];
        for p in 0..count {
            let r = p * h * w..(p + 1) * h * w;
            fft2_plane(&mut gr[r.clone()], &mut gi[r], h, w, false);
        }
        gr.iter_mut().for_each(|v| *v *= scale);
        gi.iter_mut().for_each(|v| *v *= scale);
        vec![Some(gr), Some(gi)]
    })?;
    Ok(out.pop().expect("one output"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{with_precision, Precision};

    fn naive_dft(x: &[f64], h: usize, w: usize, inverse: bool, xi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                for y in 0..h {
                    for xx in 0..w {
                        let th = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        let (a, b) = (x[y * w + xx], xi[y * w + xx]);
                        re[u * w + v] += a * th.cos() - b * th.sin();
                        im[u * w + v] += a * th.sin() + b * th.cos();
                    }
                }
            }
        }
        (re, im)
    }

    #[test]
    fn constant_image_has_dc_only() {
        let x = Tensor::full(&[8, 8], 0.75);
        let z = fft2(&x).unwrap();
        assert!((z.re.data()[0] - 64.0 * 0.75).abs() < 1e-5);
        let rest = z.re.data()[1..].iter().chain(z.im.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rest < 1e-5);
    }

    #[test]
    fn single_tone_has_two_bins() {
        let (h, w) = (4, 16);
        let data: Vec<f64> = (0..h * w).map(|i| (2.0 * PI * (i % w) as f64 / w as f64).cos()).collect();
        let z = fft2(&Tensor::new(data, &[h, w]).unwrap()).unwrap();
        let mag: Vec<f64> = z.re.data().iter().zip(z.im.data()).map(|(a, b)| (a * a + b * b).sqrt()).collect();
        let nonzero: Vec<usize> = (0..h * w).filter(|&i| mag[i] > 1e-3).collect();
        assert_eq!(nonzero, vec![1, w - 1]);
        assert!((mag[1] - (h * w) as f64 / 2.0).abs() < 1e-4);
    }

    #[test]
    fn matches_naive_dft_oracle() {
        let (h, w) = (16, 16);
        let data: Vec<f64> = (0..h * w).map(|i| ((i * 7919 % 113) as f64 / 113.0) - 0.5).collect();
        let zeros = vec![0.0; h * w];
        let (wr, wi) = naive_dft(&data, h, w, false, &zeros);
        let z = fft2(&Tensor::new(data, &[h, w]).unwrap()).unwrap();
        for i in 0..h * w {
            assert!((z.re.data()[i] - wr[i]).abs() <= 1e-4);
            assert!((z.im.data()[i] - wi[i]).abs() <= 1e-4);
        }
    }

    #[test]
    fn impulse_spectrum_inverts_to_constant() {
        // a spectrum equal to 1 at DC and 0 elsewhere
        let (h, w) = (8, 4);
        let mut re = vec![0.0; h * w];
        re[0] = 1.0;
        let zeros = vec![0.0; h * w];
        let (want, _) = naive_dft(&re, h, w, true, &zeros);
        let z = ComplexGrid::new(Tensor::new(re, &[h, w]).unwrap(), Tensor::zeros(&[h, w])).unwrap();
        let x = ifft2(&z).unwrap();
        for (a, b) in x.data().iter().zip(&want) {
            assert!((a - b / (h * w) as f64).abs() < 1e-9);
            assert!((a - 1.0 / 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_spectrum_gives_zero_grid() {
        let z = ComplexGrid::new(Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4])).unwrap();
        assert!(ifft2(&z).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_non_power_of_two_axis() {
        let err = fft2(&Tensor::zeros(&[8, 12])).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("width")));
        let err = fft2(&Tensor::zeros(&[6, 8])).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("height")));
    }

    #[test]
    fn non_hermitian_spectrum_is_a_numeric_error() {
        let mut im = vec![0.0; 16];
        im[1] = 1.0;
        let z = ComplexGrid::new(Tensor::zeros(&[4, 4]), Tensor::new(im, &[4, 4]).unwrap()).unwrap();
        assert!(matches!(ifft2(&z), Err(Error::Numeric(_))));
    }

    #[test]
    fn roundtrip_random_grid() {
        with_precision(Precision::F32, || {
            let data: Vec<f64> = (0..256).map(|i| ((i as f64) * 1.618).sin()).collect();
            let x = Tensor::new(data, &[16, 16]).unwrap();
            let back = ifft2(&fft2(&x).unwrap()).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() <= 1e-5);
        });
    }
}

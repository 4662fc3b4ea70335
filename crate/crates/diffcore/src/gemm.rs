//! Dense matrix product backed by `matrixmultiply`, single precision in F32 mode.

use crate::precision::{precision, Precision};

/// Row-major operand view: `trans` means the buffer holds the transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn n(data: &'a [f64]) -> Self {
        Mat { data, trans: false }
    }
    pub fn t(data: &'a [f64]) -> Self {
        Mat { data, trans: true }
    }
}

/// `c (m×n) = a (m×k) · b (k×n)  [+ c if accumulate]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.data.len(), m * k);
    debug_assert_eq!(b.data.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    match precision() {
        Precision::F64 => unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::F32 => {
            let a32: Vec<f32> = a.data.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.data.iter().map(|&v| v as f32).collect();
            let mut c32: Vec<f32> = if accumulate {
                c.iter().map(|&v| v as f32).collect()
            } else {
                vec![0.0; m * n]
            };
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    rsa,
                    csa,
                    b32.as_ptr(),
                    rsb,
                    csb,
                    beta as f32,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (d, s) in c.iter_mut().zip(c32) {
                *d = s as f64;
            }
        }
    }
}

//! Slice-level convolution kernels shared by the forward ops and their
//! backward rules. All buffers are row-major; `_acc` functions accumulate
//! into `out` rather than overwrite it.
//!
//! The 1D convolution is the TextCNN form: a kernel spans `ks` consecutive
//! rows and the full row width `d`, so each kernel yields one column of the
//! output. The scatter forms are the exact linear adjoints of the
//! correlations and double as the transposed convolutions.

use super::Real;

/// `out[p][o] = Σ_{j<ks, k<d} x[p+j][k] · kernels[o][j][k]` over valid
/// positions `p < rows - ks + 1`. `out` is `(rows-ks+1) × c_out`.
pub fn conv1d_acc<T: Real>(
    x: &[T],
    rows: usize,
    d: usize,
    kernels: &[T],
    c_out: usize,
    ks: usize,
    out: &mut [T],
) {
    let positions = rows + 1 - ks;
    let span = ks * d;
    for p in 0..positions {
        let window = &x[p * d..p * d + span];
        let out_row = &mut out[p * c_out..(p + 1) * c_out];
        for (o, slot) in out_row.iter_mut().enumerate() {
            let kernel = &kernels[o * span..(o + 1) * span];
            let mut acc = T::zero();
            for (a, b) in window.iter().zip(kernel) {
                acc = acc + *a * *b;
            }
            *slot = *slot + acc;
        }
    }
}

/// Adjoint of [`conv1d_acc`] in its input: scatter-add each
/// `u[p][o] · kernels[o]` block onto rows `p..p+ks` of `out`.
/// `u` is `positions × c_out`, `out` is `(positions+ks-1) × d`.
pub fn conv1d_scatter_acc<T: Real>(
    u: &[T],
    positions: usize,
    c_out: usize,
    kernels: &[T],
    ks: usize,
    d: usize,
    out: &mut [T],
) {
    let span = ks * d;
    for p in 0..positions {
        let target = &mut out[p * d..p * d + span];
        for o in 0..c_out {
            let coeff = u[p * c_out + o];
            if coeff == T::zero() {
                continue;
            }
            let kernel = &kernels[o * span..(o + 1) * span];
            for (t, k) in target.iter_mut().zip(kernel) {
                *t = *t + coeff * *k;
            }
        }
    }
}

/// Kernel gradient shared by both 1D forms:
/// `grad[o][j][k] += Σ_p short[p][o] · long[p+j][k]`.
pub fn conv1d_kernel_grad_acc<T: Real>(
    long: &[T],
    short: &[T],
    positions: usize,
    c_out: usize,
    ks: usize,
    d: usize,
    grad: &mut [T],
) {
    let span = ks * d;
    for p in 0..positions {
        let window = &long[p * d..p * d + span];
        for o in 0..c_out {
            let coeff = short[p * c_out + o];
            if coeff == T::zero() {
                continue;
            }
            let g = &mut grad[o * span..(o + 1) * span];
            for (t, w) in g.iter_mut().zip(window) {
                *t = *t + coeff * *w;
            }
        }
    }
}

/// Valid 2D cross-correlation of a single plane:
/// `out[o][r][c] = Σ_{i,j} x[r+i][c+j] · kernels[o][i][j]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_acc<T: Real>(
    x: &[T],
    rows: usize,
    cols: usize,
    kernels: &[T],
    c_out: usize,
    kh: usize,
    kw: usize,
    out: &mut [T],
) {
    let out_r = rows + 1 - kh;
    let out_c = cols + 1 - kw;
    for o in 0..c_out {
        let kernel = &kernels[o * kh * kw..(o + 1) * kh * kw];
        for r in 0..out_r {
            for c in 0..out_c {
                let mut acc = T::zero();
                for i in 0..kh {
                    for j in 0..kw {
                        acc = acc + x[(r + i) * cols + c + j] * kernel[i * kw + j];
                    }
                }
                let slot = &mut out[(o * out_r + r) * out_c + c];
                *slot = *slot + acc;
            }
        }
    }
}

/// Adjoint of [`conv2d_acc`] in its input (the transposed 2D convolution).
/// `u` is `c_out × h × w`, `out` is `(h+kh-1) × (w+kw-1)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_scatter_acc<T: Real>(
    u: &[T],
    c_out: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    kh: usize,
    kw: usize,
    out: &mut [T],
) {
    let cols = w + kw - 1;
    for o in 0..c_out {
        let kernel = &kernels[o * kh * kw..(o + 1) * kh * kw];
        for r in 0..h {
            for c in 0..w {
                let coeff = u[(o * h + r) * w + c];
                for i in 0..kh {
                    for j in 0..kw {
                        let slot = &mut out[(r + i) * cols + c + j];
                        *slot = *slot + coeff * kernel[i * kw + j];
                    }
                }
            }
        }
    }
}

/// `grad[o][i][j] += Σ_{r,c} short[o][r][c] · long[r+i][c+j]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad_acc<T: Real>(
    long: &[T],
    short: &[T],
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    grad: &mut [T],
) {
    let cols = w + kw - 1;
    for o in 0..c_out {
        for i in 0..kh {
            for j in 0..kw {
                let mut acc = T::zero();
                for r in 0..h {
                    for c in 0..w {
                        acc = acc + short[(o * h + r) * w + c] * long[(r + i) * cols + c + j];
                    }
                }
                let slot = &mut grad[(o * kh + i) * kw + j];
                *slot = *slot + acc;
            }
        }
    }
}

//! Raw numeric kernels shared by the tensor-level ops and the autodiff graph.
//!
//! Everything here works on flat row-major slices; shape checking happens in
//! the callers.

use matrixmultiply::dgemm;

/// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product, with
/// arbitrary row/column strides on `a` and `b`. `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` and `b`; callers
    // derive them from tensor shapes that were validated against the slice
    // lengths, and `c` holds at least `m * n` elements.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[c, h, w]` map into `[c * 9, h * w]` patch columns for a 3x3
/// window with zero padding 1.
pub(crate) fn im2col3x3(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: accumulates patch-column gradients back into a
/// `[c, h, w]` map.
pub(crate) fn col2im3x3(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// 3x3 / stride 1 / pad 1 cross-correlation. Returns the output and the patch
/// columns (needed again by the backward pass).
pub(crate) fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    filters: &[f64],
    c_out: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let cols = im2col3x3(input, c_in, h, w);
    let mut out = vec![0.0; c_out * hw];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
        }
    }
    let k = c_in * 9;
    gemm(c_out, k, hw, filters, (k, 1), &cols, (hw, 1), 1.0, &mut out);
    (out, cols)
}

pub(crate) fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let plane = &input[ci * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                let s = plane[2 * y * w + 2 * x]
                    + plane[2 * y * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1];
                out[ci * oh * ow + y * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

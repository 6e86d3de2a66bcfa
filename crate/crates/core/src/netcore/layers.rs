//! Convolution, ReLU and max-pool kernels on raw `(C, H, W)` slices.
//!
//! Convolutions are lowered to a single GEMM over an im2col buffer.

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, all row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths checked above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] = a^T * b + beta * c` where `a` is stored `k x m`.
pub(crate) fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `gemm`; `a` is read transposed via swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] = a * b^T + beta * c` where `b` is stored `n x k`.
pub(crate) fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `gemm`; `b` is read transposed via swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3x3 zero-padded patches: output is `(cin * 9) x (h * w)`.
pub(crate) fn im2col3x3(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    let dst = &mut row[i * w..][..w];
                    // column j reads source column j + kx - 1
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

/// Adjoint of [`im2col3x3`].
pub(crate) fn col2im3x3(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..][..w];
                    let src = &row[i * w..][..w];
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
    out
}

/// Adds a per-channel bias to a `(c, hw)` buffer.
pub(crate) fn add_bias(out: &mut [f64], bias: &[f64], hw: usize) {
    for (plane, &b) in out.chunks_exact_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

/// Sums a `(c, hw)` buffer over its spatial axis.
pub(crate) fn sum_spatial(grad: &[f64], hw: usize) -> Vec<f64> {
    grad.chunks_exact(hw).map(|p| p.iter().sum()).collect()
}

/// Fused ReLU + 2x2/2 max-pool. Returns pooled values and, per output, the flat input
/// index of the winning element (first in row-major window order on ties).
pub(crate) fn relu_maxpool2(pre: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best_idx = base + (2 * i) * w + 2 * j;
                let mut best = pre[best_idx].max(0.0);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    let v = pre[idx].max(0.0);
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                let o = (ch * ho + i) * wo + j;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the pre-activation buffer through the ReLU mask.
pub(crate) fn relu_maxpool2_backward(grad_out: &[f64], arg: &[u32], pre: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; pre.len()];
    for (&g, &idx) in grad_out.iter().zip(arg) {
        let idx = idx as usize;
        if pre[idx] > 0.0 {
            grad[idx] += g;
        }
    }
    grad
}

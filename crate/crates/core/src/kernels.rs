//! Dense matrix and convolution kernels on flat row-major slices.
//!
//! Convolutions are lowered to im2col + matrix multiply per sample. Samples
//! are processed in parallel; every reduction across samples is summed in
//! sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_at_b_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub fn matmul_a_bt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent partial sums (fixed order, so the
/// result is reproducible) to let the compiler vectorise.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Static geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }
}

fn im2col<S: Scalar>(g: &ConvGeometry, x: &[S], cols: &mut [S]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc<S: Scalar>(g: &ConvGeometry, cols: &[S], dx: &mut [S]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(g: &ConvGeometry, x: &[S], w: &[S], bias: Option<&[S]>) -> Vec<S> {
    let mut out = vec![S::zero(); g.batch * g.out_sample()];
    out.par_chunks_mut(g.out_sample())
        .zip(x.par_chunks(g.in_sample()))
        .for_each(|(o, xs)| {
            let mut cols = vec![S::zero(); g.patch() * g.out_plane()];
            im2col(g, xs, &mut cols);
            matmul_acc(w, &cols, o, g.out_channels, g.patch(), g.out_plane());
            if let Some(b) = bias {
                for (oc, chunk) in o.chunks_mut(g.out_plane()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[oc]);
                }
            }
        });
    out
}

/// Gradients of a convolution with respect to input and kernel. Either can
/// be skipped when the caller does not need it.
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeometry,
    x: &[S],
    w: &[S],
    dout: &[S],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let patch = g.patch();
    let plane = g.out_plane();
    let per_sample: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = x
        .par_chunks(g.in_sample())
        .zip(dout.par_chunks(g.out_sample()))
        .map(|(xs, ds)| {
            let dw = need_dw.then(|| {
                let mut cols = vec![S::zero(); patch * plane];
                im2col(g, xs, &mut cols);
                let mut dw = vec![S::zero(); g.out_channels * patch];
                matmul_a_bt_acc(ds, &cols, &mut dw, g.out_channels, plane, patch);
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcols = vec![S::zero(); patch * plane];
                matmul_at_b_acc(w, ds, &mut dcols, g.out_channels, patch, plane);
                let mut dx = vec![S::zero(); g.in_sample()];
                col2im_acc(g, &dcols, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.batch * g.in_sample());
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("dx computed"));
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut acc = vec![S::zero(); g.out_channels * patch];
        for (_, d) in &per_sample {
            let d = d.as_ref().expect("dw computed");
            acc.iter_mut().zip(d).for_each(|(a, &v)| *a += v);
        }
        acc
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut ab = vec![0.0; 8];
        matmul_acc(&a, &b, &mut ab, 2, 3, 4);
        // aᵀ stored as 3x2
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64 - 2.0)).collect();
        let mut ab2 = vec![0.0; 8];
        matmul_at_b_acc(&at, &b, &mut ab2, 3, 2, 4);
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |p| ((p * 4 + j) as f64) * 0.5)).collect();
        let mut ab3 = vec![0.0; 8];
        matmul_a_bt_acc(&a, &bt, &mut ab3, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let direct: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(ab[i * 4 + j], direct);
                assert_eq!(ab2[i * 4 + j], direct);
                assert_eq!(ab3[i * 4 + j], direct);
            }
        }
    }
}

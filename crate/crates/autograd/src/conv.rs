//! Stride-1 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::{BackwardOp, Tensor};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.ph == 0 && self.pw == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfolds one `[C,H,W]` image into `[C*kh*kw, Ho*Wo]` columns.
fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize + ki as isize - g.ph as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    // valid ox range: 0 <= ox + kj - pw < w
                    let lo = g.pw.saturating_sub(kj).min(g.wo);
                    let hi = (g.w + g.pw).saturating_sub(kj).min(g.wo);
                    out_row[..lo].fill(T::zero());
                    if hi > lo {
                        let start = lo + kj - g.pw;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    }
                    out_row[hi.max(lo)..].fill(T::zero());
                }
            }
        }
    }
}

/// Scatter-adds columns back into a `[C,H,W]` image (adjoint of im2col).
fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize + ki as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let lo = g.pw.saturating_sub(kj).min(g.wo);
                    let hi = (g.w + g.pw).saturating_sub(kj).min(g.wo);
                    if hi <= lo {
                        continue;
                    }
                    let start = lo + kj - g.pw;
                    let dst = &mut plane[iy as usize * g.w + start..iy as usize * g.w + start + (hi - lo)];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    dst.iter_mut().zip(s).for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
    }
}

struct Conv2dOp<T: Scalar> {
    input: Tensor<T>,
    kernel: Tensor<T>,
    geom: Geom,
}

impl<T: Scalar> BackwardOp<T> for Conv2dOp<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone(), self.kernel.clone()]
    }

    fn backward(&self, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let n = self.input.shape()[0];
        let in_len = g.c * g.h * g.w;
        let out_len = g.k * g.ho * g.wo;
        let hw_out = g.ho * g.wo;
        let pl = g.patch_len();
        let x = self.input.data();
        let w = self.kernel.data();
        let need_dx = self.input.requires_grad();
        let need_dw = self.kernel.requires_grad();

        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &x[s * in_len..(s + 1) * in_len];
                let gs = &grad[s * out_len..(s + 1) * out_len];
                let dw = need_dw.then(|| {
                    let mut dw = vec![T::zero(); g.k * pl];
                    if g.is_pointwise() {
                        gemm(g.k, hw_out, pl, T::one(), Mat::rm(gs, hw_out), Mat::rm_t(xs, hw_out), T::zero(), &mut dw);
                    } else {
                        let mut cols = vec![T::zero(); pl * hw_out];
                        im2col(xs, &g, &mut cols);
                        gemm(g.k, hw_out, pl, T::one(), Mat::rm(gs, hw_out), Mat::rm_t(&cols, hw_out), T::zero(), &mut dw);
                    }
                    dw
                });
                let dx = need_dx.then(|| {
                    if g.is_pointwise() {
                        let mut dx = vec![T::zero(); in_len];
                        gemm(pl, g.k, hw_out, T::one(), Mat::rm_t(w, pl), Mat::rm(gs, hw_out), T::zero(), &mut dx);
                        dx
                    } else {
                        let mut dcols = vec![T::zero(); pl * hw_out];
                        gemm(pl, g.k, hw_out, T::one(), Mat::rm_t(w, pl), Mat::rm(gs, hw_out), T::zero(), &mut dcols);
                        let mut dx = vec![T::zero(); in_len];
                        col2im(&dcols, &g, &mut dx);
                        dx
                    }
                });
                (dx, dw)
            })
            .collect();

        let dx = need_dx.then(|| {
            let mut dx = Vec::with_capacity(n * in_len);
            for (d, _) in &per_sample {
                dx.extend_from_slice(d.as_ref().expect("dx computed"));
            }
            dx
        });
        // Summed in sample order so results do not depend on scheduling.
        let dw = need_dw.then(|| {
            let mut acc = vec![T::zero(); g.k * pl];
            for (_, d) in &per_sample {
                let d = d.as_ref().expect("dw computed");
                acc.iter_mut().zip(d).for_each(|(a, &b)| *a = *a + b);
            }
            acc
        });
        vec![dx, dw]
    }
}

/// `input [N,C,H,W]` correlated with `kernel [K,C,kh,kw]`, zero padding `pad = (ph, pw)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, pad: (usize, usize)) -> Result<Tensor<T>> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 || ks.len() != 4 {
        return shape_err("conv2d", format!("expected 4-D input and kernel, got {is:?} and {ks:?}"));
    }
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (k, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c {
        return shape_err("conv2d", format!("input has {c} channels, kernel expects {kc}"));
    }
    let (ph, pw) = pad;
    if kh == 0 || kw == 0 || kh > h + 2 * ph || kw > w + 2 * pw {
        return shape_err("conv2d", format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * ph, w + 2 * pw));
    }
    let geom = Geom {
        c,
        h,
        w,
        k,
        kh,
        kw,
        ph,
        pw,
        ho: h + 2 * ph - kh + 1,
        wo: w + 2 * pw - kw + 1,
    };
    let in_len = c * h * w;
    let hw_out = geom.ho * geom.wo;
    let out_len = k * hw_out;
    let pl = geom.patch_len();
    let x = input.data();
    let wt = kernel.data();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(s, o)| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        if geom.is_pointwise() {
            gemm(k, pl, hw_out, T::one(), Mat::rm(wt, pl), Mat::rm(xs, hw_out), T::zero(), o);
        } else {
            let mut cols = vec![T::zero(); pl * hw_out];
            im2col(xs, &geom, &mut cols);
            gemm(k, pl, hw_out, T::one(), Mat::rm(wt, pl), Mat::rm(&cols, hw_out), T::zero(), o);
        }
    });
    Ok(Tensor::from_op(
        vec![n, k, geom.ho, geom.wo],
        out,
        Box::new(Conv2dOp {
            input: input.clone(),
            kernel: kernel.clone(),
            geom,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::<f64>::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = Tensor::<f64>::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &k, (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let data: Vec<f64> = (0..2 * 5 * 4).map(|v| (v as f64).sin()).collect();
        let x = Tensor::new(&[1, 2, 5, 4], data.clone()).unwrap();
        let mut kd = vec![0.0; 2 * 2 * 9];
        kd[4] = 1.0; // out 0 <- in 0 centre
        kd[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 centre
        let k = Tensor::new(&[2, 2, 3, 3], kd).unwrap();
        let y = conv2d(&x, &k, (1, 1)).unwrap();
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), (1, 1)).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 7, 3]), (1, 1)).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 6, 3]), (1, 1)).is_ok());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Geom { c: 2, h: 4, w: 5, k: 1, kh: 3, kw: 5, ph: 1, pw: 2, ho: 4, wo: 5 };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..g.patch_len() * 20).map(|v| (v as f64 * 0.11).sin()).collect();
        let mut cols = vec![0.0; g.patch_len() * 20];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

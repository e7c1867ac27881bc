use crate::error::{shape_err, AutogradError, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardOp, Tensor};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable view of a layer's running statistics.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    /// Weight of the current batch in the exponential average.
    pub momentum: T,
}

struct BatchNormOp<T: Scalar> {
    input: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

fn dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2] * shape[3])
}

impl<T: Scalar> BackwardOp<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, c, hw) = dims(self.input.shape());
        let x = self.input.data();
        let gamma = self.gamma.data();
        let m = T::from_usize(n * hw).unwrap();
        let (mean, inv_std, mode) = (&self.mean[..], &self.inv_std[..], self.mode);
        // Per-channel sums: (sum dy, sum dy * xhat).
        let sums: Vec<(T, T)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let (mu, is) = (mean[ch], inv_std[ch]);
                let mut sdy = T::zero();
                let mut sdyx = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        sdy = sdy + grad[i];
                        sdyx = sdyx + grad[i] * (x[i] - mu) * is;
                    }
                }
                (sdy, sdyx)
            })
            .collect();

        let dx = self.input.requires_grad().then(|| {
            let mut dx = vec![T::zero(); x.len()];
            dx.par_chunks_mut(hw).enumerate().for_each(|(plane, out)| {
                let ch = plane % c;
                let (mu, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
                let base = plane * hw;
                match mode {
                    Mode::Train => {
                        let (sdy, sdyx) = sums[ch];
                        let scale = g * is / m;
                        for (i, o) in out.iter_mut().enumerate() {
                            let xhat = (x[base + i] - mu) * is;
                            *o = scale * (m * grad[base + i] - sdy - xhat * sdyx);
                        }
                    }
                    Mode::Eval => {
                        for (i, o) in out.iter_mut().enumerate() {
                            *o = grad[base + i] * g * is;
                        }
                    }
                }
            });
            dx
        });
        let dgamma = self.gamma.requires_grad().then(|| sums.iter().map(|s| s.1).collect());
        let dbeta = self.beta.requires_grad().then(|| sums.iter().map(|s| s.0).collect());
        vec![dx, dgamma, dbeta]
    }
}

/// Per-channel batch normalisation over `[N,C,H,W]`.
///
/// Train mode normalises with batch statistics (biased variance) and, when
/// `running` is given, folds the batch mean and unbiased variance into it.
/// Eval mode normalises with `running`, which is then required.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<RunningStats<'_, T>>,
    mode: Mode,
    eps: T,
) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return shape_err("batchnorm2d", format!("expected 4-D input, got {shape:?}"));
    }
    let (n, c, hw) = dims(shape);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            "batchnorm2d",
            format!("gamma/beta must be [{c}], got {:?}/{:?}", gamma.shape(), beta.shape()),
        );
    }
    if let Some(r) = running.as_ref() {
        if r.mean.len() != c || r.var.len() != c {
            return shape_err("batchnorm2d", "running stats length differs from channel count");
        }
    }
    let x = input.data();
    let count = n * hw;
    let (mean, inv_std) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(AutogradError::DegenerateBatch { count });
            }
            let m = T::from_usize(count).unwrap();
            let stats: Vec<(T, T)> = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut sum = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        sum = sum + x[base..base + hw].iter().copied().sum::<T>();
                    }
                    let mu = sum / m;
                    let mut sq = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        sq = sq + x[base..base + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    (mu, sq / m)
                })
                .collect();
            if let Some(r) = running {
                let unbias = m / (m - T::one());
                for (ch, &(mu, var)) in stats.iter().enumerate() {
                    r.mean[ch] = (T::one() - r.momentum) * r.mean[ch] + r.momentum * mu;
                    r.var[ch] = (T::one() - r.momentum) * r.var[ch] + r.momentum * var * unbias;
                }
            }
            let mean = stats.iter().map(|s| s.0).collect::<Vec<_>>();
            let inv_std: Vec<T> = stats.iter().map(|s| T::one() / (s.1 + eps).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Eval => {
            let Some(r) = running else {
                return shape_err("batchnorm2d", "eval mode requires running statistics");
            };
            (r.mean.to_vec(), r.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect())
        }
    };
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(hw.max(1)).enumerate().for_each(|(plane, o)| {
        let ch = plane % c;
        let scale = g[ch] * inv_std[ch];
        let shift = b[ch] - mean[ch] * scale;
        let src = &x[plane * hw..(plane + 1) * hw];
        o.iter_mut().zip(src).for_each(|(o, &v)| *o = v * scale + shift);
    });
    Ok(Tensor::from_op(
        shape.to_vec(),
        out,
        Box::new(BatchNormOp {
            input: input.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean,
            inv_std,
            mode,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, c: usize, hw: usize) -> Vec<f64> {
        (0..n * c * hw).map(|i| ((i * 7919) % 113) as f64 * 0.05 - 2.0 + (i % 3) as f64).collect()
    }

    #[test]
    fn train_mode_standardises_each_channel() {
        let x = Tensor::new(&[3, 2, 2, 2], sample(3, 2, 4)).unwrap();
        let y = batchnorm2d(&x, &Tensor::new(&[2], vec![1.0; 2]).unwrap(), &Tensor::zeros(&[2]), None, Mode::Train, 1e-5)
            .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|s| y.data()[(s * 2 + ch) * 4..(s * 2 + ch) * 4 + 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::new(&[2, 2, 1, 3], sample(2, 2, 3)).unwrap();
        let beta = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let y = batchnorm2d(&x, &Tensor::zeros(&[2]), &beta, None, Mode::Train, 1e-5).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 3) % 2;
            assert_eq!(*v, beta.data()[ch]);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let data = sample(4, 3, 5);
        let x = Tensor::new(&[4, 3, 1, 5], data.clone()).unwrap();
        let gamma = Tensor::new(&[3], vec![1.5, 0.5, 2.0]).unwrap();
        let beta = Tensor::new(&[3], vec![0.1, 0.2, -0.3]).unwrap();
        let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
        for _ in 0..3 {
            let r = RunningStats { mean: &mut rm, var: &mut rv, momentum: 0.1 };
            batchnorm2d(&x, &gamma, &beta, Some(r), Mode::Train, 1e-5).unwrap();
        }
        // Independent oracle for the running estimates after three identical batches.
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|s| data[(s * 3 + ch) * 5..(s * 3 + ch) * 5 + 5].to_vec()).collect();
            let mu = vals.iter().sum::<f64>() / 20.0;
            let uvar = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 19.0;
            let decay = 0.9f64.powi(3);
            assert!((rm[ch] - mu * (1.0 - decay)).abs() < 1e-12);
            assert!((rv[ch] - (decay + uvar * (1.0 - decay))).abs() < 1e-12);
        }
        let r = RunningStats { mean: &mut rm, var: &mut rv, momentum: 0.1 };
        let y = batchnorm2d(&x, &gamma, &beta, Some(r), Mode::Eval, 1e-5).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 5) % 3;
            let want = gamma.data()[ch] * (data[i] - rm[ch]) / (rv[ch] + 1e-5).sqrt() + beta.data()[ch];
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        let g = Tensor::zeros(&[2]);
        let err = batchnorm2d(&x, &g, &g, None, Mode::Train, 1e-5).unwrap_err();
        assert_eq!(err, AutogradError::DegenerateBatch { count: 1 });
    }
}

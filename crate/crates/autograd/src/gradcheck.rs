//! Finite-difference verification of the analytic gradients.

use crate::batchnorm::{batchnorm2d, Mode};
use crate::conv::conv2d;
use crate::ops::{avg_pool_2x2, concat_channels, global_avg_pool, linear, mul, relu, softmax_cross_entropy, sum};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Largest relative error between the backward-pass gradient of the scalar
/// function `f` at `point` and central differences with step `eps`.
///
/// Relative error per coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn gradient_check<F>(f: F, shape: &[usize], point: &[f64], eps: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    let x = Tensor::param(shape, point.to_vec()).expect("point matches shape");
    let y = f(&x);
    y.backward().expect("scalar function");
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |data: Vec<f64>| f(&Tensor::new(shape, data).expect("shape")).item();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += eps;
        let mut minus = point.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        let denom = 1f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Outcome of checking one operator.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    /// Random points evaluated (each may check several inputs of the op).
    pub points: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Values bounded away from zero so the relu kink is never straddled.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn konst(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("shape")
}

/// Projects an output onto fixed random weights so every output element
/// contributes to the scalar under test.
fn project(y: &Tensor<f64>, weights: &[f64]) -> Tensor<f64> {
    sum(&mul(y, &konst(y.shape(), weights.to_vec())).unwrap())
}

const STEP: f64 = 1e-6;

/// Runs every operator's gradient check at `points` random points each.
pub fn run_gradient_suite(points: usize, seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |op: &'static str, errs: Vec<f64>| {
        results.push(OpCheck {
            op,
            points,
            max_rel_error: errs.into_iter().fold(0.0, f64::max),
        });
    };

    let mut errs = Vec::new();
    for _ in 0..points {
        let (xs, ks) = ([2, 3, 5, 6], [4, 3, 3, 5]);
        let x = normal(&mut rng, xs.iter().product());
        let k = normal(&mut rng, ks.iter().product());
        let r = normal(&mut rng, 2 * 4 * 5 * 6);
        let kt = konst(&ks, k.clone());
        errs.push(gradient_check(|t| project(&conv2d(t, &kt, (1, 2)).unwrap(), &r), &xs, &x, STEP));
        let xt = konst(&xs, x);
        errs.push(gradient_check(|t| project(&conv2d(&xt, t, (1, 2)).unwrap(), &r), &ks, &k, STEP));
    }
    record("conv2d", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let xs = [3, 2, 3, 4];
        let x: Vec<f64> = normal(&mut rng, 72).iter().map(|v| v * 2.0 + 0.5).collect();
        let g: Vec<f64> = normal(&mut rng, 2).iter().map(|v| 1.0 + 0.3 * v).collect();
        let b = normal(&mut rng, 2);
        let r = normal(&mut rng, 72);
        let (gt, bt, xt) = (konst(&[2], g.clone()), konst(&[2], b.clone()), konst(&xs, x.clone()));
        let bn = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            project(&batchnorm2d(x, g, b, None, Mode::Train, 1e-5).unwrap(), &r)
        };
        errs.push(gradient_check(|t| bn(t, &gt, &bt), &xs, &x, STEP));
        errs.push(gradient_check(|t| bn(&xt, t, &bt), &[2], &g, STEP));
        errs.push(gradient_check(|t| bn(&xt, &gt, t), &[2], &b, STEP));
    }
    record("batchnorm2d", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let x = off_zero(&mut rng, 24);
        let r = normal(&mut rng, 24);
        errs.push(gradient_check(|t| project(&relu(t), &r), &[2, 3, 2, 2], &x, STEP));
    }
    record("relu", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let x = normal(&mut rng, 2 * 2 * 5 * 4);
        let r = normal(&mut rng, 2 * 2 * 2 * 2);
        errs.push(gradient_check(|t| project(&avg_pool_2x2(t).unwrap(), &r), &[2, 2, 5, 4], &x, STEP));
    }
    record("avg_pool_2x2", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let x = normal(&mut rng, 2 * 3 * 3 * 4);
        let r = normal(&mut rng, 6);
        errs.push(gradient_check(|t| project(&global_avg_pool(t).unwrap(), &r), &[2, 3, 3, 4], &x, STEP));
    }
    record("global_avg_pool", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let a = normal(&mut rng, 2 * 3 * 2 * 2);
        let b = normal(&mut rng, 2 * 5 * 2 * 2);
        let r = normal(&mut rng, 2 * 8 * 2 * 2);
        let (at, bt) = (konst(&[2, 3, 2, 2], a.clone()), konst(&[2, 5, 2, 2], b.clone()));
        errs.push(gradient_check(|t| project(&concat_channels(&[t, &bt]).unwrap(), &r), &[2, 3, 2, 2], &a, STEP));
        errs.push(gradient_check(|t| project(&concat_channels(&[&at, t]).unwrap(), &r), &[2, 5, 2, 2], &b, STEP));
    }
    record("concat_channels", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let (x, w, b) = (normal(&mut rng, 12), normal(&mut rng, 20), normal(&mut rng, 5));
        let r = normal(&mut rng, 15);
        let (xt, wt, bt) = (konst(&[3, 4], x.clone()), konst(&[5, 4], w.clone()), konst(&[5], b.clone()));
        errs.push(gradient_check(|t| project(&linear(t, &wt, &bt).unwrap(), &r), &[3, 4], &x, STEP));
        errs.push(gradient_check(|t| project(&linear(&xt, t, &bt).unwrap(), &r), &[5, 4], &w, STEP));
        errs.push(gradient_check(|t| project(&linear(&xt, &wt, t).unwrap(), &r), &[5], &b, STEP));
    }
    record("linear", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let x: Vec<f64> = normal(&mut rng, 12).iter().map(|v| v * 2.0).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        errs.push(gradient_check(|t| softmax_cross_entropy(t, &labels).unwrap(), &[4, 3], &x, STEP));
    }
    record("softmax_cross_entropy", errs);

    let mut errs = Vec::new();
    for _ in 0..points {
        let xs = [3, 2, 4, 4];
        let ks = [3, 2, 3, 3];
        let x = normal(&mut rng, xs.iter().product());
        let k = normal(&mut rng, ks.iter().product());
        let w = normal(&mut rng, 2 * 3);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let (g, b) = (konst(&[3], vec![1.0, 0.8, 1.2]), konst(&[3], vec![0.1, -0.2, 0.3]));
        let (wt, bias) = (konst(&[2, 3], w), konst(&[2], vec![0.0, 0.1]));
        let net = |x: &Tensor<f64>, k: &Tensor<f64>| {
            let h = conv2d(x, k, (1, 1)).unwrap();
            let h = batchnorm2d(&h, &g, &b, None, Mode::Train, 1e-5).unwrap();
            let h = avg_pool_2x2(&relu(&h)).unwrap();
            let h = linear(&global_avg_pool(&h).unwrap(), &wt, &bias).unwrap();
            softmax_cross_entropy(&h, &labels).unwrap()
        };
        let xt = konst(&xs, x.clone());
        errs.push(gradient_check(|t| net(&xt, t), &ks, &k, STEP));
        let kt = konst(&ks, k);
        errs.push(gradient_check(|t| net(t, &kt), &xs, &x, STEP));
    }
    record("composite", errs);

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = gradient_check(|t| sum(&mul(t, t).unwrap()), &[3], &[0.5, -1.0, 2.0], 1e-5);
        assert!(err < 1e-8, "{err}");
    }
}

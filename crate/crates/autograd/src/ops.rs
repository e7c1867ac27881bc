use crate::error::{shape_err, AutogradError, Result};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::{BackwardOp, Tensor};

struct Relu<T: Scalar>(Tensor<T>);

impl<T: Scalar> BackwardOp<T> for Relu<T> {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.0.clone()]
    }
    fn backward(&self, _out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let dx = self
            .0
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(dx)]
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_op(x.shape().to_vec(), data, Box::new(Relu(x.clone())))
}

struct Sum<T: Scalar>(Tensor<T>);

impl<T: Scalar> BackwardOp<T> for Sum<T> {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.0.clone()]
    }
    fn backward(&self, _out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; self.0.numel()])]
    }
}

/// Sum of all elements as a scalar.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum();
    Tensor::from_op(vec![1], vec![s], Box::new(Sum(x.clone())))
}

struct Mul<T: Scalar>(Tensor<T>, Tensor<T>);

impl<T: Scalar> BackwardOp<T> for Mul<T> {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.0.clone(), self.1.clone()]
    }
    fn backward(&self, _out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (self.0.data(), self.1.data());
        let da = self.0.requires_grad().then(|| grad.iter().zip(b).map(|(&g, &v)| g * v).collect());
        let db = self.1.requires_grad().then(|| grad.iter().zip(a).map(|(&g, &v)| g * v).collect());
        vec![da, db]
    }
}

/// Elementwise product of equally shaped tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, Box::new(Mul(a.clone(), b.clone()))))
}

fn nchw(op: &'static str, x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => shape_err(op, format!("expected [N,C,H,W], got {s:?}")),
    }
}

struct AvgPool<T: Scalar>(Tensor<T>);

impl<T: Scalar> BackwardOp<T> for AvgPool<T> {
    fn name(&self) -> &'static str {
        "avg_pool_2x2"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.0.clone()]
    }
    fn backward(&self, _out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let s = self.0.shape();
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut dx = vec![T::zero(); self.0.numel()];
        for plane in 0..s[0] * s[1] {
            let src = &grad[plane * ho * wo..(plane + 1) * ho * wo];
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = src[oy * wo + ox] * quarter;
                    let (y, x) = (2 * oy, 2 * ox);
                    dst[y * w + x] = g;
                    dst[y * w + x + 1] = g;
                    dst[(y + 1) * w + x] = g;
                    dst[(y + 1) * w + x + 1] = g;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Non-overlapping 2x2 mean pooling; an odd trailing row/column is dropped.
pub fn avg_pool_2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("avg_pool_2x2", x)?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return shape_err("avg_pool_2x2", format!("spatial size {h}x{w} too small"));
    }
    let src = x.data();
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let (y, x) = (2 * oy, 2 * ox);
                out.push((p[y * w + x] + p[y * w + x + 1] + p[(y + 1) * w + x] + p[(y + 1) * w + x + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, Box::new(AvgPool(x.clone()))))
}

struct GlobalAvgPool<T: Scalar>(Tensor<T>);

impl<T: Scalar> BackwardOp<T> for GlobalAvgPool<T> {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.0.clone()]
    }
    fn backward(&self, _out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let s = self.0.shape();
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let dx = (0..self.0.numel()).map(|i| grad[i / hw] * inv).collect();
        vec![Some(dx)]
    }
}

/// `[N,C,H,W] -> [N,C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("global_avg_pool", x)?;
    let hw = h * w;
    if hw == 0 {
        return shape_err("global_avg_pool", "empty spatial extent");
    }
    let inv = T::one() / T::from_usize(hw).unwrap();
    let out = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Ok(Tensor::from_op(vec![n, c], out, Box::new(GlobalAvgPool(x.clone()))))
}

struct Concat<T: Scalar> {
    inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> BackwardOp<T> for Concat<T> {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        self.inputs.clone()
    }
    fn backward(&self, out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let os = out.shape();
        let (n, total, hw) = (os[0], os[1], os[2] * os[3]);
        let mut offset = 0;
        self.inputs
            .iter()
            .map(|t| {
                let c = t.shape()[1];
                let g = t.requires_grad().then(|| {
                    let mut g = Vec::with_capacity(t.numel());
                    for s in 0..n {
                        let start = (s * total + offset) * hw;
                        g.extend_from_slice(&grad[start..start + c * hw]);
                    }
                    g
                });
                offset += c;
                g
            })
            .collect()
    }
}

/// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = inputs.first() else {
        return shape_err("concat_channels", "no inputs");
    };
    let (n, _, h, w) = nchw("concat_channels", first)?;
    let mut total = 0;
    for t in inputs {
        let (tn, tc, th, tw) = nchw("concat_channels", t)?;
        if (tn, th, tw) != (n, h, w) {
            return shape_err("concat_channels", format!("{:?} vs {:?}", first.shape(), t.shape()));
        }
        total += tc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
        }
    }
    Ok(Tensor::from_op(
        vec![n, total, h, w],
        out,
        Box::new(Concat {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        }),
    ))
}

struct Linear<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> BackwardOp<T> for Linear<T> {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone(), self.weight.clone(), self.bias.clone()]
    }
    fn backward(&self, _out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, f) = (self.input.shape()[0], self.input.shape()[1]);
        let o = self.weight.shape()[0];
        let dx = self.input.requires_grad().then(|| {
            let mut dx = vec![T::zero(); n * f];
            gemm(n, o, f, T::one(), Mat::rm(grad, o), Mat::rm(self.weight.data(), f), T::zero(), &mut dx);
            dx
        });
        let dw = self.weight.requires_grad().then(|| {
            let mut dw = vec![T::zero(); o * f];
            gemm(o, n, f, T::one(), Mat::rm_t(grad, o), Mat::rm(self.input.data(), f), T::zero(), &mut dw);
            dw
        });
        let db = self.bias.requires_grad().then(|| {
            (0..o).map(|j| (0..n).map(|s| grad[s * o + j]).sum()).collect()
        });
        vec![dx, dw, db]
    }
}

/// `x [N,F] · weightᵀ [F,O] + bias [O]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.shape() != [ws[0]] {
        return shape_err(
            "linear",
            format!("input {xs:?}, weight {ws:?}, bias {:?}", bias.shape()),
        );
    }
    let (n, f, o) = (xs[0], xs[1], ws[0]);
    let mut out = vec![T::zero(); n * o];
    for s in 0..n {
        out[s * o..(s + 1) * o].copy_from_slice(bias.data());
    }
    gemm(n, f, o, T::one(), Mat::rm(x.data(), f), Mat::rm_t(weight.data(), f), T::one(), &mut out);
    Ok(Tensor::from_op(
        vec![n, o],
        out,
        Box::new(Linear {
            input: x.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        }),
    ))
}

/// Row-wise log-softmax of a `[N,C]` slice.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

struct SoftmaxCrossEntropy<T: Scalar> {
    logits: Tensor<T>,
    labels: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for SoftmaxCrossEntropy<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.logits.clone()]
    }
    fn backward(&self, _out: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let c = self.logits.shape()[1];
        let scale = grad[0] / T::from_usize(self.labels.len()).unwrap();
        let mut d: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (s, &y) in self.labels.iter().enumerate() {
            d[s * c + y] = d[s * c + y] - scale;
        }
        vec![Some(d)]
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return shape_err(
            "softmax_cross_entropy",
            format!("logits {s:?} with {} labels", labels.len()),
        );
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(AutogradError::LabelOutOfRange { label: bad, classes: c });
    }
    let logp = log_softmax_rows(logits.data(), c);
    let n = T::from_usize(labels.len()).unwrap();
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[i * c + y]).sum::<T>() / n;
    let probs = logp.iter().map(|v| v.exp()).collect();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        Box::new(SoftmaxCrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f64>::new(&[2], vec![-3.0, 5.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 5.0]);
    }

    #[test]
    fn global_pool_of_constant_planes() {
        let mut d = vec![1.5; 16];
        d.extend(vec![-2.0; 16]);
        let x = Tensor::<f64>::new(&[1, 2, 4, 4], d).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[1.5, -2.0]);
    }

    #[test]
    fn avg_pool_truncates_odd_dims() {
        let x = Tensor::<f64>::new(&[1, 1, 3, 5], (0..15).map(|v| v as f64).collect()).unwrap();
        let y = avg_pool_2x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let x = Tensor::<f64>::new(&[2, 3], vec![0.7; 6]).unwrap();
        let loss = softmax_cross_entropy(&x, &[2, 0]).unwrap();
        assert!((loss.item() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&x, &[3, 0]),
            Err(AutogradError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn concat_shapes_and_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        let b = Tensor::<f32>::zeros(&[2, 5, 4, 4]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[2, 8, 4, 4]);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[2, 5, 4, 2])]).is_err());
    }

    #[test]
    fn sum_and_square_gradients() {
        let x = Tensor::<f64>::param(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

        let y = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        sum(&mul(&y, &y).unwrap()).backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(relu(&x).backward(), Err(AutogradError::NonScalarLoss { .. })));
    }
}

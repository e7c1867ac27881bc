use crate::error::{AutogradError, Result};
use crate::param::Parameter;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Trainable parameters, failing if any lacks a gradient (nothing is updated then).
fn trainable<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
) -> Result<Vec<&'a mut Parameter<T>>> {
    let params: Vec<_> = params.into_iter().filter(|p| p.trainable).collect();
    if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
        return Err(AutogradError::MissingGradient { name: p.name.clone() });
    }
    Ok(params)
}

/// `p <- p - lr * (g + wd * p)`, through a momentum buffer when `momentum > 0`.
/// Gradients are zeroed afterwards.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    let (lr, mu, wd) = (T::lit(lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for p in trainable(params)? {
        let mut g: Vec<T> = p.grad().expect("checked").to_vec();
        g.iter_mut().zip(p.data()).for_each(|(g, &w)| *g = *g + wd * w);
        let update = if cfg.momentum > 0.0 {
            let buf = p.state.momentum.get_or_insert_with(|| vec![T::zero(); g.len()]);
            buf.iter_mut().zip(&g).for_each(|(b, &g)| *b = mu * *b + g);
            buf.clone()
        } else {
            g
        };
        p.data_mut().iter_mut().zip(&update).for_each(|(w, &u)| *w = *w - lr * u);
        p.state.step += 1;
        p.zero_grad();
    }
    Ok(())
}

/// Bias-corrected Adam update. Gradients are zeroed afterwards.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let (b1, b2, eps, wd) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    let lr_t = T::lit(lr);
    for p in trainable(params)? {
        p.state.step += 1;
        let t = p.state.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let n = p.data().len();
        let g: Vec<T> = p
            .grad()
            .expect("checked")
            .iter()
            .zip(p.data())
            .map(|(&g, &w)| g + wd * w)
            .collect();
        let mut m = p.state.first_moment.take().unwrap_or_else(|| vec![T::zero(); n]);
        let mut v = p.state.second_moment.take().unwrap_or_else(|| vec![T::zero(); n]);
        for i in 0..n {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        }
        let data = p.data_mut();
        for i in 0..n {
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        p.state.first_moment = Some(m);
        p.state.second_moment = Some(v);
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new("p", &[1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_single_step() {
        let mut p = scalar_param(1.0);
        p.set_grad(vec![2.0]);
        sgd_step([&mut p], 0.1, &SgdConfig::default()).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [2.0, -0.003, 150.0] {
            let mut p = scalar_param(0.5);
            p.set_grad(vec![g]);
            adam_step([&mut p], 0.01, &AdamConfig::default()).unwrap();
            let delta = p.data()[0] - 0.5;
            assert!((delta.abs() - 0.01).abs() < 1e-7, "g={g} delta={delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn adam_minimises_shifted_quadratic() {
        // Independent scalar recurrence of the same update rule.
        let (mut x, mut m, mut v) = (0.0f64, 0.0, 0.0);
        for t in 1..=200 {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        let mut p = scalar_param(0.0);
        for _ in 0..200 {
            let g = 2.0 * (p.data()[0] - 3.0);
            p.set_grad(vec![g]);
            adam_step([&mut p], 0.1, &AdamConfig::default()).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.1);
        assert!((p.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_reported_without_updating() {
        let mut a = scalar_param(1.0);
        a.set_grad(vec![1.0]);
        let mut b = Parameter::<f64>::new("b", &[1], vec![2.0]).unwrap();
        let err = sgd_step([&mut a, &mut b], 0.1, &SgdConfig::default()).unwrap_err();
        assert_eq!(err, AutogradError::MissingGradient { name: "b".into() });
        assert_eq!(a.data()[0], 1.0);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = Parameter::<f32>::new("w", &[3], vec![0.25, -1.0, 4.0]).unwrap();
        let before = p.data().to_vec();
        for _ in 0..3 {
            p.set_grad(vec![0.0; 3]);
            adam_step([&mut p], 0.1, &AdamConfig::default()).unwrap();
            p.set_grad(vec![0.0; 3]);
            sgd_step([&mut p], 0.1, &SgdConfig { momentum: 0.9, weight_decay: 0.0 }).unwrap();
        }
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn buffers_are_skipped() {
        let mut p = Parameter::<f64>::buffer("running_mean", &[2], vec![1.0, 2.0]).unwrap();
        adam_step([&mut p], 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }
}

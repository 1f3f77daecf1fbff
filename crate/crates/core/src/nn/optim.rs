use super::params::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let n = params.num_scalars();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are validated before any state or parameter is
    /// touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        params.ensure_congruent(grads)?;
        if self.m.len() != params.num_scalars() {
            return Err(Error::LayoutMismatch(
                "optimizer state does not match parameter count".into(),
            ));
        }
        grads.ensure_finite("gradient of")?;

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut offset = 0;
        for slot in 0..params.len() {
            let g = grads.tensor(slot).data();
            let p = params.tensor_mut(slot).data_mut();
            let m = &mut self.m[offset..offset + g.len()];
            let v = &mut self.v[offset..offset + g.len()];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += g.len();
        }
        Ok(())
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    target.ensure_congruent(online)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    for slot in 0..target.len() {
        let src = online.tensor(slot).data();
        for (t, &o) in target.tensor_mut(slot).data_mut().iter_mut().zip(src) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_set(1.5);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &scalar_set(0.0), 0.1).unwrap();
        assert_eq!(p.flat(), vec![1.5]);
    }

    #[test]
    fn single_step_matches_hand_trace() {
        // m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2
        // update = lr * g / (|g| + eps)
        let (w0, g, lr) = (0.5, 0.2, 0.01);
        let mut p = scalar_set(w0);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &scalar_set(g), lr).unwrap();
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expected = w0 - lr * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.flat()[0] - expected).abs() < 1e-12);
        assert!((p.flat()[0] - (w0 - lr * g / (g + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected_before_mutation() {
        let mut p = scalar_set(1.0);
        let mut opt = Adam::new(&p);
        assert!(opt.step(&mut p, &scalar_set(f64::INFINITY), 0.1).is_err());
        assert_eq!(p.flat(), vec![1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn ema_edge_cases() {
        let online = scalar_set(1.0);
        let mut t = scalar_set(0.0);
        ema_update(&mut t, &online, 0.005).unwrap();
        assert_eq!(t.flat(), vec![0.005]);

        let mut t = scalar_set(0.3);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.flat(), vec![0.3]);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.flat(), vec![1.0]);
    }

    #[test]
    fn ema_layout_mismatch() {
        let mut t = scalar_set(0.0);
        let mut other = ParamSet::new();
        other.push("v", Tensor::scalar(1.0));
        assert!(matches!(
            ema_update(&mut t, &other, 0.5),
            Err(Error::LayoutMismatch(_))
        ));
    }
}

//! AdamW with decoupled weight decay, and a gradient accumulation window.

use super::mlp::ParamVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// Rebuilds a state from persisted moments.
    pub fn from_parts(lr: f64, weight_decay: f64, betas: (f64, f64), eps: f64, step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Shape("moment buffers differ in length".into()));
        }
        Ok(Self { lr, weight_decay, beta1: betas.0, beta2: betas.1, eps, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update of `params` from `grads`. A non-finite gradient leaves both
    /// the parameters and the state untouched and returns an error.
    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
        params.ensure_compatible(grads)?;
        if params.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        if let Some(i) = grads.values().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { iteration: self.step, what: format!("gradient coordinate {i}") });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grads.values()).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Running mean of micro-batch gradients; yields the mean once every
/// `n_accum` pushes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    n_accum: usize,
    count: usize,
    buffer: Option<ParamVector>,
}

impl GradAccumulator {
    pub fn new(n_accum: usize) -> Result<Self> {
        if n_accum == 0 {
            return Err(Error::Contract("accumulation window must be at least 1".into()));
        }
        Ok(Self { n_accum, count: 0, buffer: None })
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    pub fn buffer(&self) -> Option<&ParamVector> {
        self.buffer.as_ref()
    }

    pub fn restore(&mut self, count: usize, buffer: Option<ParamVector>) {
        self.count = count;
        self.buffer = buffer;
    }

    pub fn push(&mut self, grads: ParamVector) -> Result<Option<ParamVector>> {
        match &mut self.buffer {
            None => self.buffer = Some(grads),
            Some(buf) => {
                buf.ensure_compatible(&grads)?;
                for (b, g) in buf.values_mut().iter_mut().zip(grads.values()) {
                    *b += g;
                }
            }
        }
        self.count += 1;
        if self.count < self.n_accum {
            return Ok(None);
        }
        let mut mean = self.buffer.take().expect("buffer filled above");
        self.count = 0;
        if self.n_accum > 1 {
            let inv = 1.0 / self.n_accum as f64;
            mean.values_mut().iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Some(mean))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::Layout;
    use std::sync::Arc;

    fn vec_params(values: Vec<f64>) -> ParamVector {
        // A 1-layer net with fan_in = n-1 and one output has exactly n params.
        let n = values.len();
        let layout = Arc::new(Layout::mlp(n - 1, 1, 0, 1));
        ParamVector::from_values(layout, values).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec_params(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut opt = AdamW::new(3, 1e-2, 0.0);
        opt.step(&mut p, &vec_params(vec![0.0; 3])).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias correction makes m̂ = g and v̂ = g², so Δ = -lr·g/(|g| + eps).
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec_params(vec![0.0; 3]);
        let lr = 0.1;
        let mut opt = AdamW::new(3, lr, 0.0);
        opt.step(&mut p, &vec_params(g.to_vec())).unwrap();
        for (pi, gi) in p.values().iter().zip(g) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn pure_weight_decay_shrinks_geometrically() {
        let mut p = vec_params(vec![2.0, -3.0]);
        let mut opt = AdamW::new(2, 0.01, 0.5);
        opt.step(&mut p, &vec_params(vec![0.0; 2])).unwrap();
        assert!((p.values()[0] - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
        assert!((p.values()[1] + 3.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec_params(vec![0.7, 0.1]);
        let before = p.clone();
        let mut opt = AdamW::new(2, 0.0, 0.1);
        for _ in 0..5 {
            opt.step(&mut p, &vec_params(vec![1.0, -3.0])).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_is_reported() {
        let mut p = vec_params(vec![1.0, 1.0]);
        let mut opt = AdamW::new(2, 0.1, 0.0);
        let mut g = vec_params(vec![0.0, 0.0]);
        g.values_mut()[0] = f64::NAN;
        let err = opt.step(&mut p, &g);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn accumulation_means() {
        let mut acc = GradAccumulator::new(1).unwrap();
        let g = vec_params(vec![1.0, 2.0]);
        assert_eq!(acc.push(g.clone()).unwrap(), Some(g.clone()));

        let mut acc = GradAccumulator::new(2).unwrap();
        assert_eq!(acc.push(g.clone()).unwrap(), None);
        assert_eq!(acc.push(g.clone()).unwrap(), Some(g.clone()));

        assert_eq!(acc.push(vec_params(vec![1.0, 2.0])).unwrap(), None);
        let mean = acc.push(vec_params(vec![3.0, 6.0])).unwrap().unwrap();
        assert_eq!(mean.values(), &[2.0, 4.0]);
        assert!(GradAccumulator::new(0).is_err());
    }
}

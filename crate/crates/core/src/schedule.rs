//! Variance-preserving diffusion schedule with a linear β(t), the forward
//! marginal interpolation, and the first-order exponential-integrator solver
//! for the probability-flow ODE.
//!
//! With `β(t) = β_min + t(β_max − β_min)`:
//!
//! ```text
//! log α(t) = −¼ t² (β_max − β_min) − ½ t β_min,   σ(t) = √(1 − α²)
//! λ(t)     = log α(t) − log σ(t)                   (log signal-to-noise ratio)
//! f(t)     = −½ β(t),   g²(t) = β(t)
//! ```

use crate::error::{contract, Error, Result};
use crate::nn::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, t_min: 1e-3, t_max: 1.0 }
    }
}

/// A step from `t` down to `t_prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePair {
    pub t: f64,
    pub t_prev: f64,
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_min: f64, t_max: f64) -> Result<Self> {
        let ok = beta_min > 0.0 && beta_max > beta_min && t_min > 0.0 && t_min < t_max && t_max.is_finite() && beta_max.is_finite();
        if !ok {
            return Err(Error::Domain(format!("invalid schedule: beta in [{beta_min}, {beta_max}], t in [{t_min}, {t_max}]")));
        }
        Ok(Self { beta_min, beta_max, t_min, t_max })
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.t_min && t <= self.t_max) {
            return Err(Error::Domain(format!("time {t} outside [{}, {}]", self.t_min, self.t_max)));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// Drift coefficient of the forward SDE.
    pub fn drift(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// Squared diffusion coefficient of the forward SDE.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        self.beta(t)
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
    }

    fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        let la = self.log_alpha(t);
        // σ² = 1 − e^{2 log α}, evaluated without cancellation near t = 0.
        (la.exp(), (-(2.0 * la).exp_m1()).sqrt())
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.alpha_sigma_unchecked(t))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_sigma(t)?.0)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_sigma(t)?.1)
    }

    /// `dα/dt = −½ β(t) α(t)`.
    pub fn alpha_derivative(&self, t: f64) -> f64 {
        -0.5 * self.beta(t) * self.log_alpha(t).exp()
    }

    pub fn lambda(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let la = self.log_alpha(t);
        Ok(la - 0.5 * (-(2.0 * la).exp_m1()).ln())
    }

    /// Inverse of `λ(t)`: `α² = sigmoid(2λ)` gives log α, then the quadratic
    /// in `t` is solved for its positive root.
    pub fn time_of_lambda(&self, lambda: f64) -> f64 {
        // log α = −½ log(1 + e^{−2λ})
        let x = -2.0 * lambda;
        let softplus = if x > 30.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        let log_alpha = -0.5 * softplus;
        let a = 0.25 * (self.beta_max - self.beta_min);
        let b = 0.5 * self.beta_min;
        // a t² + b t + log α = 0, stable root for b > 0.
        let disc = (b * b - 4.0 * a * log_alpha).sqrt();
        (-2.0 * log_alpha) / (b + disc)
    }

    pub fn time_pair(&self, t: f64, t_prev: f64) -> Result<TimePair> {
        self.check_time(t)?;
        self.check_time(t_prev)?;
        contract(t_prev <= t, || format!("t_prev = {t_prev} must not exceed t = {t}"))?;
        Ok(TimePair { t, t_prev })
    }

    /// Grid of `steps + 1` times from `t_max` down to `t_min`, uniform in λ.
    pub fn lambda_grid(&self, steps: usize) -> Result<Vec<f64>> {
        contract(steps >= 1, || "at least one step is required".into())?;
        let l_hi = self.lambda(self.t_min)?;
        let l_lo = self.lambda(self.t_max)?;
        let mut grid: Vec<f64> = (0..=steps).map(|i| self.time_of_lambda(l_lo + (l_hi - l_lo) * i as f64 / steps as f64)).collect();
        grid[0] = self.t_max;
        grid[steps] = self.t_min;
        Ok(grid)
    }
}

/// `α_t x0 + σ_t ε`, elementwise.
pub fn forward_interpolate(sched: &NoiseSchedule, x0: &Matrix, eps: &Matrix, t: f64) -> Result<Matrix> {
    x0.ensure_same_shape(eps, "forward_interpolate")?;
    let (a, s) = sched.alpha_sigma(t)?;
    Ok(x0.axpby(a, eps, s))
}

/// Coefficients `(c_x, c_eps)` of the first-order exponential-integrator step
/// `x_{t_prev} = c_x·x_t + c_eps·ε(x_t, t)`. At `t_prev = t` they are exactly
/// `(1, 0)`.
pub fn solver_coefficients(sched: &NoiseSchedule, t: f64, t_prev: f64) -> Result<(f64, f64)> {
    let (a_t, s_t) = sched.alpha_sigma(t)?;
    let (a_p, s_p) = sched.alpha_sigma(t_prev)?;
    let ratio = a_p / a_t;
    // σ_p (e^h − 1) with h = λ_p − λ_t, i.e. e^h = (α_p/α_t)(σ_t/σ_p).
    Ok((ratio, s_p - s_t * ratio))
}

/// One first-order step of the probability-flow ODE from `t` to `t_prev`,
/// holding the predicted noise constant over the step:
/// `x_{t_prev} = (α_{t_prev}/α_t) x_t − σ_{t_prev}(e^h − 1) ε(x_t, t)`.
pub fn solver_step<F>(sched: &NoiseSchedule, x_t: &Matrix, t: f64, t_prev: f64, eps_fn: F) -> Result<Matrix>
where
    F: FnOnce(&Matrix, f64) -> Result<Matrix>,
{
    sched.time_pair(t, t_prev)?;
    if t_prev == t {
        return Ok(x_t.clone());
    }
    let (cx, ce) = solver_coefficients(sched, t, t_prev)?;
    let eps = eps_fn(x_t, t)?;
    x_t.ensure_same_shape(&eps, "noise prediction")?;
    Ok(x_t.axpby(cx, &eps, ce))
}

/// Integrates from `t_max` to `t_min` with `steps` solver steps on a grid
/// uniform in λ. `steps` equals the number of network evaluations.
pub fn sample_multistep<F>(sched: &NoiseSchedule, mut eps_fn: F, steps: usize, x_t: &Matrix) -> Result<Matrix>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
{
    let grid = sched.lambda_grid(steps)?;
    sample_on_grid(sched, &mut eps_fn, &grid, x_t)
}

/// Same as [`sample_multistep`] on an explicit decreasing time grid.
pub fn sample_on_grid<F>(sched: &NoiseSchedule, eps_fn: &mut F, grid: &[f64], x_start: &Matrix) -> Result<Matrix>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
{
    contract(grid.len() >= 2, || "time grid needs at least two points".into())?;
    let mut x = x_start.clone();
    for w in grid.windows(2) {
        x = solver_step(sched, &x, w[0], w[1], &mut *eps_fn)?;
    }
    Ok(x)
}

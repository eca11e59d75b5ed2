//! Consistency-parameterised generator, EMA teacher and frozen teacher.
//!
//! The generator wraps a noise-prediction network in the one-step
//! exponential-integrator map from `t` to the clean end `t_min`:
//!
//! ```text
//! F(x_t, t) = c_k(t)·x_t + c_o(t)·ε_net(x_t, t)
//! c_k(t) = α_min / α_t,   c_o(t) = σ_min − σ_t·α_min/α_t
//! ```
//!
//! so `F(x, t_min) = x` holds exactly (`c_k = 1`, `c_o = 0` bit for bit), and
//! for `t_min → 0` the coefficients reduce to the x₀-prediction pair
//! `(1/α_t, −σ_t/α_t)`.

use rand::RngCore;

use crate::error::{contract, Result};
use crate::nn::{Binding, Matrix, ParamVector, ScoreNet, Tape, Var};
use crate::oracle::{gaussian, MixtureOracle};
use crate::schedule::{sample_multistep, solver_coefficients, NoiseSchedule};

/// Anything that maps a noised batch at time `t` to a clean estimate.
pub trait ConsistencyFn {
    fn apply(&self, x: &Matrix, t: f64) -> Result<Matrix>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyModel {
    pub net: ScoreNet,
    pub params: ParamVector,
    pub schedule: NoiseSchedule,
}

impl ConsistencyModel {
    pub fn new(net: ScoreNet, params: ParamVector, schedule: NoiseSchedule) -> Result<Self> {
        contract(params.layout() == net.layout(), || "parameters do not fit the network layout".into())?;
        Ok(Self { net, params, schedule })
    }

    /// `(c_k(t), c_o(t))`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        solver_coefficients(&self.schedule, t, self.schedule.t_min)
    }

    pub fn eps(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.schedule.check_time(t)?;
        self.net.eval(&self.params, x, &vec![t; x.rows()])
    }

    /// Per-row times; tape-free.
    pub fn apply_rows(&self, x: &Matrix, times: &[f64]) -> Result<Matrix> {
        let (ck, co) = self.row_coefficients(times)?;
        let eps = self.net.eval(&self.params, x, times)?;
        Ok(x.scale_rows(&ck).add(&eps.scale_rows(&co)))
    }

    fn row_coefficients(&self, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut ck = Vec::with_capacity(times.len());
        let mut co = Vec::with_capacity(times.len());
        for &t in times {
            let (k, o) = self.coefficients(t)?;
            ck.push(k);
            co.push(o);
        }
        Ok((ck, co))
    }

    /// Taped application with parameters already bound on `tape`. `x` enters
    /// as a constant.
    pub fn apply_taped(&self, tape: &mut Tape, bound: &Binding, x: &Matrix, times: &[f64]) -> Result<Var> {
        let (ck, co) = self.row_coefficients(times)?;
        let skip = tape.leaf(x.scale_rows(&ck));
        let trace = self.net.apply(tape, bound, x, times)?;
        let out = tape.scale_rows(trace.output, &co);
        Ok(tape.add(skip, out))
    }

    /// One-step generation from pure noise, `F(x_T, T)`.
    pub fn coarse_generate(&self, x_t: &Matrix) -> Result<Matrix> {
        self.apply(x_t, self.schedule.t_max)
    }
}

impl ConsistencyFn for ConsistencyModel {
    fn apply(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.schedule.check_time(t)?;
        self.apply_rows(x, &vec![t; x.rows()])
    }
}

/// Gradient-free running mean of the student's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTeacher {
    pub params: ParamVector,
    pub decay: f64,
}

impl EmaTeacher {
    pub fn new(params: ParamVector, decay: f64) -> Result<Self> {
        contract((0.0..=1.0).contains(&decay), || format!("EMA decay {decay} outside [0, 1]"))?;
        Ok(Self { params, decay })
    }

    /// `θ⁻ ← decay·θ⁻ + (1 − decay)·θ`.
    pub fn update(&mut self, student: &ParamVector) -> Result<()> {
        self.params.ensure_compatible(student)?;
        let d = self.decay;
        if d == 1.0 {
            return Ok(());
        }
        for (e, s) in self.params.values_mut().iter_mut().zip(student.values()) {
            *e = d * *e + (1.0 - d) * s;
        }
        Ok(())
    }

    pub fn model(&self, like: &ConsistencyModel) -> ConsistencyModel {
        ConsistencyModel { net: like.net.clone(), params: self.params.clone(), schedule: like.schedule }
    }
}

/// Functional form of [`EmaTeacher::update`] with an explicit decay.
pub fn ema_update(mut teacher: EmaTeacher, student: &ParamVector, decay: f64) -> Result<EmaTeacher> {
    contract((0.0..=1.0).contains(&decay), || format!("EMA decay {decay} outside [0, 1]"))?;
    teacher.decay = decay;
    teacher.update(student)?;
    Ok(teacher)
}

/// Pre-trained noise predictor; never modified after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTeacher {
    net: ScoreNet,
    params: ParamVector,
    schedule: NoiseSchedule,
}

impl FrozenTeacher {
    pub fn new(net: ScoreNet, params: ParamVector, schedule: NoiseSchedule) -> Result<Self> {
        contract(params.layout() == net.layout(), || "parameters do not fit the network layout".into())?;
        Ok(Self { net, params, schedule })
    }

    pub fn net(&self) -> &ScoreNet {
        &self.net
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    pub fn eps(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.schedule.check_time(t)?;
        self.net.eval(&self.params, x, &vec![t; x.rows()])
    }

    /// Multistep probability-flow sampling from `x_T`.
    pub fn sample(&self, x_t: &Matrix, steps: usize) -> Result<Matrix> {
        sample_multistep(&self.schedule, |x, t| self.eps(x, t), steps, x_t)
    }

    /// A generator initialised with the teacher's weights.
    pub fn student(&self) -> ConsistencyModel {
        ConsistencyModel { net: self.net.clone(), params: self.params.clone(), schedule: self.schedule }
    }
}

/// The consistency map of a network that predicts noise perfectly: one
/// exponential-integrator step with the analytic `ε*`.
#[derive(Clone, Debug)]
pub struct AnalyticConsistency<'a> {
    pub oracle: &'a MixtureOracle,
    pub schedule: NoiseSchedule,
}

impl ConsistencyFn for AnalyticConsistency<'_> {
    fn apply(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let (ck, co) = solver_coefficients(&self.schedule, t, self.schedule.t_min)?;
        let eps = self.oracle.analytic_eps(&self.schedule, x, t)?;
        Ok(x.axpby(ck, &eps, co))
    }
}

/// The ideal consistency function: high-accuracy integration of the exact
/// probability-flow ODE down to `t_min`.
#[derive(Clone, Debug)]
pub struct OracleConsistency<'a> {
    pub oracle: &'a MixtureOracle,
    pub schedule: NoiseSchedule,
    pub n_substeps: usize,
}

impl ConsistencyFn for OracleConsistency<'_> {
    fn apply(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.oracle.reference_flow(&self.schedule, x, t, self.schedule.t_min, self.n_substeps)
    }
}

/// Evaluation times for `steps`-step consistency sampling: `T` first, then
/// `steps − 1` times spaced evenly from `first` down towards `t_min`.
pub fn few_step_times(sched: &NoiseSchedule, steps: usize, first: f64) -> Result<Vec<f64>> {
    contract(steps >= 1, || "at least one sampling step is required".into())?;
    sched.check_time(first)?;
    let mut times = vec![sched.t_max];
    for k in 1..steps {
        let t = first * (steps - k) as f64 / (steps - 1) as f64;
        times.push(t.max(sched.t_min));
    }
    Ok(times)
}

/// Noise used to re-noise the clean estimate between sampling steps.
pub enum Renoise<'a> {
    /// Reuse the starting noise `x_T` for every step.
    Shared,
    /// Draw fresh standard normal noise for every step.
    Fresh(&'a mut dyn RngCore),
}

/// Multistep consistency sampling: `x0 = F(x_T, T)`, then for every later
/// time `τ` re-noise `x0` to `τ` and map it back. One network evaluation per
/// time.
pub fn sample_consistency<C: ConsistencyFn + ?Sized>(
    model: &C,
    sched: &NoiseSchedule,
    x_t: &Matrix,
    times: &[f64],
    mut renoise: Renoise<'_>,
) -> Result<Matrix> {
    contract(!times.is_empty(), || "sampling needs at least one time".into())?;
    let mut x0 = model.apply(x_t, times[0])?;
    for &t in &times[1..] {
        let (a, s) = sched.alpha_sigma(t)?;
        let xt = match &mut renoise {
            Renoise::Shared => x0.axpby(a, x_t, s),
            Renoise::Fresh(rng) => x0.axpby(a, &gaussian(x_t.rows(), x_t.cols(), rng), s),
        };
        x0 = model.apply(&xt, t)?;
    }
    Ok(x0)
}

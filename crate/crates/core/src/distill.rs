//! Edge-consistency loss, consistency-guided distillation, warm-up,
//! denoising pre-training and the full adversarial training loop.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{critic_gradients, gan_loss_taped, CriticMode, CriticPair, ModalitySplit};
use crate::error::{contract, Error, Result};
use crate::models::{ConsistencyModel, EmaTeacher, FrozenTeacher};
use crate::nn::{AdamW, GradAccumulator, Matrix, ParamVector, ScoreNet, Tape};
use crate::oracle::{gaussian, Dataset};
use crate::schedule::NoiseSchedule;

/// RNG streams derived from one seed, so that the phases never share draws.
pub mod streams {
    pub const PRETRAIN: u64 = 0;
    pub const WARMUP: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const CRITIC_INIT: u64 = 3;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Time used for the refined target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillTime {
    /// The per-sample time drawn for the consistency term.
    Shared,
    /// The top of the edge region, `N·T`.
    EdgeMax,
}

impl fmt::Display for DistillTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillTime::Shared => "shared",
            DistillTime::EdgeMax => "edge_max",
        })
    }
}

impl FromStr for DistillTime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(DistillTime::Shared),
            "edge_max" => Ok(DistillTime::EdgeMax),
            other => Err(Error::Contract(format!("unknown distillation time `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `K`.
    pub iterations: u64,
    /// `N`, the edge region is `[t_min, N·T]`.
    pub edge_bound: f64,
    /// `δ`, consistency intervals are drawn from `(0, δ·T]`.
    pub delta: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weight_decay_g: f64,
    pub weight_decay_d: f64,
    pub n_accum: usize,
    pub w_c: f64,
    pub w_d: f64,
    pub w_gan: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub r1_coef: f64,
    pub critic_mode: CriticMode,
    pub critic_width: usize,
    pub critic_depth: usize,
    pub distill_t: DistillTime,
    pub warmup_iters: u64,
    pub warmup_teacher_steps: usize,
    pub lr_warmup: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            edge_bound: 0.4,
            delta: 0.05,
            lr_g: 1e-4,
            lr_d: 4e-4,
            weight_decay_g: 0.0,
            weight_decay_d: 0.0,
            n_accum: 1,
            w_c: 1.0,
            w_d: 1.0,
            w_gan: 0.1,
            ema_decay: 0.999,
            batch_size: 128,
            r1_coef: 1.0,
            critic_mode: CriticMode::Dual,
            critic_width: 64,
            critic_depth: 2,
            distill_t: DistillTime::Shared,
            warmup_iters: 2000,
            warmup_teacher_steps: 6,
            lr_warmup: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let fin = |v: f64| v.is_finite();
        contract(self.iterations >= 1, || "iterations must be at least 1".into())?;
        contract(fin(self.edge_bound) && self.edge_bound > 0.0 && self.edge_bound <= 1.0, || {
            format!("edge bound {} outside (0, 1]", self.edge_bound)
        })?;
        contract(self.edge_bound * sched.t_max > sched.t_min, || "edge region is empty".into())?;
        contract(fin(self.delta) && self.delta > 0.0 && self.delta <= self.edge_bound, || {
            format!("delta {} outside (0, edge_bound]", self.delta)
        })?;
        for (name, w) in [("w_c", self.w_c), ("w_d", self.w_d), ("w_gan", self.w_gan), ("r1_coef", self.r1_coef)] {
            contract(fin(w) && w >= 0.0, || format!("{name} = {w} must be a nonnegative number"))?;
        }
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lr_warmup", self.lr_warmup),
            ("weight_decay_g", self.weight_decay_g),
            ("weight_decay_d", self.weight_decay_d),
        ] {
            contract(fin(v) && v >= 0.0, || format!("{name} = {v} must be a nonnegative number"))?;
        }
        contract((0.0..=1.0).contains(&self.ema_decay), || format!("ema_decay {} outside [0, 1]", self.ema_decay))?;
        contract(self.n_accum >= 1, || "n_accum must be at least 1".into())?;
        contract(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        contract(self.warmup_teacher_steps >= 1, || "warmup_teacher_steps must be at least 1".into())?;
        contract(self.critic_width >= 1 || self.critic_depth == 0, || "critic_width must be positive".into())
    }

    /// Top of the edge region in absolute time.
    pub fn edge_top(&self, sched: &NoiseSchedule) -> f64 {
        self.edge_bound * sched.t_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_gan_g: f64,
    pub l_gan_d: f64,
}

/// `t ~ U(t_min, N·T)`, `Δt ~ U(0, δ·T]` clipped so that `t − Δt ≥ t_min`.
pub fn sample_edge_times<R: Rng + ?Sized>(cfg: &TrainConfig, sched: &NoiseSchedule, rng: &mut R) -> (f64, f64) {
    let top = cfg.edge_top(sched);
    let t = sched.t_min + (top - sched.t_min) * rng.random::<f64>();
    let dt = cfg.delta * sched.t_max * (1.0 - rng.random::<f64>());
    (t, dt.min(t - sched.t_min))
}

fn check_edge(times: &[f64], top: f64, sched: &NoiseSchedule) -> Result<()> {
    for &t in times {
        contract(t >= sched.t_min && t <= top, || format!("consistency time {t} outside the edge region [{}, {top}]", sched.t_min))?;
    }
    Ok(())
}

/// Both ends of a consistency pair built from one `(x0, ε)` draw.
struct EdgePair {
    x_t: Matrix,
    x_prev: Matrix,
    t_prev: Vec<f64>,
}

fn edge_pair(sched: &NoiseSchedule, x0: &Matrix, eps: &Matrix, t: &[f64], dt: &[f64]) -> Result<EdgePair> {
    x0.ensure_same_shape(eps, "noise")?;
    contract(t.len() == x0.rows() && dt.len() == x0.rows(), || "one (t, Δt) per row is required".into())?;
    let t_prev: Vec<f64> = t.iter().zip(dt).map(|(&t, &d)| t - d).collect();
    let interp = |times: &[f64]| -> Result<Matrix> {
        let (a, s) = alpha_sigma_rows(sched, times)?;
        Ok(x0.scale_rows(&a).add(&eps.scale_rows(&s)))
    };
    Ok(EdgePair { x_t: interp(t)?, x_prev: interp(&t_prev)?, t_prev })
}

/// MSE between the student at `(x_t, t)` and the detached EMA teacher at
/// `(x_{t−Δt}, t−Δt)`, both interpolated from the same `(x0, ε)`. Returns the
/// loss and its gradient with respect to the student parameters.
pub fn edge_consistency_loss(
    student: &ConsistencyModel,
    ema: &ConsistencyModel,
    x0: &Matrix,
    eps: &Matrix,
    t: &[f64],
    dt: &[f64],
    edge_bound: f64,
) -> Result<(f64, ParamVector)> {
    let sched = &student.schedule;
    check_edge(t, edge_bound * sched.t_max, sched)?;
    let pair = edge_pair(sched, x0, eps, t, dt)?;
    let target = ema.apply_rows(&pair.x_prev, &pair.t_prev)?;
    let mut tape = Tape::new();
    let b = student.params.bind(&mut tape);
    let out = student.apply_taped(&mut tape, &b, &pair.x_t, t)?;
    let target = tape.leaf(target);
    let loss = tape.mse(out, target);
    let value = tape.value(loss).get(0, 0);
    let g = tape.backward(loss, Matrix::filled(1, 1, 1.0))?;
    Ok((value, b.gradient(&g)))
}

fn alpha_sigma_rows(sched: &NoiseSchedule, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(times.len());
    let mut s = Vec::with_capacity(times.len());
    for &t in times {
        let (ai, si) = sched.alpha_sigma(t)?;
        a.push(ai);
        s.push(si);
    }
    Ok((a, s))
}

/// Re-noises the coarse estimate with its own noise `x_T` to time `t` (per
/// row) and maps it back with the EMA teacher. The result is a constant.
pub fn refined_target(ema: &ConsistencyModel, x_coarse: &Matrix, x_noise: &Matrix, t: &[f64]) -> Result<Matrix> {
    contract(x_coarse.shape() == x_noise.shape(), || {
        format!("coarse batch {:?} is not paired with noise batch {:?}", x_coarse.shape(), x_noise.shape())
    })?;
    contract(t.len() == x_coarse.rows(), || "one distillation time per row is required".into())?;
    let (a, s) = alpha_sigma_rows(&ema.schedule, t)?;
    let x_t = x_coarse.scale_rows(&a).add(&x_noise.scale_rows(&s));
    ema.apply_rows(&x_t, t)
}

/// MSE of the coarse batch against a detached target, with its gradient
/// with respect to the coarse batch.
pub fn distillation_loss(x_refined: &Matrix, x_coarse: &Matrix) -> Result<(f64, Matrix)> {
    x_coarse.ensure_same_shape(x_refined, "refined target")?;
    let n = x_coarse.data().len() as f64;
    let diff = x_coarse.sub(x_refined);
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Regresses one-step generation onto few-step teacher samples for the same
/// noise. Calls `observer(iteration, loss)` after every step.
pub fn warmup(
    mut student: ConsistencyModel,
    teacher: &FrozenTeacher,
    cfg: &TrainConfig,
    mut observer: impl FnMut(u64, f64),
) -> Result<ConsistencyModel> {
    if cfg.warmup_iters == 0 {
        return Ok(student);
    }
    let mut rng = seeded(cfg.seed, streams::WARMUP);
    let mut opt = AdamW::new(student.params.len(), cfg.lr_warmup, cfg.weight_decay_g);
    let dim = student.net.dim;
    let t_max = student.schedule.t_max;
    for it in 0..cfg.warmup_iters {
        let x_t = gaussian(cfg.batch_size, dim, &mut rng);
        let target = teacher.sample(&x_t, cfg.warmup_teacher_steps)?;
        let mut tape = Tape::new();
        let b = student.params.bind(&mut tape);
        let out = student.apply_taped(&mut tape, &b, &x_t, &vec![t_max; x_t.rows()])?;
        let tv = tape.leaf(target);
        let loss = tape.mse(out, tv);
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::NonFinite { iteration: it, what: "warm-up loss".into() });
        }
        let g = tape.backward(loss, Matrix::filled(1, 1, 1.0))?;
        opt.step(&mut student.params, &b.gradient(&g))?;
        observer(it, value);
    }
    Ok(student)
}

/// Denoising score-matching settings for the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iterations: 20_000, lr: 2e-3, weight_decay: 0.0, batch_size: 256, seed: 0 }
    }
}

/// Trains a noise predictor with `‖ε_net(x_t, t) − ε‖²` over uniform `t`.
/// The learning rate follows a cosine decay to zero.
pub fn pretrain(
    net: &ScoreNet,
    sched: &NoiseSchedule,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    mut observer: impl FnMut(u64, f64),
) -> Result<FrozenTeacher> {
    contract(net.dim == dataset.dim(), || "network and dataset dimensions differ".into())?;
    contract(cfg.batch_size >= 1, || "batch_size must be at least 1".into())?;
    let mut rng = seeded(cfg.seed, streams::PRETRAIN);
    let mut params = net.init(&mut rng);
    let mut opt = AdamW::new(params.len(), cfg.lr, cfg.weight_decay);
    let b = cfg.batch_size;
    for it in 0..cfg.iterations {
        let progress = it as f64 / cfg.iterations as f64;
        opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let x0 = dataset.sample(b, &mut rng);
        let eps = gaussian(b, net.dim, &mut rng);
        let times: Vec<f64> = (0..b).map(|_| sched.t_min + (sched.t_max - sched.t_min) * rng.random::<f64>()).collect();
        let (a, s) = alpha_sigma_rows(sched, &times)?;
        let x_t = x0.scale_rows(&a).add(&eps.scale_rows(&s));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = net.apply(&mut tape, &bound, &x_t, &times)?.output;
        let target = tape.leaf(eps);
        let loss = tape.mse(out, target);
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::NonFinite { iteration: it, what: "pre-training loss".into() });
        }
        let g = tape.backward(loss, Matrix::filled(1, 1, 1.0))?;
        opt.step(&mut params, &bound.gradient(&g))?;
        observer(it, value);
    }
    FrozenTeacher::new(net.clone(), params, *sched)
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ConsistencyModel,
    pub ema: EmaTeacher,
    pub critics: CriticPair,
    pub opt_g: AdamW,
    pub opt_tex: AdamW,
    pub opt_geo: Option<AdamW>,
    pub acc_g: GradAccumulator,
    pub acc_tex: GradAccumulator,
    pub acc_geo: GradAccumulator,
    /// Completed iterations.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state around a (possibly warmed-up) student.
    pub fn new(student: ConsistencyModel, cfg: &TrainConfig, split: &ModalitySplit) -> Result<Self> {
        cfg.validate(&student.schedule)?;
        contract(split.dim() == student.net.dim, || "modality split does not match the model dimension".into())?;
        let critics =
            CriticPair::init(split, cfg.critic_mode, cfg.critic_width, cfg.critic_depth, &mut seeded(cfg.seed, streams::CRITIC_INIT));
        let ema = EmaTeacher::new(student.params.clone(), cfg.ema_decay)?;
        let opt_g = AdamW::new(student.params.len(), cfg.lr_g, cfg.weight_decay_g);
        let opt_tex = AdamW::new(critics.critic_tex.len(), cfg.lr_d, cfg.weight_decay_d);
        let opt_geo = critics.critic_geo.as_ref().map(|g| AdamW::new(g.len(), cfg.lr_d, cfg.weight_decay_d));
        Ok(Self {
            student,
            ema,
            critics,
            opt_g,
            opt_tex,
            opt_geo,
            acc_g: GradAccumulator::new(cfg.n_accum)?,
            acc_tex: GradAccumulator::new(cfg.n_accum)?,
            acc_geo: GradAccumulator::new(cfg.n_accum)?,
            iteration: 0,
            rng: seeded(cfg.seed, streams::TRAIN),
        })
    }

    pub fn ema_model(&self) -> ConsistencyModel {
        self.ema.model(&self.student)
    }
}

/// What one iteration saw, for observers.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub report: LossReport,
    /// Consistency times `t` and their partners `t − Δt`.
    pub times: Vec<f64>,
    pub prev_times: Vec<f64>,
    pub distill_times: Vec<f64>,
    pub noise: Matrix,
    pub coarse: Matrix,
    pub refined: Matrix,
}

/// One iteration: consistency, distillation and adversarial terms for the
/// generator, then a critic update, then the EMA update. On a non-finite
/// loss or gradient nothing but the RNG advances and an error is returned.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, dataset: &Dataset, split: &ModalitySplit) -> Result<StepRecord> {
    let sched = state.student.schedule;
    let bsz = cfg.batch_size;
    let dim = state.student.net.dim;
    let iteration = state.iteration;

    let x0 = dataset.sample(bsz, &mut state.rng);
    let eps = gaussian(bsz, dim, &mut state.rng);
    let x_noise = gaussian(bsz, dim, &mut state.rng);
    let (times, dts): (Vec<f64>, Vec<f64>) = (0..bsz).map(|_| sample_edge_times(cfg, &sched, &mut state.rng)).unzip();
    check_edge(&times, cfg.edge_top(&sched), &sched)?;

    let pair = edge_pair(&sched, &x0, &eps, &times, &dts)?;
    let ema = state.ema_model();
    let consistency_target = ema.apply_rows(&pair.x_prev, &pair.t_prev)?;

    let mut tape = Tape::new();
    let gen = state.student.params.bind(&mut tape);
    let inputs = Matrix::vstack(&[&pair.x_t, &x_noise]);
    let mut all_times = times.clone();
    all_times.extend(std::iter::repeat_n(sched.t_max, bsz));
    let out = state.student.apply_taped(&mut tape, &gen, &inputs, &all_times)?;
    let f_t = tape.slice_rows(out, 0, bsz);
    let coarse = tape.slice_rows(out, bsz, 2 * bsz);
    let coarse_value = tape.value(coarse).clone();

    let distill_times = match cfg.distill_t {
        DistillTime::Shared => times.clone(),
        DistillTime::EdgeMax => vec![cfg.edge_top(&sched); bsz],
    };
    let refined = refined_target(&ema, &coarse_value, &x_noise, &distill_times)?;

    let ct = tape.leaf(consistency_target);
    let l_c = tape.mse(f_t, ct);
    let rt = tape.leaf(refined.clone());
    let l_d = tape.mse(coarse, rt);
    let mut total = tape.scale(l_c, cfg.w_c);
    let wd = tape.scale(l_d, cfg.w_d);
    total = tape.add(total, wd);
    let mut l_gan_g = 0.0;
    if cfg.w_gan > 0.0 {
        let bound_critics = state.critics.bind(&mut tape);
        let real = tape.leaf(x0.clone());
        let l_gan = gan_loss_taped(&mut tape, &state.critics, &bound_critics, coarse, real, split)?;
        l_gan_g = tape.value(l_gan).get(0, 0);
        let wg = tape.scale(l_gan, cfg.w_gan);
        total = tape.add(total, wg);
    }
    let l_c_value = tape.value(l_c).get(0, 0);
    let l_d_value = tape.value(l_d).get(0, 0);
    let grads = tape.backward(total, Matrix::filled(1, 1, 1.0))?;
    let g_student = gen.gradient(&grads);

    let critic_step = if cfg.w_gan > 0.0 { Some(critic_gradients(&state.critics, &coarse_value, &x0, split, cfg.r1_coef)?) } else { None };
    let l_gan_d = critic_step.as_ref().map_or(0.0, |s| s.d_loss);

    let report = LossReport { iteration, l_c: l_c_value, l_d: l_d_value, l_gan_g, l_gan_d };
    let finite = [report.l_c, report.l_d, report.l_gan_g, report.l_gan_d].iter().all(|v| v.is_finite())
        && g_student.is_finite()
        && critic_step.as_ref().is_none_or(|s| s.grads.is_finite() && s.penalty.is_finite());
    if !finite {
        return Err(Error::NonFinite { iteration, what: format!("training losses {report:?}") });
    }

    if let Some(g) = state.acc_g.push(g_student)? {
        state.opt_g.step(&mut state.student.params, &g)?;
        state.ema.update(&state.student.params)?;
    }
    if let Some(step) = critic_step {
        if let Some(g) = state.acc_tex.push(step.grads.critic_tex)? {
            state.opt_tex.step(&mut state.critics.critic_tex, &g)?;
        }
        if let (Some(g), Some(p), Some(opt)) = (step.grads.critic_geo, state.critics.critic_geo.as_mut(), state.opt_geo.as_mut()) {
            if let Some(g) = state.acc_geo.push(g)? {
                opt.step(p, &g)?;
            }
        }
    }
    state.iteration += 1;

    Ok(StepRecord { report, times, prev_times: pair.t_prev, distill_times, noise: x_noise, coarse: coarse_value, refined })
}

/// Runs [`train_step`] until `cfg.iterations` iterations are complete,
/// calling `observer` after each one. Resumes from `state.iteration`.
pub fn train(
    state: &mut TrainState,
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &ModalitySplit,
    mut observer: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate(&state.student.schedule)?;
    while state.iteration < cfg.iterations {
        let rec = train_step(state, cfg, dataset, split)?;
        observer(state, &rec)?;
    }
    Ok(())
}

//! Library-level building blocks behind the subcommands: teacher
//! pre-training, student training with metrics, checkpoint conversion,
//! sampling and evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use edgedistill::adversarial::ModalitySplit;
use edgedistill::distill::{self, seeded, StepRecord, TrainState};
use edgedistill::eval::{endpoint_error_batch, sliced_wasserstein, EndpointReference};
use edgedistill::models::{few_step_times, sample_consistency, ConsistencyModel, FrozenTeacher, Renoise};
use edgedistill::nn::{Matrix, ScoreNet};
use edgedistill::oracle::{gaussian, Dataset};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{AccumState, Checkpoint, CheckpointError, RngState};
use crate::config::{RenoiseMode, RunConfig};
use crate::error::{CliError, CliResult};

/// Streams for evaluation draws, disjoint from the training streams.
pub mod streams {
    pub const EVAL_DATA: u64 = 10;
    pub const EVAL_NOISE: u64 = 11;
    pub const EVAL_RENOISE: u64 = 12;
    pub const SAMPLE_NOISE: u64 = 13;
    pub const SAMPLE_RENOISE: u64 = 14;
}

pub const METRICS_HEADER: &str = "iter,l_c,l_d,l_gan_g,l_gan_d,sw2,endpoint_err";

/// Full-precision float for CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn score_net(cfg: &RunConfig, dim: usize) -> CliResult<ScoreNet> {
    Ok(ScoreNet::new(dim, cfg.model.embed_dim, cfg.model.width, cfg.model.depth)?)
}

pub fn pretrain_teacher(cfg: &RunConfig, observer: impl FnMut(u64, f64)) -> CliResult<FrozenTeacher> {
    let dataset = cfg.dataset.build()?;
    let net = score_net(cfg, dataset.dim())?;
    Ok(distill::pretrain(&net, &cfg.schedule, &dataset, &cfg.pretrain_config(), observer)?)
}

pub fn teacher_checkpoint(teacher: &FrozenTeacher, cfg: &RunConfig) -> Checkpoint {
    let net = teacher.net();
    let mut ck = Checkpoint::new(*teacher.schedule(), net.dim, net.embed_dim, cfg.to_text());
    ck.params.insert("frozen".into(), teacher.params().clone());
    ck
}

pub fn load_teacher(ck: &Checkpoint) -> CliResult<FrozenTeacher> {
    let params = ck.param("frozen")?.clone();
    let net = ScoreNet::from_layout(ck.dim, ck.embed_dim, params.layout().clone()).map_err(malformed)?;
    FrozenTeacher::new(net, params, ck.schedule).map_err(malformed)
}

fn malformed(e: edgedistill::Error) -> CliError {
    CheckpointError::Malformed(e.to_string()).into()
}

fn mismatch(what: &str) -> CliError {
    CheckpointError::Malformed(format!("{what} does not match the configuration")).into()
}

/// Initialises the student from the teacher, runs the warm-up and builds a
/// fresh training state.
pub fn start_training(teacher: &FrozenTeacher, cfg: &RunConfig, warmup_observer: impl FnMut(u64, f64)) -> CliResult<TrainState> {
    let tc = cfg.train_config();
    let dataset = cfg.dataset.build()?;
    let split = ModalitySplit::for_dataset(&dataset);
    let student = distill::warmup(teacher.student(), teacher, &tc, warmup_observer)?;
    Ok(TrainState::new(student, &tc, &split)?)
}

pub fn state_checkpoint(state: &TrainState, teacher: &FrozenTeacher, cfg: &RunConfig) -> Checkpoint {
    let mut ck = teacher_checkpoint(teacher, cfg);
    ck.iteration = state.iteration;
    ck.rng = Some(RngState::capture(&state.rng));
    ck.params.insert("student".into(), state.student.params.clone());
    ck.params.insert("ema".into(), state.ema.params.clone());
    ck.params.insert("critic_tex".into(), state.critics.critic_tex.clone());
    ck.optimizers.insert("opt_g".into(), state.opt_g.clone());
    ck.optimizers.insert("opt_tex".into(), state.opt_tex.clone());
    if let (Some(geo), Some(opt)) = (&state.critics.critic_geo, &state.opt_geo) {
        ck.params.insert("critic_geo".into(), geo.clone());
        ck.optimizers.insert("opt_geo".into(), opt.clone());
    }
    for (name, acc) in [("acc_g", &state.acc_g), ("acc_tex", &state.acc_tex), ("acc_geo", &state.acc_geo)] {
        ck.accumulators.insert(name.into(), AccumState { count: acc.pending(), buffer: acc.buffer().cloned() });
    }
    ck
}

pub fn is_training_checkpoint(ck: &Checkpoint) -> bool {
    ck.params.contains_key("student")
}

/// Rebuilds a training state saved by [`state_checkpoint`]. Learning rates
/// and weight decay come from `cfg`; everything else from the checkpoint.
pub fn restore_state(ck: &Checkpoint, cfg: &RunConfig) -> CliResult<(FrozenTeacher, TrainState)> {
    let teacher = load_teacher(ck)?;
    let tc = cfg.train_config();
    let dataset = cfg.dataset.build()?;
    if dataset.dim() != ck.dim {
        return Err(mismatch("data dimension"));
    }
    let split = ModalitySplit::for_dataset(&dataset);
    let student_params = ck.param("student")?.clone();
    let student = ConsistencyModel::new(teacher.net().clone(), student_params, ck.schedule).map_err(|_| mismatch("student layout"))?;
    let mut state = TrainState::new(student, &tc, &split)?;

    let ema = ck.param("ema")?;
    state.student.params.ensure_compatible(ema).map_err(|_| mismatch("EMA layout"))?;
    state.ema.params = ema.clone();
    let tex = ck.param("critic_tex")?;
    state.critics.critic_tex.ensure_compatible(tex).map_err(|_| mismatch("critic layout"))?;
    state.critics.critic_tex = tex.clone();
    state.opt_g = restore_optimizer(ck, "opt_g", state.student.params.len(), tc.lr_g, tc.weight_decay_g)?;
    state.opt_tex = restore_optimizer(ck, "opt_tex", tex.len(), tc.lr_d, tc.weight_decay_d)?;
    match (&mut state.critics.critic_geo, ck.params.get("critic_geo")) {
        (None, None) => {}
        (Some(fresh), Some(saved)) => {
            fresh.ensure_compatible(saved).map_err(|_| mismatch("geometry critic layout"))?;
            *fresh = saved.clone();
            state.opt_geo = Some(restore_optimizer(ck, "opt_geo", saved.len(), tc.lr_d, tc.weight_decay_d)?);
        }
        _ => return Err(mismatch("critic mode")),
    }
    for (name, acc) in [("acc_g", &mut state.acc_g), ("acc_tex", &mut state.acc_tex), ("acc_geo", &mut state.acc_geo)] {
        let saved = ck.accumulator(name)?;
        if saved.count >= tc.n_accum {
            return Err(mismatch("accumulation window"));
        }
        acc.restore(saved.count, saved.buffer.clone());
    }
    state.iteration = ck.iteration;
    state.rng = ck.rng.ok_or_else(|| CheckpointError::Missing("rng".into()))?.restore();
    Ok((teacher, state))
}

fn restore_optimizer(ck: &Checkpoint, name: &str, len: usize, lr: f64, wd: f64) -> CliResult<edgedistill::nn::AdamW> {
    let mut opt = ck.optimizer(name)?.clone();
    if opt.first_moment().len() != len {
        return Err(mismatch(name));
    }
    opt.lr = lr;
    opt.weight_decay = wd;
    Ok(opt)
}

/// Few-step samples from a consistency model with the configured times and
/// re-noising.
pub fn sample_student(model: &ConsistencyModel, cfg: &RunConfig, noise: &Matrix, steps: usize, rng: &mut ChaCha8Rng) -> CliResult<Matrix> {
    let times = few_step_times(&model.schedule, steps, cfg.eval.sample_time)?;
    let renoise = match cfg.eval.renoise {
        RenoiseMode::Fresh => Renoise::Fresh(rng),
        RenoiseMode::Shared => Renoise::Shared,
    };
    Ok(sample_consistency(model, &model.schedule, noise, &times, renoise)?)
}

/// Quality of a trained student.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Sliced Wasserstein distance of `eval.steps`-step samples to data.
    pub sw2: f64,
    /// Mean one-step endpoint error.
    pub endpoint_err: f64,
}

pub fn reference_data(dataset: &Dataset, cfg: &RunConfig) -> Matrix {
    dataset.sample(cfg.eval.n_samples, &mut seeded(cfg.seed, streams::EVAL_DATA))
}

pub fn eval_noise(dataset: &Dataset, cfg: &RunConfig) -> Matrix {
    gaussian(cfg.eval.n_samples, dataset.dim(), &mut seeded(cfg.seed, streams::EVAL_NOISE))
}

pub fn endpoint_reference<'a>(dataset: &'a Dataset, cfg: &RunConfig) -> EndpointReference<'a> {
    match dataset {
        Dataset::Mixture(o) => EndpointReference::Mixture { oracle: o, n_substeps: cfg.eval.n_substeps },
        Dataset::Manifold(m) => EndpointReference::Manifold(m),
    }
}

pub fn endpoint_error(model: &ConsistencyModel, dataset: &Dataset, cfg: &RunConfig) -> CliResult<f64> {
    let reference = endpoint_reference(dataset, cfg);
    Ok(endpoint_error_batch(model, reference, &model.schedule, dataset.dim(), cfg.eval.n_noise, cfg.seed)?.mean)
}

pub fn evaluate(model: &ConsistencyModel, dataset: &Dataset, cfg: &RunConfig) -> CliResult<Metrics> {
    let data = reference_data(dataset, cfg);
    let samples = sample_student(model, cfg, &eval_noise(dataset, cfg), cfg.eval.steps, &mut seeded(cfg.seed, streams::EVAL_RENOISE))?;
    let sw2 = sliced_wasserstein(&samples, &data, cfg.eval.n_proj, cfg.seed)?;
    Ok(Metrics { sw2, endpoint_err: endpoint_error(model, dataset, cfg)? })
}

/// Sliced Wasserstein distance of `steps`-step teacher samples to data.
pub fn teacher_sw(teacher: &FrozenTeacher, dataset: &Dataset, cfg: &RunConfig, steps: usize) -> CliResult<f64> {
    let data = reference_data(dataset, cfg);
    let samples = teacher.sample(&eval_noise(dataset, cfg), steps)?;
    Ok(sliced_wasserstein(&samples, &data, cfg.eval.n_proj, cfg.seed)?)
}

/// One row of `metrics.csv`.
pub fn metrics_row(rec: &StepRecord, metrics: Option<Metrics>) -> String {
    let r = &rec.report;
    let (sw2, ep) = match metrics {
        Some(m) => (fmt_f64(m.sw2), fmt_f64(m.endpoint_err)),
        None => (String::new(), String::new()),
    };
    format!("{},{},{},{},{},{},{}", r.iteration, fmt_f64(r.l_c), fmt_f64(r.l_d), fmt_f64(r.l_gan_g), fmt_f64(r.l_gan_d), sw2, ep)
}

/// What a training run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Metrics at the final iteration.
    pub metrics: Metrics,
}

/// Trains to `cfg.train.iterations`, evaluating every `eval.every`
/// iterations and at the end. With `out` set, writes `metrics.csv` and
/// `train.ckpt` there; a resumed run keeps the rows before its iteration.
pub fn run_training(
    mut state: TrainState,
    teacher: &FrozenTeacher,
    cfg: &RunConfig,
    out: Option<&Path>,
    mut on_step: impl FnMut(&TrainState, &StepRecord),
) -> CliResult<TrainOutcome> {
    let tc = cfg.train_config();
    let dataset = cfg.dataset.build()?;
    let split = ModalitySplit::for_dataset(&dataset);
    let mut csv = match out {
        Some(dir) => Some(open_metrics(dir, state.iteration)?),
        None => None,
    };
    let ckpt_path = out.map(|d| d.join("train.ckpt"));
    let mut last = None;
    let total = tc.iterations;
    let mut side_error: Option<CliError> = None;
    let result = distill::train(&mut state, &tc, &dataset, &split, |st, rec| {
        on_step(st, rec);
        let mut observe = || -> CliResult<()> {
            let done = st.iteration;
            let due = done == total || (cfg.eval.every > 0 && done % cfg.eval.every == 0);
            let metrics = if due { Some(evaluate(&st.ema_model(), &dataset, cfg)?) } else { None };
            if done == total {
                last = metrics;
            }
            if let Some((w, path)) = &mut csv {
                writeln!(w, "{}", metrics_row(rec, metrics)).map_err(|e| CliError::io(path, e))?;
            }
            if let Some(path) = &ckpt_path {
                if cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 && done != total {
                    if let Some((w, p)) = &mut csv {
                        w.flush().map_err(|e| CliError::io(p, e))?;
                    }
                    state_checkpoint(st, teacher, cfg).save(path)?;
                }
            }
            Ok(())
        };
        observe().map_err(|e| {
            let msg = e.to_string();
            side_error = Some(e);
            edgedistill::Error::Contract(msg)
        })
    });
    if let Some((w, path)) = &mut csv {
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    if let Some(e) = side_error {
        return Err(e);
    }
    result?;
    if let Some(path) = &ckpt_path {
        state_checkpoint(&state, teacher, cfg).save(path)?;
    }
    let metrics = match last {
        Some(m) => m,
        None => evaluate(&state.ema_model(), &dataset, cfg)?,
    };
    Ok(TrainOutcome { state, metrics })
}

/// Opens `metrics.csv` for appending after dropping rows at or beyond
/// `resume_at`, writing the header if the file is new.
fn open_metrics(dir: &Path, resume_at: u64) -> CliResult<(BufWriter<fs::File>, PathBuf)> {
    let path = dir.join("metrics.csv");
    let mut kept = format!("{METRICS_HEADER}\n");
    if resume_at > 0 {
        if let Ok(text) = fs::read_to_string(&path) {
            for line in text.lines().skip(1) {
                let iter = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if iter.is_some_and(|i| i < resume_at) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(&path, kept).map_err(|e| CliError::io(&path, e))?;
    let f = fs::OpenOptions::new().append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
    Ok((BufWriter::new(f), path))
}

/// Fresh or resumed training from a checkpoint: a teacher checkpoint starts
/// a new run, a training checkpoint resumes it.
pub fn train_from_checkpoint(
    ck: &Checkpoint,
    cfg: &RunConfig,
    out: Option<&Path>,
    on_step: impl FnMut(&TrainState, &StepRecord),
) -> CliResult<TrainOutcome> {
    let (teacher, state) = if is_training_checkpoint(ck) {
        restore_state(ck, cfg)?
    } else {
        let teacher = load_teacher(ck)?;
        let state = start_training(&teacher, cfg, |_, _| {})?;
        (teacher, state)
    };
    if teacher.schedule() != &cfg.schedule {
        return Err(mismatch("noise schedule"));
    }
    run_training(state, &teacher, cfg, out, on_step)
}

/// Maximum number of concurrent runs: `ACC3DLAB_THREADS` if set, else the
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("ACC3DLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Applies `f` to every item on up to `threads` threads; results keep the
/// input order.
pub fn parallel_map<T: Send, R: Send>(items: Vec<T>, threads: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = items.len();
    let queue = Mutex::new(items.into_iter().enumerate());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every item processed")).collect()
}

/// One training run of an edge-region sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionRun {
    pub region: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Median over seeds for one region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionSummary {
    pub region: f64,
    pub n_seeds: usize,
    pub endpoint_err: f64,
    pub sw2: f64,
}

pub fn region_dir_name(region: f64, seed: u64) -> String {
    format!("edge_{region}_seed_{seed}")
}

/// Trains one run per `(region, seed)` from the same teacher, with the
/// consistency region `[t_min, N·T]` set to each region value.
pub fn sweep_edge(
    teacher: &FrozenTeacher,
    cfg: &RunConfig,
    out: Option<&Path>,
    threads: usize,
) -> CliResult<(Vec<RegionRun>, Vec<RegionSummary>)> {
    let mut regions = cfg.sweep.regions.clone();
    regions.sort_by(f64::total_cmp);
    regions.dedup();
    let jobs: Vec<(f64, u64)> = regions.iter().flat_map(|&r| cfg.sweep.seeds.iter().map(move |&s| (r, s))).collect();
    let results = parallel_map(jobs, threads, |(region, seed)| -> CliResult<RegionRun> {
        let mut run_cfg = cfg.clone();
        run_cfg.train.edge_bound = region;
        run_cfg.seed = seed;
        run_cfg.validate()?;
        let dir = match out {
            Some(o) => {
                let d = o.join(region_dir_name(region, seed));
                fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
                write_config_echo(&d, &run_cfg)?;
                Some(d)
            }
            None => None,
        };
        let state = start_training(teacher, &run_cfg, |_, _| {})?;
        let outcome = run_training(state, teacher, &run_cfg, dir.as_deref(), |_, _| {})?;
        Ok(RegionRun { region, seed, metrics: outcome.metrics })
    });
    let runs = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let summaries = regions
        .iter()
        .map(|&region| {
            let mine: Vec<&RegionRun> = runs.iter().filter(|r| r.region == region).collect();
            let ep: Vec<f64> = mine.iter().map(|r| r.metrics.endpoint_err).collect();
            let sw: Vec<f64> = mine.iter().map(|r| r.metrics.sw2).collect();
            RegionSummary { region, n_seeds: mine.len(), endpoint_err: edgedistill::eval::median(&ep), sw2: edgedistill::eval::median(&sw) }
        })
        .collect();
    Ok((runs, summaries))
}

pub const CONFIG_ECHO: &str = "config.resolved";

pub fn write_config_echo(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, cfg.to_text()).map_err(|e| CliError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let out = parallel_map((0..20).collect(), 3, |x: i32| x * x);
        assert_eq!(out, (0..20).map(|x| x * x).collect::<Vec<_>>());
        assert!(parallel_map(Vec::<i32>::new(), 4, |x| x).is_empty());
    }

    #[test]
    fn floats_are_written_in_full() {
        let v = 0.1 + 0.2;
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }
}

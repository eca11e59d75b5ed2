//! Command-line surface and subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use edgedistill::distill::seeded;
use edgedistill::eval::{consistency_error_sweep, estimate_tstar, ErrorStats, SweepConfig, TStarConfig, TStarEstimate};
use edgedistill::models::{ConsistencyModel, FrozenTeacher};
use edgedistill::nn::Matrix;
use edgedistill::oracle::{gaussian, Dataset};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SampleModel};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, fmt_f64, streams};
use crate::plot::{self, Series};

#[derive(Parser, Debug)]
#[command(name = "edgedistill", version, about = "Edge-consistency distillation experiments on toy distributions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file; defaults apply to everything it does not set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `run.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run seed, overriding `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config value; `key` is `section.key` or an unambiguous key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the teacher noise predictor by denoising score matching.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a few-step student from a teacher, or resume a training checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint, or a training checkpoint to resume.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Draw samples from the student or the teacher.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Teacher or training checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Sampling steps; defaults to `eval.steps`, or `eval.teacher_steps` for the teacher.
        #[arg(long)]
        steps: Option<usize>,
        /// Number of samples; defaults to `eval.n_samples`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Sliced Wasserstein distance and endpoint error of student and teacher.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Training checkpoint; a teacher checkpoint evaluates the teacher alone.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train one run per consistency region and compare them.
    SweepEdge {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Accumulated consistency error along exact trajectories.
    BoundCheck {
        #[command(flatten)]
        common: Common,
        /// Training checkpoint; a teacher checkpoint uses the untrained student.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Estimate the edge boundary from a trained student.
    Tstar {
        #[command(flatten)]
        common: Common,
        /// Training checkpoint; a teacher checkpoint uses the untrained student.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Plot a CSV: the first column is x, every other column a series.
    Plot {
        #[command(flatten)]
        common: Common,
        /// CSV file to plot.
        input: PathBuf,
    },
}

/// Loads the config file, applies overrides and flags, validates, creates
/// the output directory and writes the resolved config into it.
pub fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    pipeline::write_config_echo(&cfg.out, &cfg)?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&resolve_config(&common)?).map(|_| ()),
        Command::Train { common, ckpt } => cmd_train(&resolve_config(&common)?, &ckpt).map(|_| ()),
        Command::Sample { common, ckpt, steps, n } => cmd_sample(&resolve_config(&common)?, &ckpt, steps, n).map(|_| ()),
        Command::Eval { common, ckpt } => cmd_eval(&resolve_config(&common)?, &ckpt).map(|_| ()),
        Command::SweepEdge { common, ckpt } => cmd_sweep_edge(&resolve_config(&common)?, &ckpt).map(|_| ()),
        Command::BoundCheck { common, ckpt } => cmd_bound_check(&resolve_config(&common)?, &ckpt).map(|_| ()),
        Command::Tstar { common, ckpt } => cmd_tstar(&resolve_config(&common)?, &ckpt).map(|_| ()),
        Command::Plot { common, input } => cmd_plot(&resolve_config(&common)?, &input).map(|_| ()),
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn cmd_pretrain(cfg: &RunConfig) -> CliResult<PathBuf> {
    let mut log = String::from("iter,loss\n");
    let teacher = pipeline::pretrain_teacher(cfg, |it, loss| {
        let _ = writeln!(log, "{it},{}", fmt_f64(loss));
    })?;
    write(&cfg.out.join("pretrain.csv"), &log)?;
    let path = cfg.out.join("teacher.ckpt");
    pipeline::teacher_checkpoint(&teacher, cfg).save(&path)?;
    let dataset = cfg.dataset.build()?;
    let sw = pipeline::teacher_sw(&teacher, &dataset, cfg, cfg.eval.teacher_steps)?;
    println!("teacher written to {} ({}-step sliced W {sw:.4})", path.display(), cfg.eval.teacher_steps);
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig, ckpt: &Path) -> CliResult<pipeline::TrainOutcome> {
    let ck = Checkpoint::load(ckpt)?;
    let outcome = pipeline::train_from_checkpoint(&ck, cfg, Some(&cfg.out), |_, _| {})?;
    println!(
        "trained to iteration {}: sw2 {:.4}, endpoint error {:.4}; checkpoint {}",
        outcome.state.iteration,
        outcome.metrics.sw2,
        outcome.metrics.endpoint_err,
        cfg.out.join("train.ckpt").display()
    );
    Ok(outcome)
}

/// The student (EMA weights) of a training checkpoint, if it has one.
pub fn checkpoint_student(ck: &Checkpoint, teacher: &FrozenTeacher) -> CliResult<Option<ConsistencyModel>> {
    match ck.params.get("ema") {
        None => Ok(None),
        Some(ema) => Ok(Some(
            ConsistencyModel::new(teacher.net().clone(), ema.clone(), ck.schedule)
                .map_err(|e| crate::checkpoint::CheckpointError::Malformed(e.to_string()))?,
        )),
    }
}

/// Samples from the selected model; returns the sample matrix and the
/// number of network evaluations per sample.
pub fn cmd_sample(cfg: &RunConfig, ckpt: &Path, steps: Option<usize>, n: Option<usize>) -> CliResult<(Matrix, usize)> {
    let ck = Checkpoint::load(ckpt)?;
    let teacher = pipeline::load_teacher(&ck)?;
    let student = checkpoint_student(&ck, &teacher)?;
    let use_student = match cfg.sample_model {
        SampleModel::Auto => student.is_some(),
        SampleModel::Student => true,
        SampleModel::Teacher => false,
    };
    let n = n.unwrap_or(cfg.eval.n_samples);
    let noise = gaussian(n, ck.dim, &mut seeded(cfg.seed, streams::SAMPLE_NOISE));
    let (name, steps, samples) = if use_student {
        let model = student.unwrap_or_else(|| teacher.student());
        let steps = steps.unwrap_or(cfg.eval.steps);
        let x = pipeline::sample_student(&model, cfg, &noise, steps, &mut seeded(cfg.seed, streams::SAMPLE_RENOISE))?;
        ("student", steps, x)
    } else {
        let steps = steps.unwrap_or(cfg.eval.teacher_steps);
        ("teacher", steps, teacher.sample(&noise, steps)?)
    };
    if steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let mut text = format!("# model={name} steps={steps} nfe={steps}\n");
    let cols: Vec<String> = (0..samples.cols()).map(|j| format!("x{j}")).collect();
    text.push_str(&cols.join(","));
    text.push('\n');
    for i in 0..samples.rows() {
        let row: Vec<String> = samples.row(i).iter().map(|v| fmt_f64(*v)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write(&cfg.out.join("samples.csv"), &text)?;
    println!("{n} samples from the {name} ({steps} network evaluations each)");
    Ok((samples, steps))
}

pub const EVAL_HEADER: &str = "model,steps,nfe,sw2,endpoint_err";

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path) -> CliResult<String> {
    let ck = Checkpoint::load(ckpt)?;
    let teacher = pipeline::load_teacher(&ck)?;
    let dataset = cfg.dataset.build()?;
    let data = pipeline::reference_data(&dataset, cfg);
    let noise = pipeline::eval_noise(&dataset, cfg);
    let reference = pipeline::endpoint_reference(&dataset, cfg);
    let n_ep = cfg.eval.n_noise.min(noise.rows());
    let head = noise.slice_rows(0, n_ep);
    let score = |samples: &Matrix| -> CliResult<(f64, f64)> {
        let sw = edgedistill::eval::sliced_wasserstein(samples, &data, cfg.eval.n_proj, cfg.seed)?;
        let errs = reference.errors(&teacher.schedule().clone(), &head, &samples.slice_rows(0, n_ep))?;
        Ok((sw, ErrorStats::from_values(&errs)?.mean))
    };
    let mut text = format!("{EVAL_HEADER}\n");
    if let Some(student) = checkpoint_student(&ck, &teacher)? {
        let mut steps = vec![1, cfg.eval.steps];
        steps.dedup();
        for s in steps {
            let x = pipeline::sample_student(&student, cfg, &noise, s, &mut seeded(cfg.seed, streams::EVAL_RENOISE))?;
            let (sw, ep) = score(&x)?;
            let _ = writeln!(text, "student,{s},{s},{},{}", fmt_f64(sw), fmt_f64(ep));
        }
    }
    let x = teacher.sample(&noise, cfg.eval.teacher_steps)?;
    let (sw, ep) = score(&x)?;
    let s = cfg.eval.teacher_steps;
    let _ = writeln!(text, "teacher,{s},{s},{},{}", fmt_f64(sw), fmt_f64(ep));
    write(&cfg.out.join("eval.csv"), &text)?;
    print!("{text}");
    Ok(text)
}

pub const SWEEP_HEADER: &str = "region,n_seeds,endpoint_err,sw2";
pub const SWEEP_RUNS_HEADER: &str = "region,seed,endpoint_err,sw2";

pub fn cmd_sweep_edge(cfg: &RunConfig, ckpt: &Path) -> CliResult<Vec<pipeline::RegionSummary>> {
    let ck = Checkpoint::load(ckpt)?;
    let teacher = pipeline::load_teacher(&ck)?;
    let (runs, summary) = pipeline::sweep_edge(&teacher, cfg, Some(&cfg.out), pipeline::thread_cap())?;
    let mut text = format!("{SWEEP_RUNS_HEADER}\n");
    for r in &runs {
        let _ = writeln!(text, "{},{},{},{}", r.region, r.seed, fmt_f64(r.metrics.endpoint_err), fmt_f64(r.metrics.sw2));
    }
    write(&cfg.out.join("sweep_edge_runs.csv"), &text)?;
    let mut text = format!("{SWEEP_HEADER}\n");
    for s in &summary {
        let _ = writeln!(text, "{},{},{},{}", s.region, s.n_seeds, fmt_f64(s.endpoint_err), fmt_f64(s.sw2));
    }
    write(&cfg.out.join("sweep_edge.csv"), &text)?;
    print!("{text}");
    Ok(summary)
}

/// The model a report is computed for: the student of a training
/// checkpoint, else the consistency model initialised from the teacher.
fn report_model(ck: &Checkpoint) -> CliResult<(FrozenTeacher, ConsistencyModel)> {
    let teacher = pipeline::load_teacher(ck)?;
    let model = checkpoint_student(ck, &teacher)?.unwrap_or_else(|| teacher.student());
    Ok((teacher, model))
}

fn mixture_oracle(cfg: &RunConfig) -> CliResult<edgedistill::oracle::MixtureOracle> {
    match cfg.dataset.build()? {
        Dataset::Mixture(o) => Ok(o),
        Dataset::Manifold(_) => Err(CliError::Usage("this report needs exact trajectories and only supports dataset.kind = ring".into())),
    }
}

pub fn bound_config(cfg: &RunConfig) -> SweepConfig {
    SweepConfig { n_substeps: cfg.eval.n_substeps, seed: cfg.seed, ..cfg.bound.clone() }
}

pub const BOUND_HEADER: &str = "n,t,dt,mean_u,endpoint_err,linear_bound";
pub const TAYLOR_HEADER: &str = "dt,taylor";
pub const HIST_HEADER: &str = "lo,hi,count";
pub const BOUND_SUMMARY_HEADER: &str = "er_slope,spearman,p_hat";

pub fn cmd_bound_check(cfg: &RunConfig, ckpt: &Path) -> CliResult<edgedistill::eval::BoundSweepReport> {
    let ck = Checkpoint::load(ckpt)?;
    let (_, model) = report_model(&ck)?;
    let oracle = mixture_oracle(cfg)?;
    let report = consistency_error_sweep(&model, &oracle, &model.schedule, &bound_config(cfg))?;
    let t_min = model.schedule.t_min;

    let mut text = format!("{BOUND_HEADER}\n");
    for r in &report.rows {
        let bound = report.slope * (r.t - t_min);
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            r.n_intervals,
            fmt_f64(r.t),
            fmt_f64(r.dt),
            fmt_f64(r.mean_u),
            fmt_f64(r.endpoint_err),
            fmt_f64(bound)
        );
    }
    write(&cfg.out.join("bound_sweep.csv"), &text)?;
    let mut text = format!("{TAYLOR_HEADER}\n");
    for r in &report.taylor_rows {
        let _ = writeln!(text, "{},{}", fmt_f64(r.dt), fmt_f64(r.taylor));
    }
    write(&cfg.out.join("bound_taylor.csv"), &text)?;
    let mut text = format!("{HIST_HEADER}\n");
    let h = &report.u_histogram;
    for (k, c) in h.counts.iter().enumerate() {
        let _ = writeln!(text, "{},{},{c}", fmt_f64(h.edges[k]), fmt_f64(h.edges[k + 1]));
    }
    write(&cfg.out.join("bound_hist.csv"), &text)?;
    let summary = format!("{BOUND_SUMMARY_HEADER}\n{},{},{}\n", fmt_f64(report.slope), fmt_f64(report.spearman), fmt_f64(report.p_hat));
    write(&cfg.out.join("bound_summary.csv"), &summary)?;

    let measured = Series { name: "E_n".into(), points: report.rows.iter().map(|r| (r.n_intervals as f64, r.endpoint_err)).collect() };
    let linear = Series {
        name: "n·E_r".into(),
        points: report.rows.iter().map(|r| (r.n_intervals as f64, report.slope * (r.t - t_min))).collect(),
    };
    write(&cfg.out.join("bound.svg"), &plot::line_plot("Accumulated consistency error", "intervals n", "error", &[measured, linear]))?;
    let taylor = Series { name: "log taylor".into(), points: report.taylor_rows.iter().map(|r| (r.dt.ln(), r.taylor.ln())).collect() };
    write(&cfg.out.join("taylor.svg"), &plot::line_plot("Taylor term against step size", "log dt", "log error", &[taylor]))?;
    print!("{summary}");
    Ok(report)
}

pub const TSTAR_HEADER: &str = "condition,l_hat,er_hat,t_star,residual,gridsearch_best_n";
pub const GRID_HEADER: &str = "n,endpoint_err";

pub fn cmd_tstar(cfg: &RunConfig, ckpt: &Path) -> CliResult<TStarEstimate> {
    let ck = Checkpoint::load(ckpt)?;
    let (teacher, model) = report_model(&ck)?;
    let oracle = mixture_oracle(cfg)?;
    let tcfg = TStarConfig {
        condition: cfg.tstar.condition,
        n_probe_pairs: cfg.tstar.probe_pairs,
        n_noise: cfg.eval.n_noise,
        sweep: bound_config(cfg),
        seed: cfg.seed,
    };
    let dataset = cfg.dataset.build()?;
    let mut grid_score = |n: f64| -> edgedistill::Result<f64> {
        let mut run = cfg.clone();
        run.train.edge_bound = n;
        run.train.iterations = cfg.tstar.grid_iterations;
        let outcome = pipeline::start_training(&teacher, &run, |_, _| {})
            .and_then(|state| pipeline::run_training(state, &teacher, &run, None, |_, _| {}))
            .map_err(|e| edgedistill::Error::Contract(e.to_string()))?;
        pipeline::endpoint_error(&outcome.state.ema_model(), &dataset, &run).map_err(|e| edgedistill::Error::Contract(e.to_string()))
    };
    let grid: Option<&mut dyn FnMut(f64) -> edgedistill::Result<f64>> = if cfg.tstar.grid { Some(&mut grid_score) } else { None };
    let est = estimate_tstar(&model, &oracle, &model.schedule, &tcfg, grid)?;
    let cond = match cfg.tstar.condition {
        edgedistill::eval::TStarCondition::Literal => "literal",
        edgedistill::eval::TStarCondition::Stationary => "stationary",
    };
    let text = format!(
        "{TSTAR_HEADER}\n{cond},{},{},{},{},{}\n",
        fmt_f64(est.l_hat),
        fmt_f64(est.er_hat),
        opt(est.t_star),
        opt(est.residual),
        est.gridsearch_best_n.map(|n| n.to_string()).unwrap_or_default()
    );
    write(&cfg.out.join("tstar.csv"), &text)?;
    if !est.grid.is_empty() {
        let mut g = format!("{GRID_HEADER}\n");
        for (n, s) in &est.grid {
            let _ = writeln!(g, "{n},{}", fmt_f64(*s));
        }
        write(&cfg.out.join("tstar_grid.csv"), &g)?;
        let series = Series { name: "endpoint error".into(), points: est.grid.clone() };
        write(&cfg.out.join("tstar_grid.svg"), &plot::line_plot("Consistency region search", "N", "endpoint error", &[series]))?;
    }
    print!("{text}");
    Ok(est)
}

pub fn cmd_plot(cfg: &RunConfig, input: &Path) -> CliResult<PathBuf> {
    let text = fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
    let (x_label, series) = plot::series_from_csv(&text).map_err(|m| CliError::Usage(format!("{}: {m}", input.display())))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let path = cfg.out.join(format!("{stem}.svg"));
    write(&path, &plot::line_plot(stem, &x_label, "value", &series))?;
    println!("wrote {}", path.display());
    Ok(path)
}

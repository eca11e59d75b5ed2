//! Run configuration: a line-oriented `key = value` format with `[section]`
//! headers and `#` comments.
//!
//! Every key has a default, so a config file only lists what it changes.
//! Unknown sections and keys are rejected with their line number. The
//! rendered form ([`RunConfig::to_text`]) lists every key and parses back to
//! an identical value.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use edgedistill::adversarial::CriticMode;
use edgedistill::distill::{DistillTime, PretrainConfig, TrainConfig};
use edgedistill::eval::{SweepConfig, TStarCondition};
use edgedistill::oracle::{Dataset, ManifoldDataset, ManifoldKind, MixtureOracle};
use edgedistill::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn new(message: impl Into<String>) -> Self {
        Self { line: None, key: None, message: message.into() }
    }

    fn at(line: usize, key: Option<&str>, message: impl Into<String>) -> Self {
        Self { line: Some(line), key: key.map(str::to_owned), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "key `{k}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Ring,
    Circle,
    TwoMoons,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenoiseMode {
    Fresh,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleModel {
    /// Student if the checkpoint has one, otherwise the teacher.
    Auto,
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Mixture components on the ring.
    pub modes: usize,
    pub radius: f64,
    /// Per-coordinate standard deviation of each ring component.
    pub std: f64,
    pub normal_weight: f64,
}

impl DatasetConfig {
    pub fn build(&self) -> edgedistill::Result<Dataset> {
        Ok(match self.kind {
            DatasetKind::Ring => Dataset::Mixture(MixtureOracle::ring(self.modes, self.radius, self.std)?),
            DatasetKind::Circle => {
                Dataset::Manifold(ManifoldDataset { kind: ManifoldKind::Circle { radius: self.radius }, normal_weight: self.normal_weight })
            }
            DatasetKind::TwoMoons => Dataset::Manifold(ManifoldDataset {
                kind: ManifoldKind::TwoMoons { radius: self.radius },
                normal_weight: self.normal_weight,
            }),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Metrics cadence in iterations; 0 disables periodic evaluation.
    pub every: u64,
    pub n_samples: usize,
    pub n_proj: usize,
    /// Student sampling steps used for `sw2`.
    pub steps: usize,
    /// First intermediate time of multistep student sampling.
    pub sample_time: f64,
    pub renoise: RenoiseMode,
    pub teacher_steps: usize,
    /// Noise draws for endpoint errors.
    pub n_noise: usize,
    /// RK4 substeps of the reference flow.
    pub n_substeps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSettings {
    pub regions: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TStarSettings {
    pub condition: TStarCondition,
    pub probe_pairs: usize,
    /// Train one short run per grid value of `N` for the comparison search.
    pub grid: bool,
    pub grid_iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Checkpoint cadence in iterations; 0 writes only the final checkpoint.
    pub ckpt_every: u64,
    pub dataset: DatasetConfig,
    pub schedule: NoiseSchedule,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bound: SweepConfig,
    pub tstar: TStarSettings,
    pub sweep: SweepSettings,
    pub sample_model: SampleModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            ckpt_every: 1000,
            dataset: DatasetConfig { kind: DatasetKind::Ring, modes: 8, radius: 4.0, std: 0.3, normal_weight: 1.0 },
            schedule: NoiseSchedule::default(),
            model: ModelConfig { embed_dim: 16, width: 128, depth: 4 },
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig {
                every: 1000,
                n_samples: 10_000,
                n_proj: 128,
                steps: 2,
                sample_time: 0.1,
                renoise: RenoiseMode::Fresh,
                teacher_steps: 50,
                n_noise: 512,
                n_substeps: 128,
            },
            bound: SweepConfig::default(),
            tstar: TStarSettings { condition: TStarCondition::Literal, probe_pairs: 10_000, grid: false, grid_iterations: 2000 },
            sweep: SweepSettings { regions: vec![0.2, 0.4, 0.6, 0.8, 1.0], seeds: vec![0, 1, 2] },
            sample_model: SampleModel::Auto,
        }
    }
}

/// Text form of one config value.
pub trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(raw: &str) -> Result<Self, String>;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }

            fn parse_value(raw: &str) -> Result<Self, String> {
                raw.parse().map_err(|e| format!("`{raw}` is not a valid {}: {e}", stringify!($t)))
            }
        }
    )*};
}

numeric_value!(f64, u64, usize, bool);

impl ConfigValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }

    fn parse_value(raw: &str) -> Result<Self, String> {
        Ok(PathBuf::from(raw))
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(", ")
    }

    fn parse_value(raw: &str) -> Result<Self, String> {
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
}

macro_rules! enum_value {
    ($t:ty { $($variant:path => $name:literal),* $(,)? }) => {
        impl ConfigValue for $t {
            fn render(&self) -> String {
                match self { $($variant => $name.to_owned()),* }
            }

            fn parse_value(raw: &str) -> Result<Self, String> {
                match raw {
                    $($name => Ok($variant),)*
                    _ => Err(format!("`{raw}` is not one of: {}", [$($name),*].join(", "))),
                }
            }
        }
    };
}

enum_value!(DatasetKind { DatasetKind::Ring => "ring", DatasetKind::Circle => "circle", DatasetKind::TwoMoons => "two_moons" });
enum_value!(RenoiseMode { RenoiseMode::Fresh => "fresh", RenoiseMode::Shared => "shared" });
enum_value!(SampleModel { SampleModel::Auto => "auto", SampleModel::Student => "student", SampleModel::Teacher => "teacher" });
enum_value!(CriticMode { CriticMode::Dual => "dual", CriticMode::Single => "single" });
enum_value!(DistillTime { DistillTime::Shared => "shared", DistillTime::EdgeMax => "edge_max" });
enum_value!(TStarCondition { TStarCondition::Literal => "literal", TStarCondition::Stationary => "stationary" });

macro_rules! config_fields {
    ($($section:literal . $key:literal => $($field:ident).+ ;)*) => {
        /// Every `(section, key)` in rendering order.
        pub const KEYS: &[(&str, &str)] = &[$(($section, $key)),*];

        impl RunConfig {
            fn render_field(&self, section: &str, key: &str) -> Option<String> {
                match (section, key) {
                    $(($section, $key) => Some(ConfigValue::render(&self.$($field).+)),)*
                    _ => None,
                }
            }

            fn set_field(&mut self, section: &str, key: &str, raw: &str) -> Option<Result<(), String>> {
                match (section, key) {
                    $(($section, $key) => Some(ConfigValue::parse_value(raw).map(|v| self.$($field).+ = v)),)*
                    _ => None,
                }
            }
        }
    };
}

config_fields! {
    "run"."seed" => seed;
    "run"."out" => out;
    "run"."ckpt_every" => ckpt_every;
    "dataset"."kind" => dataset.kind;
    "dataset"."modes" => dataset.modes;
    "dataset"."radius" => dataset.radius;
    "dataset"."std" => dataset.std;
    "dataset"."normal_weight" => dataset.normal_weight;
    "schedule"."beta_min" => schedule.beta_min;
    "schedule"."beta_max" => schedule.beta_max;
    "schedule"."t_min" => schedule.t_min;
    "schedule"."t_max" => schedule.t_max;
    "model"."embed_dim" => model.embed_dim;
    "model"."width" => model.width;
    "model"."depth" => model.depth;
    "pretrain"."iterations" => pretrain.iterations;
    "pretrain"."lr" => pretrain.lr;
    "pretrain"."weight_decay" => pretrain.weight_decay;
    "pretrain"."batch_size" => pretrain.batch_size;
    "train"."iterations" => train.iterations;
    "train"."edge_bound" => train.edge_bound;
    "train"."delta" => train.delta;
    "train"."lr_g" => train.lr_g;
    "train"."lr_d" => train.lr_d;
    "train"."weight_decay_g" => train.weight_decay_g;
    "train"."weight_decay_d" => train.weight_decay_d;
    "train"."n_accum" => train.n_accum;
    "train"."w_c" => train.w_c;
    "train"."w_d" => train.w_d;
    "train"."w_gan" => train.w_gan;
    "train"."ema_decay" => train.ema_decay;
    "train"."batch_size" => train.batch_size;
    "train"."r1_coef" => train.r1_coef;
    "train"."critic_mode" => train.critic_mode;
    "train"."critic_width" => train.critic_width;
    "train"."critic_depth" => train.critic_depth;
    "train"."distill_t" => train.distill_t;
    "train"."warmup_iters" => train.warmup_iters;
    "train"."warmup_teacher_steps" => train.warmup_teacher_steps;
    "train"."lr_warmup" => train.lr_warmup;
    "eval"."every" => eval.every;
    "eval"."n_samples" => eval.n_samples;
    "eval"."n_proj" => eval.n_proj;
    "eval"."steps" => eval.steps;
    "eval"."sample_time" => eval.sample_time;
    "eval"."renoise" => eval.renoise;
    "eval"."teacher_steps" => eval.teacher_steps;
    "eval"."n_noise" => eval.n_noise;
    "eval"."n_substeps" => eval.n_substeps;
    "bound"."n_max" => bound.n_max;
    "bound"."dt" => bound.dt;
    "bound"."n_draws" => bound.n_draws;
    "bound"."halvings" => bound.halvings;
    "bound"."taylor_time" => bound.taylor_time;
    "bound"."bins" => bound.bins;
    "tstar"."condition" => tstar.condition;
    "tstar"."probe_pairs" => tstar.probe_pairs;
    "tstar"."grid" => tstar.grid;
    "tstar"."grid_iterations" => tstar.grid_iterations;
    "sweep"."regions" => sweep.regions;
    "sweep"."seeds" => sweep.seeds;
    "sample"."model" => sample_model;
}

fn sections() -> Vec<&'static str> {
    let mut out: Vec<&str> = Vec::new();
    for (s, _) in KEYS {
        if !out.contains(s) {
            out.push(s);
        }
    }
    out
}

impl RunConfig {
    /// Parses a config text on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let known = sections();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner.strip_suffix(']').ok_or_else(|| ConfigError::at(line_no, None, "unterminated section header"))?.trim();
                if !known.contains(&name) {
                    return Err(ConfigError::at(line_no, None, format!("unknown section `[{name}]`")));
                }
                section = Some(name.to_owned());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::at(line_no, None, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.as_deref().ok_or_else(|| ConfigError::at(line_no, Some(key), "key outside of any section"))?;
            let full = format!("{sec}.{key}");
            if !seen.insert(full.clone()) {
                return Err(ConfigError::at(line_no, Some(&full), "duplicate key"));
            }
            match cfg.set_field(sec, key, value) {
                None => return Err(ConfigError::at(line_no, Some(&full), "unknown key")),
                Some(Err(msg)) => return Err(ConfigError::at(line_no, Some(&full), msg)),
                Some(Ok(())) => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` where `key` is `section.key` or a key name that
    /// occurs in only one section.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) =
            assignment.split_once('=').ok_or_else(|| ConfigError::new(format!("override `{assignment}` is not `key=value`")))?;
        let (key, value) = (key.trim(), value.trim());
        let (section, name) = match key.split_once('.') {
            Some((s, k)) => (s.to_owned(), k.to_owned()),
            None => {
                let owners: Vec<&str> = KEYS.iter().filter(|(_, k)| *k == key).map(|(s, _)| *s).collect();
                match owners.as_slice() {
                    [s] => (s.to_string(), key.to_owned()),
                    [] => return Err(ConfigError { line: None, key: Some(key.into()), message: "unknown key".into() }),
                    many => {
                        return Err(ConfigError {
                            line: None,
                            key: Some(key.into()),
                            message: format!(
                                "ambiguous, qualify it as one of {}",
                                many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
                            ),
                        })
                    }
                }
            }
        };
        let full = format!("{section}.{name}");
        match self.set_field(&section, &name, value) {
            None => Err(ConfigError { line: None, key: Some(full), message: "unknown key".into() }),
            Some(Err(msg)) => Err(ConfigError { line: None, key: Some(full), message: msg }),
            Some(Ok(())) => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let schedule = NoiseSchedule::new(self.schedule.beta_min, self.schedule.beta_max, self.schedule.t_min, self.schedule.t_max)
            .map_err(|e| ConfigError::new(e.to_string()))?;
        self.train.validate(&schedule).map_err(|e| ConfigError::new(e.to_string()))?;
        self.dataset.build().map_err(|e| ConfigError::new(e.to_string()))?;
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError { line: None, key: Some(key.into()), message: msg.into() })
            }
        };
        check(self.dataset.radius > 0.0 && self.dataset.radius.is_finite(), "dataset.radius", "must be positive")?;
        check(self.dataset.normal_weight >= 0.0, "dataset.normal_weight", "must be nonnegative")?;
        check(self.model.embed_dim.is_multiple_of(2) && self.model.embed_dim > 0, "model.embed_dim", "must be even and positive")?;
        check(self.model.width > 0, "model.width", "must be positive")?;
        check(self.pretrain.batch_size > 0, "pretrain.batch_size", "must be positive")?;
        check(self.pretrain.lr >= 0.0 && self.pretrain.lr.is_finite(), "pretrain.lr", "must be nonnegative")?;
        check(self.eval.n_samples > 0, "eval.n_samples", "must be positive")?;
        check(self.eval.n_proj > 0, "eval.n_proj", "must be positive")?;
        check(self.eval.steps > 0, "eval.steps", "must be positive")?;
        check(self.eval.teacher_steps > 0, "eval.teacher_steps", "must be positive")?;
        check(self.eval.n_noise > 0, "eval.n_noise", "must be positive")?;
        check(self.eval.n_substeps > 0, "eval.n_substeps", "must be positive")?;
        check(schedule.check_time(self.eval.sample_time).is_ok(), "eval.sample_time", "must lie in [t_min, t_max]")?;
        check(self.bound.n_max >= 2 && self.bound.dt > 0.0, "bound.n_max", "needs n_max >= 2 and dt > 0")?;
        check(self.tstar.probe_pairs > 0, "tstar.probe_pairs", "must be positive")?;
        check(self.sweep.regions.iter().all(|r| *r > 0.0 && *r <= 1.0), "sweep.regions", "values must lie in (0, 1]")?;
        check(!self.sweep.seeds.is_empty(), "sweep.seeds", "at least one seed is required")?;
        Ok(())
    }

    /// Full listing of every key; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for section in sections() {
            out.push_str(&format!("[{section}]\n"));
            for (s, k) in KEYS.iter().filter(|(s, _)| *s == section) {
                let v = self.render_field(s, k).expect("listed key");
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { seed: self.seed, ..self.pretrain.clone() }
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        RunConfig::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn awkward_values_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_g = 0.1 + 0.2;
        cfg.train.critic_mode = CriticMode::Single;
        cfg.train.distill_t = DistillTime::EdgeMax;
        cfg.schedule.t_min = 1.234_567_890_123_456_7e-4;
        cfg.sweep.regions = vec![0.4, 1.0 / 3.0];
        cfg.dataset.kind = DatasetKind::TwoMoons;
        cfg.out = PathBuf::from("some/dir with space");
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_with_comments() {
        let text = "# header\n[train]\nw_gan = 0   # off\nedge_bound=0.8\n\n[run]\nseed = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.w_gan, 0.0);
        assert_eq!(cfg.train.edge_bound, 0.8);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train_config().seed, 7);
    }

    #[test]
    fn unknown_and_malformed_entries_report_lines() {
        let e = RunConfig::parse("[train]\nw_gan = 0\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.key.as_deref(), Some("train.bogus"));
        let e = RunConfig::parse("[nope]\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = RunConfig::parse("seed = 1\n").unwrap_err();
        assert!(e.message.contains("outside"));
        let e = RunConfig::parse("[train]\nw_gan = lots\n").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(2), Some("train.w_gan")));
        let e = RunConfig::parse("[train]\nw_gan = 1\nw_gan = 2\n").unwrap_err();
        assert!(e.message.contains("duplicate"));
        let e = RunConfig::parse("[train]\njust words\n").unwrap_err();
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn semantic_validation() {
        assert!(RunConfig::parse("[train]\nedge_bound = 0\n").is_err());
        assert!(RunConfig::parse("[train]\ndelta = 0.9\n").is_err());
        assert!(RunConfig::parse("[sweep]\nregions = 0.4, 1.5\n").is_err());
        assert!(RunConfig::parse("[model]\nembed_dim = 3\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("w_gan=0").unwrap();
        cfg.apply_override("train.w_d = 0").unwrap();
        cfg.apply_override("critic_mode=single").unwrap();
        assert_eq!((cfg.train.w_gan, cfg.train.w_d, cfg.train.critic_mode), (0.0, 0.0, CriticMode::Single));
        let e = cfg.apply_override("iterations=5").unwrap_err();
        assert!(e.message.contains("ambiguous"), "{e}");
        cfg.apply_override("pretrain.iterations=5").unwrap();
        assert_eq!(cfg.pretrain.iterations, 5);
        assert!(cfg.apply_override("nothing=1").is_err());
        assert!(cfg.apply_override("no_equals").is_err());
        assert!(cfg.apply_override("train.w_gan=abc").is_err());
    }

    #[test]
    fn every_key_renders() {
        let cfg = RunConfig::default();
        for (s, k) in KEYS {
            assert!(cfg.render_field(s, k).is_some(), "{s}.{k}");
        }
    }
}

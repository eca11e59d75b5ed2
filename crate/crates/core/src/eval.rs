//! Sample-quality metrics, endpoint errors, the error-accumulation sweep and
//! the edge-boundary estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::models::ConsistencyFn;
use crate::nn::Matrix;
use crate::oracle::{gaussian, ManifoldDataset, MixtureOracle};
use crate::schedule::{solver_step, NoiseSchedule};

/// Mean over `n_proj` random unit directions of the 1-D 2-Wasserstein
/// distance between the projected sets. Sets may differ in size.
pub fn sliced_wasserstein(a: &Matrix, b: &Matrix, n_proj: usize, seed: u64) -> Result<f64> {
    contract(a.rows() > 0 && b.rows() > 0, || "sliced Wasserstein needs non-empty sets".into())?;
    contract(a.cols() == b.cols(), || format!("dimensions differ: {} vs {}", a.cols(), b.cols()))?;
    contract(n_proj >= 1, || "at least one projection is required".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = a.cols();
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |m: &Matrix| {
            let mut p: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().zip(&dir).map(|(x, w)| x * w).sum()).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        total += wasserstein_1d(&project(a), &project(b));
    }
    Ok(total / n_proj as f64)
}

/// Exact W2 between two sorted empirical distributions, integrating the
/// squared difference of their quantile functions.
fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Summary of a set of nonnegative errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        contract(!values.is_empty(), || "no error values".into())?;
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile_sorted(&v, 0.5),
            q10: quantile_sorted(&v, 0.1),
            q90: quantile_sorted(&v, 0.9),
            max: *v.last().expect("non-empty"),
        })
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// What a generated sample is compared with.
#[derive(Clone, Copy, Debug)]
pub enum EndpointReference<'a> {
    /// The exact flow map of the noise that produced the sample.
    Mixture { oracle: &'a MixtureOracle, n_substeps: usize },
    /// The nearest point of the data manifold.
    Manifold(&'a ManifoldDataset),
}

impl EndpointReference<'_> {
    /// Per-row error of `samples` generated from `noise`.
    pub fn errors(&self, sched: &NoiseSchedule, noise: &Matrix, samples: &Matrix) -> Result<Vec<f64>> {
        contract(noise.shape() == samples.shape(), || "samples are not paired with their noise".into())?;
        match *self {
            EndpointReference::Mixture { oracle, n_substeps } => {
                let ideal = oracle.reference_flow(sched, noise, sched.t_max, sched.t_min, n_substeps)?;
                Ok(samples.sub(&ideal).row_norms())
            }
            EndpointReference::Manifold(ds) => Ok(ds.project(samples)?.1.iter().map(|e| e.value).collect()),
        }
    }
}

/// Endpoint error of one-step generation `F(x_T, T)` over `n_noise` seeded
/// noise draws.
pub fn endpoint_error_batch<C: ConsistencyFn + ?Sized>(
    model: &C,
    reference: EndpointReference<'_>,
    sched: &NoiseSchedule,
    dim: usize,
    n_noise: usize,
    seed: u64,
) -> Result<ErrorStats> {
    contract(n_noise >= 1, || "at least one noise draw is required".into())?;
    let noise = gaussian(n_noise, dim, &mut ChaCha8Rng::seed_from_u64(seed));
    let coarse = model.apply(&noise, sched.t_max)?;
    ErrorStats::from_values(&reference.errors(sched, &noise, &coarse)?)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            let avg = (k + e) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=e] {
                r[i] = avg;
            }
            k = e + 1;
        }
        r
    }
    pearson(&ranks(x), &ranks(y))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if values.is_empty() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub n_intervals: usize,
    /// `t_n = t_min + (n − 1)·Δt`.
    pub t: f64,
    pub dt: f64,
    /// Mean norm of the adjacent-step defect `u_n`.
    pub mean_u: f64,
    /// Mean `‖F_θ(x_{t_n}, t_n) − F_Φ(x_{t_n}, t_n)‖`.
    pub endpoint_err: f64,
}

/// One point of the interval-refinement sub-sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorRow {
    pub dt: f64,
    /// Mean `‖F_θ(x̂_{t}, t) − F_θ(x_{t}, t)‖` where `x̂` is a first-order
    /// solver step and `x` the exact flow, over the same span.
    pub taylor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundSweepReport {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope through the origin of `E_n` against `t_n − t_min`:
    /// the per-unit-time residual `‖E_r‖`.
    pub slope: f64,
    /// Rank correlation of `E_n` with `n`.
    pub spearman: f64,
    pub taylor_rows: Vec<TaylorRow>,
    /// Fitted order `p̂` with `‖Taylor term‖ ∝ Δt^{p̂+1}`.
    pub p_hat: f64,
    /// Histogram of the components of `u` over all draws and intervals.
    pub u_histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub n_max: usize,
    pub dt: f64,
    pub n_draws: usize,
    /// Number of halvings of `dt` in the Taylor sub-sweep.
    pub halvings: usize,
    /// Time at which the Taylor sub-sweep is centred.
    pub taylor_time: f64,
    pub n_substeps: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { n_max: 20, dt: 0.02, n_draws: 512, halvings: 4, taylor_time: 0.2, n_substeps: 64, bins: 32, seed: 0 }
    }
}

/// Measures the accumulated consistency error along exact probability-flow
/// trajectories that start from forward-noised data at the top of the grid.
pub fn consistency_error_sweep<C: ConsistencyFn + ?Sized>(
    model: &C,
    oracle: &MixtureOracle,
    sched: &NoiseSchedule,
    cfg: &SweepConfig,
) -> Result<BoundSweepReport> {
    contract(cfg.n_max >= 2 && cfg.n_draws >= 1 && cfg.dt > 0.0, || "sweep grid is empty".into())?;
    let t_top = sched.t_min + cfg.n_max as f64 * cfg.dt;
    contract(t_top <= sched.t_max, || format!("sweep grid reaches {t_top} beyond T"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = oracle.dim();
    let x0 = oracle.sample(cfg.n_draws, &mut rng);
    let eps = gaussian(cfg.n_draws, dim, &mut rng);
    let (a, s) = sched.alpha_sigma(t_top)?;
    // Exact trajectory at t_1..t_{n_max+1}, from the top down.
    let grid: Vec<f64> = (0..=cfg.n_max).map(|k| sched.t_min + k as f64 * cfg.dt).collect();
    let mut traj = vec![x0.axpby(a, &eps, s)];
    for k in (0..cfg.n_max).rev() {
        let next = oracle.reference_flow(sched, traj.last().expect("seeded"), grid[k + 1], grid[k], cfg.n_substeps)?;
        traj.push(next);
    }
    traj.reverse();
    let ideal = &traj[0];

    let mut rows = Vec::with_capacity(cfg.n_max);
    let mut u_components = Vec::new();
    let eps_fn = |x: &Matrix, t: f64| oracle.analytic_eps(sched, x, t);
    for n in 1..=cfg.n_max {
        let t_n = grid[n - 1];
        let f_n = model.apply(&traj[n - 1], t_n)?;
        let endpoint_err = mean(&f_n.sub(ideal).row_norms());
        // u_n = F(x_{t_{n+1}}, t_{n+1}) − F(x̂_{t_n}, t_n), x̂ one solver step down.
        let x_hat = solver_step(sched, &traj[n], grid[n], t_n, eps_fn)?;
        let u = model.apply(&traj[n], grid[n])?.sub(&model.apply(&x_hat, t_n)?);
        u_components.extend_from_slice(u.data());
        rows.push(SweepRow { n_intervals: n, t: t_n, dt: cfg.dt, mean_u: mean(&u.row_norms()), endpoint_err });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.t - sched.t_min).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.endpoint_err).collect();
    let slope = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / xs.iter().map(|x| x * x).sum::<f64>();
    let ns: Vec<f64> = rows.iter().map(|r| r.n_intervals as f64).collect();
    let rho = spearman(&ns, &ys);

    let mut taylor_rows = Vec::with_capacity(cfg.halvings + 1);
    let top = cfg.taylor_time.clamp(sched.t_min + cfg.dt, sched.t_max);
    let (a, s) = sched.alpha_sigma(top)?;
    let x_top = x0.axpby(a, &eps, s);
    for k in 0..=cfg.halvings {
        let dt = cfg.dt / f64::powi(2.0, k as i32);
        let lower = top - dt;
        let exact = oracle.reference_flow(sched, &x_top, top, lower, cfg.n_substeps)?;
        let approx = solver_step(sched, &x_top, top, lower, eps_fn)?;
        let diff = model.apply(&approx, lower)?.sub(&model.apply(&exact, lower)?);
        taylor_rows.push(TaylorRow { dt, taylor: mean(&diff.row_norms()) });
    }
    let lx: Vec<f64> = taylor_rows.iter().map(|r| r.dt.ln()).collect();
    let ly: Vec<f64> = taylor_rows.iter().map(|r| r.taylor.max(f64::MIN_POSITIVE).ln()).collect();
    let p_hat = linear_fit(&lx, &ly).0 - 1.0;

    Ok(BoundSweepReport { rows, slope, spearman: rho, taylor_rows, p_hat, u_histogram: Histogram::new(&u_components, cfg.bins) })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// 99th percentile of `‖F(x+δ, t) − F(x, t)‖ / ‖δ‖` over `n_pairs` probes
/// with `t ~ U(t_min, T)`, `x` forward-noised data and small random `δ`.
pub fn estimate_lipschitz<C: ConsistencyFn + ?Sized>(
    model: &C,
    oracle: &MixtureOracle,
    sched: &NoiseSchedule,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    contract(n_pairs >= 1, || "at least one probe pair is required".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = oracle.dim();
    let h = 1e-4;
    // Group probes into a few shared times to batch network calls.
    let groups = 50.min(n_pairs);
    let mut ratios = Vec::with_capacity(n_pairs);
    for g in 0..groups {
        let count = n_pairs / groups + usize::from(g < n_pairs % groups);
        let t = sched.t_min + (sched.t_max - sched.t_min) * rng.random::<f64>();
        let (a, s) = sched.alpha_sigma(t)?;
        let x0 = oracle.sample(count, &mut rng);
        let x = x0.axpby(a, &gaussian(count, dim, &mut rng), s);
        let mut delta = gaussian(count, dim, &mut rng);
        let norms = delta.row_norms();
        let inv: Vec<f64> = norms.iter().map(|n| h / n).collect();
        delta = delta.scale_rows(&inv);
        let diff = model.apply(&x.add(&delta), t)?.sub(&model.apply(&x, t)?);
        ratios.extend(diff.row_norms().iter().map(|d| d / h));
    }
    ratios.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&ratios, 0.99))
}

/// Which scalar equation defines the edge boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TStarCondition {
    /// `dα/dt = −L·α·D(t)/‖E_r‖`, i.e. `½β(t) = L·D(t)/‖E_r‖`.
    Literal,
    /// Stationary point of `L·α_t·D(t) + t·‖E_r‖`:
    /// `dα/dt = −‖E_r‖/(L·D(t))`.
    Stationary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TStarEstimate {
    pub l_hat: f64,
    pub er_hat: f64,
    /// `None` when the condition has no sign change on `[t_min, T]`.
    pub t_star: Option<f64>,
    /// `|dα/dt + …|` at `t_star`, in the units of the chosen condition.
    pub residual: Option<f64>,
    pub gridsearch_best_n: Option<f64>,
    /// `(N, score)` for every grid point, lower score is better.
    pub grid: Vec<(f64, f64)>,
}

impl TStarEstimate {
    pub fn satisfied(&self) -> bool {
        self.t_star.is_some()
    }
}

/// Solves `condition` for the smallest root `t` by a scan and bisection. `distance(t)` is
/// `‖x_0* − x_{t|0,T}‖`. Returns `(t*, residual)` or `None`.
pub fn solve_tstar(
    sched: &NoiseSchedule,
    condition: TStarCondition,
    l_hat: f64,
    er_hat: f64,
    distance: impl Fn(f64) -> Result<f64>,
) -> Result<Option<(f64, f64)>> {
    contract(l_hat >= 0.0 && er_hat > 0.0, || format!("invalid estimates L = {l_hat}, E_r = {er_hat}"))?;
    // Both forms written as residuals of dα/dt = rhs.
    let residual = |t: f64| -> Result<f64> {
        let (a, d) = (sched.alpha(t)?, distance(t)?);
        let rhs = match condition {
            TStarCondition::Literal => -l_hat * a * d / er_hat,
            TStarCondition::Stationary => {
                if l_hat * d == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -er_hat / (l_hat * d)
                }
            }
        };
        Ok(sched.alpha_derivative(t) - rhs)
    };
    // First sign change on a uniform scan, then bisection inside it.
    let scan = 1000;
    let at = |k: usize| sched.t_min + (sched.t_max - sched.t_min) * k as f64 / scan as f64;
    let mut bracket = None;
    let mut prev = residual(at(0))?;
    if prev == 0.0 {
        return Ok(Some((at(0), 0.0)));
    }
    for k in 1..=scan {
        let f = residual(at(k))?;
        if !f.is_finite() || !prev.is_finite() {
            prev = f;
            continue;
        }
        if f == 0.0 {
            return Ok(Some((at(k), 0.0)));
        }
        if f.signum() != prev.signum() {
            bracket = Some((at(k - 1), at(k), prev));
            break;
        }
        prev = f;
    }
    let Some((mut lo, mut hi, f_lo)) = bracket else {
        return Ok(None);
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = residual(mid)?;
        if f_mid == 0.0 {
            return Ok(Some((mid, 0.0)));
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (r_lo, r_hi) = (residual(lo)?.abs(), residual(hi)?.abs());
    Ok(Some(if r_lo <= r_hi { (lo, r_lo) } else { (hi, r_hi) }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TStarConfig {
    pub condition: TStarCondition,
    pub n_probe_pairs: usize,
    pub n_noise: usize,
    pub sweep: SweepConfig,
    pub seed: u64,
}

impl Default for TStarConfig {
    fn default() -> Self {
        Self { condition: TStarCondition::Literal, n_probe_pairs: 10_000, n_noise: 512, sweep: SweepConfig::default(), seed: 0 }
    }
}

/// Estimates `L` and `‖E_r‖` from `model`, then solves for the edge
/// boundary; `grid_score(N)` (lower is better) drives the comparison grid
/// search over `N ∈ {0.2, …, 1.0}` when given.
pub fn estimate_tstar<C: ConsistencyFn + ?Sized>(
    model: &C,
    oracle: &MixtureOracle,
    sched: &NoiseSchedule,
    cfg: &TStarConfig,
    grid_score: Option<&mut dyn FnMut(f64) -> Result<f64>>,
) -> Result<TStarEstimate> {
    let l_hat = estimate_lipschitz(model, oracle, sched, cfg.n_probe_pairs, cfg.seed)?;
    let er_hat = consistency_error_sweep(model, oracle, sched, &cfg.sweep)?.slope;

    let noise = gaussian(cfg.n_noise, oracle.dim(), &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let coarse = model.apply(&noise, sched.t_max)?;
    let ideal = oracle.reference_flow(sched, &noise, sched.t_max, sched.t_min, cfg.sweep.n_substeps)?;
    let distance = |t: f64| -> Result<f64> {
        let (a, s) = sched.alpha_sigma(t)?;
        Ok(median(&ideal.sub(&coarse.axpby(a, &noise, s)).row_norms()))
    };
    let solved = if er_hat > 0.0 { solve_tstar(sched, cfg.condition, l_hat, er_hat, distance)? } else { None };

    let mut grid = Vec::new();
    let mut best = None;
    if let Some(score) = grid_score {
        for n in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let v = score(n)?;
            grid.push((n, v));
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((n, v));
            }
        }
    }
    Ok(TStarEstimate {
        l_hat,
        er_hat,
        t_star: solved.map(|s| s.0),
        residual: solved.map(|s| s.1),
        gridsearch_best_n: best.map(|b| b.0),
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ConsistencyModel;
    use crate::models::{AnalyticConsistency, OracleConsistency};
    use crate::nn::{ParamVector, ScoreNet};
    use crate::oracle::ManifoldKind;

    fn ring() -> MixtureOracle {
        MixtureOracle::ring(8, 4.0, 0.3).unwrap()
    }

    #[test]
    fn sliced_wasserstein_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(50, 3, &mut rng);
        assert_eq!(sliced_wasserstein(&a, &a, 16, 1).unwrap(), 0.0);
        let p = Matrix::filled(4, 1, 0.0);
        let q = Matrix::filled(7, 1, 3.0);
        assert!((sliced_wasserstein(&p, &q, 8, 2).unwrap() - 3.0).abs() < 1e-12);
        assert!(sliced_wasserstein(&Matrix::zeros(0, 2), &a.slice_cols(0, 2), 4, 0).is_err());
        assert!(sliced_wasserstein(&a, &Matrix::zeros(3, 2), 4, 0).is_err());
    }

    #[test]
    fn sliced_wasserstein_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (gaussian(10_000, 2, &mut rng), gaussian(10_000, 2, &mut rng));
        assert!(sliced_wasserstein(&a, &b, 128, 0).unwrap() < 0.05);
    }

    #[test]
    fn sliced_wasserstein_symmetry_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (gaussian(40, 2, &mut rng), gaussian(25, 2, &mut rng).scale(2.0));
        let ab = sliced_wasserstein(&a, &b, 32, 5).unwrap();
        let ba = sliced_wasserstein(&b, &a, 32, 5).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let scaled = sliced_wasserstein(&a.scale(3.0), &b.scale(3.0), 32, 5).unwrap();
        assert!((scaled - 3.0 * ab).abs() < 1e-10);
    }

    #[test]
    fn one_dimensional_quantile_merge() {
        // {0, 1} against {0, 0, 1, 1, 1}: quantile functions differ on
        // u in (2/5, 1/2] by 1, so W2² = 1/10.
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((w - 0.1f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_has_zero_endpoint_error() {
        let o = ring();
        let s = NoiseSchedule::default();
        let perfect = OracleConsistency { oracle: &o, schedule: s, n_substeps: 256 };
        let r = EndpointReference::Mixture { oracle: &o, n_substeps: 256 };
        let st = endpoint_error_batch(&perfect, r, &s, 2, 64, 3).unwrap();
        assert!(st.max < 1e-4);
        let one_step = AnalyticConsistency { oracle: &o, schedule: s };
        let a = endpoint_error_batch(&one_step, r, &s, 2, 64, 3).unwrap();
        let b = endpoint_error_batch(&one_step, r, &s, 2, 64, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.median > 0.1 && a.q10 >= 0.0);
    }

    #[test]
    fn manifold_errors_are_nonnegative() {
        let ds = ManifoldDataset { kind: ManifoldKind::Circle { radius: 1.0 }, normal_weight: 1.0 };
        let net = ScoreNet::new(4, 8, 16, 1).unwrap();
        let p = net.init(&mut ChaCha8Rng::seed_from_u64(4));
        let m = ConsistencyModel::new(net, p, NoiseSchedule::default()).unwrap();
        let st = endpoint_error_batch(&m, EndpointReference::Manifold(&ds), &m.schedule, 4, 100, 0).unwrap();
        assert!(st.q10 >= 0.0 && st.mean.is_finite());
    }

    #[test]
    fn rank_correlation_and_fits() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // Ties: ranks (1.5, 1.5, 3) vs (1, 2, 3).
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
        let (m, c) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((m - 2.0).abs() < 1e-15 && (c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert_eq!(h.edges.len(), 5);
        assert_eq!(h.counts[3], 2);
    }

    fn quick_sweep() -> SweepConfig {
        SweepConfig { n_max: 10, dt: 0.03, n_draws: 64, halvings: 3, n_substeps: 32, ..Default::default() }
    }

    #[test]
    fn sweep_with_perfect_network_shows_solver_error_only() {
        let o = ring();
        let s = NoiseSchedule::default();
        let perfect = AnalyticConsistency { oracle: &o, schedule: s };
        let rep = consistency_error_sweep(&perfect, &o, &s, &quick_sweep()).unwrap();
        assert!(rep.rows[0].endpoint_err < 1e-6);
        assert!(rep.rows.windows(2).all(|w| w[0].n_intervals < w[1].n_intervals));
        assert!(rep.spearman > 0.9, "{}", rep.spearman);
        assert!(rep.p_hat > 0.0, "{}", rep.p_hat);
        assert!(rep.rows.iter().all(|r| r.mean_u.is_finite() && r.endpoint_err.is_finite()));

        // An untrained network has larger errors at every n > 1.
        let net = ScoreNet::new(2, 8, 16, 2).unwrap();
        let p = ParamVector::init(net.layout().clone(), &mut ChaCha8Rng::seed_from_u64(5), 1.0);
        let bad = ConsistencyModel::new(net, p, s).unwrap();
        let rb = consistency_error_sweep(&bad, &o, &s, &quick_sweep()).unwrap();
        for (a, b) in rep.rows.iter().zip(&rb.rows).skip(1) {
            assert!(a.endpoint_err < b.endpoint_err);
        }
    }

    #[test]
    fn tstar_degenerate_lipschitz_is_unsatisfied() {
        let s = NoiseSchedule::default();
        for c in [TStarCondition::Literal, TStarCondition::Stationary] {
            assert_eq!(solve_tstar(&s, c, 0.0, 1.0, |_| Ok(1.0)).unwrap(), None);
        }
    }

    #[test]
    fn tstar_residual_and_direction() {
        let s = NoiseSchedule::default();
        let d = |t: f64| Ok(0.5 + t);
        let lit = |l: f64| solve_tstar(&s, TStarCondition::Literal, l, 1.0, d).unwrap().unwrap();
        let (t1, r1) = lit(2.0);
        assert!(t1 > s.t_min && t1 < s.t_max);
        assert!(r1 < 1e-8, "{r1}");
        // ½β(t) = L·D(t)/E_r: a larger L needs a larger β, so t* rises.
        assert!(lit(4.0).0 > t1);

        // ½β(t)·α(t)·D(t) = E_r/L: a larger L is met earlier.
        let st = |l: f64| solve_tstar(&s, TStarCondition::Stationary, l, 1.0, d).unwrap().unwrap();
        let (t2, r2) = st(10.0);
        assert!(r2 < 1e-8, "{r2}");
        assert!(st(20.0).0 < t2);
    }

    #[test]
    fn lipschitz_of_linear_map_is_exact() {
        // The α_T-scaling map on standard-normal data is x ↦ c·x.
        let o = MixtureOracle::standard_normal(2);
        let s = NoiseSchedule::default();
        let m = AnalyticConsistency { oracle: &o, schedule: s };
        let l = estimate_lipschitz(&m, &o, &s, 1000, 0).unwrap();
        let (a_p, s_p) = s.alpha_sigma(s.t_min).unwrap();
        let max_c = (0..=1000)
            .map(|k| s.t_min + (s.t_max - s.t_min) * k as f64 / 1000.0)
            .map(|t| {
                let (a, sg) = s.alpha_sigma(t).unwrap();
                a_p * a + s_p * sg
            })
            .fold(0.0, f64::max);
        assert!(l <= max_c + 1e-6 && l > 0.5 * max_c, "{l} vs {max_c}");
    }

    #[test]
    fn tstar_end_to_end_with_grid() {
        let o = ring();
        let s = NoiseSchedule::default();
        let m = AnalyticConsistency { oracle: &o, schedule: s };
        let cfg = TStarConfig { n_probe_pairs: 500, n_noise: 64, sweep: quick_sweep(), ..Default::default() };
        let mut score = |n: f64| Ok((n - 0.4).abs());
        let est = estimate_tstar(&m, &o, &s, &cfg, Some(&mut score)).unwrap();
        assert_eq!(est.gridsearch_best_n, Some(0.4));
        assert_eq!(est.grid.len(), 5);
        assert!(est.l_hat > 0.0 && est.er_hat > 0.0);
        if let Some(t) = est.t_star {
            assert!(t > s.t_min && t < s.t_max);
            assert!(est.residual.unwrap() < 1e-8);
        }
    }
}

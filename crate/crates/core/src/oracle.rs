//! Analytic ground truth.
//!
//! Gaussian mixtures stay Gaussian mixtures under the forward process, so
//! their noised scores are available in closed form and the ideal
//! consistency map (the exact probability-flow map to `t_min`) can be
//! integrated to high accuracy. Manifold datasets have closed-form nearest
//! points, which turns "distance to the data manifold" into a measurement.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::nn::Matrix;
use crate::schedule::NoiseSchedule;

/// `Σ w_i N(μ_i, diag(v_i))` on `R^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureOracle {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
}

impl MixtureOracle {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        contract(!weights.is_empty(), || "mixture needs at least one component".into())?;
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::Shape("weights, means and variances differ in count".into()));
        }
        let dim = means[0].len();
        if means.iter().chain(&variances).any(|v| v.len() != dim) {
            return Err(Error::Shape("components differ in dimension".into()));
        }
        if variances.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("covariance entries must be positive".into()));
        }
        if weights.iter().any(|&w| w.is_nan() || w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("mixture weights must lie on the simplex".into()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, means, variances, log_weights })
    }

    /// `n` equally weighted isotropic components on a circle of `radius`.
    pub fn ring(n: usize, radius: f64, std: f64) -> Result<Self> {
        contract(n >= 1, || "ring needs at least one mode".into())?;
        let means = (0..n)
            .map(|k| {
                let a = TAU * k as f64 / n as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(vec![1.0 / n as f64; n], means, vec![vec![std * std; 2]; n])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![vec![1.0; dim]]).expect("valid by construction")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// Per-component log N(x; α μ_i, α² v_i + σ²) + log w_i, and, when
    /// `score` is given, the score of the noised mixture written into it.
    fn row_terms(&self, x: &[f64], alpha: f64, sigma2: f64, logs: &mut [f64], score: Option<&mut [f64]>) -> f64 {
        let a2 = alpha * alpha;
        for (i, l) in logs.iter_mut().enumerate() {
            let mut acc = self.log_weights[i];
            for ((xd, var), mean) in x.iter().zip(&self.variances[i]).zip(&self.means[i]) {
                let v = a2 * var + sigma2;
                let r = xd - alpha * mean;
                acc -= 0.5 * ((TAU * v).ln() + r * r / v);
            }
            *l = acc;
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        let log_p = m + z.ln();
        if let Some(score) = score {
            score.iter_mut().for_each(|s| *s = 0.0);
            for (i, l) in logs.iter().enumerate() {
                let resp = (l - log_p).exp();
                for d in 0..x.len() {
                    let v = a2 * self.variances[i][d] + sigma2;
                    score[d] -= resp * (x[d] - alpha * self.means[i][d]) / v;
                }
            }
        }
        log_p
    }

    /// log p_t(x) for every row.
    pub fn log_density(&self, sched: &NoiseSchedule, x: &Matrix, t: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let (a, s) = sched.alpha_sigma(t)?;
        let mut logs = vec![0.0; self.weights.len()];
        Ok((0..x.rows()).map(|i| self.row_terms(x.row(i), a, s * s, &mut logs, None)).collect())
    }

    fn check_dim(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!("oracle is {}-dimensional, batch has {} columns", self.dim(), x.cols())));
        }
        Ok(())
    }

    fn score_with(&self, x: &Matrix, alpha: f64, sigma: f64) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut logs = vec![0.0; self.weights.len()];
        for i in 0..x.rows() {
            self.row_terms(x.row(i), alpha, sigma * sigma, &mut logs, Some(out.row_mut(i)));
        }
        out
    }

    /// Exact `∇_x log p_t(x)` with log-sum-exp responsibilities.
    pub fn analytic_score(&self, sched: &NoiseSchedule, x: &Matrix, t: f64) -> Result<Matrix> {
        self.check_dim(x)?;
        let (a, s) = sched.alpha_sigma(t)?;
        Ok(self.score_with(x, a, s))
    }

    /// Ideal noise prediction `ε* = −σ_t ∇ log p_t`.
    pub fn analytic_eps(&self, sched: &NoiseSchedule, x: &Matrix, t: f64) -> Result<Matrix> {
        self.check_dim(x)?;
        let (a, s) = sched.alpha_sigma(t)?;
        Ok(self.score_with(x, a, s).scale(-s))
    }

    /// Probability-flow velocity `f(t)x − ½g²(t)∇log p_t(x)`.
    fn velocity(&self, sched: &NoiseSchedule, x: &Matrix, t: f64) -> Matrix {
        let la = sched.log_alpha(t);
        let alpha = la.exp();
        let sigma = (-(2.0 * la).exp_m1()).sqrt();
        let score = self.score_with(x, alpha, sigma);
        x.add(&score).scale(-0.5 * sched.beta(t))
    }

    /// Classical RK4 integration of the probability-flow ODE from `t` to
    /// `t_target` in `n_substeps` uniform steps. With `t_target = t_min` this
    /// is the ideal consistency function.
    pub fn reference_flow(&self, sched: &NoiseSchedule, x_t: &Matrix, t: f64, t_target: f64, n_substeps: usize) -> Result<Matrix> {
        self.check_dim(x_t)?;
        sched.time_pair(t, t_target)?;
        contract(n_substeps >= 1, || "reference flow needs at least one substep".into())?;
        if t == t_target {
            return Ok(x_t.clone());
        }
        let h = (t_target - t) / n_substeps as f64;
        let mut x = x_t.clone();
        for k in 0..n_substeps {
            let tk = t + h * k as f64;
            let k1 = self.velocity(sched, &x, tk);
            let k2 = self.velocity(sched, &x.axpby(1.0, &k1, 0.5 * h), tk + 0.5 * h);
            let k3 = self.velocity(sched, &x.axpby(1.0, &k2, 0.5 * h), tk + 0.5 * h);
            let k4 = self.velocity(sched, &x.axpby(1.0, &k3, h), tk + h);
            let data = x.data_mut();
            for (j, v) in data.iter_mut().enumerate() {
                *v += h / 6.0 * (k1.data()[j] + 2.0 * k2.data()[j] + 2.0 * k3.data()[j] + k4.data()[j]);
            }
        }
        Ok(x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let dim = self.dim();
        let mut out = Matrix::zeros(n, dim);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            for d in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                out.set(i, d, self.means[k][d] + self.variances[k][d].sqrt() * z);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ManifoldKind {
    /// Circle of the given radius centred at the origin.
    Circle { radius: f64 },
    /// Two interleaved half circles of the given radius.
    TwoMoons { radius: f64 },
}

/// Samples are `[position (2), unit outward normal (2)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifoldDataset {
    pub kind: ManifoldKind,
    /// Weight of the angular normal error (radians) in the combined error.
    pub normal_weight: f64,
}

/// Distance from a point to the data manifold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndpointError {
    pub position: f64,
    /// Angle in radians between the emitted and the true normal.
    pub angular: f64,
    pub value: f64,
}

impl ManifoldDataset {
    pub const POSITION: std::ops::Range<usize> = 0..2;
    pub const NORMAL: std::ops::Range<usize> = 2..4;

    pub fn circle(radius: f64) -> Self {
        Self { kind: ManifoldKind::Circle { radius }, normal_weight: 1.0 }
    }

    pub fn two_moons(radius: f64) -> Self {
        Self { kind: ManifoldKind::TwoMoons { radius }, normal_weight: 1.0 }
    }

    pub fn dim(&self) -> usize {
        4
    }

    /// Arc parameterisation: (centre, radius, start angle, sweep, normal sign).
    fn arcs(&self) -> Vec<([f64; 2], f64, f64, f64, f64)> {
        match self.kind {
            ManifoldKind::Circle { radius } => vec![([0.0, 0.0], radius, 0.0, TAU, 1.0)],
            ManifoldKind::TwoMoons { radius } => vec![([0.0, 0.0], radius, 0.0, PI, 1.0), ([radius, 0.5 * radius], radius, PI, PI, 1.0)],
        }
    }

    fn point_on_arc(arc: &([f64; 2], f64, f64, f64, f64), angle: f64) -> [f64; 4] {
        let (c, r, _, _, sign) = *arc;
        let (s, co) = angle.sin_cos();
        [c[0] + r * co, c[1] + r * s, sign * co, sign * s]
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let arcs = self.arcs();
        let mut out = Matrix::zeros(n, 4);
        for i in 0..n {
            let arc = if arcs.len() == 1 { &arcs[0] } else { &arcs[rng.random_range(0..arcs.len())] };
            let u: f64 = rng.random();
            let p = Self::point_on_arc(arc, arc.2 + u * arc.3);
            out.row_mut(i).copy_from_slice(&p);
        }
        out
    }

    /// Closed-form nearest point on one arc; returns (point, squared distance).
    fn nearest_on_arc(arc: &([f64; 2], f64, f64, f64, f64), p: [f64; 2]) -> ([f64; 4], f64) {
        let (c, _, start, sweep, _) = *arc;
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        // The centre is equidistant from the whole circle: take angle 0.
        let raw = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
        let rel = (raw - start).rem_euclid(TAU);
        let angle = if rel <= sweep {
            start + rel
        } else {
            // Outside the swept range: the nearer endpoint wins.
            let to_end = rel - sweep;
            let to_start = TAU - rel;
            if to_end <= to_start {
                start + sweep
            } else {
                start
            }
        };
        let q = Self::point_on_arc(arc, angle);
        let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        (q, d2)
    }

    /// Nearest on-manifold point (by position) and the endpoint error of every
    /// row. A zero-length emitted normal counts as a right angle.
    pub fn project(&self, x: &Matrix) -> Result<(Matrix, Vec<EndpointError>)> {
        if x.cols() != 4 {
            return Err(Error::Shape(format!("manifold samples have 4 columns, got {}", x.cols())));
        }
        let arcs = self.arcs();
        let mut nearest = Matrix::zeros(x.rows(), 4);
        let mut errors = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let (q, d2) = arcs
                .iter()
                .map(|a| Self::nearest_on_arc(a, [row[0], row[1]]))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least one arc");
            let n = [row[2], row[3]];
            let norm = (n[0] * n[0] + n[1] * n[1]).sqrt();
            let angular = if norm > 0.0 {
                let cross = n[0] * q[3] - n[1] * q[2];
                let dot = n[0] * q[2] + n[1] * q[3];
                cross.abs().atan2(dot)
            } else {
                0.5 * PI
            };
            let position = d2.sqrt();
            nearest.row_mut(i).copy_from_slice(&q);
            errors.push(EndpointError { position, angular, value: position + self.normal_weight * angular });
        }
        Ok((nearest, errors))
    }
}

/// Training data source.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Mixture(MixtureOracle),
    Manifold(ManifoldDataset),
}

impl Dataset {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Mixture(m) => m.dim(),
            Dataset::Manifold(m) => m.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        match self {
            Dataset::Mixture(m) => m.sample(n, rng),
            Dataset::Manifold(m) => m.sample(n, rng),
        }
    }
}

/// Draws `n` samples deterministically from `seed`.
pub fn sample_dataset(ds: &Dataset, n: usize, seed: u64) -> Result<Matrix> {
    use rand::SeedableRng;
    contract(n >= 1, || "sample count must be positive".into())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(ds.sample(n, &mut rng))
}

/// Standard normal batch.
pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn three_component() -> MixtureOracle {
        MixtureOracle::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![-1.0, 2.0], vec![1.5, 0.0], vec![0.0, -2.5]],
            vec![vec![0.3, 0.6], vec![0.2, 0.2], vec![1.1, 0.4]],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_is_a_fixed_point() {
        let o = MixtureOracle::standard_normal(2);
        let x = Matrix::from_fn(6, 2, |i, j| (i as f64 - 2.5) * 0.9 + j as f64 * 0.3);
        for &t in &[1e-3, 0.2, 0.6, 1.0] {
            let s = o.analytic_score(&sched(), &x, t).unwrap();
            assert!(s.add(&x).frobenius() < 1e-12);
            let e = o.analytic_eps(&sched(), &x, t).unwrap();
            assert!(e.sub(&x.scale(sched().sigma(t).unwrap())).frobenius() < 1e-12);
        }
    }

    #[test]
    fn symmetric_midpoint_has_zero_score() {
        let o = MixtureOracle::new(vec![0.5, 0.5], vec![vec![-2.0, 1.0], vec![2.0, 1.0]], vec![vec![0.5, 0.5]; 2]).unwrap();
        let x = Matrix::from_rows(&[vec![0.0, 0.3]]).unwrap();
        let t = 0.4;
        let a = sched().alpha(t).unwrap();
        let mid = Matrix::from_rows(&[vec![0.0, a * 1.0]]).unwrap();
        let s = o.analytic_score(&sched(), &mid, t).unwrap();
        assert!(s.frobenius() < 1e-12);
        // Off-axis point: only the x-component vanishes by symmetry.
        assert!(o.analytic_score(&sched(), &x, t).unwrap().get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn score_matches_density_gradient() {
        let o = three_component();
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for &t in &[2e-3, 0.05, 0.3, 0.7, 1.0] {
            let x = gaussian(20, 2, &mut rng).scale(2.0);
            let score = o.analytic_score(&s, &x, t).unwrap();
            for i in 0..x.rows() {
                for d in 0..2 {
                    let mut xp = x.slice_rows(i, i + 1);
                    let mut xm = xp.clone();
                    xp.set(0, d, xp.get(0, d) + h);
                    xm.set(0, d, xm.get(0, d) - h);
                    let fd = (o.log_density(&s, &xp, t).unwrap()[0] - o.log_density(&s, &xm, t).unwrap()[0]) / (2.0 * h);
                    let an = score.get(i, d);
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "t={t} fd={fd} an={an}");
                }
            }
        }
    }

    #[test]
    fn eps_and_score_are_consistent() {
        let o = three_component();
        let x = gaussian(8, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let t = 0.37;
        let sg = sched().sigma(t).unwrap();
        let e = o.analytic_eps(&sched(), &x, t).unwrap();
        let sc = o.analytic_score(&sched(), &x, t).unwrap();
        assert!(e.axpby(1.0, &sc, sg).frobenius() == 0.0);
    }

    #[test]
    fn degenerate_covariance_is_domain_error() {
        let r = MixtureOracle::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn reference_flow_identity_cases() {
        let s = sched();
        let o = MixtureOracle::standard_normal(2);
        let x = gaussian(16, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let y = o.reference_flow(&s, &x, s.t_max, s.t_min, 1024).unwrap();
        assert!(y.sub(&x).data().iter().all(|d| d.abs() < 1e-6));
        let ring = MixtureOracle::ring(8, 4.0, 0.3).unwrap();
        assert_eq!(ring.reference_flow(&s, &x, 0.5, 0.5, 16).unwrap(), x);
    }

    #[test]
    fn reference_flow_self_converges() {
        let s = sched();
        let o = MixtureOracle::ring(8, 4.0, 0.3).unwrap();
        let x = gaussian(32, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let a = o.reference_flow(&s, &x, s.t_max, s.t_min, 1024).unwrap();
        let b = o.reference_flow(&s, &x, s.t_max, s.t_min, 2048).unwrap();
        let worst = a.sub(&b).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-8, "self-convergence gap {worst}");
    }

    #[test]
    fn interpolation_contracts_by_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (gaussian(10, 2, &mut rng), gaussian(10, 2, &mut rng));
        for &t in &[1e-3, 0.3, 1.0] {
            let al = sched().alpha(t).unwrap();
            assert!(al <= 1.0);
            let lhs = a.scale(al).sub(&b.scale(al)).frobenius();
            let rhs = al * a.sub(&b).frobenius();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        }
    }

    #[test]
    fn circle_projection_geometry() {
        let ds = ManifoldDataset::circle(1.0);
        let x =
            Matrix::from_rows(&[vec![0.0, 1.0, 0.0, 1.0], vec![2.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, -1.0, 1.0, 0.0]])
                .unwrap();
        let (near, err) = ds.project(&x).unwrap();
        assert!(err[0].value.abs() < 1e-12);
        assert_eq!(&near.row(1)[..2], &[1.0, 0.0]);
        assert!((err[1].position - 1.0).abs() < 1e-15);
        assert_eq!(&near.row(2)[..2], &[1.0, 0.0]);
        assert!((err[3].angular - 0.5 * PI).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for ds in [ManifoldDataset::circle(1.5), ManifoldDataset::two_moons(1.0)] {
            let dense = ds.sample(100_000, &mut rng);
            let x = gaussian(40, 4, &mut rng).scale(1.5);
            let (_, err) = ds.project(&x).unwrap();
            for (i, e) in err.iter().enumerate() {
                let best = (0..dense.rows())
                    .map(|k| ((dense.get(k, 0) - x.get(i, 0)).powi(2) + (dense.get(k, 1) - x.get(i, 1)).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!((best - e.position).abs() < 1e-3, "{best} vs {}", e.position);
                assert!(e.position <= best + 1e-12);
            }
        }
    }

    #[test]
    fn manifold_samples_are_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = ManifoldDataset::circle(2.0);
        let x = ds.sample(1000, &mut rng);
        for i in 0..x.rows() {
            let r = x.row(i);
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 2.0).abs() < 1e-9);
            assert!(((r[2] * r[2] + r[3] * r[3]).sqrt() - 1.0).abs() < 1e-9);
        }
        let moons = ManifoldDataset::two_moons(1.0);
        let y = moons.sample(500, &mut rng);
        let (_, err) = moons.project(&y).unwrap();
        assert!(err.iter().all(|e| e.value < 1e-9));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let ds = Dataset::Mixture(MixtureOracle::ring(8, 4.0, 0.3).unwrap());
        assert_eq!(sample_dataset(&ds, 64, 7).unwrap(), sample_dataset(&ds, 64, 7).unwrap());
        assert!(sample_dataset(&ds, 0, 7).is_err());
    }

    #[test]
    fn mixture_weights_within_multinomial_bounds() {
        let o = MixtureOracle::new(vec![0.1, 0.6, 0.3], vec![vec![-10.0], vec![0.0], vec![10.0]], vec![vec![0.01]; 3]).unwrap();
        let n = 100_000;
        let x = o.sample(n, &mut ChaCha8Rng::seed_from_u64(8));
        let mut counts = [0usize; 3];
        for i in 0..n {
            let v = x.get(i, 0);
            counts[if v < -5.0 {
                0
            } else if v > 5.0 {
                2
            } else {
                1
            }] += 1;
        }
        for (c, w) in counts.iter().zip(o.weights()) {
            let sd = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((*c as f64 - n as f64 * w).abs() < 3.0 * sd, "{c} vs {}", n as f64 * w);
        }
    }
}

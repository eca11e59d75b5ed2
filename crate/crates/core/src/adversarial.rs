//! Adversarial objective with one critic per modality.
//!
//! Per modality `m` the loss is `L_m = mean D_m(fake_m) − mean D_m(real_m)`.
//! Critics ascend `Σ L_m`, the generator descends it. Critics therefore
//! learn to score generated samples *high*; the generator pushes its samples
//! toward low scores.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::nn::{Binding, Layout, Matrix, ParamVector, Tape, Var};
use crate::oracle::{Dataset, ManifoldDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticMode {
    /// Separate critics for the position and normal slices.
    Dual,
    /// One critic on the full sample.
    Single,
}

impl fmt::Display for CriticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriticMode::Dual => "dual",
            CriticMode::Single => "single",
        })
    }
}

impl FromStr for CriticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(CriticMode::Dual),
            "single" => Ok(CriticMode::Single),
            other => Err(Error::Contract(format!("unknown critic mode `{other}`"))),
        }
    }
}

/// Which coordinates of a sample belong to which modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySplit {
    position: Range<usize>,
    normal: Range<usize>,
}

impl ModalitySplit {
    /// The two ranges must be disjoint and together cover `0..dim`. Either
    /// may be empty.
    pub fn new(dim: usize, position: Range<usize>, normal: Range<usize>) -> Result<Self> {
        let ok_range = |r: &Range<usize>| r.start <= r.end && r.end <= dim;
        contract(ok_range(&position) && ok_range(&normal), || {
            format!("modality slices {position:?}/{normal:?} out of bounds for dimension {dim}")
        })?;
        let disjoint = position.is_empty() || normal.is_empty() || position.end <= normal.start || normal.end <= position.start;
        contract(disjoint && position.len() + normal.len() == dim, || {
            format!("modality slices {position:?}/{normal:?} do not partition 0..{dim}")
        })?;
        Ok(Self { position, normal })
    }

    /// Position/normal for manifold data; everything is position for mixtures.
    pub fn for_dataset(ds: &Dataset) -> Self {
        match ds {
            Dataset::Mixture(m) => Self { position: 0..m.dim(), normal: m.dim()..m.dim() },
            Dataset::Manifold(_) => Self { position: ManifoldDataset::POSITION, normal: ManifoldDataset::NORMAL },
        }
    }

    pub fn dim(&self) -> usize {
        self.position.len() + self.normal.len()
    }

    pub fn position(&self) -> Range<usize> {
        self.position.clone()
    }

    pub fn normal(&self) -> Range<usize> {
        self.normal.clone()
    }
}

/// Critic weights. In single mode `critic_geo` is absent and `critic_tex`
/// sees the whole sample; in dual mode a critic is absent only when its
/// slice is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub critic_tex: ParamVector,
    pub critic_geo: Option<ParamVector>,
    pub mode: CriticMode,
}

/// Critic parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundCritics {
    tex: Binding,
    geo: Option<Binding>,
}

impl CriticPair {
    pub fn init<R: Rng + ?Sized>(split: &ModalitySplit, mode: CriticMode, width: usize, depth: usize, rng: &mut R) -> Self {
        let mut make = |d: usize| ParamVector::init(std::sync::Arc::new(Layout::mlp(d, width, depth, 1)), rng, 1.0);
        match mode {
            CriticMode::Single => Self { critic_tex: make(split.dim()), critic_geo: None, mode },
            CriticMode::Dual => {
                let critic_tex = make(split.position.len());
                let critic_geo = (!split.normal.is_empty()).then(|| make(split.normal.len()));
                Self { critic_tex, critic_geo, mode }
            }
        }
    }

    /// `(critic, its column ranges)` pairs after checking widths against `split`.
    fn routes(&self, split: &ModalitySplit) -> Result<Vec<Route<'_>>> {
        let routes = match self.mode {
            CriticMode::Single => {
                contract(self.critic_geo.is_none(), || "single mode carries a second critic".into())?;
                vec![(&self.critic_tex, vec![split.position(), split.normal()])]
            }
            CriticMode::Dual => {
                let mut r = vec![(&self.critic_tex, vec![split.position()])];
                match (&self.critic_geo, split.normal.is_empty()) {
                    (Some(g), false) => r.push((g, vec![split.normal()])),
                    (None, true) => {}
                    _ => return Err(Error::Contract("normal critic does not match the normal slice".into())),
                }
                r
            }
        };
        for (p, ranges) in &routes {
            let width: usize = ranges.iter().map(|r| r.len()).sum();
            contract(p.layout().input_dim() == width && p.layout().output_dim() == 1, || {
                format!("critic expects {} inputs, slice has {width}", p.layout().input_dim())
            })?;
        }
        Ok(routes)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundCritics {
        BoundCritics { tex: self.critic_tex.bind(tape), geo: self.critic_geo.as_ref().map(|g| g.bind(tape)) }
    }

    /// Collects the critics' gradients into a pair of the same shape.
    pub fn gradient(&self, bound: &BoundCritics, grads: &crate::nn::Gradients) -> CriticPair {
        CriticPair { critic_tex: bound.tex.gradient(grads), critic_geo: bound.geo.as_ref().map(|b| b.gradient(grads)), mode: self.mode }
    }

    pub fn fingerprint(&self) -> u64 {
        let g = self.critic_geo.as_ref().map_or(0, |g| g.fingerprint());
        self.critic_tex.fingerprint().rotate_left(17) ^ g
    }

    pub fn is_finite(&self) -> bool {
        self.critic_tex.is_finite() && self.critic_geo.as_ref().is_none_or(|g| g.is_finite())
    }
}

/// A critic and the input columns it reads.
type Route<'a> = (&'a ParamVector, Vec<Range<usize>>);

fn gather(x: &Matrix, ranges: &[Range<usize>]) -> Matrix {
    let width: usize = ranges.iter().map(|r| r.len()).sum();
    Matrix::from_fn(x.rows(), width, |i, j| {
        let mut j = j;
        for r in ranges {
            if j < r.len() {
                return x.get(i, r.start + j);
            }
            j -= r.len();
        }
        unreachable!()
    })
}

fn gather_taped(tape: &mut Tape, x: Var, ranges: &[Range<usize>]) -> Var {
    let mut parts = ranges.iter().filter(|r| !r.is_empty()).map(|r| (r.start, r.end));
    let (s, e) = parts.next().expect("non-empty route");
    let mut out = tape.slice_cols(x, s, e);
    for (s, e) in parts {
        let p = tape.slice_cols(x, s, e);
        out = tape.concat_cols(out, p);
    }
    out
}

fn check_batches(split: &ModalitySplit, fake: &Matrix, real: &Matrix) -> Result<()> {
    contract(fake.cols() == split.dim() && real.cols() == split.dim(), || {
        format!("batches of width {}/{} do not match split width {}", fake.cols(), real.cols(), split.dim())
    })?;
    contract(fake.rows() > 0 && real.rows() > 0, || "empty adversarial batch".into())
}

/// Value of the adversarial objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLoss {
    /// Descended by the generator.
    pub g_loss: f64,
    /// Ascended by the critics.
    pub d_loss: f64,
}

/// Tape-free evaluation of `Σ_m L_m`.
pub fn gan_loss(critics: &CriticPair, fake: &Matrix, real: &Matrix, split: &ModalitySplit) -> Result<GanLoss> {
    check_batches(split, fake, real)?;
    let mut total = 0.0;
    for (p, ranges) in critics.routes(split)? {
        total += p.eval(&gather(fake, &ranges)).mean() - p.eval(&gather(real, &ranges)).mean();
    }
    Ok(GanLoss { g_loss: total, d_loss: total })
}

/// Taped `Σ_m L_m` as a 1×1 node; `fake` and `real` may both be tape nodes.
pub fn gan_loss_taped(
    tape: &mut Tape,
    critics: &CriticPair,
    bound: &BoundCritics,
    fake: Var,
    real: Var,
    split: &ModalitySplit,
) -> Result<Var> {
    check_batches(split, tape.value(fake), tape.value(real))?;
    let routes = critics.routes(split)?;
    let mut total: Option<Var> = None;
    for (k, (_, ranges)) in routes.iter().enumerate() {
        let b = if k == 0 { &bound.tex } else { bound.geo.as_ref().expect("route implies binding") };
        let f = gather_taped(tape, fake, ranges);
        let r = gather_taped(tape, real, ranges);
        let df = b.forward(tape, f).output;
        let dr = b.forward(tape, r).output;
        let (mf, mr) = (tape.mean(df), tape.mean(dr));
        let term = tape.sub(mf, mr);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term),
        });
    }
    Ok(total.expect("at least one route"))
}

/// `½·coef·mean_i ‖∇_x D(x_i)‖²` on the tape so that it can be
/// differentiated with respect to the critic weights.
fn r1_taped(tape: &mut Tape, bound: &Binding, real: &Matrix, coef: f64) -> Var {
    let x = tape.leaf(real.clone());
    let trace = bound.forward(tape, x);
    let seed = tape.leaf(Matrix::filled(real.rows(), 1, 1.0));
    let g = bound.input_gradient(tape, &trace, seed);
    let sq = tape.mul(g, g);
    let m = tape.mean(sq);
    tape.scale(m, 0.5 * coef * real.cols() as f64)
}

/// Gradient penalty of a single critic on real data.
pub fn critic_regularizer(critic: &ParamVector, real: &Matrix, coefficient: f64) -> Result<f64> {
    contract(coefficient >= 0.0, || format!("penalty coefficient {coefficient} is negative"))?;
    contract(real.cols() == critic.layout().input_dim(), || "real batch width does not match the critic".into())?;
    if coefficient == 0.0 || real.rows() == 0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let b = critic.bind(&mut tape);
    let v = r1_taped(&mut tape, &b, real, coefficient);
    Ok(tape.value(v).get(0, 0))
}

/// Result of one critic gradient evaluation.
#[derive(Clone, Debug)]
pub struct CriticStep {
    /// `Σ_m L_m` before the update.
    pub d_loss: f64,
    pub penalty: f64,
    /// Gradient of `−Σ_m L_m + penalty`, the quantity the critics descend.
    pub grads: CriticPair,
}

/// Gradients for the critics with generator outputs held fixed.
pub fn critic_gradients(critics: &CriticPair, fake: &Matrix, real: &Matrix, split: &ModalitySplit, r1_coef: f64) -> Result<CriticStep> {
    contract(r1_coef >= 0.0, || format!("penalty coefficient {r1_coef} is negative"))?;
    let mut tape = Tape::new();
    let bound = critics.bind(&mut tape);
    let (f, r) = (tape.leaf(fake.clone()), tape.leaf(real.clone()));
    let l = gan_loss_taped(&mut tape, critics, &bound, f, r, split)?;
    let mut objective = tape.scale(l, -1.0);
    let mut penalty = 0.0;
    if r1_coef > 0.0 {
        for (k, (_, ranges)) in critics.routes(split)?.iter().enumerate() {
            let b = if k == 0 { &bound.tex } else { bound.geo.as_ref().expect("route implies binding") };
            let p = r1_taped(&mut tape, b, &gather(real, ranges), r1_coef);
            penalty += tape.value(p).get(0, 0);
            objective = tape.add(objective, p);
        }
    }
    let d_loss = tape.value(l).get(0, 0);
    let g = tape.backward(objective, Matrix::filled(1, 1, 1.0))?;
    Ok(CriticStep { d_loss, penalty, grads: critics.gradient(&bound, &g) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamW;
    use crate::oracle::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn linear(w: &[f64]) -> ParamVector {
        let mut v = w.to_vec();
        v.push(0.0);
        ParamVector::from_values(Arc::new(Layout::mlp(w.len(), 0, 0, 1)), v).unwrap()
    }

    fn split4() -> ModalitySplit {
        ModalitySplit::new(4, 0..2, 2..4).unwrap()
    }

    #[test]
    fn split_validation() {
        assert!(ModalitySplit::new(4, 0..2, 1..4).is_err());
        assert!(ModalitySplit::new(4, 0..2, 2..3).is_err());
        assert!(ModalitySplit::new(4, 0..2, 2..5).is_err());
        assert!(ModalitySplit::new(4, 2..4, 0..2).is_ok());
        assert!(ModalitySplit::new(2, 0..2, 2..2).is_ok());
    }

    #[test]
    fn mismatched_critic_is_contract_error() {
        let c = CriticPair { critic_tex: linear(&[1.0, 1.0, 1.0]), critic_geo: Some(linear(&[1.0, 1.0])), mode: CriticMode::Dual };
        let x = Matrix::zeros(3, 4);
        assert!(matches!(gan_loss(&c, &x, &x, &split4()), Err(Error::Contract(_))));
        let c = CriticPair { critic_tex: linear(&[1.0; 4]), critic_geo: None, mode: CriticMode::Single };
        assert!(gan_loss(&c, &x, &Matrix::zeros(3, 3), &split4()).is_err());
    }

    #[test]
    fn zero_critics_give_zero_loss_and_gradient() {
        let s = split4();
        let mut c = CriticPair::init(&s, CriticMode::Dual, 8, 2, &mut ChaCha8Rng::seed_from_u64(0));
        c.critic_tex.values_mut().fill(0.0);
        c.critic_geo.as_mut().unwrap().values_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, r) = (gaussian(16, 4, &mut rng), gaussian(16, 4, &mut rng));
        let l = gan_loss(&c, &f, &r, &s).unwrap();
        assert_eq!(l.d_loss, 0.0);
        // With all-zero weights no signal reaches any weight but the read-out
        // bias, and that one cancels between fake and real.
        let step = critic_gradients(&c, &f, &r, &s, 0.0).unwrap();
        assert!(step.grads.critic_tex.values().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn identical_batches_give_zero_loss() {
        let s = split4();
        let c = CriticPair::init(&s, CriticMode::Dual, 8, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let x = gaussian(10, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(gan_loss(&c, &x, &x, &s).unwrap().g_loss, 0.0);
    }

    #[test]
    fn linear_critic_hand_value() {
        let s = ModalitySplit::new(1, 0..1, 1..1).unwrap();
        let c = CriticPair { critic_tex: linear(&[1.0]), critic_geo: None, mode: CriticMode::Single };
        let fake = Matrix::from_vec(4, 1, vec![0.5, 1.5, 1.0, 1.0]).unwrap();
        let real = Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap();
        let l = gan_loss(&c, &fake, &real, &s).unwrap();
        assert_eq!(l.g_loss, 1.0);
        assert_eq!(l.d_loss, 1.0);
    }

    #[test]
    fn dual_with_identical_critics_matches_single_on_duplicate() {
        let s = split4();
        let w = [0.3, -0.7];
        let dual = CriticPair { critic_tex: linear(&w), critic_geo: Some(linear(&w)), mode: CriticMode::Dual };
        let single = CriticPair { critic_tex: linear(&[w[0], w[1], w[0], w[1]]), critic_geo: None, mode: CriticMode::Single };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dup = |m: Matrix| Matrix::from_fn(m.rows(), 4, |i, j| m.get(i, j % 2));
        let (f, r) = (dup(gaussian(8, 2, &mut rng)), dup(gaussian(8, 2, &mut rng)));
        let a = gan_loss(&dual, &f, &r, &s).unwrap().d_loss;
        let b = gan_loss(&single, &f, &r, &s).unwrap().d_loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn taped_and_plain_losses_agree() {
        let s = split4();
        let c = CriticPair::init(&s, CriticMode::Dual, 16, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f, r) = (gaussian(9, 4, &mut rng), gaussian(7, 4, &mut rng));
        let mut tape = Tape::new();
        let b = c.bind(&mut tape);
        let (fv, rv) = (tape.leaf(f.clone()), tape.leaf(r.clone()));
        let v = gan_loss_taped(&mut tape, &c, &b, fv, rv, &s).unwrap();
        let plain = gan_loss(&c, &f, &r, &s).unwrap().d_loss;
        assert!((tape.value(v).get(0, 0) - plain).abs() < 1e-12);
    }

    #[test]
    fn penalty_values() {
        let x = gaussian(5, 3, &mut ChaCha8Rng::seed_from_u64(7));
        let c = linear(&[1.0, -2.0, 0.5]);
        assert_eq!(critic_regularizer(&c, &x, 0.0).unwrap(), 0.0);
        let p = critic_regularizer(&c, &x, 2.0).unwrap();
        assert!((p - 0.5 * 2.0 * 5.25).abs() < 1e-12);
        assert!(critic_regularizer(&c, &x, -1.0).is_err());
    }

    fn fd_input_grad_sq(critic: &ParamVector, x: &Matrix) -> f64 {
        let h = 1e-5;
        let mut total = 0.0;
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut p = x.slice_rows(i, i + 1);
                let mut m = p.clone();
                p.set(0, j, p.get(0, j) + h);
                m.set(0, j, m.get(0, j) - h);
                let d = (critic.eval(&p).get(0, 0) - critic.eval(&m).get(0, 0)) / (2.0 * h);
                total += d * d;
            }
        }
        total / x.rows() as f64
    }

    #[test]
    fn penalty_matches_finite_difference_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = ParamVector::init(Arc::new(Layout::mlp(3, 16, 2, 1)), &mut rng, 1.0);
        let x = gaussian(6, 3, &mut rng);
        let p = critic_regularizer(&c, &x, 1.0).unwrap();
        let fd = 0.5 * fd_input_grad_sq(&c, &x);
        assert!((p - fd).abs() < 1e-4 * fd.max(1.0), "{p} vs {fd}");
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        // Covers the double backward through the penalty.
        let s = ModalitySplit::new(3, 0..2, 2..3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = CriticPair::init(&s, CriticMode::Dual, 6, 2, &mut rng);
        let (f, r) = (gaussian(5, 3, &mut rng), gaussian(4, 3, &mut rng));
        let coef = 0.7;
        let objective = |c: &CriticPair| {
            let l = gan_loss(c, &f, &r, &s).unwrap().d_loss;
            let p1 = critic_regularizer(&c.critic_tex, &r.slice_cols(0, 2), coef).unwrap();
            let p2 = critic_regularizer(c.critic_geo.as_ref().unwrap(), &r.slice_cols(2, 3), coef).unwrap();
            -l + p1 + p2
        };
        let step = critic_gradients(&c, &f, &r, &s, coef).unwrap();
        let h = 1e-6;
        for which in 0..2 {
            let n = if which == 0 { c.critic_tex.len() } else { c.critic_geo.as_ref().unwrap().len() };
            for k in (0..n).step_by(5) {
                let bump = |d: f64| {
                    let mut c2 = c.clone();
                    let p = if which == 0 { &mut c2.critic_tex } else { c2.critic_geo.as_mut().unwrap() };
                    p.values_mut()[k] += d;
                    objective(&c2)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let g = if which == 0 { &step.grads.critic_tex } else { step.grads.critic_geo.as_ref().unwrap() };
                assert!((g.values()[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "critic {which} coord {k}: {} vs {fd}", g.values()[k]);
            }
        }
    }

    #[test]
    fn single_mode_ignores_split_boundaries() {
        let s = split4();
        let c = CriticPair::init(&s, CriticMode::Single, 8, 1, &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(c.critic_tex.layout().input_dim(), 4);
        let x = gaussian(3, 4, &mut ChaCha8Rng::seed_from_u64(11));
        let y = gaussian(3, 4, &mut ChaCha8Rng::seed_from_u64(12));
        let l = gan_loss(&c, &x, &y, &s).unwrap().d_loss;
        assert!((l - (c.critic_tex.eval(&x).mean() - c.critic_tex.eval(&y).mean())).abs() < 1e-15);
    }

    #[test]
    fn critic_ascent_raises_the_objective() {
        let s = split4();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut c = CriticPair::init(&s, CriticMode::Dual, 16, 2, &mut rng);
        let fake = gaussian(64, 4, &mut rng).scale(0.5);
        let real = gaussian(64, 4, &mut rng).add(&Matrix::filled(64, 4, 1.0));
        let mut opt_t = AdamW::new(c.critic_tex.len(), 1e-3, 0.0);
        let mut opt_g = AdamW::new(c.critic_geo.as_ref().unwrap().len(), 1e-3, 0.0);
        let mut history = Vec::new();
        for _ in 0..100 {
            let st = critic_gradients(&c, &fake, &real, &s, 0.1).unwrap();
            history.push(st.d_loss);
            opt_t.step(&mut c.critic_tex, &st.grads.critic_tex).unwrap();
            opt_g.step(c.critic_geo.as_mut().unwrap(), st.grads.critic_geo.as_ref().unwrap()).unwrap();
        }
        let first: f64 = history[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = history[90..].iter().sum::<f64>() / 10.0;
        assert!(last > first + 0.1, "{first} -> {last}");
        let ups = history.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(ups > 80, "{ups} nondecreasing steps");
    }
}

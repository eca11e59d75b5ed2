//! Noise-prediction network: an MLP fed with the sample concatenated with a
//! sinusoidal embedding of its diffusion time.

use std::sync::Arc;

use rand::Rng;

use super::matrix::Matrix;
use super::mlp::{Binding, Layout, ParamVector, Trace};
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreNet {
    pub dim: usize,
    pub embed_dim: usize,
    layout: Arc<Layout>,
}

impl ScoreNet {
    pub fn new(dim: usize, embed_dim: usize, width: usize, depth: usize) -> Result<Self> {
        if !embed_dim.is_multiple_of(2) {
            return Err(Error::Contract("time embedding width must be even".into()));
        }
        let layout = Arc::new(Layout::mlp(dim + embed_dim, width, depth, dim));
        Ok(Self { dim, embed_dim, layout })
    }

    /// Wraps an existing layout, checking that it has the right in/out widths.
    pub fn from_layout(dim: usize, embed_dim: usize, layout: Arc<Layout>) -> Result<Self> {
        if layout.input_dim() != dim + embed_dim || layout.output_dim() != dim {
            return Err(Error::Shape("layout does not match score-net widths".into()));
        }
        Ok(Self { dim, embed_dim, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        ParamVector::init(self.layout.clone(), rng, 0.1)
    }

    /// `[sin(ω_k s), cos(ω_k s)]` with `s = 1000 t` and geometric frequencies
    /// `ω_k = 10000^{-k/K}`.
    pub fn embed(&self, times: &[f64]) -> Matrix {
        let half = self.embed_dim / 2;
        Matrix::from_fn(times.len(), self.embed_dim, |i, j| {
            let k = j % half;
            let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
            let arg = 1000.0 * times[i] * freq;
            if j < half {
                arg.sin()
            } else {
                arg.cos()
            }
        })
    }

    fn input(&self, x: &Matrix, times: &[f64]) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(Error::Shape(format!("expected {}-dimensional samples, got {}", self.dim, x.cols())));
        }
        if times.len() != x.rows() {
            return Err(Error::Shape("one time per sample row is required".into()));
        }
        if !x.is_finite() {
            return Err(Error::Contract("non-finite network input".into()));
        }
        Ok(x.hcat(&self.embed(times)))
    }

    /// Tape-free evaluation; `times` holds one diffusion time per row.
    pub fn eval(&self, params: &ParamVector, x: &Matrix, times: &[f64]) -> Result<Matrix> {
        Ok(params.eval(&self.input(x, times)?))
    }

    /// Taped evaluation with an already-bound parameter set.
    pub fn apply(&self, tape: &mut Tape, bound: &Binding, x: &Matrix, times: &[f64]) -> Result<Trace> {
        let input = tape.leaf(self.input(x, times)?);
        Ok(bound.forward(tape, input))
    }
}

/// A finished forward pass that owns its tape.
pub struct ForwardPass {
    pub tape: Tape,
    pub binding: Binding,
    pub output: Var,
}

impl ForwardPass {
    pub fn value(&self) -> &Matrix {
        self.tape.value(self.output)
    }

    /// Parameter gradient of `Σ output ⊙ cotangent`.
    pub fn backward(&mut self, cotangent: Matrix) -> Result<ParamVector> {
        let grads: Gradients = self.tape.backward(self.output, cotangent)?;
        Ok(self.binding.gradient(&grads))
    }
}

/// Runs the score network with every operation recorded.
pub fn mlp_forward(net: &ScoreNet, params: &ParamVector, x: &Matrix, times: &[f64]) -> Result<ForwardPass> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let trace = net.apply(&mut tape, &binding, x, times)?;
    Ok(ForwardPass { tape, binding, output: trace.output })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::{Activation, LayerSpec};

    #[test]
    fn single_linear_layer_matches_hand_product() {
        // out = [x ; emb(t)]·W + b with a 1-d sample and a 2-wide embedding.
        let layout = Arc::new(Layout::new(vec![LayerSpec { fan_in: 3, fan_out: 1, activation: Activation::Identity }]).unwrap());
        let net = ScoreNet::from_layout(1, 2, layout.clone()).unwrap();
        let (w0, w1, w2, b) = (0.5, -1.25, 2.0, 0.125);
        let p = ParamVector::from_values(layout, vec![w0, w1, w2, b]).unwrap();
        let (x, t) = (0.8, 0.3);
        let out = net.eval(&p, &Matrix::filled(1, 1, x), &[t]).unwrap();
        let s = 1000.0 * t;
        let expected = w0 * x + w1 * s.sin() + w2 * s.cos() + b;
        assert!((out.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_input() {
        let net = ScoreNet::new(2, 4, 8, 1).unwrap();
        let p = ParamVector::zeros(net.layout().clone());
        let x = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(net.eval(&p, &x, &[0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn evaluation_is_deterministic() {
        use rand::SeedableRng;
        let net = ScoreNet::new(2, 8, 16, 2).unwrap();
        let p = net.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let x = Matrix::from_fn(3, 2, |i, j| i as f64 - j as f64);
        let a = net.eval(&p, &x, &[0.1, 0.5, 0.9]).unwrap();
        let b = mlp_forward(&net, &p, &x, &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(&a, b.value());
    }
}

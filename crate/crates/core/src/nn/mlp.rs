//! Fully connected networks over flat parameter vectors.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;
use super::tape::{matmul_into, silu, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Silu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Silu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn n_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Ordered layer descriptors. Layer `i` stores its `fan_in × fan_out` weight
/// matrix row-major, followed by its bias.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    layers: Vec<LayerSpec>,
}

impl Layout {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("a network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].fan_out != w[1].fan_in {
                return Err(Error::Shape(format!("layer widths do not chain: {} -> {}", w[0].fan_out, w[1].fan_in)));
            }
        }
        Ok(Self { layers })
    }

    /// `depth` hidden layers of `width` SiLU units and a linear read-out.
    pub fn mlp(input: usize, width: usize, depth: usize, output: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = input;
        for _ in 0..depth {
            layers.push(LayerSpec { fan_in, fan_out: width, activation: Activation::Silu });
            fan_in = width;
        }
        layers.push(LayerSpec { fan_in, fan_out: output, activation: Activation::Identity });
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::n_params).sum()
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().scan(0usize, |off, l| {
            let start = *off;
            *off += l.n_params();
            Some((start, l))
        })
    }
}

/// Flat trainable parameters plus the immutable layout that gives them shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self { values: vec![0.0; layout.n_params()], layout }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.n_params() {
            return Err(Error::Shape(format!("layout expects {} parameters, got {}", layout.n_params(), values.len())));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite parameter value".into()));
        }
        Ok(Self { values, layout })
    }

    /// Weights ~ N(0, 1/fan_in), zero biases; the read-out layer is scaled
    /// by `out_scale`.
    pub fn init<R: Rng + ?Sized>(layout: Arc<Layout>, rng: &mut R, out_scale: f64) -> Self {
        let mut values = vec![0.0; layout.n_params()];
        let last = layout.layers.len() - 1;
        for (li, (off, l)) in layout.offsets().enumerate() {
            let std = (1.0 / l.fan_in as f64).sqrt() * if li == last { out_scale } else { 1.0 };
            for v in &mut values[off..off + l.fan_in * l.fan_out] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self { values, layout }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// A stable fingerprint of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.layout.hash(&mut h);
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn weight(&self, off: usize, l: &LayerSpec) -> Matrix {
        let n = l.fan_in * l.fan_out;
        Matrix::from_vec(l.fan_in, l.fan_out, self.values[off..off + n].to_vec()).expect("layout-consistent slice")
    }

    fn bias(&self, off: usize, l: &LayerSpec) -> Matrix {
        let s = off + l.fan_in * l.fan_out;
        Matrix::from_vec(1, l.fan_out, self.values[s..s + l.fan_out].to_vec()).expect("layout-consistent slice")
    }

    /// Tape-free forward pass.
    pub fn eval(&self, input: &Matrix) -> Matrix {
        assert_eq!(input.cols(), self.layout.input_dim(), "network input width");
        let mut h = input.clone();
        for (off, l) in self.layout.offsets() {
            let mut z = Matrix::zeros(h.rows(), l.fan_out);
            matmul_into(&h, &self.weight(off, l), &mut z);
            let mut z = z.add_row(&self.bias(off, l));
            if l.activation == Activation::Silu {
                z.data_mut().iter_mut().for_each(|v| *v = silu(*v));
            }
            h = z;
        }
        h
    }

    /// Places the parameters on a tape as leaves.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let layers = self.layout.offsets().map(|(off, l)| (tape.leaf(self.weight(off, l)), tape.leaf(self.bias(off, l)))).collect();
        Binding { layers, layout: self.layout.clone() }
    }
}

/// Parameters placed on a tape. Applying one binding several times shares the
/// leaves, so gradients from every application add up.
#[derive(Clone, Debug)]
pub struct Binding {
    layers: Vec<(Var, Var)>,
    layout: Arc<Layout>,
}

/// Intermediate nodes of one taped application.
#[derive(Clone, Debug)]
pub struct Trace {
    pub output: Var,
    pre_activations: Vec<Var>,
}

impl Binding {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Trace {
        let mut h = input;
        let mut pre = Vec::with_capacity(self.layers.len());
        for (&(w, b), l) in self.layers.iter().zip(self.layout.layers()) {
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            pre.push(z);
            h = match l.activation {
                Activation::Silu => tape.silu(z),
                Activation::Identity => z,
            };
        }
        Trace { output: h, pre_activations: pre }
    }

    /// Builds, from taped operations, the gradient of `Σ_rows output · seed`
    /// with respect to the network input of `trace`. Because the result lives
    /// on the tape, it can be differentiated again.
    pub fn input_gradient(&self, tape: &mut Tape, trace: &Trace, seed: Var) -> Var {
        let mut g = seed;
        for ((&(w, _), l), &z) in self.layers.iter().zip(self.layout.layers()).zip(&trace.pre_activations).rev() {
            if l.activation == Activation::Silu {
                let d = tape.silu_prime(z);
                g = tape.mul(g, d);
            }
            g = tape.matmul_t(g, w);
        }
        g
    }

    /// Collects this binding's gradients into a flat vector matching the
    /// parameter layout; leaves the output never touched contribute zeros.
    pub fn gradient(&self, grads: &Gradients) -> ParamVector {
        let mut out = ParamVector::zeros(self.layout.clone());
        for (&(w, b), (off, l)) in self.layers.iter().zip(self.layout.offsets()) {
            let nw = l.fan_in * l.fan_out;
            grads.add_into(w, &mut out.values[off..off + nw]);
            grads.add_into(b, &mut out.values[off + nw..off + nw + l.fan_out]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let layout = Arc::new(Layout::mlp(3, 8, 2, 2));
        let p = ParamVector::zeros(layout);
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64) - (j as f64) * 0.3);
        assert!(p.eval(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taped_and_plain_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = Arc::new(Layout::mlp(3, 16, 3, 2));
        let p = ParamVector::init(layout, &mut rng, 1.0);
        let x = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.7);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xin = tape.leaf(x.clone());
        let tr = b.forward(&mut tape, xin);
        assert_eq!(tape.value(tr.output), &p.eval(&x));
    }

    #[test]
    fn layout_rejects_broken_chain() {
        let l = vec![
            LayerSpec { fan_in: 2, fan_out: 3, activation: Activation::Silu },
            LayerSpec { fan_in: 4, fan_out: 1, activation: Activation::Identity },
        ];
        assert!(Layout::new(l).is_err());
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let layout = Arc::new(Layout::mlp(2, 4, 1, 1));
        let mut p = ParamVector::zeros(layout);
        let f0 = p.fingerprint();
        p.values_mut()[0] = -0.0;
        assert_ne!(f0, p.fingerprint());
    }
}

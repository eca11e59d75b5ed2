//! Reverse-mode differentiation, MLP networks and the AdamW optimizer.

pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod score;
pub mod tape;

pub use matrix::Matrix;
pub use mlp::{Activation, Binding, LayerSpec, Layout, ParamVector, Trace};
pub use optim::{AdamW, GradAccumulator};
pub use score::{mlp_forward, ForwardPass, ScoreNet};
pub use tape::{Gradients, Tape, Var};

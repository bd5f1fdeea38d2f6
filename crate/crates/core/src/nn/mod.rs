//! Neural building blocks: dense matrices, a reverse-mode tape with fused
//! LSTM nodes, Adam, and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod lstm;
pub mod matrix;
pub mod tape;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use lstm::{bilstm_forward, lstm_forward, BiLstmParams, BiLstmVars, LstmCellParams, LstmVars};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("loss must be a 1x1 matrix, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sequence has no steps")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Ordered access to a model's trainable tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
    fn tensor_names(&self) -> Vec<String>;

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|m| m.shape()).collect()
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }
}

/// Registers every tensor of `params` on the tape, in order.
pub fn bind_all<P: Parameters + ?Sized>(tape: &mut Tape, params: &P) -> Vec<Var> {
    params.tensors().into_iter().map(|m| tape.param(m.clone())).collect()
}

/// Hands out bound parameter handles in registration order.
pub struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    /// Panics when the tensors run out, which means a model's binding order
    /// disagrees with its `tensors()` order.
    pub fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

/// Gradients of `vars` in order, zeros where a tensor did not contribute.
pub fn collect_grads(grads: &mut Gradients, vars: &[Var]) -> Vec<Matrix> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

//! LSTM cell and (bi)directional sequence runners.
//!
//! Gate blocks are stacked in the order `[input | forget | output | cell]`
//! so one `[4H × in]` matrix product produces all pre-activations.

use rand::Rng;

use super::matrix::Matrix;
use super::tape::{sigmoid, Tape, Var};
use super::{NnError, Parameters, VarCursor};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[4H × input_dim]`
    pub w: Matrix,
    /// `[4H × H]`
    pub u: Matrix,
    /// `[1 × 4H]`
    pub b: Matrix,
}

/// Which gate block of the stacked matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Cell = 3,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: Matrix::zeros(4 * hidden_dim, input_dim),
            u: Matrix::zeros(4 * hidden_dim, hidden_dim),
            b: Matrix::zeros(1, 4 * hidden_dim),
        }
    }

    /// Uniform `±1/√fan_in` weights, forget bias 1, other biases 0.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        let wb = 1.0 / (input_dim.max(1) as f64).sqrt();
        let ub = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        p.w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-wb..wb));
        p.u.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-ub..ub));
        let h = hidden_dim;
        p.b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        p
    }

    /// Row range of one gate inside `w`, `u` and `b`.
    pub fn gate_rows(&self, gate: Gate) -> std::ops::Range<usize> {
        let g = gate as usize;
        g * self.hidden_dim..(g + 1) * self.hidden_dim
    }

    /// One recurrence step on plain vectors.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let hd = self.hidden_dim;
        if x.len() != self.input_dim {
            return Err(NnError::DimensionMismatch {
                what: "lstm input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if h_prev.len() != hd || c_prev.len() != hd {
            return Err(NnError::DimensionMismatch {
                what: "lstm state",
                expected: hd,
                got: if h_prev.len() != hd { h_prev.len() } else { c_prev.len() },
            });
        }
        let (h, c) = self.step_batch(
            &Matrix::row_vector(x.to_vec()),
            &Matrix::row_vector(h_prev.to_vec()),
            &Matrix::row_vector(c_prev.to_vec()),
        );
        Ok((h.into_vec(), c.into_vec()))
    }

    /// One step for a batch: `x` is `[B × input_dim]`, states `[B × H]`.
    pub fn step_batch(&self, x: &Matrix, h: &Matrix, c: &Matrix) -> (Matrix, Matrix) {
        let hd = self.hidden_dim;
        let mut z = x.matmul_t(&self.w);
        super::matrix::matmul_t_acc(h, &self.u, &mut z);
        let bias = self.b.data();
        let rows = x.rows();
        let mut h_next = Matrix::zeros(rows, hd);
        let mut c_next = Matrix::zeros(rows, hd);
        for r in 0..rows {
            let zr = z.row(r);
            let cp = c.row(r);
            for k in 0..hd {
                let i = sigmoid(zr[k] + bias[k]);
                let f = sigmoid(zr[hd + k] + bias[hd + k]);
                let o = sigmoid(zr[2 * hd + k] + bias[2 * hd + k]);
                let g = (zr[3 * hd + k] + bias[3 * hd + k]).tanh();
                let cv = f * cp[k] + i * g;
                c_next.set(r, k, cv);
                h_next.set(r, k, o * cv.tanh());
            }
        }
        (h_next, c_next)
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w: tape.param(self.w.clone()),
            u: tape.param(self.u.clone()),
            b: tape.param(self.b.clone()),
            hidden_dim: self.hidden_dim,
        }
    }
}

impl Parameters for LstmCellParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.u, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }

    fn tensor_names(&self) -> Vec<String> {
        vec!["w".into(), "u".into(), "b".into()]
    }
}

/// Tape handles for one cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub hidden_dim: usize,
}

impl LstmVars {
    pub(crate) fn from_cursor(cur: &mut VarCursor<'_>, hidden_dim: usize) -> Self {
        Self {
            w: cur.next(),
            u: cur.next(),
            b: cur.next(),
            hidden_dim,
        }
    }

    /// One batched step; returns `(h, c)`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> (Var, Var) {
        let gates = tape.lstm_gates(x, h, self.w, self.u, self.b);
        let c_next = tape.lstm_cell(gates, c);
        let h_next = tape.lstm_hidden(gates, c_next);
        (h_next, c_next)
    }

    /// Runs the cell over `inputs` in order; returns every hidden state and
    /// the final `(h, c)`.
    pub fn run(&self, tape: &mut Tape, inputs: &[Var], h0: Var, c0: Var) -> (Vec<Var>, Var, Var) {
        let (mut h, mut c) = (h0, c0);
        let mut hs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let (hn, cn) = self.step(tape, x, h, c);
            h = hn;
            c = cn;
            hs.push(h);
        }
        (hs, h, c)
    }
}

/// Output of [`lstm_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrajectory {
    /// `[T × H]`
    pub hidden: Matrix,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Iterates [`LstmCellParams::step`] over the rows of `sequence`.
pub fn lstm_forward(
    params: &LstmCellParams,
    sequence: &Matrix,
    h0: &[f64],
    c0: &[f64],
) -> Result<LstmTrajectory, NnError> {
    if sequence.rows() == 0 {
        return Err(NnError::EmptySequence);
    }
    let mut hidden = Matrix::zeros(sequence.rows(), params.hidden_dim);
    let (mut h, mut c) = (h0.to_vec(), c0.to_vec());
    for t in 0..sequence.rows() {
        let (hn, cn) = params.step(sequence.row(t), &h, &c)?;
        hidden.row_mut(t).copy_from_slice(&hn);
        h = hn;
        c = cn;
    }
    Ok(LstmTrajectory { hidden, h, c })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

impl BiLstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            forward: LstmCellParams::zeros(input_dim, hidden_dim),
            backward: LstmCellParams::zeros(input_dim, hidden_dim),
        }
    }

    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        Self {
            forward: LstmCellParams::init(input_dim, hidden_dim, rng),
            backward: LstmCellParams::init(input_dim, hidden_dim, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim
    }
}

impl Parameters for BiLstmParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.forward.tensors();
        v.extend(self.backward.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.forward.tensors_mut();
        v.extend(self.backward.tensors_mut());
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.forward.tensor_names().into_iter().map(|n| format!("fwd.{n}")).collect();
        v.extend(self.backward.tensor_names().into_iter().map(|n| format!("bwd.{n}")));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmOutput {
    /// `[T × 2H]`; row `t` is `forward_t ‖ backward_{T−1−t}`.
    pub states: Matrix,
    /// `forward_final ‖ backward_final`
    pub summary: Vec<f64>,
}

/// Forward direction reads the sequence in order, backward direction reads
/// it reversed; both start from zero state.
pub fn bilstm_forward(params: &BiLstmParams, sequence: &Matrix) -> Result<BiLstmOutput, NnError> {
    let t_len = sequence.rows();
    if t_len == 0 {
        return Err(NnError::EmptySequence);
    }
    let hd = params.hidden_dim();
    let zeros = vec![0.0; hd];
    let fwd = lstm_forward(&params.forward, sequence, &zeros, &zeros)?;
    let reversed = Matrix::from_fn(t_len, sequence.cols(), |r, c| sequence.get(t_len - 1 - r, c));
    let bwd = lstm_forward(&params.backward, &reversed, &zeros, &zeros)?;
    let mut states = Matrix::zeros(t_len, 2 * hd);
    for t in 0..t_len {
        let row = states.row_mut(t);
        row[..hd].copy_from_slice(fwd.hidden.row(t));
        row[hd..].copy_from_slice(bwd.hidden.row(t_len - 1 - t));
    }
    let mut summary = fwd.h;
    summary.extend(bwd.h);
    Ok(BiLstmOutput { states, summary })
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
}

impl BiLstmVars {
    pub(crate) fn from_cursor(cur: &mut VarCursor<'_>, hidden_dim: usize) -> Self {
        let forward = LstmVars::from_cursor(cur, hidden_dim);
        let backward = LstmVars::from_cursor(cur, hidden_dim);
        Self { forward, backward }
    }

    /// Batched bidirectional pass; returns the final summary
    /// `[B × 2H]` (forward final ‖ backward final).
    pub fn summary(&self, tape: &mut Tape, inputs: &[Var], batch: usize) -> Var {
        let hd = self.forward.hidden_dim;
        let z = tape.constant(Matrix::zeros(batch, hd));
        let (_, hf, _) = self.forward.run(tape, inputs, z, z);
        let rev: Vec<Var> = inputs.iter().rev().copied().collect();
        let (_, hb, _) = self.backward.run(tape, &rev, z, z);
        tape.concat_cols(&[hf, hb])
    }
}

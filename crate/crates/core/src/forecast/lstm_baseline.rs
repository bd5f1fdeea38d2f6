//! Two-layer stacked LSTM with a dense head emitting all `m·C` outputs at
//! once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::train::{LossNodes, TrainConfig, TrainableModel};
use super::{check_inputs, Batch, ForecastError, Forecaster};
use crate::nn::{LstmCellParams, LstmVars, Matrix, Parameters, Tape, Var, VarCursor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmBaselineArch {
    pub channels: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Head predicts the change from the last observation.
    #[serde(default)]
    pub residual: bool,
}

impl Default for LstmBaselineArch {
    fn default() -> Self {
        Self {
            channels: 6,
            history_len: 144,
            horizon: 6,
            hidden: 64,
            embed_dim: 4,
            residual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmBaseline {
    pub arch: LstmBaselineArch,
    pub layer1: LstmCellParams,
    pub layer2: LstmCellParams,
    pub embedding: Matrix,
    /// `[(m·C) × (H + embed_dim)]`; output column `t·C + k` is step `t`,
    /// channel `k`.
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl LstmBaseline {
    pub fn zeros(arch: LstmBaselineArch) -> Self {
        let out = arch.horizon * arch.channels;
        Self {
            arch,
            layer1: LstmCellParams::zeros(arch.channels, arch.hidden),
            layer2: LstmCellParams::zeros(arch.hidden, arch.hidden),
            embedding: Matrix::zeros(7, arch.embed_dim),
            head_w: Matrix::zeros(out, arch.hidden + arch.embed_dim),
            head_b: Matrix::zeros(1, out),
        }
    }

    pub fn init<R: Rng>(arch: LstmBaselineArch, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        p.layer1 = LstmCellParams::init(arch.channels, arch.hidden, rng);
        p.layer2 = LstmCellParams::init(arch.hidden, arch.hidden, rng);
        p.embedding = Matrix::from_fn(7, arch.embed_dim, |_, _| rng.random_range(-0.5..0.5));
        let bound = 1.0 / ((arch.hidden + arch.embed_dim) as f64).sqrt();
        let (r, c) = p.head_w.shape();
        p.head_w = Matrix::from_fn(r, c, |_, _| rng.random_range(-bound..bound));
        p
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ForecastError> {
        if batch.history_len() != self.arch.history_len || batch.channels != self.arch.channels {
            return Err(ForecastError::ShapeMismatch(format!(
                "batch is {}x{}, model expects {}x{}",
                batch.history_len(),
                batch.channels,
                self.arch.history_len,
                self.arch.channels
            )));
        }
        Ok(())
    }

    /// `[B × m·C]` normalized forecasts.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Matrix, ForecastError> {
        self.check_batch(batch)?;
        let (b, hd) = (batch.size, self.arch.hidden);
        let (mut h1, mut c1) = (Matrix::zeros(b, hd), Matrix::zeros(b, hd));
        let (mut h2, mut c2) = (Matrix::zeros(b, hd), Matrix::zeros(b, hd));
        for x in &batch.inputs {
            (h1, c1) = self.layer1.step_batch(x, &h1, &c1);
            (h2, c2) = self.layer2.step_batch(&h1, &h2, &c2);
        }
        let emb = Matrix::from_fn(b, self.arch.embed_dim, |r, k| self.embedding.get(batch.day_of_week[r], k));
        let mut out = Matrix::concat_cols(&[&h2, &emb]).linear(&self.head_w, &self.head_b);
        if self.arch.residual {
            out.add_assign(&self.last_repeated(batch));
        }
        Ok(out)
    }

    fn last_repeated(&self, batch: &Batch) -> Matrix {
        let last = &batch.inputs[self.arch.history_len - 1];
        let c = self.arch.channels;
        Matrix::from_fn(batch.size, self.arch.horizon * c, |r, j| last.get(r, j % c))
    }
}

impl Parameters for LstmBaseline {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.layer1.tensors();
        v.extend(self.layer2.tensors());
        v.extend([&self.embedding, &self.head_w, &self.head_b]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.layer1.tensors_mut();
        v.extend(self.layer2.tensors_mut());
        v.extend([&mut self.embedding, &mut self.head_w, &mut self.head_b]);
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.layer1.tensor_names().into_iter().map(|n| format!("layer1.{n}")).collect();
        v.extend(self.layer2.tensor_names().into_iter().map(|n| format!("layer2.{n}")));
        v.extend(["embedding", "head.w", "head.b"].map(String::from));
        v
    }
}

impl Forecaster for LstmBaseline {
    fn name(&self) -> &str {
        "lstm"
    }

    fn history_len(&self) -> usize {
        self.arch.history_len
    }

    fn horizon(&self) -> usize {
        self.arch.horizon
    }

    fn num_channels(&self) -> usize {
        self.arch.channels
    }

    fn forecast_normalized(&self, inputs: &[&[f64]], day_of_week: &[u8]) -> Result<Vec<Vec<f64>>, ForecastError> {
        check_inputs(self, inputs, day_of_week)?;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::from_windows(inputs, day_of_week, self.arch.history_len, self.arch.channels);
        let out = self.predict_batch(&batch)?;
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }
}

impl TrainableModel for LstmBaseline {
    fn loss_graph(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, cfg: &TrainConfig) -> LossNodes {
        let a = &self.arch;
        let mut cur = VarCursor::new(vars);
        let l1 = LstmVars::from_cursor(&mut cur, a.hidden);
        let l2 = LstmVars::from_cursor(&mut cur, a.hidden);
        let (emb_t, head_w, head_b) = (cur.next(), cur.next(), cur.next());
        let b = batch.size;
        let z = tape.constant(Matrix::zeros(b, a.hidden));
        let (mut h1, mut c1, mut h2, mut c2) = (z, z, z, z);
        for x in &batch.inputs {
            let xv = tape.constant(x.clone());
            (h1, c1) = l1.step(tape, xv, h1, c1);
            (h2, c2) = l2.step(tape, h1, h2, c2);
        }
        let emb = tape.gather_rows(emb_t, &batch.day_of_week);
        let feat = tape.concat_cols(&[h2, emb]);
        let mut out = tape.linear(feat, head_w, head_b);
        if a.residual {
            let last = tape.constant(self.last_repeated(batch));
            out = tape.add(last, out);
        }
        let c = a.channels;
        let target = Matrix::from_fn(b, a.horizon * c, |r, j| batch.targets[j / c].get(r, j % c));
        let forecast = tape.mse(out, target);
        let total = tape.weighted_sum(&[(forecast, cfg.lambda_forecast)]);
        LossNodes {
            total,
            recon: None,
            type_ce: None,
            forecast,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind_all;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> LstmBaselineArch {
        LstmBaselineArch {
            channels: 2,
            history_len: 4,
            horizon: 3,
            hidden: 3,
            embed_dim: 2,
            residual: false,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, a: &LstmBaselineArch, b: usize) -> Batch {
        let ws: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..a.history_len * a.channels).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = ws.iter().map(|w| w.as_slice()).collect();
        let dows: Vec<u8> = (0..b).map(|i| i as u8 % 7).collect();
        let mut batch = Batch::from_windows(&refs, &dows, a.history_len, a.channels);
        batch.targets = (0..a.horizon)
            .map(|_| Matrix::from_fn(b, a.channels, |_, _| rng.random_range(0.0..1.0)))
            .collect();
        batch
    }

    #[test]
    fn zero_params_forecast_zero() {
        let p = LstmBaseline::zeros(arch());
        let w = [0.7; 8];
        assert_eq!(p.forecast_normalized(&[&w[..]], &[0]).unwrap()[0], vec![0.0; 6]);
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let a = LstmBaselineArch {
            residual: true,
            ..arch()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmBaseline::init(a, &mut rng);
        let b = batch(&mut rng, &a, 3);
        let plain = p.predict_batch(&b).unwrap();
        let mut tape = Tape::new();
        let vars = bind_all(&mut tape, &p);
        let loss = p.loss_graph(&mut tape, &vars, &b, &TrainConfig::default());
        let c = a.channels;
        let target = Matrix::from_fn(3, a.horizon * c, |r, j| b.targets[j / c].get(r, j % c));
        let expected = plain
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / plain.len() as f64;
        assert!((tape.scalar(loss.forecast) - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_passes_gradient_check() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let p = LstmBaseline::init(arch(), &mut rng);
            let b = batch(&mut rng, &arch(), 2);
            let err = crate::forecast::seq2seq::tests::gradient_error(&p, &b, &TrainConfig::default());
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}

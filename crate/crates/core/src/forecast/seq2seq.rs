//! Bi-LSTM encoder, reverse-reconstructing decoder with a channel-type
//! head, and an autoregressive LSTM generator.
//!
//! The encoder summary (forward final ‖ backward final ‖ day-of-week
//! embedding) passes through a `tanh` bridge that yields the initial
//! `(h, c)` of both the decoder and the generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::train::{LossNodes, TrainConfig, TrainableModel};
use super::{check_inputs, Batch, ForecastError, Forecaster};
use crate::nn::{BiLstmParams, BiLstmVars, LstmCellParams, LstmVars, Matrix, Parameters, Tape, Var, VarCursor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seq2SeqArch {
    pub channels: usize,
    pub history_len: usize,
    pub horizon: usize,
    /// Per direction.
    pub encoder_hidden: usize,
    /// Shared by decoder and generator.
    pub decoder_hidden: usize,
    pub embed_dim: usize,
    /// Generator head predicts the change from the previous step's value
    /// (the last observation for step 0) instead of the level.
    #[serde(default)]
    pub residual: bool,
}

impl Default for Seq2SeqArch {
    fn default() -> Self {
        Self {
            channels: 6,
            history_len: 144,
            horizon: 6,
            encoder_hidden: 64,
            decoder_hidden: 128,
            embed_dim: 4,
            residual: false,
        }
    }
}

impl Seq2SeqArch {
    fn summary_dim(&self) -> usize {
        2 * self.encoder_hidden + self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqParams {
    pub arch: Seq2SeqArch,
    pub encoder: BiLstmParams,
    /// `[7 × embed_dim]`, row = day of week (Monday = 0).
    pub embedding: Matrix,
    /// `[4·Hd × (2·He + embed_dim)]` → `dec_h ‖ dec_c ‖ gen_h ‖ gen_c`.
    pub bridge_w: Matrix,
    pub bridge_b: Matrix,
    pub decoder: LstmCellParams,
    pub decoder_start: Matrix,
    pub recon_w: Matrix,
    pub recon_b: Matrix,
    /// Class weights of the channel-type head, `[C × Hd]`.
    pub type_w: Matrix,
    pub type_b: Matrix,
    pub generator: LstmCellParams,
    pub generator_start: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl Seq2SeqParams {
    pub fn zeros(arch: Seq2SeqArch) -> Self {
        let (c, he, hd, de) = (arch.channels, arch.encoder_hidden, arch.decoder_hidden, arch.embed_dim);
        Self {
            arch,
            encoder: BiLstmParams::zeros(c, he),
            embedding: Matrix::zeros(7, de),
            bridge_w: Matrix::zeros(4 * hd, arch.summary_dim()),
            bridge_b: Matrix::zeros(1, 4 * hd),
            decoder: LstmCellParams::zeros(c, hd),
            decoder_start: Matrix::zeros(1, c),
            recon_w: Matrix::zeros(c, hd),
            recon_b: Matrix::zeros(1, c),
            type_w: Matrix::zeros(c, hd),
            type_b: Matrix::zeros(1, c),
            generator: LstmCellParams::zeros(c, hd),
            generator_start: Matrix::zeros(1, c),
            head_w: Matrix::zeros(c, hd),
            head_b: Matrix::zeros(1, c),
        }
    }

    pub fn init<R: Rng>(arch: Seq2SeqArch, rng: &mut R) -> Self {
        let (c, he, hd, de) = (arch.channels, arch.encoder_hidden, arch.decoder_hidden, arch.embed_dim);
        let head_bound = 1.0 / (hd as f64).sqrt();
        let bridge_bound = 1.0 / (arch.summary_dim() as f64).sqrt();
        Self {
            arch,
            encoder: BiLstmParams::init(c, he, rng),
            embedding: uniform(7, de, 0.5, rng),
            bridge_w: uniform(4 * hd, arch.summary_dim(), bridge_bound, rng),
            bridge_b: Matrix::zeros(1, 4 * hd),
            decoder: LstmCellParams::init(c, hd, rng),
            decoder_start: Matrix::zeros(1, c),
            recon_w: uniform(c, hd, head_bound, rng),
            recon_b: Matrix::zeros(1, c),
            type_w: uniform(c, hd, head_bound, rng),
            type_b: Matrix::zeros(1, c),
            generator: LstmCellParams::init(c, hd, rng),
            generator_start: Matrix::zeros(1, c),
            head_w: uniform(c, hd, head_bound, rng),
            head_b: Matrix::zeros(1, c),
        }
    }
}

impl Parameters for Seq2SeqParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.encoder.tensors();
        v.extend([&self.embedding, &self.bridge_w, &self.bridge_b]);
        v.extend(self.decoder.tensors());
        v.extend([&self.decoder_start, &self.recon_w, &self.recon_b, &self.type_w, &self.type_b]);
        v.extend(self.generator.tensors());
        v.extend([&self.generator_start, &self.head_w, &self.head_b]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.encoder.tensors_mut();
        v.extend([&mut self.embedding, &mut self.bridge_w, &mut self.bridge_b]);
        v.extend(self.decoder.tensors_mut());
        v.extend([
            &mut self.decoder_start,
            &mut self.recon_w,
            &mut self.recon_b,
            &mut self.type_w,
            &mut self.type_b,
        ]);
        v.extend(self.generator.tensors_mut());
        v.extend([&mut self.generator_start, &mut self.head_w, &mut self.head_b]);
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.encoder.tensor_names().into_iter().map(|n| format!("encoder.{n}")).collect();
        v.extend(["embedding", "bridge.w", "bridge.b"].map(String::from));
        v.extend(self.decoder.tensor_names().into_iter().map(|n| format!("decoder.{n}")));
        v.extend(["decoder.start", "recon.w", "recon.b", "type.w", "type.b"].map(String::from));
        v.extend(self.generator.tensor_names().into_iter().map(|n| format!("generator.{n}")));
        v.extend(["generator.start", "head.w", "head.b"].map(String::from));
        v
    }
}

/// Encoder output for a batch; every matrix has one row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStates {
    /// `forward final ‖ backward final`, `[B × 2·He]`.
    pub summary: Matrix,
    /// `summary ‖ embedding`, the bridge input.
    pub conditioned: Matrix,
    pub dec_h: Matrix,
    pub dec_c: Matrix,
    pub gen_h: Matrix,
    pub gen_c: Matrix,
}

/// Decoder output: reconstructions in decoding order (step `t` targets
/// history row `n−1−t`) and `[B·C × C]` channel-type logits, row
/// `b·C + k` classifying stream `k` of window `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub steps: Vec<Matrix>,
    pub type_logits: Matrix,
}

impl Seq2SeqParams {
    fn check_batch(&self, batch: &Batch) -> Result<(), ForecastError> {
        let a = &self.arch;
        if batch.history_len() != a.history_len || batch.channels != a.channels {
            return Err(ForecastError::ShapeMismatch(format!(
                "batch is {}x{}, model expects {}x{}",
                batch.history_len(),
                batch.channels,
                a.history_len,
                a.channels
            )));
        }
        if batch.day_of_week.iter().any(|&d| d >= 7) {
            return Err(ForecastError::ShapeMismatch("day of week out of range".into()));
        }
        Ok(())
    }

    pub fn encode_batch(&self, batch: &Batch) -> Result<EncodedStates, ForecastError> {
        self.check_batch(batch)?;
        let (b, he, hd) = (batch.size, self.arch.encoder_hidden, self.arch.decoder_hidden);
        let run = |cell: &LstmCellParams, order: &mut dyn Iterator<Item = &Matrix>| {
            let (mut h, mut c) = (Matrix::zeros(b, he), Matrix::zeros(b, he));
            for x in order {
                let (hn, cn) = cell.step_batch(x, &h, &c);
                h = hn;
                c = cn;
            }
            h
        };
        let hf = run(&self.encoder.forward, &mut batch.inputs.iter());
        let hb = run(&self.encoder.backward, &mut batch.inputs.iter().rev());
        let summary = Matrix::concat_cols(&[&hf, &hb]);
        let emb = Matrix::from_fn(b, self.arch.embed_dim, |r, k| self.embedding.get(batch.day_of_week[r], k));
        let conditioned = Matrix::concat_cols(&[&summary, &emb]);
        let z = conditioned.linear(&self.bridge_w, &self.bridge_b).map(f64::tanh);
        Ok(EncodedStates {
            dec_h: z.slice_cols(0, hd),
            dec_c: z.slice_cols(hd, hd),
            gen_h: z.slice_cols(2 * hd, hd),
            gen_c: z.slice_cols(3 * hd, hd),
            summary,
            conditioned,
        })
    }

    /// Single-window encoding; `window` is `[n × C]`.
    pub fn encode(&self, window: &Matrix, day_of_week: u8) -> Result<EncodedStates, ForecastError> {
        let batch = Batch::from_windows(&[window.data()], &[day_of_week], window.rows(), window.cols());
        self.encode_batch(&batch)
    }

    /// Teacher-forced reverse reconstruction: step 0 reads the start token,
    /// step `t ≥ 1` reads the true row `n−t` (the previous step's target).
    pub fn decode_reconstruct(&self, states: &EncodedStates, batch: &Batch) -> Result<Reconstruction, ForecastError> {
        self.check_batch(batch)?;
        let (b, c, n, hd) = (batch.size, self.arch.channels, self.arch.history_len, self.arch.decoder_hidden);
        let start = Matrix::from_fn(b, c, |_, k| self.decoder_start.get(0, k));
        let (mut h, mut cell) = (states.dec_h.clone(), states.dec_c.clone());
        let mut steps = Vec::with_capacity(n);
        let mut feat = Matrix::zeros(b * c, hd);
        for t in 0..n {
            let x = if t == 0 { &start } else { &batch.inputs[n - t] };
            let (hn, cn) = self.decoder.step_batch(x, &h, &cell);
            h = hn;
            cell = cn;
            let r = h.linear(&self.recon_w, &self.recon_b);
            for bi in 0..b {
                for k in 0..c {
                    let rk = r.get(bi, k);
                    for (f, hv) in feat.row_mut(bi * c + k).iter_mut().zip(h.row(bi)) {
                        *f += rk * hv;
                    }
                }
            }
            steps.push(r);
        }
        feat.scale_in_place(1.0 / n as f64);
        let type_logits = feat.linear(&self.type_w, &self.type_b);
        Ok(Reconstruction { steps, type_logits })
    }

    /// Free-running rollout from the generator's initial state; step 0
    /// reads the learned start token, step `t` reads step `t−1`'s output.
    /// Returns normalized `[B × C]` outputs per horizon step.
    pub fn generate(&self, states: &EncodedStates, batch: &Batch) -> Result<Vec<Matrix>, ForecastError> {
        self.check_batch(batch)?;
        let (b, c) = (batch.size, self.arch.channels);
        let mut x = Matrix::from_fn(b, c, |_, k| self.generator_start.get(0, k));
        let mut base = batch.inputs[self.arch.history_len - 1].clone();
        let (mut h, mut cell) = (states.gen_h.clone(), states.gen_c.clone());
        let mut out = Vec::with_capacity(self.arch.horizon);
        for _ in 0..self.arch.horizon {
            let (hn, cn) = self.generator.step_batch(&x, &h, &cell);
            h = hn;
            cell = cn;
            let mut y = h.linear(&self.head_w, &self.head_b);
            if self.arch.residual {
                y.add_assign(&base);
                base = y.clone();
            }
            x = y.clone();
            out.push(y);
        }
        Ok(out)
    }

    /// Fraction of channel streams whose type logits rank the true channel
    /// first.
    pub fn type_accuracy(&self, batch: &Batch) -> Result<f64, ForecastError> {
        let states = self.encode_batch(batch)?;
        let rec = self.decode_reconstruct(&states, batch)?;
        let c = self.arch.channels;
        let logits = &rec.type_logits;
        let mut hits = 0;
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let best = (0..c).fold(0, |bi, k| if row[k] > row[bi] { k } else { bi });
            hits += usize::from(best == r % c);
        }
        Ok(hits as f64 / logits.rows().max(1) as f64)
    }
}

impl Forecaster for Seq2SeqParams {
    fn name(&self) -> &str {
        "seq2seq"
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
        let states = self.encode_batch(&batch)?;
        Ok(Batch::unstack(&self.generate(&states, &batch)?))
    }
}

/// Tape handles in `tensors()` order.
struct Seq2SeqVars {
    encoder: BiLstmVars,
    embedding: Var,
    bridge_w: Var,
    bridge_b: Var,
    decoder: LstmVars,
    decoder_start: Var,
    recon_w: Var,
    recon_b: Var,
    type_w: Var,
    type_b: Var,
    generator: LstmVars,
    generator_start: Var,
    head_w: Var,
    head_b: Var,
}

impl Seq2SeqVars {
    fn new(vars: &[Var], arch: &Seq2SeqArch) -> Self {
        let mut cur = VarCursor::new(vars);
        let encoder = BiLstmVars::from_cursor(&mut cur, arch.encoder_hidden);
        let (embedding, bridge_w, bridge_b) = (cur.next(), cur.next(), cur.next());
        let decoder = LstmVars::from_cursor(&mut cur, arch.decoder_hidden);
        let (decoder_start, recon_w, recon_b, type_w, type_b) =
            (cur.next(), cur.next(), cur.next(), cur.next(), cur.next());
        let generator = LstmVars::from_cursor(&mut cur, arch.decoder_hidden);
        let (generator_start, head_w, head_b) = (cur.next(), cur.next(), cur.next());
        assert_eq!(cur.remaining(), 0, "seq2seq binding consumed the wrong number of tensors");
        Self {
            encoder,
            embedding,
            bridge_w,
            bridge_b,
            decoder,
            decoder_start,
            recon_w,
            recon_b,
            type_w,
            type_b,
            generator,
            generator_start,
            head_w,
            head_b,
        }
    }
}

/// Nodes of one recorded forward pass; the per-step nodes are read by the
/// tests.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct Seq2SeqGraph {
    pub loss: LossNodes,
    pub forecasts: Vec<Var>,
    pub reconstructions: Vec<Var>,
    pub type_logits: Option<Var>,
}

impl Seq2SeqParams {
    /// Records the full training graph. The decoder branch is skipped when
    /// both of its loss weights are zero.
    pub(crate) fn record(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, cfg: &TrainConfig) -> Seq2SeqGraph {
        let a = &self.arch;
        let v = Seq2SeqVars::new(vars, a);
        let (b, c, n, m, hd) = (batch.size, a.channels, a.history_len, a.horizon, a.decoder_hidden);
        let xs: Vec<Var> = batch.inputs.iter().map(|x| tape.constant(x.clone())).collect();

        let summary = v.encoder.summary(tape, &xs, b);
        let emb = tape.gather_rows(v.embedding, &batch.day_of_week);
        let cond = tape.concat_cols(&[summary, emb]);
        let z = tape.linear(cond, v.bridge_w, v.bridge_b);
        let z = tape.tanh(z);
        let dec_h = tape.slice_cols(z, 0, hd);
        let dec_c = tape.slice_cols(z, hd, hd);
        let gen_h = tape.slice_cols(z, 2 * hd, hd);
        let gen_c = tape.slice_cols(z, 3 * hd, hd);

        let mut reconstructions = Vec::new();
        let mut recon = None;
        let mut type_ce = None;
        let mut type_logits = None;
        if cfg.lambda_recon > 0.0 || cfg.lambda_type > 0.0 {
            let start = tape.broadcast_rows(v.decoder_start, b);
            let (mut h, mut cell) = (dec_h, dec_c);
            let mut terms = Vec::with_capacity(n);
            let mut feat: Option<Var> = None;
            for t in 0..n {
                let x = if t == 0 { start } else { xs[n - t] };
                let (hn, cn) = v.decoder.step(tape, x, h, cell);
                h = hn;
                cell = cn;
                let r = tape.linear(h, v.recon_w, v.recon_b);
                terms.push((tape.mse(r, batch.inputs[n - 1 - t].clone()), 1.0 / n as f64));
                let o = tape.outer_rows(r, h);
                feat = Some(match feat {
                    None => o,
                    Some(f) => tape.add(f, o),
                });
                reconstructions.push(r);
            }
            recon = Some(tape.weighted_sum(&terms));
            let feat = tape.scale(feat.expect("history_len >= 1"), 1.0 / n as f64);
            let feat = tape.reshape(feat, b * c, hd);
            let logits = tape.linear(feat, v.type_w, v.type_b);
            let labels: Vec<usize> = (0..b * c).map(|r| r % c).collect();
            type_ce = Some(tape.softmax_cross_entropy(logits, &labels));
            type_logits = Some(logits);
        }

        let mut x = tape.broadcast_rows(v.generator_start, b);
        let mut base = xs[n - 1];
        let (mut h, mut cell) = (gen_h, gen_c);
        let mut forecasts = Vec::with_capacity(m);
        let mut terms = Vec::with_capacity(m);
        for t in 0..m {
            let (hn, cn) = v.generator.step(tape, x, h, cell);
            h = hn;
            cell = cn;
            let mut y = tape.linear(h, v.head_w, v.head_b);
            if a.residual {
                y = tape.add(base, y);
                base = y;
            }
            if let Some(target) = batch.targets.get(t) {
                terms.push((tape.mse(y, target.clone()), 1.0 / m as f64));
            }
            x = match (cfg.teacher_forcing, batch.targets.get(t)) {
                (true, Some(target)) => tape.constant(target.clone()),
                _ => y,
            };
            forecasts.push(y);
        }
        let forecast = tape.weighted_sum(&terms);
        let mut total_terms = vec![(forecast, cfg.lambda_forecast)];
        if let Some(r) = recon {
            total_terms.push((r, cfg.lambda_recon));
        }
        if let Some(t) = type_ce {
            total_terms.push((t, cfg.lambda_type));
        }
        let total = tape.weighted_sum(&total_terms);
        Seq2SeqGraph {
            loss: LossNodes {
                total,
                recon,
                type_ce,
                forecast,
            },
            forecasts,
            reconstructions,
            type_logits,
        }
    }
}

impl TrainableModel for Seq2SeqParams {
    fn loss_graph(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, cfg: &TrainConfig) -> LossNodes {
        self.record(tape, vars, batch, cfg).loss
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::{bilstm_forward, bind_all};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Seq2SeqArch {
        Seq2SeqArch {
            channels: 3,
            history_len: 5,
            horizon: 3,
            encoder_hidden: 4,
            decoder_hidden: 5,
            embed_dim: 2,
            residual: false,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, arch: &Seq2SeqArch, b: usize) -> Batch {
        let (n, m, c) = (arch.history_len, arch.horizon, arch.channels);
        let windows: Vec<Vec<f64>> = (0..b).map(|_| (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = windows.iter().map(|w| w.as_slice()).collect();
        let dows: Vec<u8> = (0..b).map(|_| rng.random_range(0..7)).collect();
        let mut batch = Batch::from_windows(&refs, &dows, n, c);
        batch.targets = (0..m).map(|_| Matrix::from_fn(b, c, |_, _| rng.random_range(0.0..1.0))).collect();
        batch
    }

    #[test]
    fn zero_params_give_zero_summary_and_zero_forecast() {
        let arch = small_arch();
        let p = Seq2SeqParams::zeros(arch);
        let window = Matrix::zeros(arch.history_len, arch.channels);
        let s = p.encode(&window, 2).unwrap();
        assert!(s.summary.data().iter().all(|&v| v == 0.0));
        assert!(s.gen_h.data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, &arch, 2);
        let fc = p.forecast_normalized(&[batch_window(&batch, 0).as_slice()], &[3]).unwrap();
        assert_eq!(fc[0], vec![0.0; arch.horizon * arch.channels]);
        // watt scale: channel minimum
        let norm = crate::timeseries::NormalizationParams {
            channels: vec!["a".into(), "b".into(), "c".into()],
            min: vec![10.0, 0.0, 5.0],
            max: vec![20.0, 1.0, 6.0],
        };
        assert_eq!(super::super::to_watts(&norm, &fc[0])[..3], [10.0, 0.0, 5.0]);
    }

    fn batch_window(batch: &Batch, r: usize) -> Vec<f64> {
        batch.inputs.iter().flat_map(|x| x.row(r).iter().copied()).collect()
    }

    #[test]
    fn day_of_week_changes_the_summary() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Seq2SeqParams::init(arch, &mut rng);
        let window = Matrix::from_fn(arch.history_len, arch.channels, |_, _| rng.random_range(0.0..1.0));
        let a = p.encode(&window, 0).unwrap();
        let b = p.encode(&window, 4).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_ne!(a.conditioned, b.conditioned);
        assert_ne!(a.gen_h, b.gen_h);
    }

    #[test]
    fn encode_matches_manual_composition() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Seq2SeqParams::init(arch, &mut rng);
        let window = Matrix::from_fn(arch.history_len, arch.channels, |_, _| rng.random_range(0.0..1.0));
        let got = p.encode(&window, 5).unwrap();
        let bi = bilstm_forward(&p.encoder, &window).unwrap();
        let mut cond = bi.summary.clone();
        cond.extend_from_slice(p.embedding.row(5));
        let hd = arch.decoder_hidden;
        for j in 0..4 * hd {
            let mut s = p.bridge_b.get(0, j);
            for (k, v) in cond.iter().enumerate() {
                s += p.bridge_w.get(j, k) * v;
            }
            let expected = s.tanh();
            let part = [&got.dec_h, &got.dec_c, &got.gen_h, &got.gen_c][j / hd];
            assert!((part.get(0, j % hd) - expected).abs() < 1e-12);
        }
        for (a, b) in got.summary.data().iter().zip(&bi.summary) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_targets_are_reversed_history() {
        // A graph with only the reconstruction loss and an identity-like
        // readout: the loss is zero exactly when step t reproduces row n−1−t.
        let arch = Seq2SeqArch {
            history_len: 3,
            ..small_arch()
        };
        let p = Seq2SeqParams::zeros(arch);
        let window: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut batch = Batch::from_windows(&[window.as_slice()], &[0], 3, 3);
        batch.targets = vec![Matrix::zeros(1, 3); arch.horizon];
        let cfg = TrainConfig {
            lambda_recon: 1.0,
            lambda_type: 0.0,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let vars = bind_all(&mut tape, &p);
        let g = p.record(&mut tape, &vars, &batch, &cfg);
        // zero decoder outputs: recon loss is the mean square of the
        // reversed targets, which equals the mean square of the window.
        let expected = window.iter().map(|v| v * v).sum::<f64>() / 9.0;
        assert!((tape.scalar(g.loss.recon.unwrap()) - expected).abs() < 1e-12);
        // the mse target of step 0 is the last history row [6, 7, 8]
        let states = p.encode_batch(&batch).unwrap();
        let rec = p.decode_reconstruct(&states, &batch).unwrap();
        assert_eq!(rec.steps.len(), 3);
        let order: Vec<usize> = (0..3).map(|t| 3 - 1 - t).collect();
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Seq2SeqParams::init(arch, &mut rng);
        let batch = random_batch(&mut rng, &arch, 2);
        let states = p.encode_batch(&batch).unwrap();
        let rec = p.decode_reconstruct(&states, &batch).unwrap();
        let mut tape = Tape::new();
        let own: Vec<Var> = rec.steps.iter().map(|s| tape.constant(s.clone())).collect();
        for (t, &v) in own.iter().enumerate() {
            let l = tape.mse(v, rec.steps[t].clone());
            assert_eq!(tape.scalar(l), 0.0);
        }
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let arch = Seq2SeqArch {
            residual: true,
            ..small_arch()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Seq2SeqParams::init(arch, &mut rng);
        let batch = random_batch(&mut rng, &arch, 3);
        let cfg = TrainConfig {
            teacher_forcing: false,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let vars = bind_all(&mut tape, &p);
        let g = p.record(&mut tape, &vars, &batch, &cfg);
        let states = p.encode_batch(&batch).unwrap();
        let plain = p.generate(&states, &batch).unwrap();
        for (v, m) in g.forecasts.iter().zip(&plain) {
            for (a, b) in tape.value(*v).data().iter().zip(m.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let rec = p.decode_reconstruct(&states, &batch).unwrap();
        for (v, m) in g.reconstructions.iter().zip(&rec.steps) {
            for (a, b) in tape.value(*v).data().iter().zip(m.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let logits = tape.value(g.type_logits.unwrap());
        for (a, b) in logits.data().iter().zip(rec.type_logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_zero_params_repeat_last_observation() {
        let arch = Seq2SeqArch {
            residual: true,
            ..small_arch()
        };
        let p = Seq2SeqParams::zeros(arch);
        let window: Vec<f64> = (0..15).map(|v| v as f64 / 15.0).collect();
        let fc = p.forecast_normalized(&[window.as_slice()], &[0]).unwrap();
        assert_eq!(fc[0], window[12..].repeat(3));
    }

    #[test]
    fn single_step_horizon_is_one_cell_step_plus_head() {
        let arch = Seq2SeqArch {
            horizon: 1,
            ..small_arch()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Seq2SeqParams::init(arch, &mut rng);
        let batch = random_batch(&mut rng, &arch, 1);
        let states = p.encode_batch(&batch).unwrap();
        let (h, _) = p
            .generator
            .step(p.generator_start.data(), states.gen_h.data(), states.gen_c.data())
            .unwrap();
        let expected = Matrix::row_vector(h).linear(&p.head_w, &p.head_b);
        let got = p.generate(&states, &batch).unwrap();
        assert_eq!(got.len(), 1);
        for (a, b) in got[0].data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn permute_params(p: &Seq2SeqParams, perm: &[usize]) -> Seq2SeqParams {
        // perm[new] = old
        let mut q = p.clone();
        let cols = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, k| m.get(r, perm[k]));
        let rows = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, k| m.get(perm[r], k));
        q.encoder.forward.w = cols(&p.encoder.forward.w);
        q.encoder.backward.w = cols(&p.encoder.backward.w);
        q.decoder.w = cols(&p.decoder.w);
        q.generator.w = cols(&p.generator.w);
        q.decoder_start = cols(&p.decoder_start);
        q.generator_start = cols(&p.generator_start);
        q.recon_w = rows(&p.recon_w);
        q.recon_b = cols(&p.recon_b);
        q.type_w = rows(&p.type_w);
        q.type_b = cols(&p.type_b);
        q.head_w = rows(&p.head_w);
        q.head_b = cols(&p.head_b);
        q
    }

    #[test]
    fn channel_permutation_equivariance() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Seq2SeqParams::init(arch, &mut rng);
        for m in [&mut p.decoder_start, &mut p.generator_start, &mut p.head_b, &mut p.recon_b] {
            m.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let perm = [2usize, 0, 1];
        let q = permute_params(&p, &perm);
        let c = arch.channels;
        let window: Vec<f64> = (0..arch.history_len * c).map(|_| rng.random_range(0.0..1.0)).collect();
        let permuted: Vec<f64> = (0..window.len()).map(|i| window[i / c * c + perm[i % c]]).collect();
        let a = p.forecast_normalized(&[window.as_slice()], &[1]).unwrap();
        let b = q.forecast_normalized(&[permuted.as_slice()], &[1]).unwrap();
        for t in 0..arch.horizon {
            for k in 0..c {
                assert!((b[0][t * c + k] - a[0][t * c + perm[k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repeated_calls_are_identical() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Seq2SeqParams::init(arch, &mut rng);
        let window: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = p.forecast_normalized(&[window.as_slice()], &[2]).unwrap();
        let b = p.forecast_normalized(&[window.as_slice()], &[2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors_are_reported() {
        let p = Seq2SeqParams::zeros(small_arch());
        assert!(matches!(
            p.forecast_normalized(&[&[0.0; 4][..]], &[0]),
            Err(ForecastError::ShapeMismatch(_))
        ));
        assert!(matches!(
            p.forecast_normalized(&[&[0.0; 15][..]], &[7]),
            Err(ForecastError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn full_loss_passes_gradient_check() {
        let arch = Seq2SeqArch {
            channels: 2,
            history_len: 3,
            horizon: 2,
            encoder_hidden: 2,
            decoder_hidden: 3,
            embed_dim: 2,
            residual: false,
        };
        for seed in 0..20u64 {
            for &(tf, residual) in &[(true, false), (false, true)] {
                let arch = Seq2SeqArch { residual, ..arch };
                let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
                let p = Seq2SeqParams::init(arch, &mut rng);
                let batch = random_batch(&mut rng, &arch, 2);
                let cfg = TrainConfig {
                    teacher_forcing: tf,
                    ..TrainConfig::default()
                };
                let err = gradient_error(&p, &batch, &cfg);
                assert!(err < 1e-4, "seed {seed} tf {tf}: rel err {err}");
            }
        }
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over every parameter coordinate.
    pub(crate) fn gradient_error<M: TrainableModel>(p: &M, batch: &Batch, cfg: &TrainConfig) -> f64 {
        let loss_of = |q: &M| {
            let mut tape = Tape::new();
            let vars = bind_all(&mut tape, q);
            let l = q.loss_graph(&mut tape, &vars, batch, cfg);
            tape.scalar(l.total)
        };
        let mut tape = Tape::new();
        let vars = bind_all(&mut tape, p);
        let l = p.loss_graph(&mut tape, &vars, batch, cfg);
        let mut grads = tape.backward(l.total).unwrap();
        let analytic = crate::nn::collect_grads(&mut grads, &vars);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let count = p.tensors().len();
        for ti in 0..count {
            let len = p.tensors()[ti].len();
            for k in 0..len {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data_mut()[k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data_mut()[k] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = analytic[ti].data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

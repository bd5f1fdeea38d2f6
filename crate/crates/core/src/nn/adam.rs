use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "tensor {i}: state {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *pk -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_of_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &[(1, 3)]);
        for _ in 0..10 {
            adam.step(vec![&mut p], &[Matrix::zeros(1, 3)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        let g = Matrix::from_vec(1, 2, vec![3.0, -0.02]);
        let mut adam = AdamState::new(cfg, &[(1, 2)]);
        let mut last = p.clone();
        for _ in 0..2000 {
            adam.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
            let delta0 = p.get(0, 0) - last.get(0, 0);
            let delta1 = p.get(0, 1) - last.get(0, 1);
            last = p.clone();
            assert!(delta0 < 0.0 && delta1 > 0.0);
        }
        let d0 = adam_delta(&mut adam, &mut p, &g, 0);
        let d1 = adam_delta(&mut adam, &mut p, &g, 1);
        assert!((d0 + cfg.lr).abs() < 1e-6, "{d0}");
        assert!((d1 - cfg.lr).abs() < 1e-6, "{d1}");
    }

    fn adam_delta(adam: &mut AdamState, p: &mut Matrix, g: &Matrix, k: usize) -> f64 {
        let before = p.data()[k];
        adam.step(vec![p], std::slice::from_ref(g)).unwrap();
        p.data()[k] - before
    }

    #[test]
    fn quadratic_bowl_converges() {
        // loss = Σ a_k (p_k - t_k)²
        let a = [1.0, 4.0, 0.5];
        let t = [0.3, -0.7, 1.2];
        let mut p = Matrix::zeros(1, 3);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &[(1, 3)]);
        let loss = |p: &Matrix| (0..3).map(|k| a[k] * (p.data()[k] - t[k]).powi(2)).sum::<f64>();
        let mut losses = vec![loss(&p)];
        for _ in 0..500 {
            let g = Matrix::from_fn(1, 3, |_, k| 2.0 * a[k] * (p.data()[k] - t[k]));
            adam.step(vec![&mut p], &[g]).unwrap();
            losses.push(loss(&p));
        }
        // monotone over the warm-up descent
        for w in losses[..20].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(*losses.last().unwrap() < 1e-6, "final loss {}", losses.last().unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut adam = AdamState::new(AdamConfig::default(), &[(2, 2)]);
        assert!(matches!(
            adam.step(vec![&mut p], &[Matrix::zeros(1, 4)]),
            Err(NnError::ShapeMismatch(_))
        ));
        assert!(adam.step(vec![], &[]).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 0.0]), Matrix::from_vec(1, 1, vec![4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let after = g.iter().map(Matrix::sum_of_squares).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-15);
        let mut small = vec![Matrix::from_vec(1, 1, vec![0.5])];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].data()[0], 0.5);
    }
}

use super::{check_inputs, ForecastError, Forecaster};

/// Repeats the last observed value of every channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Persistence {
    pub history_len: usize,
    pub horizon: usize,
    pub channels: usize,
}

impl Persistence {
    pub fn new(history_len: usize, horizon: usize, channels: usize) -> Self {
        Self {
            history_len,
            horizon,
            channels,
        }
    }

    pub fn predict(&self, window: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let last = &window[window.len() - c..];
        last.repeat(self.horizon)
    }
}

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn history_len(&self) -> usize {
        self.history_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_channels(&self) -> usize {
        self.channels
    }

    fn forecast_normalized(&self, inputs: &[&[f64]], day_of_week: &[u8]) -> Result<Vec<Vec<f64>>, ForecastError> {
        check_inputs(self, inputs, day_of_week)?;
        Ok(inputs.iter().map(|w| self.predict(w)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rmse;

    #[test]
    fn repeats_last_value() {
        let p = Persistence::new(3, 6, 1);
        assert_eq!(p.predict(&[1.0, 2.0, 500.0]), vec![500.0; 6]);
        let p2 = Persistence::new(2, 2, 2);
        assert_eq!(p2.predict(&[1.0, 2.0, 3.0, 4.0]), vec![3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn constant_series_has_zero_error() {
        let p = Persistence::new(4, 3, 1);
        assert_eq!(rmse(&[7.0; 3], &p.predict(&[7.0; 4])).unwrap(), 0.0);
    }

    #[test]
    fn sinusoid_error_matches_closed_form() {
        // y_t = A sin(ωt + φ); persistence at origin t0 predicts y_{t0} for
        // y_{t0+h}. Averaged over a whole number of periods, the squared
        // error of lag h is A²(1 − cos ωh), so
        // MSE = (A²/m) Σ_h (1 − cos ωh).
        let (amp, period, m, n) = (3.0, 288usize, 6usize, 12usize);
        let omega = 2.0 * std::f64::consts::PI / period as f64;
        let p = Persistence::new(n, m, 1);
        let mut actual = Vec::new();
        let mut predicted = Vec::new();
        for origin in 0..period {
            let window: Vec<f64> = (0..n)
                .map(|k| amp * (omega * (origin + k) as f64).sin())
                .collect();
            predicted.extend(p.predict(&window));
            actual.extend((1..=m).map(|h| amp * (omega * (origin + n - 1 + h) as f64).sin()));
        }
        let got = rmse(&actual, &predicted).unwrap().powi(2);
        let expected = amp * amp / m as f64 * (1..=m).map(|h| 1.0 - (omega * h as f64).cos()).sum::<f64>();
        assert!(got > 0.0);
        assert!((got - expected).abs() < 1e-10 * expected.max(1.0), "{got} vs {expected}");
    }
}

use serde::{Deserialize, Serialize};

use super::{clamp_active, clamp_prediction, Forecaster};
use crate::data::FeatureWindow;
use crate::error::Result;

/// `bias + sum_t weights[t] * cgm[t]`, clamped. Ignores the non-cgm channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearForecaster {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearForecaster {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights, bias }
    }

    fn raw(&self, window: &FeatureWindow) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .fold(self.bias, |acc, (t, w)| acc + w * window.cgm(t))
    }
}

impl Forecaster for LinearForecaster {
    fn history_len(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, window: &FeatureWindow) -> Result<f64> {
        self.check_shape(window)?;
        Ok(clamp_prediction(self.raw(window)))
    }

    fn gradient_wrt_cgm(&self, window: &FeatureWindow) -> Result<Vec<f64>> {
        self.check_shape(window)?;
        if clamp_active(self.raw(window)) {
            return Ok(vec![0.0; self.weights.len()]);
        }
        Ok(self.weights.clone())
    }
}

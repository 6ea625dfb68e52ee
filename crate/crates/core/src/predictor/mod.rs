//! Glucose forecasters the attack targets.
//!
//! Anything implementing [`Forecaster`] can be attacked and profiled. The
//! reference implementation is [`ForecastModel`], a single-hidden-layer tanh
//! regressor over the flattened, normalized window.

mod linear;
mod mlp;

pub use linear::LinearForecaster;
pub use mlp::{fit_forecaster, ForecastMode, ForecastModel, Normalization, TrainConfig};

use crate::data::{FeatureWindow, LabeledWindow, CGM_MAX};
use crate::error::{Error, Result};

pub trait Forecaster: Send + Sync {
    fn history_len(&self) -> usize;

    /// Predicted cgm in mg/dL, clamped to `[0, CGM_MAX]`.
    fn predict(&self, window: &FeatureWindow) -> Result<f64>;

    /// d(prediction) / d(cgm at each history step). Zero wherever the clamp is active.
    fn gradient_wrt_cgm(&self, window: &FeatureWindow) -> Result<Vec<f64>>;

    fn check_shape(&self, window: &FeatureWindow) -> Result<()> {
        if window.history_len() != self.history_len() {
            return Err(Error::Shape {
                expected: self.history_len(),
                got: window.history_len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn clamp_prediction(raw: f64) -> f64 {
    raw.clamp(0.0, CGM_MAX)
}

pub(crate) fn clamp_active(raw: f64) -> bool {
    !(0.0..=CGM_MAX).contains(&raw)
}

/// Root-mean-square error of `model` on `windows`, in mg/dL.
pub fn rmse(model: &dyn Forecaster, windows: &[LabeledWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for w in windows {
        let e = model.predict(&w.features)? - w.target;
        sum += e * e;
    }
    Ok((sum / windows.len() as f64).sqrt())
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clamp_active, clamp_prediction, rmse, Forecaster};
use crate::data::{windowize, FeatureWindow, LabeledWindow, PatientTrace, Split, N_FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ForecastMode {
    Personalized { patient_id: String },
    Aggregate,
}

/// Per-channel input statistics plus target statistics, from the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: [f64; N_FEATURES],
    pub feature_scale: [f64; N_FEATURES],
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Normalization {
    fn fit(windows: &[LabeledWindow]) -> Self {
        let mut sum = [0.0; N_FEATURES];
        let mut count = 0usize;
        for w in windows {
            for t in 0..w.features.history_len() {
                for (f, v) in w.features.row(t).iter().enumerate() {
                    sum[f] += v;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut sq = [0.0; N_FEATURES];
        for w in windows {
            for t in 0..w.features.history_len() {
                for (f, v) in w.features.row(t).iter().enumerate() {
                    sq[f] += (v - mean[f]).powi(2);
                }
            }
        }
        let scale = sq.map(|s| guard_scale((s / n).sqrt()));

        let tn = windows.len().max(1) as f64;
        let target_mean = windows.iter().map(|w| w.target).sum::<f64>() / tn;
        let target_var = windows.iter().map(|w| (w.target - target_mean).powi(2)).sum::<f64>() / tn;
        Self {
            feature_mean: mean,
            feature_scale: scale,
            target_mean,
            target_scale: guard_scale(target_var.sqrt()),
        }
    }

    fn normalize_into(&self, window: &FeatureWindow, out: &mut [f64]) {
        for (j, (v, o)) in window.as_slice().iter().zip(out.iter_mut()).enumerate() {
            let f = j % N_FEATURES;
            *o = (v - self.feature_mean[f]) / self.feature_scale[f];
        }
    }
}

/// Constant channels get unit scale.
fn guard_scale(s: f64) -> f64 {
    if s.is_finite() && s > 1e-9 {
        s
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the loss improves by less than this fraction over `plateau_epochs`.
    pub plateau_tolerance: f64,
    pub plateau_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            learning_rate: 0.1,
            max_epochs: 2000,
            plateau_tolerance: 1e-6,
            plateau_epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.max_epochs == 0 || self.plateau_epochs == 0 {
            return Err(Error::Config("hidden, max_epochs and plateau_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Single-hidden-layer tanh regressor over the normalized flattened window.
///
/// Parameters are stored flat as `[W (hidden x inputs, row-major), b (hidden), v (hidden), c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub mode: ForecastMode,
    pub history_len: usize,
    /// Steps ahead; minutes = horizon * cadence / 60.
    pub horizon: usize,
    pub hidden: usize,
    pub normalization: Normalization,
    pub parameters: Vec<f64>,
    pub train_seed: u64,
    pub training_rmse: f64,
    pub epochs: usize,
}

struct Layout {
    inputs: usize,
    hidden: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.hidden * self.inputs + 2 * self.hidden + 1
    }
    fn b(&self) -> usize {
        self.hidden * self.inputs
    }
    fn v(&self) -> usize {
        self.b() + self.hidden
    }
    fn c(&self) -> usize {
        self.v() + self.hidden
    }
}

impl ForecastModel {
    /// Assembles a model from explicit parts, e.g. for fixtures or after deserialization.
    pub fn from_parts(
        mode: ForecastMode,
        history_len: usize,
        horizon: usize,
        hidden: usize,
        normalization: Normalization,
        parameters: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout {
            inputs: history_len * N_FEATURES,
            hidden,
        };
        if parameters.len() != layout.len() {
            return Err(Error::Shape {
                expected: layout.len(),
                got: parameters.len(),
            });
        }
        Ok(Self {
            mode,
            history_len,
            horizon,
            hidden,
            normalization,
            parameters,
            train_seed: 0,
            training_rmse: f64::NAN,
            epochs: 0,
        })
    }

    pub fn parameter_count(history_len: usize, hidden: usize) -> usize {
        Layout {
            inputs: history_len * N_FEATURES,
            hidden,
        }
        .len()
    }

    /// Fewest training windows accepted: one per ten parameters.
    pub fn min_windows(history_len: usize, hidden: usize) -> usize {
        Self::parameter_count(history_len, hidden).div_ceil(10)
    }

    fn layout(&self) -> Layout {
        Layout {
            inputs: self.history_len * N_FEATURES,
            hidden: self.hidden,
        }
    }

    /// Hidden activations and the unclamped prediction in mg/dL.
    fn forward(&self, window: &FeatureWindow) -> (Vec<f64>, f64) {
        let layout = self.layout();
        let mut z = vec![0.0; layout.inputs];
        self.normalization.normalize_into(window, &mut z);
        let p = &self.parameters;
        let mut h = vec![0.0; layout.hidden];
        let mut o = p[layout.c()];
        for (k, hk) in h.iter_mut().enumerate() {
            let row = &p[k * layout.inputs..(k + 1) * layout.inputs];
            let a = row.iter().zip(&z).fold(p[layout.b() + k], |acc, (w, x)| acc + w * x);
            *hk = a.tanh();
            o += p[layout.v() + k] * *hk;
        }
        let raw = self.normalization.target_mean + self.normalization.target_scale * o;
        (h, raw)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.parameters.len() != m.layout().len() {
            return Err(Error::Shape {
                expected: m.layout().len(),
                got: m.parameters.len(),
            });
        }
        Ok(m)
    }
}

impl Forecaster for ForecastModel {
    fn history_len(&self) -> usize {
        self.history_len
    }

    fn predict(&self, window: &FeatureWindow) -> Result<f64> {
        self.check_shape(window)?;
        if !window.all_finite() {
            return Err(Error::Config("window contains non-finite features".into()));
        }
        Ok(clamp_prediction(self.forward(window).1))
    }

    fn gradient_wrt_cgm(&self, window: &FeatureWindow) -> Result<Vec<f64>> {
        self.check_shape(window)?;
        let layout = self.layout();
        let (h, raw) = self.forward(window);
        if clamp_active(raw) {
            return Ok(vec![0.0; self.history_len]);
        }
        let p = &self.parameters;
        // d raw / d z_j = target_scale * sum_k v_k (1 - h_k^2) W_kj; then chain through the cgm scale
        let factor = self.normalization.target_scale / self.normalization.feature_scale[0];
        let mut grad = vec![0.0; self.history_len];
        for (k, hk) in h.iter().enumerate() {
            let d = p[layout.v() + k] * (1.0 - hk * hk);
            if d == 0.0 {
                continue;
            }
            let row = &p[k * layout.inputs..(k + 1) * layout.inputs];
            for (t, g) in grad.iter_mut().enumerate() {
                *g += d * row[t * N_FEATURES];
            }
        }
        for g in &mut grad {
            *g *= factor;
        }
        Ok(grad)
    }
}

/// Fits the reference forecaster by full-batch gradient descent on the mean squared
/// error of normalized targets. Deterministic under `config.seed`.
pub fn fit_forecaster(
    traces: &[PatientTrace],
    mode: ForecastMode,
    history_len: usize,
    horizon: usize,
    config: &TrainConfig,
) -> Result<ForecastModel> {
    config.validate()?;
    if traces.is_empty() {
        return Err(Error::InsufficientWindows { got: 0, needed: 1 });
    }
    for t in traces {
        if t.split != Split::Train {
            return Err(Error::Config(format!(
                "trace {} is not from the training split",
                t.patient_id
            )));
        }
        if let ForecastMode::Personalized { patient_id } = &mode {
            if &t.patient_id != patient_id {
                return Err(Error::PatientMismatch {
                    expected: patient_id.clone(),
                    found: t.patient_id.clone(),
                });
            }
        }
    }
    let mut windows = Vec::new();
    for t in traces {
        windows.extend(windowize(t, history_len, horizon)?);
    }
    let needed = ForecastModel::min_windows(history_len, config.hidden);
    if windows.len() < needed {
        return Err(Error::InsufficientWindows {
            got: windows.len(),
            needed,
        });
    }

    let normalization = Normalization::fit(&windows);
    let layout = Layout {
        inputs: history_len * N_FEATURES,
        hidden: config.hidden,
    };
    let n = windows.len();
    let d = layout.inputs;
    let mut inputs = vec![0.0; n * d];
    for (w, row) in windows.iter().zip(inputs.chunks_exact_mut(d)) {
        normalization.normalize_into(&w.features, row);
    }
    let targets: Vec<f64> = windows
        .iter()
        .map(|w| (w.target - normalization.target_mean) / normalization.target_scale)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = vec![0.0; layout.len()];
    let w_bound = 1.0 / (d as f64).sqrt();
    let v_bound = 1.0 / (layout.hidden as f64).sqrt();
    for w in &mut params[..layout.b()] {
        *w = rng.random_range(-w_bound..w_bound);
    }
    for v in &mut params[layout.v()..layout.c()] {
        *v = rng.random_range(-v_bound..v_bound);
    }

    let mut grad = vec![0.0; layout.len()];
    let mut h = vec![0.0; layout.hidden];
    let mut history: Vec<f64> = Vec::with_capacity(config.max_epochs);
    let mut epochs = 0;
    for epoch in 0..config.max_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (x, &y) in inputs.chunks_exact(d).zip(&targets) {
            let mut o = params[layout.c()];
            for (k, hk) in h.iter_mut().enumerate() {
                let row = &params[k * d..(k + 1) * d];
                let a = row.iter().zip(x).fold(params[layout.b() + k], |acc, (w, xi)| acc + w * xi);
                *hk = a.tanh();
                o += params[layout.v() + k] * *hk;
            }
            let e = o - y;
            loss += e * e;
            grad[layout.c()] += e;
            for (k, &hk) in h.iter().enumerate() {
                grad[layout.v() + k] += e * hk;
                let delta = e * params[layout.v() + k] * (1.0 - hk * hk);
                grad[layout.b() + k] += delta;
                for (g, xi) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += delta * xi;
                }
            }
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(loss);
        epochs = epoch + 1;
        if loss == 0.0 {
            break;
        }
        if epoch >= config.plateau_epochs {
            let before = history[epoch - config.plateau_epochs];
            if before - loss <= config.plateau_tolerance * before {
                break;
            }
        }
        let step = config.learning_rate * 2.0 / n as f64;
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= step * g;
        }
    }

    let mut model = ForecastModel {
        mode,
        history_len,
        horizon,
        hidden: config.hidden,
        normalization,
        parameters: params,
        train_seed: config.seed,
        training_rmse: f64::NAN,
        epochs,
    };
    model.training_rmse = rmse(&model, &windows)?;
    if !model.training_rmse.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: epochs });
    }
    Ok(model)
}

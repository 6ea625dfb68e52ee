//! Anomaly detectors over forecaster input windows, and the cohort
//! strategies that decide whose data trains them.

mod knn;
mod ocsvm;
mod strategy;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureWindow, N_FEATURES};
use crate::error::{Error, Result};

pub use knn::{fit_knn, KnnDetector, KnnParams, Weighting};
pub use ocsvm::{fit_ocsvm, shifted_sigmoid, OcsvmDetector, OcsvmParams};
pub use strategy::{select_training_set, TrainingStrategy};

/// Ground truth of a window, and a detector's verdict on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Malicious,
}

/// Per-channel z-normalization of flattened windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowNormalizer {
    pub history_len: usize,
    pub mean: [f64; N_FEATURES],
    pub scale: [f64; N_FEATURES],
}

impl WindowNormalizer {
    /// Statistics over every sample of every window. Constant channels get scale 1.
    pub fn fit<'a, I>(windows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureWindow>,
    {
        let mut history_len = None;
        let mut count = 0usize;
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        for w in windows {
            match history_len {
                None => history_len = Some(w.history_len()),
                Some(h) if h != w.history_len() => {
                    return Err(Error::Shape {
                        expected: h,
                        got: w.history_len(),
                    })
                }
                _ => {}
            }
            for row in w.as_slice().chunks_exact(N_FEATURES) {
                for f in 0..N_FEATURES {
                    sum[f] += row[f];
                    sq[f] += row[f] * row[f];
                }
                count += 1;
            }
        }
        let history_len = history_len.ok_or(Error::EmptyClass("training"))?;
        let n = count as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut scale = [1.0; N_FEATURES];
        for f in 0..N_FEATURES {
            mean[f] = sum[f] / n;
            let var = (sq[f] / n - mean[f] * mean[f]).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-12 {
                scale[f] = sd;
            }
        }
        Ok(Self {
            history_len,
            mean,
            scale,
        })
    }

    pub fn n_features(&self) -> usize {
        self.history_len * N_FEATURES
    }

    pub fn apply(&self, window: &FeatureWindow) -> Result<Vec<f64>> {
        if window.history_len() != self.history_len {
            return Err(Error::Shape {
                expected: self.history_len,
                got: window.history_len(),
            });
        }
        Ok(window
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = i % N_FEATURES;
                (v - self.mean[f]) / self.scale[f]
            })
            .collect())
    }
}

/// A fitted detector of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    Knn(KnnDetector),
    Ocsvm(OcsvmDetector),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Knn,
    Ocsvm,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 2] = [DetectorKind::Knn, DetectorKind::Ocsvm];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Knn => "knn",
            DetectorKind::Ocsvm => "ocsvm",
        }
    }
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Knn(_) => DetectorKind::Knn,
            Detector::Ocsvm(_) => DetectorKind::Ocsvm,
        }
    }

    pub fn verdict(&self, window: &FeatureWindow) -> Result<Label> {
        match self {
            Detector::Knn(m) => m.verdict(window),
            Detector::Ocsvm(m) => m.verdict(window),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One line of a verdict batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub patient_id: String,
    pub timestamp: i64,
    /// Last cgm value of the scored window.
    pub cgm: f64,
    pub truth: Label,
    pub verdict: Label,
}

pub fn verdicts_to_jsonl(records: &[VerdictRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn verdicts_from_jsonl(text: &str) -> Result<Vec<VerdictRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

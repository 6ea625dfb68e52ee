use serde::{Deserialize, Serialize};

use super::{Label, WindowNormalizer};
use crate::data::FeatureWindow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnParams {
    pub k: usize,
    /// Minkowski order.
    pub p: f64,
    pub weighting: Weighting,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: 7,
            p: 2.0,
            weighting: Weighting::Uniform,
        }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("knn.k must be at least 1".into()));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("knn.p = {} must be a finite order >= 1", self.p)));
        }
        Ok(())
    }
}

/// Labeled nearest-neighbor classifier over normalized windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnDetector {
    pub params: KnnParams,
    pub normalizer: WindowNormalizer,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

/// Stores both classes, normalized by statistics of the benign class.
pub fn fit_knn(benign: &[FeatureWindow], malicious: &[FeatureWindow], params: &KnnParams) -> Result<KnnDetector> {
    params.validate()?;
    if benign.is_empty() {
        return Err(Error::EmptyClass("benign"));
    }
    if malicious.is_empty() {
        return Err(Error::EmptyClass("malicious"));
    }
    let stored = benign.len() + malicious.len();
    if params.k > stored {
        return Err(Error::KTooLarge { k: params.k, stored });
    }
    let normalizer = WindowNormalizer::fit(benign.iter())?;
    let mut points = Vec::with_capacity(stored);
    let mut labels = Vec::with_capacity(stored);
    for (class, label) in [(benign, Label::Benign), (malicious, Label::Malicious)] {
        for w in class {
            points.push(normalizer.apply(w)?);
            labels.push(label);
        }
    }
    Ok(KnnDetector {
        params: *params,
        normalizer,
        points,
        labels,
    })
}

impl KnnDetector {
    /// Minkowski distance raised to the power `p`, which preserves neighbor order.
    fn powered_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let p = self.params.p;
        if p == 2.0 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        } else if p == 1.0 {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
        } else {
            a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(p)).sum()
        }
    }

    /// Indices of the k nearest stored points, nearest first; equal distances keep stored order.
    pub fn neighbors(&self, window: &FeatureWindow) -> Result<Vec<usize>> {
        let q = self.normalizer.apply(window)?;
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (self.powered_distance(&q, p), i))
            .collect();
        let k = self.params.k;
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
        }
        d.sort_by(cmp);
        Ok(d.into_iter().map(|(_, i)| i).collect())
    }

    /// Majority label of the k nearest; an even split is called malicious.
    pub fn verdict(&self, window: &FeatureWindow) -> Result<Label> {
        let nn = self.neighbors(window)?;
        let malicious = nn.iter().filter(|&&i| self.labels[i] == Label::Malicious).count();
        Ok(if 2 * malicious >= nn.len() {
            Label::Malicious
        } else {
            Label::Benign
        })
    }
}

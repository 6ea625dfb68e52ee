//! Agglomerative clustering of risk profiles and vulnerability labeling.
//!
//! Profiles are linearly resampled to a common length (and optionally
//! standardized) before Euclidean distances are taken. Agglomeration is
//! naive and exact: at every step the closest pair of clusters merges, ties
//! going to the lexicographically smallest pair of cluster labels, where a
//! cluster's label is its smallest patient id. Input order never matters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::RiskProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Complete,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub metric: Metric,
    pub linkage: Linkage,
    /// Z-score each resampled profile before distancing.
    pub standardize: bool,
    /// Resample to this length instead of the cohort-minimum profile length.
    pub resample_len: Option<usize>,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            linkage: Linkage::Complete,
            standardize: true,
            resample_len: None,
        }
    }
}

/// Linear interpolation of `values` onto `len` evenly spaced points spanning the same range.
pub fn resample(values: &[f64], len: usize) -> Vec<f64> {
    let n = values.len();
    if n == 0 || len == 0 {
        return Vec::new();
    }
    if n == 1 || len == 1 {
        return vec![values[0]; len];
    }
    (0..len)
        .map(|i| {
            let x = i as f64 * (n - 1) as f64 / (len - 1) as f64;
            let lo = (x.floor() as usize).min(n - 2);
            let frac = x - lo as f64;
            values[lo] + frac * (values[lo + 1] - values[lo])
        })
        .collect()
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in values.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Resamples (and standardizes, if configured) every profile onto a common length.
pub fn prepare_profiles(profiles: &[RiskProfile], params: &ClusterParams) -> Result<Vec<Vec<f64>>> {
    if let Some(p) = profiles.iter().find(|p| p.is_empty()) {
        return Err(Error::EmptyProfile(p.patient_id.clone()));
    }
    let len = params
        .resample_len
        .unwrap_or_else(|| profiles.iter().map(|p| p.len()).min().unwrap_or(0));
    Ok(profiles
        .iter()
        .map(|p| {
            let mut v = resample(&p.values, len);
            if params.standardize {
                standardize(&mut v);
            }
            v
        })
        .collect())
}

/// Distance between two equal-length prepared profiles.
pub fn profile_distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyProfile(String::new()));
    }
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    match metric {
        Metric::Euclidean => Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Node ids: leaves are `0..n`, merge `k` creates node `n + k`.
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// Merge tree over patient ids (sorted), with non-decreasing merge heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }

    /// Leaf indices under a node.
    fn members(&self, node: usize) -> Vec<usize> {
        let n = self.leaves.len();
        if node < n {
            return vec![node];
        }
        let m = &self.merges[node - n];
        let mut out = self.members(m.left);
        out.extend(self.members(m.right));
        out
    }

    fn node_height(&self, node: usize) -> f64 {
        let n = self.leaves.len();
        if node < n {
            0.0
        } else {
            self.merges[node - n].height
        }
    }

    pub fn to_newick(&self) -> String {
        let n = self.leaves.len();
        if n == 0 {
            return ";".into();
        }
        if self.merges.is_empty() {
            return format!("{};", self.leaves[0]);
        }
        let root = n + self.merges.len() - 1;
        format!("{};", self.newick_node(root))
    }

    fn newick_node(&self, node: usize) -> String {
        let n = self.leaves.len();
        if node < n {
            return self.leaves[node].clone();
        }
        let m = &self.merges[node - n];
        let branch = |child: usize| m.height - self.node_height(child);
        format!(
            "({}:{},{}:{})",
            self.newick_node(m.left),
            branch(m.left),
            self.newick_node(m.right),
            branch(m.right)
        )
    }
}

/// Clusters named profiles. `vectors[i]` belongs to `ids[i]`; ids must be unique.
pub fn agglomerate(ids: &[String], vectors: &[Vec<f64>], metric: Metric, linkage: Linkage) -> Result<Dendrogram> {
    if ids.len() < 2 {
        return Err(Error::TooFewProfiles(ids.len()));
    }
    if ids.len() != vectors.len() {
        return Err(Error::Shape {
            expected: ids.len(),
            got: vectors.len(),
        });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let leaves: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
    if leaves.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("duplicate patient id in clustering input".into()));
    }
    let n = leaves.len();
    let mut dist = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = profile_distance(&vectors[order[a]], &vectors[order[b]], metric)?;
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }

    // active clusters: (node id, leaf members); leaf index order == lexicographic id order
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(n - 1);
    let linkage_distance = |a: &[usize], b: &[usize]| -> f64 {
        match linkage {
            Linkage::Complete => a
                .iter()
                .flat_map(|&i| b.iter().map(move |&j| (i, j)))
                .map(|(i, j)| dist[i][j])
                .fold(0.0, f64::max),
            Linkage::Average => {
                let s: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| dist[i][j]).sum();
                s / (a.len() * b.len()) as f64
            }
        }
    };
    while active.len() > 1 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for x in 0..active.len() {
            for y in x + 1..active.len() {
                let d = linkage_distance(&active[x].1, &active[y].1);
                let (lx, ly) = (active[x].1[0], active[y].1[0]);
                let key = (lx.min(ly), lx.max(ly));
                let better = match &best {
                    None => true,
                    Some((bd, bkey, _, _)) => d < *bd || (d == *bd && key < *bkey),
                };
                if better {
                    best = Some((d, key, x, y));
                }
            }
        }
        let (height, _, x, y) = best.expect("at least two active clusters");
        let (cy, my) = active.remove(y);
        let (cx, mx) = active.remove(x);
        let (left, right) = if mx[0] <= my[0] { (cx, cy) } else { (cy, cx) };
        let mut members: Vec<usize> = mx.into_iter().chain(my).collect();
        members.sort_unstable();
        merges.push(Merge {
            left,
            right,
            height,
            size: members.len(),
        });
        active.push((n + merges.len() - 1, members));
    }
    Ok(Dendrogram { leaves, merges })
}

/// Clusters of patient ids, each sorted, ordered by first member.
pub type Partition = Vec<Vec<String>>;

/// Cuts the tree just below the merge whose height jumps the most over the
/// previous merge. With no positive jump (fewer than two merges, or all at the
/// same height), only the final merge is undone.
pub fn cut_by_max_gap(d: &Dendrogram) -> Partition {
    let n = d.leaves.len();
    if n < 2 {
        return vec![d.leaves.clone()];
    }
    let heights = d.heights();
    let mut cut = heights.len() - 1;
    let mut best_gap = 0.0;
    for k in 1..heights.len() {
        let gap = heights[k] - heights[k - 1];
        // later merges win ties, giving fewer clusters
        if gap > 0.0 && gap >= best_gap {
            best_gap = gap;
            cut = k;
        }
    }
    partition_before(d, cut)
}

/// Components after applying merges `0..k`.
pub fn partition_before(d: &Dendrogram, k: usize) -> Partition {
    let n = d.leaves.len();
    let mut roots: BTreeSet<usize> = (0..n).collect();
    for (i, m) in d.merges.iter().take(k).enumerate() {
        roots.remove(&m.left);
        roots.remove(&m.right);
        roots.insert(n + i);
    }
    let mut clusters: Partition = roots
        .into_iter()
        .map(|node| {
            let mut ids: Vec<String> = d.members(node).into_iter().map(|i| d.leaves[i].clone()).collect();
            ids.sort();
            ids
        })
        .collect();
    clusters.sort();
    clusters
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityClusters {
    pub less_vulnerable: Vec<String>,
    pub more_vulnerable: Vec<String>,
    pub less_mean_success: f64,
    pub more_mean_success: f64,
    /// Set when both clusters had the same mean success rate.
    pub tie_broken: bool,
}

impl VulnerabilityClusters {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Labels a 2-cluster partition: the cluster with the lower mean attack success
/// rate is less vulnerable. On equal means the smaller cluster is less vulnerable
/// (then the one holding the smallest id).
pub fn label_clusters(partition: &Partition, success_rates: &BTreeMap<String, f64>) -> Result<VulnerabilityClusters> {
    if partition.len() != 2 {
        return Err(Error::NonBinaryPartition(partition.len()));
    }
    let mean = |c: &[String]| -> Result<f64> {
        let mut s = 0.0;
        for id in c {
            s += success_rates.get(id).ok_or_else(|| Error::MissingSuccessRate(id.clone()))?;
        }
        Ok(s / c.len() as f64)
    };
    let (a, b) = (&partition[0], &partition[1]);
    let (ma, mb) = (mean(a)?, mean(b)?);
    let tie = ma == mb;
    let a_less = if tie {
        if a.len() != b.len() {
            a.len() < b.len()
        } else {
            a[0] < b[0]
        }
    } else {
        ma < mb
    };
    if tie {
        log::warn!("clusters tie on mean success rate {ma}; labeling the smaller cluster less vulnerable");
    }
    let (less, more, ml, mm) = if a_less { (a, b, ma, mb) } else { (b, a, mb, ma) };
    Ok(VulnerabilityClusters {
        less_vulnerable: less.clone(),
        more_vulnerable: more.clone(),
        less_mean_success: ml,
        more_mean_success: mm,
        tie_broken: tie,
    })
}

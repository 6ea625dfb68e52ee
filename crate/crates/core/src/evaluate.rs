//! Detection metrics, the strategy-by-detector experiment, and report and
//! plot-data emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::VulnerabilityClusters;
use crate::data::{FeatureWindow, NormalRatio, CGM};
use crate::detect::{
    fit_knn, fit_ocsvm, select_training_set, Detector, DetectorKind, KnnParams, Label, OcsvmParams,
    TrainingStrategy, VerdictRecord,
};
use crate::error::{Error, Result};

/// Confusion counts with malicious as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, truth: Label, verdict: Label) {
        match (truth, verdict) {
            (Label::Malicious, Label::Malicious) => self.tp += 1,
            (Label::Malicious, Label::Benign) => self.fn_ += 1,
            (Label::Benign, Label::Malicious) => self.fp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tallies (truth, verdict) pairs.
pub fn confusion<I>(pairs: I) -> Result<ConfusionCounts>
where
    I: IntoIterator<Item = (Label, Label)>,
{
    let mut c = ConfusionCounts::default();
    for (truth, verdict) in pairs {
        c.add(truth, verdict);
    }
    if c.total() == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(c)
}

/// A ratio that is `undefined` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Defined(f64),
    Undefined(Undefined),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    Undefined,
}

impl MetricValue {
    pub const UNDEFINED: MetricValue = MetricValue::Undefined(Undefined::Undefined);

    pub fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            Self::UNDEFINED
        } else {
            Self::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(v),
            MetricValue::Undefined(_) => None,
        }
    }

    fn fmt_percent(self) -> String {
        match self {
            MetricValue::Defined(v) => format!("{:.1}", v * 100.0),
            MetricValue::Undefined(_) => "undefined".into(),
        }
    }

    fn fmt_csv(self) -> String {
        match self {
            MetricValue::Defined(v) => format!("{v}"),
            MetricValue::Undefined(_) => "undefined".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: MetricValue,
    pub precision: MetricValue,
    pub f1: MetricValue,
}

/// Recall, precision, and their harmonic mean. F1 is undefined when either
/// input is, and 0 when both are 0.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let recall = MetricValue::ratio(c.tp, c.tp + c.fn_);
    let precision = MetricValue::ratio(c.tp, c.tp + c.fp);
    let f1 = match (recall.value(), precision.value()) {
        (Some(r), Some(p)) if r + p > 0.0 => MetricValue::Defined(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => MetricValue::Defined(0.0),
        _ => MetricValue::UNDEFINED,
    };
    Metrics { recall, precision, f1 }
}

/// Mean over the runs where the metric is defined; undefined if none is.
pub fn mean_metric(values: &[MetricValue]) -> MetricValue {
    let defined: Vec<f64> = values.iter().filter_map(|v| v.value()).collect();
    if defined.is_empty() {
        MetricValue::UNDEFINED
    } else {
        MetricValue::Defined(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// One scored window of the shared test pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSample {
    pub patient_id: String,
    pub timestamp: i64,
    pub truth: Label,
    pub window: FeatureWindow,
}

/// Detector training material of one patient.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatientSamples {
    pub benign: Vec<FeatureWindow>,
    pub malicious: Vec<FeatureWindow>,
}

/// Scores the pool and tallies the verdicts.
pub fn score_pool(detector: &Detector, pool: &[TestSample]) -> Result<(ConfusionCounts, Vec<VerdictRecord>)> {
    let records: Vec<VerdictRecord> = pool
        .par_iter()
        .map(|s| {
            let verdict = detector.verdict(&s.window)?;
            let last = s.window.history_len().saturating_sub(1);
            Ok(VerdictRecord {
                patient_id: s.patient_id.clone(),
                timestamp: s.timestamp,
                cgm: s.window.row(last)[CGM],
                truth: s.truth,
                verdict,
            })
        })
        .collect::<Result<_>>()?;
    let counts = confusion(records.iter().map(|r| (r.truth, r.verdict)))?;
    Ok((counts, records))
}

/// Pooled and per-patient metrics of one verdict batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cohort: Vec<String>,
    pub train_benign: usize,
    pub train_malicious: usize,
    pub confusion: ConfusionCounts,
    pub metrics: Metrics,
    pub per_patient: BTreeMap<String, Metrics>,
}

impl RunResult {
    pub fn from_verdicts(cohort: Vec<String>, train_benign: usize, train_malicious: usize, records: &[VerdictRecord]) -> Result<Self> {
        let confusion_all = confusion(records.iter().map(|r| (r.truth, r.verdict)))?;
        let mut by_patient: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
        for r in records {
            by_patient.entry(r.patient_id.clone()).or_default().add(r.truth, r.verdict);
        }
        Ok(Self {
            cohort,
            train_benign,
            train_malicious,
            confusion: confusion_all,
            metrics: metrics(&confusion_all),
            per_patient: by_patient.iter().map(|(k, c)| (k.clone(), metrics(c))).collect(),
        })
    }
}

/// All runs of one detector under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub detector: DetectorKind,
    pub strategy: TrainingStrategy,
    /// Mean over runs (a single run for every strategy but random samples).
    pub mean: Metrics,
    pub runs: Vec<RunResult>,
}

impl StrategyResult {
    pub fn new(detector: DetectorKind, strategy: TrainingStrategy, runs: Vec<RunResult>) -> Self {
        let pick = |f: fn(&Metrics) -> MetricValue| mean_metric(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        let mean = Metrics {
            recall: pick(|m| m.recall),
            precision: pick(|m| m.precision),
            f1: pick(|m| m.f1),
        };
        Self {
            detector,
            strategy,
            mean,
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub benign: usize,
    pub malicious: usize,
}

/// Everything a reader needs to interpret the detection experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: BTreeMap<String, u64>,
    /// Content hash of every input artifact, by name.
    pub inputs: BTreeMap<String, String>,
    pub clusters: VulnerabilityClusters,
    pub success_rates: BTreeMap<String, f64>,
    pub normal_ratios: BTreeMap<String, NormalRatio>,
    pub test_pool: PoolSummary,
    pub results: Vec<StrategyResult>,
}

impl ExperimentReport {
    pub fn result(&self, detector: DetectorKind, strategy_name: &str) -> Option<&StrategyResult> {
        self.results
            .iter()
            .find(|r| r.detector == detector && r.strategy.name() == strategy_name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::from("# Detection experiment\n\n");
        let _ = writeln!(
            md,
            "Test pool: {} benign and {} malicious windows.\n",
            self.test_pool.benign, self.test_pool.malicious
        );
        md.push_str("## Vulnerability clusters\n\n");
        let _ = writeln!(
            md,
            "- less vulnerable ({:.1}% mean attack success): {}",
            self.clusters.less_mean_success * 100.0,
            self.clusters.less_vulnerable.join(", ")
        );
        let _ = writeln!(
            md,
            "- more vulnerable ({:.1}% mean attack success): {}\n",
            self.clusters.more_mean_success * 100.0,
            self.clusters.more_vulnerable.join(", ")
        );
        md.push_str("| Patient | Attack success (%) | Normal:abnormal ratio |\n|---|---|---|\n");
        for (id, rate) in &self.success_rates {
            let ratio = match self.normal_ratios.get(id) {
                Some(NormalRatio::Finite(r)) => format!("{r:.2}"),
                Some(NormalRatio::Unbounded) => "inf".into(),
                None => "-".into(),
            };
            let _ = writeln!(md, "| {id} | {:.1} | {ratio} |", rate * 100.0);
        }
        md.push_str("\n## Detection metrics\n\n");
        md.push_str("| Detector | Strategy | Recall (%) | Precision (%) | F1 (%) | Runs | Train benign | Train malicious |\n");
        md.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.results {
            let (b, m) = r
                .runs
                .iter()
                .fold((0, 0), |(b, m), run| (b + run.train_benign, m + run.train_malicious));
            let n = r.runs.len().max(1);
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.detector.name(),
                r.strategy.name(),
                r.mean.recall.fmt_percent(),
                r.mean.precision.fmt_percent(),
                r.mean.f1.fmt_percent(),
                r.runs.len(),
                b / n,
                m / n
            );
        }
        for r in self.results.iter().filter(|r| r.runs.len() > 1) {
            let _ = writeln!(md, "\n### {} / {} runs\n", r.detector.name(), r.strategy.name());
            md.push_str("| Run | Cohort | Recall (%) | Precision (%) | F1 (%) |\n|---|---|---|---|---|\n");
            for (i, run) in r.runs.iter().enumerate() {
                let _ = writeln!(
                    md,
                    "| {i} | {} | {} | {} | {} |",
                    run.cohort.join(", "),
                    run.metrics.recall.fmt_percent(),
                    run.metrics.precision.fmt_percent(),
                    run.metrics.f1.fmt_percent()
                );
            }
        }
        md
    }
}

/// Detector settings of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub detectors: Vec<DetectorKind>,
    pub strategies: Vec<TrainingStrategy>,
    pub knn: KnnParams,
    pub ocsvm: OcsvmParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            detectors: DetectorKind::ALL.to_vec(),
            strategies: TrainingStrategy::standard(),
            knn: KnnParams::default(),
            ocsvm: OcsvmParams::default(),
        }
    }
}

/// A detector fitted on one training cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedDetector {
    pub strategy: TrainingStrategy,
    pub run: usize,
    pub cohort: Vec<String>,
    pub train_benign: usize,
    pub train_malicious: usize,
    pub detector: Detector,
}

pub fn fit_detector(
    kind: DetectorKind,
    config: &ExperimentConfig,
    cohort: &[String],
    training: &BTreeMap<String, PatientSamples>,
) -> Result<(Detector, usize, usize)> {
    let mut benign = Vec::new();
    let mut malicious = Vec::new();
    for id in cohort {
        let s = training
            .get(id)
            .ok_or_else(|| Error::Config(format!("no detector training samples for patient {id}")))?;
        benign.extend(s.benign.iter().cloned());
        malicious.extend(s.malicious.iter().cloned());
    }
    let detector = match kind {
        DetectorKind::Knn => Detector::Knn(fit_knn(&benign, &malicious, &config.knn)?),
        DetectorKind::Ocsvm => Detector::Ocsvm(fit_ocsvm(&benign, &config.ocsvm)?),
    };
    Ok((detector, benign.len(), malicious.len()))
}

/// Fits every (detector, strategy, run) combination. Output order follows the
/// config: detectors, then strategies, then runs.
pub fn fit_all_detectors(
    config: &ExperimentConfig,
    clusters: &VulnerabilityClusters,
    training: &BTreeMap<String, PatientSamples>,
    seed: u64,
) -> Result<Vec<(DetectorKind, FittedDetector)>> {
    let ids: Vec<String> = training.keys().cloned().collect();
    let mut jobs = Vec::new();
    for &kind in &config.detectors {
        for strategy in &config.strategies {
            for (run, cohort) in select_training_set(strategy, clusters, &ids, seed)?.into_iter().enumerate() {
                jobs.push((kind, *strategy, run, cohort));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(kind, strategy, run, cohort)| {
            let (detector, train_benign, train_malicious) = fit_detector(kind, config, &cohort, training)?;
            Ok((
                kind,
                FittedDetector {
                    strategy,
                    run,
                    cohort,
                    train_benign,
                    train_malicious,
                    detector,
                },
            ))
        })
        .collect()
}

/// Groups scored runs into per-(detector, strategy) results, keeping order of first appearance.
pub fn collect_results(scored: Vec<(DetectorKind, TrainingStrategy, RunResult)>) -> Vec<StrategyResult> {
    let mut order: Vec<(DetectorKind, TrainingStrategy)> = Vec::new();
    let mut runs: BTreeMap<(DetectorKind, TrainingStrategy), Vec<RunResult>> = BTreeMap::new();
    for (kind, strategy, run) in scored {
        if !runs.contains_key(&(kind, strategy)) {
            order.push((kind, strategy));
        }
        runs.entry((kind, strategy)).or_default().push(run);
    }
    order
        .into_iter()
        .map(|key| StrategyResult::new(key.0, key.1, runs.remove(&key).unwrap_or_default()))
        .collect()
}

/// Fits and scores every combination against the shared pool.
pub fn run_experiment(
    config: &ExperimentConfig,
    clusters: &VulnerabilityClusters,
    training: &BTreeMap<String, PatientSamples>,
    pool: &[TestSample],
    seed: u64,
) -> Result<Vec<StrategyResult>> {
    if pool.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let fitted = fit_all_detectors(config, clusters, training, seed)?;
    let scored = fitted
        .into_iter()
        .map(|(kind, f)| {
            let (_, records) = score_pool(&f.detector, pool)?;
            let run = RunResult::from_verdicts(f.cohort, f.train_benign, f.train_malicious, &records)?;
            Ok((kind, f.strategy, run))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_results(scored))
}

/// Per-metric CSV: one row per (detector, strategy) mean, plus one per random-samples run.
pub fn metric_csv(report: &ExperimentReport, pick: fn(&Metrics) -> MetricValue) -> String {
    let mut out = String::from("detector,strategy,run,value\n");
    for r in &report.results {
        let _ = writeln!(out, "{},{},mean,{}", r.detector.name(), r.strategy.name(), pick(&r.mean).fmt_csv());
        if r.runs.len() > 1 {
            for (i, run) in r.runs.iter().enumerate() {
                let _ = writeln!(out, "{},{},{i},{}", r.detector.name(), r.strategy.name(), pick(&run.metrics).fmt_csv());
            }
        }
    }
    out
}

pub fn ratio_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("patient_id,normal_to_abnormal,attack_success\n");
    for (id, ratio) in &report.normal_ratios {
        let r = match ratio {
            NormalRatio::Finite(v) => format!("{v}"),
            NormalRatio::Unbounded => "inf".into(),
        };
        let s = report.success_rates.get(id).map(|v| format!("{v}")).unwrap_or_default();
        let _ = writeln!(out, "{id},{r},{s}");
    }
    out
}

/// One row per scored window: `patient_id,timestamp,cgm,truth,verdict`.
pub fn overlay_csv(records: &[VerdictRecord]) -> String {
    let mut out = String::from("patient_id,timestamp,cgm,truth,verdict\n");
    let name = |l: Label| match l {
        Label::Benign => "benign",
        Label::Malicious => "malicious",
    };
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.patient_id, r.timestamp, r.cgm, name(r.truth), name(r.verdict));
    }
    out
}

/// Plot-data files keyed by file name.
pub fn emit_plot_data(report: &ExperimentReport) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    files.insert("recall.csv".to_string(), metric_csv(report, |m| m.recall));
    files.insert("precision.csv".to_string(), metric_csv(report, |m| m.precision));
    files.insert("f1.csv".to_string(), metric_csv(report, |m| m.f1));
    files.insert("normal_ratio.csv".to_string(), ratio_csv(report));
    files
}

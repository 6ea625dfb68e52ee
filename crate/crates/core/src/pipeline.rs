//! Configuration, staged execution and artifact bookkeeping.
//!
//! A run directory holds one subdirectory per stage plus `manifest.json`.
//! The manifest records, for every completed stage, its seed, a hash of the
//! parameters it read, and the sha256 of every input and output file. A stage
//! is reused only when all of these still match what is on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{attack_trace, attack_windows, records_from_jsonl, records_to_jsonl, success_rates, success_rates_csv, AttackParams, AttackRecord};
use crate::cluster::{agglomerate, cut_by_max_gap, label_clusters, partition_before, prepare_profiles, ClusterParams, Dendrogram, Linkage, Metric, Partition, VulnerabilityClusters};
use crate::data::types::ratio_of_states;
use crate::data::{
    generate_synthetic_cohort, heterogeneity_cohort, load_traces, windowize, write_cohort, CohortManifest, FeatureWindow, NormalRatio, PatientTrace, Split, SyntheticCohortConfig, Thresholds, TraceFormat,
};
use crate::detect::{verdicts_from_jsonl, verdicts_to_jsonl, DetectorKind, KnnParams, Label, OcsvmParams, TrainingStrategy};
use crate::error::{Error, Result};
use crate::evaluate::{collect_results, emit_plot_data, fit_all_detectors, overlay_csv, score_pool, ExperimentConfig, ExperimentReport, FittedDetector, PatientSamples, PoolSummary, RunResult, StrategyResult, TestSample};
use crate::predictor::{fit_forecaster, ForecastMode, ForecastModel, TrainConfig};
use crate::risk::{build_risk_profile, RiskProfile, SeverityTable};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    FitPredictor,
    Attack,
    Risk,
    Cluster,
    FitDetector,
    Evaluate,
    Report,
}

impl Stage {
    /// Execution order of `run-all`.
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::FitPredictor,
        Stage::Attack,
        Stage::Risk,
        Stage::Cluster,
        Stage::FitDetector,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::FitPredictor => "fit-predictor",
            Stage::Attack => "attack",
            Stage::Risk => "risk",
            Stage::Cluster => "cluster",
            Stage::FitDetector => "fit-detector",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Stages whose outputs this one reads, nearest first.
    pub fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Synth => &[],
            FitPredictor => &[Synth],
            Attack => &[FitPredictor, Synth],
            Risk => &[Attack, Synth],
            Cluster => &[Risk, Attack, Synth],
            FitDetector => &[Cluster, Attack, Synth],
            Evaluate => &[FitDetector, Attack, Synth],
            Report => &[Evaluate, Cluster, Attack, Synth],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; every stage seed derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub thresholds: Thresholds,
    pub predictor: PredictorConfig,
    pub attack: AttackParams,
    pub severity: SeverityTable,
    pub cluster: ClusterConfig,
    pub detection: DetectionConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            thresholds: Thresholds::default(),
            predictor: PredictorConfig::default(),
            attack: AttackParams::default(),
            severity: SeverityTable::default(),
            cluster: ClusterConfig::default(),
            detection: DetectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Cohort manifest of real traces. When absent the synthetic cohort is generated.
    pub manifest: Option<PathBuf>,
    /// An empty patient list means the bundled twelve-patient cohort.
    pub synthetic: SyntheticCohortConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticCohortConfig::new(0, heterogeneity_cohort()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub training: TrainConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            history_len: 12,
            horizon: 6,
            training: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScope {
    /// One tree per subset; less-vulnerable clusters are unioned.
    #[default]
    PerSubset,
    Cohort,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub scope: ClusterScope,
    pub metric: Metric,
    pub linkage: Linkage,
    pub standardize: bool,
    pub resample_len: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let p = ClusterParams::default();
        Self {
            scope: ClusterScope::default(),
            metric: p.metric,
            linkage: p.linkage,
            standardize: p.standardize,
            resample_len: p.resample_len,
        }
    }
}

impl ClusterConfig {
    pub fn params(&self) -> ClusterParams {
        ClusterParams {
            metric: self.metric,
            linkage: self.linkage,
            standardize: self.standardize,
            resample_len: self.resample_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// Keep every n-th window for detector training and testing.
    pub window_stride: usize,
    pub detectors: Vec<DetectorKind>,
    pub strategies: Vec<TrainingStrategy>,
    pub knn: KnnParams,
    pub ocsvm: OcsvmParams,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            window_stride: 3,
            detectors: e.detectors,
            strategies: e.strategies,
            knn: e.knn,
            ocsvm: e.ocsvm,
        }
    }
}

impl DetectionConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            detectors: self.detectors.clone(),
            strategies: self.strategies.clone(),
            knn: self.knn,
            ocsvm: self.ocsvm,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.attack.validate()?;
        self.severity.validate()?;
        self.predictor.training.validate()?;
        self.detection.knn.validate()?;
        self.detection.ocsvm.validate()?;
        if self.predictor.history_len == 0 || self.predictor.horizon == 0 {
            return Err(Error::Config("predictor.history_len and predictor.horizon must be positive".into()));
        }
        if self.detection.window_stride == 0 {
            return Err(Error::Config("detection.window_stride must be at least 1".into()));
        }
        if self.detection.detectors.is_empty() || self.detection.strategies.is_empty() {
            return Err(Error::Config("detection needs at least one detector and one strategy".into()));
        }
        for s in &self.detection.strategies {
            if let TrainingStrategy::RandomSamples { runs, cohort_size } = s {
                if *runs == 0 || *cohort_size == 0 {
                    return Err(Error::Config("random_samples needs positive runs and cohort_size".into()));
                }
            }
        }
        if self.data.synthetic.seed != 0 {
            return Err(Error::Config("data.synthetic.seed is derived from the root seed; set `seed` instead".into()));
        }
        if self.data.manifest.is_none() {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    fn normalize(&mut self) {
        if self.data.synthetic.patients.is_empty() {
            self.data.synthetic.patients = heterogeneity_cohort();
        }
    }
}

/// A validated config and the keys that were filled from defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: Config,
    pub defaulted: Vec<String>,
}

impl ResolvedConfig {
    pub fn defaults() -> Self {
        validate_config("").expect("default config is valid")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self.defaulted.retain(|k| k != "seed");
        self
    }
}

/// Parses TOML text, applies defaults and checks every range.
pub fn validate_config(text: &str) -> Result<ResolvedConfig> {
    let mut config: Config = toml::from_str(text)?;
    config.normalize();
    config.validate()?;
    let given: toml::Table = toml::from_str(text)?;
    let mut given_keys = BTreeSet::new();
    flatten_toml(&given, "", &mut given_keys);
    let mut all_keys = BTreeSet::new();
    flatten_json(&serde_json::to_value(&config)?, "", &mut all_keys);
    let defaulted = all_keys
        .into_iter()
        .filter(|k| !given_keys.iter().any(|g| k == g || k.starts_with(&format!("{g}."))))
        .collect();
    Ok(ResolvedConfig { config, defaulted })
}

pub fn load_config(path: Option<&Path>) -> Result<ResolvedConfig> {
    match path {
        None => validate_config(""),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            validate_config(&text)
        }
    }
}

fn join_key(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

fn flatten_toml(t: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in t {
        let key = join_key(prefix, k);
        match v {
            toml::Value::Table(sub) => flatten_toml(sub, &key, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

fn flatten_json(v: &serde_json::Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        serde_json::Value::Object(map) if !map.is_empty() => {
            for (k, sub) in map {
                flatten_json(sub, &join_key(prefix, k), out);
            }
        }
        _ => {
            out.insert(prefix.to_string());
        }
    }
}

// ---------------------------------------------------------------------------
// hashing and seeds

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Stable seed for a named stage (or any named sub-task) under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    derive_seed(root, stage.name())
}

/// Run directory of a config under `out_dir`.
pub fn run_dir_for(out_dir: &Path, config: &Config) -> PathBuf {
    out_dir.join(&config.hash()[..16])
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub params_hash: String,
    /// Run-relative path to sha256, for every upstream file read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub config: Config,
    /// Config keys filled from built-in defaults rather than the config file.
    pub defaults_applied: Vec<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn new(resolved: &ResolvedConfig) -> Self {
        Self {
            config_hash: resolved.config.hash(),
            tool_version: TOOL_VERSION.to_string(),
            config: resolved.config.clone(),
            defaults_applied: resolved.defaulted.clone(),
            stages: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRun {
    pub stage: Stage,
    pub cached: bool,
}

/// An open run directory.
pub struct Pipeline {
    dir: PathBuf,
    config: Config,
    manifest: RunManifest,
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

impl Pipeline {
    /// Opens (or creates) `dir`. An unreadable manifest is discarded with a warning.
    pub fn open(dir: impl Into<PathBuf>, resolved: ResolvedConfig) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut manifest = RunManifest::new(&resolved);
        if path.exists() {
            match fs::read_to_string(&path).map_err(|e| Error::io(&path, e)).and_then(|t| Ok(serde_json::from_str::<RunManifest>(&t)?)) {
                Ok(old) => manifest.stages = old.stages,
                Err(e) => log::warn!("ignoring unreadable manifest {}: {e}", path.display()),
            }
        }
        Ok(Self {
            dir,
            config: resolved.config,
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.name())
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        stage_seed(self.config.seed, stage)
    }

    fn params_hash(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let v = match stage {
            Stage::Synth => serde_json::to_value(&c.data)?,
            Stage::FitPredictor => serde_json::to_value(&c.predictor)?,
            Stage::Attack => serde_json::json!({
                "attack": c.attack,
                "thresholds": c.thresholds,
                "horizon": c.predictor.horizon,
                "window_stride": c.detection.window_stride,
            }),
            Stage::Risk => serde_json::json!({"severity": c.severity, "thresholds": c.thresholds}),
            Stage::Cluster => serde_json::to_value(c.cluster)?,
            Stage::FitDetector => serde_json::json!({
                "detection": c.detection,
                "history_len": c.predictor.history_len,
                "horizon": c.predictor.horizon,
            }),
            Stage::Evaluate => serde_json::json!({
                "window_stride": c.detection.window_stride,
                "history_len": c.predictor.history_len,
                "horizon": c.predictor.horizon,
            }),
            Stage::Report => serde_json::json!({"thresholds": c.thresholds}),
        };
        Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
    }

    /// Current hashes of every file this stage reads. Fails naming the first
    /// upstream stage that has not run or whose outputs are gone.
    pub fn input_hashes(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for &up in stage.upstream() {
            let record = self.manifest.stages.get(up.name()).ok_or_else(|| Error::MissingArtifact {
                stage: up.name().to_string(),
                path: self.stage_dir(up),
            })?;
            for (rel, recorded) in &record.outputs {
                let path = self.dir.join(rel);
                if !path.is_file() {
                    return Err(Error::MissingArtifact {
                        stage: up.name().to_string(),
                        path,
                    });
                }
                let h = hash_file(&path)?;
                if &h != recorded {
                    log::warn!("{rel} changed since stage {up} wrote it");
                }
                inputs.insert(rel.clone(), h);
            }
        }
        if stage == Stage::Synth {
            if let Some(m) = &self.config.data.manifest {
                inputs.extend(external_inputs(m)?);
            }
        }
        Ok(inputs)
    }

    pub fn stage_cache_lookup(&self, stage: Stage) -> Result<CacheStatus> {
        let inputs = self.input_hashes(stage)?;
        let Some(record) = self.manifest.stages.get(stage.name()) else {
            return Ok(CacheStatus::Miss("never run".into()));
        };
        if record.seed != self.seed(stage) || record.params_hash != self.params_hash(stage)? {
            return Ok(CacheStatus::Miss("parameters changed".into()));
        }
        if record.inputs != inputs {
            return Ok(CacheStatus::Miss("inputs changed".into()));
        }
        for (rel, recorded) in &record.outputs {
            let path = self.dir.join(rel);
            if !path.is_file() {
                log::warn!("stage {stage}: artifact {rel} was deleted; recomputing");
                return Ok(CacheStatus::Miss(format!("{rel} missing")));
            }
            if &hash_file(&path)? != recorded {
                log::warn!("stage {stage}: artifact {rel} was modified; recomputing");
                return Ok(CacheStatus::Miss(format!("{rel} modified")));
            }
        }
        Ok(CacheStatus::Hit)
    }

    /// Runs one stage unless its cached outputs are still valid.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageRun> {
        if let CacheStatus::Miss(reason) = self.stage_cache_lookup(stage)? {
            log::info!("stage {stage}: running ({reason})");
            self.execute(stage)?;
            Ok(StageRun { stage, cached: false })
        } else {
            log::info!("stage {stage}: cached");
            Ok(StageRun { stage, cached: true })
        }
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<StageRun>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        let inputs = self.input_hashes(stage)?;
        if self.manifest.stages.remove(stage.name()).is_some() {
            self.save_manifest()?;
        }
        let out = self.stage_dir(stage);
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        }
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let seed = self.seed(stage);
        match stage {
            Stage::Synth => self.synth(seed)?,
            Stage::FitPredictor => self.fit_predictor(seed)?,
            Stage::Attack => self.attack()?,
            Stage::Risk => self.risk()?,
            Stage::Cluster => self.cluster()?,
            Stage::FitDetector => self.fit_detector(seed)?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Report => self.report()?,
        }
        let mut files = Vec::new();
        list_files(&self.dir, &out, &mut files)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            outputs.insert(rel_string(&f), hash_file(&self.dir.join(&f))?);
        }
        let record = StageRecord {
            seed,
            params_hash: self.params_hash(stage)?,
            inputs,
            outputs,
        };
        self.manifest.stages.insert(stage.name().to_string(), record);
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Problems found by re-hashing every recorded artifact; empty when the chain is intact.
    pub fn verify(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, record) in &self.manifest.stages {
            for (rel, h) in &record.outputs {
                match hash_file(&self.dir.join(rel)) {
                    Ok(now) if &now == h => {}
                    Ok(_) => problems.push(format!("{name}: {rel} modified")),
                    Err(_) => problems.push(format!("{name}: {rel} missing")),
                }
            }
            let Some(stage) = Stage::from_name(name) else {
                problems.push(format!("unknown stage {name}"));
                continue;
            };
            for &up in stage.upstream() {
                let Some(up_record) = self.manifest.stages.get(up.name()) else {
                    problems.push(format!("{name}: upstream {up} not recorded"));
                    continue;
                };
                for (rel, h) in &up_record.outputs {
                    if record.inputs.get(rel) != Some(h) {
                        problems.push(format!("{name}: input {rel} differs from what {up} recorded"));
                    }
                }
            }
        }
        problems
    }

    // -----------------------------------------------------------------------
    // artifact io

    fn path(&self, stage: Stage, rel: &str) -> PathBuf {
        self.stage_dir(stage).join(rel)
    }

    fn write(&self, stage: Stage, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(stage, rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    fn write_json<T: Serialize>(&self, stage: Stage, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(stage, rel, text)
    }

    fn read(&self, stage: Stage, rel: &str) -> Result<String> {
        let path = self.path(stage, rel);
        fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                stage: stage.name().to_string(),
                path: path.clone(),
            },
            _ => Error::io(&path, e),
        })
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, stage: Stage, rel: &str) -> Result<T> {
        Ok(serde_json::from_str(&self.read(stage, rel)?)?)
    }

    /// (train, test) traces by patient id.
    fn cohort(&self) -> Result<BTreeMap<String, (PatientTrace, PatientTrace)>> {
        let path = self.path(Stage::Synth, "manifest.json");
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                stage: Stage::Synth.name().to_string(),
                path,
            });
        }
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for t in load_traces(&path, TraceFormat::Manifest)? {
            match t.split {
                Split::Train => train.insert(t.patient_id.clone(), t),
                Split::Test => test.insert(t.patient_id.clone(), t),
            };
        }
        let mut out = BTreeMap::new();
        for (id, tr) in train {
            let te = test
                .remove(&id)
                .ok_or_else(|| Error::Config(format!("patient {id} has no test trace")))?;
            out.insert(id, (tr, te));
        }
        if let Some(id) = test.keys().next() {
            return Err(Error::Config(format!("patient {id} has no training trace")));
        }
        Ok(out)
    }

    fn attack_records(&self, rel: &str) -> Result<BTreeMap<String, Vec<AttackRecord>>> {
        let mut by: BTreeMap<String, Vec<AttackRecord>> = BTreeMap::new();
        for r in records_from_jsonl(&self.read(Stage::Attack, rel)?)? {
            by.entry(r.patient_id.clone()).or_default().push(r);
        }
        Ok(by)
    }

    fn success_rate_map(&self) -> Result<BTreeMap<String, f64>> {
        let records: Vec<AttackRecord> = self.attack_records("personalized.jsonl")?.into_values().flatten().collect();
        success_rates(&records, None)
            .into_iter()
            .map(|p| {
                let rate = p.total().rate().ok_or_else(|| Error::MissingSuccessRate(p.patient_id.clone()))?;
                Ok((p.patient_id, rate))
            })
            .collect()
    }

    fn strided_windows(&self, trace: &PatientTrace) -> Result<Vec<crate::data::LabeledWindow>> {
        let p = &self.config.predictor;
        Ok(windowize(trace, p.history_len, p.horizon)?
            .into_iter()
            .step_by(self.config.detection.window_stride)
            .collect())
    }

    // -----------------------------------------------------------------------
    // stages

    fn synth(&self, seed: u64) -> Result<()> {
        let traces = match &self.config.data.manifest {
            Some(m) => load_traces(m, TraceFormat::Manifest)?,
            None => {
                let mut cfg = self.config.data.synthetic.clone();
                cfg.seed = seed;
                generate_synthetic_cohort(&cfg)?
            }
        };
        write_cohort(&self.stage_dir(Stage::Synth), &traces)?;
        Ok(())
    }

    fn fit_predictor(&self, seed: u64) -> Result<()> {
        let cohort = self.cohort()?;
        let p = &self.config.predictor;
        let personalized: Vec<(String, ForecastModel)> = cohort
            .par_iter()
            .map(|(id, (train, _))| {
                let tc = TrainConfig {
                    seed: derive_seed(seed, &format!("personalized/{id}")),
                    ..p.training.clone()
                };
                let mode = ForecastMode::Personalized { patient_id: id.clone() };
                Ok((id.clone(), fit_forecaster(std::slice::from_ref(train), mode, p.history_len, p.horizon, &tc)?))
            })
            .collect::<Result<_>>()?;
        for (id, model) in &personalized {
            log::info!("personalized forecaster {id}: training rmse {:.2}", model.training_rmse);
            self.write(Stage::FitPredictor, &format!("personalized/{id}.json"), model.to_json()?)?;
        }
        let train: Vec<PatientTrace> = cohort.values().map(|(tr, _)| tr.clone()).collect();
        let tc = TrainConfig {
            seed: derive_seed(seed, "aggregate"),
            ..p.training.clone()
        };
        let aggregate = fit_forecaster(&train, ForecastMode::Aggregate, p.history_len, p.horizon, &tc)?;
        log::info!("aggregate forecaster: training rmse {:.2}", aggregate.training_rmse);
        self.write(Stage::FitPredictor, "aggregate.json", aggregate.to_json()?)
    }

    fn load_model(&self, rel: &str) -> Result<ForecastModel> {
        ForecastModel::from_json(&self.read(Stage::FitPredictor, rel)?)
    }

    fn attack(&self) -> Result<()> {
        let cohort = self.cohort()?;
        let c = &self.config;
        let mut personal = Vec::new();
        for (id, (_, test)) in &cohort {
            let model = self.load_model(&format!("personalized/{id}.json"))?;
            personal.extend(attack_trace(&model, test, c.predictor.horizon, &c.attack, &c.thresholds)?);
        }
        self.write(Stage::Attack, "personalized.jsonl", records_to_jsonl(&personal)?)?;
        self.write(Stage::Attack, "success_rates.csv", success_rates_csv(&success_rates(&personal, None)))?;

        let aggregate = self.load_model("aggregate.json")?;
        let (mut on_train, mut on_test) = (Vec::new(), Vec::new());
        for (train, test) in cohort.values() {
            on_train.extend(attack_windows(&aggregate, &self.strided_windows(train)?, &c.attack, &c.thresholds)?);
            on_test.extend(attack_windows(&aggregate, &self.strided_windows(test)?, &c.attack, &c.thresholds)?);
        }
        self.write(Stage::Attack, "aggregate_train.jsonl", records_to_jsonl(&on_train)?)?;
        self.write(Stage::Attack, "aggregate_test.jsonl", records_to_jsonl(&on_test)?)
    }

    fn risk(&self) -> Result<()> {
        let cohort = self.cohort()?;
        let records = self.attack_records("personalized.jsonl")?;
        for (id, (_, test)) in &cohort {
            let recs = records.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let profile = build_risk_profile(test, recs, &self.config.severity, &self.config.thresholds)?;
            self.write(Stage::Risk, &format!("{id}.csv"), profile.to_csv())?;
        }
        Ok(())
    }

    fn cluster(&self) -> Result<()> {
        let cohort = self.cohort()?;
        let rates = self.success_rate_map()?;
        let mut groups: BTreeMap<String, Vec<RiskProfile>> = BTreeMap::new();
        for (id, (_, test)) in &cohort {
            let profile = RiskProfile::from_csv(id, &self.read(Stage::Risk, &format!("{id}.csv"))?)?;
            let group = match self.config.cluster.scope {
                ClusterScope::PerSubset => format!("{:?}", test.subset),
                ClusterScope::Cohort => "cohort".to_string(),
            };
            groups.entry(group).or_default().push(profile);
        }
        let params = self.config.cluster.params();
        let mut partitions: BTreeMap<String, Partition> = BTreeMap::new();
        let mut labeled = Vec::new();
        for (group, profiles) in &groups {
            if profiles.len() < 2 {
                return Err(Error::TooFewProfiles(profiles.len()));
            }
            let ids: Vec<String> = profiles.iter().map(|p| p.patient_id.clone()).collect();
            let vectors = prepare_profiles(profiles, &params)?;
            let d: Dendrogram = agglomerate(&ids, &vectors, params.metric, params.linkage)?;
            let mut partition = cut_by_max_gap(&d);
            if partition.len() != 2 {
                log::warn!(
                    "group {group}: largest gap gives {} clusters; using the top-level split",
                    partition.len()
                );
                partition = partition_before(&d, d.merges.len() - 1);
            }
            self.write_json(Stage::Cluster, &format!("dendrogram_{group}.json"), &d)?;
            self.write(Stage::Cluster, &format!("dendrogram_{group}.nwk"), format!("{}\n", d.to_newick()))?;
            labeled.push(label_clusters(&partition, &rates)?);
            partitions.insert(group.clone(), partition);
        }
        let clusters = union_clusters(&labeled, &rates);
        self.write_json(Stage::Cluster, "partitions.json", &partitions)?;
        self.write_json(Stage::Cluster, "success_rates.json", &rates)?;
        self.write_json(Stage::Cluster, "clusters.json", &clusters)
    }

    fn detector_samples(&self) -> Result<BTreeMap<String, PatientSamples>> {
        let cohort = self.cohort()?;
        let mut attacked = self.attack_records("aggregate_train.jsonl")?;
        let mut out = BTreeMap::new();
        for (id, (train, _)) in &cohort {
            let benign = self.strided_windows(train)?.into_iter().map(|w| w.features).collect();
            let malicious = successful_windows(attacked.remove(id).unwrap_or_default());
            out.insert(id.clone(), PatientSamples { benign, malicious });
        }
        Ok(out)
    }

    fn test_pool(&self) -> Result<Vec<TestSample>> {
        let cohort = self.cohort()?;
        let mut attacked = self.attack_records("aggregate_test.jsonl")?;
        let mut pool = Vec::new();
        for (id, (_, test)) in &cohort {
            for w in self.strided_windows(test)? {
                pool.push(TestSample {
                    patient_id: id.clone(),
                    timestamp: w.timestamp,
                    truth: Label::Benign,
                    window: w.features,
                });
            }
            for r in attacked.remove(id).unwrap_or_default() {
                if r.outcome.success() {
                    pool.push(TestSample {
                        patient_id: r.patient_id,
                        timestamp: r.timestamp,
                        truth: Label::Malicious,
                        window: r.outcome.adversarial_window,
                    });
                }
            }
        }
        Ok(pool)
    }

    fn fit_detector(&self, seed: u64) -> Result<()> {
        let clusters: VulnerabilityClusters = self.read_json(Stage::Cluster, "clusters.json")?;
        let training = self.detector_samples()?;
        let fitted = fit_all_detectors(&self.config.detection.experiment(), &clusters, &training, seed)?;
        let mut index = Vec::new();
        for (kind, f) in &fitted {
            let name = model_name(*kind, &f.strategy, f.run);
            self.write(Stage::FitDetector, &format!("models/{name}.json"), serde_json::to_string(f)?)?;
            index.push(name);
        }
        self.write_json(Stage::FitDetector, "index.json", &index)
    }

    fn evaluate(&self) -> Result<()> {
        let index: Vec<String> = self.read_json(Stage::FitDetector, "index.json")?;
        let pool = self.test_pool()?;
        if pool.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let mut scored = Vec::new();
        for name in &index {
            let f: FittedDetector = self.read_json(Stage::FitDetector, &format!("models/{name}.json"))?;
            let (_, verdicts) = score_pool(&f.detector, &pool)?;
            let run = RunResult::from_verdicts(f.cohort.clone(), f.train_benign, f.train_malicious, &verdicts)?;
            self.write(Stage::Evaluate, &format!("verdicts/{name}.jsonl"), verdicts_to_jsonl(&verdicts)?)?;
            scored.push((f.detector.kind(), f.strategy, run));
        }
        let results: Vec<StrategyResult> = collect_results(scored);
        let summary = PoolSummary {
            benign: pool.iter().filter(|s| s.truth == Label::Benign).count(),
            malicious: pool.iter().filter(|s| s.truth == Label::Malicious).count(),
        };
        self.write_json(Stage::Evaluate, "pool.json", &summary)?;
        self.write_json(Stage::Evaluate, "results.json", &results)
    }

    fn report(&self) -> Result<()> {
        let cohort = self.cohort()?;
        let results: Vec<StrategyResult> = self.read_json(Stage::Evaluate, "results.json")?;
        let test_pool: PoolSummary = self.read_json(Stage::Evaluate, "pool.json")?;
        let clusters: VulnerabilityClusters = self.read_json(Stage::Cluster, "clusters.json")?;
        let success: BTreeMap<String, f64> = self.read_json(Stage::Cluster, "success_rates.json")?;
        let th = &self.config.thresholds;
        let normal_ratios: BTreeMap<String, NormalRatio> = cohort
            .iter()
            .map(|(id, (train, test))| {
                let mut states = train.states(th);
                states.extend(test.states(th));
                (id.clone(), ratio_of_states(&states))
            })
            .collect();
        let inputs = ["evaluate/results.json", "evaluate/pool.json", "cluster/clusters.json", "cluster/success_rates.json", "synth/manifest.json"]
            .iter()
            .map(|rel| Ok((rel.to_string(), hash_file(&self.dir.join(rel))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let seeds = Stage::ALL.iter().map(|&s| (s.name().to_string(), self.seed(s))).collect();
        let report = ExperimentReport {
            seeds,
            inputs,
            clusters,
            success_rates: success,
            normal_ratios,
            test_pool,
            results,
        };
        self.write(Stage::Report, "report.json", report.to_json()?)?;
        self.write(Stage::Report, "report.md", report.to_markdown())?;
        for (file, text) in emit_plot_data(&report) {
            self.write(Stage::Report, &format!("plots/{file}"), text)?;
        }
        for r in &report.results {
            let name = model_name(r.detector, &r.strategy, 0);
            let verdicts = verdicts_from_jsonl(&self.read(Stage::Evaluate, &format!("verdicts/{name}.jsonl"))?)?;
            self.write(
                Stage::Report,
                &format!("plots/overlay_{}_{}.csv", r.detector.name(), r.strategy.name()),
                overlay_csv(&verdicts),
            )?;
        }
        Ok(())
    }

    /// The persisted experiment report.
    pub fn load_report(&self) -> Result<ExperimentReport> {
        ExperimentReport::from_json(&self.read(Stage::Report, "report.json")?)
    }
}

fn model_name(kind: DetectorKind, strategy: &TrainingStrategy, run: usize) -> String {
    format!("{}_{}_{run}", kind.name(), strategy.name())
}

fn successful_windows(records: Vec<AttackRecord>) -> Vec<FeatureWindow> {
    records
        .into_iter()
        .filter(|r| r.outcome.success())
        .map(|r| r.outcome.adversarial_window)
        .collect()
}

/// Merges per-group labelings into one cohort-wide labeling.
fn union_clusters(groups: &[VulnerabilityClusters], rates: &BTreeMap<String, f64>) -> VulnerabilityClusters {
    let mut less: Vec<String> = groups.iter().flat_map(|g| g.less_vulnerable.iter().cloned()).collect();
    let mut more: Vec<String> = groups.iter().flat_map(|g| g.more_vulnerable.iter().cloned()).collect();
    less.sort();
    more.sort();
    let mean = |ids: &[String]| {
        if ids.is_empty() {
            0.0
        } else {
            ids.iter().map(|id| rates[id]).sum::<f64>() / ids.len() as f64
        }
    };
    VulnerabilityClusters {
        less_mean_success: mean(&less),
        more_mean_success: mean(&more),
        less_vulnerable: less,
        more_vulnerable: more,
        tie_broken: groups.iter().any(|g| g.tie_broken),
    }
}

/// Hashes of an external cohort manifest and every trace file it lists.
fn external_inputs(manifest: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let parsed: CohortManifest = serde_json::from_str(&text)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    out.insert(manifest.display().to_string(), sha256_hex(text.as_bytes()));
    for e in &parsed.traces {
        let p = base.join(&e.file);
        out.insert(p.display().to_string(), hash_file(&p)?);
    }
    Ok(out)
}

//! Fixtures shared by the benchmarks.

use riskguard_core::data::{
    generate_synthetic_cohort, heterogeneity_cohort, windowize, FeatureWindow, LabeledWindow, PatientTrace, Split, SyntheticCohortConfig,
};
use riskguard_core::predictor::{fit_forecaster, ForecastMode, ForecastModel, TrainConfig};

pub const HISTORY: usize = 12;
pub const HORIZON: usize = 6;

/// Train and test traces of the first `patients` bundled patients.
pub fn traces(patients: usize, train_len: usize) -> (Vec<PatientTrace>, Vec<PatientTrace>) {
    let mut cfg = SyntheticCohortConfig::new(7, heterogeneity_cohort().into_iter().take(patients).collect());
    cfg.train_len = train_len;
    cfg.test_len = train_len / 2;
    let all = generate_synthetic_cohort(&cfg).expect("synthetic cohort");
    all.into_iter().partition(|t| t.split == Split::Train)
}

pub fn windows(trace: &PatientTrace) -> Vec<LabeledWindow> {
    windowize(trace, HISTORY, HORIZON).expect("windows")
}

pub fn features(traces: &[PatientTrace]) -> Vec<FeatureWindow> {
    traces.iter().flat_map(|t| windows(t).into_iter().map(|w| w.features)).collect()
}

/// A small aggregate forecaster, quick to fit.
pub fn forecaster(train: &[PatientTrace]) -> ForecastModel {
    let cfg = TrainConfig {
        hidden: 8,
        max_epochs: 30,
        ..TrainConfig::default()
    };
    fit_forecaster(train, ForecastMode::Aggregate, HISTORY, HORIZON, &cfg).expect("forecaster")
}

//! Traces, diagnostic states, ingestion and synthetic cohorts.

pub mod io;
pub mod synth;
pub mod types;
pub mod window;

pub use io::{load_traces, write_cohort, CohortManifest, ManifestEntry, TraceFormat};
pub use synth::{generate_synthetic_cohort, heterogeneity_cohort, SyntheticCohortConfig, SyntheticPatient};
pub use types::{
    classify_state, normal_to_abnormal_ratio, DiagnosticState, GlucoseSample, MealContext,
    NormalRatio, PatientTrace, Split, Subset, Thresholds, CGM_MAX, POSTPRANDIAL_WINDOW_SECS,
};
pub use window::{windowize, FeatureWindow, LabeledWindow, CGM, FEATURES, N_FEATURES};

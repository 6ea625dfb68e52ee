use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::VulnerabilityClusters;
use crate::error::{Error, Result};

/// Whose data trains a detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainingStrategy {
    LessVulnerable,
    MoreVulnerable,
    RandomSamples { runs: usize, cohort_size: usize },
    AllPatients,
}

impl TrainingStrategy {
    pub const RANDOM_SAMPLES: TrainingStrategy = TrainingStrategy::RandomSamples { runs: 10, cohort_size: 3 };

    /// The four strategies compared in the experiment.
    pub fn standard() -> Vec<TrainingStrategy> {
        vec![
            TrainingStrategy::LessVulnerable,
            TrainingStrategy::MoreVulnerable,
            TrainingStrategy::RANDOM_SAMPLES,
            TrainingStrategy::AllPatients,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainingStrategy::LessVulnerable => "less_vulnerable",
            TrainingStrategy::MoreVulnerable => "more_vulnerable",
            TrainingStrategy::RandomSamples { .. } => "random_samples",
            TrainingStrategy::AllPatients => "all_patients",
        }
    }
}

/// Training cohorts (sorted patient ids) for a strategy. Every strategy yields
/// one cohort except `RandomSamples`, which yields one per run, drawn from
/// `seed`.
pub fn select_training_set(
    strategy: &TrainingStrategy,
    clusters: &VulnerabilityClusters,
    patient_ids: &[String],
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    let mut all = patient_ids.to_vec();
    all.sort();
    all.dedup();
    let sorted = |v: &[String]| {
        let mut v = v.to_vec();
        v.sort();
        v
    };
    Ok(match *strategy {
        TrainingStrategy::LessVulnerable => vec![sorted(&clusters.less_vulnerable)],
        TrainingStrategy::MoreVulnerable => vec![sorted(&clusters.more_vulnerable)],
        TrainingStrategy::AllPatients => vec![all],
        TrainingStrategy::RandomSamples { runs, cohort_size } => {
            if cohort_size == 0 || cohort_size > all.len() {
                return Err(Error::CohortTooSmall {
                    needed: cohort_size,
                    available: all.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..runs)
                .map(|_| {
                    let mut idx = rand::seq::index::sample(&mut rng, all.len(), cohort_size).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| all[i].clone()).collect()
                })
                .collect()
        }
    })
}

//! Synthetic cohort generator.
//!
//! Each patient is one continuous simulation split into a train and a test
//! trace. Glucose is `center + amplitude * latent + sensor noise`, where the
//! latent signal is an AR(1) process plus meal responses. The amplitude is
//! solved per patient by bisection so the realized fraction of Normal
//! samples hits the configured `normal_fraction`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::types::{
    normal_fraction, GlucoseSample, PatientTrace, Split, Subset, Thresholds, DEFAULT_CADENCE,
};
use crate::error::{Error, Result};

/// Realized normal fraction must land this close to the target.
pub const NORMAL_FRACTION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPatient {
    pub id: String,
    #[serde(default = "default_subset")]
    pub subset: Subset,
    /// Target fraction of Normal-state samples, in (0, 1).
    pub normal_fraction: f64,
    /// Overrides the cohort-wide glucose center (mg/dL).
    #[serde(default)]
    pub center: Option<f64>,
}

fn default_subset() -> Subset {
    Subset::Synthetic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCohortConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub patients: Vec<SyntheticPatient>,
    #[serde(default = "d_train_len")]
    pub train_len: usize,
    #[serde(default = "d_test_len")]
    pub test_len: usize,
    #[serde(default = "d_cadence")]
    pub cadence: u32,
    /// Glucose level the latent signal oscillates around, mg/dL.
    #[serde(default = "d_center")]
    pub center: f64,
    /// Latent rise per 50 g of carbs at the response peak.
    #[serde(default = "d_meal_gain")]
    pub meal_gain: f64,
    /// Minutes from carb intake to peak glucose response.
    #[serde(default = "d_meal_peak")]
    pub meal_peak_minutes: f64,
    /// Per-step AR(1) coefficient of the latent drift.
    #[serde(default = "d_ar")]
    pub ar_coefficient: f64,
    /// Standard deviation of additive sensor noise, mg/dL.
    #[serde(default = "d_noise")]
    pub sensor_noise: f64,
}

fn d_train_len() -> usize {
    2016
}
fn d_test_len() -> usize {
    1152
}
fn d_cadence() -> u32 {
    DEFAULT_CADENCE
}
fn d_center() -> f64 {
    105.0
}
fn d_meal_gain() -> f64 {
    1.5
}
fn d_meal_peak() -> f64 {
    60.0
}
fn d_ar() -> f64 {
    0.8
}
fn d_noise() -> f64 {
    2.0
}

/// Twelve patients in two subsets of six; three (A-p5, B-p1, B-p2) keep tight glycemic control.
pub fn heterogeneity_cohort() -> Vec<SyntheticPatient> {
    let plan = [
        (Subset::A, [0.6, 0.5, 0.65, 0.55, 0.7, 0.98]),
        (Subset::B, [0.6, 0.98, 0.98, 0.5, 0.7, 0.65]),
    ];
    plan.iter()
        .flat_map(|(subset, fractions)| {
            fractions.iter().enumerate().map(move |(i, &nf)| SyntheticPatient {
                id: format!("{subset:?}-p{i}"),
                subset: *subset,
                normal_fraction: nf,
                center: None,
            })
        })
        .collect()
}

impl SyntheticCohortConfig {
    pub fn new(seed: u64, patients: Vec<SyntheticPatient>) -> Self {
        Self {
            seed,
            patients,
            train_len: d_train_len(),
            test_len: d_test_len(),
            cadence: d_cadence(),
            center: d_center(),
            meal_gain: d_meal_gain(),
            meal_peak_minutes: d_meal_peak(),
            ar_coefficient: d_ar(),
            sensor_noise: d_noise(),
        }
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn validate(&self) -> Result<()> {
        let th = Thresholds::default();
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.patients {
            if !(p.normal_fraction > 0.0 && p.normal_fraction < 1.0) {
                return Err(Error::Infeasible(format!(
                    "patient {}: normal_fraction {} must lie in (0, 1)",
                    p.id, p.normal_fraction
                )));
            }
            let center = p.center.unwrap_or(self.center);
            if !(center >= th.hypo && center <= th.hyper_fasting) {
                return Err(Error::Infeasible(format!(
                    "patient {}: center {center} mg/dL must lie in the normal band",
                    p.id
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Infeasible(format!("duplicate patient id {}", p.id)));
            }
        }
        if self.train_len == 0 || self.test_len == 0 || self.cadence == 0 {
            return Err(Error::Infeasible("trace lengths and cadence must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(Error::Infeasible("ar_coefficient must lie in [0, 1)".into()));
        }
        if self.sensor_noise < 0.0 || self.meal_gain < 0.0 || self.meal_peak_minutes <= 0.0 {
            return Err(Error::Infeasible("noise, meal gain and meal peak must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generates a train and a test trace per configured patient, in config order.
pub fn generate_synthetic_cohort(config: &SyntheticCohortConfig) -> Result<Vec<PatientTrace>> {
    config.validate()?;
    let mut out = Vec::with_capacity(2 * config.n_patients());
    for (index, patient) in config.patients.iter().enumerate() {
        let (train, test) = generate_patient(config, index, patient)?;
        out.push(train);
        out.push(test);
    }
    Ok(out)
}

struct Schedule {
    basal: Vec<f64>,
    bolus: Vec<f64>,
    carbs: Vec<f64>,
    latent: Vec<f64>,
    noise: Vec<f64>,
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"synthetic-patient");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

fn simulate(config: &SyntheticCohortConfig, rng: &mut ChaCha8Rng) -> Schedule {
    let len = config.train_len + config.test_len;
    let cadence = f64::from(config.cadence);
    let steps_per_day = (86_400.0 / cadence).round() as usize;
    let minutes = |m: f64| m * 60.0 / cadence;

    let mut carbs = vec![0.0; len];
    let mut bolus = vec![0.0; len];
    let jitter = Normal::new(0.0, minutes(20.0)).expect("finite");
    let main_meal = Uniform::new(30.0, 80.0).expect("valid range");
    let snack = Uniform::new(10.0, 25.0).expect("valid range");
    let days = len.div_ceil(steps_per_day.max(1));
    for day in 0..days {
        let base = day * steps_per_day;
        let mut meals = vec![(7.0 * 60.0, main_meal.sample(rng)), (12.5 * 60.0, main_meal.sample(rng)), (19.0 * 60.0, main_meal.sample(rng))];
        if rng.random_bool(0.3) {
            meals.push((15.5 * 60.0, snack.sample(rng)));
        }
        for (at_minute, grams) in meals {
            let offset = minutes(at_minute) + jitter.sample(rng);
            let idx = base as f64 + offset.round();
            if idx >= 0.0 && (idx as usize) < len {
                let idx = idx as usize;
                let grams = f64::round(grams);
                carbs[idx] += grams;
                // insulin-to-carb ratio of 10 g/U
                bolus[idx] += grams / 10.0;
            }
        }
    }

    let basal_rate: f64 = rng.random_range(0.6..1.3);
    let basal = (0..len)
        .map(|k| {
            let hour = (k % steps_per_day.max(1)) as f64 * cadence / 3600.0;
            let rate = if (4.0..8.0).contains(&hour) { basal_rate * 1.2 } else { basal_rate };
            (rate * 100.0).round() / 100.0
        })
        .collect();

    let phi = config.ar_coefficient;
    let innovation = Normal::new(0.0, (1.0 - phi * phi).sqrt()).expect("finite");
    let mut drift = Vec::with_capacity(len);
    let mut e = innovation.sample(rng) / (1.0 - phi * phi).sqrt().max(1e-12);
    for _ in 0..len {
        e = phi * e + innovation.sample(rng);
        drift.push(e);
    }

    let peak = minutes(config.meal_peak_minutes).max(1.0);
    let reach = (peak * 4.0).ceil() as usize;
    let mut latent = drift;
    for (k, &g) in carbs.iter().enumerate() {
        if g <= 0.0 {
            continue;
        }
        let scale = g / 50.0 * config.meal_gain;
        for tau in 1..=reach {
            if k + tau >= len {
                break;
            }
            let x = tau as f64 / peak;
            latent[k + tau] += scale * x * (1.0 - x).exp();
        }
    }

    let noise = if config.sensor_noise > 0.0 {
        let n = Normal::new(0.0, config.sensor_noise).expect("finite");
        (0..len).map(|_| n.sample(rng)).collect()
    } else {
        vec![0.0; len]
    };

    Schedule {
        basal,
        bolus,
        carbs,
        latent,
        noise,
    }
}

fn glucose(schedule: &Schedule, center: f64, amplitude: f64) -> Vec<f64> {
    schedule
        .latent
        .iter()
        .zip(&schedule.noise)
        .map(|(l, n)| (center + amplitude * l + n).round().clamp(40.0, 400.0))
        .collect()
}

fn build_trace(
    config: &SyntheticCohortConfig,
    patient: &SyntheticPatient,
    schedule: &Schedule,
    cgm: &[f64],
    range: std::ops::Range<usize>,
    split: Split,
) -> Result<PatientTrace> {
    let samples = range
        .map(|k| GlucoseSample::new(k as i64 * i64::from(config.cadence), cgm[k], schedule.basal[k], schedule.bolus[k], schedule.carbs[k]))
        .collect();
    PatientTrace::new(patient.id.clone(), patient.subset, split, config.cadence, samples)
}

fn realized_fraction(config: &SyntheticCohortConfig, patient: &SyntheticPatient, schedule: &Schedule, cgm: &[f64]) -> Result<f64> {
    let len = cgm.len();
    let whole = build_trace(config, patient, schedule, cgm, 0..len, Split::Train)?;
    Ok(normal_fraction(&whole.states(&Thresholds::default())))
}

fn generate_patient(config: &SyntheticCohortConfig, index: usize, patient: &SyntheticPatient) -> Result<(PatientTrace, PatientTrace)> {
    let mut rng = patient_rng(config.seed, index);
    let schedule = simulate(config, &mut rng);
    let center = patient.center.unwrap_or(config.center);
    let target = patient.normal_fraction;

    // normal fraction falls as the amplitude grows
    let (mut lo, mut hi) = (0.0f64, 400.0f64);
    let at_hi = realized_fraction(config, patient, &schedule, &glucose(&schedule, center, hi))?;
    if at_hi > target {
        return Err(Error::Infeasible(format!(
            "patient {}: normal_fraction {target} is unreachable (floor {at_hi:.3})",
            patient.id
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = realized_fraction(config, patient, &schedule, &glucose(&schedule, center, mid))?;
        if f >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let candidates = [lo, hi];
    let mut best = (f64::INFINITY, lo);
    for a in candidates {
        let f = realized_fraction(config, patient, &schedule, &glucose(&schedule, center, a))?;
        if (f - target).abs() < best.0 {
            best = ((f - target).abs(), a);
        }
    }
    if best.0 > NORMAL_FRACTION_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "patient {}: closest normal fraction misses {target} by {:.3}",
            patient.id, best.0
        )));
    }
    let cgm = glucose(&schedule, center, best.1);
    let train = build_trace(config, patient, &schedule, &cgm, 0..config.train_len, Split::Train)?;
    let test = build_trace(
        config,
        patient,
        &schedule,
        &cgm,
        config.train_len..config.train_len + config.test_len,
        Split::Test,
    )?;
    Ok((train, test))
}

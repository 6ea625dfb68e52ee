//! Checks shared by the unit-level test targets and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskguard_core::attack::{AttackOutcome, AttackRecord, AttackStatus};
use riskguard_core::data::{DiagnosticState, FeatureWindow, GlucoseSample, MealContext, PatientTrace, Split, Subset, Thresholds};
use riskguard_core::risk::{build_risk_profile, instantaneous_risk, RiskProfile, SeverityTable};

use DiagnosticState::*;

/// Rows benign, columns adversarial, order Hypo, Normal, Hyper.
const TABLE: [[f64; 3]; 3] = [[1.0, 16.0, 64.0], [2.0, 1.0, 32.0], [8.0, 4.0, 1.0]];

fn index(s: DiagnosticState) -> usize {
    match s {
        Hypo => 0,
        Normal => 1,
        Hyper => 2,
    }
}

fn state(g: f64, fed: bool) -> DiagnosticState {
    let hyper = if fed { 180.0 } else { 125.0 };
    if g > hyper {
        Hyper
    } else if g < 70.0 {
        Hypo
    } else {
        Normal
    }
}

pub fn hand_computed_substitutions() {
    let t = SeverityTable::default();
    // 100 -> 130 fasting: Normal -> Hyper, 32 * 30^2
    assert_eq!(instantaneous_risk(&t, 100.0, 130.0, Normal, Hyper), 28_800.0);
    // 60 -> 190 postprandial: Hypo -> Hyper, 64 * 130^2
    assert_eq!(instantaneous_risk(&t, 60.0, 190.0, Hypo, Hyper), 1_081_600.0);
    // 65 -> 75: Hypo -> Normal, 16 * 10^2
    assert_eq!(instantaneous_risk(&t, 65.0, 75.0, Hypo, Normal), 1_600.0);
    // 150 -> 60: Hyper -> Hypo, 8 * 90^2
    assert_eq!(instantaneous_risk(&t, 150.0, 60.0, Hyper, Hypo), 64_800.0);
    // 200 -> 100 postprandial: Hyper -> Normal, 4 * 100^2
    assert_eq!(instantaneous_risk(&t, 200.0, 100.0, Hyper, Normal), 40_000.0);
    // 80 -> 69.5: Normal -> Hypo, 2 * 10.5^2
    assert_eq!(instantaneous_risk(&t, 80.0, 69.5, Normal, Hypo), 220.5);
    // unchanged state, 1 * 5^2
    assert_eq!(instantaneous_risk(&t, 100.0, 105.0, Normal, Normal), 25.0);
    assert_eq!(instantaneous_risk(&t, 100.0, 100.0, Normal, Normal), 0.0);
}

pub fn profiles_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let th = Thresholds::default();
    for case in 0..50 {
        let n = rng.random_range(30..200);
        let samples: Vec<GlucoseSample> = (0..n)
            .map(|i| {
                let carbs = if rng.random_bool(0.04) { rng.random_range(10.0..80.0) } else { 0.0 };
                GlucoseSample::new(i as i64 * 300, rng.random_range(50.0..250.0), 1.0, 0.0, carbs)
            })
            .collect();
        let trace = PatientTrace::new("v", Subset::A, Split::Test, 300, samples.clone()).unwrap();
        let mut records = Vec::new();
        for i in 0..n {
            if rng.random_bool(0.5) {
                continue;
            }
            let y = rng.random_range(40.0..260.0);
            let status = match rng.random_range(0..3) {
                0 => AttackStatus::Success,
                1 => AttackStatus::Failure,
                _ => AttackStatus::Skipped,
            };
            let f = rng.random_range(40.0..400.0);
            records.push(AttackRecord {
                patient_id: "v".into(),
                timestamp: i as i64 * 300,
                target: 0.0,
                outcome: AttackOutcome {
                    status,
                    // deliberately wrong: the profile must re-derive context and states
                    context: MealContext::Fasting,
                    adversarial_window: FeatureWindow::from_cgm(&[0.0]),
                    benign_prediction: y,
                    adversarial_prediction: f,
                    benign_state: Hypo,
                    adversarial_state: Hypo,
                    iterations_used: 0,
                },
            });
        }
        // shuffle to check the output is time ordered
        for i in (1..records.len()).rev() {
            let j = rng.random_range(0..=i);
            records.swap(i, j);
        }
        let profile = build_risk_profile(&trace, &records, &SeverityTable::default(), &th).unwrap();

        let mut expected: Vec<(i64, f64)> = records
            .iter()
            .map(|r| {
                let t = r.timestamp;
                let fed = samples.iter().any(|s| s.timestamp > t - 7200 && s.timestamp <= t && s.carbs > 0.0);
                let y = r.outcome.benign_prediction;
                let f = if r.outcome.status == AttackStatus::Skipped { y } else { r.outcome.adversarial_prediction };
                let s = TABLE[index(state(y, fed))][index(state(f, fed))];
                (t, s * (y - f) * (y - f))
            })
            .collect();
        expected.sort_by_key(|e| e.0);
        assert_eq!(profile.timestamps, expected.iter().map(|e| e.0).collect::<Vec<_>>(), "case {case}");
        for (got, want) in profile.values.iter().zip(&expected) {
            assert!((got - want.1).abs() <= 1e-12 * want.1.abs().max(1.0), "case {case}: {got} vs {}", want.1);
        }
        let back = RiskProfile::from_csv("v", &profile.to_csv()).unwrap();
        assert_eq!(back, profile);
    }
}

pub fn every_table_cell_is_used() {
    let t = SeverityTable::default();
    for (i, b) in [Hypo, Normal, Hyper].into_iter().enumerate() {
        for (j, a) in [Hypo, Normal, Hyper].into_iter().enumerate() {
            assert_eq!(t.severity(b, a), TABLE[i][j]);
        }
    }
}

//! Checks shared by the unit-level test targets and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskguard_core::data::{
    generate_synthetic_cohort, windowize, FeatureWindow, PatientTrace, Split, Subset, SyntheticCohortConfig, SyntheticPatient, CGM_MAX,
};
use riskguard_core::predictor::{fit_forecaster, ForecastMode, ForecastModel, Forecaster, TrainConfig};

fn train_traces() -> Vec<PatientTrace> {
    let patients = vec![
        SyntheticPatient {
            id: "a".into(),
            subset: Subset::A,
            normal_fraction: 0.6,
            center: None,
        },
        SyntheticPatient {
            id: "b".into(),
            subset: Subset::B,
            normal_fraction: 0.9,
            center: None,
        },
    ];
    let mut cfg = SyntheticCohortConfig::new(11, patients);
    cfg.train_len = 600;
    cfg.test_len = 200;
    generate_synthetic_cohort(&cfg)
        .unwrap()
        .into_iter()
        .filter(|t| t.split == Split::Train)
        .collect()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: 8,
        max_epochs: 150,
        seed,
        ..TrainConfig::default()
    }
}

fn fitted() -> (ForecastModel, Vec<PatientTrace>) {
    let traces = train_traces();
    let m = fit_forecaster(&traces, ForecastMode::Aggregate, 12, 6, &small_config(5)).unwrap();
    (m, traces)
}

pub fn analytic_gradient_matches_central_differences() {
    let (model, traces) = fitted();
    let windows = windowize(&traces[0], 12, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 20 {
        let w = &windows[rng.random_range(0..windows.len())].features;
        let g = model.gradient_wrt_cgm(w).unwrap();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for t in 0..12 {
            let (mut up, mut down) = (w.clone(), w.clone());
            up.set_cgm(t, w.cgm(t) + h);
            down.set_cgm(t, w.cgm(t) - h);
            let fd = (model.predict(&up).unwrap() - model.predict(&down).unwrap()) / (2.0 * h);
            let rel = (g[t] - fd).abs() / fd.abs().max(g[t].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "relative gradient error {worst}");
        checked += 1;
    }
}

pub fn predictions_stay_in_range_even_for_extreme_inputs() {
    let (model, traces) = fitted();
    for w in windowize(&traces[1], 12, 6).unwrap() {
        let p = model.predict(&w.features).unwrap();
        assert!((0.0..=CGM_MAX).contains(&p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let rows: Vec<[f64; 4]> = (0..12)
            .map(|_| [rng.random_range(0.0..2000.0), rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(0.0..300.0)])
            .collect();
        let p = model.predict(&FeatureWindow::from_rows(&rows)).unwrap();
        assert!((0.0..=CGM_MAX).contains(&p), "{p}");
    }
}

pub fn training_is_bitwise_deterministic() {
    let traces = train_traces();
    let a = fit_forecaster(&traces, ForecastMode::Aggregate, 12, 6, &small_config(21)).unwrap();
    let b = fit_forecaster(&traces, ForecastMode::Aggregate, 12, 6, &small_config(21)).unwrap();
    let bits = |m: &ForecastModel| m.parameters.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = fit_forecaster(&traces, ForecastMode::Aggregate, 12, 6, &small_config(22)).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

pub fn persisted_model_predicts_identically() {
    let (model, traces) = fitted();
    let back = ForecastModel::from_json(&model.to_json().unwrap()).unwrap();
    for w in windowize(&traces[0], 12, 6).unwrap().iter().take(50) {
        assert_eq!(model.predict(&w.features).unwrap().to_bits(), back.predict(&w.features).unwrap().to_bits());
    }
}

pub fn personalized_mode_rejects_other_patients() {
    let traces = train_traces();
    let mode = ForecastMode::Personalized { patient_id: "a".into() };
    assert!(fit_forecaster(&traces, mode, 12, 6, &small_config(1)).is_err());
}

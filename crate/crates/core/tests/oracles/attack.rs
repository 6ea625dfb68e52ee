//! Checks shared by the unit-level test targets and the acceptance suite.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskguard_core::attack::{attack_trace, craft_adversarial, AttackConstraints, AttackParams, AttackStatus};
use riskguard_core::data::{
    classify_state, generate_synthetic_cohort, DiagnosticState, FeatureWindow, MealContext, Split, Subset, SyntheticCohortConfig, SyntheticPatient, Thresholds, CGM, N_FEATURES,
};
use riskguard_core::predictor::{fit_forecaster, ForecastMode, LinearForecaster, TrainConfig};

pub fn adversarial_windows_respect_bounds_and_touch_only_cgm() {
    let patients = ["x", "y", "z"]
        .iter()
        .zip([0.5, 0.7, 0.95])
        .map(|(id, nf)| SyntheticPatient {
            id: id.to_string(),
            subset: Subset::Synthetic,
            normal_fraction: nf,
            center: None,
        })
        .collect();
    let mut cfg = SyntheticCohortConfig::new(17, patients);
    cfg.train_len = 700;
    cfg.test_len = 400;
    let traces = generate_synthetic_cohort(&cfg).unwrap();
    let train: Vec<_> = traces.iter().filter(|t| t.split == Split::Train).cloned().collect();
    let tc = TrainConfig {
        hidden: 8,
        max_epochs: 150,
        ..TrainConfig::default()
    };
    let model = fit_forecaster(&train, ForecastMode::Aggregate, 12, 6, &tc).unwrap();
    let th = Thresholds::default();
    let params = AttackParams::default();
    let mut checked = 0;
    let mut successes = 0;
    for test in traces.iter().filter(|t| t.split == Split::Test) {
        let windows = riskguard_core::data::windowize(test, 12, 6).unwrap();
        let records = attack_trace(&model, test, 6, &params, &th).unwrap();
        assert_eq!(records.len(), windows.len());
        for (w, r) in windows.iter().zip(&records) {
            let low = match r.outcome.context {
                MealContext::Fasting => 125.0,
                MealContext::Postprandial => 180.0,
            };
            let adv = &r.outcome.adversarial_window;
            for t in 0..12 {
                let (b, a) = (w.features.row(t), adv.row(t));
                for f in 0..N_FEATURES {
                    if f != CGM {
                        assert_eq!(a[f].to_bits(), b[f].to_bits(), "non-cgm feature {f} changed");
                    }
                }
                if a[CGM] != b[CGM] {
                    assert!((low..=499.0).contains(&a[CGM]), "cgm {} outside [{low}, 499]", a[CGM]);
                }
            }
            assert!(r.outcome.iterations_used <= params.max_iters);
            if r.outcome.status == AttackStatus::Success {
                assert_eq!(r.outcome.adversarial_state, DiagnosticState::Hyper);
                successes += 1;
            }
            checked += 1;
        }
    }
    assert!(checked > 1000);
    assert!(successes > 0);
}

/// Best prediction and fewest moves to Hyper over every move sequence of at most
/// `max_iters` steps, each raising one cgm coordinate by `step` within bounds.
struct Exhaustive {
    best: f64,
    fewest_to_hyper: Option<usize>,
}

fn exhaustive(model: &LinearForecaster, start: &FeatureWindow, c: &AttackConstraints, th: &Thresholds) -> Exhaustive {
    let n = start.history_len();
    let predict = |w: &[f64]| model.bias + model.weights.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    let origin: Vec<f64> = start.cgm_values();
    let key = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut queue = VecDeque::from([(origin.clone(), 0usize)]);
    seen.insert(key(&origin), 0);
    let mut out = Exhaustive {
        best: predict(&origin),
        fewest_to_hyper: None,
    };
    while let Some((v, depth)) = queue.pop_front() {
        let p = predict(&v).clamp(0.0, 499.0);
        out.best = out.best.max(p);
        if classify_state(p, c.context, th) == DiagnosticState::Hyper {
            out.fewest_to_hyper = Some(out.fewest_to_hyper.map_or(depth, |d: usize| d.min(depth)));
            continue;
        }
        if depth == c.max_iters {
            continue;
        }
        for t in 0..n {
            let mut next = v.clone();
            next[t] = (v[t] + c.step).clamp(c.cgm_low, c.cgm_high);
            if next[t] != v[t] && !seen.contains_key(&key(&next)) {
                seen.insert(key(&next), depth + 1);
                queue.push_back((next, depth + 1));
            }
        }
    }
    out
}

pub fn greedy_matches_exhaustive_search_on_lattice_fixtures() {
    let th = Thresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut fixtures = 0;
    let mut agree_success = 0;
    for _ in 0..400 {
        let n = rng.random_range(1..=4usize);
        let context = if rng.random_bool(0.5) { MealContext::Fasting } else { MealContext::Postprandial };
        let step = 5.0;
        let low = th.hyper(context);
        let levels = rng.random_range(2..=6usize);
        let c = AttackConstraints {
            context,
            cgm_low: low,
            cgm_high: low + step * levels as f64,
            max_iters: rng.random_range(1..=6),
            step,
        };
        // weights on a coarse grid, some zero or negative
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-2..=8) as f64 / 8.0).collect();
        // cgm on the lattice low + k * step, so every accepted move gains exactly step * weight
        let cgm: Vec<f64> = (0..n).map(|_| low + step * rng.random_range(0..=levels) as f64).collect();
        let target_prediction = low - rng.random_range(1.0..40.0);
        let raw: f64 = weights.iter().zip(&cgm).map(|(w, x)| w * x).sum();
        let model = LinearForecaster::new(weights, target_prediction - raw);
        let window = FeatureWindow::from_cgm(&cgm);

        let greedy = craft_adversarial(&model, &window, &c, &th).unwrap();
        let oracle = exhaustive(&model, &window, &c, &th);
        fixtures += 1;
        match oracle.fewest_to_hyper {
            Some(d) => {
                assert_eq!(greedy.status, AttackStatus::Success, "oracle reaches Hyper in {d} moves");
                assert_eq!(greedy.iterations_used, d);
                agree_success += 1;
            }
            None => {
                assert_eq!(greedy.status, AttackStatus::Failure);
                assert!((greedy.adversarial_prediction - oracle.best).abs() < 1e-9);
            }
        }
    }
    assert_eq!(fixtures, 400);
    assert!(agree_success > 50 && agree_success < 350, "fixtures should mix outcomes: {agree_success}");
}

pub fn already_hyper_is_skipped() {
    let th = Thresholds::default();
    let model = LinearForecaster::new(vec![1.0], 0.0);
    let c = AttackConstraints::for_context(MealContext::Fasting, &AttackParams::default(), &th);
    let out = craft_adversarial(&model, &FeatureWindow::from_cgm(&[200.0]), &c, &th).unwrap();
    assert_eq!(out.status, AttackStatus::Skipped);
    assert_eq!(out.iterations_used, 0);
}

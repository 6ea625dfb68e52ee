//! Checks shared by the unit-level test targets and the acceptance suite.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use riskguard_core::data::FeatureWindow;
use riskguard_core::detect::{fit_knn, fit_ocsvm, KnnParams, Label, OcsvmParams};

fn random_windows(rng: &mut ChaCha8Rng, n: usize, h: usize, shift: f64) -> Vec<FeatureWindow> {
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let rows: Vec<[f64; 4]> = (0..h)
                .map(|_| {
                    [
                        120.0 + shift + 30.0 * g.sample(rng),
                        1.0 + 0.2 * g.sample(rng),
                        (2.0 * g.sample(rng)).abs(),
                        (10.0 * g.sample(rng)).abs(),
                    ]
                })
                .collect();
            FeatureWindow::from_rows(&rows)
        })
        .collect()
}

/// Per-channel z-scores with population statistics of `train`.
fn standardize(train: &[FeatureWindow], all: &[&FeatureWindow]) -> Vec<Vec<f64>> {
    let mut mean = [0.0; 4];
    let mut sq = [0.0; 4];
    let mut count = 0.0;
    for w in train {
        for t in 0..w.history_len() {
            for f in 0..4 {
                mean[f] += w.row(t)[f];
                sq[f] += w.row(t)[f] * w.row(t)[f];
            }
            count += 1.0;
        }
    }
    let mut sd = [1.0; 4];
    for f in 0..4 {
        mean[f] /= count;
        let v: f64 = sq[f] / count - mean[f] * mean[f];
        if v.sqrt() > 1e-12 {
            sd[f] = v.sqrt();
        }
    }
    all.iter()
        .map(|w| w.as_slice().iter().enumerate().map(|(i, x)| (x - mean[i % 4]) / sd[i % 4]).collect())
        .collect()
}

/// Sigmoid kernel shifted by tanh(c) and scaled by cosh(c)^2, written as sinh(a) / (cosh(a) + sinh(a) tanh(c)).
fn kernel(x: &[f64], y: &[f64], gamma: f64, c: f64) -> f64 {
    let a = gamma * x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    a.sinh() / (a.cosh() + a.sinh() * c.tanh())
}

/// Euclidean projection onto {0 <= a <= cap, sum a = 1}.
fn project(v: &[f64], cap: f64) -> Vec<f64> {
    let total = |tau: f64| v.iter().map(|x| (x - tau).clamp(0.0, cap)).sum::<f64>();
    let (mut lo, mut hi) = (v.iter().cloned().fold(f64::INFINITY, f64::min) - cap - 1.0, v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    v.iter().map(|x| (x - tau).clamp(0.0, cap)).collect()
}

struct Reference {
    alpha: Vec<f64>,
    rho: f64,
}

/// Accelerated projected gradient on min 0.5 a'Qa over the capped simplex.
fn dense_qp(q: &DMatrix<f64>, nu: f64) -> Reference {
    let n = q.nrows();
    let cap = 1.0 / (nu * n as f64);
    let lmax = q.clone().symmetric_eigenvalues().max().max(1e-12);
    let mut a = project(&vec![1.0 / n as f64; n], cap);
    let mut y = a.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let g = q * DMatrix::from_column_slice(n, 1, &y);
        let step: Vec<f64> = (0..n).map(|i| y[i] - g[i] / lmax).collect();
        let next = project(&step, cap);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = (0..n).map(|i| next[i] + (t - 1.0) / t_next * (next[i] - a[i])).collect();
        a = next;
        t = t_next;
    }
    let g = q * DMatrix::from_column_slice(n, 1, &a);
    let eps = 1e-9 * cap;
    let free: Vec<usize> = (0..n).filter(|&i| a[i] > eps && a[i] < cap - eps).collect();
    let rho = if free.is_empty() {
        let lb = (0..n).filter(|&i| a[i] >= cap - eps).map(|i| g[i]).fold(f64::NEG_INFINITY, f64::max);
        let ub = (0..n).filter(|&i| a[i] <= eps).map(|i| g[i]).fold(f64::INFINITY, f64::min);
        0.5 * (lb + ub)
    } else {
        free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
    };
    Reference { alpha: a, rho }
}

pub fn ocsvm_matches_dense_qp_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut fixtures = 0;
    let mut tried = 0;
    while fixtures < 20 {
        tried += 1;
        assert!(tried < 200, "too few convex fixtures");
        let h = rng.random_range(8..=25);
        // n well below the dimension and a small gamma keep the kernel matrix positive definite
        let n = rng.random_range(8..=(2 * h).min(50));
        let nu = [0.2, 0.5, 0.8][rng.random_range(0..3)];
        let coef0 = [10.0, 1.0][rng.random_range(0..2)];
        let train = random_windows(&mut rng, n, h, 0.0);
        let shift = rng.random_range(-20.0..40.0);
        let queries = random_windows(&mut rng, 150, h, shift);
        let gamma = 0.05 / (4 * h) as f64;

        let all: Vec<&FeatureWindow> = train.iter().chain(&queries).collect();
        let z = standardize(&train, &all);
        let q = DMatrix::from_fn(n, n, |i, j| kernel(&z[i], &z[j], gamma, coef0));
        // the reference needs a convex problem
        if q.clone().symmetric_eigenvalues().min() < 1e-10 {
            continue;
        }
        fixtures += 1;
        let reference = dense_qp(&q, nu);

        let params = OcsvmParams {
            coef0,
            nu,
            gamma: Some(gamma),
            tolerance: 1e-10,
            max_train: None,
            ..OcsvmParams::default()
        };
        let model = fit_ocsvm(&train, &params).unwrap();
        assert!((model.rho - reference.rho).abs() < 1e-5 * reference.rho.abs().max(1e-3), "rho {} vs {}", model.rho, reference.rho);
        for (k, w) in queries.iter().enumerate() {
            let x = &z[n + k];
            let f: f64 = (0..n).map(|i| reference.alpha[i] * kernel(&z[i], x, gamma, coef0)).sum::<f64>() - reference.rho;
            let expected = if f >= 0.0 { Label::Benign } else { Label::Malicious };
            assert_eq!(model.verdict(w).unwrap(), expected, "fixture {fixtures} query {k}: reference decision {f}");
        }
    }
}

pub fn ocsvm_nu_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for nu in [0.1, 0.25, 0.5, 0.75] {
        let train = random_windows(&mut rng, 200, 6, 0.0);
        let model = fit_ocsvm(
            &train,
            &OcsvmParams {
                nu,
                max_train: None,
                ..OcsvmParams::default()
            },
        )
        .unwrap();
        let outliers = train.iter().filter(|w| model.decision_value(w).unwrap() < 0.0).count() as f64 / 200.0;
        let svs = model.support.len() as f64 / 200.0;
        assert!((outliers - nu).abs() <= 0.1, "nu {nu}: outlier fraction {outliers}");
        assert!(svs >= nu - 0.1, "nu {nu}: support fraction {svs}");
        assert!((model.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let cap = 1.0 / (nu * 200.0);
        assert!(model.alpha.iter().all(|&a| a > 0.0 && a <= cap * (1.0 + 1e-9)));
    }
}

fn w1(cgm: f64) -> FeatureWindow {
    FeatureWindow::from_rows(&[[cgm, 1.0, 0.0, 0.0]])
}

pub fn knn_hand_fixtures() {
    // benign at 100, 104, 108, 112; malicious at 130, 135, 140, 180. k = 7 leaves out only the farthest point.
    let benign: Vec<_> = [100.0, 104.0, 108.0, 112.0].map(w1).to_vec();
    let malicious: Vec<_> = [130.0, 135.0, 140.0, 180.0].map(w1).to_vec();
    let m = fit_knn(&benign, &malicious, &KnnParams::default()).unwrap();
    // from 95 the farthest is 180, so votes are 4 benign / 3 malicious
    assert_eq!(m.verdict(&w1(95.0)).unwrap(), Label::Benign);
    // from 150 the farthest is 100, so votes are 3 benign / 4 malicious
    assert_eq!(m.verdict(&w1(150.0)).unwrap(), Label::Malicious);

    let k3 = KnnParams { k: 3, ..KnnParams::default() };
    let m = fit_knn(&benign, &malicious, &k3).unwrap();
    // 120: 112 (8), 130 (10), 108 (12) -> 2 benign
    assert_eq!(m.verdict(&w1(120.0)).unwrap(), Label::Benign);
    // 123: 130 (7), 112 (11), 135 (12) -> 2 malicious
    assert_eq!(m.verdict(&w1(123.0)).unwrap(), Label::Malicious);

    let k4 = KnnParams { k: 4, ..KnnParams::default() };
    let m = fit_knn(&benign, &malicious, &k4).unwrap();
    // 121: 112 (9), 130 (9), 108 (13), 135 (14) -> 2 vs 2, an even split is malicious
    assert_eq!(m.verdict(&w1(121.0)).unwrap(), Label::Malicious);

    // two-feature fixture where p changes the answer: benign at (0,3); malicious at (2,2)
    let b = vec![FeatureWindow::from_rows(&[[0.0, 3.0, 0.0, 0.0]])];
    let mal = vec![FeatureWindow::from_rows(&[[2.0, 2.0, 0.0, 0.0]])];
    let q = FeatureWindow::from_rows(&[[0.0, 0.0, 0.0, 0.0]]);
    // the single benign window leaves scale 1: L1 distances 3 vs 4, L2 distances 3 vs 2.83
    let l1 = fit_knn(&b, &mal, &KnnParams { k: 1, p: 1.0, ..KnnParams::default() }).unwrap();
    let l2 = fit_knn(&b, &mal, &KnnParams { k: 1, p: 2.0, ..KnnParams::default() }).unwrap();
    assert_eq!(l1.verdict(&q).unwrap(), Label::Benign);
    assert_eq!(l2.verdict(&q).unwrap(), Label::Malicious);
}

pub fn knn_matches_brute_force_votes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..40 {
        let h = rng.random_range(1..=6);
        let (nb, nm, shift) = (rng.random_range(5..60), rng.random_range(5..60), rng.random_range(0.0..40.0));
        let benign = random_windows(&mut rng, nb, h, 0.0);
        let malicious = random_windows(&mut rng, nm, h, 40.0);
        let queries = random_windows(&mut rng, 50, h, shift);
        let p = [1.0, 2.0, 3.0][case % 3];
        let k = rng.random_range(1..=9).min(benign.len() + malicious.len());
        let m = fit_knn(&benign, &malicious, &KnnParams { k, p, ..KnnParams::default() }).unwrap();

        let stored: Vec<&FeatureWindow> = benign.iter().chain(&malicious).collect();
        let labels: Vec<Label> = benign.iter().map(|_| Label::Benign).chain(malicious.iter().map(|_| Label::Malicious)).collect();
        let all: Vec<&FeatureWindow> = stored.iter().copied().chain(&queries).collect();
        let z = standardize(&benign, &all);
        for (qi, qw) in queries.iter().enumerate() {
            let x = &z[stored.len() + qi];
            let mut d: Vec<(f64, usize)> = (0..stored.len())
                .map(|i| (z[i].iter().zip(x).map(|(a, b)| (a - b).abs().powf(p)).sum::<f64>().powf(1.0 / p), i))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let bad = d[..k].iter().filter(|(_, i)| labels[*i] == Label::Malicious).count();
            let expected = if 2 * bad >= k { Label::Malicious } else { Label::Benign };
            assert_eq!(m.verdict(qw).unwrap(), expected, "case {case} query {qi}");
        }
    }
}

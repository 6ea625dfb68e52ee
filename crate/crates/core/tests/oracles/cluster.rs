//! Checks shared by the unit-level test targets and the acceptance suite.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use riskguard_core::cluster::{
    agglomerate, cut_by_max_gap, label_clusters, prepare_profiles, profile_distance, ClusterParams, Linkage, Metric, Partition,
};
use riskguard_core::risk::RiskProfile;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two groups whose closest cross pair is at least `ratio` times farther apart than
/// the widest within-group pair.
fn planted(rng: &mut ChaCha8Rng, ratio: f64) -> (Vec<String>, Vec<Vec<f64>>, Partition) {
    loop {
        let dim = rng.random_range(2..40);
        let sizes = [rng.random_range(1..8usize), rng.random_range(1..8usize)];
        let noise = Normal::new(0.0, 1.0).unwrap();
        let spread = rng.random_range(0.1..3.0);
        let offset = rng.random_range(20.0..200.0) * spread;
        let mut ids = Vec::new();
        let mut vecs = Vec::new();
        let mut groups: Partition = vec![Vec::new(), Vec::new()];
        let mut next = 0;
        for (g, &size) in sizes.iter().enumerate() {
            let center: Vec<f64> = (0..dim).map(|_| noise.sample(rng) * offset).collect();
            for _ in 0..size {
                let id = format!("p{next:02}");
                next += 1;
                vecs.push(center.iter().map(|c| c + spread * noise.sample(rng)).collect::<Vec<f64>>());
                groups[g].push(id.clone());
                ids.push(id);
            }
        }
        let n = ids.len();
        if n < 3 {
            continue;
        }
        let group_of = |i: usize| usize::from(i >= sizes[0]);
        let (mut within, mut between) = (0.0f64, f64::INFINITY);
        for i in 0..n {
            for j in i + 1..n {
                let d = dist(&vecs[i], &vecs[j]);
                if group_of(i) == group_of(j) {
                    within = within.max(d);
                } else {
                    between = between.min(d);
                }
            }
        }
        if between >= ratio * within {
            groups.sort();
            return (ids, vecs, groups);
        }
    }
}

pub fn recovers_planted_partitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for case in 0..100 {
        let (ids, vecs, truth) = planted(&mut rng, 5.0);
        for linkage in [Linkage::Complete, Linkage::Average] {
            let d = agglomerate(&ids, &vecs, Metric::Euclidean, linkage).unwrap();
            assert_eq!(d.merges.len(), ids.len() - 1);
            assert_eq!(cut_by_max_gap(&d), truth, "case {case} {linkage:?}");
        }
    }
}

pub fn dendrogram_is_invariant_under_input_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for _ in 0..50 {
        let n = rng.random_range(3..12);
        let ids: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        // small integer grid, so ties occur
        let vecs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0..4) as f64).collect()).collect();
        let base = agglomerate(&ids, &vecs, Metric::Euclidean, Linkage::Complete).unwrap();
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let pid: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
            let pv: Vec<Vec<f64>> = order.iter().map(|&i| vecs[i].clone()).collect();
            let d = agglomerate(&pid, &pv, Metric::Euclidean, Linkage::Complete).unwrap();
            assert_eq!(d, base);
            assert_eq!(d.to_newick(), base.to_newick());
            assert_eq!(cut_by_max_gap(&d), cut_by_max_gap(&base));
        }
    }
}

pub fn complete_linkage_heights_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let n = rng.random_range(2..9);
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let vecs: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let d = agglomerate(&ids, &vecs, Metric::Euclidean, Linkage::Complete).unwrap();
        // reference: repeatedly merge the pair of clusters with the smallest max pairwise distance
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut heights = Vec::new();
        while clusters.len() > 1 {
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let h = clusters[a]
                        .iter()
                        .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                        .map(|(i, j)| dist(&vecs[i], &vecs[j]))
                        .fold(0.0, f64::max);
                    if h < best.0 {
                        best = (h, a, b);
                    }
                }
            }
            heights.push(best.0);
            let merged = clusters.remove(best.2);
            clusters[best.1].extend(merged);
        }
        for (got, want) in d.heights().iter().zip(&heights) {
            assert!((got - want).abs() < 1e-9);
        }
    }
}

pub fn profiles_of_unequal_length_are_resampled() {
    let mk = |id: &str, values: Vec<f64>| RiskProfile {
        patient_id: id.into(),
        timestamps: (0..values.len() as i64).collect(),
        values,
    };
    let profiles = vec![mk("a", vec![0.0, 1.0, 2.0, 3.0, 4.0]), mk("b", vec![0.0, 2.0, 4.0])];
    let params = ClusterParams {
        standardize: false,
        ..ClusterParams::default()
    };
    let v = prepare_profiles(&profiles, &params).unwrap();
    assert_eq!(v[0], vec![0.0, 2.0, 4.0]);
    assert_eq!(profile_distance(&v[0], &v[1], Metric::Euclidean).unwrap(), 0.0);
}

pub fn labels_follow_mean_success() {
    let partition: Partition = vec![vec!["a".into(), "b".into()], vec!["c".into()]];
    let rates: BTreeMap<String, f64> = [("a", 0.9), ("b", 0.8), ("c", 0.3)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let l = label_clusters(&partition, &rates).unwrap();
    assert_eq!(l.less_vulnerable, vec!["c"]);
    assert_eq!(l.more_vulnerable, vec!["a", "b"]);
    assert!(!l.tie_broken);

    let tied: BTreeMap<String, f64> = [("a", 0.5), ("b", 0.5), ("c", 0.5)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let l = label_clusters(&partition, &tied).unwrap();
    assert!(l.tie_broken);
    assert_eq!(l.less_vulnerable, vec!["c"]);
}

mod common;

use btc_anomaly::kmeans::{cluster_entropy, fit_kmeans, objective, select_k, KMeansConfig};
use btc_anomaly::matrix::squared_distance;
use btc_anomaly::Matrix;
use common::{gaussian_rows, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// 50 points uniform in each disk of radius 0.1 around (±10, 0).
pub fn two_blobs(seed: u64) -> Matrix {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    for cx in [-10.0, 10.0] {
        for _ in 0..50 {
            let rad = 0.1 * r.random::<f64>().sqrt();
            let th = r.random::<f64>() * std::f64::consts::TAU;
            rows.push([cx + rad * th.cos(), rad * th.sin()]);
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

fn zscore(x: &Matrix) -> Matrix {
    let (m, n) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..n {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / m as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        for i in 0..m {
            out.set(i, j, (x.get(i, j) - mean) / sd);
        }
    }
    out
}

#[test]
fn objective_never_increases_on_fifty_datasets() {
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let m = r.random_range(20..200);
        let n = r.random_range(1..6);
        let k = r.random_range(1..8);
        let x = gaussian_rows(&mut r, m, n);
        let model = fit_kmeans(&x, &KMeansConfig::new(k, seed)).unwrap();
        for w in model.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {} -> {}", w[0], w[1]);
        }
        assert!(model.objective <= model.history.last().unwrap() * (1.0 + 1e-12));
    }
}

#[test]
fn single_cluster_on_zscored_data() {
    let x = zscore(&gaussian_rows(&mut rng(3), 120, 4));
    let model = fit_kmeans(&x, &KMeansConfig::new(1, 0)).unwrap();
    assert!(model.centroid(0).iter().all(|c| c.abs() < 1e-12));
    assert!((model.objective - 120.0 * 4.0).abs() < 1e-9);
}

#[test]
fn one_cluster_per_point() {
    let x = gaussian_rows(&mut rng(4), 15, 3);
    let model = fit_kmeans(&x, &KMeansConfig::new(15, 1)).unwrap();
    assert_eq!(model.objective, 0.0);
    let mut seen = model.assignments.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 15);
}

#[test]
fn two_blobs_recovered() {
    let x = two_blobs(9);
    let model = fit_kmeans(&x, &KMeansConfig::new(2, 2)).unwrap();
    let mut centers: Vec<&[f64]> = (0..2).map(|c| model.centroid(c)).collect();
    centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert!(squared_distance(centers[0], &[-10.0, 0.0]).sqrt() < 0.2);
    assert!(squared_distance(centers[1], &[10.0, 0.0]).sqrt() < 0.2);
    let first = model.assignments[0];
    assert!(model.assignments[..50].iter().all(|&a| a == first));
    assert!(model.assignments[50..].iter().all(|&a| a != first));
}

#[test]
fn entropy_selects_two_blobs() {
    for seed in 0..5 {
        let (k, curve) = select_k(&two_blobs(seed), 1, 5, seed).unwrap();
        assert_eq!(k, 2, "seed {seed}: {curve:?}");
        assert_eq!(curve.len(), 5);
    }
}

#[test]
fn splitting_unit_blobs_lowers_entropy() {
    let mut r = rng(21);
    let rows: Vec<[f64; 2]> = (0..400)
        .map(|i| {
            let cx = if i < 200 { -10.0 } else { 10.0 };
            let dx: f64 = StandardNormal.sample(&mut r);
            let dy: f64 = StandardNormal.sample(&mut r);
            [cx + dx, dy]
        })
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let one = fit_kmeans(&x, &KMeansConfig::new(1, 0)).unwrap();
    let two = fit_kmeans(&x, &KMeansConfig::new(2, 0)).unwrap();
    assert!(cluster_entropy(&two, &x).unwrap() < cluster_entropy(&one, &x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn converged_points_sit_at_their_nearest_centroid(seed in any::<u64>(), k in 1usize..6) {
        let x = gaussian_rows(&mut rng(seed), 60, 3);
        let mut cfg = KMeansConfig::new(k, seed);
        cfg.tol = 0.0;
        let model = fit_kmeans(&x, &cfg).unwrap();
        prop_assume!(model.converged);
        for (row, &a) in x.iter_rows().zip(&model.assignments) {
            let own = squared_distance(row, model.centroid(a));
            for c in 0..k {
                prop_assert!(own <= squared_distance(row, model.centroid(c)) + 1e-12);
            }
        }
        // centroids are the means of their clusters
        for c in 0..k {
            let members: Vec<&[f64]> = x
                .iter_rows()
                .zip(&model.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..3 {
                let mean = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
                prop_assert!((mean - model.centroid(c)[j]).abs() < 1e-9);
            }
        }
        prop_assert!((objective(&x, &model.centroids, &model.assignments) - model.objective).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_model(seed in any::<u64>(), k in 1usize..6) {
        let x = gaussian_rows(&mut rng(seed ^ 0xabc), 80, 2);
        let a = fit_kmeans(&x, &KMeansConfig::new(k, seed)).unwrap();
        let b = fit_kmeans(&x, &KMeansConfig::new(k, seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

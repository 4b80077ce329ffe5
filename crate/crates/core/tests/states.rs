use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxiplace::states::*;

fn params(k: usize, seed: u64) -> StateParams {
    StateParams {
        k,
        time_buckets: 4,
        rng_seed: seed,
    }
}

fn wcss(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..dim)
            .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
            .collect();
        total += members
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>();
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lloyd_never_increases_wcss(
        points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 6..40),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        match fit_kmeans(&points, &params(k, seed)) {
            Ok(fit) => {
                prop_assert!(fit.wcss_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
                prop_assert_eq!(fit.assignments.len(), points.len());
                for (p, &a) in points.iter().zip(&fit.assignments) {
                    prop_assert_eq!(fit.codec.cluster_of(p).unwrap(), a);
                }
                prop_assert!((fit.wcss() - wcss(&points, &fit.assignments, k)).abs() < 1e-9);
            }
            // only duplicate-heavy inputs may lack k distinct seeds
            Err(e) => prop_assert_eq!(e.exit_code(), 3),
        }
    }

    #[test]
    fn encode_formula(cluster in 0usize..6, t in 0.0f64..24.0, tb in 1usize..8) {
        let centroids: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 3.0, 1.0]).collect();
        let codec = StateCodec::new(centroids.clone(), tb, 0).unwrap();
        let s = codec.encode(&centroids[cluster], t).unwrap();
        prop_assert_eq!(s, cluster * tb + (t / (24.0 / tb as f64)).floor() as usize);
        prop_assert!(s < codec.state_count());
    }
}

/// Best 2-partition of the points by enumerating all labelings.
fn exhaustive_two_means(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    (1u32..(1 << (n - 1)))
        .map(|mask| {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            wcss(points, &labels, 2)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn two_blobs_reach_the_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut points = Vec::new();
    for centre in [(-4.0, 0.0), (4.0, 1.0)] {
        for _ in 0..6 {
            points.push(vec![
                centre.0 + rng.random_range(-0.5..0.5),
                centre.1 + rng.random_range(-0.5..0.5),
            ]);
        }
    }
    let best = exhaustive_two_means(&points);
    for seed in 0..5 {
        let fit = fit_kmeans(&points, &params(2, seed)).unwrap();
        assert!((fit.wcss() - best).abs() < 1e-9, "seed {seed}");
        assert_eq!(fit.cluster_sizes(), vec![6, 6]);
    }
}

#[test]
fn twenty_five_clusters_on_fifty_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let fit = fit_kmeans(&points, &StateParams::default()).unwrap();
    assert_eq!(fit.codec.k(), 25);
    assert!(fit.cluster_sizes().iter().all(|&s| s > 0));
    assert_eq!(fit.codec.state_count(), 100);
    assert_eq!(fit, fit_kmeans(&points, &StateParams::default()).unwrap());
}

#[test]
fn invalid_parameters_are_config_errors() {
    let pts = vec![vec![0.0], vec![1.0]];
    assert_eq!(fit_kmeans(&pts, &params(0, 1)).unwrap_err().exit_code(), 2);
    let zero_tb = StateParams {
        time_buckets: 0,
        ..StateParams::default()
    };
    assert_eq!(fit_kmeans(&pts, &zero_tb).unwrap_err().exit_code(), 2);
}

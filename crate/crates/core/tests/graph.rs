use std::collections::VecDeque;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxiplace::geodata::{generate_world, haversine_km, GeoPoint, Hotspot, WorldConfig};
use taxiplace::graph::*;
use taxiplace::traffic::{free_flow_minutes, MockTraffic, TravelTimePair};

fn node(id: usize, demand: f64) -> Hotspot {
    Hotspot {
        id,
        location: GeoPoint {
            lat: 28.5 + 0.01 * id as f64,
            lon: 77.0 + 0.003 * (id * id % 7) as f64,
        },
        demand,
        event_flag: 0.0,
    }
}

fn graph(demands: &[f64], pairs: &[(usize, usize)], ratio: impl Fn(usize, usize) -> f64) -> RoadGraph {
    let nodes: Vec<Hotspot> = demands.iter().enumerate().map(|(i, &d)| node(i, d)).collect();
    let edges = pairs
        .iter()
        .map(|&(u, v)| {
            let distance_km = haversine_km(nodes[u].location, nodes[v].location);
            let ff = free_flow_minutes(distance_km);
            Edge {
                u,
                v,
                distance_km,
                travel: TravelTimePair::new(ff * ratio(u, v), ff).unwrap(),
            }
        })
        .collect();
    RoadGraph::from_edges(nodes, edges, 9.0, false).unwrap()
}

/// Connected random graph: a random spanning tree plus extra edges.
fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> RoadGraph {
    let mut pairs = Vec::new();
    for v in 1..n {
        pairs.push((rng.random_range(0..v), v));
    }
    let extra = rng.random_range(0..=n);
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    let demands: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64).collect();
    graph(&demands, &pairs, |_, _| 1.0)
}

fn hops_from(g: &RoadGraph, src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.node_count()];
    dist[src] = 0;
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        for w in g.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                q.push_back(w);
            }
        }
    }
    dist
}

/// Smallest k-hop dominating set size by enumerating all subsets.
fn brute_force_minimum(g: &RoadGraph, k: usize) -> usize {
    let n = g.node_count();
    let reach: Vec<u32> = (0..n)
        .map(|v| {
            hops_from(g, v)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d <= k)
                .fold(0u32, |m, (u, _)| m | (1 << u))
        })
        .collect();
    let full = (1u32 << n) - 1;
    (1u32..=full)
        .filter(|mask| {
            (0..n)
                .filter(|&v| mask & (1 << v) != 0)
                .fold(0, |acc, v| acc | reach[v])
                == full
        })
        .map(u32::count_ones)
        .min()
        .unwrap() as usize
}

fn covers(g: &RoadGraph, ds: &DominatingSet) -> bool {
    let dists: Vec<Vec<usize>> = ds.members.iter().map(|&m| hops_from(g, m)).collect();
    (0..g.node_count()).all(|v| dists.iter().any(|d| d[v] <= ds.k))
}

#[test]
fn greedy_within_log_factor_of_optimum_on_50_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let n = rng.random_range(2..=12);
        let g = random_graph(&mut rng, n);
        for k in 1..=2 {
            let ds = greedy_khop_dominating_set(&g, k).unwrap();
            assert!(covers(&g, &ds), "trial {trial}");
            let opt = brute_force_minimum(&g, k);
            let bound = (1.0 + (n as f64).ln()) * opt as f64;
            assert!(ds.len() as f64 <= bound, "trial {trial}, k={k}: {} > {bound}", ds.len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coverage_map_points_to_nearest_member(seed in any::<u64>(), n in 2usize..14, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n);
        let ds = greedy_khop_dominating_set(&g, k).unwrap();
        prop_assert!(covers(&g, &ds));
        prop_assert_eq!(ds.selection_order.len(), ds.members.len());
        prop_assert!(ds.members.windows(2).all(|w| w[0] < w[1]));
        for v in 0..n {
            let m = ds.coverage[v];
            prop_assert!(ds.contains(m));
            let d = hops_from(&g, v);
            let best = ds.members.iter().map(|&x| d[x]).min().unwrap();
            prop_assert_eq!(d[m], best);
            prop_assert!(best <= k);
        }
    }

    #[test]
    fn graph_invariants_hold(seed in any::<u64>(), n in 2usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n);
        for e in g.edges() {
            prop_assert!(e.u < e.v);
            prop_assert!(e.distance_km > 0.0);
            prop_assert!(g.neighbors(e.u).any(|w| w == e.v));
            prop_assert!(g.neighbors(e.v).any(|w| w == e.u));
        }
        for v in 0..n {
            prop_assert!(g.traffic_scores()[v] >= 1.0);
            for row in g.features() {
                prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}

#[test]
fn traffic_score_averages_incident_ratios() {
    let g = graph(&[1.0, 1.0, 1.0], &[(0, 1), (1, 2)], |u, v| {
        if (u, v) == (0, 1) {
            1.2
        } else {
            1.8
        }
    });
    assert!((g.traffic_scores()[1] - 1.5).abs() < 1e-12);
    assert!((g.traffic_scores()[0] - 1.2).abs() < 1e-12);
}

#[test]
fn hop_distances() {
    let g = graph(&[1.0; 4], &[(0, 1), (1, 2), (2, 3)], |_, _| 1.0);
    assert_eq!(g.hop_distance(0, 0).unwrap(), 0);
    assert_eq!(g.hop_distance(0, 1).unwrap(), 1);
    assert_eq!(g.hop_distance(0, 3).unwrap(), 3);
    assert!(g.hop_distance(0, 9).is_err());
}

#[test]
fn complete_graph_picks_highest_demand() {
    let pairs: Vec<(usize, usize)> = (0..5).flat_map(|u| ((u + 1)..5).map(move |v| (u, v))).collect();
    let g = graph(&[3.0, 1.0, 7.0, 2.0, 7.0], &pairs, |_, _| 1.0);
    let ds = greedy_khop_dominating_set(&g, 1).unwrap();
    assert_eq!(ds.members, vec![2]);
}

#[test]
fn path_of_five_with_k_one() {
    let g = graph(&[1.0; 5], &[(0, 1), (1, 2), (2, 3), (3, 4)], |_, _| 1.0);
    let ds = greedy_khop_dominating_set(&g, 1).unwrap();
    assert_eq!(ds.len(), 2);
    assert!(covers(&g, &ds));
}

#[test]
fn collinear_points_become_a_path() {
    let hs: Vec<Hotspot> = (0..3)
        .map(|i| Hotspot {
            id: i,
            location: GeoPoint {
                lat: 28.6 + 0.01 * i as f64,
                lon: 77.1,
            },
            demand: 1.0,
            event_flag: 0.0,
        })
        .collect();
    let provider = MockTraffic::new(hs.iter().map(|h| h.location).collect(), 1, 2.5, 0.3).unwrap();
    let g = build_graph(
        hs,
        &provider,
        &GraphParams {
            knn: 1,
            ..GraphParams::default()
        },
    )
    .unwrap();
    assert_eq!(g.edges().len(), 2);
    assert!(g.edges().iter().all(|e| e.v == e.u + 1));
}

#[test]
fn default_world_graph_and_action_space() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let locs: Vec<GeoPoint> = w.hotspots.iter().map(|h| h.location).collect();
    let provider = MockTraffic::new(locs, 42, 2.5, 0.3).unwrap();
    let dense = build_graph(
        w.hotspots.clone(),
        &provider,
        &GraphParams {
            knn: 4,
            ..GraphParams::default()
        },
    )
    .unwrap();
    assert!((0..50).all(|v| dense.degree(v) >= 4));

    let g = build_graph(w.hotspots.clone(), &provider, &GraphParams::default()).unwrap();
    let ds = greedy_khop_dominating_set(&g, 2).unwrap();
    assert!((10..=30).contains(&ds.len()), "{}", ds.len());
    assert!(covers(&g, &ds));
}

#[test]
fn knn_at_node_count_is_rejected() {
    let w = generate_world(&WorldConfig {
        n_hotspots: 4,
        n_requests: 10,
        ..WorldConfig::default()
    })
    .unwrap();
    let provider = MockTraffic::new(w.hotspots.iter().map(|h| h.location).collect(), 1, 2.5, 0.3).unwrap();
    let err = build_graph(
        w.hotspots,
        &provider,
        &GraphParams {
            knn: 4,
            ..GraphParams::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn hourly_profile_tracks_the_diurnal_curve() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let provider = MockTraffic::new(w.hotspots.iter().map(|h| h.location).collect(), 42, 2.5, 0.3).unwrap();
    let g = build_graph(w.hotspots, &provider, &GraphParams::default()).unwrap();
    let profile = g.hourly_traffic_scores(&provider).unwrap();
    assert_eq!(profile.scores.len(), 24);
    let mean = |h: usize| profile.scores[h].iter().sum::<f64>() / 50.0;
    assert!(mean(13) > mean(9));
    assert!(mean(9) > mean(7));
    assert!(profile.scores.iter().flatten().all(|&s| s >= 1.0));
}

#[test]
fn json_round_trip_keeps_everything() {
    let w = generate_world(&WorldConfig::default()).unwrap();
    let provider = MockTraffic::new(w.hotspots.iter().map(|h| h.location).collect(), 42, 2.5, 0.3).unwrap();
    let g = build_graph(w.hotspots, &provider, &GraphParams::default()).unwrap();
    let ds = greedy_khop_dominating_set(&g, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    g.save_json(&dir.path().join("g.json")).unwrap();
    ds.save(&dir.path().join("d.json")).unwrap();
    assert_eq!(RoadGraph::load_json(&dir.path().join("g.json")).unwrap(), g);
    assert_eq!(DominatingSet::load(&dir.path().join("d.json")).unwrap(), ds);
}

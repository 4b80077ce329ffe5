//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
//! any criterion fails.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxiplace::config::PipelineConfig;
use taxiplace::eval::{head_tail_means, EvalReport};
use taxiplace::geodata::{generate_world, haversine_km, GeoPoint, Hotspot};
use taxiplace::gnn::{gradient_check, EmbeddingModel};
use taxiplace::graph::{build_graph, greedy_khop_dominating_set, Edge, RoadGraph};
use taxiplace::pipeline::{Pipeline, RunLayout};
use taxiplace::rl::{run_q_learning, Method, QEnvironment, QTable, RLConfig, Step};
use taxiplace::states::{fit_kmeans, StateParams};
use taxiplace::traffic::{build_provider, free_flow_minutes, TravelTimePair};
use taxiplace::{Result, Stage};

type Check = (bool, String);

fn default_run(dir: &Path) -> EvalReport {
    let cfg = PipelineConfig {
        out_dir: dir.to_path_buf(),
        ..PipelineConfig::default()
    };
    Pipeline::new(cfg).unwrap().run().unwrap();
    EvalReport::load_json(&RunLayout::new(dir).report_json()).unwrap()
}

fn reward(report: &[taxiplace::eval::MethodAggregate], m: Method) -> (f64, f64) {
    let a = report.iter().find(|a| a.method == m).unwrap();
    (a.mean_reward_normalized, a.mean_wait_min)
}

fn method_ordering(report: &EvalReport) -> Check {
    let order = [
        Method::GnnRl,
        Method::RlOnly,
        Method::GreedyDemand,
        Method::RandomPlacement,
    ];
    let ordered_seeds: Vec<u64> = report
        .per_seed
        .iter()
        .filter(|s| {
            let v: Vec<(f64, f64)> = order.iter().map(|&m| reward(&s.methods, m)).collect();
            v.windows(2).all(|w| w[0].0 > w[1].0 && w[0].1 < w[1].1)
        })
        .map(|s| s.seed)
        .collect();
    (
        ordered_seeds.len() >= 4,
        format!("ordering holds in seeds {ordered_seeds:?} of {:?}", report.seeds),
    )
}

fn magnitude_bands(report: &EvalReport) -> Check {
    let imp = report.improvements.unwrap();
    (
        imp.wait_reduction_vs_rp_pct >= 35.0 && imp.dist_reduction_vs_rp_pct >= 20.0,
        format!(
            "wait -{:.1}%, distance -{:.1}% vs RP",
            imp.wait_reduction_vs_rp_pct, imp.dist_reduction_vs_rp_pct
        ),
    )
}

fn rl_only_gap(report: &EvalReport) -> Check {
    let gnn = report.method(Method::GnnRl).unwrap().mean_wait_min;
    let rl = report.method(Method::RlOnly).unwrap().mean_wait_min;
    (
        gnn <= 0.90 * rl,
        format!("wait ratio GNN+RL / RL-Only = {:.3}", gnn / rl),
    )
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

fn covered(g: &RoadGraph, members: &[usize], k: usize) -> bool {
    let dists: Vec<Vec<usize>> = members.iter().map(|&m| hops_from(g, m)).collect();
    (0..g.node_count()).all(|v| dists.iter().any(|d| d[v] <= k))
}

fn action_space() -> Check {
    let cfg = PipelineConfig::default();
    let world = generate_world(&cfg.world).unwrap();
    let locations: Vec<GeoPoint> = world.hotspots.iter().map(|h| h.location).collect();
    let provider = build_provider(&cfg.traffic, locations, None).unwrap();
    let g = build_graph(world.hotspots, provider.as_ref(), &cfg.graph).unwrap();
    let ds = greedy_khop_dominating_set(&g, 2).unwrap();
    let ok = (10..=30).contains(&ds.len()) && covered(&g, &ds.members, 2);
    (
        ok,
        format!(
            "{} of {} hotspots selected, 2-hop coverage verified",
            ds.len(),
            g.node_count()
        ),
    )
}

fn five_node_fixture() -> RoadGraph {
    let nodes: Vec<Hotspot> = (0..5)
        .map(|id| Hotspot {
            id,
            location: GeoPoint {
                lat: 28.6 + 0.011 * id as f64,
                lon: 77.1 + 0.009 * (id % 2) as f64,
            },
            demand: 1.0 + id as f64,
            event_flag: 0.0,
        })
        .collect();
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 3)]
        .iter()
        .map(|&(u, v)| {
            let d = haversine_km(nodes[u].location, nodes[v].location);
            let ff = free_flow_minutes(d);
            Edge {
                u,
                v,
                distance_km: d,
                travel: TravelTimePair::new(ff * 1.3, ff).unwrap(),
            }
        })
        .collect();
    let features = vec![
        vec![0.2, 1.0, 0.4],
        vec![0.9, 0.0, 0.1],
        vec![0.5, 1.0, 0.8],
        vec![0.0, 0.0, 1.0],
        vec![0.7, 0.0, 0.3],
    ];
    RoadGraph::from_edges(nodes, edges, 9.0, false)
        .unwrap()
        .with_features(features, vec!["a".into(), "b".into(), "c".into()])
        .unwrap()
}

fn gradient_correctness() -> Check {
    let g = five_node_fixture();
    let worst = (1..=3)
        .map(|seed| gradient_check(&EmbeddingModel::xavier(3, 8, 2, seed), &g, 1e-5).unwrap())
        .fold(0.0, f64::max);
    (worst < 1e-5, format!("max relative error {worst:.2e}"))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> RoadGraph {
    let nodes: Vec<Hotspot> = (0..n)
        .map(|id| Hotspot {
            id,
            location: GeoPoint {
                lat: 28.5 + 0.01 * id as f64,
                lon: 77.0 + 0.002 * (id * id % 5) as f64,
            },
            demand: rng.random_range(0..10) as f64,
            event_flag: 0.0,
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
    for _ in 0..rng.random_range(0..=n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(u, v)| {
            let d = haversine_km(nodes[u].location, nodes[v].location);
            let ff = free_flow_minutes(d);
            Edge {
                u,
                v,
                distance_km: d,
                travel: TravelTimePair::new(ff, ff).unwrap(),
            }
        })
        .collect();
    RoadGraph::from_edges(nodes, edges, 9.0, false).unwrap()
}

fn brute_force_minimum(g: &RoadGraph, k: usize) -> usize {
    let n = g.node_count();
    let reach: Vec<u32> = (0..n)
        .map(|v| {
            hops_from(g, v)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d <= k)
                .fold(0, |m, (u, _)| m | (1 << u))
        })
        .collect();
    let full = (1u32 << n) - 1;
    (1..=full)
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

fn dominating_set_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_ratio: f64 = 0.0;
    let mut ok = true;
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let g = random_graph(&mut rng, n);
        let k = rng.random_range(1..=2);
        let ds = greedy_khop_dominating_set(&g, k).unwrap();
        let opt = brute_force_minimum(&g, k);
        worst_ratio = worst_ratio.max(ds.len() as f64 / opt as f64);
        ok &= covered(&g, &ds.members, k) && ds.len() as f64 <= (1.0 + (n as f64).ln()) * opt as f64;
    }
    (ok, format!("50 graphs, worst greedy/optimal ratio {worst_ratio:.2}"))
}

struct Mdp {
    next: Vec<Vec<usize>>,
    reward: Vec<Vec<f64>>,
    state: usize,
}

impl QEnvironment for Mdp {
    fn state_count(&self) -> usize {
        self.next.len()
    }

    fn action_count(&self) -> usize {
        self.next[0].len()
    }

    fn begin_episode(&mut self) -> Result<usize> {
        self.state = 0;
        Ok(0)
    }

    fn step(&mut self, action: usize, _last: bool) -> Result<Step> {
        let reward = self.reward[self.state][action];
        self.state = self.next[self.state][action];
        Ok(Step {
            reward,
            next_state: self.state,
            outcome: None,
        })
    }
}

fn q_learning_fixpoint() -> Check {
    let cfg = RLConfig::default();
    let r = -2.0;
    let fixpoint = r / (1.0 - cfg.lambda_d);
    let mut table = QTable::zeros(1, vec![0]).unwrap();
    let mut updates = 0;
    while (table.get(0, 0) - fixpoint).abs() > 1e-6 && updates < 10_000 {
        table.q_update(0, 0, r, 0, cfg.eta, cfg.lambda_d);
        updates += 1;
    }
    let converged = (table.get(0, 0) - fixpoint).abs() <= 1e-6;

    // staying in state 1 pays -0.5 forever, so action 1 is optimal in both states
    let mut env = Mdp {
        next: vec![vec![0, 1], vec![0, 1]],
        reward: vec![vec![-2.0, -3.0], vec![-5.0, -0.5]],
        state: 0,
    };
    let toy = RLConfig {
        rho: 1.0,
        episodes: 400,
        steps_per_episode: 25,
        ..RLConfig::default()
    };
    let trained = run_q_learning(&mut env, QTable::zeros(2, vec![0, 1]).unwrap(), &toy).unwrap();
    let policy = [trained.table.argmax(0), trained.table.argmax(1)];
    (
        converged && policy == [1, 1],
        format!("fixpoint {fixpoint:.6} reached in {updates} updates; toy policy {policy:?}"),
    )
}

fn kmeans_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut monotone = true;
    for trial in 0..20 {
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let fit = fit_kmeans(
            &pts,
            &StateParams {
                k: 6,
                time_buckets: 4,
                rng_seed: trial,
            },
        )
        .unwrap();
        monotone &= fit.wcss_history.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }

    let mut blobs = Vec::new();
    for (cx, cy) in [(-3.0, 0.0), (3.0, 0.5)] {
        for _ in 0..6 {
            blobs.push(vec![cx + rng.random_range(-0.4..0.4), cy + rng.random_range(-0.4..0.4)]);
        }
    }
    let sse = |labels: &[usize]| -> f64 {
        (0..2)
            .map(|c| {
                let m: Vec<&Vec<f64>> = blobs
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                let mean: Vec<f64> = (0..2)
                    .map(|j| m.iter().map(|p| p[j]).sum::<f64>() / m.len() as f64)
                    .collect();
                m.iter()
                    .map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2))
                    .sum::<f64>()
            })
            .sum()
    };
    let n = blobs.len();
    let best = (1u32..(1 << (n - 1)))
        .map(|mask| sse(&(0..n).map(|i| ((mask >> i) & 1) as usize).collect::<Vec<_>>()))
        .fold(f64::INFINITY, f64::min);
    let fit = fit_kmeans(
        &blobs,
        &StateParams {
            k: 2,
            time_buckets: 4,
            rng_seed: 1,
        },
    )
    .unwrap();
    let matches = (fit.wcss() - best).abs() < 1e-9;
    (
        monotone && matches,
        format!(
            "WCSS monotone over 20 fits; two-blob WCSS {:.6} vs exhaustive {best:.6}",
            fit.wcss()
        ),
    )
}

fn determinism(a: &Path, b: &Path) -> Check {
    let la = RunLayout::new(a);
    let lb = RunLayout::new(b);
    let mut compared = 0;
    let mut differing = Vec::new();
    for stage in Stage::ALL {
        for (pa, pb) in la.outputs(stage).into_iter().zip(lb.outputs(stage)) {
            if pa.ends_with("config.toml") {
                continue;
            }
            compared += 1;
            if std::fs::read(&pa).ok() != std::fs::read(&pb).ok() {
                differing.push(pa.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    (
        differing.is_empty(),
        format!("{compared} checkpoint and report files compared, differing: {differing:?}"),
    )
}

fn convergence_trend(report: &EvalReport) -> Check {
    let mut failures = Vec::new();
    let agents = report
        .convergence
        .iter()
        .filter(|c| matches!(c.method, Method::GnnRl | Method::RlOnly));
    let mut checked = 0;
    for c in agents {
        checked += 1;
        let (r0, r1) = head_tail_means(&c.episodes, 0.1, |e| e.mean_reward);
        let (d0, d1) = head_tail_means(&c.episodes, 0.1, |e| e.mean_dist_km);
        if !(r1 > r0 && d1 < d0) {
            failures.push(format!("{} seed {}", c.method, c.seed));
        }
    }
    (
        failures.is_empty() && checked > 0,
        format!("{checked} training runs checked, failing: {failures:?}"),
    )
}

fn main() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let report = default_run(dir_a.path());
    let elapsed = start.elapsed();
    default_run(dir_b.path());

    let results = [
        ("method ordering", method_ordering(&report)),
        ("magnitude bands", magnitude_bands(&report)),
        ("RL-only gap", rl_only_gap(&report)),
        ("action-space reduction", action_space()),
        ("gradient correctness", gradient_correctness()),
        ("dominating-set oracle", dominating_set_oracle()),
        ("Q-learning fixpoint", q_learning_fixpoint()),
        ("k-means monotonicity and oracle", kmeans_checks()),
        ("determinism", determinism(dir_a.path(), dir_b.path())),
        ("convergence trend", convergence_trend(&report)),
    ];
    println!("default pipeline finished in {:.2} s", elapsed.as_secs_f64());
    let mut failed = 0;
    for (i, (name, (ok, detail))) in results.iter().enumerate() {
        println!(
            "{} criterion {}: {name}: {detail}",
            if *ok { "PASS" } else { "FAIL" },
            i + 1
        );
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}

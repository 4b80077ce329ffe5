//! Side-by-side evaluation of the placement methods on shared trip sets,
//! report tables and GeoJSON map layers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geodata::{sample_requests, BBox, GeoPoint, Request};
use crate::graph::{DominatingSet, RoadGraph, TrafficProfile};
use crate::rl::{CityModel, EpisodeLog, Method, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub n_trips: usize,
    pub seeds: Vec<u64>,
    /// Retrain both Q-learning agents for every seed.
    pub retrain_per_seed: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            n_trips: 50,
            seeds: vec![1, 2, 3, 4, 5],
            retrain_per_seed: true,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trips == 0 {
            return Err(Error::config("eval.n_trips", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "at least one seed is required"));
        }
        Ok(())
    }
}

/// A user request used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub seed: u64,
    pub trip: usize,
    pub user: GeoPoint,
    pub t_of_day: f64,
}

/// Fresh trips drawn from the world's demand mixture at uniform times of day.
pub fn sample_trips(locations: &[GeoPoint], weights: &[f64], bbox: &BBox, n: usize, seed: u64) -> Result<Vec<Trip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_requests(locations, weights, bbox, n, 24.0, &mut rng)?
        .into_iter()
        .map(|r| Trip {
            seed,
            trip: r.id,
            user: r.origin,
            t_of_day: r.hour_of_day(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub seed: u64,
    pub trip: usize,
    pub method: Method,
    pub wait_min: f64,
    pub dist_km: f64,
    pub congestion: f64,
    pub reward_raw: f64,
    /// `(R − R_worst) / |R_worst|`, with `R_worst` the lowest reward any
    /// action could have earned on the same trip.
    pub reward_normalized: f64,
}

pub fn normalized_reward(reward: f64, worst: f64) -> f64 {
    if worst == 0.0 {
        0.0
    } else {
        (reward - worst) / worst.abs()
    }
}

/// Lowest reward over `actions` for a user at a given time.
pub fn worst_reward(city: &CityModel, actions: &[usize], user: GeoPoint, t_of_day: f64) -> Result<f64> {
    actions.iter().try_fold(f64::INFINITY, |acc, &h| {
        Ok(acc.min(city.simulate(user, h, t_of_day)?.reward))
    })
}

/// Queries every policy on every trip. All policies see the same trip list.
pub fn evaluate_trips(
    policies: &mut [&mut dyn Policy],
    city: &CityModel,
    actions: &[usize],
    trips: &[Trip],
) -> Result<Vec<TripRecord>> {
    let mut records = Vec::with_capacity(policies.len() * trips.len());
    let worst: Vec<f64> = trips
        .iter()
        .map(|t| worst_reward(city, actions, t.user, t.t_of_day))
        .collect::<Result<_>>()?;
    for policy in policies.iter_mut() {
        for (trip, &w) in trips.iter().zip(&worst) {
            let hotspot = policy.choose(trip.user, trip.t_of_day)?;
            let o = city.simulate(trip.user, hotspot, trip.t_of_day)?;
            records.push(TripRecord {
                seed: trip.seed,
                trip: trip.trip,
                method: policy.method(),
                wait_min: o.wait_min,
                dist_km: o.distance_km,
                congestion: o.congestion,
                reward_raw: o.reward,
                reward_normalized: normalized_reward(o.reward, w),
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub n_trips: usize,
    pub mean_reward_raw: f64,
    pub mean_reward_normalized: f64,
    pub mean_wait_min: f64,
    pub mean_dist_km: f64,
    pub std_wait_min: f64,
    pub std_dist_km: f64,
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-method means over `records`, in [`Method::ALL`] order.
pub fn aggregate(records: &[TripRecord]) -> Vec<MethodAggregate> {
    let mut by_method: BTreeMap<Method, Vec<&TripRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, rs)| {
            let (mean_wait_min, std_wait_min) = mean_std(rs.iter().map(|r| r.wait_min));
            let (mean_dist_km, std_dist_km) = mean_std(rs.iter().map(|r| r.dist_km));
            MethodAggregate {
                method,
                n_trips: rs.len(),
                mean_reward_raw: mean_std(rs.iter().map(|r| r.reward_raw)).0,
                mean_reward_normalized: mean_std(rs.iter().map(|r| r.reward_normalized)).0,
                mean_wait_min,
                mean_dist_km,
                std_wait_min,
                std_dist_km,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub methods: Vec<MethodAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    pub method: Method,
    pub seed: u64,
    pub episodes: Vec<EpisodeLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_trips: usize,
    pub seeds: Vec<u64>,
    /// Aggregates over every seed's trips.
    pub methods: Vec<MethodAggregate>,
    pub per_seed: Vec<SeedReport>,
    pub convergence: Vec<ConvergenceSeries>,
    pub improvements: Option<ImprovementStats>,
    /// False when travel times came from a live service.
    pub reproducible: bool,
}

impl EvalReport {
    pub fn from_records(
        records: &[TripRecord],
        n_trips: usize,
        seeds: Vec<u64>,
        convergence: Vec<ConvergenceSeries>,
        reproducible: bool,
    ) -> Result<Self> {
        if records.is_empty() || n_trips == 0 {
            return Err(Error::Data("evaluation produced no trips".to_string()));
        }
        let per_seed = seeds
            .iter()
            .map(|&seed| SeedReport {
                seed,
                methods: aggregate(&records.iter().filter(|r| r.seed == seed).copied().collect::<Vec<_>>()),
            })
            .collect();
        let mut report = EvalReport {
            n_trips,
            seeds,
            methods: aggregate(records),
            per_seed,
            convergence,
            improvements: None,
            reproducible,
        };
        report.improvements = improvement_stats(&report).ok();
        Ok(report)
    }

    pub fn method(&self, m: Method) -> Option<&MethodAggregate> {
        self.methods.iter().find(|a| a.method == m)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::persist::write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        crate::persist::read_json(path)
    }

    /// Aligned text table: Method, Avg. Reward (normalized), Wait Time(min),
    /// Distance(km), followed by the improvement summary.
    pub fn to_table(&self) -> String {
        let headers = ["Method", "Avg. Reward", "Wait Time(min)", "Distance(km)", "Raw Reward"];
        let rows: Vec<[String; 5]> = self
            .methods
            .iter()
            .map(|a| {
                [
                    a.method.long_name().to_string(),
                    format!("{:.2}", a.mean_reward_normalized),
                    format!("{:.2}", a.mean_wait_min),
                    format!("{:.2}", a.mean_dist_km),
                    format!("{:.2}", a.mean_reward_raw),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |cells: &[&str], out: &mut String| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    let _ = write!(s, "  {cell:>w$}");
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&headers, &mut out);
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for row in &rows {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        }
        let _ = writeln!(out, "\ntrips per seed: {}, seeds: {:?}", self.n_trips, self.seeds);
        if let Some(imp) = &self.improvements {
            let _ = writeln!(
                out,
                "GNN+RL reward gain over GDP:      {:>7.1}%",
                imp.reward_gain_vs_gdp_pct
            );
            let _ = writeln!(
                out,
                "GNN+RL wait reduction vs RL-Only: {:>7.1}%",
                imp.wait_reduction_vs_rl_only_pct
            );
            let _ = writeln!(
                out,
                "GNN+RL wait reduction vs RP:      {:>7.1}%",
                imp.wait_reduction_vs_rp_pct
            );
            let _ = writeln!(
                out,
                "GNN+RL distance reduction vs RP:  {:>7.1}%",
                imp.dist_reduction_vs_rp_pct
            );
        }
        if !self.reproducible {
            out.push_str("note: live traffic queries make this run non-reproducible\n");
        }
        out
    }
}

/// Relative changes of GNN+RL against the baselines, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementStats {
    pub reward_gain_vs_gdp_pct: f64,
    pub wait_reduction_vs_rl_only_pct: f64,
    pub wait_reduction_vs_rp_pct: f64,
    pub dist_reduction_vs_rp_pct: f64,
}

/// `(new − base) / |base| · 100`; zero when both are equal.
pub fn percent_change(base: f64, new: f64) -> f64 {
    if new == base {
        0.0
    } else {
        (new - base) / base.abs() * 100.0
    }
}

pub fn improvement_stats(report: &EvalReport) -> Result<ImprovementStats> {
    let get = |m: Method| {
        report
            .method(m)
            .ok_or_else(|| Error::Data(format!("report lacks method {m}")))
    };
    let (rp, gdp, rl, gnn) = (
        get(Method::RandomPlacement)?,
        get(Method::GreedyDemand)?,
        get(Method::RlOnly)?,
        get(Method::GnnRl)?,
    );
    Ok(ImprovementStats {
        reward_gain_vs_gdp_pct: percent_change(gdp.mean_reward_normalized, gnn.mean_reward_normalized),
        wait_reduction_vs_rl_only_pct: -percent_change(rl.mean_wait_min, gnn.mean_wait_min),
        wait_reduction_vs_rp_pct: -percent_change(rp.mean_wait_min, gnn.mean_wait_min),
        dist_reduction_vs_rp_pct: -percent_change(rp.mean_dist_km, gnn.mean_dist_km),
    })
}

pub fn write_trip_records(path: &Path, records: &[TripRecord]) -> Result<()> {
    crate::persist::write_csv(path, records)
}

pub fn read_trip_records(path: &Path) -> Result<Vec<TripRecord>> {
    crate::persist::read_csv(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvergenceRow {
    seed: u64,
    method: Method,
    episode: usize,
    mean_reward: f64,
    mean_wait_min: f64,
    mean_dist_km: f64,
    epsilon: f64,
}

pub fn write_convergence_csv(path: &Path, series: &[ConvergenceSeries]) -> Result<()> {
    crate::persist::write_csv(
        path,
        series.iter().flat_map(|s| {
            s.episodes.iter().map(move |e| ConvergenceRow {
                seed: s.seed,
                method: s.method,
                episode: e.episode,
                mean_reward: e.mean_reward,
                mean_wait_min: e.mean_wait_min,
                mean_dist_km: e.mean_dist_km,
                epsilon: e.epsilon,
            })
        }),
    )
}

/// Episode log of a frozen policy walked over the request stream in the
/// same episode structure as [`crate::rl::PlacementEnv`]. `epsilon` is zero.
pub fn rollout_log(
    policy: &mut dyn Policy,
    city: &CityModel,
    requests: &[Request],
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    if requests.is_empty() || steps == 0 {
        return Err(Error::Data("rollout needs requests and at least one step".to_string()));
    }
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cursor = 0;
    let mut log = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let t = requests[order[cursor % order.len()]].hour_of_day();
        let (mut reward, mut wait, mut dist) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let user = requests[order[cursor % order.len()]].origin;
            let o = city.simulate(user, policy.choose(user, t)?, t)?;
            reward += o.reward;
            wait += o.wait_min;
            dist += o.distance_km;
            cursor += 1;
        }
        let m = steps as f64;
        log.push(EpisodeLog {
            episode: episode + 1,
            mean_reward: reward / m,
            mean_wait_min: wait / m,
            mean_dist_km: dist / m,
            epsilon: 0.0,
        });
    }
    Ok(log)
}

/// Mean of `f` over the first and last `fraction` of `log`.
pub fn head_tail_means(log: &[EpisodeLog], fraction: f64, f: impl Fn(&EpisodeLog) -> f64) -> (f64, f64) {
    let m = ((log.len() as f64 * fraction).round() as usize).clamp(1, log.len());
    let mean = |xs: &[EpisodeLog]| xs.iter().map(&f).sum::<f64>() / xs.len() as f64;
    (mean(&log[..m]), mean(&log[log.len() - m..]))
}

/// GeoJSON FeatureCollection with one Point per hotspot and one LineString
/// per edge. Recommended hotspots carry a `recommendation_rank` property.
pub fn geojson_layers(
    graph: &RoadGraph,
    dom: Option<&DominatingSet>,
    recommendations: &[usize],
    traffic: Option<&TrafficProfile>,
    t_of_day: f64,
) -> Value {
    let mut features = Vec::with_capacity(graph.node_count() + graph.edges().len());
    for h in graph.nodes() {
        let score = traffic.map_or(graph.traffic_scores()[h.id], |p| p.score(h.id, t_of_day));
        let mut props = json!({
            "kind": "hotspot",
            "id": h.id,
            "demand": h.demand,
            "event_flag": h.event_flag,
            "traffic_score": score,
            "is_influential": dom.is_some_and(|d| d.contains(h.id)),
        });
        if let Some(rank) = recommendations.iter().position(|&r| r == h.id) {
            props["recommendation_rank"] = json!(rank + 1);
        }
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [h.location.lon, h.location.lat]},
            "properties": props,
        }));
    }
    let nodes = graph.nodes();
    for e in graph.edges() {
        let (a, b) = (nodes[e.u].location, nodes[e.v].location);
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [[a.lon, a.lat], [b.lon, b.lat]]},
            "properties": {
                "kind": "edge",
                "u": e.u,
                "v": e.v,
                "distance_km": e.distance_km,
                "current_min": e.travel.current_min,
                "free_flow_min": e.travel.free_flow_min,
                "congestion": e.travel.ratio(),
            },
        }));
    }
    json!({"type": "FeatureCollection", "features": features})
}

pub fn export_geojson(
    graph: &RoadGraph,
    dom: Option<&DominatingSet>,
    recommendations: &[usize],
    traffic: Option<&TrafficProfile>,
    t_of_day: f64,
    path: &Path,
) -> Result<()> {
    crate::persist::write_json(path, &geojson_layers(graph, dom, recommendations, traffic, t_of_day))
}

//! Placement MDP, tabular Q-learning with ε-greedy exploration, and the
//! comparison policies.
//!
//! A step recommends one influential hotspot to a waiting user. The driver
//! deadheads from the hotspot to the user; the outcome is scored as
//! `R = -(α·W + β·D + γ_c·T)` with `D` the great-circle distance, `W` the
//! free-flow deadhead time inflated by the hotspot's traffic score, and `T`
//! that traffic score.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{haversine_km, nearest_hotspot, GeoPoint, Request};
use crate::gnn::EmbeddingTable;
use crate::graph::TrafficProfile;
use crate::states::{time_bucket, StateCodec};
use crate::traffic::FREE_FLOW_SPEED_KMH;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Waiting-time weight.
    pub alpha: f64,
    /// Distance weight.
    pub beta: f64,
    /// Congestion weight.
    pub gamma_c: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma_c: 2.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma_c", self.gamma_c)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(
                    format!("rl.weights.{name}"),
                    "must be a non-negative finite number",
                ));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma_c == 0.0 {
            return Err(Error::config("rl.weights", "at least one weight must be positive"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        RewardWeights {
            alpha: self.alpha * c,
            beta: self.beta * c,
            gamma_c: self.gamma_c * c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub wait_min: f64,
    pub distance_km: f64,
    pub congestion: f64,
    pub reward: f64,
}

/// Scores a recommendation of the hotspot at `hotspot` for a user at `user`
/// when the hotspot's traffic score is `congestion`.
pub fn simulate_outcome(user: GeoPoint, hotspot: GeoPoint, congestion: f64, weights: &RewardWeights) -> StepOutcome {
    let distance_km = haversine_km(user, hotspot);
    let wait_min = distance_km / FREE_FLOW_SPEED_KMH * 60.0 * congestion;
    StepOutcome {
        wait_min,
        distance_km,
        congestion,
        reward: -(weights.alpha * wait_min + weights.beta * distance_km + weights.gamma_c * congestion),
    }
}

/// Hotspot locations plus hourly traffic scores: everything needed to score
/// a recommendation.
#[derive(Debug, Clone, PartialEq)]
pub struct CityModel {
    pub locations: Vec<GeoPoint>,
    pub traffic: TrafficProfile,
    pub weights: RewardWeights,
}

impl CityModel {
    pub fn new(locations: Vec<GeoPoint>, traffic: TrafficProfile, weights: RewardWeights) -> Result<Self> {
        weights.validate()?;
        if traffic.scores.len() != 24 || traffic.scores.iter().any(|r| r.len() != locations.len()) {
            return Err(Error::Data(
                "traffic profile must hold 24 hourly rows, one score per hotspot".to_string(),
            ));
        }
        Ok(CityModel {
            locations,
            traffic,
            weights,
        })
    }

    pub fn simulate(&self, user: GeoPoint, hotspot: usize, t_of_day: f64) -> Result<StepOutcome> {
        let loc = *self
            .locations
            .get(hotspot)
            .ok_or_else(|| Error::Data(format!("unknown hotspot {hotspot}")))?;
        Ok(simulate_outcome(
            user,
            loc,
            self.traffic.score(hotspot, t_of_day),
            &self.weights,
        ))
    }

    pub fn with_weights(&self, weights: RewardWeights) -> Result<Self> {
        CityModel::new(self.locations.clone(), self.traffic.clone(), weights)
    }
}

/// State-action values over a fixed ordered action list of hotspot ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    state_count: usize,
    actions: Vec<usize>,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(state_count: usize, actions: Vec<usize>) -> Result<Self> {
        if state_count == 0 || actions.is_empty() {
            return Err(Error::Data(
                "Q-table needs at least one state and one action".to_string(),
            ));
        }
        Ok(QTable {
            values: vec![0.0; state_count * actions.len()],
            state_count,
            actions,
        })
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    /// Hotspot ids, indexed by action.
    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.actions.len() + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        let n = self.actions.len();
        self.values[s * n + a] = value;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        let n = self.actions.len();
        &self.values[s * n..(s + 1) * n]
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Best action index in state `s`, ties to the lowest index.
    pub fn argmax(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, &q) in row.iter().enumerate().skip(1) {
            if q > row[best] {
                best = a;
            }
        }
        best
    }

    /// Action indices of state `s` by descending value, ties to lower index.
    pub fn ranked_actions(&self, s: usize) -> Vec<usize> {
        let row = self.row(s);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
    }

    /// `Q(s,a) += η·(r + λ·max_a' Q(s',a') − Q(s,a))`; returns the new value.
    pub fn q_update(&mut self, s: usize, a: usize, reward: f64, s_next: usize, eta: f64, lambda_d: f64) -> f64 {
        let target = reward + lambda_d * self.max_value(s_next);
        let q = self.get(s, a);
        let updated = q + eta * (target - q);
        self.set(s, a, updated);
        updated
    }

    pub fn save(&self, path: &Path, method: &str, config: &RLConfig) -> Result<()> {
        crate::persist::write_json(
            path,
            &QTableCheckpoint {
                method: method.to_string(),
                state_count: self.state_count,
                actions: self.actions.clone(),
                values: self.values.clone(),
                config: config.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<(Self, RLConfig)> {
        let ck: QTableCheckpoint = crate::persist::read_json(path)?;
        if ck.values.len() != ck.state_count * ck.actions.len() || ck.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                "Q-table values do not match its shape or are not finite",
            ));
        }
        let mut table = QTable::zeros(ck.state_count, ck.actions).map_err(|e| Error::format(path, e))?;
        table.values = ck.values;
        Ok((table, ck.config))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QTableCheckpoint {
    method: String,
    state_count: usize,
    actions: Vec<usize>,
    values: Vec<f64>,
    config: RLConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RLConfig {
    /// Learning rate η.
    pub eta: f64,
    /// Discount λ.
    pub lambda_d: f64,
    pub eps0: f64,
    /// Per-episode exploration decay ρ.
    pub rho: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub weights: RewardWeights,
    pub rng_seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            eta: 0.1,
            lambda_d: 0.9,
            eps0: 1.0,
            rho: 0.995,
            episodes: 500,
            steps_per_episode: 20,
            weights: RewardWeights::default(),
            rng_seed: 42,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("rl.eta", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.lambda_d) {
            return Err(Error::config("rl.lambda_d", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.eps0) {
            return Err(Error::config("rl.eps0", "must lie in [0, 1]"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("rl.rho", "must lie in (0, 1]"));
        }
        if self.episodes == 0 {
            return Err(Error::config("rl.episodes", "must be positive"));
        }
        if self.steps_per_episode == 0 {
            return Err(Error::config("rl.steps_per_episode", "must be positive"));
        }
        self.weights.validate()
    }
}

/// Maps a user situation to a Q-table row.
pub trait StateEncoder {
    fn state_count(&self) -> usize;
    fn encode(&self, user: GeoPoint, t_of_day: f64) -> Result<usize>;
}

/// State from the embedding of the user's nearest hotspot, discretized by
/// the k-means codec and crossed with the time bucket.
#[derive(Debug, Clone)]
pub struct EmbeddingStates {
    locations: Vec<GeoPoint>,
    embeddings: EmbeddingTable,
    codec: StateCodec,
}

impl EmbeddingStates {
    pub fn new(locations: Vec<GeoPoint>, embeddings: EmbeddingTable, codec: StateCodec) -> Result<Self> {
        if embeddings.len() != locations.len() {
            return Err(Error::Data(format!(
                "{} embeddings for {} hotspots",
                embeddings.len(),
                locations.len()
            )));
        }
        if embeddings.dim() != codec.dim() {
            return Err(Error::Data("embedding and codec dimensions differ".to_string()));
        }
        Ok(EmbeddingStates {
            locations,
            embeddings,
            codec,
        })
    }

    pub fn codec(&self) -> &StateCodec {
        &self.codec
    }
}

impl StateEncoder for EmbeddingStates {
    fn state_count(&self) -> usize {
        self.codec.state_count()
    }

    fn encode(&self, user: GeoPoint, t_of_day: f64) -> Result<usize> {
        let h = nearest_hotspot(&self.locations, user).expect("at least one hotspot");
        self.codec.encode(self.embeddings.get(h), t_of_day)
    }
}

/// State = nearest hotspot id × time bucket, with no embeddings involved.
#[derive(Debug, Clone)]
pub struct NearestHotspotStates {
    locations: Vec<GeoPoint>,
    time_buckets: usize,
}

impl NearestHotspotStates {
    pub fn new(locations: Vec<GeoPoint>, time_buckets: usize) -> Result<Self> {
        if locations.is_empty() || time_buckets == 0 {
            return Err(Error::Data("need hotspots and at least one time bucket".to_string()));
        }
        Ok(NearestHotspotStates {
            locations,
            time_buckets,
        })
    }
}

impl StateEncoder for NearestHotspotStates {
    fn state_count(&self) -> usize {
        self.locations.len() * self.time_buckets
    }

    fn encode(&self, user: GeoPoint, t_of_day: f64) -> Result<usize> {
        let h = nearest_hotspot(&self.locations, user).expect("at least one hotspot");
        Ok(h * self.time_buckets + time_bucket(t_of_day, self.time_buckets))
    }
}

/// Result of a single environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub reward: f64,
    pub next_state: usize,
    pub outcome: Option<StepOutcome>,
}

/// Environment driven by [`run_q_learning`].
pub trait QEnvironment {
    fn state_count(&self) -> usize;
    fn action_count(&self) -> usize;
    /// State at the start of the next episode.
    fn begin_episode(&mut self) -> Result<usize>;
    fn step(&mut self, action: usize, last_in_episode: bool) -> Result<Step>;
}

/// Per-episode training aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_wait_min: f64,
    pub mean_dist_km: f64,
    /// Exploration rate used during the episode.
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub table: QTable,
    pub log: Vec<EpisodeLog>,
    /// How often each action index was taken.
    pub action_counts: Vec<usize>,
    /// Exploration rate after the last decay.
    pub final_epsilon: f64,
}

pub fn write_training_log(path: &Path, log: &[EpisodeLog]) -> Result<()> {
    crate::persist::write_csv(path, log)
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpisodeLog>> {
    crate::persist::read_csv(path)
}

/// ε-greedy tabular Q-learning. Exploitation breaks ties toward the lowest
/// action index; ε is multiplied by ρ after every episode.
pub fn run_q_learning<E: QEnvironment>(env: &mut E, mut table: QTable, cfg: &RLConfig) -> Result<TrainedAgent> {
    cfg.validate()?;
    if table.state_count() != env.state_count() || table.action_count() != env.action_count() {
        return Err(Error::Data("Q-table shape does not match the environment".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n_actions = table.action_count();
    let mut eps = cfg.eps0;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut action_counts = vec![0; n_actions];

    for episode in 0..cfg.episodes {
        let mut s = env.begin_episode()?;
        let (mut reward_sum, mut wait_sum, mut dist_sum) = (0.0, 0.0, 0.0);
        for step in 0..cfg.steps_per_episode {
            let explore = rng.random::<f64>() < eps;
            let a = if explore {
                rng.random_range(0..n_actions)
            } else {
                table.argmax(s)
            };
            let st = env.step(a, step + 1 == cfg.steps_per_episode)?;
            if !st.reward.is_finite() {
                return Err(Error::Numeric(format!("non-finite reward in episode {episode}")));
            }
            table.q_update(s, a, st.reward, st.next_state, cfg.eta, cfg.lambda_d);
            action_counts[a] += 1;
            reward_sum += st.reward;
            if let Some(o) = st.outcome {
                wait_sum += o.wait_min;
                dist_sum += o.distance_km;
            }
            s = st.next_state;
        }
        let m = cfg.steps_per_episode as f64;
        log.push(EpisodeLog {
            episode: episode + 1,
            mean_reward: reward_sum / m,
            mean_wait_min: wait_sum / m,
            mean_dist_km: dist_sum / m,
            epsilon: eps,
        });
        eps *= cfg.rho;
    }
    if table.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Q-table diverged".to_string()));
    }
    Ok(TrainedAgent {
        table,
        log,
        action_counts,
        final_epsilon: eps,
    })
}

/// Stream of users drawn from the request log: a seeded shuffle walked
/// round-robin with wraparound. Every user in an episode is served at the
/// time of day of the episode's first request.
pub struct PlacementEnv<'a> {
    city: &'a CityModel,
    encoder: &'a dyn StateEncoder,
    actions: &'a [usize],
    requests: &'a [Request],
    order: Vec<usize>,
    cursor: usize,
    episode_time: f64,
}

impl<'a> PlacementEnv<'a> {
    pub fn new(
        city: &'a CityModel,
        encoder: &'a dyn StateEncoder,
        actions: &'a [usize],
        requests: &'a [Request],
        seed: u64,
    ) -> Result<Self> {
        if requests.is_empty() {
            return Err(Error::Data("training needs at least one request".to_string()));
        }
        if actions.is_empty() {
            return Err(Error::Data("training needs at least one action".to_string()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= city.locations.len()) {
            return Err(Error::Data(format!("action hotspot {bad} does not exist")));
        }
        let mut order: Vec<usize> = (0..requests.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(PlacementEnv {
            city,
            encoder,
            actions,
            requests,
            order,
            cursor: 0,
            episode_time: 0.0,
        })
    }

    fn current(&self) -> &Request {
        &self.requests[self.order[self.cursor % self.order.len()]]
    }
}

impl QEnvironment for PlacementEnv<'_> {
    fn state_count(&self) -> usize {
        self.encoder.state_count()
    }

    fn action_count(&self) -> usize {
        self.actions.len()
    }

    fn begin_episode(&mut self) -> Result<usize> {
        let (origin, t) = {
            let r = self.current();
            (r.origin, r.hour_of_day())
        };
        self.episode_time = t;
        self.encoder.encode(origin, t)
    }

    fn step(&mut self, action: usize, last_in_episode: bool) -> Result<Step> {
        let user = self.current().origin;
        let outcome = self.city.simulate(user, self.actions[action], self.episode_time)?;
        self.cursor += 1;
        let next = self.current();
        let t_next = if last_in_episode {
            next.hour_of_day()
        } else {
            self.episode_time
        };
        let next_state = self.encoder.encode(next.origin, t_next)?;
        Ok(Step {
            reward: outcome.reward,
            next_state,
            outcome: Some(outcome),
        })
    }
}

/// Trains a zero-initialized Q-table on the request stream.
pub fn train_agent(
    city: &CityModel,
    encoder: &dyn StateEncoder,
    actions: &[usize],
    requests: &[Request],
    cfg: &RLConfig,
) -> Result<TrainedAgent> {
    let table = QTable::zeros(encoder.state_count(), actions.to_vec())?;
    train_agent_from(table, city, encoder, requests, cfg)
}

/// Continues training from an existing table; its action list is used.
pub fn train_agent_from(
    table: QTable,
    city: &CityModel,
    encoder: &dyn StateEncoder,
    requests: &[Request],
    cfg: &RLConfig,
) -> Result<TrainedAgent> {
    cfg.validate()?;
    let actions = table.actions().to_vec();
    let mut env = PlacementEnv::new(city, encoder, &actions, requests, cfg.rng_seed.wrapping_add(1))?;
    run_q_learning(&mut env, table, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub hotspot: usize,
    pub action_index: usize,
    pub q_value: f64,
}

/// Top `top_k` hotspots for a user by Q-value (truncated to the action
/// count), ties to the lower action index.
pub fn recommend(
    table: &QTable,
    encoder: &dyn StateEncoder,
    user: GeoPoint,
    t_of_day: f64,
    top_k: usize,
) -> Result<Vec<Recommendation>> {
    let s = encoder.encode(user, t_of_day)?;
    if s >= table.state_count() {
        return Err(Error::Data(format!("state {s} outside the Q-table")));
    }
    Ok(table
        .ranked_actions(s)
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(rank, a)| Recommendation {
            rank: rank + 1,
            hotspot: table.actions()[a],
            action_index: a,
            q_value: table.get(s, a),
        })
        .collect())
}

/// The four compared methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "RP")]
    RandomPlacement,
    #[serde(rename = "GDP")]
    GreedyDemand,
    #[serde(rename = "RL-Only")]
    RlOnly,
    #[serde(rename = "GNN+RL")]
    GnnRl,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::RandomPlacement,
        Method::GreedyDemand,
        Method::RlOnly,
        Method::GnnRl,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::RandomPlacement => "RP",
            Method::GreedyDemand => "GDP",
            Method::RlOnly => "RL-Only",
            Method::GnnRl => "GNN+RL",
        }
    }

    pub fn long_name(&self) -> &'static str {
        match self {
            Method::RandomPlacement => "Random Placement(RP)",
            Method::GreedyDemand => "Greedy Demand(GDP)",
            Method::RlOnly => "RL-Only",
            Method::GnnRl => "GNN+RL",
        }
    }

    pub fn from_label(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.label() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A frozen recommendation rule returning a hotspot id.
pub trait Policy {
    fn method(&self) -> Method;
    fn choose(&mut self, user: GeoPoint, t_of_day: f64) -> Result<usize>;
}

/// Uniform choice over the action list.
pub struct RandomPolicy {
    actions: Vec<usize>,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(actions: Vec<usize>, seed: u64) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Data("random policy needs actions".to_string()));
        }
        Ok(RandomPolicy {
            actions,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Policy for RandomPolicy {
    fn method(&self) -> Method {
        Method::RandomPlacement
    }

    fn choose(&mut self, _user: GeoPoint, _t_of_day: f64) -> Result<usize> {
        Ok(self.actions[self.rng.random_range(0..self.actions.len())])
    }
}

/// Always the highest-demand hotspot among the actions.
pub struct GreedyDemandPolicy {
    hotspot: usize,
}

impl GreedyDemandPolicy {
    /// `demands` is indexed by hotspot id; ties go to the lowest id.
    pub fn new(actions: &[usize], demands: &[f64]) -> Result<Self> {
        let hotspot = actions
            .iter()
            .copied()
            .max_by(|&a, &b| demands[a].total_cmp(&demands[b]).then(b.cmp(&a)))
            .ok_or_else(|| Error::Data("greedy policy needs actions".to_string()))?;
        Ok(GreedyDemandPolicy { hotspot })
    }

    pub fn hotspot(&self) -> usize {
        self.hotspot
    }
}

impl Policy for GreedyDemandPolicy {
    fn method(&self) -> Method {
        Method::GreedyDemand
    }

    fn choose(&mut self, _user: GeoPoint, _t_of_day: f64) -> Result<usize> {
        Ok(self.hotspot)
    }
}

/// Greedy read-out of a trained Q-table.
pub struct QPolicy<E> {
    method: Method,
    table: QTable,
    encoder: E,
}

impl<E: StateEncoder> QPolicy<E> {
    pub fn new(method: Method, table: QTable, encoder: E) -> Result<Self> {
        if table.state_count() != encoder.state_count() {
            return Err(Error::Data(
                "Q-table and state encoder disagree on the state count".to_string(),
            ));
        }
        Ok(QPolicy { method, table, encoder })
    }

    pub fn table(&self) -> &QTable {
        &self.table
    }
}

impl<E: StateEncoder> Policy for QPolicy<E> {
    fn method(&self) -> Method {
        self.method
    }

    fn choose(&mut self, user: GeoPoint, t_of_day: f64) -> Result<usize> {
        let s = self.encoder.encode(user, t_of_day)?;
        Ok(self.table.actions()[self.table.argmax(s)])
    }
}

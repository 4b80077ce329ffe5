//! Stage orchestration over a run directory. Every stage reads the
//! checkpoints of earlier stages from disk and writes its own, so any stage
//! can be rerun on its own.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_trips, export_geojson, sample_trips, write_convergence_csv, write_trip_records, ConvergenceSeries,
    EvalReport, TripRecord,
};
use crate::geodata::{
    dbscan_hotspots, generate_world, haversine_km, nearest_hotspot, write_hotspots_csv, write_requests_csv, BBox,
    GeoPoint, World,
};
use crate::gnn::{train, EmbeddingTable};
use crate::graph::{build_graph, greedy_khop_dominating_set, DominatingSet, RoadGraph, TrafficProfile};
use crate::rl::{
    recommend, train_agent, write_training_log, CityModel, EmbeddingStates, GreedyDemandPolicy, Method,
    NearestHotspotStates, Policy, QPolicy, QTable, RLConfig, RandomPolicy, Recommendation, StateEncoder,
};
use crate::states::{fit_kmeans, StateCodec};
use crate::traffic::{build_provider, splitmix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Stage {
    Generate,
    BuildGraph,
    Dominate,
    Embed,
    FitStates,
    Train,
    Evaluate,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::BuildGraph,
        Stage::Dominate,
        Stage::Embed,
        Stage::FitStates,
        Stage::Train,
        Stage::Evaluate,
        Stage::Export,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::BuildGraph => "build-graph",
            Stage::Dominate => "dominate",
            Stage::Embed => "embed",
            Stage::FitStates => "fit-states",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    fn file(&self, stage: &str, name: &str) -> PathBuf {
        self.root.join(stage).join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn world(&self) -> PathBuf {
        self.file("world", "world.json")
    }
    pub fn hotspots_csv(&self) -> PathBuf {
        self.file("world", "hotspots.csv")
    }
    pub fn requests_csv(&self) -> PathBuf {
        self.file("world", "requests.csv")
    }
    pub fn graph(&self) -> PathBuf {
        self.file("graph", "graph.json")
    }
    pub fn traffic_profile(&self) -> PathBuf {
        self.file("graph", "traffic_profile.json")
    }
    pub fn graph_geojson(&self) -> PathBuf {
        self.file("graph", "graph.geojson")
    }
    pub fn dominating_set(&self) -> PathBuf {
        self.file("dominate", "dominating_set.json")
    }
    pub fn model(&self) -> PathBuf {
        self.file("embed", "model.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.file("embed", "embeddings.csv")
    }
    pub fn loss_curve(&self) -> PathBuf {
        self.file("embed", "loss_curve.csv")
    }
    pub fn codec(&self) -> PathBuf {
        self.file("states", "codec.json")
    }
    pub fn qtable(&self, method: Method) -> PathBuf {
        self.file("train", &format!("qtable_{}.json", method_slug(method)))
    }
    pub fn training_log(&self, method: Method) -> PathBuf {
        self.file("train", &format!("log_{}.csv", method_slug(method)))
    }
    pub fn report_json(&self) -> PathBuf {
        self.file("evaluate", "report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.file("evaluate", "report.txt")
    }
    pub fn trips_csv(&self) -> PathBuf {
        self.file("evaluate", "trips.csv")
    }
    pub fn convergence_csv(&self) -> PathBuf {
        self.file("evaluate", "convergence.csv")
    }
    pub fn map_geojson(&self) -> PathBuf {
        self.file("export", "map.geojson")
    }
    pub fn recommendation_geojson(&self) -> PathBuf {
        self.file("recommend", "recommendation.geojson")
    }

    /// Files a stage reads; all must exist before it runs.
    pub fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Generate => vec![],
            Stage::BuildGraph => vec![self.world()],
            Stage::Dominate => vec![self.graph()],
            Stage::Embed => vec![self.graph()],
            Stage::FitStates => vec![self.embeddings()],
            Stage::Train => vec![
                self.world(),
                self.graph(),
                self.traffic_profile(),
                self.dominating_set(),
                self.embeddings(),
                self.codec(),
            ],
            Stage::Evaluate => {
                let mut v = self.inputs(Stage::Train);
                v.extend([self.qtable(Method::RlOnly), self.qtable(Method::GnnRl)]);
                v
            }
            Stage::Export => vec![
                self.graph(),
                self.traffic_profile(),
                self.dominating_set(),
                self.embeddings(),
                self.codec(),
                self.qtable(Method::GnnRl),
            ],
        }
    }

    /// Files a stage writes; a stage counts as complete when all exist.
    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Generate => vec![self.world(), self.hotspots_csv(), self.requests_csv()],
            Stage::BuildGraph => vec![self.graph(), self.traffic_profile(), self.graph_geojson()],
            Stage::Dominate => vec![self.dominating_set()],
            Stage::Embed => vec![self.model(), self.embeddings(), self.loss_curve()],
            Stage::FitStates => vec![self.codec()],
            Stage::Train => vec![
                self.qtable(Method::GnnRl),
                self.qtable(Method::RlOnly),
                self.training_log(Method::GnnRl),
                self.training_log(Method::RlOnly),
            ],
            Stage::Evaluate => vec![
                self.report_json(),
                self.report_txt(),
                self.trips_csv(),
                self.convergence_csv(),
            ],
            Stage::Export => vec![self.map_geojson()],
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.outputs(stage).iter().all(|p| p.is_file())
    }
}

fn method_slug(method: Method) -> &'static str {
    match method {
        Method::RandomPlacement => "rp",
        Method::GreedyDemand => "gdp",
        Method::RlOnly => "rl_only",
        Method::GnnRl => "gnn_rl",
    }
}

/// Hourly traffic scores plus whether they came from a reproducible source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficCheckpoint {
    pub reproducible: bool,
    pub profile: TrafficProfile,
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<f64>> {
    Ok(crate::persist::read_csv::<LossRow>(path)?
        .into_iter()
        .map(|r| r.loss)
        .collect())
}

/// Seed for an independent random stream derived from `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base) ^ stream)
}

/// What happened to a stage during [`Pipeline::run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: RunLayout,
    /// Traffic cache override for file and http modes.
    pub cache_path: Option<PathBuf>,
    /// Skip stages whose outputs already exist.
    pub resume: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = RunLayout::new(config.out_dir.clone());
        Ok(Pipeline {
            config,
            layout,
            cache_path: None,
            resume: false,
        })
    }

    /// Runs every stage in order.
    pub fn run(&self) -> Result<Vec<(Stage, StageStatus)>, StageFailure> {
        self.run_stages(&Stage::ALL)
    }

    pub fn run_stages(&self, stages: &[Stage]) -> Result<Vec<(Stage, StageStatus)>, StageFailure> {
        let mut out = Vec::with_capacity(stages.len());
        for &stage in stages {
            let status = self.run_stage(stage).map_err(|error| StageFailure { stage, error })?;
            out.push((stage, status));
        }
        Ok(out)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus> {
        if self.resume && self.layout.is_complete(stage) {
            return Ok(StageStatus::Skipped);
        }
        for input in self.layout.inputs(stage) {
            if !input.is_file() {
                return Err(Error::Data(format!(
                    "stage {stage} needs checkpoint {}; run the earlier stages first",
                    input.display()
                )));
            }
        }
        crate::persist::write_text(&self.layout.config(), &self.config.to_toml_string()?)?;
        match stage {
            Stage::Generate => self.generate(),
            Stage::BuildGraph => self.build_graph(),
            Stage::Dominate => self.dominate(),
            Stage::Embed => self.embed(),
            Stage::FitStates => self.fit_states(),
            Stage::Train => self.train(),
            Stage::Evaluate => self.evaluate(),
            Stage::Export => self.export(),
        }?;
        Ok(StageStatus::Ran)
    }

    fn generate(&self) -> Result<()> {
        let mut world = generate_world(&self.config.world)?;
        if self.config.dbscan.enabled {
            world = cluster_world(world, self.config.dbscan.eps_km, self.config.dbscan.min_pts)?;
            if self.config.states.k > world.hotspots.len() {
                return Err(Error::config(
                    "states.k",
                    format!(
                        "k = {} exceeds the {} clustered hotspots",
                        self.config.states.k,
                        world.hotspots.len()
                    ),
                ));
            }
        }
        write_hotspots_csv(&self.layout.hotspots_csv(), &world.hotspots)?;
        write_requests_csv(&self.layout.requests_csv(), &world.requests)?;
        crate::persist::write_json(&self.layout.world(), &world)
    }

    fn build_graph(&self) -> Result<()> {
        let world = load_world(&self.layout.world())?;
        let locations: Vec<GeoPoint> = world.hotspots.iter().map(|h| h.location).collect();
        let cache_path = self.cache_path.clone();
        let provider = build_provider(&self.config.traffic, locations, cache_path.as_deref())?;
        let graph = build_graph(world.hotspots, provider.as_ref(), &self.config.graph)?;
        let profile = graph.hourly_traffic_scores(provider.as_ref())?;
        if !provider.is_reproducible() {
            let path = cache_path.unwrap_or_else(|| PathBuf::from(&self.config.traffic.cache_path));
            provider.flush_cache(&path)?;
        }
        graph.save_json(&self.layout.graph())?;
        crate::persist::write_json(
            &self.layout.traffic_profile(),
            &TrafficCheckpoint {
                reproducible: provider.is_reproducible(),
                profile,
            },
        )?;
        export_geojson(&graph, None, &[], None, graph.t_of_day(), &self.layout.graph_geojson())
    }

    fn dominate(&self) -> Result<()> {
        let graph = RoadGraph::load_json(&self.layout.graph())?;
        greedy_khop_dominating_set(&graph, self.config.graph.k)?.save(&self.layout.dominating_set())
    }

    fn embed(&self) -> Result<()> {
        let graph = RoadGraph::load_json(&self.layout.graph())?;
        let trained = train(&graph, &self.config.gnn)?;
        trained.model.save(&self.layout.model(), &self.config.gnn)?;
        trained.embeddings.write_csv(&self.layout.embeddings())?;
        crate::persist::write_csv(
            &self.layout.loss_curve(),
            trained
                .loss_curve
                .iter()
                .enumerate()
                .map(|(epoch, &loss)| LossRow { epoch, loss }),
        )
    }

    fn fit_states(&self) -> Result<()> {
        let embeddings = EmbeddingTable::read_csv(&self.layout.embeddings())?;
        fit_kmeans(&embeddings.rows, &self.config.states)?
            .codec
            .save(&self.layout.codec())
    }

    fn train(&self) -> Result<()> {
        let ctx = Context::load(&self.layout, &self.config)?;
        for (method, agent) in ctx.train_both(&self.config.rl)? {
            agent
                .table
                .save(&self.layout.qtable(method), method.label(), &self.config.rl)?;
            write_training_log(&self.layout.training_log(method), &agent.log)?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let ctx = Context::load(&self.layout, &self.config)?;
        let eval = &self.config.eval;
        let mut records: Vec<TripRecord> = Vec::new();
        let mut convergence = Vec::new();
        let fixed_tables = if eval.retrain_per_seed {
            None
        } else {
            Some((
                QTable::load(&self.layout.qtable(Method::RlOnly))?.0,
                QTable::load(&self.layout.qtable(Method::GnnRl))?.0,
            ))
        };
        for &seed in &eval.seeds {
            let rl_cfg = RLConfig {
                rng_seed: derive_seed(self.config.rl.rng_seed, seed),
                ..self.config.rl.clone()
            };
            let (rl_table, gnn_table) = match &fixed_tables {
                Some((a, b)) => (a.clone(), b.clone()),
                None => {
                    let [(_, rl), (_, gnn)] = ctx.train_both(&rl_cfg)?;
                    for (method, agent) in [(Method::RlOnly, &rl), (Method::GnnRl, &gnn)] {
                        convergence.push(ConvergenceSeries {
                            method,
                            seed,
                            episodes: agent.log.clone(),
                        });
                    }
                    (rl.table, gnn.table)
                }
            };
            let mut rp = RandomPolicy::new(ctx.actions.clone(), derive_seed(seed, 1))?;
            let mut gdp = GreedyDemandPolicy::new(&ctx.actions, &ctx.demands)?;
            let mut rl = QPolicy::new(Method::RlOnly, rl_table, ctx.nearest.clone())?;
            let mut gnn = QPolicy::new(Method::GnnRl, gnn_table, ctx.embedding.clone())?;
            for (method, policy) in [
                (Method::RandomPlacement, &mut rp as &mut dyn Policy),
                (Method::GreedyDemand, &mut gdp),
            ] {
                let episodes = crate::eval::rollout_log(
                    policy,
                    &ctx.city,
                    &ctx.world.requests,
                    rl_cfg.episodes,
                    rl_cfg.steps_per_episode,
                    rl_cfg.rng_seed.wrapping_add(1),
                )?;
                convergence.push(ConvergenceSeries { method, seed, episodes });
            }
            let mut rp = RandomPolicy::new(ctx.actions.clone(), derive_seed(seed, 1))?;
            let trips = sample_trips(
                &ctx.locations,
                &ctx.world.demand_weights,
                &ctx.world.bbox,
                eval.n_trips,
                derive_seed(self.config.world.rng_seed, seed),
            )?
            .into_iter()
            .map(|t| crate::eval::Trip { seed, ..t })
            .collect::<Vec<_>>();
            let mut policies: [&mut dyn Policy; 4] = [&mut rp, &mut gdp, &mut rl, &mut gnn];
            records.extend(evaluate_trips(&mut policies, &ctx.city, &ctx.actions, &trips)?);
        }
        convergence.sort_by_key(|c| (c.method, c.seed));
        let report = EvalReport::from_records(
            &records,
            eval.n_trips,
            eval.seeds.clone(),
            convergence,
            ctx.reproducible,
        )?;
        write_trip_records(&self.layout.trips_csv(), &records)?;
        write_convergence_csv(&self.layout.convergence_csv(), &report.convergence)?;
        report.save_json(&self.layout.report_json())?;
        crate::persist::write_text(&self.layout.report_txt(), &report.to_table())
    }

    fn export(&self) -> Result<()> {
        let rec = Recommender::open(&self.layout.root)?;
        let d = &self.config.demo;
        let user = GeoPoint::new(d.lat, d.lon)?;
        let ranked: Vec<usize> = rec
            .recommend(user, d.t_of_day, d.top_k)?
            .iter()
            .map(|r| r.hotspot)
            .collect();
        export_geojson(
            &rec.graph,
            Some(&rec.dom),
            &ranked,
            Some(&rec.city.traffic),
            d.t_of_day,
            &self.layout.map_geojson(),
        )
    }
}

/// Replaces the generated hotspots with density clusters of the request
/// origins. Requests are reassigned to their nearest cluster and event flags
/// move to the cluster nearest each flagged hotspot.
pub fn cluster_world(world: World, eps_km: f64, min_pts: usize) -> Result<World> {
    let points: Vec<GeoPoint> = world.requests.iter().map(|r| r.origin).collect();
    let mut hotspots = dbscan_hotspots(&points, eps_km, min_pts)?;
    if hotspots.len() < 2 {
        return Err(Error::Data(format!(
            "density clustering found {} clusters; at least 2 are required",
            hotspots.len()
        )));
    }
    let locations: Vec<GeoPoint> = hotspots.iter().map(|h| h.location).collect();
    for h in world.hotspots.iter().filter(|h| h.event_flag > 0.0) {
        let c = nearest_hotspot(&locations, h.location).expect("clusters exist");
        hotspots[c].event_flag = hotspots[c].event_flag.max(h.event_flag);
    }
    let requests = world
        .requests
        .into_iter()
        .map(|mut r| {
            r.assigned_hotspot = nearest_hotspot(&locations, r.origin);
            r
        })
        .collect();
    let total: f64 = hotspots.iter().map(|h| h.demand).sum();
    let demand_weights = hotspots.iter().map(|h| h.demand / total).collect();
    Ok(World {
        bbox: world.bbox,
        hotspots,
        requests,
        demand_weights,
    })
}

pub fn load_world(path: &Path) -> Result<World> {
    crate::persist::read_json(path)
}

pub fn load_traffic(path: &Path) -> Result<TrafficCheckpoint> {
    crate::persist::read_json(path)
}

/// Everything the learning and evaluation stages share.
struct Context {
    world: World,
    locations: Vec<GeoPoint>,
    demands: Vec<f64>,
    actions: Vec<usize>,
    city: CityModel,
    embedding: EmbeddingStates,
    nearest: NearestHotspotStates,
    reproducible: bool,
}

impl Context {
    fn load(layout: &RunLayout, cfg: &PipelineConfig) -> Result<Self> {
        let world = load_world(&layout.world())?;
        let graph = RoadGraph::load_json(&layout.graph())?;
        let traffic = load_traffic(&layout.traffic_profile())?;
        let dom = DominatingSet::load(&layout.dominating_set())?;
        let embeddings = EmbeddingTable::read_csv(&layout.embeddings())?;
        let codec = StateCodec::load(&layout.codec())?;
        let locations = graph.locations();
        if world.hotspots.len() != locations.len() {
            return Err(Error::Data(
                "world and graph checkpoints disagree on the hotspot count".to_string(),
            ));
        }
        let time_buckets = codec.time_buckets();
        Ok(Context {
            demands: graph.nodes().iter().map(|h| h.demand).collect(),
            actions: dom.members.clone(),
            city: CityModel::new(locations.clone(), traffic.profile, cfg.rl.weights)?,
            embedding: EmbeddingStates::new(locations.clone(), embeddings, codec)?,
            nearest: NearestHotspotStates::new(locations.clone(), time_buckets)?,
            reproducible: traffic.reproducible,
            locations,
            world,
        })
    }

    fn train_both(&self, cfg: &RLConfig) -> Result<[(Method, crate::rl::TrainedAgent); 2]> {
        let rl = train_agent(&self.city, &self.nearest, &self.actions, &self.world.requests, cfg)?;
        let gnn = train_agent(&self.city, &self.embedding, &self.actions, &self.world.requests, cfg)?;
        Ok([(Method::RlOnly, rl), (Method::GnnRl, gnn)])
    }
}

/// A ranked hotspot with the quantities a dispatcher needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHotspot {
    pub rank: usize,
    pub hotspot: usize,
    pub lat: f64,
    pub lon: f64,
    pub q_value: f64,
    pub distance_km: f64,
    pub congestion: f64,
}

/// Frozen GNN+RL policy loaded from a run directory.
pub struct Recommender {
    pub graph: RoadGraph,
    pub dom: DominatingSet,
    pub city: CityModel,
    pub bbox: Option<BBox>,
    pub table: QTable,
    pub encoder: EmbeddingStates,
}

impl Recommender {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let layout = RunLayout::new(run_dir);
        for input in layout.inputs(Stage::Export) {
            if !input.is_file() {
                return Err(Error::Data(format!(
                    "recommendation needs checkpoint {}; run the pipeline first",
                    input.display()
                )));
            }
        }
        let graph = RoadGraph::load_json(&layout.graph())?;
        let traffic = load_traffic(&layout.traffic_profile())?;
        let dom = DominatingSet::load(&layout.dominating_set())?;
        let embeddings = EmbeddingTable::read_csv(&layout.embeddings())?;
        let codec = StateCodec::load(&layout.codec())?;
        let (table, rl_cfg) = QTable::load(&layout.qtable(Method::GnnRl))?;
        let bbox = layout
            .world()
            .is_file()
            .then(|| load_world(&layout.world()))
            .transpose()?
            .map(|w| w.bbox);
        let locations = graph.locations();
        let encoder = EmbeddingStates::new(locations.clone(), embeddings, codec)?;
        if encoder.state_count() != table.state_count() {
            return Err(Error::Data(
                "Q-table and state codec disagree on the state count".to_string(),
            ));
        }
        Ok(Recommender {
            city: CityModel::new(locations, traffic.profile, rl_cfg.weights)?,
            graph,
            dom,
            bbox,
            table,
            encoder,
        })
    }

    /// Whether `user` lies inside the world's bounding box, when known.
    pub fn in_bounds(&self, user: GeoPoint) -> bool {
        self.bbox.is_none_or(|b| b.contains(user))
    }

    pub fn raw(&self, user: GeoPoint, t_of_day: f64, top_k: usize) -> Result<Vec<Recommendation>> {
        recommend(&self.table, &self.encoder, user, t_of_day, top_k)
    }

    pub fn recommend(&self, user: GeoPoint, t_of_day: f64, top_k: usize) -> Result<Vec<RankedHotspot>> {
        if !(0.0..24.0).contains(&t_of_day) {
            return Err(Error::Data(format!("time of day {t_of_day} outside [0, 24)")));
        }
        self.raw(user, t_of_day, top_k)?
            .into_iter()
            .map(|r| {
                let loc = self.city.locations[r.hotspot];
                Ok(RankedHotspot {
                    rank: r.rank,
                    hotspot: r.hotspot,
                    lat: loc.lat,
                    lon: loc.lon,
                    q_value: r.q_value,
                    distance_km: haversine_km(user, loc),
                    congestion: self.city.traffic.score(r.hotspot, t_of_day),
                })
            })
            .collect()
    }

    pub fn export(&self, ranked: &[RankedHotspot], t_of_day: f64, path: &Path) -> Result<()> {
        let ids: Vec<usize> = ranked.iter().map(|r| r.hotspot).collect();
        export_geojson(
            &self.graph,
            Some(&self.dom),
            &ids,
            Some(&self.city.traffic),
            t_of_day,
            path,
        )
    }
}

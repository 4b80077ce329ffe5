use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taxiplace::config::PipelineConfig;
use taxiplace::pipeline::{Pipeline, Recommender, RunLayout, StageStatus};
use taxiplace::traffic::TrafficMode;
use taxiplace::{Error, GeoPoint, Stage};

#[derive(Parser)]
#[command(name = "taxiplace", version, about = "Traffic-aware taxi hotspot placement")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding all checkpoints.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    traffic_mode: Option<TrafficMode>,
    /// Travel-time cache file for file and http traffic modes.
    #[arg(long, global = true)]
    traffic_cache: Option<PathBuf>,
    /// Skip stages whose checkpoints already exist.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate hotspots and requests.
    Generate {
        /// Replace the generated hotspots with DBSCAN clusters of the requests.
        #[arg(long)]
        dbscan: bool,
        #[arg(long)]
        eps_km: Option<f64>,
        #[arg(long)]
        min_pts: Option<usize>,
    },
    /// Wire hotspots into a graph with travel times and features.
    BuildGraph,
    /// Select the k-hop dominating set used as the action space.
    Dominate,
    /// Train node embeddings.
    Embed,
    /// Cluster embeddings into Q-learning states.
    FitStates,
    /// Train the GNN+RL and RL-only agents.
    Train,
    /// Compare all four methods.
    Evaluate,
    /// Write the map layer with the demo recommendation.
    Export,
    /// Rank hotspots for one user.
    Recommend {
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        /// Hour of day in [0, 24).
        #[arg(long)]
        time: f64,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
    },
    /// Run every stage, or one stage with --stage.
    Pipeline {
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
}

struct Failure {
    message: String,
    code: i32,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            message: e.to_string(),
            code: e.exit_code(),
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &g.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(mode) = g.traffic_mode {
        cfg.set_traffic_mode(mode);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.global)?;
    let stages = match cli.command {
        Command::Generate {
            dbscan,
            eps_km,
            min_pts,
        } => {
            cfg.dbscan.enabled |= dbscan;
            if let Some(eps) = eps_km {
                cfg.dbscan.eps_km = eps;
            }
            if let Some(m) = min_pts {
                cfg.dbscan.min_pts = m;
            }
            vec![Stage::Generate]
        }
        Command::BuildGraph => vec![Stage::BuildGraph],
        Command::Dominate => vec![Stage::Dominate],
        Command::Embed => vec![Stage::Embed],
        Command::FitStates => vec![Stage::FitStates],
        Command::Train => vec![Stage::Train],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Export => vec![Stage::Export],
        Command::Pipeline { stage } => stage.map_or_else(|| Stage::ALL.to_vec(), |s| vec![s]),
        Command::Recommend { lat, lon, time, top_k } => return Ok(cmd_recommend(&cfg, lat, lon, time, top_k)?),
    };
    let mut pipeline = Pipeline::new(cfg)?;
    pipeline.cache_path = cli.global.traffic_cache;
    pipeline.resume = cli.global.resume;
    let done = pipeline.run_stages(&stages).map_err(|f| Failure {
        message: f.to_string(),
        code: f.error.exit_code(),
    })?;
    for (stage, status) in done {
        match status {
            StageStatus::Ran => eprintln!("{stage}: done"),
            StageStatus::Skipped => eprintln!("{stage}: skipped (checkpoint present)"),
        }
    }
    if stages.contains(&Stage::Evaluate) {
        let layout = RunLayout::new(&pipeline.config.out_dir);
        if let Ok(table) = std::fs::read_to_string(layout.report_txt()) {
            print!("{table}");
        }
    }
    Ok(())
}

fn cmd_recommend(cfg: &PipelineConfig, lat: f64, lon: f64, time: f64, top_k: usize) -> Result<(), Error> {
    if top_k == 0 {
        return Err(Error::config("top_k", "must be at least 1"));
    }
    let user = GeoPoint::new(lat, lon)?;
    let rec = Recommender::open(&cfg.out_dir)?;
    if !rec.in_bounds(user) {
        eprintln!("warning: ({lat}, {lon}) lies outside the world bounding box; using the nearest hotspot");
    }
    let ranked = rec.recommend(user, time, top_k)?;
    println!(
        "{:>4}  {:>7}  {:>10}  {:>10}  {:>10}  {:>11}  {:>10}",
        "rank", "hotspot", "lat", "lon", "q_value", "distance_km", "congestion"
    );
    for r in &ranked {
        println!(
            "{:>4}  {:>7}  {:>10.5}  {:>10.5}  {:>10.4}  {:>11.3}  {:>10.3}",
            r.rank, r.hotspot, r.lat, r.lon, r.q_value, r.distance_km, r.congestion
        );
    }
    rec.export(&ranked, time, &RunLayout::new(&cfg.out_dir).recommendation_geojson())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}

//! Pairwise travel times between hotspots: a deterministic mock congestion
//! model, an HTTP distance-matrix client with an on-disk cache, and a
//! file-only replay provider.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{haversine_km, GeoPoint};

/// City-wide free-flow speed.
pub const FREE_FLOW_SPEED_KMH: f64 = 40.0;

/// Current and free-flow travel time for one hotspot pair, in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TravelTimePair {
    pub current_min: f64,
    pub free_flow_min: f64,
}

impl TravelTimePair {
    pub fn new(current_min: f64, free_flow_min: f64) -> Result<Self> {
        if !(free_flow_min > 0.0) || !free_flow_min.is_finite() {
            return Err(Error::Provider(format!(
                "free-flow time {free_flow_min} must be positive"
            )));
        }
        if !(current_min >= free_flow_min) || !current_min.is_finite() {
            return Err(Error::Provider(format!(
                "current time {current_min} below free-flow time {free_flow_min}"
            )));
        }
        Ok(TravelTimePair {
            current_min,
            free_flow_min,
        })
    }

    /// Congestion ratio `current / free_flow`, always at least 1.
    pub fn ratio(&self) -> f64 {
        self.current_min / self.free_flow_min
    }
}

pub fn free_flow_minutes(distance_km: f64) -> f64 {
    distance_km / FREE_FLOW_SPEED_KMH * 60.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TrafficMode {
    #[default]
    Mock,
    Http,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficProviderConfig {
    pub mode: TrafficMode,
    pub mock_seed: u64,
    /// Multiplier at the diurnal peak before edge noise; the sin² amplitude
    /// is `mock_peak_factor - 1`.
    pub mock_peak_factor: f64,
    /// Upper bound of the per-edge hashed noise term.
    pub mock_noise_max: f64,
    pub endpoint_url: String,
    /// Environment variable holding the API key in http mode.
    pub api_key_env: String,
    pub cache_path: String,
    /// Minimum spacing between outbound HTTP requests.
    pub rate_limit_ms: u64,
    pub timeout_ms: u64,
}

impl Default for TrafficProviderConfig {
    fn default() -> Self {
        TrafficProviderConfig {
            mode: TrafficMode::Mock,
            mock_seed: 42,
            mock_peak_factor: 2.5,
            mock_noise_max: 0.3,
            endpoint_url: "https://maps.googleapis.com/maps/api/distancematrix/json".to_string(),
            api_key_env: "TAXIPLACE_MAPS_API_KEY".to_string(),
            cache_path: "traffic_cache.json".to_string(),
            rate_limit_ms: 100,
            timeout_ms: 10_000,
        }
    }
}

impl TrafficProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mock_peak_factor >= 1.0) || !self.mock_peak_factor.is_finite() {
            return Err(Error::config("traffic.mock_peak_factor", "must be at least 1"));
        }
        if !(self.mock_noise_max >= 0.0) || !self.mock_noise_max.is_finite() {
            return Err(Error::config("traffic.mock_noise_max", "must be non-negative"));
        }
        if self.mode == TrafficMode::Http && self.endpoint_url.is_empty() {
            return Err(Error::config("traffic.endpoint_url", "required in http mode"));
        }
        Ok(())
    }
}

/// Source of travel times between hotspot ids.
pub trait TravelTimeProvider: Send + Sync {
    fn node_count(&self) -> usize;

    fn travel_time(&self, u: usize, v: usize, t_of_day: f64) -> Result<TravelTimePair>;

    /// Whether identical queries always return identical answers.
    fn is_reproducible(&self) -> bool {
        true
    }

    /// Persists any responses gathered so far. Providers without a cache do
    /// nothing.
    fn flush_cache(&self, _path: &Path) -> Result<()> {
        Ok(())
    }
}

fn check_pair(n: usize, u: usize, v: usize) -> Result<()> {
    if u >= n || v >= n {
        return Err(Error::Data(format!(
            "unknown hotspot id in pair ({u}, {v}); {n} hotspots"
        )));
    }
    if u == v {
        return Err(Error::Data(format!("travel time requested from hotspot {u} to itself")));
    }
    Ok(())
}

fn hour_bucket(t_of_day: f64) -> u32 {
    (t_of_day.rem_euclid(24.0).floor() as u32).min(23)
}

/// Diurnal sin² congestion curve plus deterministic per-edge noise.
///
/// multiplier(u, v, t) = 1 + A·sin²(π(t − 7)/12) + noise(u, v), with
/// noise uniform in `[0, noise_max)` hashed from the unordered pair and seed.
#[derive(Debug, Clone)]
pub struct MockTraffic {
    locations: Vec<GeoPoint>,
    seed: u64,
    amplitude: f64,
    noise_max: f64,
}

impl MockTraffic {
    pub fn new(locations: Vec<GeoPoint>, seed: u64, peak_factor: f64, noise_max: f64) -> Result<Self> {
        if !(peak_factor >= 1.0) {
            return Err(Error::config("traffic.mock_peak_factor", "must be at least 1"));
        }
        if !(noise_max >= 0.0) {
            return Err(Error::config("traffic.mock_noise_max", "must be non-negative"));
        }
        Ok(MockTraffic {
            locations,
            seed,
            amplitude: peak_factor - 1.0,
            noise_max,
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn edge_noise(&self, u: usize, v: usize) -> f64 {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        let h = splitmix64(splitmix64(splitmix64(self.seed) ^ a as u64) ^ b as u64);
        // 53 high bits -> [0, 1)
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        unit * self.noise_max
    }

    pub fn multiplier(&self, u: usize, v: usize, t_of_day: f64) -> f64 {
        let s = (std::f64::consts::PI * (t_of_day - 7.0) / 12.0).sin();
        1.0 + self.amplitude * s * s + self.edge_noise(u, v)
    }
}

impl TravelTimeProvider for MockTraffic {
    fn node_count(&self) -> usize {
        self.locations.len()
    }

    fn travel_time(&self, u: usize, v: usize, t_of_day: f64) -> Result<TravelTimePair> {
        check_pair(self.locations.len(), u, v)?;
        let free_flow_min = free_flow_minutes(haversine_km(self.locations[u], self.locations[v]));
        if !(free_flow_min > 0.0) {
            return Err(Error::Data(format!("hotspots {u} and {v} coincide")));
        }
        Ok(TravelTimePair {
            current_min: free_flow_min * self.multiplier(u, v, t_of_day),
            free_flow_min,
        })
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    u: usize,
    v: usize,
    hour: u32,
    current_min: f64,
    free_flow_min: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    entries: Vec<CacheEntry>,
}

/// Travel times keyed by unordered pair and hourly bucket.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TravelTimeCache {
    entries: BTreeMap<(usize, usize, u32), TravelTimePair>,
}

impl TravelTimeCache {
    fn key(u: usize, v: usize, t_of_day: f64) -> (usize, usize, u32) {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        (a, b, hour_bucket(t_of_day))
    }

    pub fn get(&self, u: usize, v: usize, t_of_day: f64) -> Option<TravelTimePair> {
        self.entries.get(&Self::key(u, v, t_of_day)).copied()
    }

    pub fn insert(&mut self, u: usize, v: usize, t_of_day: f64, pair: TravelTimePair) {
        self.entries.insert(Self::key(u, v, t_of_day), pair);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CacheFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        let mut cache = TravelTimeCache::default();
        for e in file.entries {
            let pair = TravelTimePair::new(e.current_min, e.free_flow_min).map_err(|err| Error::format(path, err))?;
            cache.entries.insert((e.u.min(e.v), e.u.max(e.v), e.hour), pair);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CacheFile {
            entries: self
                .entries
                .iter()
                .map(|(&(u, v, hour), p)| CacheEntry {
                    u,
                    v,
                    hour,
                    current_min: p.current_min,
                    free_flow_min: p.free_flow_min,
                })
                .collect(),
        };
        crate::persist::write_json(path, &file)
    }
}

/// Replays travel times from a cache file; unknown pairs are errors.
#[derive(Debug, Clone)]
pub struct FileTraffic {
    n: usize,
    cache: TravelTimeCache,
}

impl FileTraffic {
    pub fn new(n: usize, cache: TravelTimeCache) -> Self {
        FileTraffic { n, cache }
    }

    pub fn open(n: usize, path: &Path) -> Result<Self> {
        Ok(FileTraffic::new(n, TravelTimeCache::load(path)?))
    }
}

impl TravelTimeProvider for FileTraffic {
    fn node_count(&self) -> usize {
        self.n
    }

    fn travel_time(&self, u: usize, v: usize, t_of_day: f64) -> Result<TravelTimePair> {
        check_pair(self.n, u, v)?;
        self.cache.get(u, v, t_of_day).ok_or_else(|| {
            Error::Provider(format!(
                "no cached travel time for ({u}, {v}) at hour {}",
                hour_bucket(t_of_day)
            ))
        })
    }
}

#[derive(Debug, Deserialize)]
struct MatrixResponse {
    rows: Vec<MatrixRow>,
}

#[derive(Debug, Deserialize)]
struct MatrixRow {
    elements: Vec<MatrixElement>,
}

#[derive(Debug, Deserialize)]
struct MatrixElement {
    duration: MatrixValue,
    duration_in_traffic: MatrixValue,
}

#[derive(Debug, Deserialize)]
struct MatrixValue {
    value: f64,
}

/// Parses a distance-matrix body of the shape
/// `{"rows":[{"elements":[{"duration":{"value":s},"duration_in_traffic":{"value":s}}]}]}`
/// into a travel-time pair for the first element.
pub fn parse_matrix_response(body: &str) -> Result<TravelTimePair> {
    let resp: MatrixResponse =
        serde_json::from_str(body).map_err(|e| Error::Provider(format!("malformed matrix response: {e}")))?;
    let element = resp
        .rows
        .first()
        .and_then(|r| r.elements.first())
        .ok_or_else(|| Error::Provider("matrix response has no elements".to_string()))?;
    let free = element.duration.value / 60.0;
    let current = element.duration_in_traffic.value / 60.0;
    // The service occasionally reports traffic faster than its typical time.
    TravelTimePair::new(current.max(free), free)
}

/// Distance-matrix HTTP client.
///
/// Outbound requests are serialized and spaced by the configured interval.
/// Successful answers go into an in-memory cache; when a request fails the
/// cached value for the same pair and hour is returned instead.
pub struct HttpTraffic {
    locations: Vec<GeoPoint>,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    min_interval: Duration,
    last_request: Mutex<Option<Instant>>,
    cache: Mutex<TravelTimeCache>,
}

impl HttpTraffic {
    pub fn new(
        locations: Vec<GeoPoint>,
        endpoint: impl Into<String>,
        api_key: Option<String>,
        min_interval: Duration,
        timeout: Duration,
        cache: TravelTimeCache,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTraffic {
            locations,
            endpoint: endpoint.into(),
            api_key,
            agent,
            min_interval,
            last_request: Mutex::new(None),
            cache: Mutex::new(cache),
        }
    }

    pub fn cache_snapshot(&self) -> TravelTimeCache {
        self.cache.lock().expect("cache lock poisoned").clone()
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        self.cache_snapshot().save(path)
    }

    fn fetch(&self, u: usize, v: usize) -> Result<TravelTimePair> {
        let mut last = self.last_request.lock().expect("rate limiter lock poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        let (a, b) = (self.locations[u], self.locations[v]);
        let mut req = self
            .agent
            .get(&self.endpoint)
            .query("origins", format!("{},{}", a.lat, a.lon))
            .query("destinations", format!("{},{}", b.lat, b.lon))
            .query("departure_time", "now");
        if let Some(key) = &self.api_key {
            req = req.query("key", key);
        }
        let result = req.call();
        *last = Some(Instant::now());
        drop(last);

        let mut resp = result.map_err(|e| Error::Provider(format!("request for ({u}, {v}) failed: {e}")))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Provider(format!("reading response for ({u}, {v}): {e}")))?;
        parse_matrix_response(&body)
    }
}

impl TravelTimeProvider for HttpTraffic {
    fn node_count(&self) -> usize {
        self.locations.len()
    }

    fn travel_time(&self, u: usize, v: usize, t_of_day: f64) -> Result<TravelTimePair> {
        check_pair(self.locations.len(), u, v)?;
        match self.fetch(u, v) {
            Ok(pair) => {
                self.cache
                    .lock()
                    .expect("cache lock poisoned")
                    .insert(u, v, t_of_day, pair);
                Ok(pair)
            }
            Err(err) => self
                .cache
                .lock()
                .expect("cache lock poisoned")
                .get(u, v, t_of_day)
                .ok_or(err),
        }
    }

    fn is_reproducible(&self) -> bool {
        false
    }

    fn flush_cache(&self, path: &Path) -> Result<()> {
        self.save_cache(path)
    }
}

/// Builds the provider selected by `cfg` over the given hotspot locations.
/// `cache_path` overrides the configured cache location.
pub fn build_provider(
    cfg: &TrafficProviderConfig,
    locations: Vec<GeoPoint>,
    cache_path: Option<&Path>,
) -> Result<Box<dyn TravelTimeProvider>> {
    cfg.validate()?;
    let cache_path: PathBuf = cache_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.cache_path));
    match cfg.mode {
        TrafficMode::Mock => Ok(Box::new(MockTraffic::new(
            locations,
            cfg.mock_seed,
            cfg.mock_peak_factor,
            cfg.mock_noise_max,
        )?)),
        TrafficMode::File => Ok(Box::new(FileTraffic::open(locations.len(), &cache_path)?)),
        TrafficMode::Http => {
            let cache = if cache_path.exists() {
                TravelTimeCache::load(&cache_path)?
            } else {
                TravelTimeCache::default()
            };
            let api_key = std::env::var(&cfg.api_key_env).ok();
            Ok(Box::new(HttpTraffic::new(
                locations,
                cfg.endpoint_url.clone(),
                api_key,
                Duration::from_millis(cfg.rate_limit_ms),
                Duration::from_millis(cfg.timeout_ms),
                cache,
            )))
        }
    }
}

/// Symmetric matrix of congestion ratios with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionMatrix {
    pub t_of_day: f64,
    pub values: Vec<Vec<f64>>,
}

impl CongestionMatrix {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u][v]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::persist::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::persist::read_json(path)
    }
}

pub fn congestion_matrix(provider: &dyn TravelTimeProvider, t_of_day: f64) -> Result<CongestionMatrix> {
    let n = provider.node_count();
    if n < 2 {
        return Err(Error::Data("congestion matrix needs at least 2 hotspots".to_string()));
    }
    let mut values = vec![vec![1.0; n]; n];
    for u in 0..n {
        for v in (u + 1)..n {
            let r = provider.travel_time(u, v, t_of_day)?.ratio();
            values[u][v] = r;
            values[v][u] = r;
        }
    }
    Ok(CongestionMatrix { t_of_day, values })
}

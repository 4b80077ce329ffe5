//! Simulated demand world: hotspots, taxi requests, geodesic distance and
//! density clustering of raw request points.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used by every distance in the crate.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Standard deviation (degrees) of request origins around their hotspot.
pub const REQUEST_SIGMA_DEG: f64 = 0.005;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Data(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Data(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn validate(&self) -> Result<()> {
        GeoPoint::new(self.lat_min, self.lon_min).map_err(|e| Error::config("bbox", e.to_string()))?;
        GeoPoint::new(self.lat_max, self.lon_max).map_err(|e| Error::config("bbox", e.to_string()))?;
        if self.lat_min >= self.lat_max {
            return Err(Error::config(
                "bbox.lat_min",
                format!("lat_min {} must be below lat_max {}", self.lat_min, self.lat_max),
            ));
        }
        if self.lon_min >= self.lon_max {
            return Err(Error::config(
                "bbox.lon_min",
                format!("lon_min {} must be below lon_max {}", self.lon_min, self.lon_max),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: 0.5 * (self.lat_min + self.lat_max),
            lon: 0.5 * (self.lon_min + self.lon_max),
        }
    }
}

impl Default for BBox {
    fn default() -> Self {
        BBox {
            lat_min: 28.5,
            lat_max: 28.9,
            lon_min: 77.0,
            lon_max: 77.3,
        }
    }
}

/// Candidate pickup node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub id: usize,
    pub location: GeoPoint,
    /// Requests observed per window around this node.
    pub demand: f64,
    /// Event proximity in `[0, 1]`.
    pub event_flag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    pub origin: GeoPoint,
    /// Seconds since simulation start.
    pub timestamp: f64,
    pub assigned_hotspot: Option<usize>,
}

impl Request {
    /// Hour of day in `[0, 24)`.
    pub fn hour_of_day(&self) -> f64 {
        (self.timestamp.rem_euclid(SECONDS_PER_DAY)) / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub bbox: BBox,
    pub n_hotspots: usize,
    pub n_requests: usize,
    pub rng_seed: u64,
    pub event_fraction: f64,
    /// Request timestamps are uniform over `[0, time_span_hours)`.
    pub time_span_hours: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            bbox: BBox::default(),
            n_hotspots: 50,
            n_requests: 1000,
            rng_seed: 42,
            event_fraction: 0.1,
            time_span_hours: 24.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.n_hotspots < 2 {
            return Err(Error::config("world.n_hotspots", "at least 2 hotspots are required"));
        }
        if !(0.0..=1.0).contains(&self.event_fraction) {
            return Err(Error::config("world.event_fraction", "must lie in [0, 1]"));
        }
        if !(self.time_span_hours > 0.0) {
            return Err(Error::config("world.time_span_hours", "must be positive"));
        }
        Ok(())
    }
}

/// Generated hotspots and requests, plus the demand mixture weights that
/// produced the requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bbox: BBox,
    pub hotspots: Vec<Hotspot>,
    pub requests: Vec<Request>,
    /// Normalized mixture weight per hotspot id.
    pub demand_weights: Vec<f64>,
}

/// Zipf rank weights `1/r`, normalized to sum to one.
pub fn zipf_weights(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| 1.0 / r as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let bbox = cfg.bbox;

    let locations: Vec<GeoPoint> = (0..cfg.n_hotspots)
        .map(|_| GeoPoint {
            lat: rng.random_range(bbox.lat_min..bbox.lat_max),
            lon: rng.random_range(bbox.lon_min..bbox.lon_max),
        })
        .collect();

    // Zipf weights with ranks shuffled over the hotspots.
    let mut demand_weights = zipf_weights(cfg.n_hotspots);
    demand_weights.shuffle(&mut rng);

    let n_events = (cfg.event_fraction * cfg.n_hotspots as f64).ceil() as usize;
    let mut ids: Vec<usize> = (0..cfg.n_hotspots).collect();
    ids.shuffle(&mut rng);
    let mut event_flags = vec![0.0; cfg.n_hotspots];
    for &id in ids.iter().take(n_events.min(cfg.n_hotspots)) {
        event_flags[id] = 1.0;
    }

    let requests = sample_requests(
        &locations,
        &demand_weights,
        &bbox,
        cfg.n_requests,
        cfg.time_span_hours,
        &mut rng,
    )?;

    let mut counts = vec![0usize; cfg.n_hotspots];
    for r in &requests {
        if let Some(h) = r.assigned_hotspot {
            counts[h] += 1;
        }
    }
    let hotspots = locations
        .into_iter()
        .enumerate()
        .map(|(id, location)| Hotspot {
            id,
            location,
            demand: counts[id] as f64,
            event_flag: event_flags[id],
        })
        .collect();

    Ok(World {
        bbox,
        hotspots,
        requests,
        demand_weights,
    })
}

/// Draws requests from the demand mixture: a hotspot picked with probability
/// proportional to its weight, then a Gaussian offset of
/// [`REQUEST_SIGMA_DEG`] kept inside `bbox`.
pub fn sample_requests<R: Rng>(
    locations: &[GeoPoint],
    weights: &[f64],
    bbox: &BBox,
    n: usize,
    time_span_hours: f64,
    rng: &mut R,
) -> Result<Vec<Request>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let picker = WeightedIndex::new(weights).map_err(|e| Error::Data(format!("demand weights: {e}")))?;
    let noise = Normal::new(0.0, REQUEST_SIGMA_DEG).expect("constant sigma is valid");
    let mut requests = Vec::with_capacity(n);
    for id in 0..n {
        let h = picker.sample(rng);
        let center = locations[h];
        let mut origin = None;
        for _ in 0..64 {
            let p = GeoPoint {
                lat: center.lat + noise.sample(rng),
                lon: center.lon + noise.sample(rng),
            };
            if bbox.contains(p) {
                origin = Some(p);
                break;
            }
        }
        let origin = origin.unwrap_or(GeoPoint {
            lat: center.lat.clamp(bbox.lat_min, bbox.lat_max),
            lon: center.lon.clamp(bbox.lon_min, bbox.lon_max),
        });
        let timestamp = rng.random_range(0.0..time_span_hours * 3600.0);
        requests.push(Request {
            id,
            origin,
            timestamp,
            assigned_hotspot: Some(h),
        });
    }
    Ok(requests)
}

/// Index of the hotspot closest to `p`, ties to the lowest index.
pub fn nearest_hotspot(locations: &[GeoPoint], p: GeoPoint) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &loc) in locations.iter().enumerate() {
        let d = haversine_km(p, loc);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Density clustering of raw request points over the haversine metric.
///
/// Core points (at least `min_pts` points, self included, within `eps_km`)
/// are joined into clusters through core-to-core reachability. A border point
/// joins the cluster of its nearest core point, ties going to the core point
/// with the smaller `(lat, lon)`, so the result does not depend on input
/// order. Each cluster becomes one hotspot at its centroid with demand equal
/// to the cluster size. Hotspots are ordered by decreasing size, then by
/// centroid coordinates.
pub fn dbscan_hotspots(points: &[GeoPoint], eps_km: f64, min_pts: usize) -> Result<Vec<Hotspot>> {
    if !(eps_km > 0.0) {
        return Err(Error::config("dbscan.eps_km", "must be positive"));
    }
    if min_pts == 0 {
        return Err(Error::config("dbscan.min_pts", "must be at least 1"));
    }
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }

    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| haversine_km(points[i], points[j]) <= eps_km)
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    const UNSET: usize = usize::MAX;
    let mut label = vec![UNSET; n];
    let mut n_clusters = 0;
    for seed in 0..n {
        if !is_core[seed] || label[seed] != UNSET {
            continue;
        }
        let mut stack = vec![seed];
        label[seed] = n_clusters;
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if is_core[q] && label[q] == UNSET {
                    label[q] = n_clusters;
                    stack.push(q);
                }
            }
        }
        n_clusters += 1;
    }

    for i in 0..n {
        if is_core[i] {
            continue;
        }
        let nearest_core = neighbors[i].iter().copied().filter(|&j| is_core[j]).min_by(|&a, &b| {
            haversine_km(points[i], points[a])
                .total_cmp(&haversine_km(points[i], points[b]))
                .then(points[a].lat.total_cmp(&points[b].lat))
                .then(points[a].lon.total_cmp(&points[b].lon))
        });
        if let Some(c) = nearest_core {
            label[i] = label[c];
        }
    }

    let mut members: Vec<Vec<GeoPoint>> = vec![Vec::new(); n_clusters];
    for (i, &l) in label.iter().enumerate() {
        if l != UNSET {
            members[l].push(points[i]);
        }
    }
    let mut clusters: Vec<(GeoPoint, usize)> = members
        .into_iter()
        .map(|mut pts| {
            // sort so the centroid sum is order independent
            pts.sort_by(|a, b| a.lat.total_cmp(&b.lat).then(a.lon.total_cmp(&b.lon)));
            let m = pts.len() as f64;
            let lat = pts.iter().map(|p| p.lat).sum::<f64>() / m;
            let lon = pts.iter().map(|p| p.lon).sum::<f64>() / m;
            (GeoPoint { lat, lon }, pts.len())
        })
        .collect();
    clusters.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(a.0.lat.total_cmp(&b.0.lat))
            .then(a.0.lon.total_cmp(&b.0.lon))
    });

    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(id, (location, size))| Hotspot {
            id,
            location,
            demand: size as f64,
            event_flag: 0.0,
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct HotspotRow {
    id: usize,
    lat: f64,
    lon: f64,
    demand: f64,
    event_flag: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RequestRow {
    id: usize,
    lat: f64,
    lon: f64,
    timestamp: f64,
}

pub fn write_hotspots_csv(path: &Path, hotspots: &[Hotspot]) -> Result<()> {
    crate::persist::write_csv(
        path,
        hotspots.iter().map(|h| HotspotRow {
            id: h.id,
            lat: h.location.lat,
            lon: h.location.lon,
            demand: h.demand,
            event_flag: h.event_flag,
        }),
    )
}

pub fn read_hotspots_csv(path: &Path) -> Result<Vec<Hotspot>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<HotspotRow>().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.id != i {
            return Err(Error::format(
                path,
                format!("hotspot ids must be contiguous from 0, found {} at row {i}", row.id),
            ));
        }
        if !(row.demand >= 0.0) || !(0.0..=1.0).contains(&row.event_flag) {
            return Err(Error::format(
                path,
                format!("hotspot {} has invalid demand or event_flag", row.id),
            ));
        }
        out.push(Hotspot {
            id: row.id,
            location: GeoPoint::new(row.lat, row.lon)?,
            demand: row.demand,
            event_flag: row.event_flag,
        });
    }
    Ok(out)
}

pub fn write_requests_csv(path: &Path, requests: &[Request]) -> Result<()> {
    crate::persist::write_csv(
        path,
        requests.iter().map(|r| RequestRow {
            id: r.id,
            lat: r.origin.lat,
            lon: r.origin.lon,
            timestamp: r.timestamp,
        }),
    )
}

/// Reads requests; the file carries no hotspot assignment, so each request
/// is assigned to its nearest hotspot when `hotspots` is given.
pub fn read_requests_csv(path: &Path, hotspots: Option<&[Hotspot]>) -> Result<Vec<Request>> {
    let locations: Option<Vec<GeoPoint>> = hotspots.map(|hs| hs.iter().map(|h| h.location).collect());
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<RequestRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if !(row.timestamp >= 0.0) {
            return Err(Error::format(
                path,
                format!("request {} has a negative timestamp", row.id),
            ));
        }
        let origin = GeoPoint::new(row.lat, row.lon)?;
        out.push(Request {
            id: row.id,
            origin,
            timestamp: row.timestamp,
            assigned_hotspot: locations.as_deref().and_then(|l| nearest_hotspot(l, origin)),
        });
    }
    Ok(out)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        }
    } else {
        Error::format(path, e)
    }
}

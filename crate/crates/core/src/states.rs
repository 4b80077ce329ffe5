//! Discrete Q-table states: k-means over node embeddings crossed with a
//! coarse time-of-day bucket.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateParams {
    pub k: usize,
    pub time_buckets: usize,
    pub rng_seed: u64,
}

impl Default for StateParams {
    fn default() -> Self {
        StateParams {
            k: 25,
            time_buckets: 4,
            rng_seed: 42,
        }
    }
}

impl StateParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("states.k", "must be at least 1"));
        }
        if self.time_buckets == 0 {
            return Err(Error::config("states.time_buckets", "must be at least 1"));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f64>], z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, z);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Bucket of `t_of_day` (hours, wrapped into `[0, 24)`) among `buckets`
/// equal slices of the day.
pub fn time_bucket(t_of_day: f64, buckets: usize) -> usize {
    let t = t_of_day.rem_euclid(24.0);
    ((t / (24.0 / buckets as f64)).floor() as usize).min(buckets - 1)
}

/// Maps an embedding and a time of day to a state id
/// `cluster × time_buckets + bucket`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCodec {
    centroids: Vec<Vec<f64>>,
    k: usize,
    time_buckets: usize,
    seed: u64,
}

impl StateCodec {
    pub fn new(centroids: Vec<Vec<f64>>, time_buckets: usize, seed: u64) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Data("codec needs at least one centroid".to_string()));
        }
        if time_buckets == 0 {
            return Err(Error::config("states.time_buckets", "must be at least 1"));
        }
        let dim = centroids[0].len();
        if centroids
            .iter()
            .any(|c| c.len() != dim || c.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Data(
                "centroids must be finite and share one dimension".to_string(),
            ));
        }
        for i in 0..centroids.len() {
            for j in (i + 1)..centroids.len() {
                if centroids[i] == centroids[j] {
                    return Err(Error::Data(format!("centroids {i} and {j} coincide")));
                }
            }
        }
        Ok(StateCodec {
            k: centroids.len(),
            centroids,
            time_buckets,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn time_buckets(&self) -> usize {
        self.time_buckets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn state_count(&self) -> usize {
        self.k * self.time_buckets
    }

    pub fn cluster_of(&self, z: &[f64]) -> Result<usize> {
        if z.len() != self.dim() {
            return Err(Error::Data(format!(
                "embedding dim {} does not match codec dim {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(nearest_centroid(&self.centroids, z))
    }

    pub fn encode(&self, z: &[f64], t_of_day: f64) -> Result<usize> {
        Ok(self.cluster_of(z)? * self.time_buckets + time_bucket(t_of_day, self.time_buckets))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::persist::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: StateCodec = crate::persist::read_json(path)?;
        let codec = StateCodec::new(raw.centroids, raw.time_buckets, raw.seed).map_err(|e| Error::format(path, e))?;
        if codec.k != raw.k {
            return Err(Error::format(path, format!("k = {} but {} centroids", raw.k, codec.k)));
        }
        Ok(codec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub codec: StateCodec,
    /// Nearest-centroid assignment of each input point under the final centroids.
    pub assignments: Vec<usize>,
    /// WCSS of the initial assignment, then after each centroid update.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn wcss(&self) -> f64 {
        *self.wcss_history.last().expect("history starts with the initial WCSS")
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.codec.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn wcss(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest_centroid(centroids, p)).collect()
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        if !(d2.iter().sum::<f64>() > 0.0) {
            return Err(Error::Data(format!("fewer than {k} distinct embeddings")));
        }
        let idx = WeightedIndex::new(&d2)
            .map_err(|e| Error::Numeric(format!("k-means++ weights: {e}")))?
            .sample(rng);
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`MAX_LLOYD_ITERATIONS`] is reached. An emptied cluster is
/// re-seeded at the point farthest from its own centroid.
pub fn fit_kmeans(points: &[Vec<f64>], params: &StateParams) -> Result<KMeansFit> {
    params.validate()?;
    let k = params.k;
    let n = points.len();
    if k > n {
        return Err(Error::config("states.k", format!("k = {k} exceeds the {n} embeddings")));
    }
    let dim = points[0].len();
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Data(
            "embeddings must be finite and share one dimension".to_string(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng)?;
    let mut assign = assign_all(points, &centroids);
    let mut history = vec![wcss(points, &centroids, &assign)];
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut reseeded = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|i| !reseeded.contains(i))
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assign[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("k <= n leaves a candidate");
                reseeded.push(far);
                centroids[c] = points[far].clone();
            }
        }
        history.push(wcss(points, &centroids, &assign));
        let next = assign_all(points, &centroids);
        if next == assign {
            break;
        }
        assign = next;
    }

    let assignments = assign_all(points, &centroids);
    let codec = StateCodec::new(centroids, params.time_buckets, params.rng_seed)?;
    Ok(KMeansFit {
        codec,
        assignments,
        wcss_history: history,
        iterations,
    })
}

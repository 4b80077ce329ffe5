//! Weighted undirected hotspot graph, node features and traffic scores, and
//! greedy k-hop dominating sets over it.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{haversine_km, GeoPoint, Hotspot};
use crate::traffic::{TravelTimePair, TravelTimeProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    /// Nearest neighbours wired per node before symmetrization.
    pub knn: usize,
    /// Hop radius of the dominating set.
    pub k: usize,
    /// Time of day at which the feature traffic scores are sampled.
    pub t_of_day: f64,
    /// Append min-max normalized latitude and longitude to the node features.
    pub coordinate_features: bool,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            knn: 1,
            k: 2,
            t_of_day: 9.0,
            coordinate_features: true,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if self.knn == 0 {
            return Err(Error::config("graph.knn", "must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("graph.k", "must be positive"));
        }
        if !(0.0..24.0).contains(&self.t_of_day) {
            return Err(Error::config("graph.t_of_day", "must lie in [0, 24)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub distance_km: f64,
    pub travel: TravelTimePair,
}

/// Hotspot graph with per-node feature vectors.
///
/// Edges are stored once with `u < v`; adjacency lists are sorted by
/// neighbour id and point back into the edge list.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    nodes: Vec<Hotspot>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, usize)>>,
    traffic_scores: Vec<f64>,
    features: Vec<Vec<f64>>,
    feature_names: Vec<String>,
    t_of_day: f64,
}

impl RoadGraph {
    /// Assembles a graph from explicit edges. Edges are deduplicated; the
    /// graph must be connected, loop-free and have positive distances.
    pub fn from_edges(nodes: Vec<Hotspot>, edges: Vec<Edge>, t_of_day: f64, coordinate_features: bool) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(Error::Data("a graph needs at least 2 hotspots".to_string()));
        }
        for (i, h) in nodes.iter().enumerate() {
            if h.id != i {
                return Err(Error::Data(format!(
                    "hotspot ids must be contiguous from 0, found {} at {i}",
                    h.id
                )));
            }
        }
        let mut normalized: Vec<Edge> = Vec::with_capacity(edges.len());
        for e in edges {
            if e.u >= n || e.v >= n {
                return Err(Error::Data(format!(
                    "edge ({}, {}) references a missing node",
                    e.u, e.v
                )));
            }
            if e.u == e.v {
                return Err(Error::Data(format!("self-loop on node {}", e.u)));
            }
            if !(e.distance_km > 0.0) {
                return Err(Error::Data(format!(
                    "edge ({}, {}) has non-positive distance",
                    e.u, e.v
                )));
            }
            let (u, v) = if e.u < e.v { (e.u, e.v) } else { (e.v, e.u) };
            normalized.push(Edge { u, v, ..e });
        }
        normalized.sort_by_key(|e| (e.u, e.v));
        normalized.dedup_by_key(|e| (e.u, e.v));

        let mut adjacency = vec![Vec::new(); n];
        for (idx, e) in normalized.iter().enumerate() {
            adjacency[e.u].push((e.v, idx));
            adjacency[e.v].push((e.u, idx));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        let mut graph = RoadGraph {
            nodes,
            edges: normalized,
            adjacency,
            traffic_scores: Vec::new(),
            features: Vec::new(),
            feature_names: Vec::new(),
            t_of_day,
        };
        if component_count(&graph) != 1 {
            return Err(Error::Data("hotspot graph is disconnected".to_string()));
        }
        graph.traffic_scores = (0..n).map(|v| graph.traffic_score(v)).collect::<Result<_>>()?;
        graph.compute_features(coordinate_features);
        Ok(graph)
    }

    fn compute_features(&mut self, coordinate_features: bool) {
        let demand = min_max(self.nodes.iter().map(|h| h.demand));
        let traffic = min_max(self.traffic_scores.iter().copied());
        let mut names = vec!["demand", "event", "traffic"];
        let mut columns = vec![demand, self.nodes.iter().map(|h| h.event_flag).collect(), traffic];
        if coordinate_features {
            names.extend(["lat", "lon"]);
            columns.push(min_max(self.nodes.iter().map(|h| h.location.lat)));
            columns.push(min_max(self.nodes.iter().map(|h| h.location.lon)));
        }
        self.features = (0..self.nodes.len())
            .map(|v| columns.iter().map(|c| c[v]).collect())
            .collect();
        self.feature_names = names.into_iter().map(String::from).collect();
    }

    /// Replaces the node features, e.g. with externally computed ones.
    pub fn with_features(mut self, features: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        if features.len() != self.nodes.len() {
            return Err(Error::Data(format!(
                "{} feature rows for {} nodes",
                features.len(),
                self.nodes.len()
            )));
        }
        if features
            .iter()
            .any(|r| r.len() != names.len() || r.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Data(
                "feature rows must be finite and match the feature names".to_string(),
            ));
        }
        self.features = features;
        self.feature_names = names;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Hotspot] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn locations(&self) -> Vec<GeoPoint> {
        self.nodes.iter().map(|h| h.location).collect()
    }

    /// Neighbour ids of `v` in ascending order.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[v].iter().map(|&(u, _)| u)
    }

    pub fn incident_edges(&self, v: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.adjacency[v].iter().map(move |&(_, e)| &self.edges[e])
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn traffic_scores(&self) -> &[f64] {
        &self.traffic_scores
    }

    pub fn t_of_day(&self) -> f64 {
        self.t_of_day
    }

    pub fn has_coordinate_features(&self) -> bool {
        self.feature_names.len() == 5
    }

    /// Mean congestion ratio over the edges incident to `v`.
    pub fn traffic_score(&self, v: usize) -> Result<f64> {
        if v >= self.nodes.len() {
            return Err(Error::Data(format!("unknown node {v}")));
        }
        let incident = &self.adjacency[v];
        if incident.is_empty() {
            return Err(Error::Data(format!("node {v} has no incident edges")));
        }
        let sum: f64 = incident.iter().map(|&(_, e)| self.edges[e].travel.ratio()).sum();
        Ok(sum / incident.len() as f64)
    }

    /// BFS hop count between two nodes.
    pub fn hop_distance(&self, u: usize, v: usize) -> Result<usize> {
        let n = self.nodes.len();
        if u >= n || v >= n {
            return Err(Error::Data(format!("unknown node in hop query ({u}, {v})")));
        }
        bfs_hops(self, u)[v].ok_or_else(|| Error::Data(format!("nodes {u} and {v} are disconnected")))
    }

    /// Nodes within `k` hops of `src`, `src` included, ascending.
    pub fn ball(&self, src: usize, k: usize) -> Vec<usize> {
        bfs_hops(self, src)
            .into_iter()
            .enumerate()
            .filter_map(|(v, h)| h.filter(|&h| h <= k).map(|_| v))
            .collect()
    }

    /// Per-node traffic scores for every hour of the day, sampled at the
    /// middle of each hour.
    pub fn hourly_traffic_scores(&self, provider: &dyn TravelTimeProvider) -> Result<TrafficProfile> {
        let mut scores = Vec::with_capacity(24);
        for hour in 0..24 {
            let t = hour as f64 + 0.5;
            let ratios: Vec<f64> = self
                .edges
                .iter()
                .map(|e| provider.travel_time(e.u, e.v, t).map(|p| p.ratio()))
                .collect::<Result<_>>()?;
            let row = (0..self.nodes.len())
                .map(|v| {
                    let inc = &self.adjacency[v];
                    inc.iter().map(|&(_, e)| ratios[e]).sum::<f64>() / inc.len() as f64
                })
                .collect();
            scores.push(row);
        }
        Ok(TrafficProfile { scores })
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let values: Vec<f64> = values.collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .into_iter()
        .map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect()
}

fn bfs_hops(graph: &RoadGraph, src: usize) -> Vec<Option<usize>> {
    let mut hops = vec![None; graph.node_count()];
    hops[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(x) = queue.pop_front() {
        let h = hops[x].expect("queued nodes have a hop count");
        for y in graph.neighbors(x) {
            if hops[y].is_none() {
                hops[y] = Some(h + 1);
                queue.push_back(y);
            }
        }
    }
    hops
}

fn component_count(graph: &RoadGraph) -> usize {
    let n = graph.node_count();
    let mut seen = vec![false; n];
    let mut count = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(x) = stack.pop() {
            for y in graph.neighbors(x) {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
    }
    count
}

/// Per-node traffic scores for each hour of the day (`scores[hour][node]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficProfile {
    pub scores: Vec<Vec<f64>>,
}

impl TrafficProfile {
    pub fn score(&self, node: usize, t_of_day: f64) -> f64 {
        let hour = (t_of_day.rem_euclid(24.0).floor() as usize).min(23);
        self.scores[hour][node]
    }

    /// Same score for every hour.
    pub fn constant(scores: Vec<f64>) -> Self {
        TrafficProfile {
            scores: vec![scores; 24],
        }
    }
}

/// Undirected edge pairs from k-nearest-neighbour wiring plus connectivity
/// repair. Returns the pairs with `u < v`, sorted.
pub fn knn_edge_pairs(locations: &[GeoPoint], knn: usize) -> Result<Vec<(usize, usize)>> {
    let n = locations.len();
    if n < 2 {
        return Err(Error::Data("a graph needs at least 2 hotspots".to_string()));
    }
    if knn == 0 || knn >= n {
        return Err(Error::config(
            "graph.knn",
            format!("must lie in [1, {}) for {n} hotspots", n),
        ));
    }
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| haversine_km(locations[i], locations[j])).collect())
        .collect();

    let mut pairs = std::collections::BTreeSet::new();
    for u in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&v| v != u).collect();
        order.sort_by(|&a, &b| dist[u][a].total_cmp(&dist[u][b]).then(a.cmp(&b)));
        for &v in order.iter().take(knn) {
            pairs.insert((u.min(v), u.max(v)));
        }
    }

    // Union-find over the knn edges, then join components by their closest pair.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut x = x;
        while parent[x] != r {
            let next = parent[x];
            parent[x] = r;
            x = next;
        }
        r
    }
    for &(u, v) in &pairs {
        let (a, b) = (find(&mut parent, u), find(&mut parent, v));
        if a != b {
            parent[a] = b;
        }
    }
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for u in 0..n {
            for v in (u + 1)..n {
                if find(&mut parent, u) != find(&mut parent, v) && best.is_none_or(|(d, _, _)| dist[u][v] < d) {
                    best = Some((dist[u][v], u, v));
                }
            }
        }
        match best {
            Some((_, u, v)) => {
                pairs.insert((u, v));
                let (a, b) = (find(&mut parent, u), find(&mut parent, v));
                parent[a] = b;
            }
            None => break,
        }
    }
    Ok(pairs.into_iter().collect())
}

/// Wires hotspots into a connected graph and attaches travel times and
/// node features.
pub fn build_graph(
    hotspots: Vec<Hotspot>,
    provider: &dyn TravelTimeProvider,
    params: &GraphParams,
) -> Result<RoadGraph> {
    params.validate()?;
    let locations: Vec<GeoPoint> = hotspots.iter().map(|h| h.location).collect();
    let pairs = knn_edge_pairs(&locations, params.knn)?;
    let mut edges = Vec::with_capacity(pairs.len());
    for (u, v) in pairs {
        let distance_km = haversine_km(locations[u], locations[v]);
        if !(distance_km > 0.0) {
            return Err(Error::Data(format!("hotspots {u} and {v} share a location")));
        }
        edges.push(Edge {
            u,
            v,
            distance_km,
            travel: provider.travel_time(u, v, params.t_of_day)?,
        });
    }
    RoadGraph::from_edges(hotspots, edges, params.t_of_day, params.coordinate_features)
}

/// Node subset covering every node within `k` hops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominatingSet {
    pub k: usize,
    /// Member ids in ascending order.
    pub members: Vec<usize>,
    /// Member ids in the order the greedy procedure picked them.
    pub selection_order: Vec<usize>,
    /// For each node, the nearest member by hops (ties to the lowest id).
    pub coverage: Vec<usize>,
}

impl DominatingSet {
    /// Builds the coverage map for a given member set and checks that every
    /// node lies within `k` hops of a member.
    pub fn from_members(graph: &RoadGraph, k: usize, selection_order: Vec<usize>) -> Result<Self> {
        let mut members = selection_order.clone();
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::Data("dominating set is empty".to_string()));
        }
        let n = graph.node_count();
        let mut best: Vec<Option<(usize, usize)>> = vec![None; n];
        for &m in &members {
            if m >= n {
                return Err(Error::Data(format!("dominating-set member {m} is not a node")));
            }
            for (v, h) in bfs_hops(graph, m).into_iter().enumerate() {
                if let Some(h) = h {
                    if best[v].is_none_or(|(bh, _)| h < bh) {
                        best[v] = Some((h, m));
                    }
                }
            }
        }
        let mut coverage = Vec::with_capacity(n);
        for (v, b) in best.into_iter().enumerate() {
            match b {
                Some((h, m)) if h <= k => coverage.push(m),
                _ => return Err(Error::Data(format!("node {v} is not within {k} hops of the set"))),
            }
        }
        Ok(DominatingSet {
            k,
            members,
            selection_order,
            coverage,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.members.binary_search(&v).is_ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::persist::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::persist::read_json(path)
    }
}

/// Greedy k-hop dominating set.
///
/// Starts from the highest-demand node, then repeatedly adds the node whose
/// k-hop ball covers the most uncovered nodes. Ties go to higher demand,
/// then to the lower id.
pub fn greedy_khop_dominating_set(graph: &RoadGraph, k: usize) -> Result<DominatingSet> {
    if k == 0 {
        return Err(Error::config("graph.k", "must be positive"));
    }
    let n = graph.node_count();
    let balls: Vec<Vec<usize>> = (0..n).map(|v| graph.ball(v, k)).collect();
    let demand = |v: usize| graph.nodes()[v].demand;

    let mut covered = vec![false; n];
    let mut uncovered = n;
    let mut chosen = vec![false; n];
    let mut order = Vec::new();

    let seed = (0..n)
        .max_by(|&a, &b| demand(a).total_cmp(&demand(b)).then(b.cmp(&a)))
        .expect("graph has nodes");
    let mut pick = seed;
    loop {
        chosen[pick] = true;
        order.push(pick);
        for &v in &balls[pick] {
            if !covered[v] {
                covered[v] = true;
                uncovered -= 1;
            }
        }
        if uncovered == 0 {
            break;
        }
        let gain = |v: usize| balls[v].iter().filter(|&&u| !covered[u]).count();
        pick = (0..n)
            .filter(|&v| !chosen[v])
            .max_by(|&a, &b| {
                gain(a)
                    .cmp(&gain(b))
                    .then(demand(a).total_cmp(&demand(b)))
                    .then(b.cmp(&a))
            })
            .expect("uncovered nodes remain, so candidates remain");
    }
    DominatingSet::from_members(graph, k, order)
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    lat: f64,
    lon: f64,
    demand: f64,
    event_flag: f64,
    traffic_score: f64,
    features: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    u: usize,
    v: usize,
    distance_km: f64,
    current_min: f64,
    free_flow_min: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    t_of_day: f64,
    feature_names: Vec<String>,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

impl RoadGraph {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = GraphFile {
            t_of_day: self.t_of_day,
            feature_names: self.feature_names.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|h| NodeRecord {
                    id: h.id,
                    lat: h.location.lat,
                    lon: h.location.lon,
                    demand: h.demand,
                    event_flag: h.event_flag,
                    traffic_score: self.traffic_scores[h.id],
                    features: self.features[h.id].clone(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    u: e.u,
                    v: e.v,
                    distance_km: e.distance_km,
                    current_min: e.travel.current_min,
                    free_flow_min: e.travel.free_flow_min,
                })
                .collect(),
        };
        crate::persist::write_json(path, &file)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file: GraphFile = crate::persist::read_json(path)?;
        let nodes = file
            .nodes
            .iter()
            .map(|r| {
                Ok(Hotspot {
                    id: r.id,
                    location: GeoPoint::new(r.lat, r.lon)?,
                    demand: r.demand,
                    event_flag: r.event_flag,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = file
            .edges
            .iter()
            .map(|r| {
                Ok(Edge {
                    u: r.u,
                    v: r.v,
                    distance_km: r.distance_km,
                    travel: TravelTimePair::new(r.current_min, r.free_flow_min)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format(path, e))?;
        let coords = file.feature_names.len() == 5;
        let features = file.nodes.into_iter().map(|r| r.features).collect();
        RoadGraph::from_edges(nodes, edges, file.t_of_day, coords)
            .and_then(|g| g.with_features(features, file.feature_names))
            .map_err(|e| Error::format(path, e))
    }
}

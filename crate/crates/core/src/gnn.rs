//! Mean-aggregation message passing with a linear reconstruction head,
//! trained by full-batch gradient descent with hand-written backprop.
//!
//! Layer `l` computes `h_v = σ(W_l · mean({h_v} ∪ {h_u : u ∈ N(v)}))` with
//! ReLU on hidden layers and identity on the last one. The decoder maps the
//! final embedding back to the input features and the loss is the mean
//! squared reconstruction error over nodes and feature dimensions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RoadGraph;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub embedding_dim: usize,
    pub layers: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.01,
            embedding_dim: 16,
            layers: 2,
            rng_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(
                "gnn.learning_rate",
                "must be a non-negative finite number",
            ));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("gnn.embedding_dim", "must be at least 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("gnn.layers", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    /// `[d_0, d_1, ..., d_L]`; `layers[l]` has shape `d_{l+1} × d_l`.
    pub layer_dims: Vec<usize>,
    pub layers: Vec<Matrix>,
    /// Shape `d_0 × d_L`.
    pub decoder: Matrix,
}

impl EmbeddingModel {
    pub fn new(layers: Vec<Matrix>, decoder: Matrix) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Data("model needs at least one layer".to_string()))?;
        let mut dims = vec![first.cols];
        for (l, w) in layers.iter().enumerate() {
            if w.cols != *dims.last().expect("non-empty") {
                return Err(Error::Data(format!(
                    "layer {l} expects input dim {} but receives {}",
                    w.cols, dims[l]
                )));
            }
            dims.push(w.rows);
        }
        if decoder.rows != dims[0] || decoder.cols != *dims.last().expect("non-empty") {
            return Err(Error::Data(format!(
                "decoder shape {}x{} does not map {} back to {}",
                decoder.rows,
                decoder.cols,
                dims.last().expect("non-empty"),
                dims[0]
            )));
        }
        let model = EmbeddingModel {
            layer_dims: dims,
            layers,
            decoder,
        };
        if !model.is_finite() {
            return Err(Error::Numeric("model weights are not finite".to_string()));
        }
        Ok(model)
    }

    /// Xavier-uniform initialization of every weight matrix.
    pub fn xavier(input_dim: usize, embedding_dim: usize, layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(embedding_dim, layers));
        let weights = dims.windows(2).map(|w| Matrix::xavier(w[1], w[0], &mut rng)).collect();
        let decoder = Matrix::xavier(input_dim, embedding_dim, &mut rng);
        EmbeddingModel {
            layer_dims: dims,
            layers: weights,
            decoder,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least one dim")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|w| w.data.len()).sum::<usize>() + self.decoder.data.len()
    }

    fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite) && self.decoder.is_finite()
    }

    fn check_input(&self, graph: &RoadGraph) -> Result<()> {
        if graph.feature_dim() != self.input_dim() {
            return Err(Error::Data(format!(
                "model input dim {} does not match graph feature dim {}",
                self.input_dim(),
                graph.feature_dim()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        crate::persist::write_json(
            path,
            &ModelCheckpoint {
                config: config.clone(),
                model: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let ck: ModelCheckpoint = crate::persist::read_json(path)?;
        let model = EmbeddingModel::new(ck.model.layers, ck.model.decoder).map_err(|e| Error::format(path, e))?;
        Ok((model, ck.config))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelCheckpoint {
    config: TrainConfig,
    model: EmbeddingModel,
}

/// One embedding vector per graph node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, node: usize) -> &[f64] {
        &self.rows[node]
    }

    /// CSV with header `node_id,z_0,...,z_{d-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            crate::persist::ensure_dir(parent)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::geodata::csv_error(path, e))?;
        let mut header = vec!["node_id".to_string()];
        header.extend((0..self.dim()).map(|i| format!("z_{i}")));
        w.write_record(&header)
            .map_err(|e| crate::geodata::csv_error(path, e))?;
        for (id, row) in self.rows.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(|e| crate::geodata::csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| crate::geodata::csv_error(path, e))?;
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| crate::geodata::csv_error(path, e))?;
            let mut fields = rec.iter();
            let id: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("row {i}: bad node_id")))?;
            if id != i {
                return Err(Error::format(path, format!("row {i}: node ids must be contiguous")));
            }
            let row = fields
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::format(path, format!("row {i}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let table = EmbeddingTable { rows };
        if table
            .rows
            .iter()
            .any(|r| r.len() != table.dim() || r.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::format(path, "ragged or non-finite embedding rows"));
        }
        Ok(table)
    }
}

/// Per-layer activations kept for backprop.
struct ForwardTrace {
    /// Aggregated inputs to each layer (`n × d_l`).
    aggregated: Vec<Matrix>,
    /// Pre-activations of each layer (`n × d_{l+1}`).
    pre: Vec<Matrix>,
    embeddings: Matrix,
}

/// Self-inclusive neighbourhood mean. Each dimension's terms are summed in
/// ascending value order, so the result depends only on the multiset of
/// neighbour vectors and not on node numbering.
fn aggregate(graph: &RoadGraph, h: &Matrix) -> Matrix {
    let n = graph.node_count();
    let mut out = Matrix::zeros(n, h.cols);
    let mut buf = Vec::new();
    for v in 0..n {
        let scale = 1.0 / (graph.degree(v) + 1) as f64;
        for j in 0..h.cols {
            buf.clear();
            buf.push(h[(v, j)]);
            buf.extend(graph.neighbors(v).map(|u| h[(u, j)]));
            buf.sort_by(f64::total_cmp);
            out[(v, j)] = buf.iter().sum::<f64>() * scale;
        }
    }
    out
}

/// Transpose of [`aggregate`] as a linear map.
fn aggregate_transpose(graph: &RoadGraph, g: &Matrix) -> Matrix {
    let n = graph.node_count();
    let mut out = Matrix::zeros(n, g.cols);
    let scales: Vec<f64> = (0..n).map(|v| 1.0 / (graph.degree(v) + 1) as f64).collect();
    for u in 0..n {
        for j in 0..g.cols {
            let mut acc = g[(u, j)] * scales[u];
            for v in graph.neighbors(u) {
                acc += g[(v, j)] * scales[v];
            }
            out[(u, j)] = acc;
        }
    }
    out
}

/// `x · wᵀ` for `x: n × c`, `w: r × c`.
fn mul_transposed(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, w.rows);
    for v in 0..x.rows {
        let xr = x.row(v);
        for i in 0..w.rows {
            out[(v, i)] = xr.iter().zip(w.row(i)).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn feature_matrix(graph: &RoadGraph) -> Matrix {
    Matrix::from_rows(graph.features())
}

fn run_forward(model: &EmbeddingModel, graph: &RoadGraph) -> ForwardTrace {
    let last = model.layers.len() - 1;
    let mut h = feature_matrix(graph);
    let mut aggregated = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    for (l, w) in model.layers.iter().enumerate() {
        let p = aggregate(graph, &h);
        let z = mul_transposed(&p, w);
        h = if l < last {
            Matrix {
                data: z.data.iter().map(|&x| x.max(0.0)).collect(),
                ..z.clone()
            }
        } else {
            z.clone()
        };
        aggregated.push(p);
        pre.push(z);
    }
    ForwardTrace {
        aggregated,
        pre,
        embeddings: h,
    }
}

pub fn forward(model: &EmbeddingModel, graph: &RoadGraph) -> Result<EmbeddingTable> {
    model.check_input(graph)?;
    let trace = run_forward(model, graph);
    Ok(EmbeddingTable {
        rows: (0..trace.embeddings.rows)
            .map(|v| trace.embeddings.row(v).to_vec())
            .collect(),
    })
}

fn loss_from_trace(model: &EmbeddingModel, graph: &RoadGraph, trace: &ForwardTrace) -> (f64, Matrix) {
    let recon = mul_transposed(&trace.embeddings, &model.decoder);
    let x = feature_matrix(graph);
    let count = (x.rows * x.cols) as f64;
    let mut residual = Matrix::zeros(x.rows, x.cols);
    let mut loss = 0.0;
    for (r, (a, b)) in residual.data.iter_mut().zip(recon.data.iter().zip(&x.data)) {
        *r = a - b;
        loss += *r * *r;
    }
    (loss / count, residual)
}

/// Mean squared error between decoded embeddings and node features.
pub fn reconstruction_loss(model: &EmbeddingModel, graph: &RoadGraph) -> Result<f64> {
    model.check_input(graph)?;
    let trace = run_forward(model, graph);
    Ok(loss_from_trace(model, graph, &trace).0)
}

/// Gradients with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Matrix>,
    pub decoder: Matrix,
}

/// Loss and its analytic gradient with respect to every weight.
pub fn loss_and_gradients(model: &EmbeddingModel, graph: &RoadGraph) -> Result<(f64, Gradients)> {
    model.check_input(graph)?;
    let trace = run_forward(model, graph);
    let (loss, residual) = loss_from_trace(model, graph, &trace);
    let n = residual.rows;
    let scale = 2.0 / (residual.rows * residual.cols) as f64;
    let g_out = Matrix {
        data: residual.data.iter().map(|r| r * scale).collect(),
        ..residual
    };

    let h_last = &trace.embeddings;
    let mut d_decoder = Matrix::zeros(model.decoder.rows, model.decoder.cols);
    let mut d_h = Matrix::zeros(n, h_last.cols);
    for v in 0..n {
        for f in 0..g_out.cols {
            let g = g_out[(v, f)];
            for i in 0..h_last.cols {
                d_decoder[(f, i)] += g * h_last[(v, i)];
                d_h[(v, i)] += g * model.decoder[(f, i)];
            }
        }
    }

    let last = model.layers.len() - 1;
    let mut d_layers = vec![Matrix::zeros(0, 0); model.layers.len()];
    for l in (0..model.layers.len()).rev() {
        let w = &model.layers[l];
        let pre = &trace.pre[l];
        let agg = &trace.aggregated[l];
        let mut d_z = d_h;
        if l < last {
            for (d, &z) in d_z.data.iter_mut().zip(&pre.data) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let mut d_w = Matrix::zeros(w.rows, w.cols);
        let mut d_p = Matrix::zeros(n, w.cols);
        for v in 0..n {
            for i in 0..w.rows {
                let g = d_z[(v, i)];
                if g == 0.0 {
                    continue;
                }
                for j in 0..w.cols {
                    d_w[(i, j)] += g * agg[(v, j)];
                    d_p[(v, j)] += g * w[(i, j)];
                }
            }
        }
        d_layers[l] = d_w;
        d_h = aggregate_transpose(graph, &d_p);
    }

    Ok((
        loss,
        Gradients {
            layers: d_layers,
            decoder: d_decoder,
        },
    ))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainedEmbedding {
    pub model: EmbeddingModel,
    pub embeddings: EmbeddingTable,
    /// Loss before the first update followed by the loss after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Full-batch gradient descent on the reconstruction loss.
pub fn train(graph: &RoadGraph, cfg: &TrainConfig) -> Result<TrainedEmbedding> {
    cfg.validate()?;
    let mut model = EmbeddingModel::xavier(graph.feature_dim(), cfg.embedding_dim, cfg.layers, cfg.rng_seed);
    let mut loss_curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, grads) = loss_and_gradients(&model, graph)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("reconstruction loss diverged at epoch {epoch}")));
        }
        loss_curve.push(loss);
        for (w, g) in model.layers.iter_mut().zip(&grads.layers) {
            for (a, b) in w.data.iter_mut().zip(&g.data) {
                *a -= cfg.learning_rate * b;
            }
        }
        for (a, b) in model.decoder.data.iter_mut().zip(&grads.decoder.data) {
            *a -= cfg.learning_rate * b;
        }
    }
    let final_loss = reconstruction_loss(&model, graph)?;
    if !final_loss.is_finite() || !model.is_finite() {
        return Err(Error::Numeric(format!(
            "reconstruction loss diverged at epoch {}",
            cfg.epochs
        )));
    }
    loss_curve.push(final_loss);
    let embeddings = forward(&model, graph)?;
    Ok(TrainedEmbedding {
        model,
        embeddings,
        loss_curve,
    })
}

/// Largest relative error between analytic gradients and central finite
/// differences over all weights. Pairs where both gradients vanish count as
/// zero error.
pub fn gradient_check(model: &EmbeddingModel, graph: &RoadGraph, epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::config("epsilon", "must lie in [1e-7, 1e-3]"));
    }
    let (_, analytic) = loss_and_gradients(model, graph)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;

    let mut compare = |a: f64, numeric: f64| {
        let denom = a.abs().max(numeric.abs());
        let err = if denom == 0.0 {
            0.0
        } else {
            (a - numeric).abs() / denom.max(1e-6)
        };
        worst = worst.max(err);
    };

    for l in 0..model.layers.len() {
        for idx in 0..model.layers[l].data.len() {
            let orig = probe.layers[l].data[idx];
            probe.layers[l].data[idx] = orig + epsilon;
            let up = reconstruction_loss(&probe, graph)?;
            probe.layers[l].data[idx] = orig - epsilon;
            let down = reconstruction_loss(&probe, graph)?;
            probe.layers[l].data[idx] = orig;
            compare(analytic.layers[l].data[idx], (up - down) / (2.0 * epsilon));
        }
    }
    for idx in 0..model.decoder.data.len() {
        let orig = probe.decoder.data[idx];
        probe.decoder.data[idx] = orig + epsilon;
        let up = reconstruction_loss(&probe, graph)?;
        probe.decoder.data[idx] = orig - epsilon;
        let down = reconstruction_loss(&probe, graph)?;
        probe.decoder.data[idx] = orig;
        compare(analytic.decoder.data[idx], (up - down) / (2.0 * epsilon));
    }
    Ok(worst)
}

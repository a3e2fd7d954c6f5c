//! Sensor graph construction and diffusion graph convolution.
//!
//! A road network is given as directed, distance-weighted edges. Distances are
//! turned into affinities with a thresholded Gaussian kernel, the affinity matrix
//! is row-normalised in both directions to give forward and backward random-walk
//! transition matrices, and a third, learned operator is built from two node
//! factor tables. [`diffusion_conv`] mixes k-hop propagations under all three.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PastnError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One directed edge of the sensor graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub distance: f64,
}

/// Default adjacency pruning threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

/// Population standard deviation of the edge distances; 1.0 when undefined.
pub fn distance_sigma(edges: &[Edge]) -> f64 {
    if edges.is_empty() {
        return 1.0;
    }
    let n = edges.len() as f64;
    let mean = edges.iter().map(|e| e.distance).sum::<f64>() / n;
    let var = edges.iter().map(|e| (e.distance - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        sd
    } else {
        1.0
    }
}

/// `A[u][v] = exp(-d²/σ²)`, zeroed below `threshold`. Self-loops are dropped.
pub fn build_adjacency(edges: &[Edge], n: usize, sigma: f64, threshold: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(PastnError::Value(format!("sigma must be positive, got {sigma}")));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(PastnError::Value(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let mut a = Tensor::zeros(vec![n, n]);
    for e in edges {
        if e.from >= n || e.to >= n {
            return Err(PastnError::Index(format!(
                "edge ({}, {}) out of range for {n} nodes",
                e.from, e.to
            )));
        }
        if !(e.distance > 0.0) {
            return Err(PastnError::Value(format!(
                "edge ({}, {}) has nonpositive distance {}",
                e.from, e.to, e.distance
            )));
        }
        if e.from == e.to {
            continue;
        }
        let w = (-(e.distance * e.distance) / (sigma * sigma)).exp();
        a.set(&[e.from, e.to], if w >= threshold { w } else { 0.0 });
    }
    Ok(a)
}

fn row_normalise(m: &Tensor) -> Tensor {
    let n = m.shape()[0];
    let mut out = m.clone();
    let d = out.data_mut();
    for i in 0..n {
        let row = &mut d[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// Forward and backward transition matrices `A/rowsum(A)` and `Aᵀ/rowsum(Aᵀ)`.
/// Rows with zero mass stay zero.
pub fn transition_matrices(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(PastnError::Dimension(format!("adjacency must be square, got {s:?}")));
    }
    if a.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(PastnError::Value("adjacency must be finite and nonnegative".into()));
    }
    let n = s[0];
    let at = Tensor::from_fn(vec![n, n], |i| a.get(&[i[1], i[0]]));
    Ok((row_normalise(a), row_normalise(&at)))
}

/// The fixed part of the graph: adjacency and its two transition matrices.
///
/// The learned adaptive operator lives with the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBundle {
    pub adjacency: Tensor,
    pub forward: Tensor,
    pub backward: Tensor,
}

impl GraphBundle {
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let (forward, backward) = transition_matrices(&adjacency)?;
        Ok(GraphBundle { adjacency, forward, backward })
    }

    /// Builds the bundle with the default kernel width (std of distances) and threshold.
    pub fn from_edges(edges: &[Edge], n: usize) -> Result<Self> {
        let a = build_adjacency(edges, n, distance_sigma(edges), DEFAULT_THRESHOLD)?;
        GraphBundle::from_adjacency(a)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }
}

/// `softmax(relu(E1·E2ᵀ))` over each row.
pub fn adaptive_adjacency(tape: &mut Tape, e1: Var, e2: Var) -> Result<Var> {
    let e2t = tape.transpose(e2)?;
    let scores = tape.matmul(e1, e2t)?;
    let pos = tape.relu(scores);
    tape.softmax(pos, 1)
}

/// The three propagation operators bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct Supports {
    pub forward: Var,
    pub backward: Var,
    pub adaptive: Var,
}

impl Supports {
    pub fn bind(tape: &mut Tape, bundle: &GraphBundle, adaptive: Var) -> Self {
        Supports {
            forward: tape.constant(bundle.forward.clone()),
            backward: tape.constant(bundle.backward.clone()),
            adaptive,
        }
    }

    fn operators(&self) -> [Var; 3] {
        [self.forward, self.backward, self.adaptive]
    }
}

/// Diffusion graph convolution applied at every time step of `x: [B, N, T, C]`.
///
/// `weights` holds `3 * (depth + 1)` matrices of shape `C x M`, ordered by hop
/// count and then operator (forward, backward, adaptive). Hop `k` is reached by
/// `k` successive propagations, the zero-hop term being the signal itself.
pub fn diffusion_conv(
    tape: &mut Tape,
    x: Var,
    supports: &Supports,
    weights: &[Var],
    depth: usize,
) -> Result<Var> {
    if weights.len() != 3 * (depth + 1) {
        return Err(PastnError::Config(format!(
            "diffusion depth {depth} needs {} weight matrices, got {}",
            3 * (depth + 1),
            weights.len()
        )));
    }
    let w0 = tape.add(weights[0], weights[1])?;
    let w0 = tape.add(w0, weights[2])?;
    let mut z = tape.linear(x, w0)?;
    for (j, op) in supports.operators().into_iter().enumerate() {
        let mut h = x;
        for k in 1..=depth {
            h = tape.propagate(op, h)?;
            let term = tape.linear(h, weights[3 * k + j])?;
            z = tape.add(z, term)?;
        }
    }
    Ok(z)
}

/// Nodes uniform on the unit square, linked both ways when closer than `radius`.
pub fn random_geometric_graph<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> (Vec<(f64, f64)>, Vec<Edge>) {
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            if d < radius && d > 0.0 {
                edges.push(Edge { from: i, to: j, distance: d });
            }
        }
    }
    (pts, edges)
}

#[derive(Deserialize, Serialize)]
struct EdgeRow {
    from: usize,
    to: usize,
    distance: f64,
}

/// Reads a `from,to,distance` edge list.
pub fn read_edges_csv(path: impl AsRef<Path>) -> Result<Vec<Edge>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["from", "to", "distance"] {
        return Err(PastnError::Format {
            row: 1,
            message: format!("expected header from,to,distance, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut edges = Vec::new();
    for (i, row) in rdr.deserialize::<EdgeRow>().enumerate() {
        let r = row.map_err(|e| PastnError::Format { row: i + 2, message: e.to_string() })?;
        edges.push(Edge { from: r.from, to: r.to, distance: r.distance });
    }
    Ok(edges)
}

pub fn write_edges_csv(path: impl AsRef<Path>, edges: &[Edge]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in edges {
        w.serialize(EdgeRow { from: e.from, to: e.to, distance: e.distance })?;
    }
    w.flush()?;
    Ok(())
}

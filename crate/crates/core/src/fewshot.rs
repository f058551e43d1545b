//! Prototypical-network head and training losses.
//!
//! Prototypes are per-class means of support embeddings; queries are scored
//! by negative squared Euclidean distance. The supervised contrastive term
//! works on L2-normalised embeddings and averages over positives outside the
//! log; anchors without a positive are skipped.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPCON_WEIGHT: f64 = 0.5;
pub const SUPCON_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// `N x D`, row `n` belongs to relabelled class `n`.
    pub centroids: Array2<f64>,
}

impl Prototypes {
    pub fn n_way(&self) -> usize {
        self.centroids.nrows()
    }
}

/// Requires the same, non-zero number of support rows for every class in
/// `0..n_way`.
pub fn compute_prototypes(support: ArrayView2<f64>, labels: &[usize], n_way: usize) -> Result<Prototypes> {
    if support.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} support rows but {} labels",
            support.nrows(),
            labels.len()
        )));
    }
    let mut counts = vec![0usize; n_way];
    let mut centroids = Array2::zeros((n_way, support.ncols()));
    for (row, &label) in support.outer_iter().zip(labels) {
        if label >= n_way {
            return Err(Error::Shape(format!("label {label} outside 0..{n_way}")));
        }
        counts[label] += 1;
        let mut c = centroids.row_mut(label);
        c += &row;
    }
    let k = counts[0];
    if let Some(n) = counts.iter().position(|&c| c == 0 || c != k) {
        return Err(Error::Shape(format!(
            "class {n} has {} support rows; expected the same non-zero count for all classes",
            counts[n]
        )));
    }
    centroids /= k as f64;
    Ok(Prototypes { centroids })
}

/// `M x N` matrix of `||z_m - c_n||^2`.
pub fn squared_distances(query: ArrayView2<f64>, protos: &Prototypes) -> Array2<f64> {
    let (m, n) = (query.nrows(), protos.n_way());
    Array2::from_shape_fn((m, n), |(i, j)| {
        query
            .row(i)
            .iter()
            .zip(protos.centroids.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// `log p(n | z_m)` from a softmax over `-||z_m - c_n||^2`.
pub fn proto_log_probs(query: ArrayView2<f64>, protos: &Prototypes) -> Array2<f64> {
    log_softmax_rows(&squared_distances(query, protos).mapv(|d| -d))
}

/// Mean over queries of `-log p(y_m | z_m)`.
pub fn protonet_nll(log_probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(m, &y)| -log_probs[[m, y]])
        .sum();
    total / labels.len() as f64
}

/// Nearest prototype by squared distance; ties go to the lowest index.
pub fn classify(query: ArrayView2<f64>, protos: &Prototypes) -> Vec<usize> {
    squared_distances(query, protos)
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &d) in row.iter().enumerate() {
                if d < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// NLL of the episode and its gradients with respect to the support and
/// query embeddings (the prototypes depend on the support rows).
pub fn protonet_nll_with_grad(
    support: ArrayView2<f64>,
    support_labels: &[usize],
    query: ArrayView2<f64>,
    query_labels: &[usize],
    n_way: usize,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let protos = compute_prototypes(support, support_labels, n_way)?;
    let log_probs = proto_log_probs(query, &protos);
    let loss = protonet_nll(&log_probs, query_labels);

    let m = query.nrows() as f64;
    let k = (support.nrows() / n_way) as f64;
    // dL/dlogit[m,n] = (p - onehot) / M with logit = -||z_m - c_n||^2.
    let mut dlogit = log_probs.mapv(f64::exp);
    for (i, &y) in query_labels.iter().enumerate() {
        dlogit[[i, y]] -= 1.0;
    }
    dlogit /= m;

    let mut d_query = Array2::zeros(query.raw_dim());
    let mut d_protos = Array2::<f64>::zeros(protos.centroids.raw_dim());
    for (i, zq) in query.outer_iter().enumerate() {
        for (n, c) in protos.centroids.outer_iter().enumerate() {
            let g = dlogit[[i, n]];
            let diff = &zq - &c;
            // d(-||z - c||^2)/dz = -2(z - c), /dc = 2(z - c)
            d_query.row_mut(i).scaled_add(-2.0 * g, &diff);
            d_protos.row_mut(n).scaled_add(2.0 * g, &diff);
        }
    }
    let mut d_support = Array2::zeros(support.raw_dim());
    for (s, &label) in support_labels.iter().enumerate() {
        d_support.row_mut(s).scaled_add(1.0 / k, &d_protos.row(label));
    }
    Ok((loss, d_support, d_query))
}

fn l2_normalize_rows(z: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let u = &z / &norms.view().insert_axis(Axis(1));
    (u, norms)
}

pub fn supcon_loss(embeddings: ArrayView2<f64>, labels: &[usize], temperature: f64) -> Result<f64> {
    supcon_loss_with_grad(embeddings, labels, temperature).map(|(l, _)| l)
}

/// SupCon loss and its gradient with respect to the raw embeddings.
pub fn supcon_loss_with_grad(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = embeddings.nrows();
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} embeddings but {} labels", labels.len())));
    }
    if b < 2 {
        return Err(Error::Shape("supcon needs at least 2 samples".into()));
    }
    let (u, norms) = l2_normalize_rows(embeddings);
    let sim = u.dot(&u.t()) / temperature;

    let anchors: Vec<usize> = (0..b)
        .filter(|&i| (0..b).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::NoPositives);
    }
    let n_anchors = anchors.len() as f64;

    let mut loss = 0.0;
    let mut dsim = Array2::<f64>::zeros((b, b));
    for &i in &anchors {
        let row = sim.row(i);
        let max = (0..b).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let positives: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let n_pos = positives.len() as f64;
        loss += -positives.iter().map(|&p| row[p] - lse).sum::<f64>() / n_pos;

        for a in (0..b).filter(|&a| a != i) {
            let softmax = (row[a] - max).exp() / denom;
            dsim[[i, a]] += softmax / n_anchors;
        }
        for &p in &positives {
            dsim[[i, p]] -= 1.0 / (n_pos * n_anchors);
        }
    }
    loss /= n_anchors;

    // sim = U U^T / tau  =>  dU = (dS + dS^T) U / tau
    let du = (&dsim + &dsim.t()).dot(&u) / temperature;
    // u = z / ||z||  =>  dz = (du - u (u . du)) / ||z||
    let mut dz = Array2::zeros(embeddings.raw_dim());
    for i in 0..b {
        let ui = u.row(i);
        let dui = du.row(i);
        let proj = ui.dot(&dui);
        let mut row = dz.row_mut(i);
        row.assign(&(&dui - &(&ui * proj)));
        row /= norms[i];
    }
    Ok((loss, dz))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub supcon: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub supcon_weight: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            supcon_weight: SUPCON_WEIGHT,
            temperature: SUPCON_TEMPERATURE,
        }
    }
}

/// `nll(query) + weight * supcon(support ∪ query)` with gradients for the
/// support and query embeddings.
pub fn episode_loss(
    support: ArrayView2<f64>,
    support_labels: &[usize],
    query: ArrayView2<f64>,
    query_labels: &[usize],
    n_way: usize,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    let (nll, mut d_support, mut d_query) =
        protonet_nll_with_grad(support, support_labels, query, query_labels, n_way)?;

    let (supcon, d_sc) = if weights.supcon_weight != 0.0 {
        let all = ndarray::concatenate(Axis(0), &[support, query]).expect("same embedding width");
        let labels: Vec<usize> = support_labels.iter().chain(query_labels).copied().collect();
        supcon_loss_with_grad(all.view(), &labels, weights.temperature)?
    } else {
        (0.0, Array2::zeros((support.nrows() + query.nrows(), support.ncols())))
    };
    let s = support.nrows();
    d_support.scaled_add(weights.supcon_weight, &d_sc.slice(ndarray::s![..s, ..]));
    d_query.scaled_add(weights.supcon_weight, &d_sc.slice(ndarray::s![s.., ..]));

    Ok((
        LossBreakdown {
            nll,
            supcon,
            total: nll + weights.supcon_weight * supcon,
        },
        d_support,
        d_query,
    ))
}

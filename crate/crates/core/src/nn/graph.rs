//! Relation reasoning over region features: a cosine-similarity graph built
//! per sample and two graph convolutions with shared weights.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::Tensor;
use super::NnError;
use crate::math;

const ZERO_NORM: f64 = 1e-12;

/// Similarity graph over region features.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGraph {
    /// L2-normalized node features.
    pub normalized: Vec<Vec<f64>>,
    /// Norms of the raw node features.
    pub norms: Vec<f64>,
    /// Nodes whose feature was zero and was replaced by a uniform unit vector.
    pub degenerate: Vec<bool>,
    /// Cosine similarities with ones on the diagonal.
    pub gamma: Vec<Vec<f64>>,
    /// Row sums of `gamma`.
    pub degree: Vec<f64>,
}

impl RegionGraph {
    pub fn nodes(&self) -> usize {
        self.gamma.len()
    }

    /// `D^-1 Gamma`.
    pub fn transition(&self) -> Vec<Vec<f64>> {
        self.gamma
            .iter()
            .zip(&self.degree)
            .map(|(row, &d)| row.iter().map(|v| v / d).collect())
            .collect()
    }

    pub fn has_degenerate_node(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Builds the cosine-similarity graph of `f`. A zero feature vector is
/// replaced by the uniform unit vector and flagged in `degenerate`.
pub fn build_graph(f: &[Vec<f64>]) -> RegionGraph {
    let n = f.len();
    let mut normalized = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for v in f {
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        norms.push(norm);
        if norm > ZERO_NORM {
            normalized.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
            degenerate.push(false);
        } else {
            let u = 1.0 / math::sqrt(v.len().max(1) as f64);
            normalized.push(vec![u; v.len()]);
            degenerate.push(true);
        }
    }
    let mut gamma = vec![vec![0.0; n]; n];
    for i in 0..n {
        gamma[i][i] = 1.0;
        for j in i + 1..n {
            let c = dot(&normalized[i], &normalized[j]).clamp(-1.0, 1.0);
            gamma[i][j] = c;
            gamma[j][i] = c;
        }
    }
    let degree = gamma.iter().map(|row| node_sum(&mut row.clone())).collect();
    RegionGraph {
        normalized,
        norms,
        degenerate,
        gamma,
        degree,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum over nodes in value order, so relabeling the nodes cannot change
/// the rounding.
fn node_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `A X` for an `n x n` matrix `A` and node rows `X`.
fn propagate(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = x.first().map_or(0, Vec::len);
    let mut terms = Vec::with_capacity(x.len());
    a.iter()
        .map(|row| {
            (0..c)
                .map(|k| {
                    terms.clear();
                    terms.extend(row.iter().zip(x).map(|(w, xr)| w * xr[k]));
                    node_sum(&mut terms)
                })
                .collect()
        })
        .collect()
}

/// `A^T X`.
fn propagate_transposed(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = x.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; c]; a.len()];
    for (i, row) in a.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            for (o, v) in out[j].iter_mut().zip(&x[i]) {
                *o += w * v;
            }
        }
    }
    out
}

/// `X W` with `W` stored row-major `[C_in, C_out]`.
fn times_weight(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let (cin, cout) = (w.shape[0], w.shape[1]);
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; cout];
            for (c, &v) in row.iter().enumerate().take(cin) {
                if v == 0.0 {
                    continue;
                }
                let wr = &w.data[c * cout..(c + 1) * cout];
                for (o, &wv) in out.iter_mut().zip(wr) {
                    *o += v * wv;
                }
            }
            out
        })
        .collect()
}

/// `X W^T`.
fn times_weight_transposed(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let (cin, cout) = (w.shape[0], w.shape[1]);
    x.iter()
        .map(|row| (0..cin).map(|c| dot(&w.data[c * cout..(c + 1) * cout], row)).collect())
        .collect()
}

/// Accumulates `X^T G` into `grad`.
fn accumulate_weight_grad(x: &[Vec<f64>], g: &[Vec<f64>], grad: &mut Tensor) {
    let cout = grad.shape[1];
    for (xr, gr) in x.iter().zip(g) {
        for (c, &v) in xr.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &mut grad.data[c * cout..(c + 1) * cout];
            for (o, &gv) in row.iter_mut().zip(gr) {
                *o += v * gv;
            }
        }
    }
}

fn relu_rows(x: &mut [Vec<f64>]) {
    x.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
}

/// The two graph-convolution weight matrices, each `C x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationReasoning {
    pub w0: Tensor,
    pub w1: Tensor,
}

impl RelationReasoning {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let bound = math::sqrt(6.0 / channels as f64);
        Self {
            w0: Tensor::uniform(&[channels, channels], bound, rng),
            w1: Tensor::uniform(&[channels, channels], bound, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w0: self.w0.zeros_like(),
            w1: self.w1.zeros_like(),
        }
    }
}

pub(crate) struct GcnCache {
    transition: Vec<Vec<f64>>,
    ap0: Vec<Vec<f64>>,
    p0: Vec<Vec<f64>>,
    p1: Vec<Vec<f64>>,
    ap1: Vec<Vec<f64>>,
    p2: Vec<Vec<f64>>,
}

pub(crate) fn gcn_cached(p0: &[Vec<f64>], graph: &RegionGraph, w0: &Tensor, w1: &Tensor) -> (Vec<Vec<f64>>, GcnCache) {
    let transition = graph.transition();
    let ap0 = propagate(&transition, p0);
    let mut p1 = times_weight(&ap0, w0);
    relu_rows(&mut p1);
    let ap1 = propagate(&transition, &p1);
    let mut p2 = times_weight(&ap1, w1);
    relu_rows(&mut p2);
    (
        p2.clone(),
        GcnCache {
            transition,
            ap0,
            p0: p0.to_vec(),
            p1,
            ap1,
            p2,
        },
    )
}

fn mask_by(g: &mut [Vec<f64>], out: &[Vec<f64>]) {
    for (gr, or) in g.iter_mut().zip(out) {
        for (gv, &ov) in gr.iter_mut().zip(or) {
            if ov <= 0.0 {
                *gv = 0.0;
            }
        }
    }
}

/// Accumulates `d(X^T G)`-style products: `dA[i][j] += <G_i, X_j>`.
fn accumulate_transition_grad(g: &[Vec<f64>], x: &[Vec<f64>], da: &mut [Vec<f64>]) {
    for (i, gr) in g.iter().enumerate() {
        for (j, xr) in x.iter().enumerate() {
            da[i][j] += dot(gr, xr);
        }
    }
}

/// Backpropagates through both graph convolutions. Returns the gradients
/// w.r.t. the input node features and the transition matrix.
pub(crate) fn gcn_backward(cache: &GcnCache, dp2: &[Vec<f64>], rr: &RelationReasoning, grad: &mut RelationReasoning) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = cache.transition.len();
    let mut da = vec![vec![0.0; n]; n];

    let mut dz1 = dp2.to_vec();
    mask_by(&mut dz1, &cache.p2);
    accumulate_weight_grad(&cache.ap1, &dz1, &mut grad.w1);
    let dap1 = times_weight_transposed(&dz1, &rr.w1);
    accumulate_transition_grad(&dap1, &cache.p1, &mut da);
    let mut dz0 = propagate_transposed(&cache.transition, &dap1);
    mask_by(&mut dz0, &cache.p1);
    accumulate_weight_grad(&cache.ap0, &dz0, &mut grad.w0);
    let dap0 = times_weight_transposed(&dz0, &rr.w0);
    accumulate_transition_grad(&dap0, &cache.p0, &mut da);
    let dp0 = propagate_transposed(&cache.transition, &dap0);
    (dp0, da)
}

/// Backpropagates a transition-matrix gradient through the row
/// normalization, the cosine similarities and the L2 normalization. Adds the
/// result to `df`. Degenerate nodes receive no gradient.
pub(crate) fn graph_backward(graph: &RegionGraph, da: &[Vec<f64>], df: &mut [Vec<f64>]) {
    let n = graph.nodes();
    let transition = graph.transition();
    let mut dgamma = vec![vec![0.0; n]; n];
    for i in 0..n {
        let s: f64 = (0..n).map(|l| da[i][l] * transition[i][l]).sum();
        for j in 0..n {
            dgamma[i][j] = (da[i][j] - s) / graph.degree[i];
        }
    }
    let c = graph.normalized.first().map_or(0, Vec::len);
    let mut dhat = vec![vec![0.0; c]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = dgamma[i][j] + dgamma[j][i];
            for (d, v) in dhat[i].iter_mut().zip(&graph.normalized[j]) {
                *d += w * v;
            }
        }
    }
    for i in 0..n {
        if graph.degenerate[i] {
            continue;
        }
        let proj = dot(&dhat[i], &graph.normalized[i]);
        let inv = 1.0 / graph.norms[i];
        for ((d, &h), &u) in df[i].iter_mut().zip(&dhat[i]).zip(&graph.normalized[i]) {
            *d += (h - u * proj) * inv;
        }
    }
}

/// Two graph convolutions `P_{l+1} = relu(D^-1 Gamma P_l W_l)`.
pub fn gcn_forward(p0: &[Vec<f64>], graph: &RegionGraph, w0: &Tensor, w1: &Tensor) -> Result<Vec<Vec<f64>>, NnError> {
    if p0.len() != graph.nodes() {
        return Err(NnError::ShapeMismatch {
            context: "gcn_forward nodes",
            expected: graph.nodes(),
            found: p0.len(),
        });
    }
    for w in [w0, w1] {
        for row in p0 {
            if w.shape.len() != 2 || w.shape[0] != row.len() || w.shape[1] != row.len() {
                return Err(NnError::ShapeMismatch {
                    context: "gcn_forward weight",
                    expected: row.len(),
                    found: w.shape.first().copied().unwrap_or(0),
                });
            }
        }
    }
    Ok(gcn_cached(p0, graph, w0, w1).0)
}

/// Pooled region and relation features.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateFeature {
    /// `f_A`, the mean weighted region feature.
    pub region: Vec<f64>,
    /// `f_G`, the mean of the residual relational features.
    pub relation: Vec<f64>,
    /// `f_a = [f_A; f_G]`.
    pub combined: Vec<f64>,
}

/// Adds each region's relational feature to its weighted feature, then
/// averages both sets over the regions and concatenates the two means.
pub fn aggregate(f: &[Vec<f64>], relational: &[Vec<f64>]) -> Result<AggregateFeature, NnError> {
    if f.len() != relational.len() || f.is_empty() {
        return Err(NnError::ShapeMismatch {
            context: "aggregate",
            expected: f.len(),
            found: relational.len(),
        });
    }
    let c = f[0].len();
    let n = f.len() as f64;
    let mut region = vec![0.0; c];
    let mut relation = vec![0.0; c];
    for (fk, gk) in f.iter().zip(relational) {
        if fk.len() != c || gk.len() != c {
            return Err(NnError::ShapeMismatch {
                context: "aggregate width",
                expected: c,
                found: gk.len(),
            });
        }
        for i in 0..c {
            region[i] += fk[i];
            relation[i] += gk[i] + fk[i];
        }
    }
    region.iter_mut().for_each(|v| *v /= n);
    relation.iter_mut().for_each(|v| *v /= n);
    let mut combined = region.clone();
    combined.extend_from_slice(&relation);
    Ok(AggregateFeature {
        region,
        relation,
        combined,
    })
}

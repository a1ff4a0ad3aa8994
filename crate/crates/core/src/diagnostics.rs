//! Structural quality metrics, spectral checks and graph export.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{GcrError, Result};
use crate::graphs::{class_mask, feature_graph_values, masked_prediction_graph, prediction_graph, SimilarityKernel, SimilarityMatrix};
use crate::model::Network;
use crate::tensor::Tensor;
use crate::train::{evaluation_from_logits, infer};

fn check_rows(features: &Tensor, labels: &[usize], op: &str) -> Result<()> {
    if features.ndim() < 2 || features.rows() != labels.len() {
        return Err(GcrError::Contract(format!(
            "{op}: {} labels for features of shape {:?}",
            labels.len(),
            features.shape()
        )));
    }
    Ok(())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Members of each distinct label, in label order.
fn groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        g.entry(y).or_default().push(i);
    }
    g
}

/// Mean silhouette coefficient with Euclidean distances. Members of
/// singleton clusters score 0, as do points whose intra and nearest
/// inter-cluster distances are both 0.
pub fn silhouette(features: &Tensor, labels: &[usize]) -> Result<f64> {
    check_rows(features, labels, "silhouette")?;
    let g = groups(labels);
    if g.len() < 2 {
        return Err(GcrError::Contract(format!(
            "silhouette needs at least 2 classes, got {}",
            g.len()
        )));
    }
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = &g[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let xi = features.row(i);
        let mean_to = |members: &[usize], exclude_self: bool| {
            let s: f64 = members.iter().map(|&j| euclidean(xi, features.row(j))).sum();
            s / (members.len() - exclude_self as usize) as f64
        };
        let a = mean_to(own, true);
        let b = g
            .iter()
            .filter(|(&y, _)| y != labels[i])
            .map(|(_, m)| mean_to(m, false))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationRatio {
    /// `inter_mean / intra_mean`; infinite when `degenerate`.
    pub ratio: f64,
    pub inter_mean: f64,
    pub intra_mean: f64,
    /// Set when the mean intra-class distance is 0.
    pub degenerate: bool,
}

/// Mean inter-class pairwise distance over mean intra-class pairwise
/// distance.
pub fn separability_ratio(features: &Tensor, labels: &[usize]) -> Result<SeparationRatio> {
    check_rows(features, labels, "separability_ratio")?;
    if groups(labels).len() < 2 {
        return Err(GcrError::Contract("separability ratio needs at least 2 classes".into()));
    }
    let n = labels.len();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(features.row(i), features.row(j));
            let acc = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            acc.0 += d;
            acc.1 += 1;
        }
    }
    if intra.1 == 0 {
        return Err(GcrError::Contract("separability ratio needs an intra-class pair".into()));
    }
    let intra_mean = intra.0 / intra.1 as f64;
    let inter_mean = inter.0 / inter.1 as f64;
    let degenerate = intra_mean == 0.0;
    Ok(SeparationRatio {
        ratio: if degenerate { f64::INFINITY } else { inter_mean / intra_mean },
        inter_mean,
        intra_mean,
        degenerate,
    })
}

/// Mean of the per-row maximum probability.
pub fn mean_confidence(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels, "mean_confidence")?;
    let mut total = 0.0;
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(GcrError::Contract(format!("row {i} is not a distribution (sums to {s})")));
        }
        total += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total / probs.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Row `i` is the distribution of predictions for true class `i`.
    pub matrix: Tensor,
    /// Classes with no samples; their rows are all zero.
    pub unsupported: Vec<usize>,
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(GcrError::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if classes == 0 {
        return Err(GcrError::Contract("confusion matrix needs at least one class".into()));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(GcrError::Contract(format!("class id {bad} outside [0, {classes})")));
    }
    let mut counts = vec![0usize; classes * classes];
    for (&p, &y) in preds.iter().zip(labels) {
        counts[y * classes + p] += 1;
    }
    let mut data = vec![0.0; classes * classes];
    let mut unsupported = Vec::new();
    for i in 0..classes {
        let row = &counts[i * classes..(i + 1) * classes];
        let support: usize = row.iter().sum();
        if support == 0 {
            unsupported.push(i);
            continue;
        }
        for j in 0..classes {
            data[i * classes + j] = row[j] as f64 / support as f64;
        }
    }
    Ok(Confusion {
        matrix: Tensor::new(vec![classes, classes], data)?,
        unsupported,
    })
}

/// Whether the diagonal of a similarity matrix counts toward node degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalConvention {
    /// Degrees and the adjacency keep `A_ii` (cosine graphs store 1 there).
    #[default]
    Include,
    /// `A_ii` is treated as 0 in both the adjacency and the degrees.
    Zero,
}

fn laplacian_raw(n: usize, a: &[f64], conv: DiagonalConvention) -> Result<Vec<f64>> {
    let adj = |i: usize, j: usize| {
        if i == j && conv == DiagonalConvention::Zero {
            0.0
        } else {
            a[i * n + j]
        }
    };
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = (0..n).map(|j| adj(i, j)).sum();
        if !(d > 0.0) {
            return Err(GcrError::DegenerateGraph { node: i });
        }
        inv_sqrt.push(1.0 / d.sqrt());
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            l[i * n + j] = delta - inv_sqrt[i] * adj(i, j) * inv_sqrt[j];
        }
    }
    Ok(l)
}

/// `I - D^{-1/2} A D^{-1/2}` with `D_ii = Σ_j A_ij`.
pub fn normalized_laplacian(a: &SimilarityMatrix, conv: DiagonalConvention) -> Result<Tensor> {
    if a.entries().iter().any(|&v| v < 0.0) {
        return Err(GcrError::Contract("normalized Laplacian needs a non-negative matrix".into()));
    }
    let n = a.n();
    Tensor::new(vec![n, n], laplacian_raw(n, a.entries(), conv)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPoint {
    pub epsilon: f64,
    /// `‖F_ε - P‖_F`.
    pub graph_residual: f64,
    /// `‖L_{F_ε} - L_P‖_F`.
    pub laplacian_residual: f64,
    /// `laplacian_residual / ε`, or 0 at ε = 0.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSeries {
    /// Sorted by increasing ε.
    pub points: Vec<SpectralPoint>,
    /// `1/m + √n‖P‖_F/m²` with `m` the smallest degree over `P` and every
    /// `F_ε`; each `ratio` is at most this value.
    pub bound: f64,
    /// The same pair of residuals for the observed feature graph.
    pub observed: (f64, f64),
}

impl SpectralSeries {
    pub fn within_bound(&self) -> bool {
        self.points.iter().all(|p| p.ratio <= self.bound)
    }

    pub fn monotone(&self) -> bool {
        self.points.windows(2).all(|w| {
            w[0].graph_residual <= w[1].graph_residual
                && w[0].laplacian_residual <= w[1].laplacian_residual
        })
    }
}

/// Seeded symmetric direction with zero diagonal and unit Frobenius norm.
pub fn perturbation_direction(n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(GcrError::Contract("perturbation needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = StandardNormal.sample(&mut rng);
            e[i * n + j] = v;
            e[j * n + i] = v;
        }
    }
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(e.into_iter().map(|v| v / norm).collect())
}

fn frobenius_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn min_degree(n: usize, a: &[f64]) -> f64 {
    (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Perturbs `p` along a seeded direction and measures how far the
/// normalized Laplacian moves, for each ε.
pub fn spectral_alignment_check(
    f: &SimilarityMatrix,
    p: &SimilarityMatrix,
    epsilons: &[f64],
    seed: u64,
) -> Result<SpectralSeries> {
    let n = p.n();
    if f.n() != n {
        return Err(GcrError::Dimension {
            op: "spectral_alignment_check",
            left: vec![f.n(), f.n()],
            right: vec![n, n],
        });
    }
    if epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(GcrError::Contract(format!("epsilons must be finite and >= 0: {epsilons:?}")));
    }
    let conv = DiagonalConvention::Include;
    let lp = laplacian_raw(n, p.entries(), conv)?;
    let lf = laplacian_raw(n, f.entries(), conv)?;
    let observed = (frobenius_diff(f.entries(), p.entries()), frobenius_diff(&lf, &lp));

    let e = perturbation_direction(n, seed)?;
    let mut eps: Vec<f64> = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    let mut m = min_degree(n, p.entries());
    let mut points = Vec::with_capacity(eps.len());
    for &epsilon in &eps {
        let fe: Vec<f64> = p
            .entries()
            .iter()
            .zip(&e)
            .map(|(pv, ev)| (pv + epsilon * ev).max(0.0))
            .collect();
        m = m.min(min_degree(n, &fe));
        let le = laplacian_raw(n, &fe, conv)?;
        let laplacian_residual = frobenius_diff(&le, &lp);
        points.push(SpectralPoint {
            epsilon,
            graph_residual: frobenius_diff(&fe, p.entries()),
            laplacian_residual,
            ratio: if epsilon > 0.0 { laplacian_residual / epsilon } else { 0.0 },
        });
    }
    let p_norm = p.entries().iter().map(|v| v * v).sum::<f64>().sqrt();
    let bound = 1.0 / m + (n as f64).sqrt() * p_norm / (m * m);
    Ok(SpectralSeries { points, bound, observed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSplit {
    /// Mean over classes of the within-class covariance trace.
    pub intra: f64,
    /// Mean squared distance of class means from the global mean.
    pub inter: f64,
    /// Classes with fewer than 2 samples, counted with variance 0.
    pub undersized: Vec<usize>,
}

pub fn intra_inter_variance(features: &Tensor, labels: &[usize]) -> Result<VarianceSplit> {
    check_rows(features, labels, "intra_inter_variance")?;
    let g = groups(labels);
    if g.len() < 2 {
        return Err(GcrError::Contract("variance split needs at least 2 classes".into()));
    }
    let d = features.row_len();
    let mean_of = |idx: &[usize]| {
        let mut m = vec![0.0; d];
        for &i in idx {
            for (mk, x) in m.iter_mut().zip(features.row(i)) {
                *mk += x;
            }
        }
        m.iter_mut().for_each(|v| *v /= idx.len() as f64);
        m
    };
    let all: Vec<usize> = (0..labels.len()).collect();
    let global = mean_of(&all);
    let (mut intra, mut inter) = (0.0, 0.0);
    let mut undersized = Vec::new();
    for (&y, idx) in &g {
        let mu = mean_of(idx);
        inter += mu.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if idx.len() < 2 {
            undersized.push(y);
            continue;
        }
        let ss: f64 = idx
            .iter()
            .map(|&i| features.row(i).iter().zip(&mu).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum();
        intra += ss / (idx.len() - 1) as f64;
    }
    let c = g.len() as f64;
    Ok(VarianceSplit {
        intra: intra / c,
        inter: inter / c,
        undersized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Node-link document for an undirected similarity graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub directed: bool,
    pub threshold: f64,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.4;

/// Keeps the `i < j` pairs with `A_ij >= threshold`.
pub fn graph_document(a: &SimilarityMatrix, labels: &[usize], threshold: f64) -> Result<GraphDocument> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(GcrError::Contract(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let n = a.n();
    if labels.len() != n {
        return Err(GcrError::Contract(format!("{} labels for a graph on {n} nodes", labels.len())));
    }
    let nodes = labels.iter().enumerate().map(|(id, &label)| GraphNode { id, label }).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let w = a.get(i, j);
            if w >= threshold {
                edges.push(GraphEdge { source: i, target: j, weight: w });
            }
        }
    }
    Ok(GraphDocument { directed: false, threshold, nodes, edges })
}

pub fn export_graph(a: &SimilarityMatrix, labels: &[usize], threshold: f64, path: &Path) -> Result<GraphDocument> {
    let doc = graph_document(a, labels, threshold)?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| GcrError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(doc)
}

pub fn parse_graph(path: &Path) -> Result<GraphDocument> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| GcrError::Format(format!("{}: {e}", path.display())))
}

impl GraphDocument {
    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph relational {\n");
        for node in &self.nodes {
            out.push_str(&format!("  {} [label=\"{}\", class={}];\n", node.id, node.id, node.label));
        }
        for e in &self.edges {
            out.push_str(&format!("  {} -- {} [weight={:?}];\n", e.source, e.target, e.weight));
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVariance {
    pub layer: usize,
    pub intra: f64,
    pub inter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Layer whose outputs feed the silhouette and separability metrics.
    pub feature_layer: usize,
    pub silhouette: f64,
    pub separability: SeparationRatio,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub layer_variance: Vec<LayerVariance>,
    pub spectral: SpectralSeries,
    pub provenance: String,
}

impl DiagnosticsReport {
    /// Flat `metric,value` listing.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![
            ("feature_layer".to_string(), self.feature_layer as f64),
            ("silhouette".into(), self.silhouette),
            ("sep_ratio".into(), self.separability.ratio),
            ("mean_confidence".into(), self.mean_confidence),
            ("accuracy".into(), self.accuracy),
        ];
        for v in &self.layer_variance {
            rows.push((format!("intra_variance_l{}", v.layer), v.intra));
            rows.push((format!("inter_variance_l{}", v.layer), v.inter));
        }
        for p in &self.spectral.points {
            rows.push((format!("graph_residual_eps{:e}", p.epsilon), p.graph_residual));
            rows.push((format!("laplacian_residual_eps{:e}", p.epsilon), p.laplacian_residual));
        }
        rows.push(("spectral_bound".into(), self.spectral.bound));
        let c = self.confusion.matrix.rows();
        for i in 0..c {
            for j in 0..c {
                rows.push((format!("confusion_{i}_{j}"), self.confusion.matrix.get2(i, j)));
            }
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v:?}\n"));
        }
        out
    }
}

/// Evaluation batch used for graph-level diagnostics: `size` rows drawn
/// without replacement with a fixed seed, in sorted order.
pub fn evaluation_batch(n: usize, size: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

pub const SPECTRAL_EPSILONS: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];

/// Computes every metric family for `net` on `ds`. Clustering metrics use
/// the deepest tap-eligible layer; variances cover every eligible layer;
/// the spectral check and graphs use a seeded batch of `batch` rows.
pub fn diagnose(net: &Network, ds: &LabeledDataset, batch: usize, seed: u64) -> Result<(DiagnosticsReport, SimilarityMatrix, SimilarityMatrix, Vec<usize>)> {
    let layers = net.spec().tap_eligible();
    let feature_layer = *layers
        .last()
        .ok_or_else(|| GcrError::Config("network has no tap-eligible layer".into()))?;
    let (logits, tapped) = infer(net, &ds.features, &layers)?;
    let eval = evaluation_from_logits(&logits, &ds.labels)?;
    let penultimate = tapped.last().expect("one tensor per layer");

    let layer_variance = layers
        .iter()
        .zip(&tapped)
        .map(|(&layer, t)| {
            intra_inter_variance(t, &ds.labels).map(|v| LayerVariance { layer, intra: v.intra, inter: v.inter })
        })
        .collect::<Result<Vec<_>>>()?;

    let idx = evaluation_batch(ds.len(), batch, seed);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    let f = feature_graph_values(&penultimate.select_rows(&idx), SimilarityKernel::Cosine {})?;
    let s = prediction_graph(&logits.select_rows(&idx))?;
    let p = masked_prediction_graph(&s, &class_mask(&labels))?;
    let spectral = spectral_alignment_check(&f, &p, &SPECTRAL_EPSILONS, seed)?;

    let report = DiagnosticsReport {
        feature_layer,
        silhouette: silhouette(penultimate, &ds.labels)?,
        separability: separability_ratio(penultimate, &ds.labels)?,
        mean_confidence: mean_confidence(&eval.probabilities, &ds.labels)?,
        accuracy: eval.accuracy,
        confusion: confusion_matrix(&eval.predictions, &ds.labels, net.spec().classes)?,
        layer_variance,
        spectral,
        provenance: format!(
            "{}; sep_ratio = mean inter-class / mean intra-class Euclidean distance; confidence = mean max softmax",
            ds.provenance
        ),
    };
    Ok((report, f, p, labels))
}

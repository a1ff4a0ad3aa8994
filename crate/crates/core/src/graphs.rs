//! Batch relational graphs.
//!
//! A feature graph relates the samples of one batch through a similarity
//! kernel applied to their flattened activations. The prediction graph does
//! the same for softmax outputs, and the class mask keeps only same-label
//! pairs of it. Only the strict upper triangle of these matrices is ever
//! consumed by the alignment loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows_raw, Tape, Var};
use crate::error::{dim_err, GcrError, Result};
use crate::tensor::Tensor;

/// Pairwise similarity kernel.
///
/// Every kernel other than cosine is clamped into `[0, 1]`. A `gamma` of
/// `None` means `1/d` for the feature dimension `d` at hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SimilarityKernel {
    Cosine {},
    Rbf {
        #[serde(default)]
        gamma: Option<f64>,
    },
    Polynomial {
        #[serde(default = "default_degree")]
        degree: u32,
        #[serde(default = "default_poly_offset")]
        offset: f64,
    },
    Sigmoid {
        #[serde(default = "default_sigmoid_scale")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
    Laplacian {
        #[serde(default)]
        gamma: Option<f64>,
    },
}

fn default_degree() -> u32 {
    2
}
fn default_poly_offset() -> f64 {
    1.0
}
fn default_sigmoid_scale() -> f64 {
    1.0
}

impl Default for SimilarityKernel {
    fn default() -> Self {
        SimilarityKernel::Cosine {}
    }
}

impl SimilarityKernel {
    pub fn rbf() -> Self {
        SimilarityKernel::Rbf { gamma: None }
    }

    pub fn laplacian() -> Self {
        SimilarityKernel::Laplacian { gamma: None }
    }

    pub fn polynomial() -> Self {
        SimilarityKernel::Polynomial {
            degree: default_degree(),
            offset: default_poly_offset(),
        }
    }

    pub fn sigmoid() -> Self {
        SimilarityKernel::Sigmoid {
            scale: default_sigmoid_scale(),
            offset: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityKernel::Cosine {} => "cosine",
            SimilarityKernel::Rbf { .. } => "rbf",
            SimilarityKernel::Polynomial { .. } => "polynomial",
            SimilarityKernel::Sigmoid { .. } => "sigmoid",
            SimilarityKernel::Laplacian { .. } => "laplacian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GcrError::Config(m));
        match *self {
            SimilarityKernel::Cosine {} => Ok(()),
            SimilarityKernel::Rbf { gamma } | SimilarityKernel::Laplacian { gamma } => match gamma {
                Some(g) if !(g.is_finite() && g > 0.0) => {
                    bad(format!("{} gamma must be positive, got {g}", self.name()))
                }
                _ => Ok(()),
            },
            SimilarityKernel::Polynomial { degree, offset } => {
                if degree < 1 {
                    bad("polynomial degree must be at least 1".into())
                } else if !offset.is_finite() {
                    bad("polynomial offset must be finite".into())
                } else {
                    Ok(())
                }
            }
            SimilarityKernel::Sigmoid { scale, offset } => {
                if scale.is_finite() && offset.is_finite() {
                    Ok(())
                } else {
                    bad("sigmoid scale and offset must be finite".into())
                }
            }
        }
    }

    fn gamma_for(gamma: Option<f64>, d: usize) -> f64 {
        gamma.unwrap_or(1.0 / d as f64)
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Kernel value before clamping, given precomputed norms for cosine.
fn raw_kernel(u: &[f64], v: &[f64], nu: f64, nv: f64, kernel: &SimilarityKernel) -> f64 {
    let d = u.len();
    match *kernel {
        SimilarityKernel::Cosine {} => dot(u, v) / (nu * nv),
        SimilarityKernel::Rbf { gamma } => {
            let g = SimilarityKernel::gamma_for(gamma, d);
            let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            (-g * sq).exp()
        }
        SimilarityKernel::Laplacian { gamma } => {
            let g = SimilarityKernel::gamma_for(gamma, d);
            let l1: f64 = u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum();
            (-g * l1).exp()
        }
        SimilarityKernel::Polynomial { degree, offset } => {
            (dot(u, v) / d as f64 + offset).powi(degree as i32)
        }
        SimilarityKernel::Sigmoid { scale, offset } => (scale * dot(u, v) / d as f64 + offset).tanh(),
    }
}

/// Similarity of two vectors under `kernel`, clamped into `[0, 1]`.
///
/// For cosine this is `max(0, cos(u, v))`; zero-norm operands are an error.
pub fn kernel_similarity(u: &[f64], v: &[f64], kernel: &SimilarityKernel) -> Result<f64> {
    kernel.validate()?;
    if u.len() != v.len() {
        return Err(dim_err("kernel_similarity", &[u.len()], &[v.len()]));
    }
    let (nu, nv) = (norm(u), norm(v));
    if matches!(kernel, SimilarityKernel::Cosine {}) {
        if nu == 0.0 {
            return Err(GcrError::ZeroNormRow { row: 0 });
        }
        if nv == 0.0 {
            return Err(GcrError::ZeroNormRow { row: 1 });
        }
    }
    Ok(raw_kernel(u, v, nu, nv, kernel).clamp(0.0, 1.0))
}

/// Forward pass of the pairwise similarity primitive: row-major `n×n`.
pub(crate) fn pairwise_forward(x: &Tensor, kernel: &SimilarityKernel) -> Result<Vec<f64>> {
    kernel.validate()?;
    let n = x.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm(x.row(i))).collect();
    let cosine = matches!(kernel, SimilarityKernel::Cosine {});
    if cosine {
        if let Some(row) = norms.iter().position(|&v| v == 0.0) {
            return Err(GcrError::ZeroNormRow { row });
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = if cosine {
            1.0
        } else {
            raw_kernel(x.row(i), x.row(i), norms[i], norms[i], kernel).clamp(0.0, 1.0)
        };
        for j in i + 1..n {
            let v = raw_kernel(x.row(i), x.row(j), norms[i], norms[j], kernel).clamp(0.0, 1.0);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(GcrError::Numeric("non-finite similarity".into()));
    }
    Ok(out)
}

/// Gradient of the pairwise primitive with respect to its `n×d` input.
/// Diagonal entries are constants and receive no gradient.
pub(crate) fn pairwise_backward(
    x: &Tensor,
    kernel: &SimilarityKernel,
    out: &Tensor,
    g: &Tensor,
) -> Vec<f64> {
    let (n, d) = (x.rows(), x.row_len());
    let norms: Vec<f64> = (0..n).map(|i| norm(x.row(i))).collect();
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        for j in i + 1..n {
            let gij = g.data()[i * n + j] + g.data()[j * n + i];
            if gij == 0.0 {
                continue;
            }
            let k = out.data()[i * n + j];
            let (xi, xj) = (x.row(i), x.row(j));
            // (coefficient on x_i, coefficient on x_j) for dk/dx_i, and the
            // mirrored pair for dk/dx_j.
            let (ai, aj, bi, bj) = match *kernel {
                SimilarityKernel::Cosine {} => {
                    if k <= 0.0 {
                        continue;
                    }
                    let (ni, nj) = (norms[i], norms[j]);
                    let inv = 1.0 / (ni * nj);
                    (-k / (ni * ni), inv, inv, -k / (nj * nj))
                }
                SimilarityKernel::Rbf { gamma } => {
                    let c = -2.0 * SimilarityKernel::gamma_for(gamma, d) * k;
                    (c, -c, -c, c)
                }
                SimilarityKernel::Laplacian { gamma } => {
                    let c = -SimilarityKernel::gamma_for(gamma, d) * k * gij;
                    for t in 0..d {
                        let s = sign(xi[t] - xj[t]);
                        dx[i * d + t] += c * s;
                        dx[j * d + t] -= c * s;
                    }
                    continue;
                }
                SimilarityKernel::Polynomial { degree, offset } => {
                    let t = dot(xi, xj) / d as f64 + offset;
                    let raw = t.powi(degree as i32);
                    if !(raw > 0.0 && raw < 1.0) {
                        continue;
                    }
                    let c = degree as f64 * t.powi(degree as i32 - 1) / d as f64;
                    (0.0, c, c, 0.0)
                }
                SimilarityKernel::Sigmoid { scale, offset } => {
                    let raw = (scale * dot(xi, xj) / d as f64 + offset).tanh();
                    if !(raw > 0.0 && raw < 1.0) {
                        continue;
                    }
                    let c = (1.0 - raw * raw) * scale / d as f64;
                    (0.0, c, c, 0.0)
                }
            };
            for t in 0..d {
                dx[i * d + t] += gij * (ai * xi[t] + aj * xj[t]);
                dx[j * d + t] += gij * (bi * xi[t] + bj * xj[t]);
            }
        }
    }
    dx
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Symmetric `n×n` batch similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
    var: Option<Var>,
}

impl SimilarityMatrix {
    /// A detached matrix from row-major entries. Symmetry is checked to 1e-12.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(dim_err("similarity_matrix", &[n, n], &[entries.len()]));
        }
        for i in 0..n {
            for j in i + 1..n {
                if (entries[i * n + j] - entries[j * n + i]).abs() > 1e-12 {
                    return Err(GcrError::Contract(format!(
                        "similarity matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            entries,
            var: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// The tape node holding this matrix when it is differentiable.
    pub fn var(&self) -> Option<Var> {
        self.var
    }

    pub fn is_differentiable(&self) -> bool {
        self.var.is_some()
    }

    /// A copy with the tape link removed.
    pub fn detached(&self) -> Self {
        Self {
            var: None,
            ..self.clone()
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.entries.clone()).expect("square by construction")
    }

    /// Entries `i < j` in row-major pair order.
    pub fn strict_upper(&self) -> Result<Vec<f64>> {
        strict_upper(self)
    }
}

/// Binary same-label indicator over a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    n: usize,
    bits: Vec<bool>,
}

impl ClassMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Elementwise AND; a mask is idempotent under it.
    pub fn hadamard(&self, other: &ClassMask) -> ClassMask {
        ClassMask {
            n: self.n,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Differentiable feature graph of a batch of activations.
///
/// Activations of any rank are flattened per sample first.
pub fn feature_graph(
    tape: &mut Tape,
    features: Var,
    kernel: SimilarityKernel,
) -> Result<SimilarityMatrix> {
    let n = tape.value(features).rows();
    if n < 2 {
        return Err(GcrError::DegenerateBatch(n));
    }
    let flat = tape.flatten_rows(features)?;
    let var = tape.pairwise_similarity(flat, kernel)?;
    Ok(SimilarityMatrix {
        n,
        entries: tape.value(var).data().to_vec(),
        var: Some(var),
    })
}

/// Feature graph computed outside of any tape.
pub fn feature_graph_values(features: &Tensor, kernel: SimilarityKernel) -> Result<SimilarityMatrix> {
    let n = features.rows();
    if n < 2 {
        return Err(GcrError::DegenerateBatch(n));
    }
    let entries = pairwise_forward(&features.flatten_rows(), &kernel)?;
    Ok(SimilarityMatrix {
        n,
        entries,
        var: None,
    })
}

/// Cosine graph of softmax outputs. Always detached.
pub fn prediction_graph(logits: &Tensor) -> Result<SimilarityMatrix> {
    if logits.ndim() != 2 {
        return Err(dim_err("prediction_graph", logits.shape(), &[]));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if n < 2 {
        return Err(GcrError::DegenerateBatch(n));
    }
    if c < 2 {
        return Err(GcrError::Contract(format!(
            "prediction graph needs at least 2 classes, got {c}"
        )));
    }
    let probs = softmax_rows_raw(logits)?;
    let entries = pairwise_forward(&probs, &SimilarityKernel::Cosine {})?;
    Ok(SimilarityMatrix {
        n,
        entries,
        var: None,
    })
}

pub fn class_mask(labels: &[usize]) -> ClassMask {
    let n = labels.len();
    let bits = (0..n * n).map(|p| labels[p / n] == labels[p % n]).collect();
    ClassMask { n, bits }
}

/// `M ⊙ S`: prediction similarities restricted to same-class pairs.
pub fn masked_prediction_graph(s: &SimilarityMatrix, mask: &ClassMask) -> Result<SimilarityMatrix> {
    if s.n != mask.n {
        return Err(dim_err("masked_prediction_graph", &[s.n, s.n], &[mask.n, mask.n]));
    }
    let entries = s
        .entries
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok(SimilarityMatrix {
        n: s.n,
        entries,
        var: None,
    })
}

/// Entries `A[i][j]` for `i < j`, row-major; length `n(n-1)/2`.
pub fn strict_upper(a: &SimilarityMatrix) -> Result<Vec<f64>> {
    let n = a.n;
    if n < 2 {
        return Err(GcrError::DegenerateBatch(n));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        out.extend_from_slice(&a.entries[i * n + i + 1..(i + 1) * n]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fg(rows: &[Vec<f64>]) -> SimilarityMatrix {
        feature_graph_values(&Tensor::from_rows(rows), SimilarityKernel::Cosine {}).unwrap()
    }

    #[test]
    fn identical_orthogonal_and_opposite_rows() {
        assert_eq!(fg(&[vec![1.0, 0.0], vec![1.0, 0.0]]).get(0, 1), 1.0);
        assert_eq!(fg(&[vec![1.0, 0.0], vec![0.0, 1.0]]).get(0, 1), 0.0);
        assert_eq!(fg(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).get(0, 1), 0.0);
    }

    #[test]
    fn zero_norm_row_is_named() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]);
        let err = feature_graph_values(&x, SimilarityKernel::Cosine {}).unwrap_err();
        assert!(matches!(err, GcrError::ZeroNormRow { row: 1 }));
    }

    #[test]
    fn feature_graph_needs_a_pair() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]);
        assert!(matches!(
            feature_graph_values(&x, SimilarityKernel::Cosine {}),
            Err(GcrError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn prediction_graph_cases() {
        let same = prediction_graph(&Tensor::from_rows(&[vec![0.3, 2.0], vec![0.3, 2.0]])).unwrap();
        assert!((same.get(0, 1) - 1.0).abs() < 1e-15);

        let far = prediction_graph(&Tensor::from_rows(&[vec![40.0, 0.0], vec![0.0, 40.0]])).unwrap();
        // softmax rows are (1-e, e) and (e, 1-e) with e = 1/(1+e^40)
        let e = 1.0 / (1.0 + 40f64.exp());
        let expected = 2.0 * e * (1.0 - e) / ((1.0 - e).powi(2) + e * e);
        assert!((far.get(0, 1) - expected).abs() < 1e-20);
        assert!(far.get(0, 1) < 1e-6);

        let uniform = prediction_graph(&Tensor::zeros(&[4, 3])).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((uniform.get(i, j) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn prediction_graph_rejects_non_finite_and_single_class() {
        let bad = Tensor::from_rows(&[vec![f64::INFINITY, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(prediction_graph(&bad), Err(GcrError::Numeric(_))));
        assert!(prediction_graph(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn class_mask_cases() {
        let m = class_mask(&[0, 0, 1]);
        let expect = [[1, 1, 0], [1, 1, 0], [0, 0, 1]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), expect[i][j] == 1);
            }
        }
        let distinct = class_mask(&[0, 1, 2, 3]);
        let equal = class_mask(&[5, 5, 5, 5]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(distinct.get(i, j), i == j);
                assert!(equal.get(i, j));
            }
        }
        assert_eq!(m.hadamard(&m), m);
    }

    #[test]
    fn masking_with_identity_and_all_ones() {
        let s = prediction_graph(&Tensor::from_rows(&[
            vec![0.1, 0.5, -0.2],
            vec![1.0, 0.0, 0.3],
            vec![0.2, 0.2, 0.9],
        ]))
        .unwrap();
        let p = masked_prediction_graph(&s, &class_mask(&[0, 1, 2])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(p.get(i, j), 0.0);
                }
            }
        }
        let p = masked_prediction_graph(&s, &class_mask(&[1, 1, 1])).unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn masking_size_mismatch() {
        let s = prediction_graph(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            masked_prediction_graph(&s, &class_mask(&[0, 1])),
            Err(GcrError::Dimension { .. })
        ));
    }

    #[test]
    fn strict_upper_small_cases() {
        let a = SimilarityMatrix::from_entries(2, vec![1.0, 0.4, 0.4, 1.0]).unwrap();
        assert_eq!(strict_upper(&a).unwrap(), vec![0.4]);
        let a = SimilarityMatrix::from_entries(
            3,
            vec![1.0, 0.1, 0.2, 0.1, 1.0, 0.3, 0.2, 0.3, 1.0],
        )
        .unwrap();
        assert_eq!(strict_upper(&a).unwrap(), vec![0.1, 0.2, 0.3]);
        let one = SimilarityMatrix::from_entries(1, vec![1.0]).unwrap();
        assert!(matches!(strict_upper(&one), Err(GcrError::DegenerateBatch(1))));
    }

    #[test]
    fn kernel_values() {
        let u = [0.0, 0.0];
        let v = [1.0, 1.0];
        let rbf = SimilarityKernel::Rbf { gamma: Some(0.5) };
        assert!((kernel_similarity(&v, &v, &rbf).unwrap() - 1.0).abs() < 1e-15);
        assert!((kernel_similarity(&u, &v, &rbf).unwrap() - (-1.0f64).exp()).abs() < 1e-15);

        let lap = SimilarityKernel::Laplacian { gamma: Some(1e-12) };
        let w = [3.0, -4.0];
        assert!((kernel_similarity(&u, &w, &lap).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kernel_defaults_and_validation() {
        // gamma defaults to 1/d
        let u = [1.0, 0.0, 0.0, 0.0];
        let v = [0.0, 0.0, 0.0, 0.0];
        let got = kernel_similarity(&u, &v, &SimilarityKernel::rbf()).unwrap();
        assert!((got - (-0.25f64).exp()).abs() < 1e-15);

        let bad = SimilarityKernel::Rbf { gamma: Some(0.0) };
        assert!(matches!(kernel_similarity(&u, &u, &bad), Err(GcrError::Config(_))));
        let bad = SimilarityKernel::Polynomial {
            degree: 0,
            offset: 1.0,
        };
        assert!(matches!(kernel_similarity(&u, &u, &bad), Err(GcrError::Config(_))));
    }

    #[test]
    fn clamped_kernels_stay_in_unit_range() {
        let u = [2.0, 3.0];
        let v = [4.0, 1.0];
        for k in [SimilarityKernel::polynomial(), SimilarityKernel::sigmoid()] {
            let s = kernel_similarity(&u, &v, &k).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
        let neg = [-4.0, -1.0];
        assert_eq!(kernel_similarity(&u, &neg, &SimilarityKernel::sigmoid()).unwrap(), 0.0);
    }

    #[test]
    fn kernel_config_parses() {
        let k: SimilarityKernel = serde_json::from_str(r#"{"kind":"rbf","gamma":0.2}"#).unwrap();
        assert_eq!(k, SimilarityKernel::Rbf { gamma: Some(0.2) });
        let k: SimilarityKernel = serde_json::from_str(r#"{"kind":"polynomial"}"#).unwrap();
        assert_eq!(k, SimilarityKernel::polynomial());
        assert!(serde_json::from_str::<SimilarityKernel>(r#"{"kind":"cosine","x":1}"#).is_err());
    }
}

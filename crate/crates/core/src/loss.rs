//! Alignment losses, layer weighting, and the training objective.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, GcrError, Result};
use crate::graphs::{feature_graph, SimilarityKernel, SimilarityMatrix};
use crate::tensor::Tensor;

/// How per-tap alignment losses are weighted before summation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingScheme {
    Equal,
    Linear,
    Squared,
    Sqrt,
    Cosine,
    Arccos,
    Adaptive,
}

impl WeightingScheme {
    pub const ALL: [WeightingScheme; 7] = [
        WeightingScheme::Equal,
        WeightingScheme::Linear,
        WeightingScheme::Squared,
        WeightingScheme::Sqrt,
        WeightingScheme::Cosine,
        WeightingScheme::Arccos,
        WeightingScheme::Adaptive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightingScheme::Equal => "equal",
            WeightingScheme::Linear => "linear",
            WeightingScheme::Squared => "squared",
            WeightingScheme::Sqrt => "sqrt",
            WeightingScheme::Cosine => "cosine",
            WeightingScheme::Arccos => "arccos",
            WeightingScheme::Adaptive => "adaptive",
        }
    }

    pub fn is_fixed(self) -> bool {
        self != WeightingScheme::Adaptive
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightingScheme {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| GcrError::Config(format!("unknown weighting scheme `{s}`")))
    }
}

/// Settings of the graph consistency term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcrConfig {
    /// Layer indices carrying alignment losses, shallowest first.
    pub taps: Vec<usize>,
    pub scheme: WeightingScheme,
    pub kernel: SimilarityKernel,
    pub lambda: f64,
    /// Minimum within-class angle in radians; 0 disables the penalty.
    pub tau: f64,
    pub beta: f64,
    /// Divide each alignment loss by the pair count `n(n-1)/2`.
    pub normalize_pairs: bool,
}

impl GcrConfig {
    pub fn new(taps: Vec<usize>, scheme: WeightingScheme) -> Self {
        Self {
            taps,
            scheme,
            kernel: SimilarityKernel::Cosine {},
            lambda: 1.0,
            tau: 0.0,
            beta: 0.0,
            normalize_pairs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(GcrError::Config("at least one tap is required".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GcrError::Config(format!(
                "taps must be strictly increasing, got {:?}",
                self.taps
            )));
        }
        for (name, v) in [("lambda", self.lambda), ("tau", self.tau), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GcrError::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        self.kernel.validate()
    }

    pub fn penalty_enabled(&self) -> bool {
        self.tau > 0.0 && self.beta > 0.0
    }
}

/// Per-tap alignment losses and the weights applied to them.
#[derive(Debug, Clone)]
pub struct LayerLossBundle {
    pub losses: Vec<Var>,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LayerLossBundle {
    /// Reads loss values from the tape and weights them with `scheme`.
    pub fn weighted(tape: &Tape, losses: Vec<Var>, scheme: WeightingScheme) -> Result<Self> {
        let values: Vec<f64> = losses.iter().map(|&v| tape.value(v).item()).collect();
        let weights = if scheme.is_fixed() {
            fixed_weights(scheme, values.len())?
        } else {
            adaptive_weights(&values)?
        };
        Ok(Self {
            losses,
            values,
            weights,
        })
    }
}

/// `Σ_{i<j} (F_ij - P_ij)²` over plain values.
pub fn alignment_loss_value(f: &SimilarityMatrix, p: &SimilarityMatrix, normalize: bool) -> Result<f64> {
    if f.n() != p.n() {
        return Err(dim_err("layer_alignment_loss", &[f.n(), f.n()], &[p.n(), p.n()]));
    }
    let (fu, pu) = (f.strict_upper()?, p.strict_upper()?);
    let s: f64 = fu.iter().zip(&pu).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(if normalize { s / fu.len() as f64 } else { s })
}

/// Squared distance between the strict upper triangles of a differentiable
/// feature graph and a detached reference graph.
pub fn layer_alignment_loss(
    tape: &mut Tape,
    f: &SimilarityMatrix,
    p: &SimilarityMatrix,
    normalize: bool,
) -> Result<Var> {
    if f.n() != p.n() {
        return Err(dim_err("layer_alignment_loss", &[f.n(), f.n()], &[p.n(), p.n()]));
    }
    let fvar = f.var().ok_or_else(|| {
        GcrError::Contract("alignment loss needs a differentiable feature graph".into())
    })?;
    if p.is_differentiable() {
        return Err(GcrError::Contract("reference graph must be detached".into()));
    }
    let pu = p.strict_upper()?;
    let pairs = pu.len();
    let fu = tape.strict_upper(fvar)?;
    let target = tape.constant(Tensor::vector(pu));
    let diff = tape.sub(fu, target)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    if normalize {
        tape.scale(s, 1.0 / pairs as f64)
    } else {
        Ok(s)
    }
}

/// Depth-based weights for taps `l = 1..=k`.
pub fn fixed_weights(scheme: WeightingScheme, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(GcrError::Contract("need at least one layer".into()));
    }
    let kf = k as f64;
    let w = |l: usize| {
        let r = l as f64 / kf;
        match scheme {
            WeightingScheme::Equal => 1.0 / kf,
            WeightingScheme::Linear => r,
            WeightingScheme::Squared => r * r,
            WeightingScheme::Sqrt => r.sqrt(),
            WeightingScheme::Cosine => (1.0 + (PI * r).cos()) / 2.0,
            WeightingScheme::Arccos => (1.0 - 2.0 * r).clamp(-1.0, 1.0).acos() / PI,
            WeightingScheme::Adaptive => unreachable!(),
        }
    };
    if scheme == WeightingScheme::Adaptive {
        return Err(GcrError::Contract(
            "adaptive weights depend on losses; use adaptive_weights".into(),
        ));
    }
    Ok((1..=k).map(w).collect())
}

/// `softmax(-losses)`, max-shifted. The result is a constant for the step.
pub fn adaptive_weights(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(GcrError::Contract("need at least one layer".into()));
    }
    if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
        return Err(GcrError::Numeric(format!("non-finite layer loss {bad}")));
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = losses.iter().map(|&l| (lo - l).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `Σ_l w_l · loss_l`; weights are constants.
pub fn gcr_total(tape: &mut Tape, bundle: &LayerLossBundle) -> Result<Var> {
    if bundle.losses.len() != bundle.weights.len() || bundle.losses.is_empty() {
        return Err(GcrError::Contract(format!(
            "{} losses but {} weights",
            bundle.losses.len(),
            bundle.weights.len()
        )));
    }
    let mut acc = tape.scale(bundle.losses[0], bundle.weights[0])?;
    for (&l, &w) in bundle.losses.iter().zip(&bundle.weights).skip(1) {
        let term = tape.scale(l, w)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// `ce + lambda · gcr`. With `lambda == 0` the result is `ce` itself, so the
/// regularizer cannot touch any gradient.
pub fn total_loss(tape: &mut Tape, ce: Var, gcr: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(GcrError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    let weighted = tape.scale(gcr, lambda)?;
    tape.add(ce, weighted)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Soft floor on within-class feature angles.
///
/// `beta/ζ · Σ_{i<j, y_i = y_j, θ_ij < τ} (θ_ij - τ)²` with
/// `θ_ij = arccos(max(0, cos(x_i, x_j)))` and `ζ` the number of same-class
/// pairs. Zero when `tau == 0` or there is no same-class pair.
pub fn anti_collapse_penalty(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    tau: f64,
    beta: f64,
) -> Result<Var> {
    if !(tau >= 0.0 && beta >= 0.0) {
        return Err(GcrError::Config(format!(
            "tau and beta must be non-negative, got {tau}, {beta}"
        )));
    }
    let n = labels.len();
    if tape.value(features).rows() != n {
        return Err(dim_err("anti_collapse_penalty", tape.value(features).shape(), &[n]));
    }
    let mut mask = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            mask.push(if labels[i] == labels[j] { 1.0 } else { 0.0 });
        }
    }
    let zeta: f64 = mask.iter().sum();
    if tau == 0.0 || zeta == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let graph = feature_graph(tape, features, SimilarityKernel::Cosine {})?;
    let cos = tape.strict_upper(graph.var().expect("feature graph is differentiable"))?;
    let angle = tape.arccos(cos)?;
    let neg = tape.scale(angle, -1.0)?;
    let gap = tape.shift(neg, tau)?;
    let below = tape.relu(gap)?;
    let sq = tape.square(below)?;
    let mask = tape.constant(Tensor::vector(mask));
    let same = tape.mul(sq, mask)?;
    let s = tape.sum(same)?;
    tape.scale(s, beta / zeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::feature_graph_values;

    fn sm(n: usize, e: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix::from_entries(n, e).unwrap()
    }

    #[test]
    fn alignment_identity_and_single_pair() {
        let f = sm(2, vec![1.0, 0.8, 0.8, 1.0]);
        let p = sm(2, vec![1.0, 0.3, 0.3, 1.0]);
        assert_eq!(alignment_loss_value(&f, &f, false).unwrap(), 0.0);
        assert!((alignment_loss_value(&f, &p, false).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn alignment_needs_differentiable_f_and_detached_p() {
        let mut tape = Tape::new();
        let p = sm(2, vec![1.0, 0.3, 0.3, 1.0]);
        assert!(matches!(
            layer_alignment_loss(&mut tape, &p, &p, false),
            Err(GcrError::Contract(_))
        ));
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![1.0, 1.0]]));
        let f = feature_graph(&mut tape, x, SimilarityKernel::Cosine {}).unwrap();
        assert!(matches!(
            layer_alignment_loss(&mut tape, &f, &p, false),
            Err(GcrError::Dimension { .. })
        ));
    }

    #[test]
    fn normalized_alignment_divides_by_pairs() {
        let mut tape = Tape::new();
        let xv = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![1.0, 1.0]]);
        let x = tape.leaf(xv.clone());
        let f = feature_graph(&mut tape, x, SimilarityKernel::Cosine {}).unwrap();
        let p = sm(3, vec![1.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let raw = layer_alignment_loss(&mut tape, &f, &p, false).unwrap();
        let norm = layer_alignment_loss(&mut tape, &f, &p, true).unwrap();
        let raw = tape.value(raw).item();
        assert!((tape.value(norm).item() - raw / 3.0).abs() < 1e-15);
        let fv = feature_graph_values(&xv, SimilarityKernel::Cosine {}).unwrap();
        assert_eq!(alignment_loss_value(&fv, &p, false).unwrap(), raw);
    }

    #[test]
    fn fixed_weight_closed_forms() {
        assert_eq!(fixed_weights(WeightingScheme::Equal, 4).unwrap(), vec![0.25; 4]);
        assert_eq!(
            fixed_weights(WeightingScheme::Linear, 4).unwrap(),
            vec![0.25, 0.5, 0.75, 1.0]
        );
        let c = fixed_weights(WeightingScheme::Cosine, 2).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15 && c[1].abs() < 1e-15);
        assert_eq!(fixed_weights(WeightingScheme::Arccos, 2).unwrap(), vec![0.5, 1.0]);
        assert_eq!(
            fixed_weights(WeightingScheme::Squared, 2).unwrap(),
            vec![0.25, 1.0]
        );
        assert_eq!(
            fixed_weights(WeightingScheme::Sqrt, 4).unwrap(),
            vec![0.5, 0.5f64.sqrt(), 0.75f64.sqrt(), 1.0]
        );
        assert!(matches!(
            fixed_weights(WeightingScheme::Adaptive, 3),
            Err(GcrError::Contract(_))
        ));
    }

    #[test]
    fn adaptive_weight_cases() {
        assert_eq!(adaptive_weights(&[0.7, 0.7, 0.7]).unwrap(), vec![1.0 / 3.0; 3]);
        let w = adaptive_weights(&[0.0, 2f64.ln()]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(adaptive_weights(&[1.0, f64::NAN]), Err(GcrError::Numeric(_))));
        // large losses stay finite thanks to the shift
        let w = adaptive_weights(&[5000.0, 5001.0]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scheme_names_parse() {
        for s in WeightingScheme::ALL {
            assert_eq!(s.name().parse::<WeightingScheme>().unwrap(), s);
        }
    }

    #[test]
    fn gcr_total_cases() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::scalar(0.7));
        let b = LayerLossBundle::weighted(&tape, vec![l], WeightingScheme::Equal).unwrap();
        let t = gcr_total(&mut tape, &b).unwrap();
        assert_eq!(tape.value(t).item(), 0.7);

        let z = tape.leaf(Tensor::scalar(0.0));
        let b = LayerLossBundle {
            losses: vec![z, z],
            values: vec![0.0, 0.0],
            weights: vec![0.3, 0.7],
        };
        let t = gcr_total(&mut tape, &b).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);

        let bad = LayerLossBundle {
            losses: vec![z],
            values: vec![0.0],
            weights: vec![0.5, 0.5],
        };
        assert!(matches!(gcr_total(&mut tape, &bad), Err(GcrError::Contract(_))));
    }

    #[test]
    fn total_loss_cases() {
        let mut tape = Tape::new();
        let ce = tape.leaf(Tensor::scalar(2.0));
        let gcr = tape.leaf(Tensor::scalar(0.5));
        let t = total_loss(&mut tape, ce, gcr, 3.0).unwrap();
        assert_eq!(tape.value(t).item(), 3.5);
        let t1 = total_loss(&mut tape, ce, gcr, 1.0).unwrap();
        assert_eq!(tape.value(t1).item(), 2.5);
        let t0 = total_loss(&mut tape, ce, gcr, 0.0).unwrap();
        assert_eq!(t0, ce);
        let g = tape.backward(t0).unwrap();
        assert!(g.get(gcr).is_none());
    }

    #[test]
    fn cross_entropy_limits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![40.0, 0.0, 0.0], vec![0.0, 0.0, 40.0]]));
        let ce = cross_entropy(&mut tape, z, &[0, 2]).unwrap();
        assert!(tape.value(ce).item() < 1e-6);

        let u = tape.leaf(Tensor::zeros(&[3, 10]));
        let ce = cross_entropy(&mut tape, u, &[0, 5, 9]).unwrap();
        assert!((tape.value(ce).item() - 10f64.ln()).abs() < 1e-15);

        assert!(matches!(
            cross_entropy(&mut tape, u, &[0, 10, 1]),
            Err(GcrError::Contract(_))
        ));
    }

    #[test]
    fn penalty_zero_tau_and_duplicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]));
        let p0 = anti_collapse_penalty(&mut tape, x, &[0, 0], 0.0, 1.0).unwrap();
        assert_eq!(tape.value(p0).item(), 0.0);
        let p = anti_collapse_penalty(&mut tape, x, &[0, 0], 0.1, 1.0).unwrap();
        // arccos near 1 amplifies the rounding in the cosine
        assert!((tape.value(p).item() - 0.01).abs() < 1e-7);
        let none = anti_collapse_penalty(&mut tape, x, &[0, 1], 0.1, 1.0).unwrap();
        assert_eq!(tape.value(none).item(), 0.0);
    }

    #[test]
    fn penalty_rejects_zero_norm_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]));
        assert!(matches!(
            anti_collapse_penalty(&mut tape, x, &[0, 0], 0.1, 1.0),
            Err(GcrError::ZeroNormRow { row: 1 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = GcrConfig::new(vec![1, 3], WeightingScheme::Adaptive);
        assert!(c.validate().is_ok());
        c.taps = vec![3, 1];
        assert!(c.validate().is_err());
        c.taps = vec![];
        assert!(c.validate().is_err());
        c.taps = vec![0];
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        c.lambda = 1.0;
        c.tau = f64::NAN;
        assert!(c.validate().is_err());
    }
}

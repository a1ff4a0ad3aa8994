//! SGD training loop with the graph consistency objective.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{softmax_rows_raw, Tape, Var};
use crate::data::{batches, BatchPlan, LabeledDataset};
use crate::error::{GcrError, Result};
use crate::graphs::{class_mask, feature_graph, masked_prediction_graph, prediction_graph, SimilarityMatrix};
use crate::loss::{
    adaptive_weights, anti_collapse_penalty, fixed_weights, gcr_total, layer_alignment_loss,
    total_loss, GcrConfig, LayerLossBundle,
};
use crate::model::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub drop_last: bool,
    /// `None` trains with cross-entropy only and never builds a graph.
    pub gcr: Option<GcrConfig>,
    pub seed: u64,
}

impl TrainConfig {
    /// The full-length CNN recipe: 200 epochs, lr 0.1 divided by 5 at
    /// epochs 60/120/160, Nesterov momentum 0.9, weight decay 5e-4,
    /// batch 128.
    pub fn paper(gcr: Option<GcrConfig>, seed: u64) -> Self {
        Self {
            epochs: 200,
            base_lr: 0.1,
            decay_factor: 5.0,
            decay_epochs: vec![60, 120, 160],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            drop_last: false,
            gcr,
            seed,
        }
    }

    /// Same schedule shape compressed to 50 epochs (decay at 20/35/45).
    pub fn desk(gcr: Option<GcrConfig>, seed: u64) -> Self {
        Self {
            epochs: 50,
            decay_epochs: vec![20, 35, 45],
            ..Self::paper(gcr, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GcrError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1])
            || self.decay_epochs.iter().any(|&e| e >= self.epochs)
        {
            return bad(format!(
                "decay epochs must be strictly increasing within [0, {}), got {:?}",
                self.epochs, self.decay_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if let Some(g) = &self.gcr {
            g.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of this config and `net`.
    pub fn hash_with(&self, net: &crate::model::NetworkSpec) -> String {
        let doc = serde_json::json!({ "train": self, "network": net });
        let digest = Sha256::digest(doc.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `base_lr / decay_factor^k` where `k` counts decay epochs `<= epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr / cfg.decay_factor.powi(k as i32)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// One Nesterov step: `g = grad + wd·p; v = μ·v + g; p -= lr·(g + μ·v)`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(GcrError::Contract(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(GcrError::Dimension {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(GcrError::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = gv + weight_decay * *pv;
            *vv = momentum * *vv + g;
            *pv -= lr * (g + momentum * *vv);
        }
    }
    Ok(())
}

/// Reference quantities that are constants of a training step.
#[derive(Debug, Clone)]
pub struct FrozenReference {
    pub prediction_graph: SimilarityMatrix,
    pub weights: Vec<f64>,
}

/// One assembled objective on a tape.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub ce: Var,
    pub logits: Var,
    pub tapped: Vec<Var>,
    /// `Σ w_l · loss_l` before λ, when a GCR config is active.
    pub gcr: Option<Var>,
    pub penalty: Option<Var>,
    pub tap_losses: Vec<f64>,
    pub reference: Option<FrozenReference>,
}

/// Builds cross-entropy plus the optional GCR term for one batch.
///
/// The masked prediction graph is computed once from the batch logits and
/// shared across taps; together with the layer weights it is treated as a
/// constant. Passing `frozen` substitutes those constants, which lets
/// finite differences see the same function the tape differentiates.
pub fn objective(
    tape: &mut Tape,
    net: &Network,
    params: &[Var],
    batch: &Tensor,
    labels: &[usize],
    gcr: Option<&GcrConfig>,
    frozen: Option<&FrozenReference>,
) -> Result<Objective> {
    let x = tape.constant(batch.clone());
    let taps: &[usize] = gcr.map_or(&[], |g| &g.taps);
    let fwd = net.forward_with_taps(tape, params, x, taps)?;
    let ce = tape.cross_entropy(fwd.logits, labels)?;
    let Some(cfg) = gcr else {
        return Ok(Objective {
            total: ce,
            ce,
            logits: fwd.logits,
            tapped: fwd.tapped,
            gcr: None,
            penalty: None,
            tap_losses: Vec::new(),
            reference: None,
        });
    };

    let p = match frozen {
        Some(f) => f.prediction_graph.clone(),
        None => {
            let s = prediction_graph(tape.value(fwd.logits))?;
            masked_prediction_graph(&s, &class_mask(labels))?
        }
    };
    let mut losses = Vec::with_capacity(fwd.tapped.len());
    for &t in &fwd.tapped {
        let f = feature_graph(tape, t, cfg.kernel)?;
        losses.push(layer_alignment_loss(tape, &f, &p, cfg.normalize_pairs)?);
    }
    let tap_losses: Vec<f64> = losses.iter().map(|&v| tape.value(v).item()).collect();
    let weights = match frozen {
        Some(f) => f.weights.clone(),
        None if cfg.scheme.is_fixed() => fixed_weights(cfg.scheme, losses.len())?,
        None => adaptive_weights(&tap_losses)?,
    };
    let bundle = LayerLossBundle {
        losses,
        values: tap_losses.clone(),
        weights: weights.clone(),
    };
    let gcr_var = gcr_total(tape, &bundle)?;

    let mut regularizer = gcr_var;
    let mut penalty = None;
    if cfg.penalty_enabled() {
        let mut acc: Option<Var> = None;
        for &t in &fwd.tapped {
            let term = anti_collapse_penalty(tape, t, labels, cfg.tau, cfg.beta)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let pen = acc.expect("at least one tap");
        regularizer = tape.add(gcr_var, pen)?;
        penalty = Some(pen);
    }
    let total = total_loss(tape, ce, regularizer, cfg.lambda)?;
    Ok(Objective {
        total,
        ce,
        logits: fwd.logits,
        tapped: fwd.tapped,
        gcr: Some(gcr_var),
        penalty,
        tap_losses,
        reference: Some(FrozenReference {
            prediction_graph: p,
            weights,
        }),
    })
}

/// Metrics of one epoch, averaged over its batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    /// `λ · Σ w_l · loss_l`.
    pub gcr: f64,
    /// `λ ·` anti-collapse penalty.
    pub penalty: f64,
    pub tap_losses: Vec<f64>,
    pub tap_weights: Vec<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub taps: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    /// CSV time series with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,ce,gcr,penalty");
        for (k, layer) in self.taps.iter().enumerate() {
            out.push_str(&format!(",tap{k}_l{layer}_loss,tap{k}_l{layer}_weight"));
        }
        out.push_str(",train_acc,test_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?}",
                e.epoch, e.lr, e.loss, e.ce, e.gcr, e.penalty
            ));
            for (l, w) in e.tap_losses.iter().zip(&e.tap_weights) {
                out.push_str(&format!(",{l:?},{w:?}"));
            }
            out.push_str(&format!(",{:?},{:?}\n", e.train_acc, e.test_acc));
        }
        out
    }
}

/// What the observer of [`train_observed`] sees after every step.
#[derive(Debug)]
pub struct StepTrace<'a> {
    pub epoch: usize,
    pub step: usize,
    pub labels: &'a [usize],
    pub logits: &'a Tensor,
    pub tapped: Vec<&'a Tensor>,
    pub tap_losses: &'a [f64],
    pub tap_weights: &'a [f64],
    pub ce: f64,
    /// `Σ w_l · loss_l` before λ; 0 without a GCR config.
    pub gcr: f64,
    pub penalty: f64,
    pub total: f64,
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: GcrError,
    pub partial: RunRecord,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} complete epochs)", self.error, self.partial.epochs.len())
    }
}

impl std::error::Error for TrainFailure {}

pub fn train(
    net: &mut Network,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> std::result::Result<RunRecord, TrainFailure> {
    train_observed(net, train_ds, test_ds, cfg, &mut |_, _| {})
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains `net` in place, calling `observer` after every parameter update.
pub fn train_observed(
    net: &mut Network,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepTrace, &Network),
) -> std::result::Result<RunRecord, TrainFailure> {
    let started = Instant::now();
    let mut record = RunRecord {
        epochs: Vec::new(),
        taps: cfg.gcr.as_ref().map(|g| g.taps.clone()).unwrap_or_default(),
        config_hash: cfg.hash_with(net.spec()),
        seed: cfg.seed,
        wall_time_secs: 0.0,
    };
    let fail = |error: GcrError, record: &RunRecord| TrainFailure {
        error,
        partial: RunRecord {
            wall_time_secs: started.elapsed().as_secs_f64(),
            ..record.clone()
        },
    };
    if let Err(e) = check_setup(net, train_ds, test_ds, cfg) {
        return Err(fail(e, &record));
    }

    let mut state = SgdState::new(net.params());
    let k = record.taps.len();
    let lambda = cfg.gcr.as_ref().map_or(0.0, |g| g.lambda);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: epoch_seed(cfg.seed, epoch),
            drop_last: cfg.drop_last,
        };
        let order = batches(train_ds, &plan).map_err(|e| fail(e, &record))?;
        let mut sums = [0.0f64; 4];
        let mut tap_loss_sum = vec![0.0; k];
        let mut tap_weight_sum = vec![0.0; k];

        for (step, idx) in order.iter().enumerate() {
            let diverged = |reason: String| GcrError::Divergence { epoch, step, reason };
            let (x, y) = train_ds.subset(idx);
            let mut tape = Tape::new();
            let params = net.bind(&mut tape);
            let obj = objective(&mut tape, net, &params, &x, &y, cfg.gcr.as_ref(), None)
                .map_err(|e| fail(diverged(e.to_string()), &record))?;
            let total = tape.value(obj.total).item();
            if !total.is_finite() {
                return Err(fail(diverged(format!("loss is {total}")), &record));
            }
            let grads = tape.backward(obj.total).map_err(|e| fail(e, &record))?;
            let grads: Vec<Tensor> = params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            sgd_step(net.params_mut(), &grads, &mut state, lr, cfg.momentum, cfg.weight_decay)
                .map_err(|e| fail(diverged(e.to_string()), &record))?;

            let ce = tape.value(obj.ce).item();
            let gcr = obj.gcr.map_or(0.0, |v| tape.value(v).item());
            let penalty = obj.penalty.map_or(0.0, |v| tape.value(v).item());
            let weights = obj.reference.as_ref().map_or(&[][..], |r| &r.weights[..]);
            sums[0] += total;
            sums[1] += ce;
            sums[2] += lambda * gcr;
            sums[3] += lambda * penalty;
            for j in 0..k {
                tap_loss_sum[j] += obj.tap_losses[j];
                tap_weight_sum[j] += weights[j];
            }
            let trace = StepTrace {
                epoch,
                step,
                labels: &y,
                logits: tape.value(obj.logits),
                tapped: obj.tapped.iter().map(|&v| tape.value(v)).collect(),
                tap_losses: &obj.tap_losses,
                tap_weights: weights,
                ce,
                gcr,
                penalty,
                total,
            };
            observer(&trace, net);
        }

        let steps = order.len() as f64;
        let train_acc = evaluate(net, train_ds).map_err(|e| fail(e, &record))?.accuracy;
        let test_acc = evaluate(net, test_ds).map_err(|e| fail(e, &record))?.accuracy;
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: sums[0] / steps,
            ce: sums[1] / steps,
            gcr: sums[2] / steps,
            penalty: sums[3] / steps,
            tap_losses: tap_loss_sum.iter().map(|v| v / steps).collect(),
            tap_weights: tap_weight_sum.iter().map(|v| v / steps).collect(),
            train_acc,
            test_acc,
        });
    }
    record.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

fn check_setup(net: &Network, train_ds: &LabeledDataset, test_ds: &LabeledDataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let classes = net.spec().classes;
    for ds in [train_ds, test_ds] {
        if ds.classes > classes {
            return Err(GcrError::Config(format!(
                "dataset has {} classes but the network predicts {classes}",
                ds.classes
            )));
        }
        if ds.input_shape() != net.spec().input.as_slice() {
            return Err(GcrError::Config(format!(
                "dataset inputs {:?} do not match network input {:?}",
                ds.input_shape(),
                net.spec().input
            )));
        }
    }
    if let Some(g) = &cfg.gcr {
        let eligible = net.spec().tap_eligible();
        if let Some(bad) = g.taps.iter().find(|t| !eligible.contains(t)) {
            return Err(GcrError::Config(format!(
                "tap {bad} is not tap-eligible (eligible: {eligible:?})"
            )));
        }
    }
    if cfg.batch_size > train_ds.len() {
        return Err(GcrError::Config(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train_ds.len()
        )));
    }
    Ok(())
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Logits and flattened tap outputs for every row of `features`, computed
/// in chunks.
pub fn infer(net: &Network, features: &Tensor, taps: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
    const CHUNK: usize = 256;
    let n = features.rows();
    let mut logits = Vec::new();
    let mut tapped: Vec<Vec<f64>> = vec![Vec::new(); taps.len()];
    let mut widths = vec![0; taps.len()];
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (l, t) = net.predict(&features.select_rows(&idx), taps)?;
        logits.extend_from_slice(l.data());
        for (j, tt) in t.iter().enumerate() {
            widths[j] = tt.row_len();
            tapped[j].extend_from_slice(tt.data());
        }
        start += CHUNK;
    }
    let logits = Tensor::new(vec![n, net.spec().classes], logits)?;
    let tapped = tapped
        .into_iter()
        .zip(widths)
        .map(|(d, w)| Tensor::new(vec![n, w], d))
        .collect::<Result<Vec<_>>>()?;
    Ok((logits, tapped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_ce: f64,
    pub predictions: Vec<usize>,
    /// Softmax outputs, `N×C`.
    pub probabilities: Tensor,
}

pub fn evaluate(net: &Network, ds: &LabeledDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(GcrError::Contract("cannot evaluate on an empty dataset".into()));
    }
    if ds.classes > net.spec().classes {
        return Err(GcrError::Contract(format!(
            "dataset has {} classes but the network predicts {}",
            ds.classes,
            net.spec().classes
        )));
    }
    let (logits, _) = infer(net, &ds.features, &[])?;
    evaluation_from_logits(&logits, &ds.labels)
}

pub fn evaluation_from_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    let predictions = argmax_rows(logits);
    let probabilities = softmax_rows_raw(logits)?;
    let n = labels.len();
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_ce: ce / n as f64,
        predictions,
        probabilities,
    })
}

//! Acceptance gate: one line per criterion.
//!
//! Correctness criteria abort the run when they fail. The two empirical
//! trend checks (desk-scale accuracy/silhouette and the variance-vs-τ
//! trend) are measured and reported without affecting the exit status.
//! The digit-subset suite runs only when `GCR_IDX_DIR` points at the four
//! IDX files.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use gcr_core::data::load_idx;
use gcr_core::diagnostics::{
    confusion_matrix, intra_inter_variance, normalized_laplacian, separability_ratio, silhouette,
    spectral_alignment_check, DiagonalConvention,
};
use gcr_core::gradcheck::check_objective;
use gcr_core::graphs::{class_mask, feature_graph_values, masked_prediction_graph, prediction_graph};
use gcr_core::loss::{adaptive_weights, alignment_loss_value, fixed_weights};
use gcr_core::model::resolve_taps;
use gcr_core::train::{infer, objective, train_observed};
use gcr_core::{
    gaussian_blobs, train, GcrConfig, LabeledDataset, Network, NetworkSpec, SimilarityKernel, SimilarityMatrix,
    Tape, TapPlacement, Tensor, TrainConfig, WeightingScheme,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: &str, gating: bool, f: impl FnOnce() -> Option<Outcome>) -> bool {
    let start = Instant::now();
    let result = f();
    let secs = start.elapsed().as_secs_f64();
    match result {
        None => {
            println!("criterion {id}: SKIP ({secs:.1}s)");
            true
        }
        Some(o) => {
            let tag = if o.pass { "PASS" } else { "FAIL" };
            let note = if gating { "" } else { " [reported]" };
            println!("criterion {id}: {tag}{note} ({secs:.1}s) {}", o.detail);
            o.pass || !gating
        }
    }
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

fn gradient_correctness() -> Option<Outcome> {
    let start = Instant::now();
    let spec = NetworkSpec::mlp(&[2, 16, 16, 4], 11);
    let net = Network::build(spec.clone()).unwrap();
    let mut gcr = GcrConfig::new(resolve_taps(&spec, TapPlacement::Full).unwrap(), WeightingScheme::Adaptive);
    gcr.tau = 0.1;
    gcr.beta = 0.3;
    // rows 0 and 4 are a near-duplicate same-class pair so the penalty is active
    let x = Tensor::from_rows(&[
        vec![1.0, 0.5],
        vec![-0.8, 0.9],
        vec![0.3, -1.2],
        vec![-1.1, -0.4],
        vec![1.0, 0.52],
        vec![-0.6, 1.1],
        vec![0.5, -0.9],
        vec![-0.9, -0.7],
    ]);
    let labels = [0usize, 1, 2, 3, 0, 1, 2, 3];
    let mut tape = Tape::new();
    let params = net.bind_constant(&mut tape);
    let obj = objective(&mut tape, &net, &params, &x, &labels, Some(&gcr), None).unwrap();
    let pen = tape.value(obj.penalty.unwrap()).item();
    let checks = check_objective(&net, &x, &labels, Some(&gcr), 1e-5, None).unwrap();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let coords: usize = checks.iter().map(|c| c.shape.iter().product::<usize>()).sum();
    Some(outcome(
        worst < 1e-4 && pen > 0.0 && within(start, Duration::from_secs(60)),
        format!("max rel error {worst:.2e} over {coords} coordinates; penalty {pen:.3e}"),
    ))
}

fn oracle_equivalence() -> Option<Outcome> {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst = [0.0f64; 8];
    for _ in 0..100 {
        let c = r.random_range(2..=4);
        let n = r.random_range(2 * c..=16);
        let d = r.random_range(1..=8);
        let x = random_tensor(&mut r, &[n, d], -1.0, 1.0);
        let z = random_tensor(&mut r, &[n, c], -3.0, 3.0);
        let y = covering_labels(&mut r, n, c);
        let (xr, zr) = (rows(&x), rows(&z));

        let f = feature_graph_values(&x, SimilarityKernel::Cosine {}).unwrap();
        let s = prediction_graph(&z).unwrap();
        let p = masked_prediction_graph(&s, &class_mask(&y)).unwrap();
        let (fo, so) = (cosine_graph(&xr), common::prediction_graph(&zr));
        let po = masked(&so, &y);
        worst[0] = worst[0].max(max_diff(&to_matrix(n, f.entries()), &fo));
        worst[1] = worst[1].max(max_diff(&to_matrix(n, s.entries()), &so));
        worst[2] = worst[2].max(max_diff(&to_matrix(n, p.entries()), &po));
        worst[3] = worst[3].max((alignment_loss_value(&f, &p, false).unwrap() - alignment(&fo, &po)).abs());
        worst[4] = worst[4].max((silhouette(&x, &y).unwrap() - common::silhouette(&xr, &y)).abs());
        worst[5] = worst[5].max((separability_ratio(&x, &y).unwrap().ratio - separability(&xr, &y)).abs());
        let preds = random_labels(&mut r, n, c);
        let cm = confusion_matrix(&preds, &y, c).unwrap();
        worst[6] = worst[6].max(max_diff(&rows(&cm.matrix), &confusion(&preds, &y, c)));
        let l = normalized_laplacian(&f, DiagonalConvention::Include).unwrap();
        worst[7] = worst[7].max(max_diff(&rows(&l), &common::normalized_laplacian(&fo)));
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    Some(outcome(
        max < 1e-10 && within(start, Duration::from_secs(30)),
        format!("100 instances x 8 functions, max deviation {max:.2e}"),
    ))
}

fn blobs_split(sigma: f64, per_class: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
    gaussian_blobs(4, per_class, 2, sigma, seed).unwrap().stratified_split(0.3, seed).unwrap()
}

fn lambda_gating() -> Option<Outcome> {
    let (tr, te) = blobs_split(1.0, 100, 5);
    let spec = NetworkSpec::mlp(&[2, 16, 16, 4], 5);
    let run = |gcr: Option<GcrConfig>| {
        let mut net = Network::build(spec.clone()).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 32, decay_epochs: vec![2, 4], ..TrainConfig::desk(gcr, 5) };
        let mut traj: Vec<Vec<u64>> = Vec::new();
        train_observed(&mut net, &tr, &te, &cfg, &mut |_, n| {
            traj.push(n.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect());
        })
        .unwrap();
        traj
    };
    let mut gcr = GcrConfig::new(resolve_taps(&spec, TapPlacement::Full).unwrap(), WeightingScheme::Adaptive);
    gcr.lambda = 0.0;
    gcr.tau = 0.1;
    gcr.beta = 0.3;
    let (a, b) = (run(Some(gcr)), run(None));
    Some(outcome(a == b && !a.is_empty(), format!("{} updates compared bitwise", a.len())))
}

fn weighting_identities() -> Option<Outcome> {
    let mut ok = fixed_weights(WeightingScheme::Equal, 4).unwrap() == [0.25; 4]
        && fixed_weights(WeightingScheme::Linear, 4).unwrap() == [0.25, 0.5, 0.75, 1.0]
        && fixed_weights(WeightingScheme::Arccos, 2).unwrap() == [0.5, 1.0];
    let cos = fixed_weights(WeightingScheme::Cosine, 2).unwrap();
    ok &= (cos[0] - 0.5).abs() < 1e-15 && cos[1] == 0.0;
    let mut r = rng(4);
    for _ in 0..200 {
        let k = r.random_range(1..8);
        let losses: Vec<f64> = (0..k).map(|_| r.random_range(0.0..20.0)).collect();
        let w = adaptive_weights(&losses).unwrap();
        ok &= (w.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        for i in 0..k {
            for j in 0..k {
                if losses[i] < losses[j] {
                    ok &= w[i] > w[j];
                }
            }
        }
        let same = adaptive_weights(&vec![losses[0]; k]).unwrap();
        ok &= same.iter().all(|v| (v - 1.0 / k as f64).abs() < 1e-12);
    }
    Some(outcome(ok, "closed forms exact; adaptive sums, uniformity, ordering over 200 draws"))
}

const TREND_SIGMA: f64 = 1.3;
const TREND_SEEDS: u64 = 10;

/// Test accuracy and penultimate-feature silhouette for one desk-preset run.
fn desk_run(gcr: Option<GcrConfig>, spec: &NetworkSpec, tr: &LabeledDataset, te: &LabeledDataset, seed: u64) -> (f64, f64) {
    let mut net = Network::build(NetworkSpec { seed, ..spec.clone() }).unwrap();
    let rec = train(&mut net, tr, te, &TrainConfig::desk(gcr, seed)).unwrap();
    let layer = *spec.tap_eligible().last().unwrap();
    let (_, feats) = infer(&net, &te.features, &[layer]).unwrap();
    (rec.final_test_acc().unwrap(), silhouette(&feats[0], &te.labels).unwrap())
}

fn desk_trend() -> Option<Outcome> {
    let start = Instant::now();
    let (tr, te) = blobs_split(TREND_SIGMA, 250, 0);
    let spec = NetworkSpec::mlp(&[2, 64, 64, 4], 0);
    let mut gcr = GcrConfig::new(resolve_taps(&spec, TapPlacement::Late).unwrap(), WeightingScheme::Adaptive);
    gcr.normalize_pairs = true;
    let (mut base, mut reg) = (Vec::new(), Vec::new());
    for seed in 0..TREND_SEEDS {
        base.push(desk_run(None, &spec, &tr, &te, seed));
        reg.push(desk_run(Some(gcr.clone()), &spec, &tr, &te, seed));
    }
    let mean = |v: &[(f64, f64)]| v.iter().map(|p| p.0).sum::<f64>() / v.len() as f64;
    let (mb, mr) = (mean(&base), mean(&reg));
    let wins = base.iter().zip(&reg).filter(|(b, g)| g.1 > b.1).count();
    let in_band = (0.85..=0.92).contains(&mb);
    let pass = in_band && mr >= mb && wins >= 8 && within(start, Duration::from_secs(300));
    Some(outcome(
        pass,
        format!(
            "sigma {TREND_SIGMA}: baseline {:.2}% (band {}), late-GCL {:.2}%, silhouette higher in {wins}/{TREND_SEEDS}",
            100.0 * mb,
            if in_band { "ok" } else { "missed" },
            100.0 * mr
        ),
    ))
}

fn structural_invariants() -> Option<Outcome> {
    let mut r = rng(6);
    let mut ok = true;
    for _ in 0..200 {
        let c = r.random_range(2..=4);
        let n = r.random_range(2 * c..=16);
        let d = r.random_range(1..=8);
        let x = random_tensor(&mut r, &[n, d], -1.0, 1.0);
        let z = random_tensor(&mut r, &[n, c], -3.0, 3.0);
        let y = covering_labels(&mut r, n, c);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let loss = |x: &Tensor, z: &Tensor, y: &[usize]| {
            let f = feature_graph_values(x, SimilarityKernel::Cosine {}).unwrap();
            let p = masked_prediction_graph(&prediction_graph(z).unwrap(), &class_mask(y)).unwrap();
            alignment_loss_value(&f, &p, false).unwrap()
        };
        ok &= (loss(&x, &z, &y) - loss(&x.select_rows(&perm), &z.select_rows(&perm), &yp)).abs() < 1e-12;

        let p = masked_prediction_graph(&prediction_graph(&z).unwrap(), &class_mask(&y)).unwrap();
        for i in 0..n {
            for j in 0..n {
                if y[i] != y[j] {
                    ok &= p.get(i, j) == 0.0;
                }
            }
        }

        let mut scaled = x.clone();
        for (k, v) in scaled.data_mut().iter_mut().enumerate() {
            *v *= 0.1 + (k / d) as f64;
        }
        let a = feature_graph_values(&x, SimilarityKernel::Cosine {}).unwrap();
        let b = feature_graph_values(&scaled, SimilarityKernel::Cosine {}).unwrap();
        ok &= a.entries().iter().zip(b.entries()).all(|(u, v)| (u - v).abs() < 1e-12);

        let s = silhouette(&x, &y).unwrap();
        ok &= (-1.0..=1.0).contains(&s);

        let l = normalized_laplacian(&a, DiagonalConvention::Include).unwrap();
        let eig = nalgebra::DMatrix::from_row_slice(n, n, l.data()).symmetric_eigen();
        ok &= eig.eigenvalues.iter().all(|&e| (-1e-9..=2.0 + 1e-9).contains(&e));
    }
    Some(outcome(ok, "200 random batches; property suite runs separately"))
}

fn spectral_check() -> Option<Outcome> {
    let mut r = rng(7);
    let mut ok = true;
    let mut max_ratio: f64 = 0.0;
    let mut min_bound = f64::INFINITY;
    for seed in 0..20 {
        let z = random_tensor(&mut r, &[16, 4], -3.0, 3.0);
        let y = covering_labels(&mut r, 16, 4);
        let p: SimilarityMatrix = masked_prediction_graph(&prediction_graph(&z).unwrap(), &class_mask(&y)).unwrap();
        let s = spectral_alignment_check(&p, &p, &[0.0, 1e-3, 1e-2, 1e-1], seed).unwrap();
        ok &= s.points[0].laplacian_residual == 0.0 && s.monotone() && s.within_bound();
        ok &= s.points[1..].iter().all(|pt| pt.laplacian_residual > 0.0);
        max_ratio = s.points.iter().map(|pt| pt.ratio).fold(max_ratio, f64::max);
        min_bound = min_bound.min(s.bound);
    }
    Some(outcome(ok, format!("20 graphs; largest residual/eps {max_ratio:.3}, smallest bound {min_bound:.3}")))
}

const TAUS: [f64; 3] = [0.0, 0.05, 0.2];

/// Penalty values on a batch with exact same-class duplicates.
fn penalty_values() -> Option<Outcome> {
    let mut r = rng(8);
    let base = random_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let x = base.select_rows(&[0, 1, 2, 3, 0, 1]);
    let y = [0usize, 1, 2, 3, 0, 1];
    let pen = |tau: f64| {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let p = gcr_core::loss::anti_collapse_penalty(&mut t, v, &y, tau, 0.3).unwrap();
        t.value(p).item()
    };
    let (p0, p1) = (pen(0.0), pen(0.05));
    Some(outcome(p0 == 0.0 && p1 > 0.0, format!("tau 0 -> {p0:e}, tau 0.05 -> {p1:.3e}")))
}

fn variance_trend() -> Option<Outcome> {
    let (tr, te) = blobs_split(TREND_SIGMA, 250, 0);
    let spec = NetworkSpec::mlp(&[2, 64, 64, 4], 0);
    let taps = resolve_taps(&spec, TapPlacement::Late).unwrap();
    let mut means = Vec::new();
    for tau in TAUS {
        let mut total = 0.0;
        for seed in 0..5 {
            let mut gcr = GcrConfig::new(taps.clone(), WeightingScheme::Adaptive);
            gcr.normalize_pairs = true;
            gcr.tau = tau;
            gcr.beta = 0.3;
            let mut net = Network::build(NetworkSpec { seed, ..spec.clone() }).unwrap();
            train(&mut net, &tr, &te, &TrainConfig::desk(Some(gcr), seed)).unwrap();
            let (_, feats) = infer(&net, &te.features, &taps).unwrap();
            total += intra_inter_variance(&feats[0], &te.labels).unwrap().intra;
        }
        means.push(total / 5.0);
    }
    Some(outcome(
        means.windows(2).all(|w| w[0] <= w[1]),
        format!("mean intra-class variance at tau {TAUS:?}: {means:.4?}"),
    ))
}

fn digit_subset() -> Option<Outcome> {
    let dir = std::env::var_os("GCR_IDX_DIR")?;
    let dir = Path::new(&dir);
    let load = |img: &str, lbl: &str, limit: usize| {
        load_idx(&dir.join(img), &dir.join(lbl)).and_then(|d| d.truncated(limit)).unwrap()
    };
    let tr = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 2000);
    let te = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 1000);
    let spec = NetworkSpec::small_convnet(28, 28, 10, 0);
    let taps = resolve_taps(&spec, TapPlacement::Late).unwrap();
    let cfg = |gcr: Option<GcrConfig>, seed| TrainConfig { epochs: 20, decay_epochs: vec![8, 14, 18], ..TrainConfig::desk(gcr, seed) };
    let (mut base, mut reg) = (0.0, 0.0);
    for seed in 0..5 {
        let mut gcr = GcrConfig::new(taps.clone(), WeightingScheme::Adaptive);
        gcr.normalize_pairs = true;
        for (acc, g) in [(&mut base, None), (&mut reg, Some(gcr))] {
            let mut net = Network::build(NetworkSpec { seed, ..spec.clone() }).unwrap();
            *acc += train(&mut net, &tr, &te, &cfg(g, seed)).unwrap().final_test_acc().unwrap() / 5.0;
        }
    }
    Some(outcome(reg >= base, format!("baseline {:.2}%, late-GCL {:.2}%", 100.0 * base, 100.0 * reg)))
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a filter that
    // excludes this target is honoured.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let mut ok = true;
    ok &= report("1 gradient correctness", true, gradient_correctness);
    ok &= report("2 oracle equivalence", true, oracle_equivalence);
    ok &= report("3 lambda gating", true, lambda_gating);
    ok &= report("4 weighting identities", true, weighting_identities);
    ok &= report("5 desk-scale trend", false, desk_trend);
    ok &= report("6 structural invariants", true, structural_invariants);
    ok &= report("7 spectral check", true, spectral_check);
    ok &= report("8a/b anti-collapse penalty values", true, penalty_values);
    ok &= report("8c intra-class variance vs tau", false, variance_trend);
    ok &= report("9 digit subset (GCR_IDX_DIR)", true, digit_subset);
    if !ok {
        std::process::exit(1);
    }
}

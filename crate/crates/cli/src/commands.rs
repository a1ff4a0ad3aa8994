use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use gcr_core::data::{write_csv, LabeledDataset};
use gcr_core::diagnostics::{diagnose, evaluation_batch, export_graph, GraphDocument};
use gcr_core::gradcheck::check_objective;
use gcr_core::graphs::{class_mask, feature_graph_values, masked_prediction_graph, prediction_graph, SimilarityMatrix};
use gcr_core::model::TapPlacement;
use gcr_core::train::{infer, TrainFailure};
use gcr_core::{GcrError, Network, OpKind, RunRecord, WeightingScheme};

use crate::manifest::{config_err, GcrDoc, Manifest, Preset};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_DIVERGED: u8 = 3;

/// Options shared by the training commands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub preset: Option<Preset>,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    seed: u64,
    status: &'a str,
    error: Option<String>,
    config_hash: &'a str,
    taps: &'a [usize],
    epochs_completed: usize,
    final_train_acc: Option<f64>,
    final_test_acc: Option<f64>,
}

struct CellResult {
    seed: u64,
    test_acc: Option<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn output_root(opts: &RunOptions, m: &Manifest) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| m.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn pool(workers: usize) -> anyhow::Result<rayon::ThreadPool> {
    if workers == 0 {
        bail!(config_err("--workers must be at least 1"));
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

/// Trains one seed and writes its record, summary and checkpoint to `dir`.
fn run_cell(
    m: &Manifest,
    gcr_doc: Option<&GcrDoc>,
    preset: Option<Preset>,
    data: &(LabeledDataset, LabeledDataset),
    seed: u64,
    dir: &Path,
) -> anyhow::Result<CellResult> {
    let spec = m.network_spec(seed)?;
    let gcr = gcr_doc.map(|g| g.resolve(&spec)).transpose()?;
    let cfg = m.train_config(preset, seed, gcr)?;
    let mut net = Network::build(spec).map_err(|e| config_err(e.to_string()))?;
    let outcome = gcr_core::train(&mut net, &data.0, &data.1, &cfg);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (record, error): (&RunRecord, Option<&GcrError>) = match &outcome {
        Ok(r) => (r, None),
        Err(TrainFailure { error, partial }) => (partial, Some(error)),
    };
    fs::write(dir.join("record.csv"), record.to_csv())?;
    let last = record.epochs.last();
    let summary = RunSummary {
        seed,
        status: match error {
            None => "ok",
            Some(GcrError::Divergence { .. }) => "diverged",
            Some(_) => "failed",
        },
        error: error.map(ToString::to_string),
        config_hash: &record.config_hash,
        taps: &record.taps,
        epochs_completed: record.epochs.len(),
        final_train_acc: last.map(|e| e.train_acc),
        final_test_acc: last.map(|e| e.test_acc),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match outcome {
        Ok(r) => {
            write_json(&dir.join("checkpoint.json"), &net)?;
            Ok(CellResult { seed, test_acc: r.final_test_acc() })
        }
        Err(f) => match f.error {
            e @ GcrError::Divergence { .. } => {
                eprintln!("seed {seed}: {e}");
                Ok(CellResult { seed, test_acc: None })
            }
            GcrError::Config(msg) => Err(config_err(msg)),
            e => Err(e.into()),
        },
    }
}

pub fn cmd_train(opts: &RunOptions) -> anyhow::Result<u8> {
    let (m, _) = Manifest::load(&opts.config)?;
    let seeds = m.seeds(opts.seeds.as_deref());
    let root = output_root(opts, &m);
    let data = m.datasets()?;
    // validate the regularizer section before spending time on training
    m.gcr_config(&m.network_spec(seeds[0])?)?;
    fs::create_dir_all(&root)?;
    fs::copy(&opts.config, root.join("manifest.toml"))?;

    let results: Vec<anyhow::Result<CellResult>> = pool(opts.workers)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_cell(&m, m.gcr.as_ref(), opts.preset, &data, s, &root.join(format!("seed-{s}"))))
            .collect()
    });
    let mut table = String::from("seed,status,final_test_acc\n");
    let mut diverged = false;
    for r in results {
        let r = r?;
        match r.test_acc {
            Some(acc) => {
                println!("seed {}: test accuracy {:.4}", r.seed, acc);
                table.push_str(&format!("{},ok,{acc:?}\n", r.seed));
            }
            None => {
                diverged = true;
                table.push_str(&format!("{},diverged,\n", r.seed));
            }
        }
    }
    fs::write(root.join("runs.csv"), table)?;
    Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Placement,
    Scheme,
    Lambda,
}

/// One sweep value: its display label and the regularizer it produces.
fn sweep_cells(m: &Manifest, axis: Axis, values: Option<&[String]>) -> anyhow::Result<Vec<(String, GcrDoc)>> {
    let mut base = m.gcr.clone().unwrap_or_default();
    let parse_err = |v: &str, e: String| config_err(format!("bad {axis:?} value `{v}`: {e}"));
    let raw: Vec<String> = match values {
        Some(v) => v.to_vec(),
        None => match axis {
            Axis::Placement => TapPlacement::ALL.iter().map(|p| p.label().to_string()).collect(),
            Axis::Scheme => WeightingScheme::ALL.iter().map(|s| s.name().to_string()).collect(),
            Axis::Lambda => vec!["0".into(), "0.5".into(), "1".into()],
        },
    };
    if axis != Axis::Placement && base.placement.is_none() && base.taps.is_none() {
        base.placement = Some(TapPlacement::Late);
    }
    raw.iter()
        .map(|v| {
            let mut doc = base.clone();
            let label = match axis {
                Axis::Placement => {
                    let p: TapPlacement = v.parse().map_err(|e: GcrError| parse_err(v, e.to_string()))?;
                    doc.placement = Some(p);
                    doc.taps = None;
                    p.label().to_string()
                }
                Axis::Scheme => {
                    let s: WeightingScheme = v.parse().map_err(|e: GcrError| parse_err(v, e.to_string()))?;
                    doc.scheme = s;
                    s.name().to_string()
                }
                Axis::Lambda => {
                    let l: f64 = v.parse().map_err(|e: std::num::ParseFloatError| parse_err(v, e.to_string()))?;
                    if !(l >= 0.0 && l.is_finite()) {
                        return Err(parse_err(v, "lambda must be finite and non-negative".into()));
                    }
                    doc.lambda = l;
                    v.clone()
                }
            };
            Ok((label, doc))
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_sweep(opts: &RunOptions, axis: Axis, values: Option<&[String]>) -> anyhow::Result<u8> {
    let (m, _) = Manifest::load(&opts.config)?;
    let seeds = m.seeds(opts.seeds.as_deref());
    let root = output_root(opts, &m);
    let data = m.datasets()?;
    let cells = sweep_cells(&m, axis, values)?;
    let spec = m.network_spec(seeds[0])?;
    for (_, doc) in &cells {
        doc.resolve(&spec)?;
    }
    fs::create_dir_all(&root)?;
    fs::copy(&opts.config, root.join("manifest.toml"))?;

    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let axis_name = format!("{axis:?}").to_lowercase();
    let results: Vec<(usize, anyhow::Result<CellResult>)> = pool(opts.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| {
                let (label, doc) = &cells[c];
                let dir = root.join(format!("{axis_name}-{label}")).join(format!("seed-{s}"));
                (c, run_cell(&m, Some(doc), opts.preset, &data, s, &dir))
            })
            .collect()
    });

    let mut table = String::from("value,mean_acc,std_acc,n_ok,n_failed\n");
    let mut any_failed = false;
    for (c, (label, _)) in cells.iter().enumerate() {
        let mut accs = Vec::new();
        let mut failed = 0;
        for (_, r) in results.iter().filter(|(i, _)| *i == c) {
            match r {
                Ok(CellResult { test_acc: Some(a), .. }) => accs.push(*a),
                Ok(_) => failed += 1,
                Err(e) => {
                    eprintln!("{axis_name}={label}: {e:#}");
                    failed += 1;
                }
            }
        }
        any_failed |= failed > 0;
        let (mean, std) = mean_std(&accs);
        println!("{axis_name}={label}: {mean:.4} ± {std:.4} ({} ok, {failed} failed)", accs.len());
        table.push_str(&format!("{label},{mean:?},{std:?},{},{failed}\n", accs.len()));
    }
    fs::write(root.join(format!("sweep-{axis_name}.csv")), table)?;
    Ok(if any_failed { EXIT_DIVERGED } else { EXIT_OK })
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<Network> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let raw: Network = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Network::from_parts(raw.spec().clone(), raw.params().to_vec()).map_err(|e| config_err(e.to_string()))
}

fn check_compatible(net: &Network, ds: &LabeledDataset) -> anyhow::Result<()> {
    if ds.input_shape() != net.spec().input.as_slice() || ds.classes > net.spec().classes {
        bail!(config_err(format!(
            "checkpoint expects inputs {:?} with {} classes; dataset has {:?} with {}",
            net.spec().input,
            net.spec().classes,
            ds.input_shape(),
            ds.classes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GraphOptions {
    pub batch: usize,
    pub seed: u64,
    pub threshold: f64,
    pub dot: bool,
}

fn write_graph(a: &SimilarityMatrix, labels: &[usize], opts: &GraphOptions, path: &Path) -> anyhow::Result<GraphDocument> {
    let doc = export_graph(a, labels, opts.threshold, path).with_context(|| format!("writing {}", path.display()))?;
    if opts.dot {
        fs::write(path.with_extension("dot"), doc.to_dot())?;
    }
    Ok(doc)
}

pub fn cmd_diagnose(config: &Path, checkpoint: &Path, out: &Path, graph: &GraphOptions) -> anyhow::Result<u8> {
    let net = load_checkpoint(checkpoint)?;
    let (m, _) = Manifest::load(config)?;
    let (_, test) = m.datasets()?;
    check_compatible(&net, &test)?;
    let (report, f, p, labels) = diagnose(&net, &test, graph.batch, graph.seed)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("diagnostics.json"), &report)?;
    fs::write(out.join("diagnostics.csv"), report.to_csv())?;
    write_graph(&f, &labels, graph, &out.join("feature_graph.json"))?;
    write_graph(&p, &labels, graph, &out.join("prediction_graph.json"))?;

    let layer = report.feature_layer;
    let (_, tapped) = infer(&net, &test.features, &[layer])?;
    let penultimate = LabeledDataset::new(
        tapped.into_iter().next().expect("one tap requested"),
        test.labels.clone(),
        test.classes,
        format!("layer {layer} of {}", test.provenance),
    )?;
    write_csv(&penultimate, &out.join(format!("features_l{layer}.csv")))?;
    println!(
        "accuracy {:.4}  silhouette {:.4}  sep_ratio {:.4}  confidence {:.4}",
        report.accuracy, report.silhouette, report.separability.ratio, report.mean_confidence
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GraphKind {
    Feature,
    Prediction,
    Masked,
}

pub fn cmd_export_graph(
    config: &Path,
    checkpoint: &Path,
    kind: GraphKind,
    layer: Option<usize>,
    out: &Path,
    graph: &GraphOptions,
) -> anyhow::Result<u8> {
    let net = load_checkpoint(checkpoint)?;
    let (m, _) = Manifest::load(config)?;
    let (_, test) = m.datasets()?;
    check_compatible(&net, &test)?;
    let eligible = net.spec().tap_eligible();
    let layer = match layer {
        Some(l) if eligible.contains(&l) => l,
        Some(l) => bail!(config_err(format!("layer {l} is not tap-eligible (eligible: {eligible:?})"))),
        None => *eligible.last().ok_or_else(|| config_err("network has no tap-eligible layer"))?,
    };
    let idx = evaluation_batch(test.len(), graph.batch, graph.seed);
    let (x, labels) = test.subset(&idx);
    let (logits, tapped) = net.predict(&x, &[layer])?;
    let a = match kind {
        GraphKind::Feature => feature_graph_values(&tapped[0], m.gcr.as_ref().map(|g| g.kernel).unwrap_or_default())?,
        GraphKind::Prediction => prediction_graph(&logits)?,
        GraphKind::Masked => masked_prediction_graph(&prediction_graph(&logits)?, &class_mask(&labels))?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let doc = write_graph(&a, &labels, graph, out)?;
    println!("{} nodes, {} edges at threshold {}", doc.nodes.len(), doc.edges.len(), doc.threshold);
    Ok(EXIT_OK)
}

pub const GRADCHECK_MAX_PARAMS: usize = 10_000;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn cmd_gradcheck(
    opts: &RunOptions,
    batch: usize,
    eps: f64,
    corrupt: Option<OpKind>,
) -> anyhow::Result<u8> {
    let (m, _) = Manifest::load(&opts.config)?;
    let seed = m.seeds(opts.seeds.as_deref())[0];
    let spec = m.network_spec(seed)?;
    let count = spec.param_count();
    if count > GRADCHECK_MAX_PARAMS {
        bail!(config_err(format!(
            "network has {count} parameters; gradient checking is limited to {GRADCHECK_MAX_PARAMS}"
        )));
    }
    let gcr = m.gcr_config(&spec)?;
    let net = Network::build(spec).map_err(|e| config_err(e.to_string()))?;
    let (train, _) = m.datasets()?;
    let idx = evaluation_batch(train.len(), batch, seed);
    let (x, y) = train.subset(&idx);
    let checks = check_objective(&net, &x, &y, gcr.as_ref(), eps, corrupt)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "param {} {:?}: max relative error {:.3e} at {} [{}]",
            c.index,
            c.shape,
            c.max_rel_error,
            c.worst,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Exit code for an error escaping a command.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GcrError>() {
        Some(GcrError::Divergence { .. }) => EXIT_DIVERGED,
        _ => 2,
    }
}

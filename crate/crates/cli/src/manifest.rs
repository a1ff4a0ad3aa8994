//! Run manifest: a TOML document describing network, data, schedule and
//! regularizer. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use gcr_core::data::{gaussian_blobs, load_csv, load_idx, two_rings, LabeledDataset};
use gcr_core::graphs::SimilarityKernel;
use gcr_core::model::{resolve_taps, LayerSpec, NetworkSpec, TapPlacement};
use gcr_core::{GcrConfig, TrainConfig, WeightingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub preset: Option<Preset>,
    pub network: NetworkDoc,
    pub dataset: DatasetDoc,
    #[serde(default)]
    pub train: TrainDoc,
    #[serde(default)]
    pub gcr: Option<GcrDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NetworkDoc {
    Mlp { widths: Vec<usize> },
    Convnet { height: usize, width: usize, classes: usize },
    Custom { input: Vec<usize>, layers: Vec<LayerSpec>, classes: usize },
}

fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetDoc {
    Blobs {
        classes: usize,
        per_class: usize,
        dims: usize,
        sigma: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Rings {
        per_class: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

/// Schedule fields; any that are absent come from the preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDoc {
    pub epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub drop_last: Option<bool>,
}

fn default_scheme() -> WeightingScheme {
    WeightingScheme::Adaptive
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcrDoc {
    #[serde(default)]
    pub placement: Option<TapPlacement>,
    #[serde(default)]
    pub taps: Option<Vec<usize>>,
    #[serde(default = "default_scheme")]
    pub scheme: WeightingScheme,
    #[serde(default)]
    pub kernel: SimilarityKernel,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub normalize_pairs: bool,
}

impl Default for GcrDoc {
    fn default() -> Self {
        Self {
            placement: None,
            taps: None,
            scheme: default_scheme(),
            kernel: SimilarityKernel::default(),
            lambda: 1.0,
            tau: 0.0,
            beta: 0.0,
            normalize_pairs: false,
        }
    }
}

/// A configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut m: Manifest = toml::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.dataset.rebase(&base);
        m.dataset.check_files()?;
        Ok((m, base))
    }

    pub fn network_spec(&self, seed: u64) -> anyhow::Result<NetworkSpec> {
        let spec = match &self.network {
            NetworkDoc::Mlp { widths } => {
                if widths.len() < 2 {
                    return Err(config_err("mlp widths need at least an input and an output"));
                }
                NetworkSpec::mlp(widths, seed)
            }
            NetworkDoc::Convnet { height, width, classes } => {
                NetworkSpec::small_convnet(*height, *width, *classes, seed)
            }
            NetworkDoc::Custom { input, layers, classes } => NetworkSpec {
                input: input.clone(),
                layers: layers.clone(),
                classes: *classes,
                seed,
            },
        };
        spec.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(spec)
    }

    pub fn datasets(&self) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
        self.dataset.materialize()
    }

    pub fn train_config(&self, preset: Option<Preset>, seed: u64, gcr: Option<GcrConfig>) -> anyhow::Result<TrainConfig> {
        let base = match preset.or(self.preset).unwrap_or(Preset::Desk) {
            Preset::Desk => TrainConfig::desk(gcr, seed),
            Preset::Paper => TrainConfig::paper(gcr, seed),
        };
        let t = &self.train;
        let cfg = TrainConfig {
            epochs: t.epochs.unwrap_or(base.epochs),
            base_lr: t.base_lr.unwrap_or(base.base_lr),
            decay_factor: t.decay_factor.unwrap_or(base.decay_factor),
            decay_epochs: t.decay_epochs.clone().unwrap_or(base.decay_epochs),
            momentum: t.momentum.unwrap_or(base.momentum),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            drop_last: t.drop_last.unwrap_or(base.drop_last),
            gcr: base.gcr,
            seed,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    /// Resolves the regularizer section against `spec`.
    pub fn gcr_config(&self, spec: &NetworkSpec) -> anyhow::Result<Option<GcrConfig>> {
        self.gcr.as_ref().map(|g| g.resolve(spec)).transpose()
    }

    pub fn seeds(&self, flag: Option<&[u64]>) -> Vec<u64> {
        flag.map(<[u64]>::to_vec)
            .or_else(|| self.seeds.clone())
            .unwrap_or_else(|| vec![0])
    }
}

impl GcrDoc {
    pub fn resolve(&self, spec: &NetworkSpec) -> anyhow::Result<GcrConfig> {
        let taps = match (&self.placement, &self.taps) {
            (Some(p), None) => resolve_taps(spec, *p).map_err(|e| config_err(e.to_string()))?,
            (None, Some(t)) => t.clone(),
            (None, None) => bail!(config_err("[gcr] needs either `placement` or `taps`")),
            (Some(_), Some(_)) => bail!(config_err("[gcr] takes `placement` or `taps`, not both")),
        };
        let eligible = spec.tap_eligible();
        if let Some(bad) = taps.iter().find(|t| !eligible.contains(t)) {
            bail!(config_err(format!("tap {bad} is not tap-eligible (eligible: {eligible:?})")));
        }
        let cfg = GcrConfig {
            taps,
            scheme: self.scheme,
            kernel: self.kernel,
            lambda: self.lambda,
            tau: self.tau,
            beta: self.beta,
            normalize_pairs: self.normalize_pairs,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }
}

impl DatasetDoc {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetDoc::Csv { path, test_path, .. } => {
                fix(path);
                if let Some(t) = test_path {
                    fix(t);
                }
            }
            DatasetDoc::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            _ => {}
        }
    }

    fn check_files(&self) -> anyhow::Result<()> {
        let files: Vec<&PathBuf> = match self {
            DatasetDoc::Csv { path, test_path, .. } => std::iter::once(path).chain(test_path).collect(),
            DatasetDoc::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                vec![train_images, train_labels, test_images, test_labels]
            }
            _ => Vec::new(),
        };
        for f in files {
            if !f.is_file() {
                bail!(config_err(format!("dataset file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    fn materialize(&self) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
        let conf = |e: gcr_core::GcrError| config_err(e.to_string());
        Ok(match self {
            DatasetDoc::Blobs { classes, per_class, dims, sigma, seed, test_fraction } => {
                gaussian_blobs(*classes, *per_class, *dims, *sigma, *seed)
                    .and_then(|d| d.stratified_split(*test_fraction, *seed))
                    .map_err(conf)?
            }
            DatasetDoc::Rings { per_class, noise, seed, test_fraction } => two_rings(*per_class, *noise, *seed)
                .and_then(|d| d.stratified_split(*test_fraction, *seed))
                .map_err(conf)?,
            DatasetDoc::Csv { path, label_column, test_path, seed, test_fraction } => {
                let train = load_csv(path, label_column).with_context(|| format!("loading {}", path.display()))?;
                match test_path {
                    Some(t) => (train, load_csv(t, label_column).with_context(|| format!("loading {}", t.display()))?),
                    None => train.stratified_split(*test_fraction, *seed).map_err(conf)?,
                }
            }
            DatasetDoc::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
                let mut train = load_idx(train_images, train_labels).context("loading IDX training set")?;
                let mut test = load_idx(test_images, test_labels).context("loading IDX test set")?;
                if let Some(n) = train_limit {
                    train = train.truncated(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.truncated(*n)?;
                }
                (train, test)
            }
        })
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| format!("bad seed range `{part}`"))?;
            let b: u64 = b.parse().map_err(|_| format!("bad seed range `{part}`"))?;
            if a >= b {
                return Err(format!("empty seed range `{part}`"));
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?);
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}

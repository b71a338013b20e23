//! Experiment configuration files.
//!
//! A config is a flat TOML table. Hyperparameter keys:
//!
//! | key        | meaning                                              |
//! |------------|------------------------------------------------------|
//! | `lr`       | learning rate                                        |
//! | `wd`       | weight decay                                         |
//! | `d`        | dropout rate                                         |
//! | `p`        | output width of the similarity projection `Q`        |
//! | `q`        | output width of each first-layer projection          |
//! | `eps`      | similarity threshold                                 |
//! | `m`        | anchor count                                         |
//! | `c`        | spectral feature width                               |
//! | `K`        | aggregation rounds over the input graph              |
//! | `seed`     | experiment seed; run `r` uses `seed + r`             |
//!
//! Published hyperparameter tables sometimes swap the names `p` and `q`;
//! here `p` always belongs to `Q`.
//!
//! The graph comes from exactly one of: `dataset` (a benchmark name resolved
//! under `data_dir`), `node_file` + `edge_file`, or the `synth_*` keys
//! (`synth_n`, `synth_classes`, `synth_d`, `synth_h`, optional `synth_noise`
//! and `synth_seed`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_graph, synth_graph_with_noise, DatasetDescriptor, SYNTH_NOISE_STD};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Branches, CombineMode};
use crate::spectral::SpectralMethod;
use crate::train::HyperParams;

/// Environment variable naming the benchmark data directory.
pub const DATA_DIR_ENV: &str = "HETERO_GNN_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub node_file: Option<PathBuf>,
    pub edge_file: Option<PathBuf>,

    pub synth_n: Option<usize>,
    pub synth_classes: Option<usize>,
    pub synth_d: Option<usize>,
    pub synth_h: Option<f64>,
    pub synth_noise: Option<f64>,
    pub synth_seed: Option<u64>,

    pub lr: f64,
    pub wd: f64,
    pub d: f64,
    pub p: usize,
    pub q: usize,
    pub eps: f64,
    pub m: usize,
    pub c: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,

    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_combine")]
    pub combine: CombineMode,
    #[serde(default)]
    pub decay_w: bool,
    #[serde(default = "yes")]
    pub use_a: bool,
    #[serde(default = "yes")]
    pub use_a_star: bool,
    #[serde(default = "default_spectral")]
    pub spectral: SpectralMethod,
}

fn default_epochs() -> usize {
    500
}
fn default_patience() -> usize {
    100
}
fn default_runs() -> usize {
    10
}
fn default_combine() -> CombineMode {
    CombineMode::Cc
}
fn yes() -> bool {
    true
}
fn default_spectral() -> SpectralMethod {
    SpectralMethod::EscAnch
}

/// Where the graph for an experiment comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    Files(DatasetDescriptor),
    Synthetic {
        n: usize,
        classes: usize,
        d: usize,
        h: f64,
        noise: f64,
        seed: u64,
    },
}

impl GraphSource {
    pub fn name(&self) -> String {
        match self {
            Self::Files(desc) => desc.name.clone(),
            Self::Synthetic { n, h, .. } => format!("synthetic-n{n}-h{h}"),
        }
    }

    pub fn load(&self) -> Result<Graph> {
        match self {
            Self::Files(desc) => load_graph(desc),
            Self::Synthetic {
                n,
                classes,
                d,
                h,
                noise,
                seed,
            } => synth_graph_with_noise(*n, *classes, *d, *h, *noise, *seed),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be positive".into()));
        }
        self.graph_source().map(|_| ())
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            lr: self.lr,
            weight_decay: self.wd,
            dropout: self.d,
            p: self.p,
            q: self.q,
            eps: self.eps,
            m: self.m,
            c: self.c,
            k: self.k,
            seed: self.seed,
            epochs: self.epochs,
            patience: self.patience,
            combine: self.combine,
            decay_gate: self.decay_w,
            branches: Branches {
                adjacency: self.use_a,
                reconnected: self.use_a_star,
            },
            spectral: self.spectral,
        }
    }

    pub fn graph_source(&self) -> Result<GraphSource> {
        let synth = [
            self.synth_n.is_some(),
            self.synth_classes.is_some(),
            self.synth_d.is_some(),
            self.synth_h.is_some(),
            self.synth_noise.is_some(),
            self.synth_seed.is_some(),
        ];
        let files = self.node_file.is_some() || self.edge_file.is_some();
        if synth.iter().any(|&s| s) {
            if files || self.dataset.is_some() {
                return Err(Error::Config("synthetic keys cannot be combined with a dataset".into()));
            }
            return match (self.synth_n, self.synth_classes, self.synth_d, self.synth_h) {
                (Some(n), Some(classes), Some(d), Some(h)) => Ok(GraphSource::Synthetic {
                    n,
                    classes,
                    d,
                    h,
                    noise: self.synth_noise.unwrap_or(SYNTH_NOISE_STD),
                    seed: self.synth_seed.unwrap_or(self.seed),
                }),
                _ => Err(Error::Config(
                    "synth_n, synth_classes, synth_d and synth_h must be given together".into(),
                )),
            };
        }
        if files {
            return match (&self.node_file, &self.edge_file) {
                (Some(nodes), Some(edges)) => {
                    let name = self.dataset.clone().unwrap_or_else(|| "custom".into());
                    Ok(GraphSource::Files(DatasetDescriptor::new(name, nodes, edges)))
                }
                _ => Err(Error::Config("node_file and edge_file must be given together".into())),
            };
        }
        match &self.dataset {
            Some(name) => DatasetDescriptor::benchmark(name, &self.resolved_data_dir())
                .map(GraphSource::Files)
                .map_err(|e| Error::Config(e.to_string())),
            None => Err(Error::Config("no dataset, node_file/edge_file or synth_* keys".into())),
        }
    }

    /// `data_dir`, else `$HETERO_GNN_DATA`, else `./data`.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

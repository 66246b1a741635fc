use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attack::{AblationSwitches, AttackOptimizer, CloneInit, CloneStrategy, KnowledgeLevel};
use crate::defense::DefenseConfig;
use crate::gnn::{Arch, Combine, GnnConfig};
use crate::Error;

/// Where the graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// A dataset manifest file, resolved against the data root.
    Manifest { manifest: PathBuf },
    /// Synthetic stochastic block model.
    Synth {
        n_nodes: usize,
        n_classes: usize,
        p_in: f64,
        p_out: f64,
        d: usize,
    },
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Manifest { manifest } => manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| manifest.display().to_string()),
            DatasetSpec::Synth {
                n_nodes, n_classes, ..
            } => format!("synth{n_nodes}x{n_classes}"),
        }
    }
}

/// Optional overrides of the architecture defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GnnOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Online,
    Offline,
}

/// One experiment: dataset, system shape, attack settings, defense, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gnn: Option<GnnOverrides>,
    #[serde(default = "default_clients")]
    pub n_clients: usize,
    #[serde(default = "default_combine")]
    pub combine: Combine,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_main_lr")]
    pub main_lr: f64,
    /// L2 regularization of every party's local update, the standard
    /// citation-GCN setting.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_server_layers")]
    pub server_layers: usize,
    #[serde(default = "default_knowledge")]
    pub knowledge: KnowledgeLevel,
    #[serde(default)]
    pub strategy: CloneStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_lr: Option<f64>,
    #[serde(default = "default_iterations")]
    pub attack_iterations: usize,
    #[serde(default = "default_lag")]
    pub early_stop_lag: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub ablation: AblationSwitches,
    #[serde(default)]
    pub clone_init: CloneInit,
    #[serde(default)]
    pub attack_optimizer: AttackOptimizer,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Trace file: written in online mode, read in offline mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Attacker model checkpoint: written in online mode, read (when
    /// present) in offline mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_checkpoint: Option<PathBuf>,
}

fn default_arch() -> Arch {
    Arch::Gcn
}
fn default_clients() -> usize {
    2
}
fn default_combine() -> Combine {
    Combine::Concat
}
fn default_epochs() -> usize {
    200
}
fn default_main_lr() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_server_layers() -> usize {
    1
}
fn default_knowledge() -> KnowledgeLevel {
    KnowledgeLevel::Full
}
fn default_iterations() -> usize {
    10
}
fn default_lag() -> usize {
    2
}
fn default_warmup() -> usize {
    20
}

impl ExperimentConfig {
    pub fn gnn_config(&self) -> GnnConfig {
        let mut cfg = GnnConfig::for_arch(self.arch);
        if let Some(o) = &self.gnn {
            if let Some(v) = o.n_layers {
                cfg.n_layers = v;
            }
            if let Some(v) = o.hidden_dim {
                cfg.hidden_dim = v;
            }
            if let Some(v) = o.n_heads {
                cfg.n_heads = v;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.n_clients < 2 {
            return Err(Error::Config(format!(
                "need at least 2 clients, got {}",
                self.n_clients
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.server_layers == 0 || self.server_layers > 4 {
            return Err(Error::Config(format!(
                "server_layers must be in 1..=4, got {}",
                self.server_layers
            )));
        }
        if self.attack_iterations == 0 {
            return Err(Error::Config("attack_iterations must be positive".into()));
        }
        if let Some(lr) = self.attack_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("attack_lr must be positive, got {lr}")));
            }
        }
        self.defense
            .validate()
            .map_err(Error::Config)?;
        if matches!(self.mode, Mode::Offline) && self.trace.is_none() {
            return Err(Error::Config("offline mode needs a trace path".into()));
        }
        if let DatasetSpec::Synth {
            n_nodes,
            n_classes,
            p_in,
            p_out,
            d,
        } = &self.dataset
        {
            if *n_nodes == 0 || *n_classes == 0 || *d == 0 {
                return Err(Error::Config("synthetic dataset dimensions must be positive".into()));
            }
            if !(0.0..=1.0).contains(p_in) || !(0.0..=1.0).contains(p_out) || p_out >= p_in {
                return Err(Error::Config(format!(
                    "need 0 ≤ p_out < p_in ≤ 1, got p_in={p_in} p_out={p_out}"
                )));
            }
        }
        Ok(())
    }
}

/// A sweep grid: a base config plus named axes expanded as a cartesian
/// product (axes in sorted name order, values in listed order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: std::collections::BTreeMap<String, Vec<serde_json::Value>>,
}

/// Expands a grid into concrete configs by assigning each axis value to the
/// correspondingly named field of the base config.
pub fn expand_grid(grid: &GridSpec) -> Result<Vec<ExperimentConfig>, Error> {
    let base = serde_json::to_value(&grid.base)?;
    let mut rows = vec![base];
    for (field, values) in &grid.axes {
        if values.is_empty() {
            return Err(Error::Config(format!("axis {field:?} has no values")));
        }
        let mut next = Vec::with_capacity(rows.len() * values.len());
        for row in &rows {
            for v in values {
                let mut r = row.clone();
                r.as_object_mut()
                    .expect("config is an object")
                    .insert(field.clone(), v.clone());
                next.push(r);
            }
        }
        rows = next;
    }
    rows.into_iter()
        .map(|r| {
            let cfg: ExperimentConfig = serde_json::from_value(r)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Fixed column order of sweep CSV output.
pub const RESULT_COLUMNS: &[&str] = &[
    "digest",
    "name",
    "dataset",
    "arch",
    "knowledge",
    "strategy",
    "defense",
    "seed",
    "main_test_acc",
    "attack_top1_final",
    "attack_top3_final",
    "attack_top5_final",
    "attack_top1_early",
    "attack_top3_early",
    "attack_top5_early",
    "early_stop_epoch",
    "estimated_classes",
    "wall_time_s",
    "series_path",
];

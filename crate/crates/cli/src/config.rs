//! Run configuration: command-line flags layered over an optional JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

/// Flags shared by every pipeline subcommand. Flags that a command does not
/// use are accepted and ignored.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Word embedding table (text, one token per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Class catalog (JSON Lines).
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Labeled training features (packed).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Labeled test features of unseen classes (packed).
    #[arg(long)]
    pub test_features: Option<PathBuf>,
    /// Visualness table written by `zsl visualness`.
    #[arg(long, conflicts_with = "bundles")]
    pub visualness: Option<PathBuf>,
    /// Directory of word image bundles; visualness is computed on the fly.
    #[arg(long)]
    pub bundles: Option<PathBuf>,
    /// Prototype method, e.g. `Classname+Def_visualness+Parent`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mu_def: Option<f64>,
    #[arg(long)]
    pub mu_parent: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `s2v` (prototypes mapped to features) or `v2s`.
    #[arg(long)]
    pub direction: Option<String>,
    /// Comma-separated k values for top-k accuracy.
    #[arg(long, value_delimiter = ',')]
    pub topk: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write per-word weights as CSV.
    #[arg(long)]
    pub report: bool,
    /// Directory written by `zsl train` or `zsl cv`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Attention model JSON written by `zsl attention`.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `zero` or `gaussian` attention initialization.
    #[arg(long)]
    pub init: Option<String>,
    /// Number of seen classes held out for validation.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Histogram buckets for `zsl visualness`.
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid_lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_tau: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_mu: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub visualness: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundles: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_def: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_parent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_tau: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_mu: Option<Vec<f64>>,
}

macro_rules! overlay {
    ($base:ident, $flags:ident; $($field:ident),*) => {
        $(if $flags.$field.is_some() { $base.$field = $flags.$field.clone(); })*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The file given by `--config` (if any) with every supplied flag on top.
    pub fn resolve(flags: &Flags) -> anyhow::Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        overlay!(cfg, flags; embeddings, classes, features, test_features, bundles, method, tau, mu_def,
            mu_parent, lambda, direction, topk, seed, threads, out, model, attention, epochs, init, holdout,
            bins, grid_lambda, grid_tau, grid_mu);
        // the two visualness sources exclude each other across layers too
        if flags.visualness.is_some() {
            cfg.visualness = flags.visualness.clone();
            cfg.bundles = None;
        } else if flags.bundles.is_some() {
            cfg.visualness = None;
        }
        if flags.report {
            cfg.report = Some(true);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn report(&self) -> bool {
        self.report.unwrap_or(false)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"lambda": 0.5, "tau": 5.0, "bundles": "b"}"#).unwrap();
        let flags = Flags {
            config: Some(path),
            lambda: Some(2.0),
            visualness: Some("v.json".into()),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.lambda, Some(2.0));
        assert_eq!(cfg.tau, Some(5.0));
        assert_eq!(cfg.bundles, None);
        assert_eq!(cfg.visualness, Some("v.json".into()));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"lamda": 0.5}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn written_config_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            method: Some("Def_average".into()),
            lambda: Some(0.01),
            topk: Some(vec![1, 5]),
            ..Default::default()
        };
        let path = dir.path().join("config.json");
        cfg.write(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}

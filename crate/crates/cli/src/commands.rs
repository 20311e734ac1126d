use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use zsl_core::attention::{train_attention, AttentionModel, Init, TrainConfig, DEFAULT_EPOCHS};
use zsl_core::evaluation::{
    build_for_point, cross_validate, evaluate_unseen, seen_classes, write_reports_csv, write_scores_csv, CvConfig,
    GridScore, HyperGrid, HyperPoint, SplitSpec,
};
use zsl_core::io::{load_class_catalog, load_embedding_table, load_feature_matrix, load_word_image_bundles};
use zsl_core::prototypes::{build_prototype_set, write_weight_reports_csv};
use zsl_core::ridge::fit_ridge;
use zsl_core::synthetic::{planted_visual_tokens, ridge_recovery, SyntheticConfig};
use zsl_core::visualness::{build_visualness_table, write_histogram_csv};
use zsl_core::{
    ClassCatalog, Direction, EmbeddingTable, FeatureMatrix, Method, PrototypeMeta, PrototypeParams, PrototypeSet,
    RidgeModel, VisualnessTable, WeightReport,
};

use crate::config::RunConfig;
use crate::UsageError;

const DEFAULT_TOPK: [usize; 3] = [1, 5, 10];
const DEFAULT_BINS: usize = 20;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("missing required {flag}")))
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = required(&cfg.out, "--out")?.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn with_file<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> zsl_core::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn method(cfg: &RunConfig) -> anyhow::Result<Method> {
    Ok(required(&cfg.method, "--method")?.parse::<Method>()?)
}

fn direction(cfg: &RunConfig) -> anyhow::Result<Direction> {
    Ok(cfg.direction.as_deref().unwrap_or("s2v").parse::<Direction>()?)
}

fn init(cfg: &RunConfig) -> anyhow::Result<Init> {
    match cfg.init.as_deref().unwrap_or("zero") {
        "zero" => Ok(Init::Zero),
        "gaussian" => Ok(Init::Gaussian),
        other => Err(usage(format!("unknown --init `{other}` (expected zero or gaussian)"))),
    }
}

fn train_config(cfg: &RunConfig, lambda: f64) -> anyhow::Result<TrainConfig> {
    Ok(TrainConfig {
        lambda,
        epochs: cfg.epochs.unwrap_or(DEFAULT_EPOCHS),
        seed: cfg.seed(),
        init: init(cfg)?,
    })
}

fn load_inputs(cfg: &RunConfig) -> anyhow::Result<(EmbeddingTable, ClassCatalog)> {
    let emb = load_embedding_table(required(&cfg.embeddings, "--embeddings")?)?;
    let catalog = load_class_catalog(required(&cfg.classes, "--classes")?)?;
    Ok((emb, catalog))
}

fn load_features(path: &Option<PathBuf>, flag: &str) -> anyhow::Result<FeatureMatrix> {
    let path = required(path, flag)?;
    let m = load_feature_matrix(path)?;
    if !m.is_labeled() {
        bail!(zsl_core::Error::InvalidLabels(format!("{} carries no labels", path.display())));
    }
    Ok(m)
}

/// Visualness from a table file or computed from bundles, when the method
/// needs it.
fn load_visualness(cfg: &RunConfig, method: Method) -> anyhow::Result<Option<VisualnessTable>> {
    if !method.uses_tau() {
        return Ok(None);
    }
    if let Some(p) = &cfg.visualness {
        let f = File::open(p).map_err(|e| zsl_core::Error::Io { path: p.clone(), source: e })?;
        return Ok(Some(VisualnessTable::read_json(std::io::BufReader::new(f))?));
    }
    if let Some(dir) = &cfg.bundles {
        return Ok(Some(build_visualness_table(&load_word_image_bundles(dir)?)?));
    }
    Err(usage(format!("method {method} needs --visualness or --bundles")))
}

fn load_attention(path: &Path) -> anyhow::Result<AttentionModel> {
    let f = File::open(path).map_err(|e| zsl_core::Error::Io { path: path.to_owned(), source: e })?;
    Ok(AttentionModel::read_json(std::io::BufReader::new(f))?)
}

/// Warns about supplied parameters the method ignores.
fn warn_unused(cfg: &RunConfig, method: Method) {
    let mut unused = Vec::new();
    if cfg.tau.is_some() && !method.uses_tau() {
        unused.push("--tau");
    }
    if cfg.mu_def.is_some() && !method.uses_mu_def() {
        unused.push("--mu-def");
    }
    if cfg.mu_parent.is_some() && !method.uses_parent() {
        unused.push("--mu-parent");
    }
    if !unused.is_empty() {
        eprintln!("warning: {method} ignores {}", unused.join(", "));
    }
}

fn params(cfg: &RunConfig, theta: Option<Vec<f64>>) -> PrototypeParams {
    PrototypeParams {
        tau: cfg.tau,
        mu_def: cfg.mu_def,
        mu_parent: cfg.mu_parent,
        theta,
    }
}

fn save_prototypes(dir: &Path, set: &PrototypeSet) -> anyhow::Result<()> {
    zsl_core::io::save_feature_matrix(&set.to_feature_matrix(), &dir.join("prototypes.zf"))?;
    with_file(&dir.join("prototypes.json"), |w| set.write_meta(w))
}

fn load_prototypes(dir: &Path) -> anyhow::Result<PrototypeSet> {
    let m = load_feature_matrix(&dir.join("prototypes.zf"))?;
    let meta_path = dir.join("prototypes.json");
    let f = File::open(&meta_path).map_err(|e| zsl_core::Error::Io { path: meta_path, source: e })?;
    let meta: PrototypeMeta = PrototypeSet::read_meta(std::io::BufReader::new(f))?;
    Ok(PrototypeSet::from_feature_matrix(&m, meta)?)
}

fn save_model(dir: &Path, model: &RidgeModel) -> anyhow::Result<()> {
    with_file(&dir.join("model.zf"), |w| model.write_weights(w))?;
    with_file(&dir.join("model.json"), |w| model.write_sidecar(w))
}

fn load_model(dir: &Path) -> anyhow::Result<RidgeModel> {
    let open = |name: &str| -> anyhow::Result<std::io::BufReader<File>> {
        let p = dir.join(name);
        let f = File::open(&p).map_err(|e| zsl_core::Error::Io { path: p, source: e })?;
        Ok(std::io::BufReader::new(f))
    };
    Ok(RidgeModel::read(open("model.zf")?, open("model.json")?)?)
}

fn save_reports(dir: &Path, cfg: &RunConfig, reports: &[WeightReport]) -> anyhow::Result<()> {
    if cfg.report() {
        with_file(&dir.join("weights.csv"), |w| write_weight_reports_csv(reports, w))?;
    }
    Ok(())
}

fn save_attention(dir: &Path, model: &AttentionModel) -> anyhow::Result<()> {
    with_file(&dir.join("attention.json"), |w| model.write_json(w))
}

pub fn visualness(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = required(&cfg.bundles, "--bundles")?;
    let out = out_dir(cfg)?;
    let table = build_visualness_table(&load_word_image_bundles(dir)?)?;
    let bins = cfg.bins.unwrap_or(DEFAULT_BINS);
    if bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    with_file(&out.join("visualness.json"), |w| table.write_json(w))?;
    with_file(&out.join("visualness_hist.csv"), |w| write_histogram_csv(&table.histogram(bins), w))?;
    cfg.write(&out.join("config.json"))?;
    println!("visualness: {} words", table.len());
    Ok(())
}

/// Prototypes for a method, reading θ from `--attention` when needed.
fn build_from_config(
    cfg: &RunConfig,
    method: Method,
    emb: &EmbeddingTable,
    catalog: &ClassCatalog,
) -> anyhow::Result<(PrototypeSet, Vec<WeightReport>)> {
    warn_unused(cfg, method);
    let vis = load_visualness(cfg, method)?;
    let theta = match (&cfg.attention, method.uses_theta()) {
        (Some(p), true) => Some(load_attention(p)?.theta),
        (None, true) => return Err(usage(format!("method {method} needs --attention (see `zsl attention`)"))),
        _ => None,
    };
    Ok(build_prototype_set(catalog, emb, method, &params(cfg, theta), vis.as_ref())?)
}

pub fn build(cfg: &RunConfig) -> anyhow::Result<()> {
    let method = method(cfg)?;
    let (emb, catalog) = load_inputs(cfg)?;
    let out = out_dir(cfg)?;
    let (set, reports) = build_from_config(cfg, method, &emb, &catalog)?;
    save_prototypes(&out, &set)?;
    save_reports(&out, cfg, &reports)?;
    cfg.write(&out.join("config.json"))?;
    println!("build: {} prototypes ({method})", set.len());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let method = method(cfg)?;
    let direction = direction(cfg)?;
    let lambda = *required(&cfg.lambda, "--lambda")?;
    let (emb, catalog) = load_inputs(cfg)?;
    let x = load_features(&cfg.features, "--features")?;
    let out = out_dir(cfg)?;

    let (set, reports) = if method.uses_theta() && cfg.attention.is_none() {
        warn_unused(cfg, method);
        let attention = train_attention(&x, &catalog, &emb, &train_config(cfg, lambda)?)?;
        save_attention(&out, &attention)?;
        build_prototype_set(&catalog, &emb, method, &params(cfg, Some(attention.theta)), None)?
    } else {
        build_from_config(cfg, method, &emb, &catalog)?
    };
    let model = fit_ridge(direction, &x, &set, lambda)?;
    save_model(&out, &model)?;
    save_prototypes(&out, &set)?;
    save_reports(&out, cfg, &reports)?;
    cfg.write(&out.join("config.json"))?;
    println!("train: {method} {direction} lambda={lambda} loss={}", model.loss(&x, &set)?);
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let model_dir = required(&cfg.model, "--model")?;
    let x = load_features(&cfg.test_features, "--test-features")?;
    let out = out_dir(cfg)?;
    let model = load_model(model_dir)?;
    let set = load_prototypes(model_dir)?;
    for l in x.labels() {
        if set.index_of(l).is_none() {
            bail!(zsl_core::Error::UnmatchedLabel(l.clone()));
        }
    }
    // candidates: the classes present in the test set, in catalog order
    let present: std::collections::HashSet<&str> = x.labels().iter().map(String::as_str).collect();
    let ids: Vec<String> = set.class_ids().iter().filter(|c| present.contains(c.as_str())).cloned().collect();
    let candidates = set.select(&ids)?;
    let ks = cfg.topk.clone().unwrap_or_else(|| DEFAULT_TOPK.to_vec());
    let report = evaluate_unseen(&model, &candidates, &x, &ks)?;
    with_file(&out.join("report.json"), |w| report.write_json(w))?;
    with_file(&out.join("report.csv"), |w| write_reports_csv(std::slice::from_ref(&report), w))?;
    cfg.write(&out.join("config.json"))?;
    let summary: Vec<String> = report.topk.iter().map(|t| format!("top{}={:.4}", t.k, t.accuracy)).collect();
    println!("eval: {} samples, {} candidates, {}", report.samples, report.candidates, summary.join(" "));
    Ok(())
}

#[derive(Serialize)]
struct CvFile<'a> {
    method: Method,
    direction: Direction,
    split: &'a SplitSpec,
    scores: &'a [GridScore],
    selected: HyperPoint,
    selected_top1: f64,
}

fn grid(cfg: &RunConfig) -> HyperGrid {
    let d = HyperGrid::default();
    HyperGrid {
        lambdas: cfg.grid_lambda.clone().unwrap_or(d.lambdas),
        taus: cfg.grid_tau.clone().unwrap_or(d.taus),
        mus: cfg.grid_mu.clone().unwrap_or(d.mus),
    }
}

pub fn cv(cfg: &RunConfig) -> anyhow::Result<()> {
    let method = method(cfg)?;
    let direction = direction(cfg)?;
    let (emb, catalog) = load_inputs(cfg)?;
    let x = load_features(&cfg.features, "--features")?;
    let out = out_dir(cfg)?;
    warn_unused(cfg, method);
    let vis = load_visualness(cfg, method)?;
    let holdout = match cfg.holdout {
        Some(h) => h,
        // a fifth of the seen classes, as in 200 of 1000
        None => (seen_classes(&x, &catalog)?.len() / 5).max(1),
    };
    let cv_cfg = CvConfig {
        method,
        direction,
        grid: grid(cfg),
        holdout,
        seed: cfg.seed(),
        mu_parent: cfg.mu_parent,
        epochs: cfg.epochs.unwrap_or(DEFAULT_EPOCHS),
        init: init(cfg)?,
    };
    let outcome = cross_validate(&x, &catalog, &emb, vis.as_ref(), &cv_cfg)?;

    write_json(
        &out.join("cv.json"),
        &CvFile {
            method,
            direction,
            split: &outcome.split,
            scores: &outcome.scores,
            selected: outcome.selected,
            selected_top1: outcome.selected_top1,
        },
    )?;
    with_file(&out.join("cv.csv"), |w| write_scores_csv(method, &outcome.scores, w))?;

    // the refit model, ready for `zsl eval --model <out>`
    save_model(&out, &outcome.model)?;
    save_prototypes(&out, &outcome.prototypes)?;
    if let Some(a) = &outcome.attention {
        save_attention(&out, a)?;
    }
    save_reports(&out, cfg, &outcome.weight_reports)?;

    // a config for `zsl train --config`
    let selected = RunConfig {
        lambda: Some(outcome.selected.lambda),
        tau: outcome.selected.tau,
        mu_def: outcome.selected.mu_def,
        mu_parent: outcome.prototypes.meta().mu_parent,
        direction: Some(direction.to_string()),
        method: Some(method.name().to_owned()),
        holdout: None,
        grid_lambda: None,
        grid_tau: None,
        grid_mu: None,
        out: None,
        model: None,
        ..cfg.clone()
    };
    selected.write(&out.join("selected.json"))?;
    cfg.write(&out.join("config.json"))?;
    let p = outcome.selected;
    println!(
        "cv: {} grid points, selected lambda={}{}{} (validation top1={:.4})",
        outcome.scores.len(),
        p.lambda,
        p.tau.map(|t| format!(" tau={t}")).unwrap_or_default(),
        p.mu_def.map(|m| format!(" mu_def={m}")).unwrap_or_default(),
        outcome.selected_top1
    );
    Ok(())
}

pub fn attention(cfg: &RunConfig) -> anyhow::Result<()> {
    let lambda = *required(&cfg.lambda, "--lambda")?;
    let (emb, catalog) = load_inputs(cfg)?;
    let x = load_features(&cfg.features, "--features")?;
    let out = out_dir(cfg)?;
    let cv_cfg = CvConfig {
        epochs: cfg.epochs.unwrap_or(DEFAULT_EPOCHS),
        seed: cfg.seed(),
        init: init(cfg)?,
        ..CvConfig::new(Method::DefAttention, 1)
    };
    let point = HyperPoint {
        lambda,
        tau: None,
        mu_def: None,
    };
    let (set, reports, model) = build_for_point(&x, &catalog, &emb, None, &cv_cfg, &point)?;
    let model = model.expect("Def_attention trains a model");
    save_attention(&out, &model)?;
    save_prototypes(&out, &set)?;
    save_reports(&out, cfg, &reports)?;
    cfg.write(&out.join("config.json"))?;
    let log = &model.training_log;
    println!(
        "attention: {} epochs, loss {} -> {}",
        log.len() - 1,
        log[0],
        log[log.len() - 1]
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// Single-word classes with prototypes mapped linearly to features.
    Recovery,
    /// Definitions with one feature-generating word among fillers.
    Planted,
}

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "recovery")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SynthInfo<'a> {
    seen: &'a [String],
    unseen: &'a [String],
    #[serde(skip_serializing_if = "Vec::is_empty")]
    planted: Vec<&'a str>,
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        seed: args.seed,
        per_class: args.per_class,
        noise: args.noise,
        ..Default::default()
    };
    let ds = match args.kind {
        SynthKind::Recovery => ridge_recovery(&cfg)?,
        SynthKind::Planted => planted_visual_tokens(&cfg)?,
    };
    ds.write_to_dir(&args.out)?;
    write_json(
        &args.out.join("dataset.json"),
        &SynthInfo {
            seen: &ds.seen,
            unseen: &ds.unseen,
            planted: ds.planted.iter().flatten().map(String::as_str).collect(),
        },
    )?;
    println!(
        "synth: {} classes, {} train / {} test samples in {}",
        ds.catalog.len(),
        ds.train.rows(),
        ds.test.rows(),
        args.out.display()
    );
    Ok(())
}

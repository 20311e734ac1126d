//! Semantic class prototypes.
//!
//! A prototype is a unit vector in word-embedding space standing for a
//! class. It can come from the class name (mean over the words of each lemma,
//! then over lemmas), from the one-sentence definition (plain or
//! softmax-weighted mean of its word embeddings), or from a convex mix of
//! those, optionally blended with the parent class's prototype.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ClassCatalog, ClassRecord, EmbeddingTable, FeatureMatrix};
use crate::visualness::VisualnessTable;

/// Word used as class prototype when none of a class's lemma words is
/// embedded.
pub const FALLBACK_TOKEN: &str = "thing";

/// Weight of the parent prototype in the `+Parent` methods.
pub const DEFAULT_MU_PARENT: f64 = 0.25;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Classname,
    ClassnameParent,
    DefAverage,
    DefVisualness,
    DefAttention,
    ClassnameDefAverage,
    ClassnameDefVisualness,
    ClassnameDefVisualnessParent,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Classname,
        Method::ClassnameParent,
        Method::DefAverage,
        Method::DefVisualness,
        Method::DefAttention,
        Method::ClassnameDefAverage,
        Method::ClassnameDefVisualness,
        Method::ClassnameDefVisualnessParent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Classname => "Classname",
            Method::ClassnameParent => "Classname+Parent",
            Method::DefAverage => "Def_average",
            Method::DefVisualness => "Def_visualness",
            Method::DefAttention => "Def_attention",
            Method::ClassnameDefAverage => "Classname+Def_average",
            Method::ClassnameDefVisualness => "Classname+Def_visualness",
            Method::ClassnameDefVisualnessParent => "Classname+Def_visualness+Parent",
        }
    }

    pub fn uses_tau(self) -> bool {
        matches!(
            self,
            Method::DefVisualness | Method::ClassnameDefVisualness | Method::ClassnameDefVisualnessParent
        )
    }

    pub fn uses_mu_def(self) -> bool {
        matches!(
            self,
            Method::ClassnameDefAverage | Method::ClassnameDefVisualness | Method::ClassnameDefVisualnessParent
        )
    }

    pub fn uses_parent(self) -> bool {
        matches!(self, Method::ClassnameParent | Method::ClassnameDefVisualnessParent)
    }

    pub fn uses_theta(self) -> bool {
        self == Method::DefAttention
    }

    /// Whether definition words are softmax-weighted (and so produce
    /// weight reports).
    pub fn is_weighted(self) -> bool {
        self.uses_tau() || self.uses_theta()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownMethod(s.to_owned()))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters for [`build_prototype_set`]. Which fields are needed depends on
/// the method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeParams {
    /// Softmax temperature for visualness weighting.
    pub tau: Option<f64>,
    /// Weight of the definition prototype when mixed with the class name.
    pub mu_def: Option<f64>,
    /// Weight of the parent prototype; defaults to [`DEFAULT_MU_PARENT`].
    pub mu_parent: Option<f64>,
    /// Learned attention parameters for `Def_attention`.
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMeta {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_def: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_parent: Option<f64>,
}

/// Unit-norm class prototypes, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    class_ids: Vec<String>,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
    meta: PrototypeMeta,
}

impl PrototypeSet {
    /// Normalizes each row and checks ids are unique.
    pub fn from_rows(dim: usize, class_ids: Vec<String>, rows: Vec<Vec<f64>>, meta: PrototypeMeta) -> Result<Self> {
        if class_ids.len() != rows.len() {
            return Err(Error::LabelCount {
                labels: class_ids.len(),
                rows: rows.len(),
            });
        }
        let mut vectors = Vec::with_capacity(dim * rows.len());
        for mut r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            normalize(&mut r)?;
            vectors.extend(r);
        }
        let mut index = HashMap::with_capacity(class_ids.len());
        for (i, id) in class_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateClass(id.clone()));
            }
        }
        Ok(PrototypeSet {
            dim,
            class_ids,
            vectors,
            index,
            meta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn meta(&self) -> &PrototypeMeta {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.index.get(class_id).copied()
    }

    pub fn get(&self, class_id: &str) -> Option<&[f64]> {
        self.index_of(class_id).map(|i| self.row(i))
    }

    /// Keeps the listed classes, in the order given.
    pub fn select(&self, class_ids: &[String]) -> Result<PrototypeSet> {
        let rows = class_ids
            .iter()
            .map(|id| {
                self.get(id)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::UnmatchedLabel(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        PrototypeSet::from_rows(self.dim, class_ids.to_vec(), rows, self.meta.clone())
    }

    /// Storage form: 32-bit rows labeled with class ids.
    pub fn to_feature_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::from_rows_f64(self.dim, self.vectors.chunks_exact(self.dim.max(1)), self.class_ids.clone())
            .expect("prototype rows are finite and labeled")
    }

    /// Rebuilds a set from its storage form; rows are renormalized in 64-bit.
    pub fn from_feature_matrix(m: &FeatureMatrix, meta: PrototypeMeta) -> Result<Self> {
        if !m.is_labeled() && m.rows() > 0 {
            return Err(Error::InvalidLabels("prototype file has no class ids".into()));
        }
        let rows = (0..m.rows()).map(|i| m.row_f64(i)).collect();
        PrototypeSet::from_rows(m.dim(), m.labels().to_vec(), rows, meta)
    }

    pub fn write_meta<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.meta)?;
        Ok(())
    }

    pub fn read_meta<R: Read>(reader: R) -> Result<PrototypeMeta> {
        Ok(serde_json::from_reader(reader)?)
    }
}

/// Per-word weights of one class's definition, in definition order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub class_id: String,
    pub weights: Vec<(String, f64)>,
}

pub fn write_weight_reports_csv<W: Write>(reports: &[WeightReport], mut writer: W) -> Result<()> {
    writeln!(writer, "class_id,token,weight")?;
    for r in reports {
        for (token, w) in &r.weights {
            writeln!(writer, "{},{},{}", csv_field(&r.class_id), csv_field(token), w)?;
        }
    }
    Ok(())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::ZeroNorm);
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(())
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Class-name prototype: mean over lemmas of the mean embedding of each
/// lemma's words. Unembedded words and fully unembedded lemmas are skipped;
/// if nothing is left, the embedding of [`FALLBACK_TOKEN`] is used.
/// The result is not normalized.
pub fn classname_prototype(class: &ClassRecord, emb: &EmbeddingTable) -> Result<Vec<f64>> {
    let dim = emb.dim();
    let mut acc = vec![0.0; dim];
    let mut lemmas_used = 0usize;
    for lemma in &class.lemmas {
        let mut lemma_acc = vec![0.0; dim];
        let mut words = 0usize;
        for word in lemma {
            if let Some(v) = emb.lookup(word) {
                for (a, &x) in lemma_acc.iter_mut().zip(v) {
                    *a += x as f64;
                }
                words += 1;
            }
        }
        if words > 0 {
            for (a, l) in acc.iter_mut().zip(&lemma_acc) {
                *a += l / words as f64;
            }
            lemmas_used += 1;
        }
    }
    if lemmas_used == 0 {
        return emb
            .lookup(FALLBACK_TOKEN)
            .map(to_f64)
            .ok_or_else(|| Error::MissingFallback(FALLBACK_TOKEN.into()));
    }
    for a in &mut acc {
        *a /= lemmas_used as f64;
    }
    Ok(acc)
}

/// Embedded words of a definition, held in a canonical (sorted) order so
/// that sums do not depend on word order.
#[derive(Debug, Clone)]
pub(crate) struct EmbeddedDefinition {
    /// Sorted tokens; repeats kept.
    pub tokens: Vec<String>,
    /// Row-major `tokens.len() × dim` embeddings, in sorted order.
    pub vectors: Vec<f64>,
    /// For each retained token in definition order, its row in `tokens`.
    pub order: Vec<usize>,
    pub dim: usize,
}

impl EmbeddedDefinition {
    pub fn new(class: &ClassRecord, emb: &EmbeddingTable) -> Self {
        let found: Vec<(String, &[f32])> = class
            .definition_tokens()
            .into_iter()
            .filter_map(|t| emb.lookup(&t).map(|v| (t, v)))
            .collect();
        let mut sorted: Vec<usize> = (0..found.len()).collect();
        sorted.sort_by(|&a, &b| found[a].0.cmp(&found[b].0));
        let mut order = vec![0; found.len()];
        for (pos, &orig) in sorted.iter().enumerate() {
            order[orig] = pos;
        }
        let tokens = sorted.iter().map(|&i| found[i].0.clone()).collect();
        let vectors = sorted.iter().flat_map(|&i| found[i].1.iter().map(|&x| x as f64)).collect();
        EmbeddedDefinition {
            tokens,
            vectors,
            order,
            dim: emb.dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weighted_sum(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, &w) in weights.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += w * x;
            }
        }
        out
    }

    pub fn report(&self, class_id: &str, weights: &[f64]) -> WeightReport {
        WeightReport {
            class_id: class_id.to_owned(),
            weights: self
                .order
                .iter()
                .map(|&i| (self.tokens[i].clone(), weights[i]))
                .collect(),
        }
    }
}

/// Numerically stable softmax of `scores / tau`.
pub fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Unweighted mean of the embedded definition words; falls back to the class
/// name prototype when no word is embedded. Not normalized.
pub fn def_average_prototype(class: &ClassRecord, emb: &EmbeddingTable) -> Result<Vec<f64>> {
    let def = EmbeddedDefinition::new(class, emb);
    if def.is_empty() {
        return classname_prototype(class, emb);
    }
    let w = vec![1.0 / def.len() as f64; def.len()];
    Ok(def.weighted_sum(&w))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("temperature must be positive, got {tau}")))
    }
}

/// Definition words weighted by `softmax(v / tau)` where `v` is each word's
/// visualness. The report is `None` when the class fell back to its name.
pub fn def_weighted_prototype(
    class: &ClassRecord,
    emb: &EmbeddingTable,
    vis: &VisualnessTable,
    tau: f64,
) -> Result<(Vec<f64>, Option<WeightReport>)> {
    check_tau(tau)?;
    let def = EmbeddedDefinition::new(class, emb);
    if def.is_empty() {
        return Ok((classname_prototype(class, emb)?, None));
    }
    let scores: Vec<f64> = def.tokens.iter().map(|t| vis.score(t)).collect();
    let w = softmax(&scores, tau);
    Ok((def.weighted_sum(&w), Some(def.report(&class.class_id, &w))))
}

/// Same as [`def_weighted_prototype`] with scores `θᵀw` and unit temperature.
pub fn def_attention_prototype(
    class: &ClassRecord,
    emb: &EmbeddingTable,
    theta: &[f64],
) -> Result<(Vec<f64>, Option<WeightReport>)> {
    if theta.len() != emb.dim() {
        return Err(Error::DimMismatch {
            expected: emb.dim(),
            got: theta.len(),
        });
    }
    let def = EmbeddedDefinition::new(class, emb);
    if def.is_empty() {
        return Ok((classname_prototype(class, emb)?, None));
    }
    let scores: Vec<f64> = (0..def.len())
        .map(|i| def.row(i).iter().zip(theta).map(|(a, b)| a * b).sum())
        .collect();
    let w = softmax(&scores, 1.0);
    Ok((def.weighted_sum(&w), Some(def.report(&class.class_id, &w))))
}

/// Normalized `mu·primary + (1−mu)·secondary`. The first argument carries
/// `mu`.
pub fn combine(primary: &[f64], secondary: &[f64], mu: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidParam(format!("mu must lie in [0, 1], got {mu}")));
    }
    if primary.len() != secondary.len() {
        return Err(Error::DimMismatch {
            expected: primary.len(),
            got: secondary.len(),
        });
    }
    if mu == 1.0 {
        return Ok(primary.to_vec());
    }
    if mu == 0.0 {
        return Ok(secondary.to_vec());
    }
    let mut out: Vec<f64> = primary
        .iter()
        .zip(secondary)
        .map(|(a, b)| mu * a + (1.0 - mu) * b)
        .collect();
    if norm(&out) <= 1e-12 {
        return Err(Error::ZeroNorm);
    }
    normalize(&mut out)?;
    Ok(out)
}

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    normalize(&mut v)?;
    Ok(v)
}

fn require(method: Method, value: Option<f64>, param: &'static str) -> Result<f64> {
    value.ok_or(Error::MissingParam {
        method: method.name(),
        param,
    })
}

/// Everything one class needs to build its prototype, minus the parent step.
fn base_prototype(
    method: Method,
    class: &ClassRecord,
    emb: &EmbeddingTable,
    vis: Option<&VisualnessTable>,
    params: &PrototypeParams,
) -> Result<(Vec<f64>, Option<WeightReport>)> {
    match method {
        Method::Classname | Method::ClassnameParent => Ok((unit(classname_prototype(class, emb)?)?, None)),
        Method::DefAverage => Ok((unit(def_average_prototype(class, emb)?)?, None)),
        Method::DefVisualness => {
            let (v, r) = def_weighted_prototype(class, emb, vis.expect("checked"), params.tau.expect("checked"))?;
            Ok((unit(v)?, r))
        }
        Method::DefAttention => {
            let (v, r) = def_attention_prototype(class, emb, params.theta.as_deref().expect("checked"))?;
            Ok((unit(v)?, r))
        }
        Method::ClassnameDefAverage => {
            let name = unit(classname_prototype(class, emb)?)?;
            let def = unit(def_average_prototype(class, emb)?)?;
            Ok((combine(&def, &name, params.mu_def.expect("checked"))?, None))
        }
        Method::ClassnameDefVisualness | Method::ClassnameDefVisualnessParent => {
            let name = unit(classname_prototype(class, emb)?)?;
            let (def, r) = def_weighted_prototype(class, emb, vis.expect("checked"), params.tau.expect("checked"))?;
            Ok((combine(&unit(def)?, &name, params.mu_def.expect("checked"))?, r))
        }
    }
}

/// Checks that `params` carry what `method` needs; returns the metadata to
/// attach to the resulting set.
pub fn validate_params(
    method: Method,
    params: &PrototypeParams,
    vis: Option<&VisualnessTable>,
    dim: usize,
) -> Result<PrototypeMeta> {
    let mut meta = PrototypeMeta {
        method,
        tau: None,
        mu_def: None,
        mu_parent: None,
    };
    if method.uses_tau() {
        let tau = require(method, params.tau, "tau")?;
        check_tau(tau)?;
        if vis.is_none() {
            return Err(Error::MissingParam {
                method: method.name(),
                param: "visualness",
            });
        }
        meta.tau = Some(tau);
    }
    if method.uses_mu_def() {
        let mu = require(method, params.mu_def, "mu_def")?;
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidParam(format!("mu_def must lie in [0, 1], got {mu}")));
        }
        meta.mu_def = Some(mu);
    }
    if method.uses_parent() {
        let mu = params.mu_parent.unwrap_or(DEFAULT_MU_PARENT);
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidParam(format!("mu_parent must lie in [0, 1], got {mu}")));
        }
        meta.mu_parent = Some(mu);
    }
    if method.uses_theta() {
        let theta = params.theta.as_ref().ok_or(Error::MissingParam {
            method: method.name(),
            param: "theta",
        })?;
        if theta.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
    }
    Ok(meta)
}

/// Builds one unit prototype per catalog class with the given method.
///
/// For `+Parent` methods the parent's prototype is built with the same
/// method and parameters and mixed in with weight `mu_parent`; classes
/// without an in-catalog parent keep their own prototype. Only one ancestor
/// level is used. Weight reports are returned for softmax-weighted methods,
/// in catalog order, skipping classes that fell back to their name.
pub fn build_prototype_set(
    catalog: &ClassCatalog,
    emb: &EmbeddingTable,
    method: Method,
    params: &PrototypeParams,
    vis: Option<&VisualnessTable>,
) -> Result<(PrototypeSet, Vec<WeightReport>)> {
    let meta = validate_params(method, params, vis, emb.dim())?;
    let params = PrototypeParams {
        tau: meta.tau,
        mu_def: meta.mu_def,
        mu_parent: meta.mu_parent,
        theta: params.theta.clone(),
    };

    let base: Vec<(Vec<f64>, Option<WeightReport>)> = catalog
        .classes()
        .par_iter()
        .map(|c| base_prototype(method, c, emb, vis, &params))
        .collect::<Result<_>>()?;

    let rows: Vec<Vec<f64>> = if let Some(mu_parent) = meta.mu_parent {
        (0..catalog.len())
            .map(|i| match catalog.parent_index(i) {
                Some(p) => combine(&base[i].0, &base[p].0, 1.0 - mu_parent),
                None => Ok(base[i].0.clone()),
            })
            .collect::<Result<_>>()?
    } else {
        base.iter().map(|(v, _)| v.clone()).collect()
    };
    let reports = base.into_iter().filter_map(|(_, r)| r).collect();

    let ids = catalog.classes().iter().map(|c| c.class_id.clone()).collect();
    let set = PrototypeSet::from_rows(emb.dim(), ids, rows, meta)?;
    debug_assert!((0..set.len()).all(|i| (norm(set.row(i)) - 1.0).abs() <= UNIT_TOL));
    Ok((set, reports))
}

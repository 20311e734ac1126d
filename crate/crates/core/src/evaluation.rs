//! Validation splits, hyperparameter search and top-k evaluation on unseen
//! classes.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{train_attention, AttentionModel, Init, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{ClassCatalog, EmbeddingTable, FeatureMatrix};
use crate::prototypes::{build_prototype_set, Method, PrototypeParams, PrototypeSet, WeightReport};
use crate::ridge::{prototype_matrix, v2s_cross, ClassStats, Direction, RidgeModel, S2vSystem, VisualGram};
use crate::visualness::VisualnessTable;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_class_ids: Vec<String>,
    pub val_class_ids: Vec<String>,
}

/// Holds out `holdout` of the `seen` classes for validation. The classes are
/// shuffled with a generator seeded by `seed`; both returned lists keep the
/// order of `seen`.
pub fn split_validation(seen: &[String], holdout: usize, seed: u64) -> Result<SplitSpec> {
    if holdout == 0 {
        return Err(Error::InvalidParam("validation holdout must be at least 1".into()));
    }
    if holdout >= seen.len() {
        return Err(Error::InvalidParam(format!(
            "holdout {holdout} leaves no training classes out of {}",
            seen.len()
        )));
    }
    let mut order: Vec<usize> = (0..seen.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; seen.len()];
    for &i in &order[..holdout] {
        is_val[i] = true;
    }
    let pick = |v: bool| -> Vec<String> {
        seen.iter()
            .zip(&is_val)
            .filter(|(_, &x)| x == v)
            .map(|(s, _)| s.clone())
            .collect()
    };
    Ok(SplitSpec {
        seed,
        train_class_ids: pick(false),
        val_class_ids: pick(true),
    })
}

/// Classes that have samples in `x`, in catalog order.
pub fn seen_classes(x: &FeatureMatrix, catalog: &ClassCatalog) -> Result<Vec<String>> {
    let mut present = vec![false; catalog.len()];
    for l in x.labels() {
        let c = catalog.index_of(l).ok_or_else(|| Error::UnmatchedLabel(l.clone()))?;
        present[c] = true;
    }
    Ok(catalog
        .classes()
        .iter()
        .zip(present)
        .filter(|(_, p)| *p)
        .map(|(c, _)| c.class_id.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub mus: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
            taus: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            mus: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: &[f64], ok: &dyn Fn(f64) -> bool| -> Result<()> {
            if v.is_empty() {
                return Err(Error::InvalidParam(format!("{name} grid is empty")));
            }
            if let Some(bad) = v.iter().find(|&&x| !ok(x)) {
                return Err(Error::InvalidParam(format!("{name} grid value {bad} out of range")));
            }
            if v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidParam(format!("{name} grid must be strictly ascending")));
            }
            Ok(())
        };
        check("lambda", &self.lambdas, &|x| x > 0.0 && x.is_finite())?;
        check("tau", &self.taus, &|x| x > 0.0 && x.is_finite())?;
        check("mu", &self.mus, &|x| (0.0..=1.0).contains(&x))
    }

    /// Every grid point relevant to `method`, λ varying fastest.
    pub fn points(&self, method: Method) -> Vec<HyperPoint> {
        let taus: Vec<Option<f64>> = if method.uses_tau() {
            self.taus.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        let mus: Vec<Option<f64>> = if method.uses_mu_def() {
            self.mus.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        let mut out = Vec::new();
        for &tau in &taus {
            for &mu_def in &mus {
                for &lambda in &self.lambdas {
                    out.push(HyperPoint { lambda, tau, mu_def });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu_def: Option<f64>,
}

impl HyperPoint {
    fn params(&self, mu_parent: Option<f64>, theta: Option<Vec<f64>>) -> PrototypeParams {
        PrototypeParams {
            tau: self.tau,
            mu_def: self.mu_def,
            mu_parent,
            theta,
        }
    }

    /// Selection order among equally scoring points: smaller λ, then
    /// smaller τ, then μ closer to 0.5.
    fn preference(&self, other: &HyperPoint) -> std::cmp::Ordering {
        let mu_gap = |p: &HyperPoint| p.mu_def.map_or(0.0, |m| (m - 0.5).abs());
        self.lambda
            .total_cmp(&other.lambda)
            .then(self.tau.unwrap_or(0.0).total_cmp(&other.tau.unwrap_or(0.0)))
            .then(mu_gap(self).total_cmp(&mu_gap(other)))
            .then(self.mu_def.unwrap_or(0.0).total_cmp(&other.mu_def.unwrap_or(0.0)))
    }
}

/// Fraction of samples whose true candidate index is among the first `k`
/// entries of its ranking.
pub fn topk_accuracy(rankings: &[Vec<usize>], truth: &[usize], k: usize) -> Result<f64> {
    if rankings.len() != truth.len() {
        return Err(Error::DimMismatch {
            expected: truth.len(),
            got: rankings.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate"));
    }
    if let Some(r) = rankings.iter().find(|r| r.len() < k) {
        return Err(Error::InvalidParam(format!("ranking of length {} shorter than k = {k}", r.len())));
    }
    let hits = rankings.iter().zip(truth).filter(|(r, t)| r[..k].contains(t)).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn candidate_truth(x: &FeatureMatrix, candidates: &PrototypeSet) -> Result<Vec<usize>> {
    if !x.is_labeled() {
        return Err(Error::InvalidLabels("evaluation features carry no labels".into()));
    }
    x.labels()
        .iter()
        .map(|l| candidates.index_of(l).ok_or_else(|| Error::UnmatchedLabel(l.clone())))
        .collect()
}

/// Everything a cross-validation run needs besides the data.
#[derive(Debug, Clone)]
pub struct CvConfig {
    pub method: Method,
    pub direction: Direction,
    pub grid: HyperGrid,
    pub holdout: usize,
    pub seed: u64,
    /// Fixed parent weight; not searched.
    pub mu_parent: Option<f64>,
    pub epochs: usize,
    pub init: Init,
}

impl CvConfig {
    pub fn new(method: Method, holdout: usize) -> Self {
        CvConfig {
            method,
            direction: Direction::SemanticToVisual,
            grid: HyperGrid::default(),
            holdout,
            seed: 0,
            mu_parent: None,
            epochs: crate::attention::DEFAULT_EPOCHS,
            init: Init::Zero,
        }
    }

    fn train_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            epochs: self.epochs,
            seed: self.seed,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    #[serde(flatten)]
    pub point: HyperPoint,
    pub top1: f64,
}

/// Result of [`cross_validate`]: validation scores and the model refitted on
/// every seen class with the selected point.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub split: SplitSpec,
    pub scores: Vec<GridScore>,
    pub selected: HyperPoint,
    pub selected_top1: f64,
    /// Prototypes of every catalog class under the selected point.
    pub prototypes: PrototypeSet,
    pub weight_reports: Vec<WeightReport>,
    pub model: RidgeModel,
    pub attention: Option<AttentionModel>,
}

struct Fold<'a> {
    train: FeatureMatrix,
    val: FeatureMatrix,
    val_ids: &'a [String],
    gram: Option<VisualGram>,
}

impl Fold<'_> {
    /// Validation top-1 for each λ, with prototypes fixed.
    fn score(&self, protos: &PrototypeSet, direction: Direction, lambdas: &[f64]) -> Result<Vec<f64>> {
        let stats = ClassStats::new(&self.train, protos)?;
        let candidates = protos.select(self.val_ids)?;
        let truth = candidate_truth(&self.val, &candidates)?;
        let mut out = Vec::with_capacity(lambdas.len());
        let s2v = match direction {
            Direction::SemanticToVisual => Some(S2vSystem::new(&prototype_matrix(protos), &stats)),
            Direction::VisualToSemantic => None,
        };
        let cross = match direction {
            Direction::VisualToSemantic => Some(v2s_cross(&stats, protos)),
            Direction::SemanticToVisual => None,
        };
        for &lambda in lambdas {
            let weights = match (&s2v, &cross, &self.gram) {
                (Some(sys), _, _) => sys.solve(lambda)?,
                (None, Some(c), Some(g)) => g.solve(c, lambda)?,
                _ => unreachable!("fold prepared for {direction}"),
            };
            let model = RidgeModel {
                direction,
                weights,
                lambda,
                n_train: stats.n,
            };
            let ranks = model.scorer(&candidates)?.rank_all(&self.val, 1)?;
            out.push(topk_accuracy(&ranks, &truth, 1)?);
        }
        Ok(out)
    }
}

/// Grid search on a validation split of the seen classes, followed by a
/// refit on all of them.
///
/// For each grid point, prototypes are built for the whole catalog, the
/// model is fitted on the training-split samples, and validation samples are
/// ranked against validation classes only. The best validation top-1 wins.
pub fn cross_validate(
    x: &FeatureMatrix,
    catalog: &ClassCatalog,
    emb: &EmbeddingTable,
    vis: Option<&VisualnessTable>,
    cfg: &CvConfig,
) -> Result<CvOutcome> {
    cfg.grid.validate()?;
    let seen = seen_classes(x, catalog)?;
    let split = split_validation(&seen, cfg.holdout, cfg.seed)?;
    let val_set: HashSet<&str> = split.val_class_ids.iter().map(String::as_str).collect();
    let train = x.filter_rows(|l| !val_set.contains(l));
    let val = x.filter_rows(|l| val_set.contains(l));
    debug_assert!(train.labels().iter().all(|l| !val_set.contains(l.as_str())));
    let fold = Fold {
        gram: (cfg.direction == Direction::VisualToSemantic).then(|| VisualGram::new(&train)),
        train,
        val,
        val_ids: &split.val_class_ids,
    };

    let points = cfg.grid.points(cfg.method);
    let lambdas = &cfg.grid.lambdas;
    let scores: Vec<f64> = if cfg.method.uses_theta() {
        // θ is retrained for every λ on the training split
        let per_lambda: Vec<f64> = lambdas
            .par_iter()
            .map(|&lambda| {
                let model = train_attention(&fold.train, catalog, emb, &cfg.train_config(lambda))?;
                let point = HyperPoint {
                    lambda,
                    tau: None,
                    mu_def: None,
                };
                let (protos, _) =
                    build_prototype_set(catalog, emb, cfg.method, &point.params(cfg.mu_parent, Some(model.theta)), vis)?;
                Ok(fold.score(&protos, cfg.direction, &[lambda])?[0])
            })
            .collect::<Result<_>>()?;
        per_lambda
    } else {
        let groups: Vec<&[HyperPoint]> = points.chunks(lambdas.len()).collect();
        let per_group: Vec<Vec<f64>> = groups
            .par_iter()
            .map(|g| {
                let (protos, _) = build_prototype_set(catalog, emb, cfg.method, &g[0].params(cfg.mu_parent, None), vis)?;
                fold.score(&protos, cfg.direction, lambdas)
            })
            .collect::<Result<_>>()?;
        per_group.into_iter().flatten().collect()
    };

    let scores: Vec<GridScore> = points
        .iter()
        .zip(scores)
        .map(|(&point, top1)| GridScore { point, top1 })
        .collect();
    let best = scores
        .iter()
        .min_by(|a, b| b.top1.total_cmp(&a.top1).then(a.point.preference(&b.point)))
        .copied()
        .expect("grid is non-empty");

    let (prototypes, weight_reports, attention) = build_for_point(x, catalog, emb, vis, cfg, &best.point)?;
    let model = crate::ridge::fit_ridge(cfg.direction, x, &prototypes, best.point.lambda)?;
    Ok(CvOutcome {
        split,
        scores,
        selected: best.point,
        selected_top1: best.top1,
        prototypes,
        weight_reports,
        model,
        attention,
    })
}

/// Prototypes of the whole catalog for a chosen point, training attention on
/// `x` first when the method needs it.
pub fn build_for_point(
    x: &FeatureMatrix,
    catalog: &ClassCatalog,
    emb: &EmbeddingTable,
    vis: Option<&VisualnessTable>,
    cfg: &CvConfig,
    point: &HyperPoint,
) -> Result<(PrototypeSet, Vec<WeightReport>, Option<AttentionModel>)> {
    let attention = if cfg.method.uses_theta() {
        Some(train_attention(x, catalog, emb, &cfg.train_config(point.lambda))?)
    } else {
        None
    };
    let theta = attention.as_ref().map(|a| a.theta.clone());
    let (set, reports) = build_prototype_set(catalog, emb, cfg.method, &point.params(cfg.mu_parent, theta), vis)?;
    Ok((set, reports, attention))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: String,
    pub samples: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub direction: Direction,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu_def: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu_parent: Option<f64>,
    pub samples: usize,
    pub candidates: usize,
    pub topk: Vec<TopK>,
    pub per_class: Vec<ClassAccuracy>,
}

impl EvalReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

/// Top-k accuracy of `model` on `x_test`, ranking against `candidates` only.
pub fn evaluate_unseen(
    model: &RidgeModel,
    candidates: &PrototypeSet,
    x_test: &FeatureMatrix,
    ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::InvalidParam("no k requested".into()));
    }
    let kmax = *ks.iter().max().expect("non-empty");
    if ks.contains(&0) || kmax > candidates.len() {
        return Err(Error::InvalidParam(format!(
            "every k must lie in 1..={} (the number of candidates)",
            candidates.len()
        )));
    }
    let truth = candidate_truth(x_test, candidates)?;
    let ranks = model.scorer(candidates)?.rank_all(x_test, kmax)?;
    let mut ks_sorted = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    let topk = ks_sorted
        .iter()
        .map(|&k| Ok(TopK { k, accuracy: topk_accuracy(&ranks, &truth, k)? }))
        .collect::<Result<_>>()?;

    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, &t) in ranks.iter().zip(&truth) {
        let e = per.entry(t).or_default();
        e.0 += 1;
        if r[0] == t {
            e.1 += 1;
        }
    }
    let per_class = per
        .into_iter()
        .map(|(c, (n, hit))| ClassAccuracy {
            class_id: candidates.class_ids()[c].clone(),
            samples: n,
            top1: hit as f64 / n as f64,
        })
        .collect();

    let meta = candidates.meta();
    Ok(EvalReport {
        method: meta.method,
        direction: model.direction,
        lambda: model.lambda,
        tau: meta.tau,
        mu_def: meta.mu_def,
        mu_parent: meta.mu_parent,
        samples: x_test.rows(),
        candidates: candidates.len(),
        topk,
        per_class,
    })
}

/// Candidate classes for evaluation: the distinct labels of `x_test`, in
/// catalog order.
pub fn test_candidates(x_test: &FeatureMatrix, catalog: &ClassCatalog) -> Result<Vec<String>> {
    seen_classes(x_test, catalog)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per report with columns `method,lambda,tau,mu,top1,top5,top10`;
/// accuracies that were not requested are left empty.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], mut writer: W) -> Result<()> {
    writeln!(writer, "method,lambda,tau,mu,top1,top5,top10")?;
    for r in reports {
        let acc = |k| fmt_opt(r.accuracy(k));
        writeln!(
            writer,
            "{},{},{},{},{},{},{}",
            r.method,
            r.lambda,
            fmt_opt(r.tau),
            fmt_opt(r.mu_def),
            acc(1),
            acc(5),
            acc(10)
        )?;
    }
    Ok(())
}

/// Validation scores with the same columns; only `top1` is filled.
pub fn write_scores_csv<W: Write>(method: Method, scores: &[GridScore], mut writer: W) -> Result<()> {
    writeln!(writer, "method,lambda,tau,mu,top1,top5,top10")?;
    for s in scores {
        writeln!(
            writer,
            "{},{},{},{},{},,",
            method,
            s.point.lambda,
            fmt_opt(s.point.tau),
            fmt_opt(s.point.mu_def),
            s.top1
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_validation(&ids(1000), 200, 7).unwrap();
        assert_eq!(s.train_class_ids.len(), 800);
        assert_eq!(s.val_class_ids.len(), 200);
        let all: HashSet<_> = s.train_class_ids.iter().chain(&s.val_class_ids).collect();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn split_rejects_degenerate_holdout() {
        assert!(split_validation(&ids(10), 0, 0).is_err());
        assert!(split_validation(&ids(10), 10, 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let a = split_validation(&ids(50), 10, 3).unwrap();
        assert_eq!(a, split_validation(&ids(50), 10, 3).unwrap());
        assert_ne!(a.val_class_ids, split_validation(&ids(50), 10, 4).unwrap().val_class_ids);
    }

    #[test]
    fn topk_examples() {
        let truth = vec![0, 1];
        assert_eq!(topk_accuracy(&[vec![0, 1], vec![1, 0]], &truth, 1).unwrap(), 1.0);
        let at_three = vec![vec![5, 6, 0, 7, 8], vec![5, 6, 1, 7, 8]];
        assert_eq!(topk_accuracy(&at_three, &truth, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&at_three, &truth, 5).unwrap(), 1.0);
        assert!(topk_accuracy(&at_three, &[0], 1).is_err());
        assert!(topk_accuracy(&at_three, &truth, 6).is_err());
    }

    #[test]
    fn grid_defaults_valid() {
        let g = HyperGrid::default();
        g.validate().unwrap();
        assert_eq!(g.mus.len(), 11);
        assert_eq!(g.points(Method::Classname).len(), 6);
        assert_eq!(g.points(Method::ClassnameDefVisualness).len(), 6 * 5 * 11);
        let bad = HyperGrid { lambdas: vec![1.0, 0.1], ..g };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn preference_order() {
        let p = |lambda, tau, mu| HyperPoint { lambda, tau: Some(tau), mu_def: Some(mu) };
        let mut pts = [p(1.0, 1.0, 0.5), p(0.1, 5.0, 0.5), p(0.1, 2.0, 0.9), p(0.1, 2.0, 0.6), p(0.1, 2.0, 0.4)];
        pts.sort_by(|a, b| a.preference(b));
        assert_eq!(pts[0], p(0.1, 2.0, 0.4));
        assert_eq!(pts[1], p(0.1, 2.0, 0.6));
        assert_eq!(pts[2], p(0.1, 2.0, 0.9));
        assert_eq!(pts[4], p(1.0, 1.0, 0.5));
    }

    proptest! {
        #[test]
        fn topk_monotone(
            rankings in prop::collection::vec(Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(), 1..30),
            seed in 0..8usize,
        ) {
            let truth: Vec<usize> = (0..rankings.len()).map(|i| (i * 7 + seed) % 8).collect();
            let mut prev = 0.0;
            for k in 1..=8 {
                let a = topk_accuracy(&rankings, &truth, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }
}

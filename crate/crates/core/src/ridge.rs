//! Closed-form ridge regression between semantic prototypes and visual
//! features.
//!
//! Semantic → visual: `Θ = (TᵀT + λN·I)⁻¹ TᵀX` (K×D), where row `n` of `T` is
//! the prototype of sample `n`'s class. Test samples are assigned to the
//! candidate whose projection `Θᵀs` is nearest.
//!
//! Visual → semantic: `W = (XᵀX + λN·I)⁻¹ XᵀT` (D×K), and samples are mapped
//! into prototype space before the nearest-prototype search.
//!
//! Since `T` repeats one row per class, `TᵀT = Σ_c N_c s_c s_cᵀ` and
//! `TᵀX = Σ_c s_c g_cᵀ` with `g_c` the sum of the class's features; `T` is
//! never materialized.

use std::cmp::Ordering;
use std::io::{Read, Write};

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, MatRef, Par, Side};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::FeatureMatrix;
use crate::prototypes::PrototypeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "s2v")]
    SemanticToVisual,
    #[serde(rename = "v2s")]
    VisualToSemantic,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s2v" => Ok(Direction::SemanticToVisual),
            "v2s" => Ok(Direction::VisualToSemantic),
            _ => Err(Error::InvalidParam(format!("unknown direction `{s}` (expected s2v or v2s)"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::SemanticToVisual => "s2v",
            Direction::VisualToSemantic => "v2s",
        })
    }
}

/// Per-class sufficient statistics of a labeled feature matrix, indexed like
/// the prototype set they were matched against.
#[derive(Debug, Clone)]
pub struct ClassStats {
    /// Samples per prototype row.
    pub counts: Vec<usize>,
    /// `C × D` per-class feature sums.
    pub sums: DMatrix<f64>,
    /// `‖X‖²_F`.
    pub sq_norm: f64,
    pub n: usize,
}

impl ClassStats {
    pub fn new(x: &FeatureMatrix, prototypes: &PrototypeSet) -> Result<Self> {
        Self::with_lookup(x, prototypes.len(), |l| prototypes.index_of(l))
    }

    /// Statistics over `classes` rows, mapping each sample label through
    /// `lookup`.
    pub fn with_lookup(x: &FeatureMatrix, classes: usize, lookup: impl Fn(&str) -> Option<usize>) -> Result<Self> {
        if x.rows() > 0 && !x.is_labeled() {
            return Err(Error::InvalidLabels("training features carry no labels".into()));
        }
        let d = x.dim();
        let mut counts = vec![0usize; classes];
        let mut sums = DMatrix::<f64>::zeros(classes, d);
        let mut sq_norm = 0.0;
        for (i, label) in x.labels().iter().enumerate() {
            let c = lookup(label).ok_or_else(|| Error::UnmatchedLabel(label.clone()))?;
            counts[c] += 1;
            for (j, &v) in x.row(i).iter().enumerate() {
                let v = v as f64;
                sums[(c, j)] += v;
                sq_norm += v * v;
            }
        }
        Ok(ClassStats {
            counts,
            sums,
            sq_norm,
            n: x.rows(),
        })
    }
}

pub fn prototype_matrix(p: &PrototypeSet) -> DMatrix<f64> {
    DMatrix::from_fn(p.len(), p.dim(), |i, j| p.row(i)[j])
}

/// Solves `A Z = B` for symmetric positive-definite `A` by Cholesky
/// factorization followed by one step of iterative refinement.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let fa = as_faer(a);
    let fb = as_faer(b);
    let llt = fa.llt(Side::Lower).map_err(|_| Error::Singular)?;
    let max_diag = a.diagonal().iter().copied().fold(0.0f64, f64::max);
    let l = llt.L();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if max_diag.is_nan() || max_diag <= 0.0 || min_pivot <= max_diag * a.nrows() as f64 * f64::EPSILON {
        return Err(Error::Singular);
    }
    let mut z = llt.solve(fb);
    let mut r = fb.to_owned();
    faer::linalg::matmul::matmul(r.as_mut(), Accum::Add, fa, z.as_ref(), -1.0, Par::Seq);
    z += llt.solve(&r);
    if z.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::Singular);
    }
    Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)]))
}

fn as_faer(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

/// The `K×K` system of the semantic → visual fit, assembled class-wise.
pub struct S2vSystem {
    /// `TᵀT` (without the ridge term).
    pub gram: DMatrix<f64>,
    /// `TᵀX`.
    pub cross: DMatrix<f64>,
    pub n: usize,
}

impl S2vSystem {
    pub fn new(s: &DMatrix<f64>, stats: &ClassStats) -> Self {
        let counts = DVector::from_iterator(stats.counts.len(), stats.counts.iter().map(|&c| c as f64));
        let mut weighted = s.clone();
        for (mut row, &c) in weighted.row_iter_mut().zip(counts.iter()) {
            row *= c;
        }
        S2vSystem {
            gram: s.transpose() * weighted,
            cross: s.transpose() * &stats.sums,
            n: stats.n,
        }
    }

    pub fn regularized(&self, lambda: f64) -> DMatrix<f64> {
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda * self.n as f64;
        }
        a
    }

    pub fn solve(&self, lambda: f64) -> Result<DMatrix<f64>> {
        check_lambda(lambda)?;
        solve_spd(&self.regularized(lambda), &self.cross)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("lambda must be finite and non-negative, got {lambda}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub direction: Direction,
    /// `K×D` for semantic → visual, `D×K` for visual → semantic.
    pub weights: DMatrix<f64>,
    pub lambda: f64,
    pub n_train: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    direction: Direction,
    lambda: f64,
    n_train: usize,
}

/// Fits `Θ` mapping prototypes into the visual space.
pub fn fit_ridge_s2v(x: &FeatureMatrix, prototypes: &PrototypeSet, lambda: f64) -> Result<RidgeModel> {
    check_lambda(lambda)?;
    let stats = ClassStats::new(x, prototypes)?;
    if stats.n == 0 {
        return Err(Error::EmptyInput("no training samples"));
    }
    let system = S2vSystem::new(&prototype_matrix(prototypes), &stats);
    Ok(RidgeModel {
        direction: Direction::SemanticToVisual,
        weights: system.solve(lambda)?,
        lambda,
        n_train: stats.n,
    })
}

/// `XᵀX` of a feature matrix, shared by every visual → semantic fit on the
/// same samples.
pub struct VisualGram {
    pub gram: DMatrix<f64>,
    pub n: usize,
}

impl VisualGram {
    pub fn new(x: &FeatureMatrix) -> Self {
        let d = x.dim();
        // accumulated over row blocks to bound memory on large N
        const BLOCK: usize = 4096;
        let mut lower = Mat::<f64>::zeros(d, d);
        let mut start = 0;
        while start < x.rows() {
            let end = (start + BLOCK).min(x.rows());
            let block_t = Mat::from_fn(d, end - start, |j, i| x.row(start + i)[j] as f64);
            triangular::matmul(
                lower.as_mut(),
                BlockStructure::TriangularLower,
                Accum::Add,
                block_t.as_ref(),
                BlockStructure::Rectangular,
                block_t.transpose(),
                BlockStructure::Rectangular,
                1.0,
                Par::Seq,
            );
            start = end;
        }
        let gram = DMatrix::from_fn(d, d, |i, j| if i >= j { lower[(i, j)] } else { lower[(j, i)] });
        VisualGram { gram, n: x.rows() }
    }

    /// Solves `(XᵀX + λN·I) W = XᵀT` given `XᵀT`.
    pub fn solve(&self, cross: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
        check_lambda(lambda)?;
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda * self.n as f64;
        }
        solve_spd(&a, cross)
    }
}

/// `XᵀT = Σ_c g_c s_cᵀ`, the right-hand side of the visual → semantic fit.
pub fn v2s_cross(stats: &ClassStats, prototypes: &PrototypeSet) -> DMatrix<f64> {
    stats.sums.transpose() * prototype_matrix(prototypes)
}

/// Fits `W` mapping visual features into the prototype space.
pub fn fit_ridge_v2s(x: &FeatureMatrix, prototypes: &PrototypeSet, lambda: f64) -> Result<RidgeModel> {
    check_lambda(lambda)?;
    let stats = ClassStats::new(x, prototypes)?;
    if stats.n == 0 {
        return Err(Error::EmptyInput("no training samples"));
    }
    let gram = VisualGram::new(x);
    Ok(RidgeModel {
        direction: Direction::VisualToSemantic,
        weights: gram.solve(&v2s_cross(&stats, prototypes), lambda)?,
        lambda,
        n_train: stats.n,
    })
}

/// Dispatches to [`fit_ridge_s2v`] or [`fit_ridge_v2s`].
pub fn fit_ridge(direction: Direction, x: &FeatureMatrix, prototypes: &PrototypeSet, lambda: f64) -> Result<RidgeModel> {
    match direction {
        Direction::SemanticToVisual => fit_ridge_s2v(x, prototypes, lambda),
        Direction::VisualToSemantic => fit_ridge_v2s(x, prototypes, lambda),
    }
}

impl RidgeModel {
    /// Dimension of the semantic (prototype) space.
    pub fn semantic_dim(&self) -> usize {
        match self.direction {
            Direction::SemanticToVisual => self.weights.nrows(),
            Direction::VisualToSemantic => self.weights.ncols(),
        }
    }

    pub fn visual_dim(&self) -> usize {
        match self.direction {
            Direction::SemanticToVisual => self.weights.ncols(),
            Direction::VisualToSemantic => self.weights.nrows(),
        }
    }

    /// The ridge objective at the fitted weights, evaluated sample by sample:
    /// `(1/N)‖X − TΘ‖² + λ‖Θ‖²` (or with the roles of `X` and `T` swapped
    /// for visual → semantic).
    pub fn loss(&self, x: &FeatureMatrix, prototypes: &PrototypeSet) -> Result<f64> {
        ridge_loss(self.direction, &self.weights, x, prototypes, self.lambda)
    }

    /// Precomputes what ranking against `candidates` needs.
    pub fn scorer(&self, candidates: &PrototypeSet) -> Result<Scorer<'_>> {
        if candidates.is_empty() {
            return Err(Error::EmptyInput("no candidate classes"));
        }
        if candidates.dim() != self.semantic_dim() {
            return Err(Error::DimMismatch {
                expected: self.semantic_dim(),
                got: candidates.dim(),
            });
        }
        let s = prototype_matrix(candidates);
        let targets = match self.direction {
            Direction::SemanticToVisual => &s * &self.weights,
            Direction::VisualToSemantic => s,
        };
        Ok(Scorer {
            model: self,
            targets,
            class_ids: candidates.class_ids().to_vec(),
        })
    }

    pub fn write_weights<W: Write>(&self, writer: W) -> Result<()> {
        let rows: Vec<Vec<f64>> = self.weights.row_iter().map(|r| r.iter().copied().collect()).collect();
        let m = FeatureMatrix::from_rows_f64(self.weights.ncols(), rows.iter().map(Vec::as_slice), vec![])?;
        crate::io::write_feature_matrix(&m, writer)
    }

    pub fn write_sidecar<W: Write>(&self, writer: W) -> Result<()> {
        let side = ModelSidecar {
            direction: self.direction,
            lambda: self.lambda,
            n_train: self.n_train,
        };
        serde_json::to_writer_pretty(writer, &side)?;
        Ok(())
    }

    pub fn read<R1: Read, R2: Read>(weights: R1, sidecar: R2) -> Result<Self> {
        let side: ModelSidecar = serde_json::from_reader(sidecar)?;
        let m = crate::io::read_feature_matrix(weights)?;
        let weights = DMatrix::from_fn(m.rows(), m.dim(), |i, j| m.row(i)[j] as f64);
        Ok(RidgeModel {
            direction: side.direction,
            weights,
            lambda: side.lambda,
            n_train: side.n_train,
        })
    }
}

/// Explicit evaluation of the ridge objective for arbitrary weights.
pub fn ridge_loss(
    direction: Direction,
    weights: &DMatrix<f64>,
    x: &FeatureMatrix,
    prototypes: &PrototypeSet,
    lambda: f64,
) -> Result<f64> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyInput("no samples"));
    }
    let mut total = 0.0;
    for (i, label) in x.labels().iter().enumerate() {
        let s = DVector::from_column_slice(
            prototypes
                .get(label)
                .ok_or_else(|| Error::UnmatchedLabel(label.clone()))?,
        );
        let xi = DVector::from_iterator(x.dim(), x.row(i).iter().map(|&v| v as f64));
        let r = match direction {
            Direction::SemanticToVisual => xi - weights.tr_mul(&s),
            Direction::VisualToSemantic => s - weights.tr_mul(&xi),
        };
        total += r.norm_squared();
    }
    Ok(total / n as f64 + lambda * weights.norm_squared())
}

/// Ranks candidate classes for query samples under a fitted model.
pub struct Scorer<'a> {
    model: &'a RidgeModel,
    /// One row per candidate, in the space where distances are measured.
    targets: DMatrix<f64>,
    class_ids: Vec<String>,
}

impl Scorer<'_> {
    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    /// Squared distance from the (mapped) query to every candidate.
    pub fn distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.model.visual_dim() {
            return Err(Error::DimMismatch {
                expected: self.model.visual_dim(),
                got: x.len(),
            });
        }
        let query: Vec<f64> = match self.model.direction {
            Direction::SemanticToVisual => x.to_vec(),
            Direction::VisualToSemantic => self
                .model
                .weights
                .tr_mul(&DVector::from_column_slice(x))
                .iter()
                .copied()
                .collect(),
        };
        Ok(self
            .targets
            .row_iter()
            .map(|t| t.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect())
    }

    /// Indices of the `k` nearest candidates, nearest first; equal distances
    /// keep candidate order.
    pub fn rank(&self, x: &[f64], k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        let d = self.distances(x)?;
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(idx)
    }

    /// Ranks every row of `x` in parallel; output order follows `x`.
    pub fn rank_all(&self, x: &FeatureMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
        (0..x.rows())
            .into_par_iter()
            .map(|i| self.rank(&x.row_f64(i), k))
            .collect()
    }
}

/// Top-`k` class ids for a single sample.
pub fn predict(model: &RidgeModel, x: &[f64], candidates: &PrototypeSet, k: usize) -> Result<Vec<String>> {
    let scorer = model.scorer(candidates)?;
    Ok(scorer
        .rank(x, k)?
        .into_iter()
        .map(|i| candidates.class_ids()[i].clone())
        .collect())
}

//! Learned word attention for definition prototypes.
//!
//! Each definition word gets the score `v = θᵀw` from its embedding `w`; the
//! class prototype is the unit-normalized `Σ softmax(v)_n w_n`. `θ` is fitted
//! by gradient descent on the ridge objective, with the semantic → visual
//! weights re-solved in closed form at every evaluation, so the only free
//! parameters are the `K` entries of `θ`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ClassCatalog, EmbeddingTable, FeatureMatrix};
use crate::prototypes::{
    build_prototype_set, classname_prototype, normalize, softmax, EmbeddedDefinition, Method, PrototypeParams,
    PrototypeSet, WeightReport,
};
use crate::ridge::{solve_spd, ClassStats};

/// Default number of full-batch gradient steps.
pub const DEFAULT_EPOCHS: usize = 50;

/// Standard deviation of the optional Gaussian initialization of `θ`.
pub const RANDOM_INIT_STD: f64 = 0.01;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionModel {
    pub theta: Vec<f64>,
    pub seed: u64,
    /// Loss at initialization followed by the loss after each epoch.
    pub training_log: Vec<f64>,
}

impl AttentionModel {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let m: AttentionModel = serde_json::from_reader(reader)?;
        if m.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// `θ = 0`: training starts from the plain definition average.
    #[default]
    Zero,
    /// `θ ~ N(0, 0.01²)` drawn from the seed.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init: Init,
}

impl TrainConfig {
    pub fn new(lambda: f64) -> Self {
        TrainConfig {
            lambda,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            init: Init::Zero,
        }
    }
}

/// Prototypes of every catalog class under attention parameters `theta`,
/// with the per-word weights.
pub fn attention_forward(
    theta: &[f64],
    catalog: &ClassCatalog,
    emb: &EmbeddingTable,
) -> Result<(PrototypeSet, Vec<WeightReport>)> {
    let params = PrototypeParams {
        theta: Some(theta.to_vec()),
        ..Default::default()
    };
    build_prototype_set(catalog, emb, Method::DefAttention, &params, None)
}

enum ClassTerm {
    /// Class whose definition has embedded words; its prototype moves with θ.
    Learned(EmbeddedDefinition),
    /// Class-name fallback, constant in θ.
    Fixed(Vec<f64>),
}

struct ForwardCache {
    weights: Vec<f64>,
    unnormalized_norm: f64,
}

/// A training problem: the classes with samples, their definition words,
/// and the class-wise statistics of the features.
pub struct AttentionProblem {
    terms: Vec<ClassTerm>,
    stats: ClassStats,
    /// Per-class feature means.
    means: DMatrix<f64>,
    /// `Σ_i ‖x_i − mean_{y_i}‖²`, the part of the residual no `Θ` can fit.
    scatter: f64,
    lambda: f64,
    dim: usize,
}

impl AttentionProblem {
    pub fn new(x: &FeatureMatrix, catalog: &ClassCatalog, emb: &EmbeddingTable, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParam(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        let full = ClassStats::with_lookup(x, catalog.len(), |l| catalog.index_of(l))?;
        if full.n == 0 {
            return Err(Error::EmptyInput("no training samples"));
        }
        // only classes that have samples enter the objective
        let active: Vec<usize> = (0..catalog.len()).filter(|&c| full.counts[c] > 0).collect();
        let terms = active
            .par_iter()
            .map(|&c| {
                let class = &catalog.classes()[c];
                let def = EmbeddedDefinition::new(class, emb);
                if def.is_empty() {
                    let mut v = classname_prototype(class, emb)?;
                    normalize(&mut v)?;
                    Ok(ClassTerm::Fixed(v))
                } else {
                    Ok(ClassTerm::Learned(def))
                }
            })
            .collect::<Result<_>>()?;
        let stats = ClassStats {
            counts: active.iter().map(|&c| full.counts[c]).collect(),
            sums: full.sums.select_rows(&active),
            sq_norm: full.sq_norm,
            n: full.n,
        };
        let mut means = stats.sums.clone();
        for (mut row, &c) in means.row_iter_mut().zip(&stats.counts) {
            row /= c as f64;
        }
        // second pass over the samples, so the constant part carries no
        // cancellation into the loss
        let mut scatter = 0.0;
        for (i, label) in x.labels().iter().enumerate() {
            let c = catalog.index_of(label).expect("label matched above");
            let r = active.binary_search(&c).expect("class has samples");
            scatter += x
                .row(i)
                .iter()
                .enumerate()
                .map(|(j, &v)| (v as f64 - means[(r, j)]).powi(2))
                .sum::<f64>();
        }
        Ok(AttentionProblem {
            terms,
            stats,
            means,
            scatter,
            lambda,
            dim: emb.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<Option<ForwardCache>>)> {
        let rows: Vec<(Vec<f64>, Option<ForwardCache>)> = self
            .terms
            .par_iter()
            .map(|t| match t {
                ClassTerm::Fixed(v) => Ok((v.clone(), None)),
                ClassTerm::Learned(def) => {
                    let scores: Vec<f64> = (0..def.len())
                        .map(|i| def.row(i).iter().zip(theta).map(|(a, b)| a * b).sum())
                        .collect();
                    let weights = softmax(&scores, 1.0);
                    let mut u = def.weighted_sum(&weights);
                    let n = crate::prototypes::norm(&u);
                    normalize(&mut u)?;
                    Ok((
                        u,
                        Some(ForwardCache {
                            weights,
                            unnormalized_norm: n,
                        }),
                    ))
                }
            })
            .collect::<Result<_>>()?;
        let s = DMatrix::from_fn(rows.len(), self.dim, |i, j| rows[i].0[j]);
        Ok((s, rows.into_iter().map(|(_, c)| c).collect()))
    }

    /// `TᵀT` and `TᵀX` from the prototype rows.
    fn system(&self, s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut weighted = s.clone();
        for (mut row, &c) in weighted.row_iter_mut().zip(&self.stats.counts) {
            row *= c as f64;
        }
        (s.transpose() * weighted, s.transpose() * &self.stats.sums)
    }

    fn regularize(&self, gram: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += self.lambda * self.stats.n as f64;
        }
        a
    }

    /// `(1/N)‖X − TΘ‖² + λ‖Θ‖²`, split into the within-class scatter and
    /// the residual of the class means.
    fn objective(&self, s: &DMatrix<f64>, big_theta: &DMatrix<f64>) -> f64 {
        let n = self.stats.n as f64;
        let residual = &self.means - s * big_theta;
        let between: f64 = residual
            .row_iter()
            .zip(&self.stats.counts)
            .map(|(r, &c)| c as f64 * r.norm_squared())
            .sum();
        (self.scatter + between) / n + self.lambda * big_theta.norm_squared()
    }

    /// Ridge loss with `Θ` solved in closed form for the prototypes `θ`
    /// induces.
    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let (s, _) = self.forward(theta)?;
        let (gram, cross) = self.system(&s);
        let big_theta = solve_spd(&self.regularize(&gram), &cross)?;
        Ok(self.objective(&s, &big_theta))
    }

    /// Loss and its exact gradient with respect to `θ`.
    ///
    /// Backward pass: the loss depends on `Θ`, `TᵀT` and `TᵀX`; `Θ` depends
    /// on the latter two through `A Θ = TᵀX` with `A = TᵀT + λN·I`, so with
    /// `Γ = ∂L/∂Θ` and `Y = A⁻¹Γ` (from `d(A⁻¹) = −A⁻¹ dA A⁻¹`):
    /// `∂L/∂(TᵀX) = −2Θ/N + Y` and `∂L/∂(TᵀT) = ΘΘᵀ/N − YΘᵀ`. These flow to
    /// the prototype rows, through the ℓ2 normalization, the weighted sum and
    /// the softmax to `θ`. Fallback classes are constant and receive nothing.
    pub fn loss_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let n = self.stats.n as f64;
        let (s, caches) = self.forward(theta)?;
        let (gram, cross) = self.system(&s);
        let a = self.regularize(&gram);
        let big_theta = solve_spd(&a, &cross)?;
        let loss = self.objective(&s, &big_theta);

        // Γ = (2/N)(AΘ − TᵀX); vanishes at an exact solve
        let gamma = (&a * &big_theta - &cross) * (2.0 / n);
        let y = solve_spd(&a, &gamma)?;
        let d_cross = &y - &big_theta * (2.0 / n);
        let d_gram = &big_theta * big_theta.transpose() / n - &y * big_theta.transpose();
        let d_gram_sym = &d_gram + d_gram.transpose();

        // TᵀT = Sᵀ diag(N) S, TᵀX = Sᵀ G
        let mut d_s = &s * &d_gram_sym;
        for (mut row, &c) in d_s.row_iter_mut().zip(&self.stats.counts) {
            row *= c as f64;
        }
        d_s += &self.stats.sums * d_cross.transpose();

        let grads: Vec<Vec<f64>> = self
            .terms
            .par_iter()
            .zip(caches.par_iter())
            .enumerate()
            .filter_map(|(c, (term, cache))| match (term, cache) {
                (ClassTerm::Learned(def), Some(cache)) => Some(self.class_backward(def, cache, s.row(c), d_s.row(c))),
                _ => None,
            })
            .collect();
        let mut grad = vec![0.0; self.dim];
        for g in grads {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((loss, grad))
    }

    fn class_backward(
        &self,
        def: &EmbeddedDefinition,
        cache: &ForwardCache,
        s: nalgebra::MatrixView1xX<'_, f64, nalgebra::U1, nalgebra::Dyn>,
        d_s: nalgebra::MatrixView1xX<'_, f64, nalgebra::U1, nalgebra::Dyn>,
    ) -> Vec<f64> {
        // s = u/‖u‖  ⇒  ∂L/∂u = (I − s sᵀ) ∂L/∂s / ‖u‖
        let radial = s.dot(&d_s);
        let d_u: Vec<f64> = (0..self.dim)
            .map(|j| (d_s[j] - s[j] * radial) / cache.unnormalized_norm)
            .collect();
        // u = Σ α_n w_n
        let d_alpha: Vec<f64> = (0..def.len())
            .map(|i| def.row(i).iter().zip(&d_u).map(|(w, g)| w * g).sum())
            .collect();
        // softmax
        let mean: f64 = cache.weights.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
        // v_n = θᵀ w_n
        let mut grad = vec![0.0; self.dim];
        for (i, (&alpha, &g)) in cache.weights.iter().zip(&d_alpha).enumerate() {
            let d_v = alpha * (g - mean);
            for (acc, &w) in grad.iter_mut().zip(def.row(i)) {
                *acc += d_v * w;
            }
        }
        grad
    }
}

/// Ridge loss of the `Def_attention` prototypes induced by `theta`.
pub fn attention_loss(
    theta: &[f64],
    x: &FeatureMatrix,
    catalog: &ClassCatalog,
    emb: &EmbeddingTable,
    lambda: f64,
) -> Result<f64> {
    AttentionProblem::new(x, catalog, emb, lambda)?.loss(theta)
}

/// Gradient of [`attention_loss`] with respect to `theta`.
pub fn attention_grad(
    theta: &[f64],
    x: &FeatureMatrix,
    catalog: &ClassCatalog,
    emb: &EmbeddingTable,
    lambda: f64,
) -> Result<Vec<f64>> {
    Ok(AttentionProblem::new(x, catalog, emb, lambda)?.loss_and_grad(theta)?.1)
}

fn initial_theta(dim: usize, cfg: &TrainConfig) -> Vec<f64> {
    match cfg.init {
        Init::Zero => vec![0.0; dim],
        Init::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let normal = Normal::new(0.0, RANDOM_INIT_STD).expect("valid std");
            (0..dim).map(|_| normal.sample(&mut rng)).collect()
        }
    }
}

/// Fits `θ` with full-batch gradient descent and a backtracking line search.
///
/// Each epoch takes one step along the negative gradient. The trial step
/// starts at twice the last accepted one (unit length in `θ` for the first
/// epoch) and is halved, at most 30 times, until the loss does not increase;
/// if no trial is accepted, `θ` is left unchanged for that epoch.
pub fn train_attention(
    x: &FeatureMatrix,
    catalog: &ClassCatalog,
    emb: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<AttentionModel> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidParam("epochs must be at least 1".into()));
    }
    let problem = AttentionProblem::new(x, catalog, emb, cfg.lambda)?;
    train_problem(&problem, cfg)
}

pub fn train_problem(problem: &AttentionProblem, cfg: &TrainConfig) -> Result<AttentionModel> {
    let mut theta = initial_theta(problem.dim(), cfg);
    let (mut loss, _) = problem.loss_and_grad(&theta)?;
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    log.push(loss);
    let mut step: Option<f64> = None;

    for epoch in 1..=cfg.epochs {
        let (_, grad) = problem.loss_and_grad(&theta)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(epoch));
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm > 0.0 {
            let mut eta = step.map_or(1.0 / gnorm, |s| 2.0 * s);
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
                // a trial step that breaks the solve counts as a loss increase
                if let Ok(trial_loss) = problem.loss(&trial) {
                    if trial_loss <= loss {
                        theta = trial;
                        loss = trial_loss;
                        step = Some(eta);
                        break;
                    }
                }
                eta *= 0.5;
            }
        }
        log.push(loss);
    }

    Ok(AttentionModel {
        theta,
        seed: cfg.seed,
        training_log: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{parse_class_catalog, parse_embedding_table, ClassRecord};
    use crate::prototypes::def_average_prototype;
    use rand::Rng;

    fn catalog(defs: &[&str]) -> ClassCatalog {
        let records = defs
            .iter()
            .enumerate()
            .map(|(i, d)| ClassRecord {
                class_id: format!("c{i}"),
                lemma_names: vec![format!("name{i}")],
                lemmas: vec![vec![format!("name{i}")]],
                definition: d.to_string(),
                parent: None,
            })
            .collect();
        ClassCatalog::from_records(records).unwrap()
    }

    fn random_table(rng: &mut ChaCha8Rng, words: &[&str], k: usize) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(k).unwrap();
        for w in words.iter().chain(&["thing"]) {
            let v: Vec<f32> = (0..k).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            t.insert(*w, &v).unwrap();
        }
        t
    }

    fn features(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, d: usize) -> FeatureMatrix {
        let n = classes * per_class;
        let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let labels = (0..n).map(|i| format!("c{}", i % classes)).collect();
        FeatureMatrix::new(d, data, labels).unwrap()
    }

    #[test]
    fn zero_theta_is_def_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = random_table(&mut rng, &["a", "b", "c", "d"], 4);
        let cat = catalog(&["a b c", "d a", "zzz", "c"]);
        let (set, reports) = attention_forward(&[0.0; 4], &cat, &emb).unwrap();
        for (i, class) in cat.classes().iter().enumerate() {
            let mut avg = def_average_prototype(class, &emb).unwrap();
            normalize(&mut avg).unwrap();
            // uniform weights: same vector up to rounding of 1/n
            for (a, b) in set.row(i).iter().zip(&avg) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert_eq!(reports.len(), 3);
    }

    #[test]
    fn single_token_ignores_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = random_table(&mut rng, &["a", "b"], 3);
        let cat = catalog(&["a"]);
        let (p0, _) = attention_forward(&[0.0; 3], &cat, &emb).unwrap();
        let (p1, _) = attention_forward(&[5.0, -3.0, 2.0], &cat, &emb).unwrap();
        assert_eq!(p0.row(0), p1.row(0));
        let mut a: Vec<f64> = emb.get("a").unwrap().iter().map(|&v| v as f64).collect();
        normalize(&mut a).unwrap();
        assert_eq!(p0.row(0), &a[..]);
    }

    #[test]
    fn aligned_theta_favors_token() {
        let emb = parse_embedding_table("a 1 0 0\nb 0 1 0\nc 0 0 1\nthing 1 1 1".as_bytes()).unwrap();
        let cat = catalog(&["a b c"]);
        let (_, reports) = attention_forward(&[2.0, -1.0, -1.0], &cat, &emb).unwrap();
        let w: Vec<f64> = reports[0].weights.iter().map(|(_, w)| *w).collect();
        // softmax([2, -1, -1])
        let z = 2f64.exp() + 2.0 * (-1f64).exp();
        assert!((w[0] - 2f64.exp() / z).abs() < 1e-15);
        assert!(w[0] > w[1] && w[0] > w[2]);
    }

    #[test]
    fn single_token_definitions_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = random_table(&mut rng, &["a", "b", "c"], 4);
        let cat = catalog(&["a", "b", "c"]);
        let x = features(&mut rng, 3, 4, 5);
        let g = attention_grad(&[0.3, -0.2, 0.1, 0.5], &x, &cat, &emb, 0.1).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let model = train_attention(&x, &cat, &emb, &TrainConfig { epochs: 1, ..TrainConfig::new(0.1) }).unwrap();
        assert_eq!(model.theta, vec![0.0; 4]);
        assert_eq!(model.training_log.len(), 2);
    }

    #[test]
    fn scalar_embedding_gradient_vanishes() {
        // With K = 1 every normalized prototype is ±1, constant as long as the
        // weighted sum keeps its sign: the loss is flat in θ.
        let emb = parse_embedding_table("a 1\nb 3\nc 2\nd 0.5\nthing 1".as_bytes()).unwrap();
        let cat = catalog(&["a b", "c d a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = features(&mut rng, 2, 3, 2);
        for theta in [0.0, 0.7, -1.3] {
            let g = attention_grad(&[theta], &x, &cat, &emb, 0.05).unwrap();
            assert!(g[0].abs() < 1e-14, "{g:?}");
        }
    }

    #[test]
    fn loss_shift_invariance() {
        // adding a direction orthogonal to every embedding leaves all scores unchanged
        let emb = parse_embedding_table("a 1 0 0\nb 0 1 0\nc 1 1 0\nthing 1 1 0".as_bytes()).unwrap();
        let cat = catalog(&["a b", "b c", "a c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = features(&mut rng, 3, 3, 4);
        let p = AttentionProblem::new(&x, &cat, &emb, 0.1).unwrap();
        let l1 = p.loss(&[0.5, -0.5, 0.0]).unwrap();
        let l2 = p.loss(&[0.5, -0.5, 7.0]).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn training_is_monotone_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let words = ["a", "b", "c", "d", "e", "f"];
        let emb = random_table(&mut rng, &words, 5);
        let cat = catalog(&["a b c", "d e", "f a b", "c e f", "b d"]);
        let x = features(&mut rng, 5, 6, 7);
        let cfg = TrainConfig {
            epochs: 10,
            seed: 11,
            init: Init::Gaussian,
            lambda: 0.01,
        };
        let m1 = train_attention(&x, &cat, &emb, &cfg).unwrap();
        let m2 = train_attention(&x, &cat, &emb, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.training_log.len(), 11);
        assert!(m1.training_log.windows(2).all(|w| w[1] <= w[0]));
        assert!(m1.training_log.last() < m1.training_log.first());
        let mut buf = Vec::new();
        m1.write_json(&mut buf).unwrap();
        assert_eq!(AttentionModel::read_json(&buf[..]).unwrap(), m1);
    }

    #[test]
    fn zero_epochs_rejected() {
        let emb = parse_embedding_table("a 1 0\nthing 0 1".as_bytes()).unwrap();
        let cat = catalog(&["a"]);
        let x = FeatureMatrix::new(1, vec![1.0], vec!["c0".into()]).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::new(0.1) };
        assert!(train_attention(&x, &cat, &emb, &cfg).is_err());
    }

    #[test]
    fn catalog_text_input() {
        let cat = parse_class_catalog(
            r#"{"class_id":"c0","lemmas":["x"],"definition":"a b","parent":null}"#.as_bytes(),
        )
        .unwrap();
        let emb = parse_embedding_table("a 1 0\nb 0 1\nthing 1 1".as_bytes()).unwrap();
        let x = FeatureMatrix::new(2, vec![1.0, 0.0], vec!["c0".into()]).unwrap();
        assert!(attention_loss(&[0.0, 0.0], &x, &cat, &emb, 0.5).unwrap().is_finite());
    }

    fn gradient_problem(seed: u64) -> (FeatureMatrix, ClassCatalog, EmbeddingTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..14).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let emb = random_table(&mut rng, &refs, 10);
        let defs: Vec<String> = (0..6)
            .map(|_| {
                let len = rng.random_range(2..6);
                (0..len).map(|_| words[rng.random_range(0..words.len())].clone()).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let def_refs: Vec<&str> = defs.iter().map(String::as_str).collect();
        (features(&mut rng, 6, 5, 12), catalog(&def_refs), emb)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..4 {
            let (x, cat, emb) = gradient_problem(100 + seed);
            let p = AttentionProblem::new(&x, &cat, &emb, 0.01).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, grad) = p.loss_and_grad(&theta).unwrap();
            let h = 1e-5;
            let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1e-8);
            for k in 0..10 {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[k] += h;
                minus[k] -= h;
                let fd = (p.loss(&plus).unwrap() - p.loss(&minus).unwrap()) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / scale;
                assert!(rel < 1e-5, "seed {seed} k {k}: analytic {} numeric {fd}", grad[k]);
            }
        }
    }

    #[test]
    fn loss_at_zero_matches_ridge_on_def_average() {
        let (x, cat, emb) = gradient_problem(9);
        let lambda = 0.05;
        let (set, _) = crate::prototypes::build_prototype_set(
            &cat,
            &emb,
            Method::DefAverage,
            &PrototypeParams::default(),
            None,
        )
        .unwrap();
        let model = crate::ridge::fit_ridge_s2v(&x, &set, lambda).unwrap();
        let expected = model.loss(&x, &set).unwrap();
        let got = attention_loss(&[0.0; 10], &x, &cat, &emb, lambda).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn fallback_classes_are_constant() {
        let emb = parse_embedding_table("a 1 0\nb 0 1\nname0 1 1\nthing 1 1".as_bytes()).unwrap();
        let cat = catalog(&["unknown words", "a b"]);
        let x = FeatureMatrix::new(1, vec![1.0, 2.0, 0.5], vec!["c0".into(), "c1".into(), "c1".into()]).unwrap();
        let p = AttentionProblem::new(&x, &cat, &emb, 0.1).unwrap();
        let (_, g) = p.loss_and_grad(&[0.3, -0.1]).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }
}

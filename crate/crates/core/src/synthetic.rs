//! Seeded synthetic datasets with known generators, for tests, benchmarks and
//! the `synth` command.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{
    save_bundle, save_feature_matrix, write_class_catalog, write_embedding_table, ClassCatalog, ClassRecord,
    EmbeddingTable, FeatureMatrix, ParentLink, WordImageBundle,
};
use crate::prototypes::FALLBACK_TOKEN;

/// Dimension of the synthetic word-image features in bundles.
const BUNDLE_DIM: usize = 16;
const BUNDLE_ROWS: usize = 8;

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub embeddings: EmbeddingTable,
    pub catalog: ClassCatalog,
    /// Samples of the seen classes.
    pub train: FeatureMatrix,
    /// Samples of the unseen classes.
    pub test: FeatureMatrix,
    pub bundles: Vec<WordImageBundle>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    /// `K × D` map used to generate features from prototypes.
    pub generator: DMatrix<f64>,
    /// For each class, the definition word that generated its features
    /// (planted datasets only).
    pub planted: Vec<Option<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub seen: usize,
    pub unseen: usize,
    pub k: usize,
    pub d: usize,
    pub per_class: usize,
    /// Bound on the norm of the additive feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seen: 40,
            unseen: 10,
            k: 32,
            d: 64,
            per_class: 20,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn check(&self) -> Result<()> {
        if self.seen == 0 || self.unseen == 0 || self.k < 2 || self.d == 0 || self.per_class == 0 {
            return Err(Error::InvalidParam(
                "synthetic data needs seen, unseen, per_class, d >= 1 and k >= 2".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParam(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    fn classes(&self) -> usize {
        self.seen + self.unseen
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Noise vector with norm uniform in `[0, bound)`.
fn bounded_noise(rng: &mut ChaCha8Rng, d: usize, bound: f64) -> Vec<f64> {
    if bound == 0.0 {
        return vec![0.0; d];
    }
    let r = rng.random::<f64>() * bound;
    unit(gaussian(rng, d)).into_iter().map(|x| x * r).collect()
}

/// What an embedding row becomes once stored as `f32` and normalized.
fn stored_unit(v: &[f64]) -> (Vec<f32>, Vec<f64>) {
    let stored: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let back = unit(stored.iter().map(|&x| x as f64).collect());
    (stored, back)
}

fn bundle(rng: &mut ChaCha8Rng, token: &str, spread: f64) -> Result<WordImageBundle> {
    let center = gaussian(rng, BUNDLE_DIM);
    let rows: Vec<Vec<f64>> = (0..BUNDLE_ROWS)
        .map(|_| center.iter().map(|c| c + spread * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let features = FeatureMatrix::from_rows_f64(BUNDLE_DIM, rows.iter().map(|r| r.as_slice()), Vec::new())?;
    WordImageBundle::new(token, features)
}

/// Samples `x = W₀ᵀ s + η` for each class prototype, `per_class` times,
/// returning the seen and unseen feature matrices.
fn sample_features(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    w0: &DMatrix<f64>,
    ids: &[String],
    protos: &[Vec<f64>],
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let mut split = |range: std::ops::Range<usize>| -> Result<FeatureMatrix> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in range {
            let s = nalgebra::DVector::from_column_slice(&protos[c]);
            let mean = w0.tr_mul(&s);
            for _ in 0..cfg.per_class {
                let eta = bounded_noise(rng, cfg.d, cfg.noise);
                rows.push(mean.iter().zip(&eta).map(|(m, e)| m + e).collect::<Vec<f64>>());
                labels.push(ids[c].clone());
            }
        }
        FeatureMatrix::from_rows_f64(cfg.d, rows.iter().map(|r| r.as_slice()), labels)
    };
    let train = split(0..cfg.seen)?;
    let test = split(cfg.seen..cfg.classes())?;
    Ok((train, test))
}

fn generator(rng: &mut ChaCha8Rng, k: usize, d: usize) -> DMatrix<f64> {
    let scale = 1.0 / (k as f64).sqrt();
    DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn class_ids(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c:03}")).collect()
}

/// Linear recovery data: each class `c` is named by a single word `cls{c}`
/// (also its definition) whose embedding is the class prototype, and
/// features are `W₀ᵀ s_c` plus bounded noise. Classes are paired under ten
/// parent classes that are not part of the catalog.
pub fn ridge_recovery(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = class_ids(cfg.classes());
    let mut emb = EmbeddingTable::new(cfg.k)?;
    let mut protos = Vec::with_capacity(ids.len());
    let mut records = Vec::with_capacity(ids.len());
    let mut bundles = Vec::new();
    for (c, id) in ids.iter().enumerate() {
        let token = format!("cls{c}");
        let (stored, proto) = stored_unit(&unit(gaussian(&mut rng, cfg.k)));
        emb.insert(token.clone(), &stored)?;
        protos.push(proto);
        let spread = rng.random_range(0.1..1.0);
        bundles.push(bundle(&mut rng, &token, spread)?);
        records.push(ClassRecord {
            class_id: id.clone(),
            lemma_names: vec![token.clone()],
            lemmas: vec![vec![token.clone()]],
            definition: token,
            parent: Some(ParentLink::External(format!("group{}", c % 10))),
        });
    }
    let thing: Vec<f32> = unit(gaussian(&mut rng, cfg.k)).iter().map(|&x| x as f32).collect();
    emb.insert(FALLBACK_TOKEN, &thing)?;
    let w0 = generator(&mut rng, cfg.k, cfg.d);
    let (train, test) = sample_features(&mut rng, cfg, &w0, &ids, &protos)?;
    Ok(SyntheticDataset {
        embeddings: emb,
        catalog: ClassCatalog::from_records(records)?,
        train,
        test,
        bundles,
        seen: ids[..cfg.seen].to_vec(),
        unseen: ids[cfg.seen..].to_vec(),
        generator: w0,
        planted: vec![None; ids.len()],
    })
}

/// Number of filler words that accompany the planted word in a definition.
pub const PLANTED_FILLERS: usize = 3;
const FILLER_VOCABULARY: usize = 24;

/// Definition data with one planted "visual" word per class.
///
/// Class `c` is defined by `vis{c}` and three filler words drawn from a
/// shared vocabulary; only `vis{c}` generates the features. Visual words
/// carry a positive and fillers a negative component along the first
/// embedding axis, so a single attention direction separates them. In the
/// bundles, visual words form tight clusters and fillers spread ones.
pub fn planted_visual_tokens(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = class_ids(cfg.classes());
    let mut emb = EmbeddingTable::new(cfg.k)?;
    let mut bundles = Vec::new();

    let word = |rng: &mut ChaCha8Rng, sign: f64| -> Vec<f64> {
        let mut v = unit(gaussian(rng, cfg.k));
        v[0] = 0.5 * sign;
        v
    };
    let fillers: Vec<String> = (0..FILLER_VOCABULARY).map(|j| format!("filler{j}")).collect();
    for f in &fillers {
        let v = word(&mut rng, -1.0);
        emb.insert(f.clone(), &stored_unit(&v).0)?;
        bundles.push(bundle(&mut rng, f, 1.0)?);
    }

    let mut protos = Vec::with_capacity(ids.len());
    let mut records = Vec::with_capacity(ids.len());
    let mut planted = Vec::with_capacity(ids.len());
    for (c, id) in ids.iter().enumerate() {
        let vis = format!("vis{c}");
        let (stored, proto) = stored_unit(&word(&mut rng, 1.0));
        emb.insert(vis.clone(), &stored)?;
        protos.push(proto);
        bundles.push(bundle(&mut rng, &vis, 0.05)?);

        let name = format!("name{c}");
        emb.insert(name.clone(), &stored_unit(&unit(gaussian(&mut rng, cfg.k))).0)?;

        let mut words: Vec<String> = fillers.choose_multiple(&mut rng, PLANTED_FILLERS).cloned().collect();
        let at = rng.random_range(0..=words.len());
        words.insert(at, vis.clone());
        records.push(ClassRecord {
            class_id: id.clone(),
            lemma_names: vec![name.clone()],
            lemmas: vec![vec![name]],
            definition: words.join(" "),
            parent: None,
        });
        planted.push(Some(vis));
    }
    let thing: Vec<f32> = unit(gaussian(&mut rng, cfg.k)).iter().map(|&x| x as f32).collect();
    emb.insert(FALLBACK_TOKEN, &thing)?;
    let w0 = generator(&mut rng, cfg.k, cfg.d);
    let (train, test) = sample_features(&mut rng, cfg, &w0, &ids, &protos)?;
    Ok(SyntheticDataset {
        embeddings: emb,
        catalog: ClassCatalog::from_records(records)?,
        train,
        test,
        bundles,
        seen: ids[..cfg.seen].to_vec(),
        unseen: ids[cfg.seen..].to_vec(),
        generator: w0,
        planted,
    })
}

impl SyntheticDataset {
    /// Writes `embeddings.txt`, `classes.jsonl`, `train.zf`, `test.zf` and a
    /// `bundles/` directory under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let emb_path = dir.join("embeddings.txt");
        let file = fs::File::create(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
        write_embedding_table(&self.embeddings, std::io::BufWriter::new(file))?;
        let cat_path = dir.join("classes.jsonl");
        let file = fs::File::create(&cat_path).map_err(|e| Error::io(&cat_path, e))?;
        write_class_catalog(&self.catalog, std::io::BufWriter::new(file))?;
        save_feature_matrix(&self.train, &dir.join("train.zf"))?;
        save_feature_matrix(&self.test, &dir.join("test.zf"))?;
        let bdir = dir.join("bundles");
        fs::create_dir_all(&bdir).map_err(|e| Error::io(&bdir, e))?;
        for b in &self.bundles {
            save_bundle(&bdir, b)?;
        }
        Ok(())
    }
}

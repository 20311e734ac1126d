//! Word visualness: how tightly the image features retrieved for a word
//! cluster around their mean.
//!
//! For a word with image features `r_1 .. r_M` and centroid `r̄`, the score is
//! `v = -(1/M) Σ ‖r_m − r̄‖₂`. Scores are never positive; a word whose images
//! all look alike scores close to 0. The scale is left as computed, callers
//! absorb it with a softmax temperature.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::WordImageBundle;

/// Visualness of one word from its image-feature bundle.
pub fn word_visualness(bundle: &WordImageBundle) -> Result<f64> {
    let m = &bundle.features;
    let rows = m.rows();
    if rows == 0 {
        return Err(Error::InvalidParam(format!("bundle `{}` has no rows", bundle.token)));
    }
    let dim = m.dim();
    let mut mean = vec![0.0f64; dim];
    for i in 0..rows {
        for (acc, &v) in mean.iter_mut().zip(m.row(i)) {
            *acc += v as f64;
        }
    }
    for v in &mut mean {
        *v /= rows as f64;
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("bundle `{}`", bundle.token)));
    }

    let total: f64 = (0..rows)
        .map(|i| {
            m.row(i)
                .iter()
                .zip(&mean)
                .map(|(&r, &c)| {
                    let d = r as f64 - c;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(-total / rows as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualnessTable {
    scores: BTreeMap<String, f64>,
    fallback: f64,
}

#[derive(Serialize, Deserialize)]
struct VisualnessFile {
    fallback: f64,
    scores: BTreeMap<String, f64>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl VisualnessTable {
    /// Builds a table from precomputed scores; the fallback is their median.
    pub fn from_scores(scores: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((t, v)) = scores.iter().find(|(_, v)| !v.is_finite() || **v > 0.0) {
            return Err(Error::InvalidParam(format!(
                "visualness of `{t}` must be finite and non-positive, got {v}"
            )));
        }
        let mut values: Vec<f64> = scores.values().copied().collect();
        let fallback = median(&mut values);
        Ok(VisualnessTable { scores, fallback })
    }

    pub fn get(&self, token: &str) -> Option<f64> {
        self.scores.get(token).copied()
    }

    /// Score of `token`, or the table's fallback when it has none.
    pub fn score(&self, token: &str) -> f64 {
        self.get(token).unwrap_or(self.fallback)
    }

    pub fn fallback(&self) -> f64 {
        self.fallback
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.scores.iter().map(|(t, &v)| (t.as_str(), v))
    }

    /// Histogram of the mean distance to the centroid (`-v`) over `bins`
    /// equal-width buckets spanning the observed range.
    pub fn histogram(&self, bins: usize) -> Vec<HistogramBucket> {
        if self.scores.is_empty() || bins == 0 {
            return Vec::new();
        }
        let dists: Vec<f64> = self.scores.values().map(|v| -v).collect();
        let lo = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = dists.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for d in dists {
            let b = (((d - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBucket {
                lo: lo + i as f64 * width,
                hi: lo + (i + 1) as f64 * width,
                count,
            })
            .collect()
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        let file = VisualnessFile {
            fallback: self.fallback,
            scores: self.scores.clone(),
        };
        serde_json::to_writer_pretty(writer, &file)?;
        Ok(())
    }

    /// Reads a table written by [`VisualnessTable::write_json`]. The stored
    /// fallback must agree with the median of the stored scores.
    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let file: VisualnessFile = serde_json::from_reader(reader)?;
        let table = VisualnessTable::from_scores(file.scores)?;
        if (table.fallback - file.fallback).abs() > 1e-12 * (1.0 + table.fallback.abs()) {
            return Err(Error::InvalidParam(format!(
                "stored fallback {} differs from the median score {}",
                file.fallback, table.fallback
            )));
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub fn write_histogram_csv<W: Write>(buckets: &[HistogramBucket], mut writer: W) -> Result<()> {
    writeln!(writer, "bucket_lo,bucket_hi,count")?;
    for b in buckets {
        writeln!(writer, "{},{},{}", b.lo, b.hi, b.count)?;
    }
    Ok(())
}

/// Scores every bundle (in parallel) and collects the results.
pub fn build_visualness_table(bundles: &[WordImageBundle]) -> Result<VisualnessTable> {
    let scores: Vec<f64> = bundles.par_iter().map(word_visualness).collect::<Result<_>>()?;
    let mut map = BTreeMap::new();
    for (b, v) in bundles.iter().zip(scores) {
        if map.insert(b.token.clone(), v).is_some() {
            return Err(Error::DuplicateToken(b.token.clone()));
        }
    }
    VisualnessTable::from_scores(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::FeatureMatrix;
    use proptest::prelude::*;

    fn bundle(token: &str, dim: usize, data: Vec<f32>) -> WordImageBundle {
        WordImageBundle::new(token, FeatureMatrix::new(dim, data, vec![]).unwrap()).unwrap()
    }

    /// Reference: materialize the centroid and every distance explicitly.
    fn oracle(rows: &[Vec<f64>]) -> f64 {
        let m = rows.len() as f64;
        let d = rows[0].len();
        let centroid: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m).collect();
        let distances: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().zip(&centroid).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt())
            .collect();
        -distances.iter().sum::<f64>() / m
    }

    #[test]
    fn identical_rows_score_zero() {
        let b = bundle("x", 3, [1.5f32, -2.0, 0.25].repeat(4));
        assert_eq!(word_visualness(&b).unwrap(), 0.0);
    }

    #[test]
    fn two_points_hand_computed() {
        // centroid (1,0), both rows at distance 1
        let b = bundle("x", 2, vec![0.0, 0.0, 2.0, 0.0]);
        assert_eq!(word_visualness(&b).unwrap(), -1.0);
    }

    #[test]
    fn single_row_scores_zero() {
        let b = bundle("x", 2, vec![7.0, -3.0]);
        assert_eq!(word_visualness(&b).unwrap(), 0.0);
    }

    #[test]
    fn fallback_is_median() {
        let mut m = BTreeMap::new();
        m.insert("a".into(), -1.0);
        m.insert("b".into(), -2.0);
        m.insert("c".into(), -9.0);
        let t = VisualnessTable::from_scores(m).unwrap();
        assert_eq!(t.fallback(), -2.0);
        assert_eq!(t.score("absent"), -2.0);
        assert_eq!(t.score("c"), -9.0);
    }

    #[test]
    fn even_count_median_averages() {
        let m: BTreeMap<String, f64> = [("a", -1.0), ("b", -3.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        assert_eq!(VisualnessTable::from_scores(m).unwrap().fallback(), -2.0);
    }

    #[test]
    fn empty_table() {
        let t = build_visualness_table(&[]).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.fallback(), 0.0);
        assert_eq!(t.score("anything"), 0.0);
        assert!(t.histogram(10).is_empty());
    }

    #[test]
    fn duplicate_token_rejected() {
        let b = bundle("x", 1, vec![1.0]);
        assert!(matches!(
            build_visualness_table(&[b.clone(), b]),
            Err(Error::DuplicateToken(_))
        ));
    }

    #[test]
    fn positive_score_rejected() {
        let m: BTreeMap<String, f64> = [("a".to_string(), 0.5)].into();
        assert!(VisualnessTable::from_scores(m).is_err());
    }

    #[test]
    fn histogram_counts_every_word() {
        let bundles: Vec<_> = (0..7)
            .map(|i| bundle(&format!("w{i}"), 1, vec![0.0, i as f32]))
            .collect();
        let t = build_visualness_table(&bundles).unwrap();
        let h = t.histogram(3);
        assert_eq!(h.len(), 3);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 7);
        assert_eq!(h[0].lo, 0.0);
        assert!((h[2].hi - 3.0).abs() < 1e-12);
        let mut csv = Vec::new();
        write_histogram_csv(&h, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }

    #[test]
    fn json_round_trip() {
        let bundles = vec![bundle("cat", 2, vec![0.0, 0.0, 2.0, 0.0]), bundle("idea", 1, vec![0.0, 5.0])];
        let t = build_visualness_table(&bundles).unwrap();
        let mut buf = Vec::new();
        t.write_json(&mut buf).unwrap();
        assert_eq!(VisualnessTable::read_json(&buf[..]).unwrap(), t);
    }

    fn rows_strategy() -> impl Strategy<Value = (usize, Vec<f32>)> {
        (1usize..=100, 1usize..=64).prop_flat_map(|(m, d)| {
            (Just(d), proptest::collection::vec(-10.0f32..10.0, m * d))
        })
    }

    fn to_rows(d: usize, data: &[f32]) -> Vec<Vec<f64>> {
        data.chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_brute_force((d, data) in rows_strategy()) {
            let expected = oracle(&to_rows(d, &data));
            let got = word_visualness(&bundle("w", d, data)).unwrap();
            prop_assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1e-300), "{} vs {}", got, expected);
            prop_assert!(got <= 0.0);
        }

        #[test]
        fn permutation_invariant((d, data) in rows_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rows: Vec<&[f32]> = data.chunks(d).collect();
            rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f32> = rows.concat();
            let a = word_visualness(&bundle("w", d, data.clone())).unwrap();
            let b = word_visualness(&bundle("w", d, shuffled)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

//! Packed feature files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ZSF1"            4 bytes
//! dim               u32
//! rows              u64
//! data              rows * dim f32, row-major
//! labels_len        u64
//! labels            labels_len bytes of UTF-8, class ids joined by '\n'
//! ```
//!
//! An empty labels block marks an unlabeled matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZSF1";

/// Row-major matrix of 32-bit features with optional per-row class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<String>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::InvalidParam("zero dimension with non-empty data".into()));
        }
        if dim > 0 && !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidParam(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        let rows = data.len().checked_div(dim).unwrap_or(0);
        if !labels.is_empty() && labels.len() != rows {
            return Err(Error::LabelCount {
                labels: labels.len(),
                rows,
            });
        }
        if let Some(bad) = labels.iter().find(|l| l.is_empty() || l.contains('\n')) {
            return Err(Error::InvalidLabels(format!("label {bad:?} is empty or contains a newline")));
        }
        Ok(FeatureMatrix { dim, data, labels })
    }

    /// Builds a matrix from 64-bit rows, rounding to storage precision.
    pub fn from_rows_f64<'a>(
        dim: usize,
        rows: impl IntoIterator<Item = &'a [f64]>,
        labels: Vec<String>,
    ) -> Result<Self> {
        let mut data = Vec::new();
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        FeatureMatrix::new(dim, data, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }

    /// Scales every row to unit ℓ2 norm (zero rows are left untouched).
    pub fn normalize_rows(&mut self) {
        if self.dim == 0 {
            return;
        }
        for row in self.data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = ((*v as f64) / norm) as f32;
                }
            }
        }
    }

    /// True when every row has unit norm within `1e-6`.
    pub fn is_normalized(&self) -> bool {
        (0..self.rows()).all(|i| {
            let n = self.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            (n - 1.0).abs() <= 1e-6
        })
    }

    /// Keeps only the rows whose label satisfies `keep`.
    pub fn filter_rows(&self, keep: impl Fn(&str) -> bool) -> FeatureMatrix {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            if keep(l) {
                data.extend_from_slice(self.row(i));
                labels.push(l.clone());
            }
        }
        FeatureMatrix {
            dim: self.dim,
            data,
            labels,
        }
    }
}

fn read_exact_section<R: Read>(r: &mut R, buf: &mut [u8], section: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    section,
                    expected: buf.len() as u64,
                    found: filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_feature_matrix<R: Read>(mut reader: R) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 4];
    read_exact_section(&mut reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut header = [0u8; 12];
    read_exact_section(&mut reader, &mut header, "header")?;
    let dim = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(header[4..12].try_into().unwrap());

    let payload_len = rows
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidParam("matrix size overflows".into()))?;
    // Read in bounded chunks so a corrupt header cannot force a huge allocation.
    let mut payload = Vec::new();
    let mut remaining = payload_len;
    let mut chunk = vec![0u8; 1 << 20];
    while remaining > 0 {
        let n = remaining.min(chunk.len() as u64) as usize;
        read_exact_section(&mut reader, &mut chunk[..n], "payload").map_err(|e| match e {
            Error::Truncated { found, .. } => Error::Truncated {
                section: "payload",
                expected: payload_len,
                found: payload_len - remaining + found,
            },
            e => e,
        })?;
        payload.extend_from_slice(&chunk[..n]);
        remaining -= n as u64;
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("packed payload".into()));
    }

    let mut len_buf = [0u8; 8];
    read_exact_section(&mut reader, &mut len_buf, "labels length")?;
    let labels_len = u64::from_le_bytes(len_buf);
    let mut block = Vec::new();
    let read = reader.by_ref().take(labels_len).read_to_end(&mut block)?;
    if (read as u64) < labels_len {
        return Err(Error::Truncated {
            section: "labels",
            expected: labels_len,
            found: read as u64,
        });
    }
    let mut rest = Vec::new();
    let extra = reader.read_to_end(&mut rest)?;
    if extra > 0 {
        return Err(Error::TrailingBytes(extra as u64));
    }

    let labels: Vec<String> = if block.is_empty() {
        Vec::new()
    } else {
        let text = String::from_utf8(block).map_err(|e| Error::InvalidLabels(e.to_string()))?;
        text.split('\n').map(str::to_owned).collect()
    };
    let rows = rows as usize;
    if !labels.is_empty() && labels.len() != rows {
        return Err(Error::LabelCount {
            labels: labels.len(),
            rows,
        });
    }
    if labels.iter().any(String::is_empty) {
        return Err(Error::InvalidLabels("empty label".into()));
    }
    if dim == 0 && rows > 0 {
        return Err(Error::InvalidParam("zero dimension with non-zero rows".into()));
    }
    FeatureMatrix::new(dim, data, labels)
}

pub fn write_feature_matrix<W: Write>(m: &FeatureMatrix, mut writer: W) -> Result<()> {
    let dim = u32::try_from(m.dim).map_err(|_| Error::InvalidParam("dimension exceeds u32".into()))?;
    writer.write_all(MAGIC)?;
    writer.write_all(&dim.to_le_bytes())?;
    writer.write_all(&(m.rows() as u64).to_le_bytes())?;
    for v in &m.data {
        writer.write_all(&v.to_le_bytes())?;
    }
    let block = m.labels.join("\n");
    writer.write_all(&(block.len() as u64).to_le_bytes())?;
    writer.write_all(block.as_bytes())?;
    Ok(())
}

pub fn feature_matrix_to_bytes(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.data.len() * 4);
    write_feature_matrix(m, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn load_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_matrix(BufReader::new(file)).map_err(|e| Error::in_file(path, e))
}

pub fn save_feature_matrix(m: &FeatureMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_feature_matrix(m, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::new(2, vec![1.0, -2.5, 0.0, 3.25], vec!["n01".into(), "n02".into()]).unwrap()
    }

    #[test]
    fn empty_matrix_is_valid() {
        let m = FeatureMatrix::new(2048, vec![], vec![]).unwrap();
        let bytes = feature_matrix_to_bytes(&m);
        assert_eq!(bytes.len(), 4 + 4 + 8 + 8);
        let back = read_feature_matrix(&bytes[..]).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.dim(), 2048);
        assert!(back.labels().is_empty());
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = feature_matrix_to_bytes(&sample());
        assert_eq!(&bytes[0..4], b"ZSF1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[32..40], &7u64.to_le_bytes());
        assert_eq!(&bytes[40..], b"n01\nn02");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = feature_matrix_to_bytes(&sample());
        bytes[3] = b'2';
        assert!(matches!(read_feature_matrix(&bytes[..]), Err(Error::BadMagic(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = feature_matrix_to_bytes(&sample());
        let cut = &bytes[..16 + 10];
        match read_feature_matrix(cut) {
            Err(Error::Truncated { section: "payload", expected: 16, found: 10 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_labels() {
        let bytes = feature_matrix_to_bytes(&sample());
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(
            read_feature_matrix(cut),
            Err(Error::Truncated { section: "labels", .. })
        ));
    }

    #[test]
    fn label_count_mismatch() {
        let mut bytes = feature_matrix_to_bytes(&sample());
        bytes.truncate(32);
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(b"n01");
        assert!(matches!(
            read_feature_matrix(&bytes[..]),
            Err(Error::LabelCount { labels: 1, rows: 2 })
        ));
    }

    #[test]
    fn trailing_bytes() {
        let mut bytes = feature_matrix_to_bytes(&sample());
        bytes.push(0);
        assert!(matches!(read_feature_matrix(&bytes[..]), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn non_finite_payload() {
        let mut bytes = feature_matrix_to_bytes(&sample());
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_feature_matrix(&bytes[..]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn normalize() {
        let mut m = FeatureMatrix::new(2, vec![3.0, 4.0, 0.0, 2.0], vec![]).unwrap();
        assert!(!m.is_normalized());
        m.normalize_rows();
        assert!(m.is_normalized());
        assert_eq!(m.row(0), &[0.6f32, 0.8]);
    }

    fn matrix_strategy() -> impl Strategy<Value = FeatureMatrix> {
        (1usize..8, 0usize..10, any::<bool>()).prop_flat_map(|(dim, rows, labeled)| {
            let finite = any::<f32>().prop_filter("finite", |v| v.is_finite());
            (
                proptest::collection::vec(finite, dim * rows),
                proptest::collection::vec("[a-z0-9_]{1,6}", rows),
            )
                .prop_map(move |(data, labels)| {
                    let labels = if labeled { labels } else { vec![] };
                    FeatureMatrix::new(dim, data, labels).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn byte_round_trip(m in matrix_strategy()) {
            let bytes = feature_matrix_to_bytes(&m);
            let back = read_feature_matrix(&bytes[..]).unwrap();
            prop_assert_eq!(feature_matrix_to_bytes(&back), bytes);
            prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.labels(), m.labels());
        }
    }
}

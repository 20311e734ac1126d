//! Word embeddings in the plain-text format used by GloVe, word2vec and
//! fastText: one `token v1 ... vK` line per word, optionally preceded by a
//! `count dim` header line.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Token to vector map with a fixed dimensionality.
///
/// Vectors are stored as 32-bit floats in insertion order; lookups hand out
/// slices into the backing buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
    duplicates: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingTable {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
            duplicates: 0,
        })
    }

    /// Inserts a vector. Returns `Ok(false)` and keeps the existing entry when
    /// the token is already present.
    pub fn insert(&mut self, token: impl Into<String>, vector: &[f32]) -> Result<bool> {
        let token = token.into();
        if token.is_empty() {
            return Err(Error::InvalidParam("empty token".into()));
        }
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of `{token}`")));
        }
        if self.index.contains_key(&token) {
            self.duplicates += 1;
            return Ok(false);
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.data.extend_from_slice(vector);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of duplicate lines dropped while building the table.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    /// Exact, case-sensitive lookup.
    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index
            .get(token)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Lookup used by prototype builders: lowercase form first, then the
    /// token as written.
    pub fn lookup(&self, token: &str) -> Option<&[f32]> {
        let lower = token.to_lowercase();
        self.get(&lower).or_else(|| {
            if lower != token {
                self.get(token)
            } else {
                None
            }
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.tokens
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(t, v)| (t.as_str(), v))
    }
}

fn is_header(line: &str) -> bool {
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok())
}

/// Parses an embedding table from text.
pub fn parse_embedding_table<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    let mut values = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && is_header(line) {
            continue;
        }

        let mut fields = line.split_ascii_whitespace();
        let token = fields.next().expect("non-blank line has a field");
        values.clear();
        for field in fields {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::parse(lineno, format!("invalid number `{field}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(lineno, format!("non-finite value `{field}`")));
            }
            values.push(v);
        }

        let table = match table.as_mut() {
            Some(t) => t,
            None => {
                if values.is_empty() {
                    return Err(Error::parse(lineno, "no vector components"));
                }
                table.insert(EmbeddingTable::new(values.len())?)
            }
        };
        if values.len() != table.dim {
            return Err(Error::parse(
                lineno,
                format!("expected {} values, got {}", table.dim, values.len()),
            ));
        }
        table.insert(token, &values)?;
    }

    table.ok_or(Error::EmptyInput("embedding table has no data lines"))
}

/// Writes the table without a header. Values use the shortest
/// representation that parses back to the same `f32`.
pub fn write_embedding_table<W: Write>(table: &EmbeddingTable, mut writer: W) -> Result<()> {
    for (token, vector) in table.iter() {
        write!(writer, "{token}")?;
        for v in vector {
            write!(writer, " {v}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

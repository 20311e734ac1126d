//! Parsers and writers for every on-disk input: embedding tables, class
//! catalogs, packed feature matrices and word image bundles.

mod bundles;
mod catalog;
mod embedding;
mod packed;
mod tokenize;

pub use bundles::{bundle_file_name, load_word_image_bundles, save_bundle, WordImageBundle, BUNDLE_EXTENSION};
pub use catalog::{parse_class_catalog, write_class_catalog, ClassCatalog, ClassRecord, ParentLink};
pub use embedding::{parse_embedding_table, write_embedding_table, EmbeddingTable};
pub use packed::{
    feature_matrix_to_bytes, load_feature_matrix, read_feature_matrix, save_feature_matrix, write_feature_matrix,
    FeatureMatrix, MAGIC,
};
pub use tokenize::{tokenize_definition, tokenize_lemma};

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};

pub fn load_embedding_table(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_table(BufReader::new(file)).map_err(|e| Error::in_file(path, e))
}

pub fn load_class_catalog(path: &Path) -> Result<ClassCatalog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_class_catalog(BufReader::new(file)).map_err(|e| Error::in_file(path, e))
}

//! Per-word image-feature bundles: a directory holding one packed feature
//! file per token, named `<percent-encoded token>.zf`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

use super::packed::{load_feature_matrix, save_feature_matrix, FeatureMatrix};
use crate::error::{Error, Result};

pub const BUNDLE_EXTENSION: &str = "zf";

const FILENAME_SET: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.');

/// Image features retrieved for one word, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct WordImageBundle {
    pub token: String,
    pub features: FeatureMatrix,
}

impl WordImageBundle {
    pub fn new(token: impl Into<String>, features: FeatureMatrix) -> Result<Self> {
        let token = token.into();
        if features.rows() == 0 {
            return Err(Error::InvalidParam(format!("bundle `{token}` has no rows")));
        }
        Ok(WordImageBundle { token, features })
    }
}

pub fn bundle_file_name(token: &str) -> String {
    format!("{}.{BUNDLE_EXTENSION}", utf8_percent_encode(token, FILENAME_SET))
}

pub fn save_bundle(dir: &Path, bundle: &WordImageBundle) -> Result<PathBuf> {
    let path = dir.join(bundle_file_name(&bundle.token));
    save_feature_matrix(&bundle.features, &path)?;
    Ok(path)
}

/// Loads every `*.zf` file in `dir`, sorted by file name. Other files are
/// ignored; an empty directory yields an empty list.
pub fn load_word_image_bundles(dir: &Path) -> Result<Vec<WordImageBundle>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some(BUNDLE_EXTENSION) && path.is_file() {
            files.push(path);
        }
    }
    files.sort();

    let mut seen = HashSet::new();
    let mut bundles = Vec::with_capacity(files.len());
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::in_file(&path, Error::InvalidParam("file name is not UTF-8".into())))?;
        let token = percent_decode_str(stem)
            .decode_utf8()
            .map_err(|e| Error::in_file(&path, Error::InvalidParam(e.to_string())))?
            .into_owned();
        if token.is_empty() {
            return Err(Error::in_file(&path, Error::InvalidParam("empty token".into())));
        }
        if !seen.insert(token.clone()) {
            return Err(Error::DuplicateToken(token));
        }
        let features = load_feature_matrix(&path)?;
        let bundle = WordImageBundle::new(token, features).map_err(|e| Error::in_file(&path, e))?;
        bundles.push(bundle);
    }
    Ok(bundles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(token: &str) -> WordImageBundle {
        WordImageBundle::new(token, FeatureMatrix::new(2, vec![0.0, 1.0, 2.0, 3.0], vec![]).unwrap()).unwrap()
    }

    #[test]
    fn two_files() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &bundle("dog")).unwrap();
        save_bundle(dir.path(), &bundle("cat")).unwrap();
        std::fs::write(dir.path().join("README"), "ignored").unwrap();
        let b = load_word_image_bundles(dir.path()).unwrap();
        let tokens: Vec<_> = b.iter().map(|b| b.token.as_str()).collect();
        assert_eq!(tokens, ["cat", "dog"]);
        assert_eq!(b[0].features.rows(), 2);
    }

    #[test]
    fn percent_decoding() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix::new(1, vec![1.0], vec![]).unwrap();
        save_feature_matrix(&m, &dir.path().join("new%20york.zf")).unwrap();
        let b = load_word_image_bundles(dir.path()).unwrap();
        assert_eq!(b[0].token, "new york");
        assert_eq!(bundle_file_name("new york"), "new%20york.zf");
        assert_eq!(bundle_file_name("a/b%"), "a%2Fb%25.zf");
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_word_image_bundles(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_decoded_token() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix::new(1, vec![1.0], vec![]).unwrap();
        save_feature_matrix(&m, &dir.path().join("a b.zf")).unwrap();
        save_feature_matrix(&m, &dir.path().join("a%20b.zf")).unwrap();
        assert!(matches!(
            load_word_image_bundles(dir.path()),
            Err(Error::DuplicateToken(t)) if t == "a b"
        ));
    }

    #[test]
    fn unreadable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cat.zf"), b"nope").unwrap();
        let err = load_word_image_bundles(dir.path()).unwrap_err();
        assert!(err.to_string().contains("cat.zf"), "{err}");
    }

    #[test]
    fn missing_directory() {
        let err = load_word_image_bundles(Path::new("/definitely/not/here")).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here"));
    }
}

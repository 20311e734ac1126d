//! Class catalogs as JSON Lines: one synset per line with its lemmas,
//! definition and optional parent.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde_json::{json, Value};

use super::tokenize::{tokenize_definition, tokenize_lemma};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParentLink {
    /// Index of the parent within the catalog.
    Internal(usize),
    /// Parent id that names no class in this catalog.
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class_id: String,
    /// Raw lemma strings as read.
    pub lemma_names: Vec<String>,
    /// Tokenized lemmas; every lemma has at least one token.
    pub lemmas: Vec<Vec<String>>,
    pub definition: String,
    pub parent: Option<ParentLink>,
}

impl ClassRecord {
    pub fn definition_tokens(&self) -> Vec<String> {
        tokenize_definition(&self.definition)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassCatalog {
    classes: Vec<ClassRecord>,
    index: HashMap<String, usize>,
}

impl ClassCatalog {
    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.index.get(class_id).copied()
    }

    pub fn get(&self, class_id: &str) -> Option<&ClassRecord> {
        self.index_of(class_id).map(|i| &self.classes[i])
    }

    pub fn parent_index(&self, idx: usize) -> Option<usize> {
        match self.classes[idx].parent {
            Some(ParentLink::Internal(p)) => Some(p),
            _ => None,
        }
    }

    /// Builds a catalog from records whose `parent` fields may still hold
    /// unresolved ids (as `External`). Resolves them and checks invariants.
    pub fn from_records(mut classes: Vec<ClassRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if c.class_id.is_empty() {
                return Err(Error::InvalidParam("empty class_id".into()));
            }
            if c.lemmas.is_empty() || c.lemmas.iter().any(|l| l.is_empty()) {
                return Err(Error::InvalidParam(format!(
                    "class `{}` needs at least one non-empty lemma",
                    c.class_id
                )));
            }
            if index.insert(c.class_id.clone(), i).is_some() {
                return Err(Error::DuplicateClass(c.class_id.clone()));
            }
        }
        for c in &mut classes {
            if let Some(ParentLink::External(id)) = &c.parent {
                if let Some(&p) = index.get(id) {
                    c.parent = Some(ParentLink::Internal(p));
                }
            }
        }
        let catalog = ClassCatalog { classes, index };
        catalog.check_acyclic()?;
        Ok(catalog)
    }

    fn check_acyclic(&self) -> Result<()> {
        // 0 = unvisited, 1 = on current path, 2 = done
        let mut state = vec![0u8; self.classes.len()];
        for start in 0..self.classes.len() {
            let mut path: Vec<usize> = Vec::new();
            let mut cur = Some(start);
            while let Some(i) = cur {
                match state[i] {
                    2 => break,
                    1 => {
                        let from = path.iter().position(|&p| p == i).unwrap();
                        let mut cycle: Vec<String> = path[from..]
                            .iter()
                            .map(|&p| self.classes[p].class_id.clone())
                            .collect();
                        cycle.push(self.classes[i].class_id.clone());
                        return Err(Error::ParentCycle(cycle));
                    }
                    _ => {
                        state[i] = 1;
                        path.push(i);
                        cur = self.parent_index(i);
                    }
                }
            }
            for p in path {
                state[p] = 2;
            }
        }
        Ok(())
    }

    /// Restricts the catalog to the given ids, in catalog order. Parent links
    /// to dropped classes become external.
    pub fn subset(&self, keep: &dyn Fn(&ClassRecord) -> bool) -> ClassCatalog {
        let records = self
            .classes
            .iter()
            .filter(|c| keep(c))
            .map(|c| {
                let mut c = c.clone();
                if let Some(ParentLink::Internal(p)) = c.parent {
                    c.parent = Some(ParentLink::External(self.classes[p].class_id.clone()));
                }
                c
            })
            .collect();
        ClassCatalog::from_records(records).expect("subset of a valid catalog is valid")
    }
}

fn required<'a>(obj: &'a serde_json::Map<String, Value>, key: &'static str, line: usize) -> Result<&'a Value> {
    obj.get(key).ok_or(Error::MissingKey { line, key })
}

fn parse_record(v: &Value, line: usize) -> Result<ClassRecord> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::parse(line, "expected a JSON object"))?;

    let class_id = required(obj, "class_id", line)?
        .as_str()
        .ok_or_else(|| Error::parse(line, "`class_id` must be a string"))?
        .to_owned();

    let lemma_names: Vec<String> = required(obj, "lemmas", line)?
        .as_array()
        .ok_or_else(|| Error::parse(line, "`lemmas` must be a list of strings"))?
        .iter()
        .map(|l| {
            l.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Error::parse(line, "`lemmas` must be a list of strings"))
        })
        .collect::<Result<_>>()?;
    let lemmas: Vec<Vec<String>> = lemma_names.iter().map(|l| tokenize_lemma(l)).collect();
    if lemmas.is_empty() || lemmas.iter().any(|l| l.is_empty()) {
        return Err(Error::parse(line, format!("class `{class_id}` has an empty lemma list or lemma")));
    }

    let definition = required(obj, "definition", line)?
        .as_str()
        .ok_or_else(|| Error::parse(line, "`definition` must be a string"))?
        .to_owned();

    let parent = match required(obj, "parent", line)? {
        Value::Null => None,
        Value::String(s) => Some(ParentLink::External(s.clone())),
        _ => return Err(Error::parse(line, "`parent` must be a string or null")),
    };

    Ok(ClassRecord {
        class_id,
        lemma_names,
        lemmas,
        definition,
        parent,
    })
}

/// Parses a JSON Lines class catalog. Blank lines are skipped.
pub fn parse_class_catalog<R: BufRead>(reader: R) -> Result<ClassCatalog> {
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let record = parse_record(&value, lineno)?;
        if seen.insert(record.class_id.clone(), lineno).is_some() {
            return Err(Error::DuplicateClass(record.class_id));
        }
        records.push(record);
    }
    ClassCatalog::from_records(records)
}

pub fn write_class_catalog<W: Write>(catalog: &ClassCatalog, mut writer: W) -> Result<()> {
    for c in catalog.classes() {
        let parent = match &c.parent {
            None => Value::Null,
            Some(ParentLink::Internal(p)) => Value::String(catalog.classes()[*p].class_id.clone()),
            Some(ParentLink::External(id)) => Value::String(id.clone()),
        };
        let line = json!({
            "class_id": c.class_id,
            "lemmas": c.lemma_names,
            "definition": c.definition,
            "parent": parent,
        });
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

//! JSON manifests for training sets and retrieval galleries.
//!
//! Paths inside a manifest are resolved relative to the manifest's own
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::fisher::l2_norm;
use crate::io::{read_descriptors, read_vector};
use crate::retrieval::{GalleryItem, QueryRelevance};
use crate::train::TrainingItem;

/// Accepts a label written either as a JSON string or an integer.
fn label<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Text(String),
        Int(i64),
    }
    Ok(match Raw::deserialize(de)? {
        Raw::Text(s) => s,
        Raw::Int(i) => i.to_string(),
    })
}

fn optional_label<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Option<String>, D::Error> {
    #[derive(Deserialize)]
    struct Wrap(#[serde(deserialize_with = "label")] String);
    Ok(Option::<Wrap>::deserialize(de)?.map(|w| w.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingEntry {
    pub id: String,
    #[serde(deserialize_with = "label")]
    pub class_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_patch_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingManifest {
    pub items: Vec<TrainingEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval: Vec<TrainingEntry>,
}

/// Whether a training set holds finished descriptors or raw patches that
/// must pass through the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Descriptors,
    RawPatches,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
    pub eval: Vec<TrainingItem>,
    pub kind: InputKind,
}

impl TrainingSet {
    pub fn input_dim(&self) -> usize {
        self.items[0].input.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_path: Option<String>,
    #[serde(default)]
    pub dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "optional_label")]
    pub class_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub id: String,
    pub relevant: Vec<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
    /// A query that is not itself a gallery item supplies its own vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryManifest {
    pub items: Vec<GalleryEntry>,
    #[serde(default)]
    pub queries: Vec<QueryEntry>,
}

/// What a gallery or query entry points at, after path resolution.
#[derive(Debug, Clone)]
pub enum Source {
    Vector(Vec<f64>),
    Descriptors(LocalDescriptorSet),
}

#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub id: String,
    pub dataset_tag: String,
    pub class_label: Option<String>,
    pub source: Source,
}

#[derive(Debug, Clone)]
pub struct LoadedGallery {
    pub items: Vec<LoadedEntry>,
    pub queries: Vec<(QueryEntry, Option<Source>)>,
}

impl LoadedGallery {
    pub fn relevance(&self) -> BTreeMap<String, QueryRelevance> {
        self.queries
            .iter()
            .map(|(q, _)| {
                (
                    q.id.clone(),
                    QueryRelevance {
                        relevant: q.relevant.iter().cloned().collect(),
                        ignore: q.ignore.iter().cloned().collect(),
                    },
                )
            })
            .collect()
    }

    /// Turns every entry into a gallery vector; descriptor entries go
    /// through `encode`. Stored vectors are re-normalized because the file
    /// format keeps single precision.
    pub fn resolve<F>(&self, encode: F) -> Result<(Vec<GalleryItem>, BTreeMap<String, Vec<f64>>)>
    where
        F: Fn(&LocalDescriptorSet) -> Result<Vec<f64>> + Sync,
    {
        let to_vec = |id: &str, s: &Source| -> Result<Vec<f64>> {
            match s {
                Source::Vector(v) => renormalize(id, v),
                Source::Descriptors(set) => encode(set),
            }
        };
        let items = self
            .items
            .iter()
            .map(|e| {
                Ok(GalleryItem {
                    id: e.id.clone(),
                    vector: to_vec(&e.id, &e.source)?,
                    dataset_tag: e.dataset_tag.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut queries = BTreeMap::new();
        for (q, s) in &self.queries {
            if let Some(s) = s {
                queries.insert(q.id.clone(), to_vec(&q.id, s)?);
            }
        }
        Ok((items, queries))
    }

    pub fn needs_encoder(&self) -> bool {
        self.items
            .iter()
            .map(|e| &e.source)
            .chain(self.queries.iter().filter_map(|(_, s)| s.as_ref()))
            .any(|s| matches!(s, Source::Descriptors(_)))
    }
}

fn renormalize(id: &str, v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Manifest(format!("vector of {id} has zero norm")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if id.is_empty() {
            return Err(Error::Manifest(format!("empty {what} id")));
        }
        if !seen.insert(id) {
            return Err(Error::Manifest(format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

fn one_path<'a>(id: &str, a: &'a Option<String>, b: &'a Option<String>, names: (&str, &str)) -> Result<(usize, &'a str)> {
    match (a, b) {
        (Some(p), None) => Ok((0, p)),
        (None, Some(p)) => Ok((1, p)),
        _ => Err(Error::Manifest(format!(
            "item {id} must have exactly one of {} and {}",
            names.0, names.1
        ))),
    }
}

pub fn read_training_manifest(path: &Path) -> Result<TrainingManifest> {
    read_json(path)
}

/// Parses a training manifest and loads every referenced file.
pub fn load_training_set(path: &Path) -> Result<TrainingSet> {
    let manifest = read_training_manifest(path)?;
    let base = base_dir(path);
    if manifest.items.is_empty() {
        return Err(Error::Manifest("training manifest lists no items".into()));
    }
    check_unique(manifest.items.iter().chain(&manifest.eval).map(|e| e.id.as_str()), "item")?;
    let mut kind = None;
    let mut dim = None;
    let mut load = |entries: &[TrainingEntry]| -> Result<Vec<TrainingItem>> {
        entries
            .iter()
            .map(|e| {
                let (which, rel) = one_path(&e.id, &e.descriptor_path, &e.raw_patch_path, ("descriptor_path", "raw_patch_path"))?;
                let this = if which == 0 { InputKind::Descriptors } else { InputKind::RawPatches };
                if *kind.get_or_insert(this) != this {
                    return Err(Error::Manifest("manifest mixes descriptor and raw patch items".into()));
                }
                if e.class_label.is_empty() {
                    return Err(Error::Manifest(format!("item {} has an empty class label", e.id)));
                }
                let input = read_descriptors(&base.join(rel))?;
                if *dim.get_or_insert(input.dim()) != input.dim() {
                    return Err(Error::Manifest(format!(
                        "item {} has dimension {}, expected {}",
                        e.id,
                        input.dim(),
                        dim.unwrap()
                    )));
                }
                Ok(TrainingItem {
                    id: e.id.clone(),
                    class_label: e.class_label.clone(),
                    input,
                })
            })
            .collect()
    };
    let items = load(&manifest.items)?;
    let eval = load(&manifest.eval)?;
    Ok(TrainingSet {
        items,
        eval,
        kind: kind.expect("at least one item"),
    })
}

pub fn read_gallery_manifest(path: &Path) -> Result<GalleryManifest> {
    read_json(path)
}

fn load_source(base: &Path, id: &str, vector: &Option<String>, descriptors: &Option<String>) -> Result<Source> {
    let (which, rel) = one_path(id, vector, descriptors, ("vector_path", "descriptor_path"))?;
    let full = base.join(rel);
    Ok(if which == 0 {
        Source::Vector(read_vector(&full)?)
    } else {
        Source::Descriptors(read_descriptors(&full)?)
    })
}

/// Parses a gallery manifest and loads every referenced file.
pub fn load_gallery(path: &Path) -> Result<LoadedGallery> {
    let manifest = read_gallery_manifest(path)?;
    let base = base_dir(path);
    check_unique(manifest.items.iter().map(|e| e.id.as_str()), "gallery item")?;
    check_unique(manifest.queries.iter().map(|q| q.id.as_str()), "query")?;
    let ids: BTreeSet<&str> = manifest.items.iter().map(|e| e.id.as_str()).collect();
    let items = manifest
        .items
        .iter()
        .map(|e| {
            Ok(LoadedEntry {
                id: e.id.clone(),
                dataset_tag: e.dataset_tag.clone(),
                class_label: e.class_label.clone(),
                source: load_source(&base, &e.id, &e.vector_path, &e.descriptor_path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = manifest
        .queries
        .iter()
        .map(|q| {
            let own = q.vector_path.is_some() || q.descriptor_path.is_some();
            if !own && !ids.contains(q.id.as_str()) {
                return Err(Error::Manifest(format!("query {} is not a gallery item and has no vector", q.id)));
            }
            let source = if own {
                Some(load_source(&base, &q.id, &q.vector_path, &q.descriptor_path)?)
            } else {
                None
            };
            Ok((q.clone(), source))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedGallery { items, queries })
}

/// Serializes with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_descriptors, write_vector};

    #[test]
    fn training_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = LocalDescriptorSet::new(2, 2, vec![0.5, 1.0, -1.0, 2.0]).unwrap();
        write_descriptors(&dir.path().join("a.fvd"), &set).unwrap();
        write_descriptors(&dir.path().join("b.fvd"), &set).unwrap();
        let text = r#"{"items":[{"id":"a","class_label":3,"descriptor_path":"a.fvd"}],
                      "eval":[{"id":"b","class_label":"x","descriptor_path":"b.fvd"}]}"#;
        fs::write(dir.path().join("m.json"), text).unwrap();
        let loaded = load_training_set(&dir.path().join("m.json")).unwrap();
        assert_eq!(loaded.items[0].class_label, "3");
        assert_eq!(loaded.eval[0].input, set);
        assert_eq!(loaded.kind, InputKind::Descriptors);
    }

    #[test]
    fn training_manifest_rejects_ambiguous_paths() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"items":[{"id":"a","class_label":"x","descriptor_path":"a","raw_patch_path":"b"}]}"#;
        fs::write(dir.path().join("m.json"), text).unwrap();
        assert!(matches!(load_training_set(&dir.path().join("m.json")), Err(Error::Manifest(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = LocalDescriptorSet::new(1, 1, vec![1.0]).unwrap();
        write_descriptors(&dir.path().join("a.fvd"), &set).unwrap();
        let text = r#"{"items":[{"id":"a","class_label":"x","descriptor_path":"a.fvd"},
                               {"id":"a","class_label":"y","descriptor_path":"a.fvd"}]}"#;
        fs::write(dir.path().join("m.json"), text).unwrap();
        assert!(load_training_set(&dir.path().join("m.json")).is_err());
    }

    #[test]
    fn gallery_vectors_are_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        write_vector(&dir.path().join("v.fvd"), &[0.6, 0.8]).unwrap();
        let text = r#"{"items":[{"id":"a","vector_path":"v.fvd","dataset_tag":"s"}],
                      "queries":[{"id":"a","relevant":["a"]}]}"#;
        fs::write(dir.path().join("g.json"), text).unwrap();
        let g = load_gallery(&dir.path().join("g.json")).unwrap();
        assert!(!g.needs_encoder());
        let (items, queries) = g.resolve(|_| unreachable!()).unwrap();
        assert!((l2_norm(&items[0].vector) - 1.0).abs() < 1e-15);
        assert!(queries.is_empty());
        assert!(g.relevance()["a"].relevant.contains("a"));
    }

    #[test]
    fn unknown_query_without_vector_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"items":[],"queries":[{"id":"q","relevant":[]}]}"#;
        fs::write(dir.path().join("g.json"), text).unwrap();
        assert!(load_gallery(&dir.path().join("g.json")).is_err());
    }
}

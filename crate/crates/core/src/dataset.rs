//! Embedding datasets: token occurrences, their sentences, and per-layer
//! vectors with precomputed lens values.
//!
//! On disk a dataset is a JSON manifest that names a sentences file and one
//! JSON Lines file per layer. See `docs/formats.md` for the record schemas.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lens::{L2Norm, Lens};

pub type PointId = u64;
pub type SentenceId = u64;

/// Relative tolerance between a stored lens value and the recomputed one.
pub const LENS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Record {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unknown label kind `{0}`")]
    UnknownLabelKind(String),
    #[error("unknown layer {0}")]
    UnknownLayer(u32),
    #[error("unknown point {0}")]
    UnknownPoint(PointId),
}

impl DatasetError {
    fn record(file: &Path, line: usize, message: impl Into<String>) -> Self {
        DatasetError::Record {
            file: file.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOccurrence {
    pub point_id: PointId,
    pub token: String,
    pub sentence_id: SentenceId,
    pub token_index: usize,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

/// Embeddings of every point at one layer, aligned with the dataset's
/// ascending point order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbeddings {
    pub layer: u32,
    pub dim: usize,
    point_ids: Vec<PointId>,
    vectors: Vec<Vec<f64>>,
    lens: Vec<f64>,
    index: HashMap<PointId, usize>,
}

impl LayerEmbeddings {
    /// Builds a layer and computes the L2 lens for every vector.
    pub fn new(layer: u32, entries: Vec<(PointId, Vec<f64>)>) -> Result<Self, DatasetError> {
        Self::with_lens(layer, entries, &L2Norm)
    }

    /// Builds a layer with a custom lens. Entries are sorted by point id.
    pub fn with_lens(
        layer: u32,
        mut entries: Vec<(PointId, Vec<f64>)>,
        lens: &dyn Lens,
    ) -> Result<Self, DatasetError> {
        entries.sort_by_key(|(id, _)| *id);
        let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, v)) in entries.iter().enumerate() {
            if v.len() != dim {
                return Err(DatasetError::record(
                    Path::new("<memory>"),
                    i + 1,
                    format!("dimension mismatch at point {id}"),
                ));
            }
            if index.insert(*id, i).is_some() {
                return Err(DatasetError::record(
                    Path::new("<memory>"),
                    i + 1,
                    format!("duplicate point_id {id}"),
                ));
            }
        }
        let lens_values = entries.iter().map(|(_, v)| lens.value(v)).collect();
        let (point_ids, vectors) = entries.into_iter().unzip();
        Ok(Self {
            layer,
            dim,
            point_ids,
            vectors,
            lens: lens_values,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }

    pub fn point_ids(&self) -> &[PointId] {
        &self.point_ids
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn lens_values(&self) -> &[f64] {
        &self.lens
    }

    pub fn position(&self, id: PointId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn vector(&self, id: PointId) -> Option<&[f64]> {
        self.position(id).map(|i| self.vectors[i].as_slice())
    }

    pub fn lens(&self, id: PointId) -> Option<f64> {
        self.position(id).map(|i| self.lens[i])
    }

    /// `(min, max)` of lens values, or `None` for an empty layer.
    pub fn lens_range(&self) -> Option<(f64, f64)> {
        let mut it = self.lens.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x))))
    }

    /// Replaces lens values with those of another lens function.
    pub fn relens(&mut self, lens: &dyn Lens) {
        self.lens = self.vectors.iter().map(|v| lens.value(v)).collect();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: SentenceId,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Exact,
    Prefix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    sentences: BTreeMap<SentenceId, Vec<String>>,
    occurrences: Vec<TokenOccurrence>,
    occurrence_index: HashMap<PointId, usize>,
    layers: BTreeMap<u32, LayerEmbeddings>,
    label_kinds: BTreeSet<String>,
    projections: Vec<ProjectionRef>,
}

/// Precomputed projection file referenced from the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRef {
    pub method: String,
    pub layer: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub sentences: PathBuf,
    pub layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_kinds: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub projections: Vec<ProjectionRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFile {
    pub layer: u32,
    pub path: PathBuf,
    /// Raw little-endian f32 matrix, one row per record of `path`, in record
    /// order. When present the JSONL records may omit `vector`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_f32: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingRecord {
    point_id: PointId,
    token: String,
    sentence_id: SentenceId,
    token_index: usize,
    #[serde(default)]
    labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lens: Option<f64>,
}

impl Dataset {
    /// Assembles and validates a dataset from in-memory parts.
    pub fn from_parts(
        name: impl Into<String>,
        sentences: Vec<SentenceRecord>,
        mut occurrences: Vec<TokenOccurrence>,
        layers: Vec<LayerEmbeddings>,
    ) -> Result<Self, DatasetError> {
        let mem = Path::new("<memory>");
        let mut sentence_map = BTreeMap::new();
        for (i, s) in sentences.into_iter().enumerate() {
            if sentence_map.insert(s.sentence_id, s.tokens).is_some() {
                return Err(DatasetError::record(
                    mem,
                    i + 1,
                    format!("duplicate sentence_id {}", s.sentence_id),
                ));
            }
        }
        occurrences.sort_by_key(|o| o.point_id);
        let mut occurrence_index = HashMap::with_capacity(occurrences.len());
        let mut label_kinds = BTreeSet::new();
        for (i, occ) in occurrences.iter().enumerate() {
            if occurrence_index.insert(occ.point_id, i).is_some() {
                return Err(DatasetError::record(
                    mem,
                    i + 1,
                    format!("duplicate point_id {}", occ.point_id),
                ));
            }
            check_occurrence(&sentence_map, occ).map_err(|m| DatasetError::record(mem, i + 1, m))?;
            label_kinds.extend(occ.labels.keys().cloned());
        }
        let mut layer_map = BTreeMap::new();
        for layer in layers {
            if layer.len() != occurrences.len()
                || occurrences
                    .iter()
                    .any(|o| layer.position(o.point_id).is_none())
            {
                return Err(DatasetError::Manifest {
                    path: mem.to_path_buf(),
                    message: format!("layer {} does not cover every occurrence", layer.layer),
                });
            }
            layer_map.insert(layer.layer, layer);
        }
        Ok(Self {
            name: name.into(),
            sentences: sentence_map,
            occurrences,
            occurrence_index,
            layers: layer_map,
            label_kinds,
            projections: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.occurrences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occurrences.is_empty()
    }

    pub fn occurrences(&self) -> &[TokenOccurrence] {
        &self.occurrences
    }

    pub fn occurrence(&self, id: PointId) -> Option<&TokenOccurrence> {
        self.occurrence_index.get(&id).map(|&i| &self.occurrences[i])
    }

    pub fn point_ids(&self) -> impl Iterator<Item = PointId> + '_ {
        self.occurrences.iter().map(|o| o.point_id)
    }

    pub fn sentence_tokens(&self, id: SentenceId) -> Option<&[String]> {
        self.sentences.get(&id).map(Vec::as_slice)
    }

    pub fn sentence_text(&self, id: SentenceId) -> Option<String> {
        self.sentences.get(&id).map(|t| t.join(" "))
    }

    pub fn sentences(&self) -> impl Iterator<Item = (SentenceId, &[String])> {
        self.sentences.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        self.layers.keys().copied().collect()
    }

    pub fn layer(&self, layer: u32) -> Result<&LayerEmbeddings, DatasetError> {
        self.layers.get(&layer).ok_or(DatasetError::UnknownLayer(layer))
    }

    pub fn layer_mut(&mut self, layer: u32) -> Result<&mut LayerEmbeddings, DatasetError> {
        self.layers
            .get_mut(&layer)
            .ok_or(DatasetError::UnknownLayer(layer))
    }

    pub fn label_kinds(&self) -> &BTreeSet<String> {
        &self.label_kinds
    }

    pub fn projections(&self) -> &[ProjectionRef] {
        &self.projections
    }

    /// Ids of occurrences whose token matches `query`.
    pub fn filter_tokens(&self, query: &str, mode: MatchMode) -> BTreeSet<PointId> {
        self.occurrences
            .iter()
            .filter(|o| match mode {
                MatchMode::Exact => o.token == query,
                MatchMode::Prefix => o.token.starts_with(query),
            })
            .map(|o| o.point_id)
            .collect()
    }

    /// Frequency of each value of `label_kind` among `point_ids`. Points
    /// without that label, or unknown to the dataset, are not counted.
    pub fn label_histogram<'a>(
        &self,
        point_ids: impl IntoIterator<Item = &'a PointId>,
        label_kind: &str,
    ) -> Result<BTreeMap<String, usize>, DatasetError> {
        if !self.label_kinds.contains(label_kind) {
            return Err(DatasetError::UnknownLabelKind(label_kind.to_string()));
        }
        let mut counts = BTreeMap::new();
        for id in point_ids {
            if let Some(value) = self.occurrence(*id).and_then(|o| o.labels.get(label_kind)) {
                *counts.entry(value.clone()).or_insert(0) += 1;
            }
        }
        Ok(counts)
    }

    /// Writes the dataset as a manifest plus JSONL files into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf, DatasetError> {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        let sentences_path = dir.join("sentences.jsonl");
        write_jsonl(
            &sentences_path,
            self.sentences.iter().map(|(id, tokens)| SentenceRecord {
                sentence_id: *id,
                tokens: tokens.clone(),
            }),
        )?;
        let mut layer_files = Vec::new();
        for (layer_id, layer) in &self.layers {
            let file = PathBuf::from(format!("layer{layer_id}.jsonl"));
            let records = self.occurrences.iter().map(|o| {
                let pos = layer.position(o.point_id).expect("validated layer");
                EmbeddingRecord {
                    point_id: o.point_id,
                    token: o.token.clone(),
                    sentence_id: o.sentence_id,
                    token_index: o.token_index,
                    labels: o.labels.clone(),
                    vector: Some(layer.vectors[pos].clone()),
                    lens: Some(layer.lens[pos]),
                }
            });
            write_jsonl(&dir.join(&file), records)?;
            layer_files.push(LayerFile {
                layer: *layer_id,
                path: file,
                raw_f32: None,
                dim: None,
            });
        }
        let manifest = Manifest {
            name: self.name.clone(),
            sentences: PathBuf::from("sentences.jsonl"),
            layers: layer_files,
            label_kinds: self.label_kinds.iter().cloned().collect(),
            projections: self.projections.clone(),
        };
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text + "\n").map_err(|e| DatasetError::io(&manifest_path, e))?;
        Ok(manifest_path)
    }
}

fn check_occurrence(
    sentences: &BTreeMap<SentenceId, Vec<String>>,
    occ: &TokenOccurrence,
) -> Result<(), String> {
    let Some(tokens) = sentences.get(&occ.sentence_id) else {
        return Err(format!(
            "dangling sentence_id {} at point {}",
            occ.sentence_id, occ.point_id
        ));
    };
    if occ.token_index >= tokens.len() {
        return Err(format!(
            "token_index {} out of range for sentence {} at point {}",
            occ.token_index, occ.sentence_id, occ.point_id
        ));
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = T>,
) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, &r).expect("record serializes");
        out.write_all(b"\n").map_err(|e| DatasetError::io(path, e))?;
    }
    out.flush().map_err(|e| DatasetError::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| DatasetError::record(path, i + 1, e.to_string()))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn read_raw_f32(path: &Path, rows: usize, dim: usize) -> Result<Vec<Vec<f64>>, DatasetError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DatasetError::io(path, e))?;
    if bytes.len() != rows * dim * 4 {
        return Err(DatasetError::record(
            path,
            0,
            format!(
                "raw matrix holds {} bytes, expected {rows}x{dim} f32 = {}",
                bytes.len(),
                rows * dim * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        })
        .collect())
}

/// Loads and validates a dataset from its JSON manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| DatasetError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    if manifest.layers.is_empty() {
        return Err(DatasetError::Manifest {
            path: manifest_path.to_path_buf(),
            message: "no layers declared".into(),
        });
    }

    let sentences_path = resolve(&manifest.sentences);
    let mut sentences = BTreeMap::new();
    for (line, rec) in read_jsonl::<SentenceRecord>(&sentences_path)? {
        if sentences.insert(rec.sentence_id, rec.tokens).is_some() {
            return Err(DatasetError::record(
                &sentences_path,
                line,
                format!("duplicate sentence_id {}", rec.sentence_id),
            ));
        }
    }

    let mut occurrences: Option<Vec<TokenOccurrence>> = None;
    let mut layers = BTreeMap::new();
    for lf in &manifest.layers {
        if layers.contains_key(&lf.layer) {
            return Err(DatasetError::Manifest {
                path: manifest_path.to_path_buf(),
                message: format!("layer {} declared twice", lf.layer),
            });
        }
        let path = resolve(&lf.path);
        let records = read_jsonl::<EmbeddingRecord>(&path)?;
        let raw = match &lf.raw_f32 {
            Some(raw) => {
                let dim = lf.dim.ok_or_else(|| DatasetError::Manifest {
                    path: manifest_path.to_path_buf(),
                    message: format!("layer {} has raw_f32 but no dim", lf.layer),
                })?;
                Some(read_raw_f32(&resolve(raw), records.len(), dim)?)
            }
            None => None,
        };
        let mut occs = Vec::with_capacity(records.len());
        let mut entries = Vec::with_capacity(records.len());
        let mut stored_lens = Vec::with_capacity(records.len());
        let mut seen = HashMap::with_capacity(records.len());
        let mut dim = lf.dim;
        for (row, (line, rec)) in records.into_iter().enumerate() {
            if seen.insert(rec.point_id, line).is_some() {
                return Err(DatasetError::record(
                    &path,
                    line,
                    format!("duplicate point_id {}", rec.point_id),
                ));
            }
            let vector = match (&raw, rec.vector) {
                (Some(raw), _) => raw[row].clone(),
                (None, Some(v)) => v,
                (None, None) => {
                    return Err(DatasetError::record(
                        &path,
                        line,
                        format!("missing vector at point {}", rec.point_id),
                    ))
                }
            };
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected {
                return Err(DatasetError::record(
                    &path,
                    line,
                    format!("dimension mismatch at point {}", rec.point_id),
                ));
            }
            let occ = TokenOccurrence {
                point_id: rec.point_id,
                token: rec.token,
                sentence_id: rec.sentence_id,
                token_index: rec.token_index,
                labels: rec.labels,
            };
            check_occurrence(&sentences, &occ).map_err(|m| DatasetError::record(&path, line, m))?;
            stored_lens.push((rec.point_id, line, rec.lens));
            entries.push((rec.point_id, vector));
            occs.push(occ);
        }
        match &occurrences {
            None => occurrences = Some(occs),
            Some(existing) => {
                let mut by_id: HashMap<PointId, &TokenOccurrence> =
                    existing.iter().map(|o| (o.point_id, o)).collect();
                for occ in &occs {
                    match by_id.remove(&occ.point_id) {
                        Some(prev) if prev.token == occ.token && prev.sentence_id == occ.sentence_id && prev.token_index == occ.token_index => {}
                        Some(_) => {
                            return Err(DatasetError::record(
                                &path,
                                seen[&occ.point_id],
                                format!("point {} disagrees with earlier layers", occ.point_id),
                            ))
                        }
                        None => {
                            return Err(DatasetError::record(
                                &path,
                                seen[&occ.point_id],
                                format!("point {} not present in earlier layers", occ.point_id),
                            ))
                        }
                    }
                }
                if let Some(missing) = by_id.keys().min() {
                    return Err(DatasetError::Manifest {
                        path: path.clone(),
                        message: format!("point {missing} has no vector in layer {}", lf.layer),
                    });
                }
            }
        }
        let layer = LayerEmbeddings::new(lf.layer, entries)?;
        for (id, line, stored) in stored_lens {
            if let Some(stored) = stored {
                let computed = layer.lens(id).expect("point in layer");
                if (computed - stored).abs() / stored.abs().max(1.0) > LENS_TOLERANCE {
                    log::warn!(
                        "{}:{line}: stored lens {stored} for point {id} differs from computed {computed}; using computed",
                        path.display()
                    );
                }
            }
        }
        layers.insert(lf.layer, layer);
    }

    let occurrences = occurrences.unwrap_or_default();
    let mut dataset = Dataset::from_parts(
        manifest.name,
        sentences
            .into_iter()
            .map(|(sentence_id, tokens)| SentenceRecord { sentence_id, tokens })
            .collect(),
        occurrences,
        layers.into_values().collect(),
    )?;
    dataset.label_kinds.extend(manifest.label_kinds);
    dataset.projections = manifest
        .projections
        .into_iter()
        .map(|p| ProjectionRef {
            path: resolve(&p.path),
            ..p
        })
        .collect();
    Ok(dataset)
}

//! Embedding datasets: a JSON manifest pointing at raw little-endian `f32`
//! blobs, plus an optional newline-delimited label file.
//!
//! Ground-truth identities are held behind [`LabelAccess`]. Only the oracle
//! annotator and the evaluator can mint that token, and any read attempted
//! while [`with_labels_sealed`] is active fails with [`DatasetError::LabelsSealed`].
//! The engine runs clustering, selection and training inside a sealed scope.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob size mismatch for {path}: expected {expected} bytes, found {found}")]
    BlobSizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: sample {id} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample ids must be 0..n in order; found {id} at position {position}")]
    NonSequentialId { position: usize, id: usize },
    #[error("g_path and g_dim must be given together")]
    IncompleteG,
    #[error("duplicate sample id {0}")]
    DuplicateId(usize),
    #[error("labels file has {found} entries, expected {expected}")]
    LabelCount { expected: usize, found: usize },
    #[error("invalid label on line {line}: {value:?}")]
    InvalidLabel { line: usize, value: String },
    #[error("sample {0} has a zero-norm feature vector")]
    ZeroNorm(usize),
    #[error("non-finite feature value in sample {0}")]
    NonFinite(usize),
    #[error("dataset has no ground-truth identities")]
    MissingIdentities,
    #[error("sample {0} has no ground-truth identity")]
    MissingIdentity(usize),
    #[error("identities with a single sample cannot be split: {0:?}")]
    SingletonIdentities(Vec<u32>),
    #[error("query fraction must lie in (0, 1), got {0}")]
    QueryFraction(f64),
    #[error("ground-truth labels are sealed in this scope")]
    LabelsSealed,
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

thread_local! {
    static SEAL_DEPTH: Cell<u32> = const { Cell::new(0) };
}

struct SealGuard;

impl Drop for SealGuard {
    fn drop(&mut self) {
        SEAL_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Runs `f` with ground-truth label reads disabled on this thread.
pub fn with_labels_sealed<R>(f: impl FnOnce() -> R) -> R {
    SEAL_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = SealGuard;
    f()
}

pub fn labels_sealed() -> bool {
    SEAL_DEPTH.with(|d| d.get() > 0)
}

/// Capability token required to read ground-truth identities.
#[derive(Debug)]
pub struct LabelAccess {
    _private: (),
}

impl LabelAccess {
    pub(crate) fn unlock() -> Self {
        LabelAccess { _private: () }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub base_feature: Vec<f64>,
    pub g_descriptor: Option<Vec<f64>>,
    identity: Option<u32>,
    pub image_ref: Option<String>,
}

impl Sample {
    pub fn new(
        id: usize,
        base_feature: Vec<f64>,
        g_descriptor: Option<Vec<f64>>,
        identity: Option<u32>,
        image_ref: Option<String>,
    ) -> Self {
        Sample {
            id,
            base_feature,
            g_descriptor,
            identity,
            image_ref,
        }
    }

    pub fn identity(&self, _access: &LabelAccess) -> Result<Option<u32>> {
        if labels_sealed() {
            return Err(DatasetError::LabelsSealed);
        }
        Ok(self.identity)
    }

    pub fn has_identity(&self) -> bool {
        self.identity.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub feature_dim: usize,
    pub features_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    samples: Vec<Sample>,
    feature_dim: usize,
    g_dim: Option<usize>,
    num_identities: Option<usize>,
}

impl EmbeddingDataset {
    /// Builds a dataset from samples whose ids must be `0..n` in order.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let feature_dim = samples.first().map_or(0, |s| s.base_feature.len());
        let g_dim = samples
            .first()
            .and_then(|s| s.g_descriptor.as_ref().map(Vec::len));
        let mut seen = BTreeSet::new();
        for (pos, s) in samples.iter().enumerate() {
            if !seen.insert(s.id) {
                return Err(DatasetError::DuplicateId(s.id));
            }
            if s.id != pos {
                return Err(DatasetError::NonSequentialId {
                    position: pos,
                    id: s.id,
                });
            }
            if s.base_feature.len() != feature_dim {
                return Err(DatasetError::DimensionMismatch {
                    id: s.id,
                    expected: feature_dim,
                    found: s.base_feature.len(),
                });
            }
            if s.base_feature.iter().any(|x| !x.is_finite()) {
                return Err(DatasetError::NonFinite(s.id));
            }
            let this_g = s.g_descriptor.as_ref().map(Vec::len);
            if this_g != g_dim {
                return Err(DatasetError::DimensionMismatch {
                    id: s.id,
                    expected: g_dim.unwrap_or(0),
                    found: this_g.unwrap_or(0),
                });
            }
        }
        let labelled = samples.iter().filter(|s| s.identity.is_some()).count();
        let num_identities = if labelled == samples.len() && !samples.is_empty() {
            samples
                .iter()
                .filter_map(|s| s.identity)
                .max()
                .map(|m| m as usize + 1)
        } else if labelled == 0 {
            None
        } else {
            let missing = samples.iter().find(|s| s.identity.is_none()).unwrap();
            return Err(DatasetError::MissingIdentity(missing.id));
        };
        Ok(EmbeddingDataset {
            samples,
            feature_dim,
            g_dim,
            num_identities,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, id: usize) -> Option<&Sample> {
        self.samples.get(id)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn g_dim(&self) -> Option<usize> {
        self.g_dim
    }

    pub fn num_identities(&self) -> Option<usize> {
        self.num_identities
    }

    pub fn has_identities(&self) -> bool {
        self.num_identities.is_some()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| s.base_feature.clone())
            .collect()
    }

    pub fn g_descriptors(&self) -> Option<Vec<Vec<f64>>> {
        self.g_dim?;
        Some(
            self.samples
                .iter()
                .map(|s| s.g_descriptor.clone().unwrap_or_default())
                .collect(),
        )
    }

    /// All identities in sample order.
    pub fn identities(&self, access: &LabelAccess) -> Result<Vec<u32>> {
        self.samples
            .iter()
            .map(|s| {
                s.identity(access)?
                    .ok_or(DatasetError::MissingIdentity(s.id))
            })
            .collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_f32_rows(path: &Path, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = read_file(path)?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(DatasetError::BlobSizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if cols == 0 {
        return Ok(vec![Vec::new(); rows]);
    }
    Ok(values.chunks(cols).map(<[f64]>::to_vec).collect())
}

fn f32_blob<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<u8> {
    rows.flat_map(|r| r.iter())
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<u32>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let labels = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .map_err(|_| DatasetError::InvalidLabel {
                    line: i + 1,
                    value: l.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != n {
        return Err(DatasetError::LabelCount {
            expected: n,
            found: labels.len(),
        });
    }
    Ok(labels)
}

/// Maps sample ids to image files named `<id>.<ext>` inside `dir`.
fn index_images(dir: &Path) -> Result<BTreeMap<usize, String>> {
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for path in paths {
        let Some(id) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if out
            .insert(id, path.to_string_lossy().into_owned())
            .is_some()
        {
            return Err(DatasetError::DuplicateId(id));
        }
    }
    Ok(out)
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_slice(&read_file(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let features = read_f32_rows(
        &base.join(&manifest.features_path),
        manifest.n,
        manifest.feature_dim,
    )?;
    let g = match (&manifest.g_path, manifest.g_dim) {
        (Some(p), Some(d)) => Some(read_f32_rows(&base.join(p), manifest.n, d)?),
        (None, None) => None,
        _ => return Err(DatasetError::IncompleteG),
    };
    let labels = manifest
        .labels_path
        .as_ref()
        .map(|p| read_labels(&base.join(p), manifest.n))
        .transpose()?;
    let images = manifest
        .images_dir
        .as_ref()
        .map(|d| index_images(&base.join(d)))
        .transpose()?;

    let mut g_rows = g.map(Vec::into_iter);
    let samples = features
        .into_iter()
        .enumerate()
        .map(|(id, f)| {
            Sample::new(
                id,
                f,
                g_rows.as_mut().and_then(Iterator::next),
                labels.as_ref().map(|l| l[id]),
                images.as_ref().and_then(|m| m.get(&id).cloned()),
            )
        })
        .collect();
    EmbeddingDataset::from_samples(samples)
}

/// Writes `manifest.json`, `features.f32`, and the optional g / label files
/// into `dir`. Returns the manifest path.
pub fn write_dataset(dataset: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = Manifest {
        n: dataset.len(),
        feature_dim: dataset.feature_dim(),
        features_path: "features.f32".into(),
        g_dim: None,
        g_path: None,
        labels_path: None,
        images_dir: None,
    };
    write_file(
        &dir.join(&manifest.features_path),
        &f32_blob(dataset.samples.iter().map(|s| s.base_feature.as_slice())),
    )?;
    if let Some(d) = dataset.g_dim() {
        manifest.g_dim = Some(d);
        manifest.g_path = Some("g.f32".into());
        write_file(
            &dir.join("g.f32"),
            &f32_blob(
                dataset
                    .samples
                    .iter()
                    .map(|s| s.g_descriptor.as_deref().unwrap_or(&[])),
            ),
        )?;
    }
    if dataset.has_identities() {
        let access = LabelAccess::unlock();
        let text: String = dataset
            .identities(&access)?
            .iter()
            .map(|l| format!("{l}\n"))
            .collect();
        manifest.labels_path = Some("labels.txt".into());
        write_file(&dir.join("labels.txt"), text.as_bytes())?;
    }
    let path = dir.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn l2_normalize(dataset: &EmbeddingDataset) -> Result<EmbeddingDataset> {
    let mut out = dataset.clone();
    for s in &mut out.samples {
        let norm = s.base_feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(DatasetError::ZeroNorm(s.id));
        }
        s.base_feature.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGallerySplit {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Seeded query/gallery split. Samples are visited in shuffled order and
/// promoted to queries while at least one sample of their identity stays in
/// the gallery, until `round(query_fraction * n)` queries exist.
pub fn split_query_gallery(
    dataset: &EmbeddingDataset,
    query_fraction: f64,
    seed: u64,
) -> Result<QueryGallerySplit> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(DatasetError::QueryFraction(query_fraction));
    }
    if !dataset.has_identities() {
        return Err(DatasetError::MissingIdentities);
    }
    let access = LabelAccess::unlock();
    let identities = dataset.identities(&access)?;
    let mut remaining: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in &identities {
        *remaining.entry(id).or_default() += 1;
    }
    let singletons: Vec<u32> = remaining
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(&id, _)| id)
        .collect();
    if !singletons.is_empty() {
        return Err(DatasetError::SingletonIdentities(singletons));
    }

    let n = dataset.len();
    let target = ((query_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut is_query = vec![false; n];
    let mut chosen = 0;
    for &i in &order {
        if chosen == target {
            break;
        }
        let left = remaining.get_mut(&identities[i]).unwrap();
        if *left > 1 {
            *left -= 1;
            is_query[i] = true;
            chosen += 1;
        }
    }
    let (query, gallery): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_query[i]);
    Ok(QueryGallerySplit { query, gallery })
}

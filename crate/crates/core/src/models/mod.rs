//! Uniform train/predict contract over pluggable classifier backends.
//!
//! A [`TrainedModel`] owns the label order, normalization statistics, and
//! feature layout next to the backend-specific parameters, so callers only
//! ever deal with raw physical feature rows in `[time][band]` layout and
//! probability rows aligned with `labels`.
//!
//! New model kinds plug in through [`ModelBackend`] (train, predict via
//! the returned [`Predictor`], and blob serialization); the engine and the
//! CLI run them unchanged.

pub mod forest;
pub mod mlp;
pub mod nn;
pub mod tempcnn;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, LazyLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samples::{apply_normalization, fit_normalization, NormStats, TimeSeriesTable};

pub const MODEL_MAGIC: &[u8; 8] = b"TCUBEMDL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_times: usize,
    pub n_bands: usize,
}

impl FeatureLayout {
    pub fn features(&self) -> usize {
        self.n_times * self.n_bands
    }
}

/// Kind-specific key/value settings. Every backend documents its accepted
/// keys and rejects unknown ones.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Hyperparams(pub BTreeMap<String, serde_json::Value>);

impl Hyperparams {
    pub fn set(&mut self, key: &str, value: serde_json::Value) {
        self.0.insert(key.to_string(), value);
    }

    pub fn usize_or(&self, key: &str, default: usize) -> usize {
        self.0
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .unwrap_or(default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> f64 {
        self.0.get(key).and_then(|v| v.as_f64()).unwrap_or(default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> bool {
        self.0.get(key).and_then(|v| v.as_bool()).unwrap_or(default)
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Vec<usize> {
        self.0
            .get(key)
            .and_then(|v| v.as_array())
            .map(|a| {
                a.iter()
                    .filter_map(|x| x.as_u64())
                    .map(|x| x as usize)
                    .collect()
            })
            .unwrap_or_else(|| default.to_vec())
    }

    pub fn validate_keys(&self, accepted: &[&str]) -> Result<()> {
        for key in self.0.keys() {
            if !accepted.contains(&key.as_str()) {
                return Err(Error::UnknownKey {
                    key: key.clone(),
                    accepted: accepted.join(", "),
                });
            }
        }
        Ok(())
    }

    /// Parse `key=value` pairs (values as JSON, falling back to strings).
    pub fn from_kv(pairs: &[String]) -> Result<Hyperparams> {
        let mut h = Hyperparams::default();
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::invalid(format!("hyperparameter {pair:?} is not key=value"))
            })?;
            let parsed = serde_json::from_str(value)
                .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            h.set(key, parsed);
        }
        Ok(h)
    }
}

/// Inference half of a trained classifier. Implementations must be pure:
/// identical inputs give identical outputs, concurrently callable.
pub trait Predictor: Send + Sync {
    /// `features` holds `n_rows` normalized rows; writes `n_rows * K`
    /// probabilities (each row a simplex) into `out`.
    fn predict(&self, features: &[f32], n_rows: usize, out: &mut [f32]);
    /// Parameter blobs for the model file, restored by `ModelBackend::load`.
    fn blobs(&self) -> Vec<Vec<f32>>;
}

pub trait ModelBackend: Send + Sync {
    fn kind(&self) -> &str;
    fn accepted_keys(&self) -> &[&'static str];
    /// Trains on an already-normalized table. `labels` is the sorted label
    /// list; targets are indices into it.
    fn train(
        &self,
        table: &TimeSeriesTable,
        labels: &[String],
        layout: FeatureLayout,
        hyper: &Hyperparams,
        seed: u64,
    ) -> Result<Box<dyn Predictor>>;
    fn load(
        &self,
        labels: &[String],
        layout: FeatureLayout,
        hyper: &Hyperparams,
        blobs: Vec<Vec<f32>>,
    ) -> Result<Box<dyn Predictor>>;
}

static REGISTRY: LazyLock<RwLock<HashMap<String, Arc<dyn ModelBackend>>>> =
    LazyLock::new(|| {
        let mut m: HashMap<String, Arc<dyn ModelBackend>> = HashMap::new();
        for backend in [
            Arc::new(forest::RandomForestBackend) as Arc<dyn ModelBackend>,
            Arc::new(mlp::MlpBackend),
            Arc::new(tempcnn::TempCnnBackend),
        ] {
            m.insert(backend.kind().to_string(), backend);
        }
        RwLock::new(m)
    });

pub fn register_model_backend(backend: Arc<dyn ModelBackend>) {
    REGISTRY
        .write()
        .unwrap()
        .insert(backend.kind().to_string(), backend);
}

pub fn model_backend(kind: &str) -> Result<Arc<dyn ModelBackend>> {
    REGISTRY.read().unwrap().get(kind).cloned().ok_or_else(|| {
        let mut kinds: Vec<String> = REGISTRY.read().unwrap().keys().cloned().collect();
        kinds.sort();
        Error::invalid(format!(
            "unknown model kind {kind:?} (registered: {})",
            kinds.join(", ")
        ))
    })
}

pub struct TrainedModel {
    pub kind: String,
    /// Sorted label order; prediction columns follow it.
    pub labels: Vec<String>,
    pub norm: NormStats,
    pub layout: FeatureLayout,
    pub hyper: Hyperparams,
    predictor: Box<dyn Predictor>,
}

impl std::fmt::Debug for TrainedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedModel")
            .field("kind", &self.kind)
            .field("labels", &self.labels)
            .field("layout", &self.layout)
            .finish_non_exhaustive()
    }
}

impl TrainedModel {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// Probability rows for raw physical feature rows. Normalization is
    /// applied internally; each output row is non-negative and sums to 1.
    pub fn predict_probs(&self, batch: &[f32], n_rows: usize) -> Result<Vec<f32>> {
        let n_features = self.layout.features();
        if batch.len() != n_rows * n_features {
            return Err(Error::LayoutMismatch {
                expected: format!("{n_rows} rows x {n_features} features"),
                got: format!("{} values", batch.len()),
            });
        }
        if n_rows == 0 {
            return Ok(Vec::new());
        }
        let mut normalized = batch.to_vec();
        for row in normalized.chunks_mut(n_features) {
            self.norm.normalize_features(row, self.layout.n_bands);
        }
        let mut out = vec![0f32; n_rows * self.n_classes()];
        self.predictor.predict(&normalized, n_rows, &mut out);
        Ok(out)
    }
}

/// Train a model of the given registered kind. Fits normalization on the
/// table, trains on the normalized series, and packages everything a later
/// prediction needs.
pub fn train_model(
    kind: &str,
    table: &TimeSeriesTable,
    overrides: &Hyperparams,
    seed: u64,
) -> Result<TrainedModel> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let backend = model_backend(kind)?;
    overrides.validate_keys(backend.accepted_keys())?;

    let labels = table.labels();
    if labels.len() < 2 {
        return Err(Error::invalid(format!(
            "degenerate table: {} distinct label(s), need at least 2",
            labels.len()
        )));
    }
    for label in &labels {
        let count = table.rows.iter().filter(|r| r.point.label == *label).count();
        if count < 2 {
            return Err(Error::invalid(format!(
                "label {label:?} has {count} sample(s), need at least 2"
            )));
        }
    }

    let layout = FeatureLayout {
        n_times: table.n_times(),
        n_bands: table.n_bands(),
    };
    let norm = fit_normalization(table)?;
    let normalized = apply_normalization(table, &norm);
    let predictor = backend.train(&normalized, &labels, layout, overrides, seed)?;
    Ok(TrainedModel {
        kind: kind.to_string(),
        labels,
        norm,
        layout,
        hyper: overrides.clone(),
        predictor,
    })
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    labels: Vec<String>,
    layout: FeatureLayout,
    hyperparams: Hyperparams,
    norm: NormStats,
    blob_lens: Vec<usize>,
}

pub fn model_to_bytes(m: &TrainedModel) -> Vec<u8> {
    let blobs = m.predictor.blobs();
    let header = ModelHeader {
        kind: m.kind.clone(),
        labels: m.labels.clone(),
        layout: m.layout,
        hyperparams: m.hyper.clone(),
        norm: m.norm.clone(),
        blob_lens: blobs.iter().map(|b| b.len()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("model header serialization");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for blob in &blobs {
        bytes.extend_from_slice(&crate::io::f32_to_le_bytes(blob));
    }
    bytes
}

pub fn save_model(m: &TrainedModel, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &model_to_bytes(m))
}

pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<TrainedModel> {
    let truncated = |detail: &str| Error::Integrity {
        file: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 {
        return Err(truncated("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version > MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(truncated("header truncated"));
    }
    let header: ModelHeader =
        serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            detail: format!("model header: {e}"),
        })?;

    let mut at = 16 + header_len;
    let mut blobs = Vec::with_capacity(header.blob_lens.len());
    for &len in &header.blob_lens {
        let end = at + len * 4;
        if bytes.len() < end {
            return Err(truncated("parameter blobs truncated"));
        }
        blobs.push(
            bytes[at..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect::<Vec<f32>>(),
        );
        at = end;
    }
    if at != bytes.len() {
        return Err(truncated("trailing bytes after declared blobs"));
    }

    let backend = model_backend(&header.kind)?;
    let predictor = backend.load(&header.labels, header.layout, &header.hyperparams, blobs)?;
    Ok(TrainedModel {
        kind: header.kind,
        labels: header.labels,
        norm: header.norm,
        layout: header.layout,
        hyper: header.hyperparams,
        predictor,
    })
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}

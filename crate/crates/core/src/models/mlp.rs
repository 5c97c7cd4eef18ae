//! Multi-layer perceptron backend: flattened time-band features through
//! fully-connected ReLU layers into a softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{
    softmax_rows, train_network, Dense, Layer, Network, Relu, Scalar, TrainConfig,
};
use super::{FeatureLayout, Hyperparams, ModelBackend, Predictor};
use crate::error::{Error, Result};
use crate::samples::TimeSeriesTable;

pub struct MlpBackend;

const MLP_KEYS: &[&str] = &[
    "hidden_layers",
    "epochs",
    "batch",
    "lr",
    "patience",
    "val_fraction",
];

pub const DEFAULT_HIDDEN: &[usize] = &[256, 128];

/// `hidden` may be empty, which reduces the net to softmax regression.
pub fn build_mlp<F: Scalar>(
    n_features: usize,
    hidden: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Network<F> {
    let mut layers: Vec<Box<dyn Layer<F>>> = Vec::new();
    let mut in_dim = n_features;
    for &h in hidden {
        layers.push(Box::new(Dense::new(in_dim, h, rng)));
        layers.push(Box::new(Relu::new(h)));
        in_dim = h;
    }
    layers.push(Box::new(Dense::new(in_dim, k, rng)));
    Network::new(layers)
}

fn train_config(hyper: &Hyperparams) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: hyper.usize_or("epochs", d.epochs),
        batch_size: hyper.usize_or("batch", d.batch_size),
        learning_rate: hyper.f64_or("lr", d.learning_rate),
        patience: hyper.usize_or("patience", d.patience),
        val_fraction: hyper.f64_or("val_fraction", d.val_fraction),
    }
}

pub struct NetworkPredictor {
    pub net: Network<f32>,
    pub k: usize,
}

impl Predictor for NetworkPredictor {
    fn predict(&self, features: &[f32], n_rows: usize, out: &mut [f32]) {
        let mut logits = self.net.forward_eval(features, n_rows);
        softmax_rows(&mut logits, n_rows, self.k);
        out.copy_from_slice(&logits);
    }

    fn blobs(&self) -> Vec<Vec<f32>> {
        self.net.params().into_iter().cloned().collect()
    }
}

pub(super) fn gather_features(
    table: &TimeSeriesTable,
    labels: &[String],
) -> (Vec<f32>, Vec<usize>) {
    let mut features = Vec::with_capacity(table.rows.len() * table.n_features());
    let mut targets = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        features.extend_from_slice(&row.series);
        targets.push(labels.iter().position(|l| *l == row.point.label).unwrap());
    }
    (features, targets)
}

impl ModelBackend for MlpBackend {
    fn kind(&self) -> &str {
        "mlp"
    }

    fn accepted_keys(&self) -> &[&'static str] {
        MLP_KEYS
    }

    fn train(
        &self,
        table: &TimeSeriesTable,
        labels: &[String],
        layout: FeatureLayout,
        hyper: &Hyperparams,
        seed: u64,
    ) -> Result<Box<dyn Predictor>> {
        let hidden = hyper.usize_list_or("hidden_layers", DEFAULT_HIDDEN);
        let k = labels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = build_mlp::<f32>(layout.features(), &hidden, k, &mut rng);
        let (features, targets) = gather_features(table, labels);
        train_network(
            &mut net,
            &features,
            &targets,
            layout.features(),
            k,
            &train_config(hyper),
            seed,
        )?;
        Ok(Box::new(NetworkPredictor { net, k }))
    }

    fn load(
        &self,
        labels: &[String],
        layout: FeatureLayout,
        hyper: &Hyperparams,
        blobs: Vec<Vec<f32>>,
    ) -> Result<Box<dyn Predictor>> {
        let hidden = hyper.usize_list_or("hidden_layers", DEFAULT_HIDDEN);
        let k = labels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = build_mlp::<f32>(layout.features(), &hidden, k, &mut rng);
        restore_blobs(&mut net, blobs)?;
        Ok(Box::new(NetworkPredictor { net, k }))
    }
}

pub(super) fn restore_blobs(net: &mut Network<f32>, blobs: Vec<Vec<f32>>) -> Result<()> {
    let tensors = net.tensors();
    if tensors.len() != blobs.len() {
        return Err(Error::Integrity {
            file: std::path::PathBuf::from("model parameters"),
            detail: format!(
                "expected {} parameter blobs, found {}",
                tensors.len(),
                blobs.len()
            ),
        });
    }
    for ((name, p, _), blob) in tensors.into_iter().zip(blobs) {
        if p.len() != blob.len() {
            return Err(Error::Integrity {
                file: std::path::PathBuf::from("model parameters"),
                detail: format!("{name}: expected {} values, found {}", p.len(), blob.len()),
            });
        }
        p.copy_from_slice(&blob);
    }
    Ok(())
}

//! 1D-CNN time-series classifier: convolutions run along the time axis
//! with bands as input channels, so the temporal order of the values is
//! part of what the model learns.
//!
//! Default shape: three conv blocks (64 filters, kernel 5, stride 1,
//! same-padding, ReLU, dropout 0.2), then a 256-unit dense ReLU layer and
//! a softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mlp::{restore_blobs, NetworkPredictor};
use super::nn::{train_network, Conv1d, Dense, Dropout, Layer, Network, Relu, Scalar, TrainConfig};
use super::{FeatureLayout, Hyperparams, ModelBackend, Predictor};
use crate::error::{Error, Result};
use crate::samples::TimeSeriesTable;

pub struct TempCnnBackend;

const TEMPCNN_KEYS: &[&str] = &[
    "filters",
    "kernel",
    "dropout",
    "conv_layers",
    "dense",
    "epochs",
    "batch",
    "lr",
    "patience",
    "val_fraction",
];

#[derive(Debug, Clone, Copy)]
pub struct TempCnnShape {
    pub filters: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub conv_layers: usize,
    pub dense: usize,
}

impl Default for TempCnnShape {
    fn default() -> Self {
        TempCnnShape {
            filters: 64,
            kernel: 5,
            dropout: 0.2,
            conv_layers: 3,
            dense: 256,
        }
    }
}

fn shape_from_hyper(hyper: &Hyperparams) -> TempCnnShape {
    let d = TempCnnShape::default();
    TempCnnShape {
        filters: hyper.usize_or("filters", d.filters),
        kernel: hyper.usize_or("kernel", d.kernel),
        dropout: hyper.f64_or("dropout", d.dropout),
        conv_layers: hyper.usize_or("conv_layers", d.conv_layers),
        dense: hyper.usize_or("dense", d.dense),
    }
}

pub fn build_tempcnn<F: Scalar>(
    layout: FeatureLayout,
    shape: &TempCnnShape,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Network<F> {
    let t = layout.n_times;
    let mut layers: Vec<Box<dyn Layer<F>>> = Vec::new();
    let mut channels = layout.n_bands;
    for _ in 0..shape.conv_layers {
        layers.push(Box::new(Conv1d::new(t, channels, shape.filters, shape.kernel, rng)));
        layers.push(Box::new(Relu::new(t * shape.filters)));
        if shape.dropout > 0.0 {
            layers.push(Box::new(Dropout::new(t * shape.filters, shape.dropout)));
        }
        channels = shape.filters;
    }
    // conv output [t][filters] flattens in place; dense head follows
    layers.push(Box::new(Dense::new(t * channels, shape.dense, rng)));
    layers.push(Box::new(Relu::new(shape.dense)));
    layers.push(Box::new(Dense::new(shape.dense, k, rng)));
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

impl ModelBackend for TempCnnBackend {
    fn kind(&self) -> &str {
        "tempcnn"
    }

    fn accepted_keys(&self) -> &[&'static str] {
        TEMPCNN_KEYS
    }

    fn train(
        &self,
        table: &TimeSeriesTable,
        labels: &[String],
        layout: FeatureLayout,
        hyper: &Hyperparams,
        seed: u64,
    ) -> Result<Box<dyn Predictor>> {
        let shape = shape_from_hyper(hyper);
        if shape.kernel % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd for same-padding"));
        }
        if layout.n_times < shape.kernel {
            return Err(Error::invalid(format!(
                "series length {} shorter than kernel size {}",
                layout.n_times, shape.kernel
            )));
        }
        let k = labels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = build_tempcnn::<f32>(layout, &shape, k, &mut rng);
        let (features, targets) = super::mlp::gather_features(table, labels);
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
        let shape = shape_from_hyper(hyper);
        let k = labels.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = build_tempcnn::<f32>(layout, &shape, k, &mut rng);
        restore_blobs(&mut net, blobs)?;
        Ok(Box::new(NetworkPredictor { net, k }))
    }
}

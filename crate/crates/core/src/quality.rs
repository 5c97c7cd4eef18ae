//! Training-sample quality control with a self-organizing map.
//!
//! A SOM is trained on the (normalized) sample series, every sample is
//! assigned to its best-matching neuron, and each neuron's label mix
//! grades the samples mapped to it: samples agreeing with a pure neuron
//! are kept, samples in mixed neurons are flagged for analysis or removal.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::samples::TimeSeriesTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SomParams {
    pub width: usize,
    pub height: usize,
    pub epochs: usize,
    pub learning_rate_start: f64,
    pub learning_rate_end: f64,
    /// Neighborhood radius start; `None` means `max(width, height) / 2`.
    pub sigma_start: Option<f64>,
    pub sigma_end: f64,
}

impl SomParams {
    pub fn new(width: usize, height: usize, epochs: usize) -> SomParams {
        SomParams {
            width,
            height,
            epochs,
            learning_rate_start: 0.05,
            learning_rate_end: 0.01,
            sigma_start: None,
            sigma_end: 0.5,
        }
    }

    /// Grid side heuristic `ceil(sqrt(5 * sqrt(n)))` for n samples.
    pub fn default_for(n_samples: usize) -> SomParams {
        let side = (5.0 * (n_samples as f64).sqrt()).sqrt().ceil().max(1.0) as usize;
        SomParams::new(side, side, 50)
    }
}

/// Trained map: neuron weights plus the label distribution observed when
/// the training samples were assigned to their best-matching units.
#[derive(Debug, Clone, PartialEq)]
pub struct SOMGrid {
    pub width: usize,
    pub height: usize,
    pub n_features: usize,
    /// `[neuron][feature]`, neuron index = row * width + col.
    pub weights: Vec<f32>,
    /// Per neuron: label -> relative frequency (sums to 1, empty when unused).
    pub label_dist: Vec<BTreeMap<String, f64>>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Clean,
    Analyze,
    Remove,
}

impl fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleStatus::Clean => write!(f, "clean"),
            SampleStatus::Analyze => write!(f, "analyze"),
            SampleStatus::Remove => write!(f, "remove"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub sample_index: usize,
    pub neuron: usize,
    pub purity: f64,
    pub status: SampleStatus,
}

impl SOMGrid {
    pub fn n_neurons(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    fn weight(&self, neuron: usize) -> &[f32] {
        &self.weights[neuron * self.n_features..(neuron + 1) * self.n_features]
    }

    /// Majority label and purity of a neuron. Frequency ties pick the
    /// lexicographically smallest label. `None` for unused neurons.
    pub fn majority(&self, neuron: usize) -> Option<(&str, f64)> {
        let dist = &self.label_dist[neuron];
        let mut best: Option<(&str, f64)> = None;
        for (label, &freq) in dist {
            match best {
                Some((_, f)) if freq <= f => {}
                _ => best = Some((label, freq)),
            }
        }
        best
    }

    /// Mean Euclidean distance of the given feature rows to their BMU.
    pub fn quantization_error(&self, rows: &[Vec<f32>]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let total: f64 = rows
            .iter()
            .map(|v| squared_distance(self.weight(som_assign_unchecked(self, v)), v).sqrt())
            .sum();
        total / rows.len() as f64
    }
}

#[inline]
fn squared_distance(w: &[f32], v: &[f32]) -> f64 {
    w.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum()
}

fn som_assign_unchecked(grid: &SOMGrid, v: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for n in 0..grid.n_neurons() {
        let d = squared_distance(grid.weight(n), v);
        if d < best_d {
            best_d = d;
            best = n;
        }
    }
    best
}

/// Best-matching unit: argmin of squared Euclidean distance, ties broken
/// by the lowest neuron index.
pub fn som_assign(grid: &SOMGrid, v: &[f32]) -> Result<usize> {
    if v.len() != grid.n_features {
        return Err(Error::LayoutMismatch {
            expected: format!("{} features", grid.n_features),
            got: format!("{} features", v.len()),
        });
    }
    Ok(som_assign_unchecked(grid, v))
}

/// Online Kohonen training with a Gaussian neighborhood over Chebyshev
/// grid distance and linear learning-rate/radius schedules. Weights are
/// initialized from randomly drawn training samples; the same seed gives
/// a bit-identical grid.
pub fn som_train(
    table: &TimeSeriesTable,
    params: &SomParams,
    seed: u64,
) -> Result<SOMGrid> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    if params.width == 0 || params.height == 0 {
        return Err(Error::invalid("SOM grid must have width*height >= 1"));
    }
    if params.epochs == 0 {
        return Err(Error::invalid("SOM training needs epochs >= 1"));
    }
    let n_features = table.n_features();
    let n_neurons = params.width * params.height;
    let n_samples = table.rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut weights = vec![0f32; n_neurons * n_features];
    for n in 0..n_neurons {
        let pick = rng.gen_range(0..n_samples);
        weights[n * n_features..(n + 1) * n_features]
            .copy_from_slice(&table.rows[pick].series);
    }

    let sigma_start = params
        .sigma_start
        .unwrap_or(params.width.max(params.height) as f64 / 2.0);
    let total_steps = params.epochs * n_samples;
    let denom = (total_steps.saturating_sub(1)).max(1) as f64;

    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut step = 0usize;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let frac = step as f64 / denom;
            let lr = params.learning_rate_start
                + (params.learning_rate_end - params.learning_rate_start) * frac;
            let sigma = sigma_start + (params.sigma_end - sigma_start) * frac;
            let sample = &table.rows[i].series;

            let mut bmu = 0usize;
            let mut best_d = f64::INFINITY;
            for n in 0..n_neurons {
                let d = squared_distance(&weights[n * n_features..(n + 1) * n_features], sample);
                if d < best_d {
                    best_d = d;
                    bmu = n;
                }
            }
            let (bmu_row, bmu_col) = (bmu / params.width, bmu % params.width);
            let two_sigma_sq = 2.0 * sigma * sigma;
            for n in 0..n_neurons {
                let (row, col) = (n / params.width, n % params.width);
                let d_grid = row.abs_diff(bmu_row).max(col.abs_diff(bmu_col)) as f64;
                let h = (-d_grid * d_grid / two_sigma_sq).exp();
                let g = (lr * h) as f32;
                let w = &mut weights[n * n_features..(n + 1) * n_features];
                for (wv, &sv) in w.iter_mut().zip(sample) {
                    *wv += g * (sv - *wv);
                }
            }
            step += 1;
        }
    }

    let mut grid = SOMGrid {
        width: params.width,
        height: params.height,
        n_features,
        weights,
        label_dist: vec![BTreeMap::new(); n_neurons],
        counts: vec![0; n_neurons],
    };

    // Final assignment pass fills the label distributions.
    let mut label_counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); n_neurons];
    for row in &table.rows {
        let bmu = som_assign_unchecked(&grid, &row.series);
        grid.counts[bmu] += 1;
        *label_counts[bmu].entry(row.point.label.clone()).or_insert(0) += 1;
    }
    for n in 0..n_neurons {
        let total = grid.counts[n];
        if total > 0 {
            grid.label_dist[n] = label_counts[n]
                .iter()
                .map(|(l, &c)| (l.clone(), c as f64 / total as f64))
                .collect();
        }
    }
    Ok(grid)
}

/// Grade every sample against its neuron's label distribution.
pub fn som_evaluate(
    grid: &SOMGrid,
    table: &TimeSeriesTable,
    purity_threshold: f64,
) -> Result<Vec<SampleEvaluation>> {
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let neuron = som_assign(grid, &row.series)?;
        let Some((majority, purity)) = grid.majority(neuron) else {
            return Err(Error::Integrity {
                file: std::path::PathBuf::from("som grid"),
                detail: format!("sample {i} mapped to neuron {neuron} with zero count"),
            });
        };
        let status = if row.point.label == majority {
            if purity >= purity_threshold {
                SampleStatus::Clean
            } else {
                SampleStatus::Analyze
            }
        } else {
            SampleStatus::Remove
        };
        out.push(SampleEvaluation {
            sample_index: i,
            neuron,
            purity,
            status,
        });
    }
    Ok(out)
}

/// Write `som_grid.csv` and `som_map.ppm` (one 16x16 block per neuron,
/// colored by majority label in sorted-label palette order).
pub fn som_export(grid: &SOMGrid, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut labels: Vec<&str> = grid
        .label_dist
        .iter()
        .flat_map(|d| d.keys().map(|s| s.as_str()))
        .collect();
    labels.sort_unstable();
    labels.dedup();

    let mut csv = String::from("neuron,row,col,majority_label,purity,count\n");
    for n in 0..grid.n_neurons() {
        let (row, col) = (n / grid.width, n % grid.width);
        let (label, purity) = grid.majority(n).unwrap_or(("", 0.0));
        csv.push_str(&format!(
            "{n},{row},{col},{label},{purity},{}\n",
            grid.counts[n]
        ));
    }
    io::write_atomic(&dir.join("som_grid.csv"), csv.as_bytes())?;

    const CELL: usize = 16;
    let (w, h) = (grid.width * CELL, grid.height * CELL);
    let mut pixels = vec![0u8; w * h * 3];
    for n in 0..grid.n_neurons() {
        let color = match grid.majority(n) {
            Some((label, _)) => {
                let idx = labels.iter().position(|&l| l == label).unwrap();
                io::palette_color(idx)
            }
            None => [64, 64, 64],
        };
        let (nr, nc) = (n / grid.width, n % grid.width);
        for dy in 0..CELL {
            for dx in 0..CELL {
                let p = ((nr * CELL + dy) * w + nc * CELL + dx) * 3;
                pixels[p..p + 3].copy_from_slice(&color);
            }
        }
    }
    io::write_ppm(&dir.join("som_map.ppm"), w, h, &pixels)
}

/// Write `som_eval.csv` with one row per evaluated sample.
pub fn export_evaluations(evals: &[SampleEvaluation], path: &Path) -> Result<()> {
    let mut csv = String::from("sample_index,neuron,purity,status\n");
    for e in evals {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.sample_index, e.neuron, e.purity, e.status
        ));
    }
    io::write_atomic(path, csv.as_bytes())
}

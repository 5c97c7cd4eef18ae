//! Random forest of CART trees: Gini splits, per-tree bootstrap, soft
//! voting over leaf class frequencies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    /// Features tried per split; 0 means `floor(sqrt(n_features))`.
    pub mtry: usize,
    /// 0 means unlimited.
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            mtry: 0,
            max_depth: 0,
            min_samples_leaf: 1,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    /// Split feature; `None` marks a leaf.
    pub feature: Option<u32>,
    pub threshold: f32,
    pub left: u32,
    pub right: u32,
    /// Class frequencies, populated on leaves.
    pub freq: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_freq(&self, row: &[f32]) -> &[f32] {
        let mut at = 0usize;
        loop {
            let node = &self.nodes[at];
            match node.feature {
                None => return &node.freq,
                Some(f) => {
                    at = if row[f as usize] <= node.threshold {
                        node.left as usize
                    } else {
                        node.right as usize
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub n_classes: usize,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl Forest {
    /// Mean of per-tree leaf class frequencies.
    pub fn predict_row(&self, row: &[f32], out: &mut [f32]) {
        out.iter_mut().for_each(|p| *p = 0.0);
        for tree in &self.trees {
            for (o, f) in out.iter_mut().zip(tree.leaf_freq(row)) {
                *o += f;
            }
        }
        let inv = 1.0 / self.trees.len() as f32;
        out.iter_mut().for_each(|p| *p *= inv);
    }
}

struct TreeBuilder<'a> {
    features: &'a [f32],
    n_features: usize,
    targets: &'a [usize],
    n_classes: usize,
    mtry: usize,
    max_depth: usize,
    min_samples_leaf: usize,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

impl<'a> TreeBuilder<'a> {
    fn leaf(&mut self, idx: &[usize]) -> u32 {
        let mut freq = vec![0f32; self.n_classes];
        for &i in idx {
            freq[self.targets[i]] += 1.0;
        }
        let inv = 1.0 / idx.len() as f32;
        freq.iter_mut().for_each(|f| *f *= inv);
        self.nodes.push(Node {
            feature: None,
            threshold: 0.0,
            left: 0,
            right: 0,
            freq,
        });
        (self.nodes.len() - 1) as u32
    }

    fn build(&mut self, idx: &mut Vec<usize>, depth: usize) -> u32 {
        let first = self.targets[idx[0]];
        let pure = idx.iter().all(|&i| self.targets[i] == first);
        let depth_capped = self.max_depth > 0 && depth >= self.max_depth;
        if pure || depth_capped || idx.len() < 2 * self.min_samples_leaf.max(1) {
            return self.leaf(idx);
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return self.leaf(idx);
        };

        let (mut left, mut right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.features[i * self.n_features + feature] <= threshold);
        debug_assert!(!left.is_empty() && !right.is_empty());

        // placeholder, patched after children exist
        self.nodes.push(Node {
            feature: Some(feature as u32),
            threshold,
            left: 0,
            right: 0,
            freq: Vec::new(),
        });
        let at = self.nodes.len() - 1;
        let left_id = self.build(&mut left, depth + 1);
        let right_id = self.build(&mut right, depth + 1);
        self.nodes[at].left = left_id;
        self.nodes[at].right = right_id;
        at as u32
    }

    /// Exhaustive Gini minimization over `mtry` randomly drawn features;
    /// candidate thresholds are midpoints between consecutive distinct
    /// sorted values.
    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f32)> {
        let mut feature_order: Vec<usize> = (0..self.n_features).collect();
        feature_order.shuffle(&mut self.rng);
        feature_order.truncate(self.mtry.min(self.n_features));

        let n = idx.len() as f64;
        let mut best: Option<(usize, f32, f64)> = None;
        let mut sorted: Vec<(f32, usize)> = Vec::with_capacity(idx.len());
        for &feature in &feature_order {
            sorted.clear();
            sorted.extend(
                idx.iter()
                    .map(|&i| (self.features[i * self.n_features + feature], self.targets[i])),
            );
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

            let mut left_counts = vec![0f64; self.n_classes];
            let mut right_counts = vec![0f64; self.n_classes];
            for &(_, t) in sorted.iter() {
                right_counts[t] += 1.0;
            }
            let mut n_left = 0f64;
            for w in 0..sorted.len() - 1 {
                let (v, t) = sorted[w];
                left_counts[t] += 1.0;
                right_counts[t] -= 1.0;
                n_left += 1.0;
                let next_v = sorted[w + 1].0;
                if v == next_v {
                    continue;
                }
                if (n_left as usize) < self.min_samples_leaf
                    || (sorted.len() - n_left as usize) < self.min_samples_leaf
                {
                    continue;
                }
                let n_right = n - n_left;
                let gini = |counts: &[f64], total: f64| -> f64 {
                    1.0 - counts.iter().map(|&c| (c / total) * (c / total)).sum::<f64>()
                };
                let weighted = (n_left * gini(&left_counts, n_left)
                    + n_right * gini(&right_counts, n_right))
                    / n;
                let threshold = (v + next_v) / 2.0;
                match best {
                    Some((_, _, b)) if weighted >= b => {}
                    _ => best = Some((feature, threshold, weighted)),
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }
}

/// Train a forest. Tree `i` uses the derived seed `seed + i`, so results
/// are deterministic regardless of how the per-tree work is scheduled.
pub fn train_forest(
    features: &[f32],
    targets: &[usize],
    n_rows: usize,
    n_features: usize,
    n_classes: usize,
    cfg: &ForestConfig,
    seed: u64,
) -> Result<Forest> {
    if cfg.trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let mtry = if cfg.mtry == 0 {
        ((n_features as f64).sqrt().floor() as usize).max(1)
    } else {
        cfg.mtry.min(n_features)
    };

    let trees: Vec<Tree> = (0..cfg.trees)
        .into_par_iter()
        .map(|tree_idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(tree_idx as u64));
            let mut idx: Vec<usize> = if cfg.bootstrap {
                (0..n_rows).map(|_| rng.gen_range(0..n_rows)).collect()
            } else {
                (0..n_rows).collect()
            };
            let mut builder = TreeBuilder {
                features,
                n_features,
                targets,
                n_classes,
                mtry,
                max_depth: cfg.max_depth,
                min_samples_leaf: cfg.min_samples_leaf.max(1),
                nodes: Vec::new(),
                rng,
            };
            builder.build(&mut idx, 0);
            Tree {
                nodes: builder.nodes,
            }
        })
        .collect();

    Ok(Forest {
        n_classes,
        n_features,
        trees,
    })
}

// ---------------------------------------------------------------------------
// Flat f32 encoding of a tree, used by the model file format:
// [n_nodes, n_classes, then per node: feature(-1=leaf), threshold, left,
// right, freq[0..K]].

pub fn tree_to_blob(tree: &Tree, n_classes: usize) -> Vec<f32> {
    let mut blob = Vec::with_capacity(2 + tree.nodes.len() * (4 + n_classes));
    blob.push(tree.nodes.len() as f32);
    blob.push(n_classes as f32);
    for node in &tree.nodes {
        blob.push(node.feature.map(|f| f as f32).unwrap_or(-1.0));
        blob.push(node.threshold);
        blob.push(node.left as f32);
        blob.push(node.right as f32);
        if node.freq.is_empty() {
            blob.extend(std::iter::repeat(0.0).take(n_classes));
        } else {
            blob.extend_from_slice(&node.freq);
        }
    }
    blob
}

pub fn tree_from_blob(blob: &[f32]) -> Result<(Tree, usize)> {
    let corrupt = |detail: &str| Error::Integrity {
        file: std::path::PathBuf::from("model parameters"),
        detail: detail.to_string(),
    };
    if blob.len() < 2 {
        return Err(corrupt("tree blob too short"));
    }
    let n_nodes = blob[0] as usize;
    let n_classes = blob[1] as usize;
    let expected = 2 + n_nodes * (4 + n_classes);
    if blob.len() != expected || n_nodes == 0 || n_classes == 0 {
        return Err(corrupt(&format!(
            "tree blob length {} does not match declared {n_nodes} nodes x {n_classes} classes",
            blob.len()
        )));
    }
    let mut nodes = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let at = 2 + i * (4 + n_classes);
        let feature = if blob[at] < 0.0 {
            None
        } else {
            Some(blob[at] as u32)
        };
        let (left, right) = (blob[at + 2] as u32, blob[at + 3] as u32);
        if feature.is_some() && (left as usize >= n_nodes || right as usize >= n_nodes) {
            return Err(corrupt("tree child index out of range"));
        }
        let freq = if feature.is_none() {
            blob[at + 4..at + 4 + n_classes].to_vec()
        } else {
            Vec::new()
        };
        nodes.push(Node {
            feature,
            threshold: blob[at + 1],
            left,
            right,
            freq,
        });
    }
    Ok((Tree { nodes }, n_classes))
}

// ---------------------------------------------------------------------------

use super::{FeatureLayout, Hyperparams, ModelBackend, Predictor};
use crate::samples::TimeSeriesTable;

pub struct RandomForestBackend;

const RF_KEYS: &[&str] = &["trees", "mtry", "max_depth", "min_samples_leaf", "bootstrap"];

fn config_from_hyper(hyper: &Hyperparams) -> ForestConfig {
    let d = ForestConfig::default();
    ForestConfig {
        trees: hyper.usize_or("trees", d.trees),
        mtry: hyper.usize_or("mtry", d.mtry),
        max_depth: hyper.usize_or("max_depth", d.max_depth),
        min_samples_leaf: hyper.usize_or("min_samples_leaf", d.min_samples_leaf),
        bootstrap: hyper.bool_or("bootstrap", d.bootstrap),
    }
}

impl Predictor for Forest {
    fn predict(&self, features: &[f32], n_rows: usize, out: &mut [f32]) {
        let k = self.n_classes;
        for r in 0..n_rows {
            let row = &features[r * self.n_features..(r + 1) * self.n_features];
            self.predict_row(row, &mut out[r * k..(r + 1) * k]);
        }
    }

    fn blobs(&self) -> Vec<Vec<f32>> {
        self.trees
            .iter()
            .map(|t| tree_to_blob(t, self.n_classes))
            .collect()
    }
}

impl ModelBackend for RandomForestBackend {
    fn kind(&self) -> &str {
        "rf"
    }

    fn accepted_keys(&self) -> &[&'static str] {
        RF_KEYS
    }

    fn train(
        &self,
        table: &TimeSeriesTable,
        labels: &[String],
        layout: FeatureLayout,
        hyper: &Hyperparams,
        seed: u64,
    ) -> crate::error::Result<Box<dyn Predictor>> {
        let cfg = config_from_hyper(hyper);
        let n_rows = table.rows.len();
        let mut features = Vec::with_capacity(n_rows * layout.features());
        let mut targets = Vec::with_capacity(n_rows);
        for row in &table.rows {
            features.extend_from_slice(&row.series);
            targets.push(labels.iter().position(|l| *l == row.point.label).unwrap());
        }
        let forest = train_forest(
            &features,
            &targets,
            n_rows,
            layout.features(),
            labels.len(),
            &cfg,
            seed,
        )?;
        Ok(Box::new(forest))
    }

    fn load(
        &self,
        labels: &[String],
        layout: FeatureLayout,
        _hyper: &Hyperparams,
        blobs: Vec<Vec<f32>>,
    ) -> crate::error::Result<Box<dyn Predictor>> {
        let mut trees = Vec::with_capacity(blobs.len());
        for blob in &blobs {
            let (tree, k) = tree_from_blob(blob)?;
            if k != labels.len() {
                return Err(Error::Integrity {
                    file: std::path::PathBuf::from("model parameters"),
                    detail: format!("tree declares {k} classes, header has {}", labels.len()),
                });
            }
            trees.push(tree);
        }
        if trees.is_empty() {
            return Err(Error::invalid("forest model has no trees"));
        }
        Ok(Box::new(Forest {
            n_classes: labels.len(),
            n_features: layout.features(),
            trees,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// x < 0 -> class 0, x > 0 -> class 1, with a gap across zero.
    fn sign_data() -> (Vec<f32>, Vec<usize>) {
        let xs = vec![-3.0f32, -2.0, -1.5, -0.6, 0.4, 1.0, 2.5, 3.5];
        let ys = xs.iter().map(|&x| usize::from(x > 0.0)).collect();
        (xs, ys)
    }

    #[test]
    fn root_split_falls_in_the_gap() {
        // Oracle: exhaustive Gini search over every midpoint.
        let (xs, ys) = sign_data();
        let oracle_best = {
            let mut sorted: Vec<(f32, usize)> =
                xs.iter().cloned().zip(ys.iter().cloned()).collect();
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let n = sorted.len() as f64;
            let mut best = (f32::NAN, f64::INFINITY);
            for w in 0..sorted.len() - 1 {
                if sorted[w].0 == sorted[w + 1].0 {
                    continue;
                }
                let thr = (sorted[w].0 + sorted[w + 1].0) / 2.0;
                let mut counts = [[0f64; 2]; 2];
                for &(v, t) in &sorted {
                    counts[usize::from(v > thr)][t] += 1.0;
                }
                let gini = |c: &[f64; 2]| {
                    let tot = c[0] + c[1];
                    1.0 - (c[0] / tot).powi(2) - (c[1] / tot).powi(2)
                };
                let nl = counts[0][0] + counts[0][1];
                let weighted = (nl * gini(&counts[0]) + (n - nl) * gini(&counts[1])) / n;
                if weighted < best.1 {
                    best = (thr, weighted);
                }
            }
            best.0
        };
        assert!(oracle_best > -0.6 && oracle_best < 0.4);

        let cfg = ForestConfig {
            trees: 1,
            mtry: 1,
            bootstrap: false,
            ..Default::default()
        };
        let forest = train_forest(&xs, &ys, xs.len(), 1, 2, &cfg, 0).unwrap();
        let root = &forest.trees[0].nodes[0];
        assert_eq!(root.feature, Some(0));
        assert!(root.threshold > -0.6 && root.threshold < 0.4);
        assert_eq!(root.threshold, oracle_best);
    }

    #[test]
    fn separable_data_reaches_full_training_accuracy() {
        let (xs, ys) = sign_data();
        let forest =
            train_forest(&xs, &ys, xs.len(), 1, 2, &ForestConfig::default(), 7).unwrap();
        let mut out = vec![0f32; 2];
        for (i, &x) in xs.iter().enumerate() {
            forest.predict_row(&[x], &mut out);
            let pred = usize::from(out[1] > out[0]);
            assert_eq!(pred, ys[i]);
        }
    }

    #[test]
    fn single_tree_no_bootstrap_memorizes() {
        // 2D data, unique feature vectors, no label conflicts
        let features: Vec<f32> = vec![
            0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 1.0,
        ];
        let targets = vec![0usize, 1, 1, 0, 2, 2];
        let cfg = ForestConfig {
            trees: 1,
            mtry: 2,
            bootstrap: false,
            ..Default::default()
        };
        let forest = train_forest(&features, &targets, 6, 2, 3, &cfg, 3).unwrap();
        let mut out = vec![0f32; 3];
        for r in 0..6 {
            forest.predict_row(&features[r * 2..r * 2 + 2], &mut out);
            assert_eq!(out[targets[r]], 1.0, "row {r} probabilities {out:?}");
        }
    }

    #[test]
    fn same_seed_identical_forest() {
        let (xs, ys) = sign_data();
        let f1 = train_forest(&xs, &ys, xs.len(), 1, 2, &ForestConfig::default(), 5).unwrap();
        let f2 = train_forest(&xs, &ys, xs.len(), 1, 2, &ForestConfig::default(), 5).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn blob_roundtrip() {
        let (xs, ys) = sign_data();
        let cfg = ForestConfig {
            trees: 3,
            ..Default::default()
        };
        let forest = train_forest(&xs, &ys, xs.len(), 1, 2, &cfg, 1).unwrap();
        for tree in &forest.trees {
            let blob = tree_to_blob(tree, 2);
            let (back, k) = tree_from_blob(&blob).unwrap();
            assert_eq!(k, 2);
            assert_eq!(&back, tree);
        }
        assert!(tree_from_blob(&[1.0]).is_err());
    }
}

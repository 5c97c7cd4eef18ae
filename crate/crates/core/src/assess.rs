//! Model validation and map accuracy assessment: stratified k-fold
//! cross-validation, confusion matrices against reference points, and
//! area-weighted error-adjusted area estimation with confidence
//! intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Hyperparams;
use crate::samples::{TimeSeriesTable, TableRow};
use crate::smooth::LabelMap;

/// Rows are map (predicted) classes, columns are reference classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> ConfusionMatrix {
        let k = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Plain sample accuracy `trace / total`.
    pub fn naive_accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignment[i]` is the fold of sample `i`.
    pub assignment: Vec<usize>,
}

/// Stratified fold assignment: per label, samples are shuffled (seeded)
/// and dealt round-robin, so fold sizes within a stratum differ by at
/// most one.
pub fn fold_plan(table: &TimeSeriesTable, k: usize, seed: u64) -> Result<FoldPlan> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if k < 2 {
        return Err(Error::invalid("k-fold needs k >= 2"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; table.rows.len()];
    for label in table.labels() {
        let mut idx: Vec<usize> = table
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.point.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < k {
            return Err(Error::Stratification {
                label,
                have: idx.len(),
                need: k,
            });
        }
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = pos % k;
        }
    }
    Ok(FoldPlan { k, assignment })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KFoldReport {
    pub k: usize,
    pub per_fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub pooled: ConfusionMatrix,
    /// Validation compares models on the training data; it is not a map
    /// accuracy measure.
    pub caveat: String,
}

/// k trainings, each tested on the held-out fold; pooled predictions cover
/// every sample exactly once. Per-fold seeds derive from `seed`.
pub fn kfold_validate(
    table: &TimeSeriesTable,
    k: usize,
    model_kind: &str,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<KFoldReport> {
    let plan = fold_plan(table, k, seed)?;
    let labels = table.labels();
    let mut pooled = ConfusionMatrix::new(labels.clone());
    let mut per_fold = Vec::with_capacity(k);
    let mut predicted = vec![false; table.rows.len()];

    for fold in 0..k {
        let train_rows: Vec<TableRow> = table
            .rows
            .iter()
            .enumerate()
            .filter(|(i, _)| plan.assignment[*i] != fold)
            .map(|(_, r)| r.clone())
            .collect();
        let test_idx: Vec<usize> = (0..table.rows.len())
            .filter(|i| plan.assignment[*i] == fold)
            .collect();
        let train_table = TimeSeriesTable {
            cube_id: table.cube_id.clone(),
            band_names: table.band_names.clone(),
            timeline: table.timeline.clone(),
            rows: train_rows,
        };
        let model = crate::models::train_model(
            model_kind,
            &train_table,
            hyper,
            seed.wrapping_add(fold as u64),
        )?;

        let mut batch = Vec::with_capacity(test_idx.len() * table.n_features());
        for &i in &test_idx {
            batch.extend_from_slice(&table.rows[i].series);
        }
        let probs = model.predict_probs(&batch, test_idx.len())?;
        let mut correct = 0usize;
        for (row, &i) in probs.chunks(model.n_classes()).zip(&test_idx) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            let pred_label = &model.labels[pred];
            let true_label = &table.rows[i].point.label;
            let pi = labels.iter().position(|l| l == pred_label).unwrap();
            let ti = labels.iter().position(|l| l == true_label).unwrap();
            pooled.counts[pi][ti] += 1;
            if pi == ti {
                correct += 1;
            }
            debug_assert!(!predicted[i]);
            predicted[i] = true;
        }
        per_fold.push(correct as f64 / test_idx.len() as f64);
    }
    debug_assert!(predicted.iter().all(|&p| p));

    let mean = per_fold.iter().sum::<f64>() / k as f64;
    Ok(KFoldReport {
        k,
        per_fold_accuracy: per_fold,
        mean_accuracy: mean,
        pooled,
        caveat: "model comparison only; not a map accuracy measure".to_string(),
    })
}

/// Count map-vs-reference agreement for labeled points. Points outside
/// the map extent are dropped and counted.
pub fn confusion(
    map: &LabelMap,
    refs: &[(f64, f64, String)],
) -> Result<(ConfusionMatrix, usize)> {
    let mut unknown: Vec<String> = refs
        .iter()
        .map(|(_, _, l)| l)
        .filter(|l| !map.legend.contains(l))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownLabels { labels: unknown });
    }

    let mut cm = ConfusionMatrix::new(map.legend.clone());
    let mut dropped = 0usize;
    for (lon, lat, label) in refs {
        match map.class_at(*lon, *lat)? {
            Some(map_class) => {
                let ref_class = map.legend.iter().position(|l| l == label).unwrap();
                cm.counts[map_class as usize][ref_class] += 1;
            }
            None => dropped += 1,
        }
    }
    if cm.total() == 0 {
        return Err(Error::invalid(format!(
            "all {dropped} reference points fall outside the map extent"
        )));
    }
    Ok((cm, dropped))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaEstimate {
    pub labels: Vec<String>,
    pub mapped_area: Vec<f64>,
    /// Estimated cell proportions, rows = map class, columns = reference.
    pub p_hat: Vec<Vec<f64>>,
    pub overall_accuracy: f64,
    pub variance_overall_accuracy: f64,
    /// None where a class has no map samples.
    pub users_accuracy: Vec<Option<f64>>,
    /// None where a class has no reference samples.
    pub producers_accuracy: Vec<Option<f64>>,
    pub adjusted_area: Vec<f64>,
    pub ci95_area: Vec<f64>,
}

/// Error-adjusted area estimation from a confusion matrix and the mapped
/// class areas (any consistent unit).
pub fn accuracy_area(cm: &ConfusionMatrix, mapped_area: &[f64]) -> Result<AreaEstimate> {
    let k = cm.labels.len();
    if mapped_area.len() != k {
        return Err(Error::invalid(format!(
            "{} mapped areas for {k} classes",
            mapped_area.len()
        )));
    }
    if cm.total() == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let total_area: f64 = mapped_area.iter().sum();
    if total_area <= 0.0 {
        return Err(Error::invalid("total mapped area must be positive"));
    }
    for i in 0..k {
        let n_i = cm.row_sum(i);
        if n_i > 0 && mapped_area[i] <= 0.0 {
            return Err(Error::invalid(format!(
                "class {:?} has map samples but zero mapped area",
                cm.labels[i]
            )));
        }
        if mapped_area[i] > 0.0 && n_i < 2 {
            return Err(Error::invalid(format!(
                "class {:?} has mapped area but {n_i} map sample(s); need >= 2 for the variance estimator",
                cm.labels[i]
            )));
        }
    }

    let w: Vec<f64> = mapped_area.iter().map(|a| a / total_area).collect();
    let mut p_hat = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        let n_i = cm.row_sum(i) as f64;
        if n_i > 0.0 {
            for j in 0..k {
                p_hat[i][j] = w[i] * cm.counts[i][j] as f64 / n_i;
            }
        }
    }

    let overall_accuracy: f64 = (0..k).map(|i| p_hat[i][i]).sum();
    let users_accuracy: Vec<Option<f64>> = (0..k)
        .map(|i| {
            let row: f64 = p_hat[i].iter().sum();
            (row > 0.0).then(|| p_hat[i][i] / row)
        })
        .collect();
    let producers_accuracy: Vec<Option<f64>> = (0..k)
        .map(|j| {
            let col: f64 = (0..k).map(|i| p_hat[i][j]).sum();
            (col > 0.0).then(|| p_hat[j][j] / col)
        })
        .collect();
    let adjusted_area: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| p_hat[i][j]).sum::<f64>() * total_area)
        .collect();

    let mut ci95_area = vec![0.0f64; k];
    for j in 0..k {
        let mut var = 0.0f64;
        for i in 0..k {
            let n_i = cm.row_sum(i) as f64;
            if n_i >= 2.0 {
                let frac = cm.counts[i][j] as f64 / n_i;
                var += w[i] * w[i] * frac * (1.0 - frac) / (n_i - 1.0);
            }
        }
        ci95_area[j] = 1.96 * var.sqrt() * total_area;
    }

    let mut variance_overall_accuracy = 0.0f64;
    for i in 0..k {
        let n_i = cm.row_sum(i) as f64;
        if n_i >= 2.0 {
            if let Some(ua) = users_accuracy[i] {
                variance_overall_accuracy += w[i] * w[i] * ua * (1.0 - ua) / (n_i - 1.0);
            }
        }
    }

    Ok(AreaEstimate {
        labels: cm.labels.clone(),
        mapped_area: mapped_area.to_vec(),
        p_hat,
        overall_accuracy,
        variance_overall_accuracy,
        users_accuracy,
        producers_accuracy,
        adjusted_area,
        ci95_area,
    })
}

/// Plain-text accuracy table: one row per class with producer's and
/// user's accuracy, overall accuracy as a footer.
pub fn render_accuracy_table(est: &AreaEstimate) -> String {
    let width = est
        .labels
        .iter()
        .map(|l| l.len())
        .max()
        .unwrap_or(6)
        .max("Labels".len());
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.2}"),
        None => "--".to_string(),
    };
    let mut out = format!(
        "{:<width$}  {:>19}  {:>15}\n",
        "Labels", "Producer's Accuracy", "User's Accuracy"
    );
    for (i, label) in est.labels.iter().enumerate() {
        out.push_str(&format!(
            "{:<width$}  {:>19}  {:>15}\n",
            label,
            fmt(est.producers_accuracy[i]),
            fmt(est.users_accuracy[i]),
        ));
    }
    out.push_str(&format!("Overall Accuracy: {:.2}\n", est.overall_accuracy));
    out
}

pub fn load_reference_csv(path: &std::path::Path) -> Result<Vec<(f64, f64, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv {
                path: path.to_path_buf(),
                detail: format!("missing column {name:?}"),
            })
    };
    let (c_lon, c_lat, c_label) = (col("longitude")?, col("latitude")?, col("label")?);
    let mut refs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse = |i: usize| -> Result<f64> {
            record
                .get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Csv {
                    path: path.to_path_buf(),
                    detail: format!("line {line}: unparseable coordinate"),
                })
        };
        refs.push((
            parse(c_lon)?,
            parse(c_lat)?,
            record.get(c_label).unwrap_or("").to_string(),
        ));
    }
    if refs.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            detail: "no reference rows".into(),
        });
    }
    Ok(refs)
}

//! Bayesian spatial smoothing of probability cubes and label-map
//! generation.
//!
//! Per pixel, the stored class probabilities become log-odds vectors
//! `x = ln(p / (1 - p))`. The window around the pixel supplies a local
//! mean `m` and sample covariance `S`, and the smoothed estimate blends
//! the two:
//!
//!   theta = Sigma (Sigma + S)^-1 m  +  S (Sigma + S)^-1 x
//!
//! with `Sigma` the user-supplied prior covariance. Uncertain pixels in
//! confident neighborhoods move toward the neighborhood mean; confident
//! pixels stay put. Output probabilities are the inverse logits,
//! renormalized to a simplex and re-stored as scaled i16.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cube::TileGrid;
use crate::engine::{ProbCube, PROB_SCALE};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    /// Odd window side length.
    pub window: usize,
    /// Prior covariance: `sigma * I` unless a full matrix is given.
    pub sigma: f64,
    /// Full K x K prior covariance, row-major; overrides `sigma`.
    pub sigma_matrix: Option<Vec<f64>>,
    /// Probability clamp before the logit transform.
    pub eps: f64,
    /// Ridge added to the neighborhood covariance.
    pub ridge: f64,
}

impl Default for SmoothParams {
    fn default() -> Self {
        SmoothParams {
            window: 7,
            sigma: 20.0,
            sigma_matrix: None,
            eps: 1e-4,
            ridge: 1e-6,
        }
    }
}

impl SmoothParams {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::invalid(format!(
                "window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::invalid("eps must lie in (0, 0.5)"));
        }
        if self.ridge < 0.0 {
            return Err(Error::invalid("ridge must be >= 0"));
        }
        if let Some(m) = &self.sigma_matrix {
            if m.len() != k * k {
                return Err(Error::invalid(format!(
                    "sigma matrix has {} entries, need {k}x{k}",
                    m.len()
                )));
            }
            for i in 0..k {
                for j in 0..i {
                    if (m[i * k + j] - m[j * k + i]).abs() > 1e-9 {
                        return Err(Error::invalid("sigma matrix must be symmetric"));
                    }
                }
            }
        } else if self.sigma <= 0.0 {
            return Err(Error::invalid("sigma must be > 0"));
        }
        Ok(())
    }

    fn sigma_dense(&self, k: usize) -> Vec<f64> {
        match &self.sigma_matrix {
            Some(m) => m.clone(),
            None => {
                let mut m = vec![0.0; k * k];
                for i in 0..k {
                    m[i * k + i] = self.sigma;
                }
                m
            }
        }
    }
}

/// Log odds ratio with clamping: `ln(p / (1 - p))` after `p` is pulled
/// into `[eps, 1 - eps]`.
#[inline]
pub fn logit(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-class logit block in `[class][row][col]` layout.
#[derive(Debug, Clone)]
pub struct LogitBlock {
    pub nrows: usize,
    pub ncols: usize,
    pub n_classes: usize,
    pub values: Vec<f32>,
}

/// Transform one tile of stored probabilities into a logit block.
pub fn logit_transform(prob: &ProbCube, tile: &str, eps: f64) -> Result<LogitBlock> {
    let grid = prob.grid(tile)?;
    let k = prob.labels.len();
    let mut values = Vec::with_capacity(k * grid.nrows * grid.ncols);
    for class in 0..k {
        let plane = prob.read_plane(tile, class)?;
        values.extend(
            plane
                .iter()
                .map(|&v| logit(v as f64 / PROB_SCALE as f64, eps) as f32),
        );
    }
    Ok(LogitBlock {
        nrows: grid.nrows,
        ncols: grid.ncols,
        n_classes: k,
        values,
    })
}

/// Solve `A z = b` for symmetric positive definite `A` (in place copies;
/// plain Cholesky).
fn spd_solve(a: &[f64], b: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i * k + j];
            for t in 0..j {
                sum -= l[i * k + t] * l[j * k + t];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::invalid(
                        "covariance not positive definite; increase ridge or sigma",
                    ));
                }
                l[i * k + i] = sum.sqrt();
            } else {
                l[i * k + j] = sum / l[j * k + j];
            }
        }
    }
    // forward then back substitution
    let mut y = vec![0.0f64; k];
    for i in 0..k {
        let mut sum = b[i];
        for t in 0..i {
            sum -= l[i * k + t] * y[t];
        }
        y[i] = sum / l[i * k + i];
    }
    let mut z = vec![0.0f64; k];
    for i in (0..k).rev() {
        let mut sum = y[i];
        for t in i + 1..k {
            sum -= l[t * k + i] * z[t];
        }
        z[i] = sum / l[i * k + i];
    }
    Ok(z)
}

/// Smoothed logit vector for one pixel given its neighborhood logits.
/// `neighborhood` holds the K-vectors of every window pixel (center
/// included); `x` is the center pixel's own logit vector.
pub fn smooth_pixel(
    x: &[f64],
    neighborhood: &[Vec<f64>],
    sigma: &[f64],
    ridge: f64,
    k: usize,
) -> Result<Vec<f64>> {
    let n = neighborhood.len();
    let mut mean = vec![0.0f64; k];
    for v in neighborhood {
        for (m, &vi) in mean.iter_mut().zip(v) {
            *m += vi;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // sample covariance (divisor n-1) + ridge
    let mut s = vec![0.0f64; k * k];
    if n > 1 {
        for v in neighborhood {
            for i in 0..k {
                let di = v[i] - mean[i];
                for j in 0..k {
                    s[i * k + j] += di * (v[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        s.iter_mut().for_each(|e| *e /= denom);
    }
    for i in 0..k {
        s[i * k + i] += ridge;
    }

    // A = Sigma + S; theta = Sigma A^-1 m + S A^-1 x
    let mut a = vec![0.0f64; k * k];
    for i in 0..k * k {
        a[i] = sigma[i] + s[i];
    }
    let u = spd_solve(&a, &mean, k)?;
    let w = spd_solve(&a, x, k)?;
    let mut theta = vec![0.0f64; k];
    for i in 0..k {
        let mut acc = 0.0;
        for j in 0..k {
            acc += sigma[i * k + j] * u[j] + s[i * k + j] * w[j];
        }
        theta[i] = acc;
    }
    Ok(theta)
}

fn smooth_tile_rows(
    logits: &LogitBlock,
    sigma: &[f64],
    params: &SmoothParams,
    row_start: usize,
    row_end: usize,
) -> Result<Vec<i16>> {
    let (nrows, ncols, k) = (logits.nrows, logits.ncols, logits.n_classes);
    let radius = (params.window - 1) / 2;
    let plane = nrows * ncols;
    let mut out = vec![0i16; (row_end - row_start) * ncols * k];
    let mut neighborhood: Vec<Vec<f64>> = Vec::with_capacity(params.window * params.window);
    let mut x = vec![0.0f64; k];
    for row in row_start..row_end {
        for col in 0..ncols {
            let p = row * ncols + col;
            for class in 0..k {
                x[class] = logits.values[class * plane + p] as f64;
                if !x[class].is_finite() {
                    return Err(Error::Integrity {
                        file: PathBuf::from("probability cube"),
                        detail: format!("non-finite logit at pixel {p} class {class}"),
                    });
                }
            }
            // window cropped at tile borders
            neighborhood.clear();
            let r0 = row.saturating_sub(radius);
            let r1 = (row + radius).min(nrows - 1);
            let c0 = col.saturating_sub(radius);
            let c1 = (col + radius).min(ncols - 1);
            for nr in r0..=r1 {
                for nc in c0..=c1 {
                    let np = nr * ncols + nc;
                    neighborhood.push(
                        (0..k)
                            .map(|class| logits.values[class * plane + np] as f64)
                            .collect(),
                    );
                }
            }
            let theta = smooth_pixel(&x, &neighborhood, sigma, params.ridge, k)?;
            // back to probabilities, renormalized to a simplex
            let probs: Vec<f64> = theta.iter().map(|&t| inv_logit(t)).collect();
            let total: f64 = probs.iter().sum();
            let base = ((row - row_start) * ncols + col) * k;
            for class in 0..k {
                let scaled = (probs[class] / total * PROB_SCALE as f64).round();
                out[base + class] = scaled.clamp(0.0, PROB_SCALE as f64) as i16;
            }
        }
    }
    Ok(out)
}

/// Smooth a probability cube into a new one at `out_dir`. Tiles are
/// processed in row strips with halo reads, so the strip partition never
/// changes the result; strips run on `cores` threads.
pub fn bayes_smooth(
    prob: &ProbCube,
    params: &SmoothParams,
    out_dir: &Path,
    cores: usize,
) -> Result<ProbCube> {
    let k = prob.labels.len();
    params.validate(k)?;
    let sigma = params.sigma_dense(k);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    for grid in &prob.tiles {
        // logits for the whole tile; strips read their halo from it
        let logits = logit_transform(prob, &grid.tile, params.eps)?;
        let strip_rows = grid.nrows.div_ceil(cores.max(1)).max(1);
        let mut strips: Vec<(usize, usize)> = Vec::new();
        let mut row0 = 0;
        while row0 < grid.nrows {
            let end = (row0 + strip_rows).min(grid.nrows);
            strips.push((row0, end));
            row0 = end;
        }
        let results: Vec<Vec<i16>> = {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cores.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(|| {
                strips
                    .par_iter()
                    .map(|&(a, b)| smooth_tile_rows(&logits, &sigma, params, a, b))
                    .collect::<Result<Vec<Vec<i16>>>>()
            })?
        };

        // interleaved [pixel][class] strip results -> per-class planes
        let plane = grid.nrows * grid.ncols;
        let mut planes: Vec<Vec<i16>> = vec![vec![0i16; plane]; k];
        for (strip, &(a, _)) in results.iter().zip(&strips) {
            for (i, chunk) in strip.chunks(k).enumerate() {
                let p = a * grid.ncols + i;
                for class in 0..k {
                    planes[class][p] = chunk[class];
                }
            }
        }
        for (class, label) in prob.labels.iter().enumerate() {
            io::write_atomic(
                &out_dir.join(format!("{}_prob_{label}.bin", grid.tile)),
                &io::i16_to_le_bytes(&planes[class]),
            )?;
        }
    }

    let smoothed = ProbCube {
        id: prob.id.clone(),
        labels: prob.labels.clone(),
        tiles: prob.tiles.clone(),
        storage: out_dir.to_path_buf(),
    };
    // reuse the manifest format by writing through a temporary open cube
    let manifest = serde_json::json!({
        "id": smoothed.id,
        "labels": smoothed.labels,
        "scale_denominator": PROB_SCALE,
        "tiles": smoothed.tiles,
    });
    io::write_atomic(
        &out_dir.join("probs.json"),
        serde_json::to_string_pretty(&manifest).unwrap().as_bytes(),
    )?;
    Ok(smoothed)
}

/// Final thematic map: per-pixel argmax class indices plus a legend.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub legend: Vec<String>,
    pub tiles: Vec<TileGrid>,
    pub storage: PathBuf,
}

impl LabelMap {
    pub fn open(storage: &Path) -> Result<LabelMap> {
        let path = storage.join("legend.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let legend: Vec<String> = v
            .get("legend")
            .and_then(|l| l.as_object())
            .map(|obj| {
                let mut pairs: Vec<(usize, String)> = obj
                    .iter()
                    .filter_map(|(idx, label)| {
                        Some((idx.parse().ok()?, label.as_str()?.to_string()))
                    })
                    .collect();
                pairs.sort();
                pairs.into_iter().map(|(_, l)| l).collect()
            })
            .ok_or_else(|| Error::Json {
                path: path.clone(),
                detail: "missing legend object".into(),
            })?;
        let tiles: Vec<TileGrid> =
            serde_json::from_value(v.get("tiles").cloned().unwrap_or_default()).map_err(|e| {
                Error::Json {
                    path,
                    detail: format!("tiles: {e}"),
                }
            })?;
        Ok(LabelMap {
            legend,
            tiles,
            storage: storage.to_path_buf(),
        })
    }

    pub fn grid(&self, tile: &str) -> Result<&TileGrid> {
        self.tiles
            .iter()
            .find(|t| t.tile == tile)
            .ok_or_else(|| Error::invalid(format!("tile {tile:?} not in label map")))
    }

    pub fn class_path(&self, tile: &str) -> PathBuf {
        self.storage.join(format!("{tile}_class.bin"))
    }

    pub fn read_classes(&self, tile: &str) -> Result<Vec<u8>> {
        let grid = self.grid(tile)?;
        io::read_u8_raster(&self.class_path(tile), grid.nrows * grid.ncols)
    }

    /// First tile containing the location, then its class index there.
    pub fn class_at(&self, lon: f64, lat: f64) -> Result<Option<u8>> {
        for grid in &self.tiles {
            if let Some((row, col)) = grid.pixel_at(lon, lat) {
                let classes = self.read_classes(&grid.tile)?;
                return Ok(Some(classes[row * grid.ncols + col]));
            }
        }
        Ok(None)
    }
}

/// Argmax labeling; ties pick the lowest class index.
pub fn label_map(prob: &ProbCube, out_dir: &Path) -> Result<LabelMap> {
    let k = prob.labels.len();
    if k > u8::MAX as usize {
        return Err(Error::invalid(format!("{k} classes exceed u8 label map")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for grid in &prob.tiles {
        let planes: Vec<Vec<i16>> = (0..k)
            .map(|class| prob.read_plane(&grid.tile, class))
            .collect::<Result<_>>()?;
        let mut classes = vec![0u8; grid.nrows * grid.ncols];
        for (p, out) in classes.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_v = planes[0][p];
            for (class, plane) in planes.iter().enumerate().skip(1) {
                if plane[p] > best_v {
                    best_v = plane[p];
                    best = class;
                }
            }
            *out = best as u8;
        }
        io::write_atomic(&out_dir.join(format!("{}_class.bin", grid.tile)), &classes)?;
    }
    let legend: serde_json::Map<String, serde_json::Value> = prob
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (i.to_string(), serde_json::Value::String(l.clone())))
        .collect();
    let doc = serde_json::json!({ "legend": legend, "tiles": prob.tiles });
    io::write_atomic(
        &out_dir.join("legend.json"),
        serde_json::to_string_pretty(&doc).unwrap().as_bytes(),
    )?;
    Ok(LabelMap {
        legend: prob.labels.clone(),
        tiles: prob.tiles.clone(),
        storage: out_dir.to_path_buf(),
    })
}

/// Optional rendering: one pixel per cell, palette in legend order.
pub fn render_class_map(map: &LabelMap, tile: &str, path: &Path) -> Result<()> {
    let grid = map.grid(tile)?;
    let classes = map.read_classes(tile)?;
    let mut pixels = Vec::with_capacity(classes.len() * 3);
    for &c in &classes {
        pixels.extend_from_slice(&io::palette_color(c as usize));
    }
    io::write_ppm(path, grid.ncols, grid.nrows, &pixels)
}

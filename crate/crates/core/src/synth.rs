//! Deterministic synthetic scenarios: a catalog with rasters on disk, the
//! ground-truth label map, and a training-sample CSV, all reproducible
//! from a seed.
//!
//! Class signatures are per-band sinusoids plus class-specific pulses, so
//! at least one class pair differs only in *when* the pulse happens --
//! separating them requires temporal order, not just value statistics.
//! The spatial layout is a diagonal block pattern, which gives every
//! class contiguous regions with interiors for smoothing tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::catalog::{BandDef, CollectionDescriptor, Dtype};
use crate::cube::{TileGrid, Timeline};
use crate::error::{Error, Result};
use crate::io;
use crate::samples::SamplePoint;
use crate::smooth::LabelMap;

pub const STORED_SCALE: f64 = 1e-4;
pub const NODATA: f64 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub tile: String,
    pub n_classes: usize,
    pub nrows: usize,
    pub ncols: usize,
    pub n_bands: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub period_days: u32,
    /// Side length of the square ground-truth blocks.
    pub block: usize,
    /// Per-pixel per-acquisition probability of a cloud gap.
    pub cloud_fraction: f64,
    /// Gaussian noise added to every observation.
    pub noise_sigma: f64,
    pub n_samples: usize,
    /// Mark clouds with a dedicated mask band instead of nodata values.
    pub with_mask_band: bool,
}

impl ScenarioSpec {
    pub fn new(n_classes: usize, nrows: usize, ncols: usize) -> ScenarioSpec {
        ScenarioSpec {
            tile: "S1".into(),
            n_classes,
            nrows,
            ncols,
            n_bands: 2,
            start: NaiveDate::from_ymd_opt(2017, 9, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2018, 8, 31).unwrap(),
            period_days: 16,
            block: 16,
            cloud_fraction: 0.05,
            noise_sigma: 0.02,
            n_samples: 300,
            with_mask_band: false,
        }
    }

    pub fn timeline(&self) -> Result<Timeline> {
        Timeline::build(self.start, self.end, self.period_days)
    }

    pub fn class_labels(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("class{c}")).collect()
    }

    /// Noise-free signature value for (class, band, instant).
    pub fn signature(&self, class: usize, band: usize, t: usize, n_t: usize) -> f64 {
        // classes 0 and 1 share the sinusoid and differ only by pulse
        // instant; further classes get distinct bases
        let shared = class <= 1;
        let base = if shared {
            0.30
        } else {
            0.30 + 0.18 * (class - 1) as f64
        };
        let amp = 0.06 + 0.02 * band as f64;
        let phase = if shared { 0.4 } else { 0.4 + 0.9 * class as f64 };
        let angle = 2.0 * std::f64::consts::PI * t as f64 / n_t as f64 + phase;
        let mut v = base + amp * angle.sin();
        if shared && band == 0 {
            let pulse_at = if class == 0 { n_t / 4 } else { (3 * n_t) / 4 };
            if t == pulse_at {
                v += 0.35;
            }
        }
        v
    }

    /// Smallest pairwise L2 distance between class signatures.
    pub fn min_signature_distance(&self, n_t: usize) -> f64 {
        let mut min = f64::INFINITY;
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                let mut d2 = 0.0;
                for t in 0..n_t {
                    for band in 0..self.n_bands {
                        let diff = self.signature(a, band, t, n_t)
                            - self.signature(b, band, t, n_t);
                        d2 += diff * diff;
                    }
                }
                min = min.min(d2.sqrt());
            }
        }
        min
    }

    pub fn grid(&self) -> TileGrid {
        TileGrid {
            tile: self.tile.clone(),
            nrows: self.nrows,
            ncols: self.ncols,
            origin: (-55.0, -10.0),
            resolution: (0.0005, 0.0005),
        }
    }

    /// Ground-truth class of a pixel: diagonal block pattern.
    pub fn truth_class(&self, row: usize, col: usize) -> usize {
        ((row / self.block) + (col / self.block)) % self.n_classes
    }
}

#[derive(Debug)]
pub struct SynthOutput {
    pub catalog_path: PathBuf,
    pub collection: CollectionDescriptor,
    pub truth: LabelMap,
    pub samples_path: PathBuf,
}

/// Write the full scenario under `out_dir`: `catalog.json` + raster
/// assets, `truth/` label map, and `samples.csv` drawn from the truth.
/// Identical (spec, seed) pairs produce byte-identical outputs.
pub fn generate_cube(spec: &ScenarioSpec, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    if spec.n_classes < 2 {
        return Err(Error::invalid("scenario needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&spec.cloud_fraction) {
        return Err(Error::invalid("cloud_fraction must be in [0, 1]"));
    }
    let timeline = spec.timeline()?;
    let n_t = timeline.len();
    let min_dist = spec.min_signature_distance(n_t);
    if min_dist <= 3.0 * spec.noise_sigma {
        return Err(Error::invalid(format!(
            "signatures too close for the noise level: min distance {min_dist:.4} <= 3 sigma ({:.4})",
            3.0 * spec.noise_sigma
        )));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let assets_dir = out_dir.join("assets");
    std::fs::create_dir_all(&assets_dir).map_err(|e| Error::io(&assets_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).unwrap();
    let grid = spec.grid();
    let npix = spec.nrows * spec.ncols;

    let mut bands: Vec<BandDef> = (0..spec.n_bands)
        .map(|b| BandDef {
            name: format!("b{b}"),
            dtype: Dtype::Int16,
            scale: STORED_SCALE,
            nodata: NODATA,
            is_cloud_mask: false,
        })
        .collect();
    if spec.with_mask_band {
        bands.push(BandDef {
            name: "cloud".into(),
            dtype: Dtype::Int16,
            scale: 1.0,
            nodata: -1.0,
            is_cloud_mask: true,
        });
    }

    let mut items = Vec::with_capacity(n_t);
    for (t, date) in timeline.instants().iter().enumerate() {
        // cloud layout first so it is independent of band order
        let cloudy: Vec<bool> = (0..npix)
            .map(|_| rng.gen_range(0.0..1.0) < spec.cloud_fraction)
            .collect();
        let cloud_count = cloudy.iter().filter(|&&c| c).count();

        let mut assets = BTreeMap::new();
        for band in 0..spec.n_bands {
            let mut stored = vec![0i16; npix];
            for p in 0..npix {
                let (row, col) = (p / spec.ncols, p % spec.ncols);
                let class = spec.truth_class(row, col);
                let v = spec.signature(class, band, t, n_t) + noise.sample(&mut rng);
                stored[p] = if cloudy[p] && !spec.with_mask_band {
                    NODATA as i16
                } else {
                    ((v / STORED_SCALE).round()).clamp(i16::MIN as f64, i16::MAX as f64) as i16
                };
            }
            let name = format!("{}_b{band}_{date}.bin", spec.tile);
            io::write_atomic(&assets_dir.join(&name), &io::i16_to_le_bytes(&stored))?;
            assets.insert(format!("b{band}"), format!("assets/{name}"));
        }
        if spec.with_mask_band {
            let mask: Vec<i16> = cloudy.iter().map(|&c| i16::from(c)).collect();
            let name = format!("{}_cloud_{date}.bin", spec.tile);
            io::write_atomic(&assets_dir.join(&name), &io::i16_to_le_bytes(&mask))?;
            assets.insert("cloud".into(), format!("assets/{name}"));
        }
        items.push((date, cloud_count, assets));
    }

    // catalog JSON referencing the assets relative to the catalog file
    let catalog_doc = serde_json::json!({
        "id": format!("synth-{}", spec.tile),
        "crs": "EPSG:4326",
        "resolution": [grid.resolution.0, grid.resolution.1],
        "bands": bands,
        "items": items.iter().map(|(date, cloud_count, assets)| {
            serde_json::json!({
                "tile": spec.tile,
                "datetime": date.to_string(),
                "cloud_cover": *cloud_count as f64 / npix as f64 * 100.0,
                "nrows": spec.nrows,
                "ncols": spec.ncols,
                "origin": [grid.origin.0, grid.origin.1],
                "assets": assets,
            })
        }).collect::<Vec<_>>(),
    });
    let catalog_path = out_dir.join("catalog.json");
    io::write_atomic(
        &catalog_path,
        serde_json::to_string_pretty(&catalog_doc).unwrap().as_bytes(),
    )?;
    let collection = crate::catalog::parse_catalog(catalog_path.to_str().unwrap())?;

    // ground truth label map
    let truth_dir = out_dir.join("truth");
    std::fs::create_dir_all(&truth_dir).map_err(|e| Error::io(&truth_dir, e))?;
    let classes: Vec<u8> = (0..npix)
        .map(|p| spec.truth_class(p / spec.ncols, p % spec.ncols) as u8)
        .collect();
    io::write_atomic(&truth_dir.join(format!("{}_class.bin", spec.tile)), &classes)?;
    let legend: serde_json::Map<String, serde_json::Value> = spec
        .class_labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (i.to_string(), serde_json::Value::String(l.clone())))
        .collect();
    io::write_atomic(
        &truth_dir.join("legend.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "legend": legend,
            "tiles": [grid],
        }))
        .unwrap()
        .as_bytes(),
    )?;
    let truth = LabelMap::open(&truth_dir)?;

    // training samples drawn from the truth at pixel centers
    let samples = draw_points(spec, &grid, spec.n_samples, seed.wrapping_add(1));
    let samples_path = out_dir.join("samples.csv");
    let mut csv = String::from("longitude,latitude,start_date,end_date,label\n");
    for s in &samples {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.longitude, s.latitude, s.start_date, s.end_date, s.label
        ));
    }
    io::write_atomic(&samples_path, csv.as_bytes())?;

    Ok(SynthOutput {
        catalog_path,
        collection,
        truth,
        samples_path,
    })
}

/// Sample points uniformly over pixel centers, labeled by the ground
/// truth. Useful for both training CSVs and held-out reference sets.
pub fn draw_points(
    spec: &ScenarioSpec,
    grid: &TileGrid,
    n: usize,
    seed: u64,
) -> Vec<SamplePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = spec.class_labels();
    (0..n)
        .map(|_| {
            let row = rng.gen_range(0..spec.nrows);
            let col = rng.gen_range(0..spec.ncols);
            let (lon, lat) = grid.center_of(row, col);
            SamplePoint {
                longitude: lon,
                latitude: lat,
                start_date: spec.start,
                end_date: spec.end,
                label: labels[spec.truth_class(row, col)].clone(),
            }
        })
        .collect()
}

//! Labeled sample points and the time-series table extracted for them.
//!
//! A table row pairs sample metadata (location, validity interval, label)
//! with a multivariate series in `[time][band]` layout. Every row of a
//! table shares the same band list and timeline, which is what the model
//! contract requires.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::cube::{RegularCube, Timeline};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub longitude: f64,
    pub latitude: f64,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub point: SamplePoint,
    /// Flattened `[time][band]`: index `t * n_bands + b`.
    pub series: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    pub cube_id: String,
    pub band_names: Vec<String>,
    pub timeline: Timeline,
    pub rows: Vec<TableRow>,
}

/// What happened to the input points during extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub retained: usize,
    /// Outside every tile footprint.
    pub dropped_outside: usize,
    /// Inside a tile but the point's validity interval does not cover the
    /// cube timeline, so it cannot share the table timeline.
    pub rejected_span: usize,
}

impl TimeSeriesTable {
    pub fn n_bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn n_times(&self) -> usize {
        self.timeline.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_bands() * self.n_times()
    }

    /// Distinct labels in sorted order.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.point.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn load_samples_csv(path: &Path) -> Result<Vec<SamplePoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv {
                path: path.to_path_buf(),
                detail: format!("missing column {name:?}"),
            })
    };
    // Columns are found by name, not position.
    let (c_lon, c_lat) = (col("longitude")?, col("latitude")?);
    let (c_start, c_end, c_label) = (col("start_date")?, col("end_date")?, col("label")?);

    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(points.len() as u64 + 2);
        let cell = |i: usize| record.get(i).unwrap_or("");
        let fail = |what: &str| Error::Csv {
            path: path.to_path_buf(),
            detail: format!("line {line}: {what}"),
        };
        let parse_f64 = |i: usize, name: &str| -> Result<f64> {
            cell(i)
                .parse::<f64>()
                .map_err(|_| fail(&format!("unparseable {name} {:?}", cell(i))))
        };
        let parse_date = |i: usize, name: &str| -> Result<NaiveDate> {
            NaiveDate::parse_from_str(cell(i), "%Y-%m-%d")
                .map_err(|_| fail(&format!("unparseable {name} {:?}", cell(i))))
        };
        let point = SamplePoint {
            longitude: parse_f64(c_lon, "longitude")?,
            latitude: parse_f64(c_lat, "latitude")?,
            start_date: parse_date(c_start, "start_date")?,
            end_date: parse_date(c_end, "end_date")?,
            label: cell(c_label).to_string(),
        };
        if point.label.is_empty() {
            return Err(fail("empty label"));
        }
        if point.start_date > point.end_date {
            return Err(fail("start_date after end_date"));
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            detail: "no data rows".into(),
        });
    }
    Ok(points)
}

/// GeoJSON FeatureCollection of Points with `label`, `start_date`,
/// `end_date` properties.
pub fn load_samples_geojson(path: &Path) -> Result<Vec<SamplePoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let fail = |what: String| Error::Json {
        path: path.to_path_buf(),
        detail: what,
    };
    let features = v
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| fail("expected FeatureCollection with features".into()))?;
    let mut points = Vec::new();
    for (i, feature) in features.iter().enumerate() {
        let geom = feature
            .get("geometry")
            .ok_or_else(|| fail(format!("feature {i}: missing geometry")))?;
        if geom.get("type").and_then(|t| t.as_str()) != Some("Point") {
            return Err(fail(format!("feature {i}: geometry must be a Point")));
        }
        let coords = geom
            .get("coordinates")
            .and_then(|c| c.as_array())
            .filter(|c| c.len() >= 2)
            .ok_or_else(|| fail(format!("feature {i}: bad coordinates")))?;
        let props = feature
            .get("properties")
            .ok_or_else(|| fail(format!("feature {i}: missing properties")))?;
        let prop = |name: &str| -> Result<&str> {
            props
                .get(name)
                .and_then(|p| p.as_str())
                .ok_or_else(|| fail(format!("feature {i}: missing property {name:?}")))
        };
        let date = |name: &str| -> Result<NaiveDate> {
            NaiveDate::parse_from_str(prop(name)?, "%Y-%m-%d")
                .map_err(|_| fail(format!("feature {i}: unparseable {name}")))
        };
        let label = prop("label")?.to_string();
        if label.is_empty() {
            return Err(fail(format!("feature {i}: empty label")));
        }
        points.push(SamplePoint {
            longitude: coords[0].as_f64().unwrap_or(f64::NAN),
            latitude: coords[1].as_f64().unwrap_or(f64::NAN),
            start_date: date("start_date")?,
            end_date: date("end_date")?,
            label,
        });
    }
    if points.is_empty() {
        return Err(fail("no features".into()));
    }
    Ok(points)
}

/// Extract per-location time series from a regular cube.
///
/// All retained rows share the full cube timeline; points whose validity
/// interval does not cover it are rejected rather than producing rows of a
/// different length. Output order follows input order.
pub fn get_data(
    cube: &RegularCube,
    points: &[SamplePoint],
) -> Result<(TimeSeriesTable, ExtractionReport)> {
    if points.is_empty() {
        return Err(Error::invalid("no sample points given"));
    }
    let span = (cube.timeline.start(), cube.timeline.end());

    // One cached full-tile block per touched tile.
    let mut blocks: Vec<Option<crate::cube::RasterBlock>> = vec![None; cube.tiles.len()];
    let mut rows = Vec::new();
    let mut report = ExtractionReport {
        retained: 0,
        dropped_outside: 0,
        rejected_span: 0,
    };
    let mut features = Vec::new();
    for point in points {
        let Some((tile_idx, row, col)) = cube.locate(point.longitude, point.latitude) else {
            report.dropped_outside += 1;
            continue;
        };
        if point.start_date > span.0 || point.end_date < span.1 {
            report.rejected_span += 1;
            continue;
        }
        if blocks[tile_idx].is_none() {
            blocks[tile_idx] = Some(cube.read_full(&cube.tiles[tile_idx].tile)?);
        }
        let block = blocks[tile_idx].as_ref().unwrap();
        block.pixel_features(row, col, &mut features);
        rows.push(TableRow {
            point: point.clone(),
            series: features.clone(),
        });
    }
    report.retained = rows.len();
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "zero points retained ({} outside footprints, {} rejected for timeline span)",
            report.dropped_outside, report.rejected_span
        )));
    }
    Ok((
        TimeSeriesTable {
            cube_id: cube.id.clone(),
            band_names: cube.bands.iter().map(|b| b.name.clone()).collect(),
            timeline: cube.timeline.clone(),
            rows,
        },
        report,
    ))
}

/// Robust per-band min/max statistics (2% / 98% sample quantiles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub q02: Vec<f64>,
    pub q98: Vec<f64>,
}

/// Sample quantile at the fixed sorted-array index `ceil(q * (n - 1))`.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = (q * (n - 1) as f64).ceil() as usize;
    sorted[idx.min(n - 1)]
}

pub fn fit_normalization(table: &TimeSeriesTable) -> Result<NormStats> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let n_bands = table.n_bands();
    let mut q02 = Vec::with_capacity(n_bands);
    let mut q98 = Vec::with_capacity(n_bands);
    for b in 0..n_bands {
        let mut values: Vec<f64> = table
            .rows
            .iter()
            .flat_map(|r| {
                (0..table.n_times()).map(move |t| r.series[t * n_bands + b] as f64)
            })
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted_quantile(&values, 0.02);
        let hi = sorted_quantile(&values, 0.98);
        if lo == hi {
            log::warn!(
                "band {:?} is constant at {lo}; normalized values pinned to 0.5",
                table.band_names[b]
            );
        }
        q02.push(lo);
        q98.push(hi);
    }
    Ok(NormStats { q02, q98 })
}

impl NormStats {
    /// `(v - q02) / (q98 - q02)` clipped to [0, 1]; constant bands map to 0.5.
    #[inline]
    pub fn normalize_value(&self, band: usize, v: f32) -> f32 {
        let (lo, hi) = (self.q02[band], self.q98[band]);
        if lo == hi {
            return 0.5;
        }
        (((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)) as f32
    }

    /// Normalize a `[time][band]` feature vector in place.
    pub fn normalize_features(&self, features: &mut [f32], n_bands: usize) {
        for (i, v) in features.iter_mut().enumerate() {
            *v = self.normalize_value(i % n_bands, *v);
        }
    }
}

pub fn apply_normalization(table: &TimeSeriesTable, stats: &NormStats) -> TimeSeriesTable {
    let n_bands = table.n_bands();
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let mut series = r.series.clone();
            stats.normalize_features(&mut series, n_bands);
            TableRow {
                point: r.point.clone(),
                series,
            }
        })
        .collect();
    TimeSeriesTable {
        cube_id: table.cube_id.clone(),
        band_names: table.band_names.clone(),
        timeline: table.timeline.clone(),
        rows,
    }
}

// ---------------------------------------------------------------------------
// On-disk table format: wide CSV plus a small sidecar with the metadata the
// CSV cannot carry (cube id, band list, timeline).

#[derive(Serialize, Deserialize)]
struct TableMeta {
    cube_id: String,
    band_names: Vec<String>,
    timeline_start: NaiveDate,
    timeline_period_days: u32,
    timeline_n: usize,
}

fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Write `table.csv` (metadata columns, then `b{band}_t{index}` wide
/// columns) and `table.meta.json` beside it.
pub fn save_table(table: &TimeSeriesTable, csv_path: &Path) -> Result<()> {
    let mut header = vec![
        "longitude".to_string(),
        "latitude".to_string(),
        "start_date".to_string(),
        "end_date".to_string(),
        "label".to_string(),
    ];
    for t in 0..table.n_times() {
        for b in &table.band_names {
            header.push(format!("b{b}_t{t}"));
        }
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&header).map_err(|e| Error::Csv {
        path: csv_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    for row in &table.rows {
        let mut record = vec![
            row.point.longitude.to_string(),
            row.point.latitude.to_string(),
            row.point.start_date.to_string(),
            row.point.end_date.to_string(),
            row.point.label.clone(),
        ];
        record.extend(row.series.iter().map(|v| v.to_string()));
        writer.write_record(&record).map_err(|e| Error::Csv {
            path: csv_path.to_path_buf(),
            detail: e.to_string(),
        })?;
    }
    let bytes = writer.into_inner().expect("in-memory writer");
    crate::io::write_atomic(csv_path, &bytes)?;

    let meta = TableMeta {
        cube_id: table.cube_id.clone(),
        band_names: table.band_names.clone(),
        timeline_start: table.timeline.start(),
        timeline_period_days: table.timeline.period_days(),
        timeline_n: table.timeline.len(),
    };
    crate::io::write_atomic(
        &meta_path(csv_path),
        serde_json::to_string_pretty(&meta).unwrap().as_bytes(),
    )
}

pub fn load_table(csv_path: &Path) -> Result<TimeSeriesTable> {
    let mp = meta_path(csv_path);
    let meta: TableMeta = serde_json::from_str(
        &std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?,
    )
    .map_err(|e| Error::Json {
        path: mp.clone(),
        detail: e.to_string(),
    })?;
    let timeline = Timeline::from_parts(
        meta.timeline_start,
        meta.timeline_period_days,
        meta.timeline_n,
    )?;

    let points = load_samples_csv(csv_path)?;
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Csv {
        path: csv_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let headers = reader.headers().unwrap().clone();
    let n_feats = meta.band_names.len() * meta.timeline_n;
    let mut feature_cols = Vec::with_capacity(n_feats);
    for t in 0..meta.timeline_n {
        for b in &meta.band_names {
            let name = format!("b{b}_t{t}");
            let idx = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Csv {
                    path: csv_path.to_path_buf(),
                    detail: format!("missing series column {name:?}"),
                })?;
            feature_cols.push(idx);
        }
    }
    let mut rows = Vec::new();
    for (record, point) in reader.records().zip(points) {
        let record = record.map_err(|e| Error::Csv {
            path: csv_path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut series = Vec::with_capacity(n_feats);
        for &i in &feature_cols {
            let cell = record.get(i).unwrap_or("");
            series.push(cell.parse::<f32>().map_err(|_| Error::Csv {
                path: csv_path.to_path_buf(),
                detail: format!("unparseable series value {cell:?}"),
            })?);
        }
        rows.push(TableRow { point, series });
    }
    Ok(TimeSeriesTable {
        cube_id: meta.cube_id,
        band_names: meta.band_names,
        timeline,
        rows,
    })
}

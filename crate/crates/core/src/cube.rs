//! Regular data cubes: gap-free, grid-aligned rasters on a single shared
//! timeline, built from an image collection by temporal compositing and
//! gap filling.
//!
//! Storage layout under `storage_root`:
//!   `{tile}/{tile}_{band}_{YYYY-MM-DD}.bin`  headerless little-endian i16
//!   `cube.json`                              manifest
//!
//! Stored values are `i16` with the band's multiplicative scale; block
//! reads return physical `f32` values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{BandDef, CollectionDescriptor, Dtype};
use crate::error::{Error, Result};
use crate::io;

/// Contiguous acquisition intervals: instant `i` covers
/// `[instants[i], instants[i] + period_days)`, and consecutive intervals
/// meet exactly (no gaps, no overlaps).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timeline {
    instants: Vec<NaiveDate>,
    period_days: u32,
}

impl Timeline {
    /// Instants `start, start+P, ...` while `<= end`.
    pub fn build(start: NaiveDate, end: NaiveDate, period_days: u32) -> Result<Timeline> {
        if start > end {
            return Err(Error::invalid(format!("start {start} after end {end}")));
        }
        if period_days == 0 {
            return Err(Error::invalid("period_days must be >= 1"));
        }
        let mut instants = Vec::new();
        let mut d = start;
        while d <= end {
            instants.push(d);
            d += Duration::days(period_days as i64);
        }
        Ok(Timeline {
            instants,
            period_days,
        })
    }

    pub fn from_parts(start: NaiveDate, period_days: u32, n: usize) -> Result<Timeline> {
        if period_days == 0 || n == 0 {
            return Err(Error::invalid("timeline needs period_days >= 1 and n >= 1"));
        }
        let instants = (0..n)
            .map(|i| start + Duration::days(period_days as i64 * i as i64))
            .collect();
        Ok(Timeline {
            instants,
            period_days,
        })
    }

    pub fn instants(&self) -> &[NaiveDate] {
        &self.instants
    }

    pub fn len(&self) -> usize {
        self.instants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instants.is_empty()
    }

    pub fn period_days(&self) -> u32 {
        self.period_days
    }

    pub fn start(&self) -> NaiveDate {
        self.instants[0]
    }

    pub fn end(&self) -> NaiveDate {
        *self.instants.last().unwrap()
    }

    /// Interval index for an observation date: `t <= d < t + P`.
    pub fn interval_of(&self, d: NaiveDate) -> Option<usize> {
        if d < self.start() {
            return None;
        }
        let offset = (d - self.start()).num_days() as u64;
        let idx = (offset / self.period_days as u64) as usize;
        (idx < self.instants.len()).then_some(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile: String,
    pub nrows: usize,
    pub ncols: usize,
    /// Top-left corner in CRS units.
    pub origin: (f64, f64),
    /// CRS units per pixel (x, y), both positive.
    pub resolution: (f64, f64),
}

impl TileGrid {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let col_f = (lon - self.origin.0) / self.resolution.0;
        let row_f = (self.origin.1 - lat) / self.resolution.1;
        (0.0..=self.ncols as f64).contains(&col_f) && (0.0..=self.nrows as f64).contains(&row_f)
    }

    /// Nearest-pixel-center lookup; a location on the boundary between two
    /// pixels maps to the lower index.
    pub fn pixel_at(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        if !self.contains(lon, lat) {
            return None;
        }
        let col_f = (lon - self.origin.0) / self.resolution.0;
        let row_f = (self.origin.1 - lat) / self.resolution.1;
        let col = (col_f.ceil() as isize - 1).max(0) as usize;
        let row = (row_f.ceil() as isize - 1).max(0) as usize;
        Some((row.min(self.nrows - 1), col.min(self.ncols - 1)))
    }

    /// Lon/lat of a pixel's center.
    pub fn center_of(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.resolution.0,
            self.origin.1 - (row as f64 + 0.5) * self.resolution.1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub nrows: usize,
    pub ncols: usize,
}

impl Window {
    pub fn full(grid: &TileGrid) -> Window {
        Window {
            row0: 0,
            col0: 0,
            nrows: grid.nrows,
            ncols: grid.ncols,
        }
    }

    pub fn pixels(&self) -> usize {
        self.nrows * self.ncols
    }
}

/// Dense float32 block indexed `[band][time][row][col]`, physical values,
/// no missing data when read from a regular cube.
#[derive(Debug, Clone)]
pub struct RasterBlock {
    pub window: Window,
    pub n_bands: usize,
    pub n_times: usize,
    pub values: Vec<f32>,
}

impl RasterBlock {
    #[inline]
    pub fn value(&self, band: usize, time: usize, row: usize, col: usize) -> f32 {
        debug_assert!(band < self.n_bands && time < self.n_times);
        self.values
            [((band * self.n_times + time) * self.window.nrows + row) * self.window.ncols + col]
    }

    /// Feature vector for one pixel in `[time][band]` layout (time-major),
    /// the layout shared by tables, models, and the classification engine.
    pub fn pixel_features(&self, row: usize, col: usize, out: &mut Vec<f32>) {
        out.clear();
        for t in 0..self.n_times {
            for b in 0..self.n_bands {
                out.push(self.value(b, t, row, col));
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TimelineManifest {
    start: NaiveDate,
    period_days: u32,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct CubeManifest {
    id: String,
    crs: String,
    bands: Vec<BandDef>,
    timeline: TimelineManifest,
    tiles: Vec<TileGrid>,
    filled_pixel_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularCube {
    pub id: String,
    pub crs: String,
    /// Data bands only; the cloud mask is consumed during regularization.
    pub bands: Vec<BandDef>,
    pub timeline: Timeline,
    pub tiles: Vec<TileGrid>,
    pub storage_root: PathBuf,
    pub filled_pixel_count: u64,
}

impl RegularCube {
    pub fn open(storage_root: &Path) -> Result<RegularCube> {
        let manifest_path = storage_root.join("cube.json");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: CubeManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: manifest_path.clone(),
            detail: e.to_string(),
        })?;
        Ok(RegularCube {
            id: m.id,
            crs: m.crs,
            bands: m.bands,
            timeline: Timeline::from_parts(m.timeline.start, m.timeline.period_days, m.timeline.n)?,
            tiles: m.tiles,
            storage_root: storage_root.to_path_buf(),
            filled_pixel_count: m.filled_pixel_count,
        })
    }

    fn write_manifest(&self) -> Result<()> {
        let m = CubeManifest {
            id: self.id.clone(),
            crs: self.crs.clone(),
            bands: self.bands.clone(),
            timeline: TimelineManifest {
                start: self.timeline.start(),
                period_days: self.timeline.period_days(),
                n: self.timeline.len(),
            },
            tiles: self.tiles.clone(),
            filled_pixel_count: self.filled_pixel_count,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serialization");
        io::write_atomic(&self.storage_root.join("cube.json"), text.as_bytes())
    }

    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let p = self.storage_root.join("cube.json");
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn grid(&self, tile: &str) -> Result<&TileGrid> {
        self.tiles
            .iter()
            .find(|t| t.tile == tile)
            .ok_or_else(|| Error::invalid(format!("tile {tile:?} not in cube")))
    }

    pub fn band_index(&self, name: &str) -> Result<usize> {
        self.bands
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::invalid(format!("band {name:?} not in cube")))
    }

    pub fn band_file(&self, tile: &str, band: &str, instant: NaiveDate) -> PathBuf {
        self.storage_root
            .join(tile)
            .join(format!("{tile}_{band}_{instant}.bin"))
    }

    /// First tile (in cube order) whose footprint contains the location.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(usize, usize, usize)> {
        for (i, g) in self.tiles.iter().enumerate() {
            if let Some((r, c)) = g.pixel_at(lon, lat) {
                return Some((i, r, c));
            }
        }
        None
    }

    /// Nearest-pixel-center mapping within one tile.
    pub fn pixel_at(&self, tile: &str, lon: f64, lat: f64) -> Result<(usize, usize)> {
        let grid = self.grid(tile)?;
        grid.pixel_at(lon, lat)
            .ok_or(Error::OutsideExtent { lon, lat })
    }

    /// Windowed read of selected bands and instants, returning physical
    /// float32 values (stored i16 times the band scale).
    pub fn read_block(
        &self,
        tile: &str,
        window: Window,
        band_idxs: &[usize],
        instant_idxs: &[usize],
    ) -> Result<RasterBlock> {
        let grid = self.grid(tile)?;
        if window.nrows == 0
            || window.ncols == 0
            || window.row0 + window.nrows > grid.nrows
            || window.col0 + window.ncols > grid.ncols
        {
            return Err(Error::WindowOutOfBounds {
                row0: window.row0,
                col0: window.col0,
                nrows: window.nrows,
                ncols: window.ncols,
                grid_rows: grid.nrows,
                grid_cols: grid.ncols,
            });
        }
        for &b in band_idxs {
            if b >= self.bands.len() {
                return Err(Error::invalid(format!("band index {b} out of range")));
            }
        }
        for &t in instant_idxs {
            if t >= self.timeline.len() {
                return Err(Error::invalid(format!("instant index {t} out of range")));
            }
        }

        let mut values =
            Vec::with_capacity(band_idxs.len() * instant_idxs.len() * window.pixels());
        for &b in band_idxs {
            let band = &self.bands[b];
            let scale = band.scale as f32;
            for &t in instant_idxs {
                let path = self.band_file(tile, &band.name, self.timeline.instants()[t]);
                let raster = io::read_i16_raster(&path, grid.nrows * grid.ncols)?;
                for r in 0..window.nrows {
                    let row = window.row0 + r;
                    let base = row * grid.ncols + window.col0;
                    values.extend(
                        raster[base..base + window.ncols]
                            .iter()
                            .map(|&v| v as f32 * scale),
                    );
                }
            }
        }
        Ok(RasterBlock {
            window,
            n_bands: band_idxs.len(),
            n_times: instant_idxs.len(),
            values,
        })
    }

    /// Full-tile read of every band and instant.
    pub fn read_full(&self, tile: &str) -> Result<RasterBlock> {
        let grid = self.grid(tile)?;
        let bands: Vec<usize> = (0..self.bands.len()).collect();
        let instants: Vec<usize> = (0..self.timeline.len()).collect();
        self.read_block(tile, Window::full(grid), &bands, &instants)
    }
}

/// A tile/band composite prior to writing: per instant, the median of valid
/// observations, or `None` where no valid observation fell in the interval.
struct CompositeSeries {
    values: Vec<Option<f64>>,
}

/// Build a [`RegularCube`] from a collection: composite each interval by
/// the per-pixel median of valid observations, fill temporal gaps by linear
/// interpolation (nearest value at the edges), and store everything as i16
/// with the band scale.
///
/// Pixels with no valid observation at any instant take the tile/band
/// median and are counted in the manifest's `filled_pixel_count`.
pub fn regularize(
    c: &CollectionDescriptor,
    timeline: &Timeline,
    storage_root: &Path,
) -> Result<RegularCube> {
    let data_bands: Vec<BandDef> = c.data_bands().into_iter().cloned().collect();
    if data_bands.is_empty() {
        return Err(Error::invalid("collection has no data bands"));
    }
    if c.items.is_empty() {
        return Err(Error::invalid("collection has no items"));
    }

    // Items of one tile must share a grid.
    let mut grids: Vec<TileGrid> = Vec::new();
    let mut items_by_tile: BTreeMap<&str, Vec<&crate::catalog::ItemDescriptor>> = BTreeMap::new();
    for item in &c.items {
        items_by_tile.entry(&item.tile).or_default().push(item);
    }
    for (tile, items) in &items_by_tile {
        let first = items[0];
        for it in items {
            if it.nrows != first.nrows || it.ncols != first.ncols || it.origin != first.origin {
                return Err(Error::invalid(format!(
                    "tile {tile} items disagree on grid: {}x{} at {:?} vs {}x{} at {:?}",
                    first.nrows, first.ncols, first.origin, it.nrows, it.ncols, it.origin
                )));
            }
        }
        grids.push(TileGrid {
            tile: tile.to_string(),
            nrows: first.nrows,
            ncols: first.ncols,
            origin: first.origin,
            resolution: c.pixel_resolution,
        });
    }

    std::fs::create_dir_all(storage_root).map_err(|e| Error::io(storage_root, e))?;

    // (tile, band) units run independently; every output file has a single writer.
    let work: Vec<(&TileGrid, &BandDef)> = grids
        .iter()
        .flat_map(|g| data_bands.iter().map(move |b| (g, b)))
        .collect();

    let filled_counts: Vec<u64> = work
        .par_iter()
        .map(|(grid, band)| regularize_tile_band(c, grid, band, timeline, storage_root))
        .collect::<Result<Vec<u64>>>()?;

    let cube = RegularCube {
        id: c.id.clone(),
        crs: c.crs.clone(),
        bands: data_bands,
        timeline: timeline.clone(),
        tiles: grids,
        storage_root: storage_root.to_path_buf(),
        filled_pixel_count: filled_counts.iter().sum(),
    };
    cube.write_manifest()?;
    Ok(cube)
}

fn read_stored_raster(
    source: &crate::catalog::AssetSource,
    dtype: Dtype,
    n: usize,
) -> Result<Vec<f64>> {
    let bytes = source.read_bytes()?;
    let expected = n * dtype.bytes();
    if bytes.len() != expected {
        return Err(Error::Integrity {
            file: PathBuf::from(source.display()),
            detail: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(match dtype {
        Dtype::Int16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    })
}

fn regularize_tile_band(
    c: &CollectionDescriptor,
    grid: &TileGrid,
    band: &BandDef,
    timeline: &Timeline,
    storage_root: &Path,
) -> Result<u64> {
    let npix = grid.nrows * grid.ncols;
    let n_t = timeline.len();
    let cloud_band = c.cloud_band();

    // Gather per-interval observation lists (stored values, physical units).
    let mut observations: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_t];
    for item in c.items.iter().filter(|i| i.tile == grid.tile) {
        let Some(t) = timeline.interval_of(item.datetime) else {
            continue;
        };
        let Some(asset) = item.assets.get(&band.name) else {
            continue;
        };
        let stored = read_stored_raster(asset, band.dtype, npix)?;
        let cloud: Option<Vec<f64>> = match cloud_band {
            Some(cb) => match item.assets.get(&cb.name) {
                Some(src) => Some(read_stored_raster(src, cb.dtype, npix)?),
                None => None,
            },
            None => None,
        };
        let mut obs = vec![f64::NAN; npix];
        for p in 0..npix {
            let v = stored[p];
            let cloudy = cloud.as_ref().map(|m| m[p] != 0.0).unwrap_or(false);
            if v != band.nodata && !cloudy {
                obs[p] = v * band.scale;
            }
        }
        observations[t].push(obs);
    }

    // Per-pixel composite: median of valid observations in each interval.
    let mut composite: Vec<CompositeSeries> = (0..npix)
        .map(|_| CompositeSeries {
            values: vec![None; n_t],
        })
        .collect();
    let mut scratch: Vec<f64> = Vec::new();
    for t in 0..n_t {
        for p in 0..npix {
            scratch.clear();
            for obs in &observations[t] {
                if obs[p].is_finite() {
                    scratch.push(obs[p]);
                }
            }
            if !scratch.is_empty() {
                composite[p].values[t] = Some(median(&mut scratch));
            }
        }
    }

    // Tile/band fallback for all-gap pixels: median over every valid
    // composite value of this tile and band.
    let mut all_valid: Vec<f64> = composite
        .iter()
        .flat_map(|s| s.values.iter().flatten().copied())
        .collect();
    let fallback = if all_valid.is_empty() {
        0.0
    } else {
        median(&mut all_valid)
    };

    let mut filled = 0u64;
    let mut planes: Vec<Vec<i16>> = vec![vec![0i16; npix]; n_t];
    for (p, series) in composite.iter_mut().enumerate() {
        let any_valid = series.values.iter().any(|v| v.is_some());
        if !any_valid {
            filled += 1;
            for v in series.values.iter_mut() {
                *v = Some(fallback);
            }
        } else {
            fill_gaps(&mut series.values);
        }
        for t in 0..n_t {
            let physical = series.values[t].expect("gap fill leaves no holes");
            let stored = (physical / band.scale).round();
            planes[t][p] = stored.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        }
    }

    for (t, plane) in planes.iter().enumerate() {
        let path = storage_root
            .join(&grid.tile)
            .join(format!("{}_{}_{}.bin", grid.tile, band.name, timeline.instants()[t]));
        io::write_atomic(&path, &io::i16_to_le_bytes(plane))?;
    }
    Ok(filled)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Linear interpolation between the nearest valid neighbours; leading and
/// trailing gaps take the nearest valid value. At least one value must be
/// present.
fn fill_gaps(series: &mut [Option<f64>]) {
    let n = series.len();
    let first_valid = series.iter().position(|v| v.is_some()).expect("non-empty");
    let last_valid = n - 1 - series.iter().rev().position(|v| v.is_some()).unwrap();
    for i in 0..first_valid {
        series[i] = series[first_valid];
    }
    for i in last_valid + 1..n {
        series[i] = series[last_valid];
    }
    let mut i = first_valid;
    while i < last_valid {
        if series[i + 1].is_some() {
            i += 1;
            continue;
        }
        let gap_end = (i + 1..=last_valid)
            .find(|&j| series[j].is_some())
            .expect("last_valid is valid");
        let a = series[i].unwrap();
        let b = series[gap_end].unwrap();
        let span = (gap_end - i) as f64;
        for j in i + 1..gap_end {
            let frac = (j - i) as f64 / span;
            series[j] = Some(a + (b - a) * frac);
        }
        i = gap_end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::AssetSource;
    use std::collections::BTreeMap;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn timeline_stepping() {
        let t = Timeline::build(date("2018-07-01"), date("2018-08-02"), 16).unwrap();
        assert_eq!(
            t.instants(),
            &[date("2018-07-01"), date("2018-07-17"), date("2018-08-02")]
        );
    }

    #[test]
    fn timeline_single_instant() {
        let t = Timeline::build(date("2020-01-05"), date("2020-01-05"), 7).unwrap();
        assert_eq!(t.instants(), &[date("2020-01-05")]);
    }

    #[test]
    fn timeline_one_year_16_day() {
        // Oracle: enumerate by repeated addition.
        let (start, end) = (date("2017-09-01"), date("2018-08-31"));
        let mut expected = Vec::new();
        let mut d = start;
        while d <= end {
            expected.push(d);
            d += Duration::days(16);
        }
        assert_eq!(expected.len(), 23);
        let t = Timeline::build(start, end, 16).unwrap();
        assert_eq!(t.instants(), expected.as_slice());
    }

    #[test]
    fn timeline_meets_property() {
        let t = Timeline::build(date("2017-09-01"), date("2018-08-31"), 16).unwrap();
        for w in t.instants().windows(2) {
            assert_eq!((w[1] - w[0]).num_days(), 16);
        }
    }

    #[test]
    fn interval_assignment_is_half_open() {
        let t = Timeline::build(date("2018-01-01"), date("2018-02-01"), 16).unwrap();
        assert_eq!(t.interval_of(date("2018-01-01")), Some(0));
        assert_eq!(t.interval_of(date("2018-01-16")), Some(0));
        assert_eq!(t.interval_of(date("2018-01-17")), Some(1));
        assert_eq!(t.interval_of(date("2017-12-31")), None);
    }

    #[test]
    fn pixel_at_center_and_ties() {
        let g = TileGrid {
            tile: "T".into(),
            nrows: 4,
            ncols: 4,
            origin: (0.0, 4.0),
            resolution: (1.0, 1.0),
        };
        // center of pixel (0,0) is (0.5, 3.5)
        assert_eq!(g.pixel_at(0.5, 3.5), Some((0, 0)));
        // boundary between cols 0 and 1: lower index wins
        assert_eq!(g.pixel_at(1.0, 3.5), Some((0, 0)));
        // boundary between rows 1 and 2
        assert_eq!(g.pixel_at(0.5, 2.0), Some((1, 0)));
        // tile edges still map inside
        assert_eq!(g.pixel_at(0.0, 4.0), Some((0, 0)));
        assert_eq!(g.pixel_at(4.0, 0.0), Some((3, 3)));
        // outside
        assert_eq!(g.pixel_at(4.1, 0.0), None);
        assert_eq!(g.center_of(0, 0), (0.5, 3.5));
    }

    /// One-pixel, one-band collection with explicit per-interval stored
    /// values; `None` marks a nodata (cloudy) acquisition.
    pub(crate) fn tiny_collection(
        dir: &Path,
        stored_per_date: &[(&str, Option<i16>)],
    ) -> CollectionDescriptor {
        let band = BandDef {
            name: "b1".into(),
            dtype: Dtype::Int16,
            scale: 1.0,
            nodata: -9999.0,
            is_cloud_mask: false,
        };
        let mut items = Vec::new();
        for (d, v) in stored_per_date {
            let stored = v.unwrap_or(-9999);
            let p = dir.join(format!("obs_{d}.bin"));
            io::write_atomic(&p, &io::i16_to_le_bytes(&[stored])).unwrap();
            items.push(crate::catalog::ItemDescriptor {
                tile: "T".into(),
                datetime: date(d),
                cloud_cover: None,
                nrows: 1,
                ncols: 1,
                origin: (0.0, 1.0),
                assets: BTreeMap::from([("b1".to_string(), AssetSource::File(p))]),
            });
        }
        CollectionDescriptor {
            id: "tiny".into(),
            crs: "EPSG:4326".into(),
            pixel_resolution: (1.0, 1.0),
            bands: vec![band],
            items,
        }
    }

    #[test]
    fn regularize_interpolates_cloudy_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_collection(
            dir.path(),
            &[
                ("2018-01-01", Some(10)),
                ("2018-01-17", None),
                ("2018-02-02", Some(30)),
            ],
        );
        let tl = Timeline::build(date("2018-01-01"), date("2018-02-02"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        let block = cube.read_full("T").unwrap();
        assert_eq!(block.values, vec![10.0, 20.0, 30.0]);
        assert_eq!(cube.filled_pixel_count, 0);
    }

    #[test]
    fn regularize_median_of_three() {
        let dir = tempfile::tempdir().unwrap();
        // three observations falling in the same 16-day interval
        let c = tiny_collection(
            dir.path(),
            &[
                ("2018-01-01", Some(8)),
                ("2018-01-03", Some(100)),
                ("2018-01-05", Some(12)),
            ],
        );
        let tl = Timeline::build(date("2018-01-01"), date("2018-01-01"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        let block = cube.read_full("T").unwrap();
        assert_eq!(block.values, vec![12.0]);
    }

    #[test]
    fn regularize_edge_gaps_take_nearest() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_collection(
            dir.path(),
            &[
                ("2018-01-01", None),
                ("2018-01-17", Some(42)),
                ("2018-02-02", None),
            ],
        );
        let tl = Timeline::build(date("2018-01-01"), date("2018-02-02"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        let block = cube.read_full("T").unwrap();
        assert_eq!(block.values, vec![42.0, 42.0, 42.0]);
    }

    #[test]
    fn regularize_all_cloud_pixel_counted() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_collection(dir.path(), &[("2018-01-01", None), ("2018-01-17", None)]);
        let tl = Timeline::build(date("2018-01-01"), date("2018-01-17"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        assert_eq!(cube.filled_pixel_count, 1);
        // fallback median over an empty set degrades to 0
        let block = cube.read_full("T").unwrap();
        assert_eq!(block.values, vec![0.0, 0.0]);
    }

    #[test]
    fn regularize_two_tiles_share_timeline() {
        let dir = tempfile::tempdir().unwrap();
        let band = BandDef {
            name: "b1".into(),
            dtype: Dtype::Int16,
            scale: 1.0,
            nodata: -9999.0,
            is_cloud_mask: false,
        };
        let mut items = Vec::new();
        // tile A: dense native timeline (every 4 days), tile B: sparse (every 9)
        for (tile, step, count, ox) in [("A", 4i64, 12usize, 0.0), ("B", 9, 5, 2.0)] {
            for i in 0..count {
                let d = date("2018-01-01") + Duration::days(step * i as i64);
                let p = dir.path().join(format!("{tile}_{d}.bin"));
                io::write_atomic(&p, &io::i16_to_le_bytes(&[(i as i16 + 1) * 10])).unwrap();
                items.push(crate::catalog::ItemDescriptor {
                    tile: tile.into(),
                    datetime: d,
                    cloud_cover: None,
                    nrows: 1,
                    ncols: 1,
                    origin: (ox, 1.0),
                    assets: BTreeMap::from([("b1".to_string(), AssetSource::File(p))]),
                });
            }
        }
        let c = CollectionDescriptor {
            id: "two".into(),
            crs: "EPSG:4326".into(),
            pixel_resolution: (1.0, 1.0),
            bands: vec![band],
            items,
        };
        let tl = Timeline::build(date("2018-01-01"), date("2018-02-14"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        assert_eq!(cube.tiles.len(), 2);
        for tile in ["A", "B"] {
            let block = cube.read_full(tile).unwrap();
            assert_eq!(block.n_times, tl.len());
            assert!(block.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn regularize_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_collection(
            dir.path(),
            &[("2018-01-01", Some(7)), ("2018-01-17", None), ("2018-02-02", Some(9))],
        );
        let tl = Timeline::build(date("2018-01-01"), date("2018-02-02"), 16).unwrap();
        let cube1 = regularize(&c, &tl, &dir.path().join("c1")).unwrap();
        let cube2 = regularize(&c, &tl, &dir.path().join("c2")).unwrap();
        for t in tl.instants() {
            let f1 = std::fs::read(cube1.band_file("T", "b1", *t)).unwrap();
            let f2 = std::fs::read(cube2.band_file("T", "b1", *t)).unwrap();
            assert_eq!(f1, f2);
        }
    }

    #[test]
    fn read_block_applies_scale_and_checks_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_collection(dir.path(), &[("2018-01-01", Some(1234))]);
        c.bands[0].scale = 0.01;
        let tl = Timeline::build(date("2018-01-01"), date("2018-01-01"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        let block = cube
            .read_block(
                "T",
                Window { row0: 0, col0: 0, nrows: 1, ncols: 1 },
                &[0],
                &[0],
            )
            .unwrap();
        assert!((block.values[0] - 12.34).abs() < 1e-4);
        let err = cube
            .read_block(
                "T",
                Window { row0: 0, col0: 0, nrows: 2, ncols: 1 },
                &[0],
                &[0],
            )
            .unwrap_err();
        assert!(matches!(err, Error::WindowOutOfBounds { .. }));
    }

    #[test]
    fn read_block_reports_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_collection(dir.path(), &[("2018-01-01", Some(5))]);
        let tl = Timeline::build(date("2018-01-01"), date("2018-01-01"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        let f = cube.band_file("T", "b1", date("2018-01-01"));
        std::fs::remove_file(&f).unwrap();
        let err = cube.read_full("T").unwrap_err();
        assert!(err.to_string().contains("T_b1_2018-01-01.bin"));
    }

    #[test]
    fn cube_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_collection(dir.path(), &[("2018-01-01", Some(5))]);
        let tl = Timeline::build(date("2018-01-01"), date("2018-01-01"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        let reopened = RegularCube::open(&dir.path().join("cube")).unwrap();
        assert_eq!(reopened, cube);
    }

    #[test]
    fn cloud_mask_band_blanks_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.bin");
        let mask = dir.path().join("m.bin");
        // 2x1 tile: pixel 0 clear (v=11), pixel 1 cloudy (v=99 masked)
        io::write_atomic(&data, &io::i16_to_le_bytes(&[11, 99])).unwrap();
        io::write_atomic(&mask, &io::i16_to_le_bytes(&[0, 1])).unwrap();
        let data2 = dir.path().join("d2.bin");
        let mask2 = dir.path().join("m2.bin");
        io::write_atomic(&data2, &io::i16_to_le_bytes(&[13, 21])).unwrap();
        io::write_atomic(&mask2, &io::i16_to_le_bytes(&[0, 0])).unwrap();
        let bands = vec![
            BandDef {
                name: "b1".into(),
                dtype: Dtype::Int16,
                scale: 1.0,
                nodata: -9999.0,
                is_cloud_mask: false,
            },
            BandDef {
                name: "cloud".into(),
                dtype: Dtype::Int16,
                scale: 1.0,
                nodata: 0.0,
                is_cloud_mask: true,
            },
        ];
        let mk_item = |d: &str, data: &Path, mask: &Path| crate::catalog::ItemDescriptor {
            tile: "T".into(),
            datetime: date(d),
            cloud_cover: Some(50.0),
            nrows: 1,
            ncols: 2,
            origin: (0.0, 1.0),
            assets: BTreeMap::from([
                ("b1".to_string(), AssetSource::File(data.to_path_buf())),
                ("cloud".to_string(), AssetSource::File(mask.to_path_buf())),
            ]),
        };
        let c = CollectionDescriptor {
            id: "masked".into(),
            crs: "EPSG:4326".into(),
            pixel_resolution: (1.0, 1.0),
            bands,
            items: vec![
                mk_item("2018-01-01", &data, &mask),
                mk_item("2018-01-17", &data2, &mask2),
            ],
        };
        let tl = Timeline::build(date("2018-01-01"), date("2018-01-17"), 16).unwrap();
        let cube = regularize(&c, &tl, &dir.path().join("cube")).unwrap();
        // cloud mask is not a cube band
        assert_eq!(cube.bands.len(), 1);
        let block = cube.read_full("T").unwrap();
        // pixel 1 instant 0 was cloudy: trailing/leading fill takes instant-1 value
        assert_eq!(block.value(0, 0, 0, 0), 11.0);
        assert_eq!(block.value(0, 1, 0, 0), 13.0);
        assert_eq!(block.value(0, 0, 0, 1), 21.0);
        assert_eq!(block.value(0, 1, 0, 1), 21.0);
    }
}

//! Catalog parsing and filtering for image collections.
//!
//! A catalog is a single JSON document (local file or plain-HTTP URL)
//! describing one collection: its bands and a flat list of items, one per
//! (tile, date) acquisition, each pointing at headerless binary rasters.
//! This is a deliberately small dialect: no pagination, no extensions, no
//! authenticated providers.
//!
//! Geometry convention: an item's `origin` is the top-left corner of its
//! grid in CRS units, `x` grows with columns and `y` shrinks with rows.
//! CRS coordinates double as longitude/latitude — the affine parameters
//! declared in the catalog (origin + resolution) are the only coordinate
//! mapping; there is no reprojection engine.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int16,
    Float32,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::Int16 => 2,
            Dtype::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDef {
    pub name: String,
    pub dtype: Dtype,
    /// Multiplicative factor from stored value to physical value.
    pub scale: f64,
    /// Sentinel marking missing pixels, expressed in the stored dtype.
    pub nodata: f64,
    #[serde(rename = "cloud_mask")]
    pub is_cloud_mask: bool,
}

/// Where an asset's bytes live. Relative paths in the catalog are resolved
/// against the catalog's own directory (or URL) at parse time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssetSource {
    File(PathBuf),
    Http(String),
}

impl AssetSource {
    pub fn read_bytes(&self) -> Result<Vec<u8>> {
        match self {
            AssetSource::File(p) => std::fs::read(p).map_err(|e| Error::io(p, e)),
            AssetSource::Http(url) => http_get(url),
        }
    }

    pub fn display(&self) -> String {
        match self {
            AssetSource::File(p) => p.display().to_string(),
            AssetSource::Http(u) => u.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemDescriptor {
    pub tile: String,
    pub datetime: NaiveDate,
    /// Percent in [0, 100], when the provider reports one.
    pub cloud_cover: Option<f64>,
    pub nrows: usize,
    pub ncols: usize,
    /// Top-left corner in CRS units.
    pub origin: (f64, f64),
    pub assets: BTreeMap<String, AssetSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionDescriptor {
    pub id: String,
    pub crs: String,
    /// Meters (CRS units) per pixel in x and y.
    pub pixel_resolution: (f64, f64),
    pub bands: Vec<BandDef>,
    /// Sorted by (tile, datetime).
    pub items: Vec<ItemDescriptor>,
}

/// Axis-aligned lon/lat rectangle, `west <= east`, `south <= north`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLatBBox {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl LonLatBBox {
    pub fn intersects(&self, other: &LonLatBBox) -> bool {
        self.west <= other.east
            && other.west <= self.east
            && self.south <= other.north
            && other.south <= self.north
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.west && lon <= self.east && lat >= self.south && lat <= self.north
    }
}

impl ItemDescriptor {
    pub fn footprint(&self, resolution: (f64, f64)) -> LonLatBBox {
        LonLatBBox {
            west: self.origin.0,
            east: self.origin.0 + self.ncols as f64 * resolution.0,
            north: self.origin.1,
            south: self.origin.1 - self.nrows as f64 * resolution.1,
        }
    }
}

impl CollectionDescriptor {
    pub fn band(&self, name: &str) -> Option<&BandDef> {
        self.bands.iter().find(|b| b.name == name)
    }

    pub fn cloud_band(&self) -> Option<&BandDef> {
        self.bands.iter().find(|b| b.is_cloud_mask)
    }

    /// Data bands in declaration order, cloud mask excluded.
    pub fn data_bands(&self) -> Vec<&BandDef> {
        self.bands.iter().filter(|b| !b.is_cloud_mask).collect()
    }

    pub fn tiles(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.items.iter().map(|i| i.tile.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Union of the item footprints belonging to `tile`.
    pub fn tile_footprint(&self, tile: &str) -> Option<LonLatBBox> {
        let mut acc: Option<LonLatBBox> = None;
        for item in self.items.iter().filter(|i| i.tile == tile) {
            let fp = item.footprint(self.pixel_resolution);
            acc = Some(match acc {
                None => fp,
                Some(a) => LonLatBBox {
                    west: a.west.min(fp.west),
                    south: a.south.min(fp.south),
                    east: a.east.max(fp.east),
                    north: a.north.max(fp.north),
                },
            });
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// JSON wire format

#[derive(Serialize, Deserialize)]
struct RawCatalog {
    id: String,
    crs: String,
    resolution: [f64; 2],
    bands: Vec<BandDef>,
    items: Vec<RawItem>,
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    tile: String,
    datetime: NaiveDate,
    cloud_cover: Option<f64>,
    nrows: usize,
    ncols: usize,
    origin: [f64; 2],
    assets: BTreeMap<String, String>,
}

/// Parse a catalog from a local path or a plain-HTTP(S) URL.
pub fn parse_catalog(source: &str) -> Result<CollectionDescriptor> {
    if is_url(source) {
        let bytes = http_get(source)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Json {
            path: PathBuf::from(source),
            detail: format!("not UTF-8: {e}"),
        })?;
        parse_catalog_text(&text, &AssetBase::Url(url_dir(source)), source)
    } else {
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        parse_catalog_text(&text, &AssetBase::Dir(dir), source)
    }
}

enum AssetBase {
    Dir(PathBuf),
    Url(String),
}

impl AssetBase {
    fn resolve(&self, asset: &str) -> AssetSource {
        if is_url(asset) {
            return AssetSource::Http(asset.to_string());
        }
        match self {
            AssetBase::Dir(dir) => {
                let p = Path::new(asset);
                if p.is_absolute() {
                    AssetSource::File(p.to_path_buf())
                } else {
                    AssetSource::File(dir.join(p))
                }
            }
            AssetBase::Url(base) => AssetSource::Http(format!("{base}{asset}")),
        }
    }
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

fn url_dir(url: &str) -> String {
    match url.rfind('/') {
        Some(i) if i > "https:/".len() => url[..=i].to_string(),
        _ => format!("{url}/"),
    }
}

/// Plain GET, no auth, up to 5 redirects.
fn http_get(url: &str) -> Result<Vec<u8>> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .max_redirects(5)
        .build()
        .into();
    let mut resp = agent.get(url).call().map_err(|e| Error::Http {
        url: url.to_string(),
        detail: e.to_string(),
    })?;
    let mut buf = Vec::new();
    std::io::Read::read_to_end(&mut resp.body_mut().as_reader(), &mut buf).map_err(|e| {
        Error::Http {
            url: url.to_string(),
            detail: e.to_string(),
        }
    })?;
    Ok(buf)
}

fn parse_catalog_text(
    text: &str,
    base: &AssetBase,
    source: &str,
) -> Result<CollectionDescriptor> {
    let raw: RawCatalog = serde_json::from_str(text).map_err(|e| Error::Json {
        path: PathBuf::from(source),
        detail: e.to_string(),
    })?;

    let mut band_names = HashSet::new();
    let mut mask_count = 0usize;
    for b in &raw.bands {
        if !band_names.insert(b.name.clone()) {
            return Err(Error::invalid(format!("duplicate band name {:?}", b.name)));
        }
        if b.is_cloud_mask {
            mask_count += 1;
        }
        if b.scale <= 0.0 || !b.scale.is_finite() {
            return Err(Error::invalid(format!(
                "band {:?} has non-positive scale {}",
                b.name, b.scale
            )));
        }
    }
    if mask_count > 1 {
        return Err(Error::invalid(format!(
            "{mask_count} cloud-mask bands declared, at most one allowed"
        )));
    }

    let mut seen: HashSet<(String, NaiveDate, String)> = HashSet::new();
    let mut items = Vec::with_capacity(raw.items.len());
    for it in raw.items {
        if it.nrows == 0 || it.ncols == 0 {
            return Err(Error::invalid(format!(
                "item {}/{} has empty grid {}x{}",
                it.tile, it.datetime, it.nrows, it.ncols
            )));
        }
        if let Some(cc) = it.cloud_cover {
            if !(0.0..=100.0).contains(&cc) {
                return Err(Error::invalid(format!(
                    "item {}/{} cloud_cover {} outside [0,100]",
                    it.tile, it.datetime, cc
                )));
            }
        }
        let mut assets = BTreeMap::new();
        for (band, path) in it.assets {
            if !band_names.contains(&band) {
                return Err(Error::UnknownBand {
                    band,
                    tile: it.tile.clone(),
                    datetime: it.datetime.to_string(),
                });
            }
            if !seen.insert((it.tile.clone(), it.datetime, band.clone())) {
                return Err(Error::DuplicateItem {
                    tile: it.tile.clone(),
                    datetime: it.datetime.to_string(),
                    band,
                });
            }
            assets.insert(band, base.resolve(&path));
        }
        items.push(ItemDescriptor {
            tile: it.tile,
            datetime: it.datetime,
            cloud_cover: it.cloud_cover,
            nrows: it.nrows,
            ncols: it.ncols,
            origin: (it.origin[0], it.origin[1]),
            assets,
        });
    }
    items.sort_by(|a, b| (&a.tile, a.datetime).cmp(&(&b.tile, b.datetime)));

    Ok(CollectionDescriptor {
        id: raw.id,
        crs: raw.crs,
        pixel_resolution: (raw.resolution[0], raw.resolution[1]),
        bands: raw.bands,
        items,
    })
}

/// Inverse of [`parse_catalog`]: asset sources are written back as absolute
/// paths/URLs, so the output re-parses to an equal descriptor from any
/// directory.
pub fn serialize_catalog(c: &CollectionDescriptor) -> String {
    let raw = RawCatalog {
        id: c.id.clone(),
        crs: c.crs.clone(),
        resolution: [c.pixel_resolution.0, c.pixel_resolution.1],
        bands: c.bands.clone(),
        items: c
            .items
            .iter()
            .map(|it| RawItem {
                tile: it.tile.clone(),
                datetime: it.datetime,
                cloud_cover: it.cloud_cover,
                nrows: it.nrows,
                ncols: it.ncols,
                origin: [it.origin.0, it.origin.1],
                assets: it
                    .assets
                    .iter()
                    .map(|(k, v)| (k.clone(), v.display()))
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("catalog serialization cannot fail")
}

/// Keep only items matching every given filter. The band list is unchanged.
///
/// `roi` selects whole tiles by footprint intersection; `tiles` selects by
/// id. An empty result is an error so callers can exit nonzero with a
/// message instead of silently continuing.
pub fn filter_items(
    c: &CollectionDescriptor,
    tiles: Option<&[String]>,
    roi: Option<&LonLatBBox>,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<CollectionDescriptor> {
    if start > end {
        return Err(Error::invalid(format!(
            "start {start} after end {end}"
        )));
    }
    let tile_set: Option<HashSet<&str>> =
        tiles.map(|ts| ts.iter().map(|s| s.as_str()).collect());

    let roi_tiles: Option<HashSet<String>> = roi.map(|bbox| {
        let mut hits = HashSet::new();
        let mut footprints: HashMap<&str, LonLatBBox> = HashMap::new();
        for item in &c.items {
            let fp = footprints
                .entry(item.tile.as_str())
                .or_insert_with(|| item.footprint(c.pixel_resolution));
            let grown = LonLatBBox {
                west: fp.west.min(item.footprint(c.pixel_resolution).west),
                south: fp.south.min(item.footprint(c.pixel_resolution).south),
                east: fp.east.max(item.footprint(c.pixel_resolution).east),
                north: fp.north.max(item.footprint(c.pixel_resolution).north),
            };
            *fp = grown;
        }
        for (tile, fp) in footprints {
            if fp.intersects(bbox) {
                hits.insert(tile.to_string());
            }
        }
        hits
    });

    let items: Vec<ItemDescriptor> = c
        .items
        .iter()
        .filter(|it| {
            if let Some(ts) = &tile_set {
                if !ts.contains(it.tile.as_str()) {
                    return false;
                }
            }
            if let Some(rt) = &roi_tiles {
                if !rt.contains(&it.tile) {
                    return false;
                }
            }
            it.datetime >= start && it.datetime <= end
        })
        .cloned()
        .collect();

    if items.is_empty() {
        return Err(Error::EmptyResult);
    }

    Ok(CollectionDescriptor {
        id: c.id.clone(),
        crs: c.crs.clone(),
        pixel_resolution: c.pixel_resolution,
        bands: c.bands.clone(),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    pub(crate) fn two_band_catalog_json() -> String {
        r#"{
            "id": "demo",
            "crs": "EPSG:4326",
            "resolution": [0.1, 0.1],
            "bands": [
                {"name": "red", "dtype": "int16", "scale": 0.0001, "nodata": -9999, "cloud_mask": false},
                {"name": "nir", "dtype": "int16", "scale": 0.0001, "nodata": -9999, "cloud_mask": false}
            ],
            "items": [
                {"tile": "T1", "datetime": "2018-07-01", "cloud_cover": 12.5,
                 "nrows": 4, "ncols": 4, "origin": [10.0, 20.0],
                 "assets": {"red": "t1_red.bin", "nir": "t1_nir.bin"}}
            ]
        }"#
        .to_string()
    }

    fn parse(text: &str) -> Result<CollectionDescriptor> {
        parse_catalog_text(text, &AssetBase::Dir(PathBuf::from("/data")), "test")
    }

    #[test]
    fn minimal_catalog_parses() {
        let c = parse(&two_band_catalog_json()).unwrap();
        assert_eq!(c.items.len(), 1);
        assert_eq!(c.bands.len(), 2);
        assert_eq!(
            c.items[0].assets["red"],
            AssetSource::File(PathBuf::from("/data/t1_red.bin"))
        );
    }

    #[test]
    fn unknown_band_rejected() {
        let text = two_band_catalog_json().replace("\"nir\": \"t1_nir.bin\"", "\"B99\": \"x.bin\"");
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, Error::UnknownBand { ref band, .. } if band == "B99"));
    }

    #[test]
    fn duplicate_tile_date_band_rejected() {
        let mut raw: serde_json::Value =
            serde_json::from_str(&two_band_catalog_json()).unwrap();
        let item = raw["items"][0].clone();
        raw["items"].as_array_mut().unwrap().push(item);
        let err = parse(&raw.to_string()).unwrap_err();
        assert!(matches!(err, Error::DuplicateItem { .. }));
    }

    #[test]
    fn malformed_json_is_reported() {
        assert!(matches!(parse("{ not json").unwrap_err(), Error::Json { .. }));
    }

    /// Build a two-tile catalog with the full/partial native timelines the
    /// two neighbouring tiles in the source imagery exhibit (144 vs 71).
    pub(crate) fn two_tile_catalog() -> CollectionDescriptor {
        let mut items = Vec::new();
        let start = date("2018-07-13");
        for (tile, count, step) in [("20LLP", 144usize, 1i64), ("20LKP", 71, 2)] {
            for i in 0..count {
                let d = start + chrono::Duration::days(step * i as i64);
                items.push(RawItem {
                    tile: tile.to_string(),
                    datetime: d,
                    cloud_cover: None,
                    nrows: 8,
                    ncols: 8,
                    origin: if tile == "20LLP" {
                        [0.0, 0.0]
                    } else {
                        [1.0, 0.0]
                    },
                    assets: BTreeMap::from([("red".to_string(), format!("{tile}_{d}.bin"))]),
                });
            }
        }
        let raw = RawCatalog {
            id: "two-tile".into(),
            crs: "EPSG:4326".into(),
            resolution: [0.125, 0.125],
            bands: vec![BandDef {
                name: "red".into(),
                dtype: Dtype::Int16,
                scale: 1.0,
                nodata: -9999.0,
                is_cloud_mask: false,
            }],
            items,
        };
        parse(&serde_json::to_string(&raw).unwrap()).unwrap()
    }

    #[test]
    fn two_tile_catalog_item_counts() {
        let c = two_tile_catalog();
        assert_eq!(c.items.len(), 215);
        let per_tile = |t: &str| c.items.iter().filter(|i| i.tile == t).count();
        assert_eq!(per_tile("20LLP"), 144);
        assert_eq!(per_tile("20LKP"), 71);
        // items sorted by (tile, datetime)
        let sorted = {
            let mut v: Vec<_> = c.items.iter().map(|i| (i.tile.clone(), i.datetime)).collect();
            v.sort();
            v
        };
        let actual: Vec<_> = c.items.iter().map(|i| (i.tile.clone(), i.datetime)).collect();
        assert_eq!(actual, sorted);
    }

    #[test]
    fn filter_single_tile_and_dates() {
        let c = two_tile_catalog();
        let f = filter_items(
            &c,
            Some(&["20LKP".to_string()]),
            None,
            date("2018-07-18"),
            date("2018-07-23"),
        )
        .unwrap();
        assert!(f.items.iter().all(|i| i.tile == "20LKP"));
        assert!(f
            .items
            .iter()
            .all(|i| i.datetime >= date("2018-07-18") && i.datetime <= date("2018-07-23")));
        assert!(!f.items.is_empty());
        assert_eq!(f.bands, c.bands);
    }

    #[test]
    fn filter_point_interval() {
        let c = two_tile_catalog();
        let d = c.items[0].datetime;
        let f = filter_items(&c, None, None, d, d).unwrap();
        assert!(f.items.iter().all(|i| i.datetime == d));
        assert_eq!(
            f.items.len(),
            c.items.iter().filter(|i| i.datetime == d).count()
        );
    }

    #[test]
    fn filter_disjoint_roi_is_empty_error() {
        let c = two_tile_catalog();
        let roi = LonLatBBox {
            west: 500.0,
            south: 500.0,
            east: 501.0,
            north: 501.0,
        };
        let err = filter_items(&c, None, Some(&roi), date("2018-01-01"), date("2019-12-31"))
            .unwrap_err();
        assert!(matches!(err, Error::EmptyResult));
    }

    #[test]
    fn filter_roi_selects_intersecting_tile() {
        let c = two_tile_catalog();
        // 20LKP sits at origin (1.0, 0.0); a box around (1.5, -0.5) hits only it
        let roi = LonLatBBox {
            west: 1.4,
            south: -0.6,
            east: 1.6,
            north: -0.4,
        };
        let f = filter_items(&c, None, Some(&roi), date("2018-01-01"), date("2019-12-31"))
            .unwrap();
        assert!(f.items.iter().all(|i| i.tile == "20LKP"));
    }

    #[test]
    fn filter_is_idempotent_and_subset() {
        let c = two_tile_catalog();
        let args = (date("2018-08-01"), date("2018-10-01"));
        let once = filter_items(&c, None, None, args.0, args.1).unwrap();
        let twice = filter_items(&once, None, None, args.0, args.1).unwrap();
        assert_eq!(once, twice);
        let keys: HashSet<_> = c.items.iter().map(|i| (i.tile.clone(), i.datetime)).collect();
        assert!(once
            .items
            .iter()
            .all(|i| keys.contains(&(i.tile.clone(), i.datetime))));
    }

    #[test]
    fn serialize_roundtrip() {
        let c = two_tile_catalog();
        let text = serialize_catalog(&c);
        let back = parse(&text).unwrap();
        assert_eq!(back, c);
    }
}

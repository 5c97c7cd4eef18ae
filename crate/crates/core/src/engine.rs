//! Chunked, fault-tolerant classification of a regular cube into per-class
//! probability rasters.
//!
//! A cube is split into row strips (every strip carries all bands and
//! instants). A pool of workers takes the lowest pending chunk id from a
//! shared queue, classifies its block, and commits the result with a
//! write-temp-then-rename plus a `.done` marker recording byte length and
//! CRC32. The orchestrator alone mutates job state and persists it to
//! `job.json` after every transition, so a killed run resumes from the
//! last committed chunk. Workers never communicate with each other.

use std::collections::VecDeque;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cube::{RegularCube, TileGrid, Window};
use crate::error::{Error, Result};
use crate::io;
use crate::models::TrainedModel;

/// Probabilities are stored as i16 with this denominator.
pub const PROB_SCALE: i32 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub tile: String,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub cube_id: String,
    pub chunks: Vec<Chunk>,
    pub max_workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobState {
    pub job_id: String,
    pub plan: ChunkPlan,
    pub status: Vec<ChunkStatus>,
    pub retries: Vec<u32>,
    pub model_hash: String,
    pub cube_hash: String,
}

impl JobState {
    pub fn done_count(&self) -> usize {
        self.status.iter().filter(|s| **s == ChunkStatus::Done).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyOptions {
    /// Pixel rows per prediction batch inside a chunk.
    pub batch_pixels: usize,
    /// Re-executions allowed per chunk after its first failure.
    pub max_retries: u32,
    /// Stop (with state persisted) once this many chunks are newly done;
    /// used for staged runs and crash drills.
    pub max_chunks: Option<usize>,
    /// Remove chunk files after a successful merge.
    pub clean: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            batch_pixels: 4096,
            max_retries: 3,
            max_chunks: None,
            clean: false,
        }
    }
}

/// Per-class i16 probability rasters sharing a cube's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbCube {
    pub id: String,
    pub labels: Vec<String>,
    pub tiles: Vec<TileGrid>,
    pub storage: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ProbManifest {
    id: String,
    labels: Vec<String>,
    scale_denominator: i32,
    tiles: Vec<TileGrid>,
}

impl ProbCube {
    pub fn open(storage: &Path) -> Result<ProbCube> {
        let path = storage.join("probs.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ProbManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path,
            detail: e.to_string(),
        })?;
        Ok(ProbCube {
            id: m.id,
            labels: m.labels,
            tiles: m.tiles,
            storage: storage.to_path_buf(),
        })
    }

    fn write_manifest(&self) -> Result<()> {
        let m = ProbManifest {
            id: self.id.clone(),
            labels: self.labels.clone(),
            scale_denominator: PROB_SCALE,
            tiles: self.tiles.clone(),
        };
        io::write_atomic(
            &self.storage.join("probs.json"),
            serde_json::to_string_pretty(&m).unwrap().as_bytes(),
        )
    }

    pub fn grid(&self, tile: &str) -> Result<&TileGrid> {
        self.tiles
            .iter()
            .find(|t| t.tile == tile)
            .ok_or_else(|| Error::invalid(format!("tile {tile:?} not in probability cube")))
    }

    pub fn plane_path(&self, tile: &str, label: &str) -> PathBuf {
        self.storage.join(format!("{tile}_prob_{label}.bin"))
    }

    /// Stored i16 plane for one tile and class, row-major.
    pub fn read_plane(&self, tile: &str, class: usize) -> Result<Vec<i16>> {
        let grid = self.grid(tile)?;
        io::read_i16_raster(
            &self.plane_path(tile, &self.labels[class]),
            grid.nrows * grid.ncols,
        )
    }
}

/// Divide the cube into horizontal row strips such that `cores` concurrent
/// strips fit in 80% of the memory budget. Every strip carries all bands
/// and instants; strip bytes are the f32 block plus the i16 output.
pub fn plan_chunks(
    cube: &RegularCube,
    n_classes: usize,
    memory_bytes: u64,
    cores: usize,
) -> Result<ChunkPlan> {
    if cores == 0 || memory_bytes == 0 {
        return Err(Error::invalid("cores and memory_bytes must be >= 1"));
    }
    if n_classes == 0 {
        return Err(Error::invalid("n_classes must be >= 1"));
    }
    let budget = (memory_bytes as f64 * 0.8) as u64;
    let n_bands = cube.bands.len() as u64;
    let n_times = cube.timeline.len() as u64;

    let mut chunks = Vec::new();
    for grid in &cube.tiles {
        let per_row = grid.ncols as u64 * (n_bands * n_times * 4 + n_classes as u64 * 2);
        let required_one_row = per_row * cores as u64;
        if required_one_row > budget {
            return Err(Error::InsufficientMemory {
                required: required_one_row,
                allowed: budget,
            });
        }
        let h = ((budget / cores as u64 / per_row) as usize).clamp(1, grid.nrows);
        let mut row0 = 0usize;
        while row0 < grid.nrows {
            let nrows = h.min(grid.nrows - row0);
            chunks.push(Chunk {
                chunk_id: chunks.len(),
                tile: grid.tile.clone(),
                window: Window {
                    row0,
                    col0: 0,
                    nrows,
                    ncols: grid.ncols,
                },
            });
            row0 += nrows;
        }
    }
    let max_workers = cores.min(chunks.len());
    Ok(ChunkPlan {
        cube_id: cube.id.clone(),
        chunks,
        max_workers,
    })
}

fn chunk_bin(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("chunk_{id}.bin"))
}

fn chunk_marker(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("chunk_{id}.done"))
}

fn job_path(dir: &Path) -> PathBuf {
    dir.join("job.json")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn model_hash(model: &TrainedModel) -> String {
    sha256_hex(&crate::models::model_to_bytes(model))
}

pub fn cube_hash(cube: &RegularCube) -> Result<String> {
    Ok(sha256_hex(&cube.manifest_bytes()?))
}

fn persist_job(dir: &Path, job: &JobState) -> Result<()> {
    io::write_atomic(
        &job_path(dir),
        serde_json::to_string_pretty(job).unwrap().as_bytes(),
    )
}

pub fn load_job(dir: &Path) -> Result<JobState> {
    let path = job_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path,
        detail: e.to_string(),
    })
}

fn expected_chunk_bytes(chunk: &Chunk, n_classes: usize) -> u64 {
    (n_classes * chunk.window.pixels() * 2) as u64
}

/// A committed chunk has a marker whose recorded length matches both the
/// expectation and the file, and whose CRC32 matches the file content.
fn chunk_is_valid(dir: &Path, chunk: &Chunk, n_classes: usize) -> bool {
    let marker = chunk_marker(dir, chunk.chunk_id);
    let bin = chunk_bin(dir, chunk.chunk_id);
    let Ok(text) = std::fs::read_to_string(&marker) else {
        return false;
    };
    let mut parts = text.split_whitespace();
    let (Some(len), Some(crc)) = (parts.next(), parts.next()) else {
        return false;
    };
    let (Ok(len), Ok(crc)) = (len.parse::<u64>(), crc.parse::<u32>()) else {
        return false;
    };
    if len != expected_chunk_bytes(chunk, n_classes) {
        return false;
    }
    let Ok(bytes) = std::fs::read(&bin) else {
        return false;
    };
    bytes.len() as u64 == len && io::crc32(&bytes) == crc
}

/// Classify one chunk into `[class][row][col]` i16 bytes. Pure with
/// respect to everything but its own output file.
fn process_chunk(
    cube: &RegularCube,
    model: &TrainedModel,
    chunk: &Chunk,
    dir: &Path,
    batch_pixels: usize,
) -> Result<()> {
    let bands: Vec<usize> = (0..cube.bands.len()).collect();
    let instants: Vec<usize> = (0..cube.timeline.len()).collect();
    let block = cube.read_block(&chunk.tile, chunk.window, &bands, &instants)?;
    let k = model.n_classes();
    let pixels = chunk.window.pixels();
    let n_features = model.layout.features();

    let mut plane = vec![0i16; k * pixels];
    let mut features = Vec::with_capacity(batch_pixels * n_features);
    let mut feature_row = Vec::with_capacity(n_features);
    let mut batch_start = 0usize;
    while batch_start < pixels {
        let batch_len = batch_pixels.min(pixels - batch_start);
        features.clear();
        for p in batch_start..batch_start + batch_len {
            let (row, col) = (p / chunk.window.ncols, p % chunk.window.ncols);
            block.pixel_features(row, col, &mut feature_row);
            features.extend_from_slice(&feature_row);
        }
        let probs = model.predict_probs(&features, batch_len)?;
        for (i, row) in probs.chunks(k).enumerate() {
            let p = batch_start + i;
            for (class, &prob) in row.iter().enumerate() {
                let scaled = (prob as f64 * PROB_SCALE as f64).round();
                plane[class * pixels + p] = scaled.clamp(0.0, PROB_SCALE as f64) as i16;
            }
        }
        batch_start += batch_len;
    }

    let bytes = io::i16_to_le_bytes(&plane);
    io::write_atomic(&chunk_bin(dir, chunk.chunk_id), &bytes)?;
    let marker = format!("{} {}\n", bytes.len(), io::crc32(&bytes));
    io::write_atomic(&chunk_marker(dir, chunk.chunk_id), marker.as_bytes())
}

/// Work queue handing out the lowest pending chunk id; blocks while empty
/// until closed (retries may refill it).
struct WorkQueue {
    inner: Mutex<(VecDeque<usize>, bool)>,
    ready: Condvar,
}

impl WorkQueue {
    fn new(ids: Vec<usize>) -> WorkQueue {
        WorkQueue {
            inner: Mutex::new((ids.into_iter().collect(), false)),
            ready: Condvar::new(),
        }
    }

    fn next(&self) -> Option<usize> {
        let mut guard = self.inner.lock().unwrap();
        loop {
            if let Some(id) = guard.0.pop_front() {
                return Some(id);
            }
            if guard.1 {
                return None;
            }
            guard = self.ready.wait(guard).unwrap();
        }
    }

    fn push(&self, id: usize) {
        let mut guard = self.inner.lock().unwrap();
        let at = guard.0.partition_point(|&x| x < id);
        guard.0.insert(at, id);
        drop(guard);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.inner.lock().unwrap().1 = true;
        self.ready.notify_all();
    }
}

/// Execute every pending chunk of `job`, then merge. Returns the merged
/// cube, or persists state and fails if a chunk exhausts its retries.
fn run_job(
    cube: &RegularCube,
    model: &TrainedModel,
    mut job: JobState,
    dir: &Path,
    options: &ClassifyOptions,
) -> Result<(ProbCube, JobState)> {
    let pending: Vec<usize> = (0..job.plan.chunks.len())
        .filter(|&i| job.status[i] != ChunkStatus::Done)
        .collect();
    for &i in &pending {
        job.status[i] = ChunkStatus::Pending;
    }
    persist_job(dir, &job)?;

    let todo_total = match options.max_chunks {
        Some(limit) => pending.len().min(limit),
        None => pending.len(),
    };

    if todo_total > 0 {
        let queue = Arc::new(WorkQueue::new(pending));
        let (result_tx, result_rx) = mpsc::channel::<(usize, Result<()>)>();
        let workers = job.plan.max_workers.max(1);
        let chunks = Arc::new(job.plan.chunks.clone());

        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let queue = Arc::clone(&queue);
                let chunks = Arc::clone(&chunks);
                let result_tx = result_tx.clone();
                scope.spawn(move || {
                    while let Some(id) = queue.next() {
                        let outcome =
                            process_chunk(cube, model, &chunks[id], dir, options.batch_pixels);
                        if result_tx.send((id, outcome)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(result_tx);

            // Orchestrator: the only mutator of job state.
            let mut newly_done = 0usize;
            let mut outcome: Result<()> = Ok(());
            while newly_done < todo_total {
                let Ok((id, result)) = result_rx.recv() else {
                    break;
                };
                match result {
                    Ok(()) => {
                        job.status[id] = ChunkStatus::Done;
                        persist_job(dir, &job)?;
                        newly_done += 1;
                    }
                    Err(err) => {
                        job.retries[id] += 1;
                        if job.retries[id] <= options.max_retries {
                            log::warn!(
                                "chunk {id} failed (attempt {}): {err}; requeueing",
                                job.retries[id]
                            );
                            persist_job(dir, &job)?;
                            queue.push(id);
                        } else {
                            job.status[id] = ChunkStatus::Failed;
                            persist_job(dir, &job)?;
                            outcome = Err(Error::ChunkFailed {
                                chunk_id: id,
                                attempts: job.retries[id] as usize,
                                detail: err.to_string(),
                            });
                            break;
                        }
                    }
                }
            }
            queue.close();
            outcome
        })?;
    }

    if job.status.iter().all(|s| *s == ChunkStatus::Done) {
        let prob = merge_chunks(cube, model, &job, dir, options.clean)?;
        Ok((prob, job))
    } else {
        Err(Error::JobIncomplete {
            done: job.done_count(),
            total: job.plan.chunks.len(),
        })
    }
}

/// Start a fresh classification job. Refuses to run over an existing
/// `job.json` (use [`resume`] for that).
pub fn classify_cube(
    cube: &RegularCube,
    model: &TrainedModel,
    plan: &ChunkPlan,
    out_dir: &Path,
    options: &ClassifyOptions,
) -> Result<(ProbCube, JobState)> {
    let expected_layout = crate::models::FeatureLayout {
        n_times: cube.timeline.len(),
        n_bands: cube.bands.len(),
    };
    if model.layout != expected_layout {
        return Err(Error::LayoutMismatch {
            expected: format!(
                "{} instants x {} bands",
                model.layout.n_times, model.layout.n_bands
            ),
            got: format!(
                "cube with {} instants x {} bands",
                expected_layout.n_times, expected_layout.n_bands
            ),
        });
    }
    if plan.cube_id != cube.id {
        return Err(Error::JobMismatch(format!(
            "plan was made for cube {:?}, got {:?}",
            plan.cube_id, cube.id
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if job_path(out_dir).exists() {
        return Err(Error::JobMismatch(format!(
            "{} already exists; resume instead of starting a new job",
            job_path(out_dir).display()
        )));
    }

    let job = JobState {
        job_id: format!("{}-{}", cube.id, &model_hash(model)[..12]),
        plan: plan.clone(),
        status: vec![ChunkStatus::Pending; plan.chunks.len()],
        retries: vec![0; plan.chunks.len()],
        model_hash: model_hash(model),
        cube_hash: cube_hash(cube)?,
    };
    run_job(cube, model, job, out_dir, options)
}

/// Resume a job from its directory: chunks with valid markers are kept,
/// everything else re-runs. Refuses if the cube or model changed.
pub fn resume(
    cube: &RegularCube,
    model: &TrainedModel,
    job_dir: &Path,
    options: &ClassifyOptions,
) -> Result<(ProbCube, JobState)> {
    let mut job = load_job(job_dir)?;
    if job.cube_hash != cube_hash(cube)? {
        return Err(Error::JobMismatch(
            "cube manifest changed since the job was created".into(),
        ));
    }
    if job.model_hash != model_hash(model) {
        return Err(Error::JobMismatch(
            "model file changed since the job was created".into(),
        ));
    }
    let n_classes = model.n_classes();
    for (i, chunk) in job.plan.chunks.iter().enumerate() {
        job.status[i] = if chunk_is_valid(job_dir, chunk, n_classes) {
            ChunkStatus::Done
        } else {
            ChunkStatus::Pending
        };
    }
    run_job(cube, model, job, job_dir, options)
}

/// Concatenate chunk strips into per-tile per-class rasters. Chunk files
/// stay in place unless `clean` is set (and are only removed after the
/// merge fully succeeds).
pub fn merge_chunks(
    cube: &RegularCube,
    model: &TrainedModel,
    job: &JobState,
    dir: &Path,
    clean: bool,
) -> Result<ProbCube> {
    let prob = ProbCube {
        id: cube.id.clone(),
        labels: model.labels.clone(),
        tiles: cube.tiles.clone(),
        storage: dir.to_path_buf(),
    };
    for grid in &cube.tiles {
        let strips: Vec<&Chunk> = job
            .plan
            .chunks
            .iter()
            .filter(|c| c.tile == grid.tile)
            .collect();
        for (class, label) in model.labels.iter().enumerate() {
            let mut out = Vec::with_capacity(grid.nrows * grid.ncols * 2);
            for strip in &strips {
                let path = chunk_bin(dir, strip.chunk_id);
                let mut f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                let pixels = strip.window.pixels();
                let mut buf = vec![0u8; pixels * 2];
                f.seek(SeekFrom::Start((class * pixels * 2) as u64))
                    .map_err(|e| Error::io(&path, e))?;
                f.read_exact(&mut buf).map_err(|e| Error::Integrity {
                    file: path.clone(),
                    detail: format!("chunk output truncated: {e}"),
                })?;
                out.extend_from_slice(&buf);
            }
            if out.len() != grid.nrows * grid.ncols * 2 {
                return Err(Error::Integrity {
                    file: prob.plane_path(&grid.tile, label),
                    detail: format!(
                        "merged {} bytes, tile needs {}",
                        out.len(),
                        grid.nrows * grid.ncols * 2
                    ),
                });
            }
            io::write_atomic(&prob.plane_path(&grid.tile, label), &out)?;
        }
    }
    prob.write_manifest()?;
    if clean {
        for chunk in &job.plan.chunks {
            let _ = std::fs::remove_file(chunk_bin(dir, chunk.chunk_id));
            let _ = std::fs::remove_file(chunk_marker(dir, chunk.chunk_id));
        }
    }
    Ok(prob)
}

/// Validate the stored-probability invariants: values in [0, PROB_SCALE]
/// and per-pixel class sums within rounding tolerance of PROB_SCALE.
pub fn validate_prob_cube(prob: &ProbCube) -> Result<()> {
    for grid in &prob.tiles {
        let planes: Vec<Vec<i16>> = (0..prob.labels.len())
            .map(|class| prob.read_plane(&grid.tile, class))
            .collect::<Result<_>>()?;
        for p in 0..grid.nrows * grid.ncols {
            let mut sum = 0i32;
            for plane in &planes {
                let v = plane[p] as i32;
                if !(0..=PROB_SCALE).contains(&v) {
                    return Err(Error::Integrity {
                        file: prob.storage.join("probs.json"),
                        detail: format!("stored probability {v} outside [0, {PROB_SCALE}]"),
                    });
                }
                sum += v;
            }
            if !(PROB_SCALE - 10..=PROB_SCALE + 10).contains(&sum) {
                return Err(Error::Integrity {
                    file: prob.storage.join("probs.json"),
                    detail: format!("pixel {p} class sum {sum} outside tolerance"),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_support::toy_table;
    use crate::models::{train_model, Hyperparams};
    use std::collections::BTreeMap;

    fn date(s: &str) -> chrono::NaiveDate {
        s.parse().unwrap()
    }

    /// Synthetic 8x6 single-tile cube with 2 bands and 3 instants whose
    /// pixel values identify (row, col, band, instant).
    fn test_cube(dir: &Path, nrows: usize, ncols: usize) -> RegularCube {
        let bands = ["b1", "b2"];
        let dates = ["2020-01-01", "2020-01-17", "2020-02-02"];
        let mut items = Vec::new();
        for (di, d) in dates.iter().enumerate() {
            let mut assets = BTreeMap::new();
            for (bi, b) in bands.iter().enumerate() {
                let vals: Vec<i16> = (0..nrows * ncols)
                    .map(|p| (p as i16) * 7 + bi as i16 * 3 + di as i16)
                    .collect();
                let p = dir.join(format!("{b}_{d}.bin"));
                io::write_atomic(&p, &io::i16_to_le_bytes(&vals)).unwrap();
                assets.insert(
                    b.to_string(),
                    crate::catalog::AssetSource::File(p.clone()),
                );
            }
            items.push(crate::catalog::ItemDescriptor {
                tile: "T".into(),
                datetime: date(d),
                cloud_cover: None,
                nrows,
                ncols,
                origin: (0.0, nrows as f64),
                assets,
            });
        }
        let c = crate::catalog::CollectionDescriptor {
            id: "engine-test".into(),
            crs: "EPSG:4326".into(),
            pixel_resolution: (1.0, 1.0),
            bands: bands
                .iter()
                .map(|b| crate::catalog::BandDef {
                    name: b.to_string(),
                    dtype: crate::catalog::Dtype::Int16,
                    scale: 0.001,
                    nodata: -9999.0,
                    is_cloud_mask: false,
                })
                .collect(),
            items,
        };
        let tl = crate::cube::Timeline::build(date("2020-01-01"), date("2020-02-02"), 16).unwrap();
        crate::cube::regularize(&c, &tl, &dir.join("cube")).unwrap()
    }

    fn test_model(seed: u64) -> TrainedModel {
        // 2 bands x 3 instants = 6 features; values in the cube land in
        // [0, ~0.4] after scaling, so split the classes around 0.15
        let mut rows = Vec::new();
        for i in 0..12 {
            let base = if i % 2 == 0 { 0.05f32 } else { 0.3 };
            let series: Vec<f32> = (0..6).map(|f| base + 0.01 * f as f32).collect();
            rows.push((if i % 2 == 0 { "lo" } else { "hi" }, series));
        }
        let table = toy_table(rows, 2);
        let mut hyper = Hyperparams::default();
        hyper.set("trees", serde_json::json!(7));
        train_model("rf", &table, &hyper, seed).unwrap()
    }

    fn plan_with_strips(cube: &RegularCube, strip_rows: usize, cores: usize) -> ChunkPlan {
        let mut chunks = Vec::new();
        for grid in &cube.tiles {
            let mut row0 = 0;
            while row0 < grid.nrows {
                let nrows = strip_rows.min(grid.nrows - row0);
                chunks.push(Chunk {
                    chunk_id: chunks.len(),
                    tile: grid.tile.clone(),
                    window: Window {
                        row0,
                        col0: 0,
                        nrows,
                        ncols: grid.ncols,
                    },
                });
                row0 += nrows;
            }
        }
        let max_workers = cores.min(chunks.len());
        ChunkPlan {
            cube_id: cube.id.clone(),
            chunks,
            max_workers,
        }
    }

    #[test]
    fn plan_single_chunk_with_huge_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let plan = plan_chunks(&cube, 3, u64::MAX / 2, 4).unwrap();
        assert_eq!(plan.chunks.len(), 1);
        assert_eq!(plan.chunks[0].window.nrows, 8);
        assert_eq!(plan.max_workers, 1);
    }

    #[test]
    fn plan_strip_count_matches_ceiling_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 73, 6);
        // per_row = 6 * (2*3*4 + 3*2) = 180 bytes; target h=5 needs
        // budget/cores/per_row = 5 -> memory = 5*180*2 cores/0.8
        let memory = (5 * 180 * 2) as u64 * 10 / 8 + 1;
        let plan = plan_chunks(&cube, 3, memory, 2).unwrap();
        let h = plan.chunks[0].window.nrows;
        assert_eq!(h, 5);
        assert_eq!(plan.chunks.len(), 73usize.div_ceil(5));
    }

    #[test]
    fn plan_partitions_rows_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 73, 6);
        let plan = plan_chunks(&cube, 3, 4000, 2).unwrap();
        let mut covered = vec![0u8; 73];
        for c in &plan.chunks {
            for r in c.window.row0..c.window.row0 + c.window.nrows {
                covered[r] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        // chunk ids dense 0..n-1
        for (i, c) in plan.chunks.iter().enumerate() {
            assert_eq!(c.chunk_id, i);
        }
    }

    #[test]
    fn plan_insufficient_memory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let err = plan_chunks(&cube, 3, 64, 4).unwrap_err();
        assert!(matches!(err, Error::InsufficientMemory { .. }));
        assert!(err.to_string().contains("insufficient memory"));
    }

    #[test]
    fn constant_model_fills_expected_probabilities() {
        use crate::models::test_support::MajorityBackend;
        crate::models::register_model_backend(std::sync::Arc::new(MajorityBackend));
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 4, 4);
        // majority model: labels lo/hi with 2/3 vs 1/3 frequencies
        let rows = vec![
            ("lo", vec![0.0f32; 6]),
            ("lo", vec![0.1; 6]),
            ("lo", vec![0.2; 6]),
            ("hi", vec![1.0; 6]),
            ("hi", vec![0.9; 6]),
            ("hi", vec![0.8; 6]),
        ];
        let mut rows = rows;
        rows.push(("lo", vec![0.3; 6]));
        let table = toy_table(rows, 2);
        let model = train_model("majority", &table, &Hyperparams::default(), 0).unwrap();
        let plan = plan_chunks(&cube, 2, u64::MAX / 2, 2).unwrap();
        let (prob, job) =
            classify_cube(&cube, &model, &plan, &dir.path().join("out"), &Default::default())
                .unwrap();
        assert_eq!(job.done_count(), plan.chunks.len());
        // constant prediction (4/7, 3/7) scaled by 10000 and rounded
        let hi_plane = prob.read_plane("T", 0).unwrap();
        let lo_plane = prob.read_plane("T", 1).unwrap();
        let expect_hi = (3.0f64 / 7.0 * 10000.0).round() as i16;
        let expect_lo = (4.0f64 / 7.0 * 10000.0).round() as i16;
        assert!(hi_plane.iter().all(|&v| v == expect_hi));
        assert!(lo_plane.iter().all(|&v| v == expect_lo));
        validate_prob_cube(&prob).unwrap();
    }

    fn prob_bytes(prob: &ProbCube) -> Vec<u8> {
        let mut all = Vec::new();
        for grid in &prob.tiles {
            for label in &prob.labels {
                all.extend(std::fs::read(prob.plane_path(&grid.tile, label)).unwrap());
            }
        }
        all
    }

    #[test]
    fn chunked_equals_monolithic() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(1);
        let mono = plan_with_strips(&cube, 8, 1);
        // strips of 2,1,1,1,1,1,1 rows: 7 uneven chunks
        let heights = [2usize, 1, 1, 1, 1, 1, 1];
        let mut chunks = Vec::new();
        let mut row0 = 0;
        for (i, &h) in heights.iter().enumerate() {
            chunks.push(Chunk {
                chunk_id: i,
                tile: "T".into(),
                window: Window {
                    row0,
                    col0: 0,
                    nrows: h,
                    ncols: 6,
                },
            });
            row0 += h;
        }
        assert_eq!(row0, 8);
        let seven = ChunkPlan {
            cube_id: cube.id.clone(),
            chunks,
            max_workers: 3,
        };
        let (p1, _) =
            classify_cube(&cube, &model, &mono, &dir.path().join("mono"), &Default::default())
                .unwrap();
        let (p7, _) =
            classify_cube(&cube, &model, &seven, &dir.path().join("seven"), &Default::default())
                .unwrap();
        assert_eq!(prob_bytes(&p1), prob_bytes(&p7));
        validate_prob_cube(&p7).unwrap();
    }

    #[test]
    fn crash_prefix_resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 10, 6);
        let model = test_model(2);
        let plan = plan_with_strips(&cube, 2, 2); // 5 chunks
        let (reference, _) = classify_cube(
            &cube,
            &model,
            &plan,
            &dir.path().join("ref"),
            &Default::default(),
        )
        .unwrap();

        for prefix in [1usize, 2, 4] {
            let out = dir.path().join(format!("crash_{prefix}"));
            let staged = ClassifyOptions {
                max_chunks: Some(prefix),
                ..Default::default()
            };
            // staged run stops early with state persisted
            let err = classify_cube(&cube, &model, &plan, &out, &staged).unwrap_err();
            assert!(err.to_string().contains("resume"), "{err}");
            let job = load_job(&out).unwrap();
            assert_eq!(job.done_count(), prefix);

            let (resumed, job) = resume(&cube, &model, &out, &Default::default()).unwrap();
            assert_eq!(job.done_count(), plan.chunks.len());
            assert_eq!(prob_bytes(&resumed), prob_bytes(&reference));
        }
    }

    #[test]
    fn resume_of_finished_job_reruns_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(3);
        let plan = plan_with_strips(&cube, 3, 2);
        let out = dir.path().join("out");
        let (p_first, _) =
            classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap();
        let before = prob_bytes(&p_first);

        // capture chunk mtimes to prove nothing re-ran
        let mtime = |id: usize| {
            std::fs::metadata(chunk_bin(&out, id))
                .unwrap()
                .modified()
                .unwrap()
        };
        let times: Vec<_> = (0..plan.chunks.len()).map(mtime).collect();
        std::thread::sleep(std::time::Duration::from_millis(20));
        let (p_again, job) = resume(&cube, &model, &out, &Default::default()).unwrap();
        assert_eq!(job.done_count(), plan.chunks.len());
        assert_eq!(prob_bytes(&p_again), before);
        let times_after: Vec<_> = (0..plan.chunks.len()).map(mtime).collect();
        assert_eq!(times, times_after);
    }

    #[test]
    fn deleted_marker_reruns_exactly_that_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(4);
        let plan = plan_with_strips(&cube, 2, 2); // 4 chunks
        let out = dir.path().join("out");
        let (p, _) = classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap();
        let before = prob_bytes(&p);

        std::fs::remove_file(chunk_marker(&out, 2)).unwrap();
        let mtime = |id: usize| {
            std::fs::metadata(chunk_bin(&out, id))
                .unwrap()
                .modified()
                .unwrap()
        };
        let times: Vec<_> = (0..4).map(mtime).collect();
        std::thread::sleep(std::time::Duration::from_millis(20));
        let (p2, _) = resume(&cube, &model, &out, &Default::default()).unwrap();
        assert_eq!(prob_bytes(&p2), before);
        let times_after: Vec<_> = (0..4).map(mtime).collect();
        for id in 0..4 {
            if id == 2 {
                assert_ne!(times[id], times_after[id], "chunk 2 should re-run");
            } else {
                assert_eq!(times[id], times_after[id], "chunk {id} should not re-run");
            }
        }
    }

    #[test]
    fn truncated_output_with_intact_marker_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(5);
        let plan = plan_with_strips(&cube, 2, 2);
        let out = dir.path().join("out");
        let (p, _) = classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap();
        let before = prob_bytes(&p);

        // truncate chunk 1's output, leave its marker alone
        let bin = chunk_bin(&out, 1);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();

        let (p2, _) = resume(&cube, &model, &out, &Default::default()).unwrap();
        assert_eq!(prob_bytes(&p2), before);
    }

    #[test]
    fn corrupted_chunk_content_detected_by_crc() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(6);
        let plan = plan_with_strips(&cube, 2, 2);
        let out = dir.path().join("out");
        let (p, _) = classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap();
        let before = prob_bytes(&p);

        // flip bytes without changing length
        let bin = chunk_bin(&out, 0);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        bytes[1] ^= 0xff;
        std::fs::write(&bin, &bytes).unwrap();

        let (p2, _) = resume(&cube, &model, &out, &Default::default()).unwrap();
        assert_eq!(prob_bytes(&p2), before);
    }

    #[test]
    fn resume_refuses_changed_cube() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(7);
        let plan = plan_with_strips(&cube, 4, 2);
        let out = dir.path().join("out");
        classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap();

        let other_dir = tempfile::tempdir().unwrap();
        let other_cube = test_cube(other_dir.path(), 8, 7);
        let err = resume(&other_cube, &model, &out, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::JobMismatch(_)));
        // changed model refused as well
        let other_model = test_model(99);
        let err = resume(&cube, &other_model, &out, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::JobMismatch(_)));
    }

    #[test]
    fn failing_chunk_exhausts_retries_and_persists_state() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(8);
        let plan = plan_with_strips(&cube, 2, 2);
        let out = dir.path().join("out");

        // sabotage one band file so chunk reads fail
        let victim = cube.band_file("T", "b1", date("2020-01-17"));
        let saved = std::fs::read(&victim).unwrap();
        std::fs::remove_file(&victim).unwrap();

        let err = classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::ChunkFailed { .. }));
        let job = load_job(&out).unwrap();
        assert!(job.status.contains(&ChunkStatus::Failed));
        assert!(job.retries.iter().any(|&r| r > 3 - 1));

        // restore and resume to completion
        std::fs::write(&victim, &saved).unwrap();
        let (prob, job) = resume(&cube, &model, &out, &Default::default()).unwrap();
        assert_eq!(job.done_count(), plan.chunks.len());
        validate_prob_cube(&prob).unwrap();
    }

    #[test]
    fn workers_touch_only_their_chunk_files() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(9);
        let plan = plan_with_strips(&cube, 2, 3);
        let out = dir.path().join("out");
        classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap();

        // audit: the job directory holds exactly the expected artifacts
        let mut found: Vec<String> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        found.sort();
        let mut expected = vec!["job.json".to_string(), "probs.json".to_string()];
        for id in 0..plan.chunks.len() {
            expected.push(format!("chunk_{id}.bin"));
            expected.push(format!("chunk_{id}.done"));
        }
        for label in &model.labels {
            expected.push(format!("T_prob_{label}.bin"));
        }
        expected.sort();
        assert_eq!(found, expected);
    }

    #[test]
    fn clean_removes_chunk_files_after_merge() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 8, 6);
        let model = test_model(10);
        let plan = plan_with_strips(&cube, 4, 2);
        let out = dir.path().join("out");
        let options = ClassifyOptions {
            clean: true,
            ..Default::default()
        };
        let (prob, _) = classify_cube(&cube, &model, &plan, &out, &options).unwrap();
        assert!(!chunk_bin(&out, 0).exists());
        assert!(!chunk_marker(&out, 0).exists());
        validate_prob_cube(&prob).unwrap();
    }

    #[test]
    fn merge_of_single_chunk_equals_copy() {
        let dir = tempfile::tempdir().unwrap();
        let cube = test_cube(dir.path(), 4, 4);
        let model = test_model(11);
        let plan = plan_with_strips(&cube, 4, 1);
        let out = dir.path().join("out");
        let (prob, _) = classify_cube(&cube, &model, &plan, &out, &Default::default()).unwrap();
        let chunk = std::fs::read(chunk_bin(&out, 0)).unwrap();
        let pixels = 16;
        for (class, label) in model.labels.iter().enumerate() {
            let plane = std::fs::read(prob.plane_path("T", label)).unwrap();
            assert_eq!(&plane[..], &chunk[class * pixels * 2..(class + 1) * pixels * 2]);
        }
    }
}

//! Raw raster file helpers: headerless little-endian binary grids,
//! atomic writes, and a tiny P6 image writer for map renderings.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Read a headerless little-endian i16 raster and check its exact length.
pub fn read_i16_raster(path: &Path, expected_values: usize) -> Result<Vec<i16>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_values * 2 {
        return Err(Error::Integrity {
            file: path.to_path_buf(),
            detail: format!(
                "expected {} bytes ({} i16 values), found {}",
                expected_values * 2,
                expected_values,
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn read_f32_raster(path: &Path, expected_values: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_values * 4 {
        return Err(Error::Integrity {
            file: path.to_path_buf(),
            detail: format!(
                "expected {} bytes ({} f32 values), found {}",
                expected_values * 4,
                expected_values,
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_u8_raster(path: &Path, expected_values: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_values {
        return Err(Error::Integrity {
            file: path.to_path_buf(),
            detail: format!("expected {} bytes, found {}", expected_values, bytes.len()),
        });
    }
    Ok(bytes)
}

pub fn i16_to_le_bytes(values: &[i16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write `bytes` to `path` via a temp file + rename so readers never see a
/// partial file. Each output file has exactly one writer.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(bytes);
    h.finalize()
}

/// Binary P6 image, `pixels` is row-major RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height * 3, "pixel buffer size");
    let mut bytes = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    bytes.extend_from_slice(pixels);
    write_atomic(path, &bytes)
}

/// Fixed, order-stable palette. Index by the position of a label in the
/// sorted label list; wraps around past 16 entries.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [128, 128, 0],
    [0, 0, 128],
];

pub fn palette_color(index: usize) -> [u8; 3] {
    PALETTE[index % PALETTE.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn i16_roundtrip_exact_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let vals: Vec<i16> = vec![-3, 0, 7, i16::MAX, i16::MIN];
        write_atomic(&p, &i16_to_le_bytes(&vals)).unwrap();
        assert_eq!(read_i16_raster(&p, 5).unwrap(), vals);
        // wrong expected length is an integrity error naming the file
        let err = read_i16_raster(&p, 6).unwrap_err();
        assert!(err.to_string().contains("a.bin"));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"abc").unwrap();
        let entries: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(entries, vec![std::ffi::OsString::from("x.bin")]);
    }
}

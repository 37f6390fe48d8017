//! Header-sidecar file format and PGM slice dumps.
//!
//! A dataset object is a pair of files: an ASCII `.hdr` sidecar holding
//! `shape=D H W`, `spacing=sd sh sw`, `dtype={f32,u8}`, `byteorder=little`,
//! and a `.raw` payload with the values in D-major, then H, then W order.

use crate::data::{SegMask, Volume};
use crate::error::{Error, Result};
use ndarray::Array3;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    U8,
}

struct Header {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: Dtype,
}

fn raw_path(hdr: &Path) -> PathBuf {
    hdr.with_extension("raw")
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut shape = None;
    let mut spacing = None;
    let mut dtype = None;
    let mut byteorder = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            reason: format!("line without key=value: {line:?}"),
        })?;
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.into(),
            reason,
        };
        match key.trim() {
            "shape" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| malformed(format!("field shape: {e}")))?;
                if parts.len() != 3 || parts.iter().any(|&p| p == 0) {
                    return Err(malformed(format!(
                        "field shape: expected three positive integers, got {value:?}"
                    )));
                }
                shape = Some([parts[0], parts[1], parts[2]]);
            }
            "spacing" => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| malformed(format!("field spacing: {e}")))?;
                if parts.len() != 3 || parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                    return Err(malformed(format!(
                        "field spacing: expected three positive reals, got {value:?}"
                    )));
                }
                spacing = Some([parts[0], parts[1], parts[2]]);
            }
            "dtype" => {
                dtype = Some(match value.trim() {
                    "f32" => Dtype::F32,
                    "u8" => Dtype::U8,
                    other => {
                        return Err(malformed(format!("field dtype: unknown value {other:?}")))
                    }
                });
            }
            "byteorder" => {
                if value.trim() != "little" {
                    return Err(malformed(format!(
                        "field byteorder: only \"little\" is supported, got {value:?}"
                    )));
                }
                byteorder = Some(());
            }
            other => {
                return Err(malformed(format!("unknown field {other:?}")));
            }
        }
    }
    let missing = |field: &str| Error::MalformedHeader {
        path: path.into(),
        reason: format!("missing field {field:?}"),
    };
    let shape = shape.ok_or_else(|| missing("shape"))?;
    let spacing = spacing.ok_or_else(|| missing("spacing"))?;
    let dtype = dtype.ok_or_else(|| missing("dtype"))?;
    byteorder.ok_or_else(|| missing("byteorder"))?;
    Ok(Header {
        shape,
        spacing,
        dtype,
    })
}

fn write_header(path: &Path, shape: [usize; 3], spacing: [f64; 3], dtype: Dtype) -> Result<()> {
    let dtype = match dtype {
        Dtype::F32 => "f32",
        Dtype::U8 => "u8",
    };
    let text = format!(
        "shape={} {} {}\nspacing={} {} {}\ndtype={}\nbyteorder=little\n",
        shape[0], shape[1], shape[2], spacing[0], spacing[1], spacing[2], dtype
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a volume from its `.hdr` sidecar path.
pub fn load_volume(hdr_path: impl AsRef<Path>) -> Result<Volume> {
    let hdr_path = hdr_path.as_ref();
    let header = parse_header(hdr_path)?;
    if header.dtype != Dtype::F32 {
        return Err(Error::MalformedHeader {
            path: hdr_path.into(),
            reason: "field dtype: expected f32 for a volume".into(),
        });
    }
    let payload_path = raw_path(hdr_path);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let n = header.shape[0] * header.shape[1] * header.shape[2];
    if bytes.len() != n * 4 {
        return Err(Error::ByteCountMismatch {
            path: payload_path,
            declared: n,
            actual: bytes.len() / 4,
        });
    }
    let mut values = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let values = Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), values)
        .expect("length checked above");
    Volume::new(values, header.spacing, [0.0; 3])
}

/// Save a volume as `.hdr` + `.raw` (f32, little endian).
pub fn save_volume(v: &Volume, hdr_path: impl AsRef<Path>) -> Result<()> {
    let hdr_path = hdr_path.as_ref();
    write_header(hdr_path, v.dims(), v.spacing, Dtype::F32)?;
    let payload_path = raw_path(hdr_path);
    let mut bytes = Vec::with_capacity(v.values.len() * 4);
    for &x in v.values.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))
}

/// Load a binary mask from its `.hdr` sidecar path.
pub fn load_mask(hdr_path: impl AsRef<Path>) -> Result<SegMask> {
    let hdr_path = hdr_path.as_ref();
    let header = parse_header(hdr_path)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::MalformedHeader {
            path: hdr_path.into(),
            reason: "field dtype: expected u8 for a mask".into(),
        });
    }
    let payload_path = raw_path(hdr_path);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let n = header.shape[0] * header.shape[1] * header.shape[2];
    if bytes.len() != n {
        return Err(Error::ByteCountMismatch {
            path: payload_path,
            declared: n,
            actual: bytes.len(),
        });
    }
    let values = Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), bytes)
        .expect("length checked above");
    SegMask::new(values, header.spacing)
}

/// Save a binary mask as `.hdr` + `.raw` (u8).
pub fn save_mask(m: &SegMask, hdr_path: impl AsRef<Path>) -> Result<()> {
    let hdr_path = hdr_path.as_ref();
    write_header(hdr_path, m.dims(), m.spacing, Dtype::U8)?;
    let payload_path = raw_path(hdr_path);
    fs::write(&payload_path, m.values.as_slice().expect("standard layout"))
        .map_err(|e| Error::io(&payload_path, e))
}

/// Write one depth slice of a scalar grid as an 8-bit grayscale PGM (P5)
/// image, min/max scaled over the whole grid.
pub fn write_pgm_slice(values: &Array3<f32>, z: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (d, h, w) = values.dim();
    if z >= d {
        return Err(Error::InvalidArgument(format!(
            "slice index {z} out of range for depth {d}"
        )));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = Vec::with_capacity(64 + h * w);
    write!(&mut out, "P5\n{w} {h}\n255\n").expect("in-memory write");
    for y in 0..h {
        for x in 0..w {
            let v = ((values[[z, y, x]] - lo) * scale).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Dump every depth slice of a grid into `dir` as `prefix_zNNN.pgm`.
pub fn write_pgm_slices(values: &Array3<f32>, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, _, _) = values.dim();
    let mut paths = Vec::with_capacity(d);
    for z in 0..d {
        let path = dir.join(format!("{prefix}_z{z:03}.pgm"));
        write_pgm_slice(values, z, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("easeg3d-io-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn zero_volume_round_trip() {
        let dir = tmpdir("zero");
        let v = Volume::new(Array3::zeros((4, 4, 4)), [1.0; 3], [0.0; 3]).unwrap();
        let hdr = dir.join("zeros.hdr");
        save_volume(&v, &hdr).unwrap();
        let back = load_volume(&hdr).unwrap();
        assert_eq!(back.dims(), [4, 4, 4]);
        assert!(back.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_trip_preserves_values_shape_spacing_exactly() {
        let dir = tmpdir("rt");
        let values = Array3::from_shape_fn((3, 5, 7), |(d, h, w)| {
            (d as f32 * 0.31 - h as f32 * 1.7).sin() + w as f32 * 0.001
        });
        let v = Volume::new(values, [0.19, 0.18, 0.18], [0.0; 3]).unwrap();
        let hdr = dir.join("vol.hdr");
        save_volume(&v, &hdr).unwrap();
        let back = load_volume(&hdr).unwrap();
        assert_eq!(back.spacing, [0.19, 0.18, 0.18]);
        assert_eq!(back.values, v.values);
    }

    #[test]
    fn header_spacing_is_parsed() {
        let dir = tmpdir("spacing");
        let hdr = dir.join("sp.hdr");
        fs::write(&hdr, "shape=2 2 2\nspacing=0.19 0.18 0.18\ndtype=f32\nbyteorder=little\n").unwrap();
        fs::write(dir.join("sp.raw"), [0u8; 32]).unwrap();
        let v = load_volume(&hdr).unwrap();
        assert_eq!(v.spacing, [0.19, 0.18, 0.18]);
    }

    #[test]
    fn byte_count_mismatch_is_rejected() {
        let dir = tmpdir("bytes");
        let hdr = dir.join("bad.hdr");
        fs::write(&hdr, "shape=2 2 2\nspacing=1 1 1\ndtype=f32\nbyteorder=little\n").unwrap();
        // header declares 8 voxels, payload holds 7 values
        fs::write(dir.join("bad.raw"), vec![0u8; 7 * 4]).unwrap();
        match load_volume(&hdr) {
            Err(Error::ByteCountMismatch { declared, actual, .. }) => {
                assert_eq!(declared, 8);
                assert_eq!(actual, 7);
            }
            other => panic!("expected byte-count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_malformed_header_are_diagnosed() {
        let dir = tmpdir("diag");
        assert!(matches!(load_volume(dir.join("absent.hdr")), Err(Error::Io { .. })));

        let hdr = dir.join("mal.hdr");
        fs::write(&hdr, "shape=2 2\nspacing=1 1 1\ndtype=f32\nbyteorder=little\n").unwrap();
        match load_volume(&hdr) {
            Err(Error::MalformedHeader { reason, .. }) => assert!(reason.contains("shape")),
            other => panic!("expected malformed header, got {other:?}"),
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tmpdir("mask");
        let mut values = Array3::zeros((2, 3, 3));
        values[[1, 1, 1]] = 1u8;
        let m = SegMask::new(values, [1.0; 3]).unwrap();
        let hdr = dir.join("m.hdr");
        save_mask(&m, &hdr).unwrap();
        assert_eq!(load_mask(&hdr).unwrap().values, m.values);
    }

    #[test]
    fn pgm_slice_has_p5_header() {
        let dir = tmpdir("pgm");
        let values = Array3::from_shape_fn((2, 3, 4), |(d, h, w)| (d + h + w) as f32);
        let path = dir.join("s.pgm");
        write_pgm_slice(&values, 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 3\n255\n".len() + 12);
    }
}

//! Flat binary archive of named f32 tensors with a shape manifest.
//! Used for pretrained-weight files and as the payload section of
//! checkpoints. Little-endian throughout.
//!
//! Layout: magic `ES3DTNSR`, format version u32, tensor count u32, then per
//! tensor: name length u32 + UTF-8 name, rank u32, dims (u32 each), values
//! (f32 each, dim product many).

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ES3DTNSR";
const VERSION: u32 = 1;

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl Iterator<Item = (&'a str, &'a ArrayD<f32>)>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensors_to(&mut w, path, tensors)
}

/// Stream form used by the checkpoint container.
pub fn write_tensors_to<'a>(
    w: &mut impl Write,
    path: &Path,
    tensors: impl Iterator<Item = (&'a str, &'a ArrayD<f32>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.collect();
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        let slice = tensor.as_slice().expect("standard layout");
        let mut bytes = Vec::with_capacity(slice.len() * 4);
        for &v in slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_tensors_from(&mut r, path)
}

/// Stream form used by the checkpoint container.
pub fn read_tensors_from(r: &mut impl Read, path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let bad = |reason: &str| Error::WeightArchive {
        path: path.into(),
        reason: reason.into(),
    };
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("bad magic; not a tensor archive"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        if name_len > 4096 {
            return Err(bad("tensor name longer than 4096 bytes"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(bad(&format!("tensor {name:?} has rank {rank} > 8")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let d = u32::from_le_bytes(u32buf) as usize;
            dims.push(d);
            len = len.checked_mul(d).ok_or_else(|| bad("dimension overflow"))?;
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|_| bad(&format!("truncated payload for {name:?}")))?;
        let mut values = Vec::with_capacity(len);
        for chunk in bytes.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length matches dims");
        out.push((name, tensor));
    }
    Ok(out)
}

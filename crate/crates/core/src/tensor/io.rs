//! Binary tensor container and named-tensor archive.
//!
//! Container layout: magic `LPTF`, version byte 0x01, dtype byte
//! (0x01 = little-endian IEEE-754 f64), rank as u32 LE, one u32 LE extent
//! per dimension, then the row-major payload.
//!
//! Archive layout: u32 LE entry count, then per entry a u32 LE name length,
//! the UTF-8 name, and an embedded tensor container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"LPTF";
const VERSION: u8 = 0x01;
const DTYPE_F64: u8 = 0x01;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F64])?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::BadContainer(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    if hdr[0] != VERSION {
        return Err(TensorError::BadContainer(format!("unsupported version {}", hdr[0])));
    }
    if hdr[1] != DTYPE_F64 {
        return Err(TensorError::BadContainer(format!("unsupported dtype {}", hdr[1])));
    }
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok(Tensor::new(shape, data))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Ordered name -> tensor map; BTreeMap keeps serialization deterministic.
pub type TensorArchive = BTreeMap<String, Tensor>;

pub fn write_archive<W: Write>(w: &mut W, archive: &TensorArchive) -> Result<(), TensorError> {
    w.write_all(&(archive.len() as u32).to_le_bytes())?;
    for (name, t) in archive {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<TensorArchive, TensorError> {
    let count = read_u32(r)? as usize;
    let mut archive = TensorArchive::new();
    for _ in 0..count {
        let nlen = read_u32(r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|e| TensorError::BadContainer(format!("non-UTF-8 entry name: {e}")))?;
        archive.insert(name, read_tensor(r)?);
    }
    Ok(archive)
}

pub fn save_archive(path: &Path, archive: &TensorArchive) -> Result<(), TensorError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_archive(&mut f, archive)?;
    f.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<TensorArchive, TensorError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_archive(&mut f)
}

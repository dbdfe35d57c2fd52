//! Binary weight files.
//!
//! Layout, all little-endian: magic `FWWT`, `u32` version (1), `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! trainable flag, a `u8` rank, `rank` `u32` extents and the `f32` values.
//! Tensors are written in lexicographic name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FWWT";
pub const VERSION: u32 = 1;

pub fn write_weights<W: Write>(params: &ParamSet<f32>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| TensorError::Format(format!("name `{name}` longer than 65535 bytes")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[p.trainable as u8, p.value.rank() as u8])?;
        for &d in p.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated while reading {what}")),
        _ => TensorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a weight stream. Every tensor is loaded with `uses = 1`.
pub fn read_weights<R: Read>(mut input: R) -> Result<ParamSet<f32>> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input, "version")?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input, "tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut input, &mut len, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut input, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Format("name is not UTF-8".into()))?;
        let mut flags = [0u8; 2];
        read_exact(&mut input, &mut flags, "flags")?;
        let trainable = match flags[0] {
            0 => false,
            1 => true,
            other => return Err(TensorError::Format(format!("`{name}`: bad trainable flag {other}"))),
        };
        let rank = flags[1] as usize;
        if !(1..=4).contains(&rank) {
            return Err(TensorError::Format(format!("`{name}`: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input, "extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        read_exact(&mut input, &mut raw, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| TensorError::Format(format!("`{name}`: {e}")))?;
        params
            .insert(name.clone(), tensor, trainable)
            .map_err(|_| TensorError::Format(format!("duplicate tensor `{name}`")))?;
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(TensorError::Format("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn save_weights(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ParamSet<f32>> {
    read_weights(BufReader::new(File::open(path)?))
}

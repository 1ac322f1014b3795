//! Versioned little-endian binary container for a trained model: the resolved
//! configuration and its hash, every parameter by name, and the context
//! memory including FIFO pointers.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use mnp_tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{MnpError, Result};
use crate::memory::ContextMemory;
use crate::model::Mnp;

const MAGIC: &[u8; 8] = b"MNPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> MnpError {
    MnpError::Checkpoint(msg.into())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LE>(b.len() as u64)?;
    w.write_all(b)
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_u32::<LE>(t.rank() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LE>(d as u64)?;
    }
    for &x in t.data() {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

/// Reads a length prefix and refuses lengths beyond what is left in the
/// buffer, so a corrupt file cannot trigger a huge allocation.
fn read_len(r: &mut Cursor<&[u8]>, unit: usize) -> Result<usize> {
    let n = r.read_u64::<LE>()? as usize;
    let left = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(unit).is_none_or(|b| b > left) {
        return Err(bad(format!("length {n} exceeds the remaining {left} bytes")));
    }
    Ok(n)
}

fn read_bytes(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let n = read_len(r, 1)?;
    let mut b = vec![0; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String> {
    String::from_utf8(read_bytes(r)?).map_err(|_| bad("invalid UTF-8 string"))
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<Tensor> {
    let rank = r.read_u32::<LE>()? as usize;
    if rank > 8 {
        return Err(bad(format!("tensor rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LE>()? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor size overflows"))?;
    let left = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(8).is_none_or(|b| b > left) {
        return Err(bad("tensor data is truncated"));
    }
    let mut data = vec![0.0; n];
    r.read_f64_into::<LE>(&mut data)?;
    Ok(Tensor::new(shape, data)?)
}

/// Serialises `model` together with the configuration that produced it.
pub fn to_bytes(config: &ExperimentConfig, model: &Mnp) -> Vec<u8> {
    let mut w = Vec::new();
    let io = (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        write_bytes(&mut w, config.to_json().as_bytes())?;
        write_bytes(&mut w, config.hash().as_bytes())?;
        w.write_u64::<LE>(model.num_classes() as u64)?;
        w.write_u32::<LE>(model.num_modalities() as u32)?;
        for &d in model.input_dims() {
            w.write_u64::<LE>(d as u64)?;
        }
        let params = model.params();
        w.write_u32::<LE>(params.len() as u32)?;
        for (name, value) in params.names().iter().zip(params.values()) {
            write_bytes(&mut w, name.as_bytes())?;
            write_tensor(&mut w, value)?;
        }
        let memory = model.memory();
        w.write_u64::<LE>(memory.per_class() as u64)?;
        for m in 0..memory.num_modalities() {
            write_tensor(&mut w, memory.features(m))?;
            for &p in &memory.fifo_pointers()[m] {
                w.write_u64::<LE>(p as u64)?;
            }
        }
        Ok(())
    })();
    io.expect("writing to a Vec cannot fail");
    w
}

/// Inverse of [`to_bytes`]. The stored hash must match the stored config.
pub fn from_bytes(bytes: &[u8]) -> Result<(ExperimentConfig, Mnp)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let config = ExperimentConfig::from_json(&read_string(&mut r)?)?;
    let hash = read_string(&mut r)?;
    if hash != config.hash() {
        return Err(bad("stored config hash does not match the stored config"));
    }
    let num_classes = r.read_u64::<LE>()? as usize;
    let modalities = r.read_u32::<LE>()? as usize;
    let mut dims = Vec::with_capacity(modalities.min(1024));
    for _ in 0..modalities {
        dims.push(r.read_u64::<LE>()? as usize);
    }
    let n_params = r.read_u32::<LE>()? as usize;
    let mut named = Vec::with_capacity(n_params.min(4096));
    for _ in 0..n_params {
        let name = read_string(&mut r)?;
        named.push((name, read_tensor(&mut r)?));
    }
    let per_class = r.read_u64::<LE>()? as usize;
    let mut slots = Vec::with_capacity(modalities);
    let mut fifo = Vec::with_capacity(modalities);
    for _ in 0..modalities {
        slots.push(read_tensor(&mut r)?);
        let mut ptrs = Vec::with_capacity(num_classes.min(1 << 16));
        for _ in 0..num_classes {
            ptrs.push(r.read_u64::<LE>()? as usize);
        }
        fifo.push(ptrs);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes after the memory block"));
    }
    let memory = ContextMemory::from_parts(num_classes, per_class, slots, fifo)?;
    let model = Mnp::from_parts(&config.model, &dims, num_classes, named, memory)?;
    Ok((config, model))
}

pub fn save(path: &Path, config: &ExperimentConfig, model: &Mnp) -> Result<()> {
    fs::write(path, to_bytes(config, model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, Mnp)> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

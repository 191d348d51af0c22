//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `EDKD`, format version u32, serialized [`ModelConfig`],
//! then per-tensor records (u32 name length, UTF-8 name, u32 rank, dims
//! as u64, f32 payload). The loader validates every shape against the
//! config.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::{self, ModelConfig, Parameters, ScaleMode};
use crate::scalar::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"EDKD";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_config(w: &mut impl Write, cfg: &ModelConfig) -> Result<()> {
    for v in [
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.d_model,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.vocab_size,
        cfg.max_positions,
    ] {
        write_u32(w, v as u32)?;
    }
    w.write_all(&[
        cfg.tie_output_embedding as u8,
        match cfg.scale_mode {
            ScaleMode::Sqrt => 0,
            ScaleMode::Linear => 1,
        },
    ])?;
    Ok(())
}

fn read_config(r: &mut impl Read) -> Result<ModelConfig> {
    let enc_layers = read_u32(r)? as usize;
    let dec_layers = read_u32(r)? as usize;
    let d_model = read_u32(r)? as usize;
    let num_heads = read_u32(r)? as usize;
    let ffn_dim = read_u32(r)? as usize;
    let vocab_size = read_u32(r)? as usize;
    let max_positions = read_u32(r)? as usize;
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags)?;
    let scale_mode = match flags[1] {
        0 => ScaleMode::Sqrt,
        1 => ScaleMode::Linear,
        x => return Err(Error::Checkpoint(format!("unknown scale mode byte {x}"))),
    };
    Ok(ModelConfig {
        enc_layers,
        dec_layers,
        d_model,
        num_heads,
        ffn_dim,
        vocab_size,
        max_positions,
        tie_output_embedding: flags[0] != 0,
        scale_mode,
    })
}

pub fn save<F: Scalar>(path: &Path, cfg: &ModelConfig, params: &Parameters<F>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_config(&mut w, cfg)?;
    write_u32(&mut w, params.len() as u32)?;
    for (name, t) in params.iter() {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape.len() as u32)?;
        for &d in &t.shape {
            write_u64(&mut w, d as u64)?;
        }
        for v in &t.data {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<(ModelConfig, Parameters<F>)> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = read_config(&mut r)?;
    let mut params = model::zeros::<F>(&cfg)?;
    let count = read_u32(&mut r)? as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {count} does not match config ({} expected)",
            params.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let expected = params.get(&name).shape.clone();
        if shape != expected {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, config requires {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;
        let t = params.get_mut(&name);
        t.data = payload
            .chunks_exact(4)
            .map(|b| F::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
    }
    Ok((cfg, params))
}

/// Hex SHA-256 of a file, used for chain provenance verification.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

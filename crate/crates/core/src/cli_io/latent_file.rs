//! `LVT1` binary latent files.
//!
//! Layout (little-endian): magic `LVT1`, u8 dtype tag (0 = f32), u32 rank
//! (always 4), four u32 dims `[N, C, H, W]`, then the row-major payload.

use std::path::Path;

use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"LVT1";
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 * 4;

pub fn encode_latents(video: &LatentVideo) -> Vec<u8> {
    let t = &video.z;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_latents(bytes: &[u8]) -> Result<LatentVideo> {
    let fmt = |m: String| Err(Error::Format(m));
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return fmt("bad magic, expected LVT1".into());
    }
    if bytes.len() < HEADER_LEN {
        return fmt(format!("truncated header: {} bytes", bytes.len()));
    }
    if bytes[4] != DTYPE_F32 {
        return fmt(format!("unsupported dtype tag {}", bytes[4]));
    }
    let rank = u32_at(bytes, 5);
    if rank != 4 {
        return fmt(format!("rank {rank}, expected 4"));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(bytes, 9 + 4 * i) as usize).collect();
    let payload = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return fmt(format!("truncated payload: {} of {payload} bytes", body.len()));
    }
    if body.len() > payload {
        return fmt(format!("{} trailing bytes after payload", body.len() - payload));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    LatentVideo::new(Tensor::new(dims, data)?)
}

pub fn save_latents(path: impl AsRef<Path>, video: &LatentVideo) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_latents(video)).map_err(|e| Error::io(path, e))
}

pub fn load_latents(path: impl AsRef<Path>) -> Result<LatentVideo> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latents(&bytes)
}

//! Binary 8-bit PGM (P5) frame dumps.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Min-max normalizes an `h × w` plane into a P5 image.
pub fn encode_pgm(plane: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if plane.len() != h * w {
        return Err(shape_err!("plane has {} values, expected {h}x{w}", plane.len()));
    }
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Writes channel 0 of every frame of `[N, C, H, W]` as
/// `frame_0000.pgm`, `frame_0001.pgm`, … inside `dir`.
pub fn dump_frames(dir: impl AsRef<Path>, z: &Tensor<f32>) -> Result<usize> {
    let dir = dir.as_ref();
    let [n, c, h, w] = z.dims4()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in 0..n {
        let start = f * c * h * w;
        let bytes = encode_pgm(&z.data()[start..start + h * w], h, w)?;
        let path = dir.join(format!("frame_{f:04}.pgm"));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(n)
}

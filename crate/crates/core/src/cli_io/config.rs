//! JSON run configuration and its resolution into engine parts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, Geometry, OracleDenoiser, ToyDenoiser, ToyDenoiserConfig};
use crate::diffusion::default_schedule;
use crate::error::{Error, Result};
use crate::numerics::MaskVariant;
use crate::scheduler::{synthetic_target, Conditions, EngineConfig, Policy, ShiftMode};

/// Chunk length the toy network's deep block count is calibrated at, so
/// every chunk length in a sweep runs the same network.
pub const CALIBRATION_CHUNK_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Oracle,
    Toy,
}

impl std::str::FromStr for DenoiserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(DenoiserKind::Oracle),
            "toy" => Ok(DenoiserKind::Toy),
            other => Err(Error::Config(format!("unknown denoiser {other:?}"))),
        }
    }
}

impl std::fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DenoiserKind::Oracle => "oracle",
            DenoiserKind::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDims {
    pub h: usize,
    pub w: usize,
}

impl Default for LatentDims {
    fn default() -> Self {
        Self { h: 16, w: 12 }
    }
}

/// Run configuration as read from JSON. Every key is optional.
///
/// | key | default |
/// |---|---|
/// | `n_total` | 144 |
/// | `chunk_len` | 16 |
/// | `policy` | `"shift"` |
/// | `overlap_s` | 4 |
/// | `delta` | 8 |
/// | `shift_mode` | `"random"` |
/// | `partial_fraction` | 0.5 |
/// | `mask_variant` | `"half"` |
/// | `staleness_cap` | 2 |
/// | `seed` | 0 |
/// | `ddim_steps` | 25 |
/// | `hard_skip` | false |
/// | `denoiser` | `"toy"` |
/// | `toy` | see [`ToyDenoiserConfig`] |
/// | `latent` | `{"h": 16, "w": 12}` |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub n_total: usize,
    pub chunk_len: usize,
    pub policy: Policy,
    pub overlap_s: usize,
    pub delta: usize,
    pub shift_mode: ShiftMode,
    pub partial_fraction: f64,
    pub mask_variant: MaskVariant,
    pub staleness_cap: usize,
    pub seed: u64,
    pub ddim_steps: usize,
    pub hard_skip: bool,
    pub denoiser: DenoiserKind,
    pub toy: ToyDenoiserConfig,
    pub latent: LatentDims,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from_engine(&EngineConfig::default())
    }
}

impl ConfigFile {
    pub fn from_engine(e: &EngineConfig) -> Self {
        Self {
            n_total: e.n_total,
            chunk_len: e.chunk_len,
            policy: e.policy,
            overlap_s: e.overlap_s,
            delta: e.delta,
            shift_mode: e.shift_mode,
            partial_fraction: e.partial_fraction,
            mask_variant: e.mask_variant,
            staleness_cap: e.staleness_cap,
            seed: e.seed,
            ddim_steps: e.ddim_steps,
            hard_skip: e.hard_skip,
            denoiser: DenoiserKind::Toy,
            toy: ToyDenoiserConfig::default(),
            latent: LatentDims::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.engine().validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            n_total: self.n_total,
            chunk_len: self.chunk_len,
            policy: self.policy,
            overlap_s: self.overlap_s,
            delta: self.delta,
            shift_mode: self.shift_mode,
            partial_fraction: self.partial_fraction,
            mask_variant: self.mask_variant,
            staleness_cap: self.staleness_cap,
            seed: self.seed,
            ddim_steps: self.ddim_steps,
            hard_skip: self.hard_skip,
        }
    }

    fn garment_grid(&self) -> [usize; 2] {
        [(self.latent.h / 2).max(1), (self.latent.w / 2).max(1)]
    }

    /// Builds conditions and the denoiser. The returned config has every
    /// derived value filled in (the toy deep block count in particular).
    pub fn resolve(&self) -> Result<Resolved> {
        let engine = self.engine();
        engine.validate()?;
        let LatentDims { h, w } = self.latent;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("latent dims {h}x{w} must be positive")));
        }
        let grid = self.garment_grid();
        let mut effective = self.clone();
        let (denoiser, garment_width): (Box<dyn Denoiser>, usize) = match self.denoiser {
            DenoiserKind::Oracle => {
                let target = synthetic_target(self.n_total, h, w, self.seed)?;
                (Box::new(OracleDenoiser::new(default_schedule(self.ddim_steps)?, target)?), 1)
            }
            DenoiserKind::Toy => {
                let geometry = Geometry {
                    height: h,
                    width: w,
                    chunk_len: CALIBRATION_CHUNK_LEN,
                    garment_tokens: grid[0] * grid[1],
                };
                let net = ToyDenoiser::new(self.toy.clone(), geometry)?;
                effective.toy = net.config().clone();
                let width = net.config().shallow_width;
                (Box::new(net), width)
            }
        };
        let conditions = Conditions::synthetic(self.n_total, h, w, grid, garment_width, self.seed)?;
        Ok(Resolved {
            config: effective,
            engine,
            denoiser,
            conditions,
        })
    }
}

/// A configuration turned into runnable parts.
pub struct Resolved {
    pub config: ConfigFile,
    pub engine: EngineConfig,
    pub denoiser: Box<dyn Denoiser>,
    pub conditions: Conditions,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ConfigFile::from_json("{}").unwrap();
        assert_eq!(c, ConfigFile::default());
        assert_eq!(c.engine(), EngineConfig::default());
        assert_eq!(c.latent, LatentDims { h: 16, w: 12 });
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ConfigFile::from_json(r#"{"n_totl": 10}"#).is_err());
        assert!(ConfigFile::from_json(r#"{"toy": {"width": 3}}"#).is_err());
        assert!(ConfigFile::from_json(r#"{"latent": {"h": 8, "w": 8, "c": 4}}"#).is_err());
    }

    #[test]
    fn enum_spellings() {
        let c = ConfigFile::from_json(
            r#"{"policy":"overlap","shift_mode":"fixed","mask_variant":"quarter","denoiser":"oracle"}"#,
        )
        .unwrap();
        assert_eq!(c.policy, Policy::Overlap);
        assert_eq!(c.shift_mode, ShiftMode::Fixed);
        assert_eq!(c.mask_variant, MaskVariant::Quarter);
        assert_eq!(c.denoiser, DenoiserKind::Oracle);
        assert!(ConfigFile::from_json(r#"{"policy":"Overlap"}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ConfigFile::from_json(r#"{"chunk_len": 4, "delta": 4}"#).is_err());
        assert!(ConfigFile::from_json(r#"{"partial_fraction": 1.5}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ConfigFile::from_json(r#"{"n_total": 40, "seed": 9, "toy": {"deep_blocks": 3}}"#).unwrap();
        assert_eq!(ConfigFile::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn resolve_fills_deep_blocks() {
        let c = ConfigFile::from_json(r#"{"n_total": 16, "chunk_len": 8, "delta": 3, "latent": {"h": 8, "w": 8}}"#)
            .unwrap();
        let r = c.resolve().unwrap();
        assert!(r.config.toy.deep_blocks > 0);
        assert_eq!(r.conditions.dims().unwrap(), (16, 8, 8));
        let o = ConfigFile {
            denoiser: DenoiserKind::Oracle,
            ..c
        };
        assert_eq!(o.resolve().unwrap().denoiser.name(), "oracle");
    }
}

//! Per-frame deep-feature cache and the masked temporal attention masks.

use serde::{Deserialize, Serialize};

use crate::denoiser::DeepFeatures;
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{AttentionMask, MaskVariant, Tensor};

/// Freshness class of a cached frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Freshness {
    /// Features from the previous sampling step (or the current one).
    Good,
    /// Features from two or more steps back.
    Bad,
}

impl Freshness {
    pub fn from_staleness(staleness: usize) -> Self {
        if staleness <= 1 {
            Freshness::Good
        } else {
            Freshness::Bad
        }
    }

    pub fn is_good(self) -> bool {
        self == Freshness::Good
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreshnessFlags(pub Vec<Freshness>);

impl FreshnessFlags {
    pub fn all_good(len: usize) -> Self {
        Self(vec![Freshness::Good; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Freshness] {
        &self.0
    }

    pub fn good_count(&self) -> usize {
        self.0.iter().filter(|f| f.is_good()).count()
    }
}

impl std::str::FromStr for FreshnessFlags {
    type Err = Error;

    /// Parses strings like `bbgg` or `b,b,g,g`.
    fn from_str(s: &str) -> Result<Self> {
        let flags = s
            .chars()
            .filter(|c| !matches!(c, ',' | ' '))
            .map(|c| match c {
                'g' | 'G' => Ok(Freshness::Good),
                'b' | 'B' => Ok(Freshness::Bad),
                other => Err(invalid!("freshness flag must be g or b, got {other:?}")),
            })
            .collect::<Result<Vec<_>>>()?;
        if flags.is_empty() {
            return Err(invalid!("empty freshness flags"));
        }
        Ok(Self(flags))
    }
}

/// Builds the temporal attention mask for a chunk.
///
/// Rows are queries and columns keys, both in chunk order. A variant that
/// would leave some row with no open key degrades to `Full` for the chunk.
pub fn build_mask(variant: MaskVariant, flags: &FreshnessFlags) -> Result<AttentionMask> {
    let n = flags.len();
    if n == 0 {
        return Err(invalid!("cannot build a mask for an empty chunk"));
    }
    let f = flags.as_slice();
    let rule: Box<dyn Fn(usize, usize) -> bool> = match variant {
        MaskVariant::Full => Box::new(|_, _| true),
        MaskVariant::Half => Box::new(|_, k| f[k].is_good()),
        MaskVariant::Quarter => Box::new(|q, k| !f[q].is_good() || f[k].is_good()),
        MaskVariant::Causal => Box::new(|q, k| k >= q),
    };
    let allowed: Vec<bool> = (0..n * n).map(|i| rule(i / n, i % n)).collect();
    match AttentionMask::from_allowed(n, allowed, variant) {
        Err(Error::BlockedRow { .. }) => AttentionMask::full(n),
        other => other,
    }
}

#[derive(Debug, Clone)]
struct Entry {
    feats: Tensor<f32>,
    computed_at: usize,
}

/// Deep-stage features per frame, tagged with the sampling position they
/// were computed at. Holds at most one entry per frame.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    slice_shape: Vec<usize>,
    entries: Vec<Option<Entry>>,
}

impl FeatureCache {
    /// `slice_shape` is the per-frame deep feature shape `[C_d, h, w]`.
    pub fn new(frames: usize, slice_shape: &[usize]) -> Self {
        Self {
            slice_shape: slice_shape.to_vec(),
            entries: vec![None; frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.entries.len()
    }

    pub fn slice_shape(&self) -> &[usize] {
        &self.slice_shape
    }

    pub fn computed_at(&self, frame: usize) -> Option<usize> {
        self.entries.get(frame)?.as_ref().map(|e| e.computed_at)
    }

    pub fn store(&mut self, frame: usize, feats: Tensor<f32>, step_index: usize) -> Result<()> {
        if feats.shape() != self.slice_shape.as_slice() {
            return Err(shape_err!(
                "cache slice {:?}, expected {:?}",
                feats.shape(),
                self.slice_shape
            ));
        }
        let frames = self.entries.len();
        let slot = self
            .entries
            .get_mut(frame)
            .ok_or_else(|| invalid!("frame {frame} outside cache of {frames} frames"))?;
        if let Some(prev) = slot {
            if prev.computed_at > step_index {
                return Err(invalid!(
                    "frame {frame}: write at step {step_index} after step {}",
                    prev.computed_at
                ));
            }
        }
        *slot = Some(Entry {
            feats,
            computed_at: step_index,
        });
        Ok(())
    }

    /// Stores every frame of a chunk's deep features, starting at `first_frame`.
    pub fn store_chunk(&mut self, first_frame: usize, deep: &DeepFeatures) -> Result<()> {
        let len = deep.feats.shape()[0];
        for i in 0..len {
            let slice = deep.feats.narrow0(i, 1)?.reshape(self.slice_shape.clone())?;
            self.store(first_frame + i, slice, deep.computed_at)?;
        }
        Ok(())
    }

    pub fn staleness(&self, frame: usize, current_step: usize) -> Result<usize> {
        let at = self
            .computed_at(frame)
            .ok_or(Error::CacheMiss { frame })?;
        current_step
            .checked_sub(at)
            .ok_or_else(|| invalid!("frame {frame} cached at step {at}, after {current_step}"))
    }

    /// Gathers cached features for `frames` in order, with their freshness.
    pub fn fetch(
        &self,
        frames: &[usize],
        current_step: usize,
        staleness_cap: usize,
    ) -> Result<(DeepFeatures, FreshnessFlags)> {
        if frames.is_empty() {
            return Err(invalid!("fetch of zero frames"));
        }
        let mut data = Vec::with_capacity(frames.len() * self.slice_shape.iter().product::<usize>());
        let mut flags = Vec::with_capacity(frames.len());
        let mut oldest = current_step;
        for &frame in frames {
            let staleness = self.staleness(frame, current_step)?;
            if staleness > staleness_cap {
                return Err(Error::Stale {
                    frame,
                    staleness,
                    cap: staleness_cap,
                });
            }
            let entry = self.entries[frame].as_ref().expect("checked by staleness");
            data.extend_from_slice(entry.feats.data());
            flags.push(Freshness::from_staleness(staleness));
            oldest = oldest.min(entry.computed_at);
        }
        let mut shape = vec![frames.len()];
        shape.extend_from_slice(&self.slice_shape);
        Ok((
            DeepFeatures {
                feats: Tensor::new(shape, data)?,
                computed_at: oldest,
            },
            FreshnessFlags(flags),
        ))
    }
}

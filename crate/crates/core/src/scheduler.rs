//! Chunk planning and the sampling loop.
//!
//! Two planners are provided: the overlapping-window baseline, whose
//! per-chunk noise predictions are averaged, and shifted non-overlapping
//! chunks whose boundaries rotate every sampling step. Shifted plans can
//! mark chunks for partial evaluation from the deep-feature cache.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::FeatureCache;
use crate::denoiser::{DeepFeatures, Denoiser, DenoiserInput, EvalCost, GarmentCondition};
use crate::diffusion::{
    ddim_step, default_schedule, seeded_noise, smooth_video, LatentVideo, LATENT_CHANNELS,
    TRAIN_STEPS,
};
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{MaskVariant, Tensor};

const OFFSET_STREAM_SALT: u64 = 0x5348_4946_545f_4f46;
const MARK_STREAM_SALT: u64 = 0x5041_5254_4941_4c5f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkMode {
    Full,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub len: usize,
    pub mode: ChunkMode,
}

impl Chunk {
    pub fn full(start: usize, len: usize) -> Self {
        Self {
            start,
            len,
            mode: ChunkMode::Full,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn frames(&self) -> Range<usize> {
        self.start..self.end()
    }

    pub fn is_partial(&self) -> bool {
        self.mode == ChunkMode::Partial
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Overlap,
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    Fixed,
    Random,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(Policy::Overlap),
            "shift" => Ok(Policy::Shift),
            other => Err(invalid!("unknown policy {other:?}")),
        }
    }
}

impl std::str::FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ShiftMode::Fixed),
            "random" => Ok(ShiftMode::Random),
            other => Err(invalid!("unknown shift mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Overlap => "overlap",
            Policy::Shift => "shift",
        })
    }
}

impl std::fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShiftMode::Fixed => "fixed",
            ShiftMode::Random => "random",
        })
    }
}

/// Policy parameters a plan was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanPolicy {
    Overlap { s: usize },
    Shift { delta: usize, mode: ShiftMode },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub step_index: usize,
    /// Boundary offset of a shifted plan, 0 for overlap plans.
    pub offset: usize,
    pub policy: PlanPolicy,
    pub chunks: Vec<Chunk>,
}

impl ChunkPlan {
    pub fn full_chunks(&self) -> usize {
        self.chunks.iter().filter(|c| !c.is_partial()).count()
    }

    pub fn partial_chunks(&self) -> usize {
        self.chunks.iter().filter(|c| c.is_partial()).count()
    }
}

/// Everything the sampling loop needs besides the denoiser and conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n_total: usize,
    pub chunk_len: usize,
    pub policy: Policy,
    pub overlap_s: usize,
    pub delta: usize,
    pub shift_mode: ShiftMode,
    /// Target share of frames evaluated partially. Only used by the shift
    /// policy; overlap runs always compute every chunk fully.
    pub partial_fraction: f64,
    pub mask_variant: MaskVariant,
    pub staleness_cap: usize,
    pub seed: u64,
    pub ddim_steps: usize,
    /// Ablation: reuse the previous step's noise prediction for chunks
    /// marked partial instead of running the shallow stages.
    pub hard_skip: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_total: 144,
            chunk_len: 16,
            policy: Policy::Shift,
            overlap_s: 4,
            delta: 8,
            shift_mode: ShiftMode::Random,
            partial_fraction: 0.5,
            mask_variant: MaskVariant::Half,
            staleness_cap: 2,
            seed: 0,
            ddim_steps: 25,
            hard_skip: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.chunk_len == 0 || self.chunk_len > self.n_total {
            return fail(format!(
                "need 1 <= chunk_len ({}) <= n_total ({})",
                self.chunk_len, self.n_total
            ));
        }
        if self.policy == Policy::Overlap && self.overlap_s >= self.chunk_len {
            return fail(format!("overlap_s {} must be < chunk_len {}", self.overlap_s, self.chunk_len));
        }
        if self.policy == Policy::Shift && self.delta >= self.chunk_len {
            return fail(format!("delta {} must be < chunk_len {}", self.delta, self.chunk_len));
        }
        if !(0.0..=1.0).contains(&self.partial_fraction) {
            return fail(format!("partial_fraction {} outside [0, 1]", self.partial_fraction));
        }
        if self.ddim_steps == 0 || self.ddim_steps > TRAIN_STEPS {
            return fail(format!("ddim_steps {} outside 1..={TRAIN_STEPS}", self.ddim_steps));
        }
        Ok(())
    }

    /// Partial fraction actually applied by the planner.
    pub fn effective_partial_fraction(&self) -> f64 {
        match self.policy {
            Policy::Overlap => 0.0,
            Policy::Shift => self.partial_fraction,
        }
    }
}

/// Number of windows the overlap planner emits.
pub fn overlap_chunk_count(n_total: usize, chunk_len: usize, s: usize) -> usize {
    if n_total <= chunk_len {
        1
    } else {
        1 + (n_total - chunk_len).div_ceil(chunk_len - s)
    }
}

/// Overlapping windows with stride `L − S`; the last one is truncated to
/// end at `n_total`, so consecutive windows always share exactly `S` frames.
pub fn plan_overlap(n_total: usize, chunk_len: usize, s: usize) -> Result<Vec<Chunk>> {
    if s >= chunk_len {
        return Err(invalid!("overlap {s} must be smaller than chunk length {chunk_len}"));
    }
    if chunk_len == 0 || chunk_len > n_total {
        return Err(invalid!("need 1 <= chunk length ({chunk_len}) <= frames ({n_total})"));
    }
    let stride = chunk_len - s;
    Ok((0..overlap_chunk_count(n_total, chunk_len, s))
        .map(|i| {
            let start = i * stride;
            Chunk::full(start, chunk_len.min(n_total - start))
        })
        .collect())
}

/// Boundary offset at step `k`.
pub fn shift_offset(chunk_len: usize, delta: usize, k: usize, mode: ShiftMode, seed: u64) -> usize {
    match mode {
        ShiftMode::Fixed => (k % chunk_len) * delta % chunk_len,
        ShiftMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ OFFSET_STREAM_SALT);
            rng.set_stream(k as u64);
            rng.gen_range(0..chunk_len)
        }
    }
}

/// Non-overlapping chunks with boundaries shifted by the step's offset `o`:
/// `[0, o)` when `o > 0`, then full-length chunks from `o`, then the
/// remainder.
pub fn plan_shift(
    n_total: usize,
    chunk_len: usize,
    delta: usize,
    k: usize,
    mode: ShiftMode,
    seed: u64,
) -> Result<Vec<Chunk>> {
    if delta >= chunk_len {
        return Err(invalid!("shift {delta} must be smaller than chunk length {chunk_len}"));
    }
    if chunk_len > n_total {
        return Err(invalid!("chunk length {chunk_len} exceeds {n_total} frames"));
    }
    let o = shift_offset(chunk_len, delta, k, mode, seed);
    let mut chunks = Vec::with_capacity(n_total / chunk_len + 2);
    if o > 0 {
        chunks.push(Chunk::full(0, o));
    }
    let mut start = o;
    while start < n_total {
        let len = chunk_len.min(n_total - start);
        chunks.push(Chunk::full(start, len));
        start += len;
    }
    Ok(chunks)
}

/// Outcome of partial-evaluation marking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MarkSummary {
    /// Chunks in steps other than the first and last.
    pub decisions: u64,
    pub partial: u64,
}

/// Marks chunks of shifted plans for partial evaluation.
///
/// The first and last steps are fully computed. Elsewhere a chunk is
/// eligible when it has full length and every frame has cached features
/// at most `staleness_cap` steps old. Eligible chunks are drawn
/// independently with probability `min(1, p · n_total / eligible_frames)`,
/// so that about a share `p` of each step's frames is evaluated partially
/// despite the chunks forced to full. Caches are refreshed only by full
/// chunks.
pub fn mark_partial(
    plans: &mut [ChunkPlan],
    n_total: usize,
    chunk_len: usize,
    p: f64,
    staleness_cap: usize,
    seed: u64,
) -> Result<MarkSummary> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid!("partial fraction {p} outside [0, 1]"));
    }
    let steps = plans.len();
    let mut computed_at: Vec<Option<usize>> = vec![None; n_total];
    let mut summary = MarkSummary::default();
    for (k, plan) in plans.iter_mut().enumerate() {
        let interior = k != 0 && k + 1 != steps;
        let eligible: Vec<bool> = plan
            .chunks
            .iter()
            .map(|c| {
                interior
                    && c.len == chunk_len
                    && c.frames()
                        .all(|f| computed_at[f].is_some_and(|at| k - at <= staleness_cap))
            })
            .collect();
        let eligible_frames = eligible.iter().filter(|&&e| e).count() * chunk_len;
        let q = if eligible_frames == 0 {
            0.0
        } else {
            (p * n_total as f64 / eligible_frames as f64).min(1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MARK_STREAM_SALT);
        rng.set_stream(k as u64);
        for (chunk, &ok) in plan.chunks.iter_mut().zip(&eligible) {
            let u: f64 = rng.gen();
            chunk.mode = if ok && u < q {
                ChunkMode::Partial
            } else {
                ChunkMode::Full
            };
            if interior {
                summary.decisions += 1;
            }
            match chunk.mode {
                ChunkMode::Partial => summary.partial += 1,
                ChunkMode::Full => chunk.frames().for_each(|f| computed_at[f] = Some(k)),
            }
        }
    }
    Ok(summary)
}

/// Plans for every sampling step of `config`, with partial marks applied.
pub fn build_plans(config: &EngineConfig) -> Result<(Vec<ChunkPlan>, MarkSummary)> {
    config.validate()?;
    let mut plans = (0..config.ddim_steps)
        .map(|k| {
            Ok(match config.policy {
                Policy::Overlap => ChunkPlan {
                    step_index: k,
                    offset: 0,
                    policy: PlanPolicy::Overlap { s: config.overlap_s },
                    chunks: plan_overlap(config.n_total, config.chunk_len, config.overlap_s)?,
                },
                Policy::Shift => ChunkPlan {
                    step_index: k,
                    offset: shift_offset(config.chunk_len, config.delta, k, config.shift_mode, config.seed),
                    policy: PlanPolicy::Shift {
                        delta: config.delta,
                        mode: config.shift_mode,
                    },
                    chunks: plan_shift(
                        config.n_total,
                        config.chunk_len,
                        config.delta,
                        k,
                        config.shift_mode,
                        config.seed,
                    )?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = match config.policy {
        Policy::Shift => mark_partial(
            &mut plans,
            config.n_total,
            config.chunk_len,
            config.partial_fraction,
            config.staleness_cap,
            config.seed,
        )?,
        Policy::Overlap => MarkSummary {
            decisions: plans
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != 0 && k + 1 != plans.len())
                .map(|(_, p)| p.chunks.len() as u64)
                .sum(),
            partial: 0,
        },
    };
    Ok((plans, summary))
}

/// Per-frame mean of the chunk predictions covering it.
pub fn aggregate_overlaps(per_chunk_eps: &[Tensor<f32>], plan: &[Chunk], n_total: usize) -> Result<Tensor<f32>> {
    if per_chunk_eps.len() != plan.len() || plan.is_empty() {
        return Err(invalid!(
            "{} predictions for {} chunks",
            per_chunk_eps.len(),
            plan.len()
        ));
    }
    let [_, c, h, w] = per_chunk_eps[0].dims4()?;
    let frame = c * h * w;
    let mut sum = vec![0f64; n_total * frame];
    let mut count = vec![0u32; n_total];
    for (eps, chunk) in per_chunk_eps.iter().zip(plan) {
        if eps.shape() != [chunk.len, c, h, w] {
            return Err(shape_err!(
                "chunk at {} predicted {:?}, expected {:?}",
                chunk.start,
                eps.shape(),
                [chunk.len, c, h, w]
            ));
        }
        if chunk.end() > n_total {
            return Err(invalid!("chunk {:?} exceeds {n_total} frames", chunk.frames()));
        }
        for (i, f) in chunk.frames().enumerate() {
            let src = &eps.data()[i * frame..(i + 1) * frame];
            sum[f * frame..(f + 1) * frame]
                .iter_mut()
                .zip(src)
                .for_each(|(s, &v)| *s += v as f64);
            count[f] += 1;
        }
    }
    if let Some(f) = count.iter().position(|&n| n == 0) {
        return Err(invalid!("frame {f} is not covered by any chunk"));
    }
    let data = sum
        .chunks_exact(frame)
        .zip(&count)
        .flat_map(|(s, &n)| s.iter().map(move |v| (v / n as f64) as f32))
        .collect();
    Tensor::new([n_total, c, h, w], data)
}

/// Per-frame conditioning for a whole video plus the initial noise.
#[derive(Debug, Clone)]
pub struct Conditions {
    pub init_noise: Tensor<f32>,
    pub masked_video: Tensor<f32>,
    /// Binary garment region, `[N, 1, H, W]`.
    pub mask: Tensor<f32>,
    pub pose: Tensor<f32>,
    pub garment: GarmentCondition,
}

impl Conditions {
    /// Seeded smooth video, a drifting rectangular garment mask, smooth pose
    /// maps, and a synthetic garment feature map.
    pub fn synthetic(
        n: usize,
        h: usize,
        w: usize,
        garment_grid: [usize; 2],
        garment_width: usize,
        seed: u64,
    ) -> Result<Self> {
        let video = smooth_video(n, LATENT_CHANNELS, h, w, seed.wrapping_add(1))?;
        let mask = Tensor::from_fn([n, 1, h, w], |i| {
            let (x, y, f) = (i % w, (i / w) % h, i / (w * h));
            let centre = w as f64 / 2.0 + (w as f64 / 8.0) * (0.2 * f as f64).sin();
            let inside_x = (x as f64 + 0.5 - centre).abs() < w as f64 / 4.0;
            let inside_y = y >= h / 4 && y < h - h / 4;
            if inside_x && inside_y {
                1.0
            } else {
                0.0
            }
        })?;
        let plane = h * w;
        let masked_video = Tensor::from_fn([n, LATENT_CHANNELS, h, w], |i| {
            let f = i / (LATENT_CHANNELS * plane);
            video.data()[i] * (1.0 - mask.data()[f * plane + i % plane])
        })?;
        let pose = smooth_video(n, LATENT_CHANNELS, h, w, seed.wrapping_add(2))?.map(|v| 0.5 * v);
        Ok(Self {
            init_noise: seeded_noise(&[n, LATENT_CHANNELS, h, w], seed)?,
            masked_video,
            mask,
            pose,
            garment: GarmentCondition::synthetic(garment_grid, garment_width, seed.wrapping_add(3)),
        })
    }

    /// `(N, H, W)` after checking every tensor agrees.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let [n, c, h, w] = self.init_noise.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(shape_err!("initial noise has {c} channels"));
        }
        for (t, ch, what) in [
            (&self.masked_video, LATENT_CHANNELS, "masked video"),
            (&self.mask, 1, "mask"),
            (&self.pose, LATENT_CHANNELS, "pose"),
        ] {
            if t.shape() != [n, ch, h, w] {
                return Err(shape_err!("{what} is {:?}, expected {:?}", t.shape(), [n, ch, h, w]));
            }
        }
        Ok((n, h, w))
    }

    fn chunk_input(&self, z: &Tensor<f32>, chunk: &Chunk, step_index: usize, timestep: usize) -> Result<DenoiserInput> {
        Ok(DenoiserInput {
            noise_latent: z.narrow0(chunk.start, chunk.len)?,
            masked_video_latent: self.masked_video.narrow0(chunk.start, chunk.len)?,
            binary_mask: self.mask.narrow0(chunk.start, chunk.len)?,
            pose_features: self.pose.narrow0(chunk.start, chunk.len)?,
            step_index,
            timestep,
            frame_offsets: chunk.frames().collect(),
        })
    }
}

/// Clean latent video used as the oracle's target for synthetic runs.
pub fn synthetic_target(n: usize, h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    smooth_video(n, LATENT_CHANNELS, h, w, seed.wrapping_add(4))
}

/// Counters and traces of one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunStats {
    pub n_total: usize,
    pub chunk_len: usize,
    pub steps: usize,
    pub full_chunk_evals: u64,
    pub partial_chunk_evals: u64,
    /// Partial chunks answered by reusing the previous prediction.
    pub skipped_chunks: u64,
    pub full_frame_evals: u64,
    pub partial_frame_evals: u64,
    pub deep_flops: u64,
    pub shallow_flops: u64,
    /// Chunk length → `[full, partial]` evaluation counts.
    pub evals_by_len: BTreeMap<usize, [u64; 2]>,
    /// Chunks in steps where partial evaluation could be chosen.
    pub decision_chunks: u64,
    pub cache_writes: u64,
    /// DDIM updates received by every frame.
    pub frame_updates: Vec<u32>,
    /// `[step][frame]` staleness of the deep features used (0 when computed).
    pub freshness_trace: Vec<Vec<u8>>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunStats {
    /// Partial chunks over chunk decisions.
    pub fn partial_fraction(&self) -> f64 {
        if self.decision_chunks == 0 {
            0.0
        } else {
            (self.partial_chunk_evals + self.skipped_chunks) as f64 / self.decision_chunks as f64
        }
    }

    pub fn max_staleness(&self) -> u8 {
        self.freshness_trace.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn total_flops(&self) -> u64 {
        self.deep_flops + self.shallow_flops
    }

    pub fn wall_ms(&self) -> f64 {
        self.wall_time.as_secs_f64() * 1e3
    }

    fn record(&mut self, chunk: &Chunk, kind: EvalKind, cost: EvalCost) {
        let slot = self.evals_by_len.entry(chunk.len).or_default();
        match kind {
            EvalKind::Full => {
                self.full_chunk_evals += 1;
                self.full_frame_evals += chunk.len as u64;
                slot[0] += 1;
            }
            EvalKind::Partial => {
                self.partial_chunk_evals += 1;
                self.partial_frame_evals += chunk.len as u64;
                slot[1] += 1;
            }
            EvalKind::Skipped => self.skipped_chunks += 1,
        }
        self.deep_flops += cost.deep_flops;
        self.shallow_flops += cost.shallow_flops;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EvalKind {
    Full,
    Partial,
    Skipped,
}

struct ChunkOutcome {
    eps: Tensor<f32>,
    deep: Option<DeepFeatures>,
    cost: EvalCost,
    kind: EvalKind,
    staleness: Vec<u8>,
}

struct StepContext<'a> {
    config: &'a EngineConfig,
    denoiser: &'a dyn Denoiser,
    conditions: &'a Conditions,
    cache: Option<&'a FeatureCache>,
    last_eps: Option<&'a Tensor<f32>>,
    z: &'a Tensor<f32>,
    step_index: usize,
    timestep: usize,
}

fn evaluate_chunk(ctx: &StepContext<'_>, chunk: &Chunk) -> Result<ChunkOutcome> {
    if chunk.mode == ChunkMode::Partial && ctx.config.hard_skip {
        let prev = ctx
            .last_eps
            .ok_or_else(|| invalid!("hard skip at step {} without a previous prediction", ctx.step_index))?;
        return Ok(ChunkOutcome {
            eps: prev.narrow0(chunk.start, chunk.len)?,
            deep: None,
            cost: EvalCost::default(),
            kind: EvalKind::Skipped,
            staleness: vec![0; chunk.len],
        });
    }
    let input = ctx
        .conditions
        .chunk_input(ctx.z, chunk, ctx.step_index, ctx.timestep)?;
    match chunk.mode {
        ChunkMode::Full => {
            let out = ctx.denoiser.denoise_full(&input, &ctx.conditions.garment, None)?;
            Ok(ChunkOutcome {
                eps: out.eps,
                deep: Some(out.deep),
                cost: out.cost,
                kind: EvalKind::Full,
                staleness: vec![0; chunk.len],
            })
        }
        ChunkMode::Partial => {
            let cache = ctx.cache.ok_or(Error::CacheMiss { frame: chunk.start })?;
            let frames: Vec<usize> = chunk.frames().collect();
            let (cached, flags) = cache.fetch(&frames, ctx.step_index, ctx.config.staleness_cap)?;
            let staleness = frames
                .iter()
                .map(|&f| cache.staleness(f, ctx.step_index).map(|s| s.min(u8::MAX as usize) as u8))
                .collect::<Result<Vec<_>>>()?;
            let out = ctx.denoiser.denoise_partial(
                &input,
                &ctx.conditions.garment,
                &cached,
                &flags,
                ctx.config.mask_variant,
            )?;
            Ok(ChunkOutcome {
                eps: out.eps,
                deep: None,
                cost: out.cost,
                kind: EvalKind::Partial,
                staleness,
            })
        }
    }
}

/// Runs every sampling step and returns the final latents with run stats.
///
/// Chunks of a step are evaluated in parallel on the current rayon pool;
/// their results, cache writes and counters are committed in chunk order,
/// so the outcome does not depend on the number of workers.
pub fn run_inference(
    config: &EngineConfig,
    denoiser: &dyn Denoiser,
    conditions: &Conditions,
) -> Result<(LatentVideo, RunStats)> {
    let started = Instant::now();
    let (n, h, w) = conditions.dims()?;
    if n != config.n_total {
        return Err(Error::Config(format!(
            "conditions have {n} frames, config says {}",
            config.n_total
        )));
    }
    let schedule = default_schedule(config.ddim_steps)?;
    let (plans, summary) = build_plans(config)?;
    let needs_cache = !config.hard_skip && summary.partial > 0;
    let mut cache = needs_cache.then(|| FeatureCache::new(n, &denoiser.deep_slice_shape(h, w)));

    let mut stats = RunStats {
        n_total: n,
        chunk_len: config.chunk_len,
        steps: plans.len(),
        decision_chunks: summary.decisions,
        frame_updates: vec![0; n],
        ..Default::default()
    };
    let mut z = conditions.init_noise.clone();
    let mut freshness: Vec<Option<usize>> = vec![None; n];
    let mut last_eps: Option<Tensor<f32>> = None;

    for plan in &plans {
        let ctx = StepContext {
            config,
            denoiser,
            conditions,
            cache: cache.as_ref(),
            last_eps: last_eps.as_ref(),
            z: &z,
            step_index: plan.step_index,
            timestep: schedule.timestep(plan.step_index)?,
        };
        let outcomes: Vec<Result<ChunkOutcome>> =
            plan.chunks.par_iter().map(|c| evaluate_chunk(&ctx, c)).collect();

        let mut trace = vec![0u8; n];
        let mut eps_parts = Vec::with_capacity(plan.chunks.len());
        for (chunk, outcome) in plan.chunks.iter().zip(outcomes) {
            let outcome = outcome?;
            stats.record(chunk, outcome.kind, outcome.cost);
            for (f, s) in chunk.frames().zip(&outcome.staleness) {
                trace[f] = trace[f].max(*s);
            }
            if let Some(deep) = &outcome.deep {
                chunk.frames().for_each(|f| freshness[f] = Some(plan.step_index));
                if let Some(cache) = cache.as_mut() {
                    cache.store_chunk(chunk.start, deep)?;
                    stats.cache_writes += chunk.len as u64;
                }
            }
            eps_parts.push(outcome.eps);
        }

        let eps = match config.policy {
            Policy::Overlap => aggregate_overlaps(&eps_parts, &plan.chunks, n)?,
            Policy::Shift => Tensor::cat0(&eps_parts.iter().collect::<Vec<_>>())?,
        };
        if eps.shape()[0] != n {
            return Err(shape_err!("step {} produced {} frames", plan.step_index, eps.shape()[0]));
        }
        let mut covered = vec![false; n];
        plan.chunks
            .iter()
            .flat_map(|c| c.frames())
            .for_each(|f| covered[f] = true);
        for (u, c) in stats.frame_updates.iter_mut().zip(&covered) {
            *u += *c as u32;
        }
        z = ddim_step(&z, &eps, plan.step_index, &schedule)?;
        stats.freshness_trace.push(trace);
        last_eps = Some(eps);
    }

    if !z.all_finite() {
        return Err(Error::NonFinite("final latents"));
    }
    stats.wall_time = started.elapsed();
    Ok((LatentVideo { z, freshness }, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;
    use crate::diffusion::default_schedule;
    use proptest::prelude::*;

    fn spans(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| (c.start, c.end())).collect()
    }

    #[test]
    fn overlap_starts_and_counts() {
        assert_eq!(spans(&plan_overlap(32, 16, 8).unwrap()), vec![(0, 16), (8, 24), (16, 32)]);
        let counts: Vec<usize> = [0, 4, 8, 15]
            .iter()
            .map(|&s| plan_overlap(144, 16, s).unwrap().len())
            .collect();
        assert_eq!(counts, vec![9, 12, 17, 129]);
        assert!(plan_overlap(10, 16, 0).is_err());
        assert_eq!(spans(&plan_overlap(40, 16, 4).unwrap()), vec![(0, 16), (12, 28), (24, 40)]);
        assert_eq!(spans(&plan_overlap(42, 16, 4).unwrap()), vec![(0, 16), (12, 28), (24, 40), (36, 42)]);
        assert_eq!(plan_overlap(16, 16, 4).unwrap().len(), 1);
        assert!(plan_overlap(32, 16, 16).is_err());
    }

    #[test]
    fn shift_enumeration() {
        let p0 = plan_shift(12, 4, 2, 0, ShiftMode::Fixed, 0).unwrap();
        assert_eq!(spans(&p0), vec![(0, 4), (4, 8), (8, 12)]);
        let p1 = plan_shift(12, 4, 2, 1, ShiftMode::Fixed, 0).unwrap();
        assert_eq!(spans(&p1), vec![(0, 2), (2, 6), (6, 10), (10, 12)]);
        assert!(plan_shift(12, 4, 4, 0, ShiftMode::Fixed, 0).is_err());
    }

    #[test]
    fn zero_shift_equals_disjoint_overlap() {
        for k in 0..5 {
            assert_eq!(
                plan_shift(50, 8, 0, k, ShiftMode::Fixed, 1).unwrap(),
                plan_overlap(50, 8, 0).unwrap()
            );
        }
    }

    #[test]
    fn random_offsets_are_seeded_and_cover_range() {
        let a: Vec<usize> = (0..200).map(|k| shift_offset(16, 0, k, ShiftMode::Random, 7)).collect();
        let b: Vec<usize> = (0..200).map(|k| shift_offset(16, 0, k, ShiftMode::Random, 7)).collect();
        assert_eq!(a, b);
        let mut seen = [false; 16];
        a.iter().for_each(|&o| seen[o] = true);
        assert!(seen.iter().all(|&s| s));
    }

    fn shift_plans(n: usize, l: usize, delta: usize, steps: usize, mode: ShiftMode) -> Vec<ChunkPlan> {
        (0..steps)
            .map(|k| ChunkPlan {
                step_index: k,
                offset: shift_offset(l, delta, k, mode, 3),
                policy: PlanPolicy::Shift { delta, mode },
                chunks: plan_shift(n, l, delta, k, mode, 3).unwrap(),
            })
            .collect()
    }

    /// Replays plans and returns the staleness each partial frame saw.
    fn replay(plans: &[ChunkPlan], n: usize) -> Vec<usize> {
        let mut at: Vec<Option<usize>> = vec![None; n];
        let mut seen = Vec::new();
        for (k, plan) in plans.iter().enumerate() {
            for c in &plan.chunks {
                if c.is_partial() {
                    seen.extend(c.frames().map(|f| k - at[f].expect("cached")));
                } else {
                    c.frames().for_each(|f| at[f] = Some(k));
                }
            }
        }
        seen
    }

    #[test]
    fn p_zero_marks_nothing() {
        let mut plans = shift_plans(144, 16, 8, 25, ShiftMode::Fixed);
        let s = mark_partial(&mut plans, 144, 16, 0.0, 2, 1).unwrap();
        assert_eq!(s.partial, 0);
        assert!(plans.iter().all(|p| p.partial_chunks() == 0));
    }

    #[test]
    fn p_one_respects_cap() {
        let mut plans = shift_plans(144, 16, 0, 25, ShiftMode::Fixed);
        mark_partial(&mut plans, 144, 16, 1.0, 2, 1).unwrap();
        let seen = replay(&plans, 144);
        assert!(!seen.is_empty());
        assert!(seen.iter().all(|&s| (1..=2).contains(&s)));
        // With no shift every frame cycles full, partial, partial.
        let modes: Vec<bool> = plans.iter().map(|p| p.chunks[0].is_partial()).collect();
        assert_eq!(&modes[..7], &[false, true, true, false, true, true, false]);
        assert!(!modes[24]);
    }

    #[test]
    fn first_and_last_steps_are_full() {
        let mut plans = shift_plans(64, 8, 3, 10, ShiftMode::Random);
        mark_partial(&mut plans, 64, 8, 1.0, 2, 5).unwrap();
        assert_eq!(plans[0].partial_chunks(), 0);
        assert_eq!(plans[9].partial_chunks(), 0);
        assert!(plans.iter().flat_map(|p| &p.chunks).all(|c| !c.is_partial() || c.len == 8));
    }

    #[test]
    fn half_fraction_is_realised() {
        let mut plans = shift_plans(144, 16, 0, 25, ShiftMode::Fixed);
        let s = mark_partial(&mut plans, 144, 16, 0.5, 2, 11).unwrap();
        assert!(s.decisions >= 200);
        let frac = s.partial as f64 / s.decisions as f64;
        assert!((frac - 0.5).abs() <= 0.1, "realised {frac}");
    }

    #[test]
    fn deep_work_falls_with_p() {
        let mean_full = |p: f64| {
            (0..10)
                .map(|seed| {
                    let mut plans = shift_plans(144, 16, 8, 25, ShiftMode::Random);
                    mark_partial(&mut plans, 144, 16, p, 2, seed).unwrap();
                    plans.iter().map(|pl| pl.full_chunks()).sum::<usize>() as f64
                })
                .sum::<f64>()
                / 10.0
        };
        let costs: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&p| mean_full(p)).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{costs:?}");
    }

    #[test]
    fn aggregate_means() {
        let plan = vec![Chunk::full(0, 2), Chunk::full(1, 2), Chunk::full(1, 1)];
        let t = |v: [f32; 2]| Tensor::from_fn([2, 1, 1, 1], |i| v[i]).unwrap();
        let eps = vec![t([5.0, 0.0]), t([1.0, 7.0]), Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap()];
        let out = aggregate_overlaps(&eps, &plan, 3).unwrap();
        assert_eq!(out.data(), &[5.0, 1.0, 7.0]);
        let gap = vec![Chunk::full(0, 1)];
        assert!(aggregate_overlaps(&[Tensor::zeros([1, 1, 1, 1]).unwrap()], &gap, 2).is_err());
    }

    #[test]
    fn aggregate_is_order_independent() {
        let a = seeded_noise::<f32>(&[3, 2, 2, 2], 1).unwrap();
        let b = seeded_noise::<f32>(&[3, 2, 2, 2], 2).unwrap();
        let c = seeded_noise::<f32>(&[3, 2, 2, 2], 3).unwrap();
        let plan = vec![Chunk::full(0, 3); 3];
        let abc = aggregate_overlaps(&[a.clone(), b.clone(), c.clone()], &plan, 3).unwrap();
        let cab = aggregate_overlaps(&[c.clone(), a.clone(), b.clone()], &plan, 3).unwrap();
        assert!(abc.max_abs_diff(&cab).unwrap() <= 1e-7);
        let want = a.zip_map(&b, |x, y| x + y).unwrap().zip_map(&c, |s, z| (s + z) / 3.0).unwrap();
        assert!(abc.max_abs_diff(&want).unwrap() < 1e-6);
    }

    fn oracle_run(config: &EngineConfig) -> (LatentVideo, RunStats, Tensor<f32>) {
        let cond = Conditions::synthetic(config.n_total, 4, 4, [2, 2], 4, config.seed).unwrap();
        let target = synthetic_target(config.n_total, 4, 4, config.seed).unwrap();
        let oracle = OracleDenoiser::new(default_schedule(config.ddim_steps).unwrap(), target.clone()).unwrap();
        let (video, stats) = run_inference(config, &oracle, &cond).unwrap();
        (video, stats, target)
    }

    #[test]
    fn oracle_recovers_target_with_partials() {
        let config = EngineConfig {
            n_total: 40,
            chunk_len: 8,
            delta: 3,
            shift_mode: ShiftMode::Fixed,
            partial_fraction: 0.5,
            ddim_steps: 12,
            ..Default::default()
        };
        let (video, stats, target) = oracle_run(&config);
        assert!(video.z.max_abs_diff(&target).unwrap() <= 1e-4);
        assert!(stats.partial_chunk_evals > 0);
        assert!(stats.max_staleness() <= 2);
        assert!(stats.frame_updates.iter().all(|&u| u == 12));
        assert!(stats.cache_writes > 0);
    }

    #[test]
    fn hard_skip_spends_no_flops_on_skipped_chunks() {
        let config = EngineConfig {
            n_total: 32,
            chunk_len: 8,
            delta: 3,
            partial_fraction: 0.5,
            ddim_steps: 8,
            hard_skip: true,
            ..Default::default()
        };
        let (_, stats, _) = oracle_run(&config);
        assert!(stats.skipped_chunks > 0);
        assert_eq!(stats.partial_chunk_evals, 0);
        assert_eq!(stats.cache_writes, 0);
    }

    #[test]
    fn config_validation() {
        let ok = EngineConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            EngineConfig { chunk_len: 200, ..ok.clone() },
            EngineConfig { policy: Policy::Overlap, overlap_s: 16, ..ok.clone() },
            EngineConfig { delta: 16, ..ok.clone() },
            EngineConfig { partial_fraction: 1.5, ..ok.clone() },
            EngineConfig { ddim_steps: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(EngineConfig { overlap_s: 16, ..ok.clone() }.validate().is_ok());
        assert!(EngineConfig { policy: Policy::Overlap, delta: 16, ..ok }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn shift_plans_partition(n in 1usize..200, l in 1usize..40, d in 0usize..40, k in 0usize..100, random: bool, seed: u64) {
            prop_assume!(l <= n && d < l);
            let mode = if random { ShiftMode::Random } else { ShiftMode::Fixed };
            let plan = plan_shift(n, l, d, k, mode, seed).unwrap();
            let mut next = 0;
            for c in &plan {
                prop_assert_eq!(c.start, next);
                prop_assert!(c.len >= 1 && c.len <= l);
                next = c.end();
            }
            prop_assert_eq!(next, n);
        }

        #[test]
        fn overlap_plans_cover(n in 1usize..200, l in 1usize..40, s in 0usize..40) {
            prop_assume!(l <= n && s < l);
            let plan = plan_overlap(n, l, s).unwrap();
            prop_assert_eq!(plan.len(), overlap_chunk_count(n, l, s));
            prop_assert_eq!(plan[0].start, 0);
            prop_assert_eq!(plan.last().unwrap().end(), n);
            for pair in plan.windows(2) {
                prop_assert_eq!(pair[0].end() - pair[1].start, s);
                prop_assert!(pair[1].end() > pair[0].end());
            }
        }

        #[test]
        fn marking_never_exceeds_cap(n in 8usize..80, l in 2usize..12, d in 0usize..12, p in 0.0f64..=1.0, cap in 0usize..4, random: bool, seed: u64) {
            prop_assume!(l <= n && d < l);
            let mode = if random { ShiftMode::Random } else { ShiftMode::Fixed };
            let mut plans = shift_plans(n, l, d, 12, mode);
            mark_partial(&mut plans, n, l, p, cap, seed).unwrap();
            for s in replay(&plans, n) {
                prop_assert!(s >= 1 && s <= cap);
            }
        }
    }
}

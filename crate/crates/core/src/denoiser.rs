//! Denoiser interface, the analytic oracle denoiser, and a small seeded
//! latent denoiser with a cacheable deep stage.
//!
//! The toy network runs `shallow-in → deep → shallow-out`. The deep stage
//! works at half spatial resolution and its output is what partial
//! evaluation replaces with cached features. Each block is reference
//! spatial attention (garment tokens appended to keys and values), then
//! temporal attention over the `(H·W) × L × C` view with sinusoidal frame
//! encodings, then a pointwise MLP.

use std::ops::{Add, AddAssign};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::{build_mask, FreshnessFlags};
use crate::diffusion::{oracle_eps, NoiseSchedule, LATENT_CHANNELS, TRAIN_STEPS};
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{attend, sinusoidal_encoding, AttentionMask, AttentionScratch, MaskVariant, Tensor};

/// Channels fed to the denoiser: noise(4) | masked video(4) | mask(1) | pose(4).
pub const INPUT_CHANNELS: usize = 13;

/// Inputs for one chunk of frames.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    pub noise_latent: Tensor<f32>,
    pub masked_video_latent: Tensor<f32>,
    pub binary_mask: Tensor<f32>,
    pub pose_features: Tensor<f32>,
    pub step_index: usize,
    /// Training timestep of `step_index`, used for the time embedding.
    pub timestep: usize,
    /// Absolute frame index of every chunk position.
    pub frame_offsets: Vec<usize>,
}

impl DenoiserInput {
    pub fn len(&self) -> usize {
        self.frame_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_offsets.is_empty()
    }

    /// `(H, W)` of the latent frames.
    pub fn spatial(&self) -> (usize, usize) {
        let s = self.noise_latent.shape();
        (s[2], s[3])
    }

    pub fn assemble(&self) -> Result<Tensor<f32>> {
        if self.noise_latent.shape()[0] != self.frame_offsets.len() {
            return Err(shape_err!(
                "{} frame offsets for {} frames",
                self.frame_offsets.len(),
                self.noise_latent.shape()[0]
            ));
        }
        assemble_input(
            &self.noise_latent,
            &self.masked_video_latent,
            &self.binary_mask,
            &self.pose_features,
        )
    }
}

/// Concatenates the conditioning channels in the fixed order
/// `[noise(4) | masked_video(4) | mask(1) | pose(4)]`.
pub fn assemble_input(
    noise: &Tensor<f32>,
    masked_video: &Tensor<f32>,
    mask: &Tensor<f32>,
    pose: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let [l, c, h, w] = noise.dims4()?;
    let expect = |t: &Tensor<f32>, ch: usize, what: &str| -> Result<()> {
        if t.shape() != [l, ch, h, w] {
            return Err(shape_err!(
                "{what} is {:?}, expected {:?}",
                t.shape(),
                [l, ch, h, w]
            ));
        }
        Ok(())
    };
    expect(noise, LATENT_CHANNELS, "noise latent")?;
    let _ = c;
    expect(masked_video, LATENT_CHANNELS, "masked video latent")?;
    expect(mask, 1, "binary mask")?;
    expect(pose, LATENT_CHANNELS, "pose features")?;
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(invalid!("binary mask values must be 0 or 1"));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(l * INPUT_CHANNELS * plane);
    for i in 0..l {
        for (t, ch) in [
            (noise, LATENT_CHANNELS),
            (masked_video, LATENT_CHANNELS),
            (mask, 1),
            (pose, LATENT_CHANNELS),
        ] {
            out.extend_from_slice(&t.data()[i * ch * plane..(i + 1) * ch * plane]);
        }
    }
    Tensor::new([l, INPUT_CHANNELS, h, w], out)
}

/// Garment feature tokens used as extra keys and values by reference
/// attention. `tokens` is a flattened `grid[0] × grid[1]` map of `width`
/// channels; an empty grid disables reference attention.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentCondition {
    tokens: Vec<f32>,
    grid: [usize; 2],
    width: usize,
}

impl GarmentCondition {
    pub fn new(tokens: Vec<f32>, grid: [usize; 2], width: usize) -> Result<Self> {
        if tokens.len() != grid[0] * grid[1] * width {
            return Err(shape_err!(
                "garment grid {grid:?} x {width} needs {} values, got {}",
                grid[0] * grid[1] * width,
                tokens.len()
            ));
        }
        Ok(Self { tokens, grid, width })
    }

    pub fn from_tensor(tokens: &Tensor<f32>) -> Result<Self> {
        match *tokens.shape() {
            [m, c] => Self::new(tokens.data().to_vec(), [m, 1], c),
            _ => Err(shape_err!("garment tokens must be [M, C], got {:?}", tokens.shape())),
        }
    }

    pub fn empty(width: usize) -> Self {
        Self {
            tokens: Vec::new(),
            grid: [0, 0],
            width,
        }
    }

    /// Seeded smooth garment feature map.
    pub fn synthetic(grid: [usize; 2], width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
        let phases: Vec<(f32, f32, f32)> = (0..width)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let c: f64 = StandardNormal.sample(&mut rng);
                (a as f32, b as f32, c as f32)
            })
            .collect();
        let mut tokens = Vec::with_capacity(grid[0] * grid[1] * width);
        for y in 0..grid[0] {
            for x in 0..grid[1] {
                for &(a, b, c) in &phases {
                    tokens.push((0.7 * a * y as f32 + b).sin() * (0.5 * c * x as f32 + a).cos());
                }
            }
        }
        Self {
            tokens,
            grid,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> [usize; 2] {
        self.grid
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }
}

/// Output of the deep stage for a chunk: `[L, C_d, H/2, W/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFeatures {
    pub feats: Tensor<f32>,
    pub computed_at: usize,
}

/// Multiply-add counts split by stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCost {
    pub deep_flops: u64,
    pub shallow_flops: u64,
}

impl EvalCost {
    pub fn total(&self) -> u64 {
        self.deep_flops + self.shallow_flops
    }
}

impl Add for EvalCost {
    type Output = EvalCost;

    fn add(self, rhs: EvalCost) -> EvalCost {
        EvalCost {
            deep_flops: self.deep_flops + rhs.deep_flops,
            shallow_flops: self.shallow_flops + rhs.shallow_flops,
        }
    }
}

impl AddAssign for EvalCost {
    fn add_assign(&mut self, rhs: EvalCost) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Clone)]
pub struct FullOutput {
    pub eps: Tensor<f32>,
    pub deep: DeepFeatures,
    pub cost: EvalCost,
}

#[derive(Debug, Clone)]
pub struct PartialOutput {
    pub eps: Tensor<f32>,
    pub cost: EvalCost,
}

/// Cost of evaluating one chunk, used by the throughput model.
pub trait CostProfile {
    fn chunk_cost(&self, len: usize, partial: bool) -> EvalCost;
}

/// A noise predictor the scheduler can drive chunk by chunk.
pub trait Denoiser: CostProfile + Send + Sync {
    fn name(&self) -> &'static str;

    /// Per-frame shape of the cached deep features for `h × w` latents.
    fn deep_slice_shape(&self, h: usize, w: usize) -> Vec<usize>;

    fn denoise_full(
        &self,
        input: &DenoiserInput,
        garment: &GarmentCondition,
        mask: Option<&AttentionMask>,
    ) -> Result<FullOutput>;

    fn denoise_partial(
        &self,
        input: &DenoiserInput,
        garment: &GarmentCondition,
        cached: &DeepFeatures,
        flags: &FreshnessFlags,
        variant: MaskVariant,
    ) -> Result<PartialOutput>;
}

/// Predicts exactly the noise that leads to a known clean latent video.
///
/// Its "deep features" are the target frames themselves, so partial
/// evaluation from a cache is exact as well.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    schedule: NoiseSchedule,
    target: Tensor<f32>,
}

impl OracleDenoiser {
    pub fn new(schedule: NoiseSchedule, target: Tensor<f32>) -> Result<Self> {
        let [_, c, _, _] = target.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(shape_err!("oracle target needs {LATENT_CHANNELS} channels"));
        }
        Ok(Self { schedule, target })
    }

    pub fn target(&self) -> &Tensor<f32> {
        &self.target
    }

    fn gather_target(&self, offsets: &[usize]) -> Result<Tensor<f32>> {
        let parts = offsets
            .iter()
            .map(|&f| self.target.narrow0(f, 1))
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat0(&parts.iter().collect::<Vec<_>>())
    }
}

impl CostProfile for OracleDenoiser {
    fn chunk_cost(&self, len: usize, _partial: bool) -> EvalCost {
        let [_, c, h, w] = self.target.dims4().expect("validated");
        EvalCost {
            deep_flops: 0,
            shallow_flops: 2 * (len * c * h * w) as u64,
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn deep_slice_shape(&self, h: usize, w: usize) -> Vec<usize> {
        vec![LATENT_CHANNELS, h, w]
    }

    fn denoise_full(
        &self,
        input: &DenoiserInput,
        _garment: &GarmentCondition,
        _mask: Option<&AttentionMask>,
    ) -> Result<FullOutput> {
        let target = self.gather_target(&input.frame_offsets)?;
        let eps = oracle_eps(&input.noise_latent, input.step_index, &target, &self.schedule)?;
        Ok(FullOutput {
            eps,
            deep: DeepFeatures {
                feats: target,
                computed_at: input.step_index,
            },
            cost: self.chunk_cost(input.len(), false),
        })
    }

    fn denoise_partial(
        &self,
        input: &DenoiserInput,
        _garment: &GarmentCondition,
        cached: &DeepFeatures,
        _flags: &FreshnessFlags,
        _variant: MaskVariant,
    ) -> Result<PartialOutput> {
        let eps = oracle_eps(&input.noise_latent, input.step_index, &cached.feats, &self.schedule)?;
        Ok(PartialOutput {
            eps,
            cost: self.chunk_cost(input.len(), true),
        })
    }
}

// ---------------------------------------------------------------------------
// Toy latent denoiser
// ---------------------------------------------------------------------------

/// Shape of the toy network. `deep_blocks == 0` asks construction to pick
/// the deep block count that best matches `deep_cost_share`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDenoiserConfig {
    pub shallow_width: usize,
    pub deep_width: usize,
    /// Total shallow blocks, split between shallow-in and shallow-out
    /// (shallow-out gets the extra one when odd).
    pub shallow_blocks: usize,
    pub deep_blocks: usize,
    pub seed: u64,
    pub deep_cost_share: f64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            shallow_width: 4,
            deep_width: 8,
            shallow_blocks: 2,
            deep_blocks: 0,
            seed: 0,
            deep_cost_share: 0.75,
        }
    }
}

/// Geometry the cost profile and block calibration are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub chunk_len: usize,
    pub garment_tokens: usize,
}

/// Tolerance on the achieved deep-stage FLOP share.
pub const COST_SHARE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct Linear {
    cin: usize,
    cout: usize,
    /// Row-major `[cin, cout]`.
    w: Vec<f32>,
    b: Vec<f32>,
}

impl Linear {
    pub fn new(cin: usize, cout: usize, w: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        if w.len() != cin * cout || b.len() != cout {
            return Err(shape_err!("linear {cin}->{cout} weights have wrong length"));
        }
        Ok(Self { cin, cout, w, b })
    }

    pub fn identity(c: usize) -> Self {
        let mut w = vec![0.0; c * c];
        (0..c).for_each(|i| w[i * c + i] = 1.0);
        Self {
            cin: c,
            cout: c,
            w,
            b: vec![0.0; c],
        }
    }

    fn random(cin: usize, cout: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let scale = gain / (cin as f32).sqrt();
        let w = (0..cin * cout)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x as f32 * scale
            })
            .collect();
        Self {
            cin,
            cout,
            w,
            b: vec![0.0; cout],
        }
    }

    fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.cin * self.cout) as u64
    }

    fn forward(&self, x: &[f32], rows: usize, flops: &mut u64) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.cin);
        let mut out = Vec::with_capacity(rows * self.cout);
        for r in 0..rows {
            let xr = &x[r * self.cin..(r + 1) * self.cin];
            let start = out.len();
            out.extend_from_slice(&self.b);
            let o = &mut out[start..];
            for (i, &xi) in xr.iter().enumerate() {
                let wr = &self.w[i * self.cout..(i + 1) * self.cout];
                for (acc, &wv) in o.iter_mut().zip(wr) {
                    *acc += xi * wv;
                }
            }
        }
        *flops += self.flops(rows);
        out
    }
}

fn attention_flops(n_q: usize, n_k: usize, dim: usize) -> u64 {
    4 * (n_q * n_k * dim) as u64
}

/// FLOPs of one block at width `c` over `frames × tokens` positions with
/// `m` garment tokens of width `gw`.
fn block_flops(c: usize, gw: usize, frames: usize, tokens: usize, m: usize, temporal: bool) -> u64 {
    let lin = |rows: usize, cin: usize, cout: usize| 2 * (rows * cin * cout) as u64;
    let rows = frames * tokens;
    let mut total = 0;
    if m > 0 {
        total += lin(m, gw, c) + 2 * lin(m, c, c);
    }
    total += 4 * lin(rows, c, c) + frames as u64 * attention_flops(tokens, tokens + m, c);
    if temporal {
        total += 4 * lin(rows, c, c) + tokens as u64 * attention_flops(frames, frames, c);
    }
    total + lin(rows, c, 2 * c) + lin(rows, 2 * c, c)
}

/// Analytic cost of one chunk evaluation; matches the runtime counters.
fn toy_chunk_cost(
    config: &ToyDenoiserConfig,
    g: &Geometry,
    len: usize,
    partial: bool,
    temporal: bool,
) -> EvalCost {
    let lin = |rows: usize, cin: usize, cout: usize| 2 * (rows * cin * cout) as u64;
    let (cf, cd) = (config.shallow_width, config.deep_width);
    let tokens = g.height * g.width;
    let deep_tokens = tokens / 4;
    let m = g.garment_tokens;
    let shallow = lin(len * tokens, INPUT_CHANNELS, cf)
        + lin(1, cf, cf)
        + config.shallow_blocks as u64 * block_flops(cf, cf, len, tokens, m, temporal)
        + lin(len * deep_tokens, cd, cf)
        + lin(len * tokens, cf, LATENT_CHANNELS);
    let deep = if partial {
        0
    } else {
        lin(len * deep_tokens, cf, cd)
            + lin(1, cf, cd)
            + config.deep_blocks as u64 * block_flops(cd, cf, len, deep_tokens, m, temporal)
    };
    EvalCost {
        deep_flops: deep,
        shallow_flops: shallow,
    }
}

fn rms_norm(x: &[f32], c: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / c as f32;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

/// Fourier features of the normalized timestep `t / T`, periods `2T, T, T/2, …`.
fn time_code(timestep: usize, dim: usize) -> Vec<f32> {
    let u = timestep as f64 / TRAIN_STEPS as f64;
    (0..dim / 2)
        .flat_map(|i| {
            let phase = std::f64::consts::PI * (1u64 << i) as f64 * u;
            [phase.sin() as f32, phase.cos() as f32]
        })
        .collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Spatial self-attention whose keys and values are extended with garment
/// tokens, replicated for every frame.
#[derive(Debug, Clone)]
pub struct ReferenceAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    /// Projects garment tokens to the block width.
    garment: Linear,
}

impl ReferenceAttention {
    pub fn from_weights(q: Linear, k: Linear, v: Linear, o: Linear, garment: Linear) -> Result<Self> {
        let c = q.cin;
        for l in [&q, &k, &v, &o] {
            if l.cin != c || l.cout != c {
                return Err(shape_err!("attention projections must be {c}x{c}"));
            }
        }
        if garment.cout != c {
            return Err(shape_err!(
                "garment projection outputs {} channels, block width is {c}",
                garment.cout
            ));
        }
        Ok(Self { q, k, v, o, garment })
    }

    fn random(c: usize, garment_width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::random(c, c, 1.0, rng),
            k: Linear::random(c, c, 1.0, rng),
            v: Linear::random(c, c, 1.0, rng),
            o: Linear::random(c, c, 0.5, rng),
            garment: Linear::random(garment_width, c, 1.0, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.q.cin
    }

    /// Garment keys and values, computed once per call and shared by all frames.
    fn garment_kv(&self, garment: &GarmentCondition, flops: &mut u64) -> Result<(Vec<f32>, Vec<f32>)> {
        if garment.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        if garment.width() != self.garment.cin {
            return Err(shape_err!(
                "garment tokens have {} channels, projection expects {}",
                garment.width(),
                self.garment.cin
            ));
        }
        let m = garment.len();
        let g = self.garment.forward(garment.tokens(), m, flops);
        let gn = rms_norm(&g, self.width());
        Ok((self.k.forward(&gn, m, flops), self.v.forward(&gn, m, flops)))
    }

    /// `x` is token-major `[frames, tokens, C]` and already normalised.
    fn forward_tokens(
        &self,
        x: &[f32],
        frames: usize,
        tokens: usize,
        garment: &GarmentCondition,
        flops: &mut u64,
    ) -> Result<Vec<f32>> {
        let c = self.width();
        let (gk, gv) = self.garment_kv(garment, flops)?;
        let m = gk.len() / c;
        let rows = frames * tokens;
        let q = self.q.forward(x, rows, flops);
        let k = self.k.forward(x, rows, flops);
        let v = self.v.forward(x, rows, flops);
        let n_k = tokens + m;
        let mut kb = Vec::with_capacity(n_k * c);
        let mut vb = Vec::with_capacity(n_k * c);
        let mut out = vec![0.0; rows * c];
        let mut scratch = AttentionScratch::new();
        for f in 0..frames {
            let r = f * tokens * c..(f + 1) * tokens * c;
            kb.clear();
            kb.extend_from_slice(&k[r.clone()]);
            kb.extend_from_slice(&gk);
            vb.clear();
            vb.extend_from_slice(&v[r.clone()]);
            vb.extend_from_slice(&gv);
            attend(&q[r.clone()], &kb, &vb, tokens, n_k, c, None, &mut out[r], &mut scratch);
        }
        *flops += frames as u64 * attention_flops(tokens, n_k, c);
        Ok(self.o.forward(&out, rows, flops))
    }

    /// Applies reference attention to `feat: [L, C, H, W]`.
    pub fn forward(&self, feat: &Tensor<f32>, garment: &GarmentCondition) -> Result<Tensor<f32>> {
        let [l, c, h, w] = feat.dims4()?;
        if c != self.width() {
            return Err(shape_err!("features have {c} channels, block width is {}", self.width()));
        }
        let tokens = to_tokens(feat.data(), l, c, h * w);
        let mut flops = 0;
        let out = self.forward_tokens(&tokens, l, h * w, garment, &mut flops)?;
        Tensor::new([l, c, h, w], from_tokens(&out, l, c, h * w))
    }
}

#[derive(Debug, Clone)]
struct TemporalAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl TemporalAttention {
    fn random(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::random(c, c, 1.0, rng),
            k: Linear::random(c, c, 1.0, rng),
            v: Linear::random(c, c, 1.0, rng),
            o: Linear::random(c, c, 0.5, rng),
        }
    }

    /// `x` is normalised `[frames, tokens, C]` with frame encodings added.
    /// Attention runs along frames independently for every spatial token.
    fn forward_tokens(
        &self,
        x: &[f32],
        frames: usize,
        tokens: usize,
        mask: Option<&AttentionMask>,
        flops: &mut u64,
    ) -> Vec<f32> {
        let c = self.q.cin;
        let rows = frames * tokens;
        let q = self.q.forward(x, rows, flops);
        let k = self.k.forward(x, rows, flops);
        let v = self.v.forward(x, rows, flops);
        let allowed = mask.map(|m| m.allowed());
        let mut out = vec![0.0; rows * c];
        let (mut qs, mut ks, mut vs, mut os) = (
            vec![0.0; frames * c],
            vec![0.0; frames * c],
            vec![0.0; frames * c],
            vec![0.0; frames * c],
        );
        let mut scratch = AttentionScratch::new();
        for p in 0..tokens {
            for i in 0..frames {
                let src = (i * tokens + p) * c;
                qs[i * c..(i + 1) * c].copy_from_slice(&q[src..src + c]);
                ks[i * c..(i + 1) * c].copy_from_slice(&k[src..src + c]);
                vs[i * c..(i + 1) * c].copy_from_slice(&v[src..src + c]);
            }
            attend(&qs, &ks, &vs, frames, frames, c, allowed, &mut os, &mut scratch);
            for i in 0..frames {
                let dst = (i * tokens + p) * c;
                out[dst..dst + c].copy_from_slice(&os[i * c..(i + 1) * c]);
            }
        }
        *flops += tokens as u64 * attention_flops(frames, frames, c);
        self.o.forward(&out, rows, flops)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct Block {
    width: usize,
    spatial: ReferenceAttention,
    temporal: TemporalAttention,
    mlp: Mlp,
}

struct Pass<'a> {
    frames: usize,
    tokens: usize,
    garment: &'a GarmentCondition,
    /// Per-frame sinusoidal encodings at this block width, `[frames, C]`.
    frame_codes: &'a [f32],
    mask: Option<&'a AttentionMask>,
    temporal: bool,
}

impl Block {
    fn random(width: usize, garment_width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            width,
            spatial: ReferenceAttention::random(width, garment_width, rng),
            temporal: TemporalAttention::random(width, rng),
            mlp: Mlp {
                up: Linear::random(width, 2 * width, 1.0, rng),
                down: Linear::random(2 * width, width, 0.5, rng),
            },
        }
    }

    fn forward(&self, x: &mut [f32], pass: &Pass<'_>, flops: &mut u64) -> Result<()> {
        let c = self.width;
        let rows = pass.frames * pass.tokens;

        let n = rms_norm(x, c);
        let s = self
            .spatial
            .forward_tokens(&n, pass.frames, pass.tokens, pass.garment, flops)?;
        add_into(x, &s);

        if pass.temporal {
            let mut n = rms_norm(x, c);
            for (i, row) in n.chunks_exact_mut(pass.tokens * c).enumerate() {
                let code = &pass.frame_codes[i * c..(i + 1) * c];
                row.chunks_exact_mut(c).for_each(|t| add_into(t, code));
            }
            let t = self
                .temporal
                .forward_tokens(&n, pass.frames, pass.tokens, pass.mask, flops);
            add_into(x, &t);
        }

        let n = rms_norm(x, c);
        let mut hidden = self.mlp.up.forward(&n, rows, flops);
        hidden.iter_mut().for_each(|v| *v = silu(*v));
        let m = self.mlp.down.forward(&hidden, rows, flops);
        add_into(x, &m);
        Ok(())
    }
}

fn to_tokens(x: &[f32], frames: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        for ch in 0..c {
            let src = &x[(f * c + ch) * plane..(f * c + ch + 1) * plane];
            for (p, &v) in src.iter().enumerate() {
                out[(f * plane + p) * c + ch] = v;
            }
        }
    }
    out
}

fn from_tokens(x: &[f32], frames: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        for p in 0..plane {
            for ch in 0..c {
                out[(f * c + ch) * plane + p] = x[(f * plane + p) * c + ch];
            }
        }
    }
    out
}

/// 2×2 average pooling of token-major `[frames, h·w, c]`.
fn pool2(x: &[f32], frames: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; frames * h2 * w2 * c];
    for f in 0..frames {
        for y in 0..h2 {
            for xx in 0..w2 {
                let dst = ((f * h2 + y) * w2 + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((f * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[dst + ch] += 0.25 * x[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of token-major `[frames, (h/2)·(w/2), c]`.
fn upsample2(x: &[f32], frames: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; frames * h * w * c];
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                let src = ((f * h2 + y / 2) * w2 + xx / 2) * c;
                let dst = ((f * h + y) * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

fn frame_codes(offsets: &[usize], c: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(offsets.len() * c);
    for &f in offsets {
        out.extend(sinusoidal_encoding::<f32>(f, c)?);
    }
    Ok(out)
}

/// Activations carried from shallow-in to shallow-out.
struct ShallowIn {
    skip: Vec<f32>,
    h: usize,
    w: usize,
    frames: usize,
}

/// Seeded latent denoiser with frozen random weights.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    geometry: Geometry,
    stem: Linear,
    time_shallow: Linear,
    time_deep: Linear,
    shallow_in: Vec<Block>,
    down: Linear,
    deep: Vec<Block>,
    up: Linear,
    shallow_out: Vec<Block>,
    head: Linear,
    temporal: bool,
}

impl ToyDenoiser {
    /// Builds the network. When `config.deep_blocks` is 0 the deep block
    /// count is chosen so the deep stage's FLOP share at `geometry` is as
    /// close as possible to `config.deep_cost_share`; construction fails if
    /// the achieved share misses the target by more than 5 points.
    pub fn new(mut config: ToyDenoiserConfig, geometry: Geometry) -> Result<Self> {
        if config.shallow_width == 0 || config.deep_width == 0 {
            return Err(Error::Config("toy widths must be positive".into()));
        }
        if config.shallow_width % 2 != 0 || config.deep_width % 2 != 0 {
            return Err(Error::Config("toy widths must be even (frame encodings)".into()));
        }
        if config.shallow_blocks == 0 {
            return Err(Error::Config("toy denoiser needs at least one shallow block".into()));
        }
        if !(0.0..1.0).contains(&config.deep_cost_share) {
            return Err(Error::Config("deep_cost_share must lie in [0, 1)".into()));
        }
        if geometry.height % 2 != 0 || geometry.width % 2 != 0 || geometry.height == 0 || geometry.width == 0 {
            return Err(Error::Config(format!(
                "latent {}x{} must have even, positive sides",
                geometry.height, geometry.width
            )));
        }
        let calibrated = config.deep_blocks == 0;
        if calibrated {
            config.deep_blocks = Self::calibrate(&config, &geometry);
        }
        let net = Self::build(config, geometry);
        let share = net.deep_share();
        if calibrated && (share - net.config.deep_cost_share).abs() > COST_SHARE_TOLERANCE {
            return Err(Error::Config(format!(
                "deep stage share {share:.3} misses target {:.3} by more than {COST_SHARE_TOLERANCE}",
                net.config.deep_cost_share
            )));
        }
        Ok(net)
    }

    fn calibrate(config: &ToyDenoiserConfig, geometry: &Geometry) -> usize {
        let share = |d: usize| {
            let probe = ToyDenoiserConfig {
                deep_blocks: d,
                ..config.clone()
            };
            let c = toy_chunk_cost(&probe, geometry, geometry.chunk_len, false, true);
            c.deep_flops as f64 / c.total() as f64
        };
        (1..=512)
            .min_by(|&a, &b| {
                let ea = (share(a) - config.deep_cost_share).abs();
                let eb = (share(b) - config.deep_cost_share).abs();
                ea.total_cmp(&eb)
            })
            .unwrap_or(1)
    }

    fn build(config: ToyDenoiserConfig, geometry: Geometry) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (cf, cd) = (config.shallow_width, config.deep_width);
        let n_in = config.shallow_blocks / 2;
        let n_out = config.shallow_blocks - n_in;
        let stem = Linear::random(INPUT_CHANNELS, cf, 1.0, &mut rng);
        let time_shallow = Linear::random(cf, cf, 1.0, &mut rng);
        let time_deep = Linear::random(cf, cd, 1.0, &mut rng);
        let shallow_in = (0..n_in).map(|_| Block::random(cf, cf, &mut rng)).collect();
        let down = Linear::random(cf, cd, 1.0, &mut rng);
        let deep = (0..config.deep_blocks)
            .map(|_| Block::random(cd, cf, &mut rng))
            .collect();
        let up = Linear::random(cd, cf, 1.0, &mut rng);
        let shallow_out = (0..n_out).map(|_| Block::random(cf, cf, &mut rng)).collect();
        let head = Linear::random(cf, LATENT_CHANNELS, 1.0, &mut rng);
        Self {
            config,
            geometry,
            stem,
            time_shallow,
            time_deep,
            shallow_in,
            down,
            deep,
            up,
            shallow_out,
            head,
            temporal: true,
        }
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// Test hook: replaces every temporal attention layer with identity.
    pub fn with_temporal_attention(mut self, enabled: bool) -> Self {
        self.temporal = enabled;
        self
    }

    /// Deep-stage share of a full chunk evaluation at the configured geometry.
    pub fn deep_share(&self) -> f64 {
        let c = self.chunk_cost(self.geometry.chunk_len, false);
        c.deep_flops as f64 / c.total() as f64
    }

    fn time_embedding(&self, layer: &Linear, timestep: usize, flops: &mut u64) -> Result<Vec<f32>> {
        let code = time_code(timestep, self.config.shallow_width);
        let mut e = layer.forward(&code, 1, flops);
        e.iter_mut().for_each(|v| *v = silu(*v));
        Ok(e)
    }

    fn check_input(&self, input: &DenoiserInput, mask: Option<&AttentionMask>) -> Result<()> {
        let (h, w) = input.spatial();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("latent {h}x{w} must have even sides"));
        }
        if let Some(m) = mask {
            if m.size() != input.len() {
                return Err(shape_err!("mask size {} for chunk of {}", m.size(), input.len()));
            }
        }
        Ok(())
    }

    fn run_shallow_in(
        &self,
        input: &DenoiserInput,
        garment: &GarmentCondition,
        mask: Option<&AttentionMask>,
        flops: &mut u64,
    ) -> Result<ShallowIn> {
        let x13 = input.assemble()?;
        let (h, w) = input.spatial();
        let frames = input.len();
        let tokens = h * w;
        let cf = self.config.shallow_width;
        let raw = to_tokens(x13.data(), frames, INPUT_CHANNELS, tokens);
        let mut x = self.stem.forward(&raw, frames * tokens, flops);
        let temb = self.time_embedding(&self.time_shallow, input.timestep, flops)?;
        x.chunks_exact_mut(cf).for_each(|t| add_into(t, &temb));
        let codes = frame_codes(&input.frame_offsets, cf)?;
        let pass = Pass {
            frames,
            tokens,
            garment,
            frame_codes: &codes,
            mask,
            temporal: self.temporal,
        };
        for b in &self.shallow_in {
            b.forward(&mut x, &pass, flops)?;
        }
        Ok(ShallowIn { skip: x, h, w, frames })
    }

    /// Returns deep features token-major `[frames, (h/2)(w/2), C_d]`.
    fn run_deep(
        &self,
        shallow: &ShallowIn,
        input: &DenoiserInput,
        garment: &GarmentCondition,
        mask: Option<&AttentionMask>,
        flops: &mut u64,
    ) -> Result<Vec<f32>> {
        let (cf, cd) = (self.config.shallow_width, self.config.deep_width);
        let tokens = (shallow.h / 2) * (shallow.w / 2);
        let pooled = pool2(&shallow.skip, shallow.frames, shallow.h, shallow.w, cf);
        let mut x = self.down.forward(&pooled, shallow.frames * tokens, flops);
        let temb = self.time_embedding(&self.time_deep, input.timestep, flops)?;
        x.chunks_exact_mut(cd).for_each(|t| add_into(t, &temb));
        let codes = frame_codes(&input.frame_offsets, cd)?;
        let pass = Pass {
            frames: shallow.frames,
            tokens,
            garment,
            frame_codes: &codes,
            mask,
            temporal: self.temporal,
        };
        for b in &self.deep {
            b.forward(&mut x, &pass, flops)?;
        }
        Ok(x)
    }

    fn run_shallow_out(
        &self,
        shallow: ShallowIn,
        deep: &[f32],
        input: &DenoiserInput,
        garment: &GarmentCondition,
        mask: Option<&AttentionMask>,
        flops: &mut u64,
    ) -> Result<Tensor<f32>> {
        let cf = self.config.shallow_width;
        let (h, w, frames) = (shallow.h, shallow.w, shallow.frames);
        let tokens = h * w;
        let lifted = self.up.forward(deep, frames * tokens / 4, flops);
        let mut x = upsample2(&lifted, frames, h, w, cf);
        add_into(&mut x, &shallow.skip);
        let codes = frame_codes(&input.frame_offsets, cf)?;
        let pass = Pass {
            frames,
            tokens,
            garment,
            frame_codes: &codes,
            mask,
            temporal: self.temporal,
        };
        for b in &self.shallow_out {
            b.forward(&mut x, &pass, flops)?;
        }
        let n = rms_norm(&x, cf);
        let eps = self.head.forward(&n, frames * tokens, flops);
        let eps = Tensor::new([frames, LATENT_CHANNELS, h, w], from_tokens(&eps, frames, LATENT_CHANNELS, tokens))?;
        if !eps.all_finite() {
            return Err(Error::NonFinite("toy denoiser output"));
        }
        Ok(eps)
    }

    /// Full evaluation with no deep features produced, for comparisons.
    pub fn denoise_with_deep(
        &self,
        input: &DenoiserInput,
        garment: &GarmentCondition,
        deep: &DeepFeatures,
        mask: Option<&AttentionMask>,
    ) -> Result<Tensor<f32>> {
        self.check_input(input, mask)?;
        let mut flops = 0;
        let shallow = self.run_shallow_in(input, garment, None, &mut flops)?;
        let tokens = self.deep_tokens(input, deep)?;
        self.run_shallow_out(shallow, &tokens, input, garment, mask, &mut flops)
    }

    fn deep_tokens(&self, input: &DenoiserInput, deep: &DeepFeatures) -> Result<Vec<f32>> {
        let (h, w) = input.spatial();
        let want = [input.len(), self.config.deep_width, h / 2, w / 2];
        if deep.feats.shape() != want {
            return Err(shape_err!(
                "cached deep features {:?}, expected {:?}",
                deep.feats.shape(),
                want
            ));
        }
        Ok(to_tokens(deep.feats.data(), want[0], want[1], want[2] * want[3]))
    }
}

impl CostProfile for ToyDenoiser {
    fn chunk_cost(&self, len: usize, partial: bool) -> EvalCost {
        toy_chunk_cost(&self.config, &self.geometry, len, partial, self.temporal)
    }
}

impl Denoiser for ToyDenoiser {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn deep_slice_shape(&self, h: usize, w: usize) -> Vec<usize> {
        vec![self.config.deep_width, h / 2, w / 2]
    }

    fn denoise_full(
        &self,
        input: &DenoiserInput,
        garment: &GarmentCondition,
        mask: Option<&AttentionMask>,
    ) -> Result<FullOutput> {
        self.check_input(input, mask)?;
        let mut shallow_flops = 0;
        let mut deep_flops = 0;
        let shallow = self.run_shallow_in(input, garment, mask, &mut shallow_flops)?;
        let deep = self.run_deep(&shallow, input, garment, mask, &mut deep_flops)?;
        let (h, w) = (shallow.h, shallow.w);
        let frames = shallow.frames;
        let eps = self.run_shallow_out(shallow, &deep, input, garment, mask, &mut shallow_flops)?;
        let cd = self.config.deep_width;
        let feats = Tensor::new(
            [frames, cd, h / 2, w / 2],
            from_tokens(&deep, frames, cd, (h / 2) * (w / 2)),
        )?;
        Ok(FullOutput {
            eps,
            deep: DeepFeatures {
                feats,
                computed_at: input.step_index,
            },
            cost: EvalCost {
                deep_flops,
                shallow_flops,
            },
        })
    }

    fn denoise_partial(
        &self,
        input: &DenoiserInput,
        garment: &GarmentCondition,
        cached: &DeepFeatures,
        flags: &FreshnessFlags,
        variant: MaskVariant,
    ) -> Result<PartialOutput> {
        if flags.len() != input.len() {
            return Err(shape_err!("{} freshness flags for chunk of {}", flags.len(), input.len()));
        }
        self.check_input(input, None)?;
        let deep = self.deep_tokens(input, cached)?;
        let mask = build_mask(variant, flags)?;
        let mut shallow_flops = 0;
        let shallow = self.run_shallow_in(input, garment, None, &mut shallow_flops)?;
        let eps = self.run_shallow_out(shallow, &deep, input, garment, Some(&mask), &mut shallow_flops)?;
        Ok(PartialOutput {
            eps,
            cost: EvalCost {
                deep_flops: 0,
                shallow_flops,
            },
        })
    }
}

//! Noise schedule, the deterministic (η = 0) DDIM update, and the analytic
//! oracle denoiser used for exact end-to-end checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Element, Tensor};

/// Latent channel count of the video latents.
pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    train_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sampling_steps: Vec<usize>,
}

/// Linear betas from `beta_start` to `beta_end` over `train_steps`, sampled
/// at `steps` evenly spaced timesteps in descending order.
pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear-beta schedule over 1000 training steps, sampled at `steps` positions.
pub fn default_schedule(steps: usize) -> Result<NoiseSchedule> {
    make_schedule(TRAIN_STEPS, BETA_START, BETA_END, steps)
}

pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    steps: usize,
) -> Result<NoiseSchedule> {
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        ));
    }
    if train_steps == 0 || steps == 0 || steps > train_steps {
        return Err(invalid!(
            "need 1 <= sampling steps ({steps}) <= train steps ({train_steps})"
        ));
    }
    let betas: Vec<f64> = (0..train_steps)
        .map(|t| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (train_steps - 1) as f64
            }
        })
        .collect();
    let alpha_bars = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    let sampling_steps = (0..steps).rev().map(|i| i * train_steps / steps).collect();
    Ok(NoiseSchedule {
        train_steps,
        betas,
        alpha_bars,
        sampling_steps,
    })
}

impl NoiseSchedule {
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Timesteps visited during sampling, noisiest first.
    pub fn sampling_steps(&self) -> &[usize] {
        &self.sampling_steps
    }

    pub fn len(&self) -> usize {
        self.sampling_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sampling_steps.is_empty()
    }

    /// Training timestep visited at a sampling position.
    pub fn timestep(&self, step_index: usize) -> Result<usize> {
        self.sampling_steps
            .get(step_index)
            .copied()
            .ok_or_else(|| invalid!("step index {step_index} out of range 0..{}", self.len()))
    }

    pub fn alpha_bar_at(&self, step_index: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.timestep(step_index)?])
    }

    /// ᾱ of the step after `step_index`, or `None` at the final step.
    pub fn alpha_bar_prev(&self, step_index: usize) -> Result<Option<f64>> {
        self.timestep(step_index)?;
        Ok(self
            .sampling_steps
            .get(step_index + 1)
            .map(|&t| self.alpha_bars[t]))
    }
}

/// One η = 0 DDIM update given explicit ᾱ values. With `alpha_bar_prev ==
/// None` the predicted clean sample is returned.
pub fn ddim_update<T: Element>(
    z_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    alpha_bar_t: f64,
    alpha_bar_prev: Option<f64>,
) -> Result<Tensor<T>> {
    if z_t.shape() != eps_pred.shape() {
        return Err(shape_err!(
            "latent {:?} vs eps {:?}",
            z_t.shape(),
            eps_pred.shape()
        ));
    }
    let sqrt_a = T::from_f64(alpha_bar_t.sqrt());
    let sqrt_1ma = T::from_f64((1.0 - alpha_bar_t).sqrt());
    match alpha_bar_prev {
        None => z_t.zip_map(eps_pred, |z, e| (z - sqrt_1ma * e) / sqrt_a),
        Some(prev) => {
            let sqrt_p = T::from_f64(prev.sqrt());
            let sqrt_1mp = T::from_f64((1.0 - prev).sqrt());
            z_t.zip_map(eps_pred, |z, e| {
                let x0 = (z - sqrt_1ma * e) / sqrt_a;
                sqrt_p * x0 + sqrt_1mp * e
            })
        }
    }
}

/// Deterministic DDIM step from sampling position `step_index` to the next.
/// At the final position the predicted clean sample is returned.
pub fn ddim_step<T: Element>(
    z_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    step_index: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let a = sched.alpha_bar_at(step_index)?;
    let prev = sched.alpha_bar_prev(step_index)?;
    ddim_update(z_t, eps_pred, a, prev)
}

/// Noise that a perfect denoiser would predict if the clean sample were
/// `target_x0`: `(z_t − √ᾱ_t·x0) / √(1 − ᾱ_t)`. Frame-local.
pub fn oracle_eps<T: Element>(
    z_t: &Tensor<T>,
    step_index: usize,
    target_x0: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let a = sched.alpha_bar_at(step_index)?;
    if a >= 1.0 {
        return Err(invalid!("alpha_bar is 1 at step {step_index}; oracle undefined"));
    }
    if z_t.shape() != target_x0.shape() {
        return Err(shape_err!(
            "latent {:?} vs target {:?}",
            z_t.shape(),
            target_x0.shape()
        ));
    }
    let sqrt_a = T::from_f64(a.sqrt());
    let inv = T::from_f64(1.0 / (1.0 - a).sqrt());
    z_t.zip_map(target_x0, |z, x0| (z - sqrt_a * x0) * inv)
}

/// Standard-normal tensor from a seeded generator.
pub fn seeded_noise<T: Element>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let x: f64 = StandardNormal.sample(&mut rng);
        T::from_f64(x)
    })
}

/// Seeded video that varies smoothly in space and time, `[n, c, h, w]`.
///
/// Each channel is a sum of three drifting plane waves with random
/// frequencies and phases.
pub fn smooth_video(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let waves: Vec<[f64; 5]> = (0..c * 3)
        .map(|_| {
            [
                0.4 * normal(),
                0.4 * normal(),
                0.15 * normal(),
                normal(),
                0.5 + 0.25 * normal().abs(),
            ]
        })
        .collect();
    Tensor::from_fn([n, c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = (i / (w * h)) % c;
        let f = i / (w * h * c);
        waves[ch * 3..ch * 3 + 3]
            .iter()
            .map(|&[ky, kx, kt, phase, amp]| {
                amp * (ky * y as f64 + kx * x as f64 + kt * f as f64 + phase).sin()
            })
            .sum::<f64>() as f32
    })
}

/// Latent video being denoised plus per-frame bookkeeping of when each
/// frame's deep features were last fully computed (sampling position).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub z: Tensor<f32>,
    pub freshness: Vec<Option<usize>>,
}

impl LatentVideo {
    pub fn new(z: Tensor<f32>) -> Result<Self> {
        let [n, c, _, _] = z.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(shape_err!("latent video needs {LATENT_CHANNELS} channels, got {c}"));
        }
        Ok(Self {
            z,
            freshness: vec![None; n],
        })
    }

    pub fn frames(&self) -> usize {
        self.z.shape()[0]
    }
}

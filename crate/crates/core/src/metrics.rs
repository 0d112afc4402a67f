//! Image/video quality proxies and the eval-count cost model.

use serde::{Deserialize, Serialize};

use crate::denoiser::CostProfile;
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Element, Tensor};
use crate::scheduler::{plan_overlap, RunStats};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..WINDOW).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..WINDOW).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let k = gaussian_window();
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&sq(a, a), h, w, &k);
    let e_bb = filter_valid(&sq(b, b), h, w, &k);
    let e_ab = filter_valid(&sq(a, b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM over 11×11 Gaussian windows (σ = 1.5, valid positions only).
///
/// Accepts `[H, W]`, or any tensor whose trailing two axes are the image;
/// leading axes are treated as separate planes and averaged. The dynamic
/// range is the joint value range of both inputs (1 when constant).
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("ssim of {:?} and {:?}", a.shape(), b.shape()));
    }
    let rank = a.rank();
    if rank < 2 {
        return Err(shape_err!("ssim needs at least two axes, got {:?}", a.shape()));
    }
    let (h, w) = (a.shape()[rank - 2], a.shape()[rank - 1]);
    if h < WINDOW || w < WINDOW {
        return Err(invalid!("image {h}x{w} is smaller than the {WINDOW}x{WINDOW} window"));
    }
    let to64 = |t: &Tensor<T>| t.data().iter().map(|v| Element::to_f64(*v)).collect::<Vec<_>>();
    let (a, b) = (to64(a), to64(b));
    let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let plane = h * w;
    let planes = a.len() / plane;
    let sum: f64 = (0..planes)
        .map(|p| ssim_plane(&a[p * plane..(p + 1) * plane], &b[p * plane..(p + 1) * plane], h, w, range))
        .sum();
    Ok(sum / planes as f64)
}

/// Mean over consecutive frame pairs of their mean squared difference.
pub fn flicker_index<T: Element>(video: &Tensor<T>) -> Result<f64> {
    let n = *video
        .shape()
        .first()
        .ok_or_else(|| shape_err!("flicker of a scalar"))?;
    if n < 2 {
        return Err(invalid!("flicker needs at least two frames, got {n}"));
    }
    let frame = video.numel() / n;
    let d = video.data();
    let total: f64 = (0..n - 1)
        .map(|i| {
            let (x, y) = (&d[i * frame..(i + 1) * frame], &d[(i + 1) * frame..(i + 2) * frame]);
            x.iter()
                .zip(y)
                .map(|(p, q)| (Element::to_f64(*q) - Element::to_f64(*p)).powi(2))
                .sum::<f64>()
                / frame as f64
        })
        .sum();
    Ok(total / (n - 1) as f64)
}

/// Total FLOPs a run would cost under `profile`, from its eval counts.
pub fn run_flops(stats: &RunStats, profile: &dyn CostProfile) -> u64 {
    stats
        .evals_by_len
        .iter()
        .map(|(&len, &[full, partial])| {
            full * profile.chunk_cost(len, false).total() + partial * profile.chunk_cost(len, true).total()
        })
        .sum()
}

/// FLOPs of the disjoint, fully computed baseline for the same video.
pub fn baseline_flops(stats: &RunStats, profile: &dyn CostProfile) -> Result<u64> {
    let per_step: u64 = plan_overlap(stats.n_total, stats.chunk_len, 0)?
        .iter()
        .map(|c| profile.chunk_cost(c.len, false).total())
        .sum();
    Ok(per_step * stats.steps as u64)
}

/// Throughput relative to the disjoint full-compute baseline:
/// baseline FLOPs over this run's FLOPs.
pub fn throughput_model(stats: &RunStats, profile: &dyn CostProfile) -> Result<f64> {
    let run = run_flops(stats, profile);
    if run == 0 {
        return Err(invalid!("run has zero modelled cost"));
    }
    Ok(baseline_flops(stats, profile)? as f64 / run as f64)
}

/// One row of benchmark output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub config: String,
    pub policy: String,
    #[serde(rename = "S")]
    pub s: usize,
    pub delta: usize,
    pub partial_frac: f64,
    pub mask: String,
    pub full_chunks: u64,
    pub partial_chunks: u64,
    pub deep_flops: u64,
    pub shallow_flops: u64,
    pub wall_ms: f64,
    pub frames: usize,
    pub fps_proxy: f64,
    pub flicker: f64,
    pub ssim: Option<f64>,
}

impl BenchRecord {
    pub const COLUMNS: [&'static str; 15] = [
        "config",
        "policy",
        "S",
        "delta",
        "partial_frac",
        "mask",
        "full_chunks",
        "partial_chunks",
        "deep_flops",
        "shallow_flops",
        "wall_ms",
        "frames",
        "fps_proxy",
        "flicker",
        "ssim",
    ];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::EvalCost;
    use crate::diffusion::seeded_noise;
    use std::collections::BTreeMap;

    struct PerFrame {
        full: u64,
        partial: u64,
    }

    impl CostProfile for PerFrame {
        fn chunk_cost(&self, len: usize, partial: bool) -> EvalCost {
            let per = if partial { self.partial } else { self.full };
            EvalCost {
                deep_flops: 0,
                shallow_flops: per * len as u64,
            }
        }
    }

    fn stats(n: usize, l: usize, steps: usize, evals: &[(usize, [u64; 2])]) -> RunStats {
        RunStats {
            n_total: n,
            chunk_len: l,
            steps,
            evals_by_len: evals.iter().copied().collect::<BTreeMap<_, _>>(),
            ..Default::default()
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = seeded_noise::<f64>(&[2, 16, 13], 1).unwrap();
        let b = seeded_noise::<f64>(&[2, 16, 13], 2).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let ab = ssim(&a, &b).unwrap();
        assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ab < 1.0 && ab >= -1.0);
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let x = Tensor::from_fn([16, 16], |i| ((i / 16 + i % 16) % 2) as f64).unwrap();
        let y = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &y).unwrap() < 0.0);
    }

    #[test]
    fn ssim_errors() {
        let a = Tensor::<f64>::zeros([10, 20]).unwrap();
        assert!(ssim(&a, &a).is_err());
        let b = Tensor::<f64>::zeros([12, 12]).unwrap();
        let c = Tensor::<f64>::zeros([12, 13]).unwrap();
        assert!(ssim(&b, &c).is_err());
        assert_eq!(ssim(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn flicker_cases() {
        let constant = Tensor::from_fn([4, 1, 2, 2], |_| 3.0f64).unwrap();
        assert_eq!(flicker_index(&constant).unwrap(), 0.0);
        let alternating = Tensor::from_fn([5, 1, 2, 2], |i| ((i / 4) % 2) as f64).unwrap();
        assert_eq!(flicker_index(&alternating).unwrap(), 1.0);
        let ramp = Tensor::from_fn([6, 2, 3, 3], |i| 0.25 * (i / 18) as f64).unwrap();
        assert!((flicker_index(&ramp).unwrap() - 0.0625).abs() < 1e-15);
        assert!(flicker_index(&Tensor::<f64>::zeros([1, 1, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn flicker_ignores_offset() {
        let v = seeded_noise::<f64>(&[5, 2, 3, 3], 4).unwrap();
        let shifted = v.map(|x| x + 7.0);
        assert!((flicker_index(&v).unwrap() - flicker_index(&shifted).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn throughput_algebra() {
        let profile = PerFrame { full: 4, partial: 1 };
        let base = stats(144, 16, 25, &[(16, [9 * 25, 0])]);
        assert_eq!(throughput_model(&base, &profile).unwrap(), 1.0);
        // Overlap S=4: 12 chunks per step.
        let s4 = stats(144, 16, 25, &[(16, [12 * 25, 0])]);
        assert!((throughput_model(&s4, &profile).unwrap() - 0.75).abs() < 1e-12);
        // Half the frames partial with deep share 0.75 → 1 / (1 − 0.375).
        let half = stats(144, 16, 1, &[(16, [4, 4])]);
        let profile = PerFrame { full: 8, partial: 2 };
        let base8 = 9.0 * 16.0 * 8.0;
        let run = 4.0 * 16.0 * 8.0 + 4.0 * 16.0 * 2.0;
        assert!((throughput_model(&half, &profile).unwrap() - base8 / run).abs() < 1e-12);
        assert!(throughput_model(&stats(144, 16, 1, &[]), &profile).is_err());
    }

    #[test]
    fn csv_columns_match_serde_names() {
        let r = BenchRecord {
            config: "x".into(),
            policy: "shift".into(),
            s: 0,
            delta: 8,
            partial_frac: 0.5,
            mask: "half".into(),
            full_chunks: 1,
            partial_chunks: 2,
            deep_flops: 3,
            shallow_flops: 4,
            wall_ms: 5.0,
            frames: 6,
            fps_proxy: 7.0,
            flicker: 0.1,
            ssim: None,
        };
        let json = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut want = BenchRecord::COLUMNS.to_vec();
        let mut got = keys.clone();
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }
}

//! The `shiftcache` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::bench::{expand_sweeps, run_bench, write_csv, Sweep};
use super::config::{ConfigFile, DenoiserKind};
use super::keypoints::KeypointsFile;
use super::latent_file::save_latents;
use super::pgm::dump_frames;
use crate::cache::{build_mask, FreshnessFlags};
use crate::diffusion::default_schedule;
use crate::error::{Error, Result};
use crate::metrics::flicker_index;
use crate::numerics::MaskVariant;
use crate::pose_select::{default_specs, rank_frames, DEFAULT_CONF_THRESHOLD};
use crate::scheduler::{build_plans, run_inference, synthetic_target, ChunkMode, Policy, ShiftMode};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SHIFTCACHE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "shiftcache", version, about = "Shifted chunk scheduling for long-video diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the per-step chunk tables of a configuration.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run sampling and write the final latents.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output LVT1 latent file.
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-frame PGM dumps of channel 0.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
        /// Write run counters as JSON.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Run a sweep of configurations and write the benchmark CSV.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Swept key and values, `key=v1,v2,...`; repeat for a product.
        #[arg(long = "sweep", value_name = "KEY=VALUES")]
        sweeps: Vec<Sweep>,
        /// Set overlap_s to round(chunk_len * FRAC) for every row.
        #[arg(long, value_name = "FRAC")]
        overlap_frac: Option<f64>,
        /// Runs per row; the fastest wall time is reported.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Fill the ssim column against each row's S=0 full-compute run.
        #[arg(long)]
        ssim: bool,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print temporal attention mask grids.
    Masks {
        /// Per-frame freshness, e.g. `bbgg` (g = good, b = bad).
        #[arg(long)]
        flags: FreshnessFlags,
        /// Variant to print; all four when absent.
        #[arg(long)]
        variant: Option<MaskVariant>,
    },
    /// Pick the reference frame with the most complete, straightest pose.
    SelectFrame {
        /// Keypoint JSON file.
        #[arg(long)]
        keypoints: PathBuf,
        /// Minimum joint confidence.
        #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
        threshold: f64,
    },
}

/// A config file plus per-key overrides.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_total: Option<usize>,
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    overlap_s: Option<usize>,
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long)]
    shift_mode: Option<ShiftMode>,
    #[arg(long)]
    partial_fraction: Option<f64>,
    #[arg(long)]
    mask_variant: Option<MaskVariant>,
    #[arg(long)]
    staleness_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    denoiser: Option<DenoiserKind>,
    #[arg(long)]
    hard_skip: bool,
    #[arg(long)]
    latent_h: Option<usize>,
    #[arg(long)]
    latent_w: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ConfigFile> {
        let mut c = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        set!(n_total, chunk_len, policy, overlap_s, delta, shift_mode, partial_fraction,
             mask_variant, staleness_cap, seed, ddim_steps, denoiser);
        if self.hard_skip {
            c.hard_skip = true;
        }
        if let Some(h) = self.latent_h {
            c.latent.h = h;
        }
        if let Some(w) = self.latent_w {
            c.latent.w = w;
        }
        c.engine().validate()?;
        Ok(c)
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A pool built earlier in the process stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn emit_config(err: &mut dyn Write, c: &ConfigFile) -> Result<()> {
    writeln!(err, "effective config: {}", c.to_json()).map_err(|e| Error::io("<stderr>", e))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match configure_threads().and_then(|_| execute(cli.command, out, err)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match command {
        Command::Plan { config } => {
            let c = config.load()?;
            emit_config(err, &c)?;
            let engine = c.engine();
            let schedule = default_schedule(engine.ddim_steps)?;
            let (plans, summary) = build_plans(&engine)?;
            for plan in &plans {
                writeln!(
                    out,
                    "step {} (t={}, offset {}): {} chunks, {} partial",
                    plan.step_index,
                    schedule.timestep(plan.step_index)?,
                    plan.offset,
                    plan.chunks.len(),
                    plan.partial_chunks()
                )
                .map_err(io)?;
                for ch in &plan.chunks {
                    let mode = match ch.mode {
                        ChunkMode::Full => "full",
                        ChunkMode::Partial => "partial",
                    };
                    writeln!(out, "  [{},{}) {mode}", ch.start, ch.end()).map_err(io)?;
                }
            }
            writeln!(
                out,
                "total: {} partial of {} decision chunks",
                summary.partial, summary.decisions
            )
            .map_err(io)?;
        }
        Command::Sample {
            config,
            out: path,
            pgm_dir,
            stats,
        } => {
            let c = config.load()?;
            let resolved = c.resolve()?;
            emit_config(err, &resolved.config)?;
            let (z, s) = run_inference(&resolved.engine, resolved.denoiser.as_ref(), &resolved.conditions)?;
            save_latents(&path, &z)?;
            writeln!(
                out,
                "wrote {} ({} frames): {} full + {} partial chunk evals, {} deep + {} shallow FLOPs, {:.1} ms, flicker {:.6}",
                path.display(),
                z.frames(),
                s.full_chunk_evals,
                s.partial_chunk_evals,
                s.deep_flops,
                s.shallow_flops,
                s.wall_ms(),
                flicker_index(&z.z)?
            )
            .map_err(io)?;
            if c.denoiser == DenoiserKind::Oracle {
                let target = synthetic_target(c.n_total, c.latent.h, c.latent.w, c.seed)?;
                writeln!(out, "max abs error vs target: {:.3e}", z.z.max_abs_diff(&target)?).map_err(io)?;
            }
            if let Some(dir) = pgm_dir {
                let n = dump_frames(&dir, &z.z)?;
                writeln!(out, "dumped {n} frames to {}", dir.display()).map_err(io)?;
            }
            if let Some(p) = stats {
                let json = serde_json::to_string_pretty(&s)?;
                std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::Bench {
            config,
            sweeps,
            overlap_frac,
            repeat,
            ssim,
            out: path,
        } => {
            let base = config.load()?;
            emit_config(err, &base)?;
            let configs = expand_sweeps(&base, &sweeps, overlap_frac)?;
            let rows = run_bench(&configs, repeat, ssim, |run| {
                let _ = emit_config(err, &run.config);
            })?;
            match path {
                Some(p) => {
                    let file = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                    write_csv(std::io::BufWriter::new(file), &rows)?;
                    writeln!(out, "wrote {} rows to {}", rows.len(), p.display()).map_err(io)?;
                }
                None => write_csv(out, &rows)?,
            }
        }
        Command::Masks { flags, variant } => {
            let variants = match variant {
                Some(v) => vec![v],
                None => MaskVariant::ALL.to_vec(),
            };
            let code: String = flags.as_slice().iter().map(|f| if f.is_good() { 'g' } else { 'b' }).collect();
            for v in variants {
                let mask = build_mask(v, &flags)?;
                let note = if mask.variant() != v { " (fell back to full)" } else { "" };
                writeln!(out, "{v} [{code}]{note}:").map_err(io)?;
                write!(out, "{}", mask.to_grid()).map_err(io)?;
            }
        }
        Command::SelectFrame { keypoints, threshold } => {
            let file = KeypointsFile::load(&keypoints)?;
            let ranked = rank_frames(&file.frames, &default_specs(), threshold)?;
            let best = ranked
                .first()
                .ok_or_else(|| Error::InvalidArgument("keypoint file has no frames".into()))?;
            writeln!(out, "{:>6} {:>8} {:>12}", "frame", "visible", "score").map_err(io)?;
            for r in &ranked {
                writeln!(out, "{:>6} {:>8} {:>12.4}", r.frame_index, r.visible_parts, r.score).map_err(io)?;
            }
            writeln!(out, "selected frame: {}", best.frame_index).map_err(io)?;
        }
    }
    Ok(())
}

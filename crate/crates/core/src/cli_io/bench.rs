//! Config sweeps and the versioned benchmark CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use serde_json::Value;

use super::config::ConfigFile;
use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::metrics::{flicker_index, ssim, BenchRecord};
use crate::scheduler::{run_inference, Policy, RunStats};

/// First line of every benchmark CSV.
pub const CSV_VERSION_LINE: &str = "# shiftcache-bench v1";

/// One swept key with its values, parsed from `key=v1,v2,…`. Dotted keys
/// address nested blocks (`toy.deep_blocks=2,4`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<Value>,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, list) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep {s:?} is not key=v1,v2,...")))?;
        let values: Vec<Value> = list
            .split(',')
            .filter(|v| !v.is_empty())
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(Error::Config(format!("sweep {s:?} needs a key and values")));
        }
        Ok(Self {
            key: key.to_string(),
            values,
        })
    }
}

fn set_key(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        if !obj.contains_key(part) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(part).expect("checked");
    }
    unreachable!("split yields at least one part")
}

/// Cartesian product of sweeps over `base`, first sweep outermost. When
/// `overlap_frac` is set, each config's `overlap_s` becomes
/// `round(chunk_len × overlap_frac)`.
pub fn expand_sweeps(base: &ConfigFile, sweeps: &[Sweep], overlap_frac: Option<f64>) -> Result<Vec<ConfigFile>> {
    let mut docs = vec![serde_json::to_value(base)?];
    for sweep in sweeps {
        let mut next = Vec::with_capacity(docs.len() * sweep.values.len());
        for doc in &docs {
            for v in &sweep.values {
                let mut d = doc.clone();
                set_key(&mut d, &sweep.key, v.clone())?;
                next.push(d);
            }
        }
        docs = next;
    }
    docs.into_iter()
        .map(|d| {
            let mut c: ConfigFile = serde_json::from_value(d)?;
            if let Some(f) = overlap_frac {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::Config(format!("overlap fraction {f} outside [0, 1)")));
                }
                c.overlap_s = (c.chunk_len as f64 * f).round() as usize;
            }
            c.engine().validate()?;
            Ok(c)
        })
        .collect()
}

/// Short row label, e.g. `shift_L16_S0_d8_p0.5_half`.
pub fn label(c: &ConfigFile) -> String {
    let (s, delta) = match c.policy {
        Policy::Overlap => (c.overlap_s, 0),
        Policy::Shift => (0, c.delta),
    };
    format!(
        "{}_L{}_S{}_d{}_p{}_{}",
        c.policy,
        c.chunk_len,
        s,
        delta,
        c.engine().effective_partial_fraction(),
        c.mask_variant
    )
}

/// Full-compute, disjoint-chunk counterpart of `c`.
pub fn baseline_of(c: &ConfigFile) -> ConfigFile {
    ConfigFile {
        policy: Policy::Overlap,
        overlap_s: 0,
        partial_fraction: 0.0,
        hard_skip: false,
        ..c.clone()
    }
}

/// Result of benchmarking one configuration.
pub struct BenchRun {
    pub config: ConfigFile,
    pub latents: LatentVideo,
    pub stats: RunStats,
}

/// Runs `c` `repeats` times and keeps the fastest wall time. Outputs of
/// the repeats are identical.
pub fn bench_one(c: &ConfigFile, repeats: usize) -> Result<BenchRun> {
    let resolved = c.resolve()?;
    let mut best: Option<(LatentVideo, RunStats)> = None;
    let mut fastest = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let (z, stats) = run_inference(&resolved.engine, resolved.denoiser.as_ref(), &resolved.conditions)?;
        fastest = fastest.min(stats.wall_time);
        best = Some((z, stats));
    }
    let (latents, mut stats) = best.expect("at least one repeat");
    stats.wall_time = fastest;
    Ok(BenchRun {
        config: resolved.config,
        latents,
        stats,
    })
}

pub fn record(run: &BenchRun, ssim_ref: Option<&LatentVideo>) -> Result<BenchRecord> {
    let c = &run.config;
    let s = &run.stats;
    let (overlap, delta) = match c.policy {
        Policy::Overlap => (c.overlap_s, 0),
        Policy::Shift => (0, c.delta),
    };
    let secs = s.wall_time.as_secs_f64();
    Ok(BenchRecord {
        config: label(c),
        policy: c.policy.to_string(),
        s: overlap,
        delta,
        partial_frac: c.engine().effective_partial_fraction(),
        mask: c.mask_variant.to_string(),
        full_chunks: s.full_chunk_evals,
        partial_chunks: s.partial_chunk_evals + s.skipped_chunks,
        deep_flops: s.deep_flops,
        shallow_flops: s.shallow_flops,
        wall_ms: s.wall_ms(),
        frames: c.n_total,
        fps_proxy: if secs > 0.0 { c.n_total as f64 / secs } else { f64::INFINITY },
        flicker: flicker_index(&run.latents.z)?,
        ssim: ssim_ref.map(|r| ssim(&run.latents.z, &r.z)).transpose()?,
    })
}

/// Runs every config. With `with_ssim`, each row is compared against the
/// final latents of its [`baseline_of`] run (computed once per baseline).
pub fn run_bench(
    configs: &[ConfigFile],
    repeats: usize,
    with_ssim: bool,
    mut on_run: impl FnMut(&BenchRun),
) -> Result<Vec<BenchRecord>> {
    let mut refs: BTreeMap<String, LatentVideo> = BTreeMap::new();
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let run = bench_one(c, repeats)?;
        on_run(&run);
        let reference = if with_ssim {
            let base = baseline_of(c);
            let key = base.to_json();
            if !refs.contains_key(&key) {
                let z = if base == *c {
                    run.latents.clone()
                } else {
                    bench_one(&base, 1)?.latents
                };
                refs.insert(key.clone(), z);
            }
            refs.get(&key)
        } else {
            None
        };
        rows.push(record(&run, reference)?);
    }
    Ok(rows)
}

pub fn write_csv(mut out: impl Write, rows: &[BenchRecord]) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<bench csv>", e);
    writeln!(out, "{CSV_VERSION_LINE}").map_err(io)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(BenchRecord::COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// Parses a CSV written by [`write_csv`].
pub fn read_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let body = text
        .strip_prefix(CSV_VERSION_LINE)
        .and_then(|t| t.strip_prefix('\n'))
        .ok_or_else(|| Error::Format(format!("missing {CSV_VERSION_LINE:?} line")))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Format(format!("csv: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != BenchRecord::COLUMNS {
        return Err(Error::Format(format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("csv: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ConfigFile {
        ConfigFile::from_json(
            r#"{"n_total": 24, "chunk_len": 8, "delta": 3, "ddim_steps": 3,
                "latent": {"h": 12, "w": 12}, "toy": {"deep_blocks": 1}}"#,
        )
        .unwrap()
    }

    #[test]
    fn sweep_parsing() {
        let s: Sweep = "overlap_s=0,4,8".parse().unwrap();
        assert_eq!(s.values, vec![Value::from(0), Value::from(4), Value::from(8)]);
        let m: Sweep = "mask_variant=half,full".parse().unwrap();
        assert_eq!(m.values[1], Value::from("full"));
        assert!("overlap_s".parse::<Sweep>().is_err());
        assert!("=1".parse::<Sweep>().is_err());
    }

    #[test]
    fn expansion_is_a_product() {
        let sweeps = vec!["chunk_len=8,12".parse().unwrap(), "toy.deep_blocks=1,2,3".parse().unwrap()];
        let out = expand_sweeps(&small(), &sweeps, Some(0.25)).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!((out[0].chunk_len, out[0].toy.deep_blocks, out[0].overlap_s), (8, 1, 2));
        assert_eq!((out[5].chunk_len, out[5].toy.deep_blocks, out[5].overlap_s), (12, 3, 3));
        assert!(expand_sweeps(&small(), &["bogus=1".parse().unwrap()], None).is_err());
        assert!(expand_sweeps(&small(), &["chunk_len=99".parse().unwrap()], None).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let configs = expand_sweeps(&small(), &["policy=overlap,shift".parse().unwrap()], None).unwrap();
        let rows = run_bench(&configs, 1, true, |_| {}).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
        assert_eq!(
            lines.next(),
            Some("config,policy,S,delta,partial_frac,mask,full_chunks,partial_chunks,deep_flops,shallow_flops,wall_ms,frames,fps_proxy,flicker,ssim")
        );
        assert_eq!(read_csv(&text).unwrap(), rows);
        assert!(rows.iter().all(|r| r.ssim.is_some()));
        assert!(rows[1].partial_chunks > 0);
    }

    #[test]
    fn baseline_row_has_unit_ssim() {
        let c = ConfigFile {
            overlap_s: 0,
            policy: Policy::Overlap,
            ..small()
        };
        let rows = run_bench(&[c], 1, true, |_| {}).unwrap();
        assert_eq!(rows[0].ssim, Some(1.0));
        assert_eq!(rows[0].partial_chunks, 0);
    }
}

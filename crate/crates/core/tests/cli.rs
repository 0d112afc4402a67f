use std::path::Path;
use std::process::{Command, Output};

use shiftcache::cli_io::bench::read_csv;
use shiftcache::cli_io::load_latents;

fn shiftcache(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftcache"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn plan_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"n_total": 12, "chunk_len": 4, "delta": 2, "shift_mode": "fixed", "partial_fraction": 0}"#,
    );
    let o = shiftcache(&["plan", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let step0 = out.split("step 1 ").next().unwrap();
    assert!(step0.contains("  [0,4) full\n  [4,8) full\n  [8,12) full\n"), "{out}");
    let step1 = out.split("step 1 ").nth(1).unwrap().split("step 2 ").next().unwrap();
    assert!(step1.contains("  [0,2) full\n  [2,6) full\n  [6,10) full\n  [10,12) full\n"), "{out}");
    assert!(stderr(&o).contains(r#""delta":2"#));
}

#[test]
fn effective_config_lists_defaults() {
    let o = shiftcache(&["plan", "--ddim-steps", "2"]);
    assert!(o.status.success());
    let err = stderr(&o);
    for key in ["n_total", "staleness_cap", "seed", "toy", "latent", "mask_variant"] {
        assert!(err.contains(&format!("\"{key}\"")), "{key} missing from {err}");
    }
}

#[test]
fn sample_writes_latents_and_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z.lvt");
    let pgm = dir.path().join("frames");
    let stats = dir.path().join("stats.json");
    let o = shiftcache(&[
        "sample", "--denoiser", "oracle", "--n-total", "20", "--chunk-len", "8", "--delta", "3", "--ddim-steps", "5",
        "--latent-h", "6", "--latent-w", "4", "--out", out.to_str().unwrap(), "--pgm-dir", pgm.to_str().unwrap(),
        "--stats", stats.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let z = load_latents(&out).unwrap();
    assert_eq!(z.z.shape(), [20, 4, 6, 4]);
    assert!(stdout(&o).contains("max abs error vs target"));
    assert_eq!(std::fs::read_dir(&pgm).unwrap().count(), 20);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(s["steps"], 5);
}

#[test]
fn masks_command() {
    let o = shiftcache(&["masks", "--flags", "bgg", "--variant", "quarter"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "quarter [bgg]:\n0 0 0\nX 0 0\nX 0 0\n");
}

#[test]
fn select_frame_singleton_and_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let one = write(
        dir.path(),
        "one.json",
        r#"{"frames":[{"frame_index":7,"joints":{"neck":[0,0,1]}}]}"#,
    );
    let o = shiftcache(&["select-frame", "--keypoints", &one]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).ends_with("selected frame: 7\n"));

    let two = write(
        dir.path(),
        "two.json",
        r#"{"frames":[
            {"frame_index":0,"joints":{"neck":[0,0,1],"left_shoulder":[1,0,1],"left_elbow":[2,1,1]}},
            {"frame_index":1,"joints":{"neck":[0,0,1],"left_shoulder":[1,0,1],"left_elbow":[2,0,1]}}]}"#,
    );
    let o = shiftcache(&["select-frame", "--keypoints", &two]);
    assert!(stdout(&o).ends_with("selected frame: 1\n"), "{}", stdout(&o));
}

#[test]
fn failures_exit_nonzero_with_message() {
    let o = shiftcache(&["select-frame", "--keypoints", "/no/such/file.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/file.json"));

    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"chunk_length": 8}"#);
    let o = shiftcache(&["plan", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("chunk_length"));

    let o = shiftcache(&["bench", "--unknown-flag"]);
    assert!(!o.status.success());
    let o = shiftcache(&["sample"]);
    assert!(!o.status.success());
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("z{threads}.lvt"));
        let o = Command::new(env!("CARGO_BIN_EXE_shiftcache"))
            .env("SHIFTCACHE_THREADS", threads)
            .args([
                "sample", "--n-total", "24", "--chunk-len", "8", "--delta", "3", "--ddim-steps", "3", "--latent-h",
                "4", "--latent-w", "4", "--out", out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let o = Command::new(env!("CARGO_BIN_EXE_shiftcache"))
        .env("SHIFTCACHE_THREADS", "zero")
        .args(["plan"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn bench_csv_to_stdout() {
    let o = shiftcache(&[
        "bench", "--n-total", "16", "--chunk-len", "8", "--delta", "3", "--ddim-steps", "2", "--latent-h", "4",
        "--latent-w", "4", "--sweep", "mask_variant=full,half,quarter,causal",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3].mask, "causal");
    assert!(rows.iter().all(|r| r.ssim.is_none() && r.frames == 16));
}

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::process::Command;
use std::ptr;

use shiftcache_ffi::*;

fn take_string(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { sc_string_free(p) };
    s
}

fn last_error() -> String {
    let p = sc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn engine(json: &str) -> *mut ScEngine {
    let json = CString::new(json).unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { sc_engine_new(json.as_ptr(), &mut e) }, ScStatus::Ok);
    e
}

const SMALL: &str = r#"{"n_total": 12, "chunk_len": 4, "delta": 2, "shift_mode": "fixed",
    "partial_fraction": 0, "ddim_steps": 3, "denoiser": "oracle", "latent": {"h": 2, "w": 2}}"#;

#[test]
fn run_round_trip() {
    let e = engine(SMALL);
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { sc_engine_config_json(e, &mut cfg) }, ScStatus::Ok);
    assert!(take_string(cfg).contains(r#""denoiser":"oracle""#));

    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { sc_engine_plan_json(e, &mut plan) }, ScStatus::Ok);
    let plans: serde_json::Value = serde_json::from_str(&take_string(plan)).unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 3);
    assert_eq!(plans[1]["offset"], 2);

    let mut run = ptr::null_mut();
    assert_eq!(unsafe { sc_engine_run(e, &mut run) }, ScStatus::Ok);
    let mut dims = [0usize; 4];
    assert_eq!(unsafe { sc_run_dims(run, dims.as_mut_ptr()) }, ScStatus::Ok);
    assert_eq!(dims, [12, 4, 2, 2]);
    let n: usize = dims.iter().product();
    let mut buf = vec![0f32; n];
    assert_eq!(unsafe { sc_run_copy_latents(run, buf.as_mut_ptr(), n - 1) }, ScStatus::BufferTooSmall);
    assert!(last_error().contains("need"));
    assert_eq!(unsafe { sc_run_copy_latents(run, buf.as_mut_ptr(), n) }, ScStatus::Ok);
    assert!(buf.iter().all(|v| v.is_finite()) && buf.iter().any(|&v| v != 0.0));

    let mut stats = ptr::null_mut();
    assert_eq!(unsafe { sc_run_stats_json(run, &mut stats) }, ScStatus::Ok);
    let stats: serde_json::Value = serde_json::from_str(&take_string(stats)).unwrap();
    assert_eq!(stats["full_chunk_evals"], 3 + 4 + 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.lvt");
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sc_run_save_latents(run, c_path.as_ptr()) }, ScStatus::Ok);
    let z = shiftcache::cli_io::load_latents(&path).unwrap();
    assert_eq!(z.z.data(), &buf[..]);

    unsafe {
        sc_run_free(run);
        sc_engine_free(e);
        sc_engine_free(ptr::null_mut());
        sc_run_free(ptr::null_mut());
        sc_string_free(ptr::null_mut());
    }
}

#[test]
fn error_codes() {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { sc_engine_new(ptr::null(), &mut e) }, ScStatus::NullPointer);
    let bad = CString::new(r#"{"chunk_len": 0}"#).unwrap();
    assert_eq!(unsafe { sc_engine_new(bad.as_ptr(), &mut e) }, ScStatus::Config);
    assert!(last_error().contains("chunk_len"));
    let unknown = CString::new(r#"{"nope": 1}"#).unwrap();
    assert_eq!(unsafe { sc_engine_new(unknown.as_ptr(), &mut e) }, ScStatus::Format);
    let not_utf8 = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { sc_engine_new(not_utf8.as_ptr() as *const c_char, &mut e) },
        ScStatus::InvalidUtf8
    );
    assert!(e.is_null());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sc_engine_run(ptr::null(), &mut out) }, ScStatus::NullPointer);
    let missing = CString::new("/no/such/dir/z.lvt").unwrap();
    let e = engine(SMALL);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { sc_engine_run(e, &mut run) }, ScStatus::Ok);
    assert_eq!(unsafe { sc_run_save_latents(run, missing.as_ptr()) }, ScStatus::Io);
    unsafe {
        sc_run_free(run);
        sc_engine_free(e);
    }
}

#[test]
fn masks() {
    let good = [0u8, 1, 1];
    let mut allowed = [9u8; 9];
    let st = unsafe { sc_mask_build(ScMaskVariant::Half, good.as_ptr(), 3, allowed.as_mut_ptr()) };
    assert_eq!(st, ScStatus::Ok);
    assert_eq!(allowed, [0, 1, 1, 0, 1, 1, 0, 1, 1]);
    let st = unsafe { sc_mask_build(ScMaskVariant::Causal, good.as_ptr(), 3, allowed.as_mut_ptr()) };
    assert_eq!(st, ScStatus::Ok);
    assert_eq!(allowed, [1, 1, 1, 0, 1, 1, 0, 0, 1]);
    let bad = [0u8, 0];
    let st = unsafe { sc_mask_build(ScMaskVariant::Half, bad.as_ptr(), 2, allowed.as_mut_ptr()) };
    assert_eq!(st, ScStatus::Ok);
    assert_eq!(&allowed[..4], &[1, 1, 1, 1]);
    let st = unsafe { sc_mask_build(ScMaskVariant::Full, good.as_ptr(), 0, allowed.as_mut_ptr()) };
    assert_eq!(st, ScStatus::InvalidArgument);
}

#[test]
fn select_frame() {
    let json = CString::new(r#"{"frames":[{"frame_index":4,"joints":{}}]}"#).unwrap();
    let mut idx = usize::MAX;
    assert_eq!(unsafe { sc_select_frame(json.as_ptr(), 0.3, &mut idx) }, ScStatus::Ok);
    assert_eq!(idx, 4);
    let empty = CString::new(r#"{"frames":[]}"#).unwrap();
    assert_eq!(unsafe { sc_select_frame(empty.as_ptr(), 0.3, &mut idx) }, ScStatus::InvalidArgument);
}

#[test]
fn header_declares_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("shiftcache.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "sc_last_error", "sc_string_free", "sc_engine_new", "sc_engine_free", "sc_engine_config_json",
        "sc_engine_plan_json", "sc_engine_run", "sc_run_free", "sc_run_dims", "sc_run_copy_latents",
        "sc_run_stats_json", "sc_run_save_latents", "sc_mask_build", "sc_select_frame",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(text.contains("typedef struct ScEngine ScEngine;"));
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"shiftcache.h\"\nint main(void) { ScEngine *e = 0; return sc_engine_new(\"{}\", &e) == SC_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use kvtriage_ffi::*;

fn last_error() -> String {
    let p = kvt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Attention `[0.6, 0.25, 0.15, ~0]` with unscaled logits, projected values
/// `[1, 1, 10, 0]`; the last entry is the window entry.
unsafe fn e2_head() -> *mut KvtHead {
    let q = [1.0f32];
    let keys = [0.6f64.ln() as f32, 0.25f64.ln() as f32, 0.15f64.ln() as f32, -1e4];
    let values = [1.0f32, 1.0, 10.0, 0.0];
    let w_o = [1.0f32];
    let mut h = ptr::null_mut();
    let s = kvt_head_from_raw(0, 0, 4, 1, 1, 1, q.as_ptr(), keys.as_ptr(), values.as_ptr(), w_o.as_ptr(), &mut h);
    assert_eq!(s, KvtStatus::Ok);
    h
}

#[test]
fn version_is_a_string() {
    let v = unsafe { CStr::from_ptr(kvt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn worked_instance_through_the_abi() {
    let a = [0.6, 0.25, 0.15];
    let norms = [1.0, 1.0, 10.0];
    let projected = [1.0f32, 1.0, 10.0];
    let mut keep = [9u8; 3];
    let mut stage = [9u8; 3];
    unsafe {
        let s = kvt_select_perturbation_constrained(a.as_ptr(), norms.as_ptr(), 3, 2, 0.5, 1e-4, keep.as_mut_ptr(), stage.as_mut_ptr());
        assert_eq!(s, KvtStatus::Ok);
        assert_eq!(keep, [1, 0, 1]);
        assert_eq!(stage, [1, 0, 2]);
        let mut l = 0.0;
        assert_eq!(kvt_output_perturbation(a.as_ptr(), projected.as_ptr(), 3, 1, keep.as_ptr(), KvtMetric::L1 as u32, &mut l), KvtStatus::Ok);
        assert!((l - 0.45).abs() < 1e-6);
        let mut theta = 0.0;
        assert_eq!(kvt_theta_bound(a.as_ptr(), norms.as_ptr(), 3, keep.as_ptr(), &mut theta), KvtStatus::Ok);
        assert!(l <= theta + 1e-9);

        assert_eq!(kvt_select_attention_only(a.as_ptr(), 3, 2, keep.as_mut_ptr()), KvtStatus::Ok);
        assert_eq!(keep, [1, 1, 0]);
        assert_eq!(kvt_output_perturbation(a.as_ptr(), projected.as_ptr(), 3, 1, keep.as_ptr(), KvtMetric::L1 as u32, &mut l), KvtStatus::Ok);
        assert!((l - 1.35).abs() < 1e-6);
    }
}

#[test]
fn errors_set_status_and_message() {
    let a = [0.5, 0.5];
    let mut keep = [0u8; 2];
    unsafe {
        assert_eq!(kvt_select_attention_only(a.as_ptr(), 2, 3, keep.as_mut_ptr()), KvtStatus::Budget);
        assert!(last_error().contains("budget"), "{}", last_error());
        assert_eq!(kvt_select_attention_only(ptr::null(), 2, 1, keep.as_mut_ptr()), KvtStatus::NullPointer);
        assert!(last_error().contains("a is null"));
        assert_eq!(kvt_select_attention_only(a.as_ptr(), 2, 1, keep.as_mut_ptr()), KvtStatus::Ok);
        assert!(kvt_last_error_message().is_null());

        let mut out = 0.0;
        let projected = [1.0f32, 2.0];
        let zero = [0u8, 0];
        assert_eq!(kvt_output_perturbation(a.as_ptr(), projected.as_ptr(), 2, 1, zero.as_ptr(), 7, &mut out), KvtStatus::InvalidArgument);
        assert!(last_error().contains("metric"));
        assert_eq!(kvt_output_perturbation(a.as_ptr(), projected.as_ptr(), 2, 1, zero.as_ptr(), 0, &mut out), KvtStatus::DegenerateMask);
    }
}

#[test]
fn head_lifecycle_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer_000").join("head_000.kvhd");
    unsafe {
        let h = e2_head();
        let mut dims = KvtHeadDims::default();
        assert_eq!(kvt_head_dims(h, &mut dims), KvtStatus::Ok);
        assert_eq!((dims.entries, dims.window_rows, dims.head_dim, dims.model_dim), (4, 1, 1, 1));
        assert_eq!(kvt_head_write(h, cpath(&path).as_ptr()), KvtStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(kvt_head_read(cpath(&path).as_ptr(), &mut back), KvtStatus::Ok);
        let mut k1 = [0f32; 4];
        let mut k2 = [0f32; 4];
        assert_eq!(kvt_head_copy_keys(h, k1.as_mut_ptr(), 4), KvtStatus::Ok);
        assert_eq!(kvt_head_copy_keys(back, k2.as_mut_ptr(), 4), KvtStatus::Ok);
        assert_eq!(k1.map(f32::to_bits), k2.map(f32::to_bits));
        assert_eq!(kvt_head_copy_keys(back, k2.as_mut_ptr(), 3), KvtStatus::Shape);
        kvt_head_free(back);
        kvt_head_free(h);
        kvt_head_free(ptr::null_mut());

        std::fs::write(&path, b"KVHD\x07\0\0\0").unwrap();
        let mut bad = ptr::null_mut();
        assert_eq!(kvt_head_read(cpath(&path).as_ptr(), &mut bad), KvtStatus::Format);
        assert!(last_error().contains("head_000.kvhd"));
        assert!(bad.is_null());
        let missing = dir.path().join("missing.kvhd");
        assert_eq!(kvt_head_read(cpath(&missing).as_ptr(), &mut bad), KvtStatus::Io);
    }
}

#[test]
fn raw_construction_validates() {
    let one = [1.0f32];
    let nan = [f32::NAN];
    let mut h = ptr::null_mut();
    unsafe {
        let s = kvt_head_from_raw(0, 0, 1, 1, 1, 1, one.as_ptr(), nan.as_ptr(), one.as_ptr(), one.as_ptr(), &mut h);
        assert_eq!(s, KvtStatus::NonFinite);
        let s = kvt_head_from_raw(0, 0, 1, 2, 1, 1, one.as_ptr(), one.as_ptr(), one.as_ptr(), one.as_ptr(), &mut h);
        assert_ne!(s, KvtStatus::Ok);
        let s = kvt_head_from_raw(0, 0, 1, 1, 1, 1, one.as_ptr(), one.as_ptr(), ptr::null(), one.as_ptr(), &mut h);
        assert_eq!(s, KvtStatus::NullPointer);
        assert!(h.is_null());
    }
}

#[test]
fn eviction_through_the_abi() {
    let mut cfg = kvt_eviction_config_default();
    assert_eq!((cfg.window, cfg.pool_kernel, cfg.alpha), (32, 7, 0.5));
    cfg.window = 1;
    cfg.pool_kernel = 1;
    cfg.logit_scale = KvtLogitScale::None as u32;
    unsafe {
        let h = e2_head();
        let mut keep = [0u8; 4];
        let mut compacted = ptr::null_mut();
        assert_eq!(kvt_evict_head(h, 3, &cfg, keep.as_mut_ptr(), &mut compacted), KvtStatus::Ok);
        assert_eq!(keep, [1, 0, 1, 1]);
        let mut dims = KvtHeadDims::default();
        assert_eq!(kvt_head_dims(compacted, &mut dims), KvtStatus::Ok);
        assert_eq!(dims.entries, 3);
        kvt_head_free(compacted);

        assert_eq!(kvt_evict_head(h, 0, &cfg, keep.as_mut_ptr(), ptr::null_mut()), KvtStatus::Budget);
        assert!(last_error().contains("budget below window"));

        let heads = [h as *const KvtHead, h as *const KvtHead];
        let mut budgets = [0usize; 2];
        let mut masks = [0u8; 8];
        cfg.budget_count = 3;
        cfg.allocation = KvtAllocation::Adaptive as u32;
        assert_eq!(kvt_evict_layer(heads.as_ptr(), 2, &cfg, budgets.as_mut_ptr(), masks.as_mut_ptr()), KvtStatus::Ok);
        assert_eq!(budgets, [3, 3]);
        assert_eq!(masks, [1, 0, 1, 1, 1, 0, 1, 1]);

        cfg.selector = 5;
        assert_eq!(kvt_evict_layer(heads.as_ptr(), 2, &cfg, budgets.as_mut_ptr(), masks.as_mut_ptr()), KvtStatus::InvalidArgument);
        cfg.selector = KvtSelector::AttentionOnly as u32;
        cfg.pool_kernel = 4;
        assert_eq!(kvt_evict_head(h, 3, &cfg, keep.as_mut_ptr(), ptr::null_mut()), KvtStatus::InvalidArgument);
        kvt_head_free(h);
    }
}

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/kvtriage.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for symbol in ["kvt_head_read", "kvt_evict_layer", "KVT_STATUS_OK", "KVT_METRIC_L2", "typedef struct KvtHead KvtHead"] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
    let lib = target_dir().join("libkvtriage_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping C link check: no cc or {} missing", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "kvtriage.h"

int main(void) {
    double a[3] = {0.6, 0.25, 0.15};
    double norms[3] = {1.0, 1.0, 10.0};
    unsigned char keep[3];
    if (kvt_select_perturbation_constrained(a, norms, 3, 2, 0.5, 1e-4, keep, NULL) != KVT_STATUS_OK) return 1;
    if (!(keep[0] == 1 && keep[1] == 0 && keep[2] == 1)) return 2;
    if (kvt_select_attention_only(a, 3, 5, keep) != KVT_STATUS_BUDGET) return 3;
    if (kvt_last_error_message() == NULL) return 4;
    KvtEvictionConfig cfg = kvt_eviction_config_default();
    if (cfg.window != 32 || cfg.metric != KVT_METRIC_L1) return 5;
    printf("ok %s\n", kvt_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}

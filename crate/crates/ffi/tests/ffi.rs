use std::ffi::{CStr, CString};
use std::ptr;
use std::sync::Arc;

use beaconkv::compressor::{generate, CompressedCache, GenerateOptions, RatioPolicy, Session};
use beaconkv::model::{Model, ModelConfig};
use beaconkv_ffi::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        query_heads: 2,
        kv_heads: 1,
        head_dim: 4,
        intermediate_size: 16,
        vocab_size: 16,
        chunk_size: 8,
        ratio_set: vec![2, 4, 8],
        ..Default::default()
    }
}

fn checkpoint(dir: &tempfile::TempDir) -> (Model<f32>, CString) {
    let model = Model::<f32>::init(tiny(), 3).unwrap();
    let path = dir.path().join("m.bkv");
    model.save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(bkv_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn session_round_trip_matches_rust_api() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = checkpoint(&dir);
    let tokens: Vec<u32> = (0..20).map(|i| (i * 7 % 16) as u32).collect();
    let tail = [3u32, 5];

    let mut reference = Session::new(Arc::new(model), RatioPolicy::Constant(4));
    reference.append(&tokens).unwrap();
    let expected = reference
        .generate(&tail, &GenerateOptions::greedy(5, 4))
        .unwrap();

    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(bkv_model_load(path.as_ptr(), &mut m), BkvStatus::Ok);
        let mut w = 0;
        assert_eq!(bkv_model_chunk_size(m, &mut w), BkvStatus::Ok);
        assert_eq!(w, 8);
        let mut s = ptr::null_mut();
        let policy = CString::new("4").unwrap();
        assert_eq!(bkv_session_new(m, policy.as_ptr(), &mut s), BkvStatus::Ok);
        bkv_model_free(m);

        let mut chunks = 0;
        assert_eq!(
            bkv_session_append(s, tokens.as_ptr(), tokens.len(), &mut chunks),
            BkvStatus::Ok
        );
        assert_eq!(chunks, 3);
        let mut entries = 0;
        assert_eq!(bkv_session_entries(s, &mut entries), BkvStatus::Ok);
        assert_eq!(entries, reference.cache().m());

        let mut out = [0u32; 8];
        let mut n = 0;
        let st = bkv_session_generate(
            s,
            tail.as_ptr(),
            tail.len(),
            5,
            -1,
            out.as_mut_ptr(),
            out.len(),
            &mut n,
        );
        assert_eq!(st, BkvStatus::Ok);
        assert_eq!(&out[..n], expected.as_slice());

        let st = bkv_session_generate(
            s,
            tail.as_ptr(),
            tail.len(),
            5,
            -1,
            out.as_mut_ptr(),
            2,
            &mut n,
        );
        assert_eq!(st, BkvStatus::BufferTooSmall);
        assert_eq!(n, 0);

        let snap = dir.path().join("c.bkv");
        let snap_c = CString::new(snap.to_str().unwrap()).unwrap();
        assert_eq!(bkv_session_save(s, snap_c.as_ptr()), BkvStatus::Ok);
        let loaded = CompressedCache::<f32>::load(&tiny(), &snap).unwrap();
        assert_eq!(loaded.m(), entries);
        bkv_session_free(s);
    }
}

#[test]
fn empty_session_generates_like_vanilla() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = checkpoint(&dir);
    let empty = CompressedCache::empty(&model.config);
    let expected = generate(&model, &empty, &[1, 2, 3], &GenerateOptions::greedy(3, 2)).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(bkv_model_load(path.as_ptr(), &mut m), BkvStatus::Ok);
        let mut s = ptr::null_mut();
        let policy = CString::new("2").unwrap();
        assert_eq!(bkv_session_new(m, policy.as_ptr(), &mut s), BkvStatus::Ok);
        let mut out = [0u32; 3];
        let mut n = 0;
        let tail = [1u32, 2, 3];
        assert_eq!(
            bkv_session_generate(s, tail.as_ptr(), 3, 3, -1, out.as_mut_ptr(), 3, &mut n),
            BkvStatus::Ok
        );
        assert_eq!(&out[..n], expected.as_slice());
        bkv_session_free(s);
        bkv_model_free(m);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut m = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.bkv").unwrap();
        assert_eq!(bkv_model_load(missing.as_ptr(), &mut m), BkvStatus::Io);
        assert!(m.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(bkv_model_load(ptr::null(), &mut m), BkvStatus::NullPointer);
        assert!(last_error().contains("path"));

        let dir = tempfile::tempdir().unwrap();
        let (_, path) = checkpoint(&dir);
        assert_eq!(bkv_model_load(path.as_ptr(), &mut m), BkvStatus::Ok);
        let mut s = ptr::null_mut();
        for (policy, code) in [("3", BkvStatus::Config), ("fast", BkvStatus::Usage)] {
            let p = CString::new(policy).unwrap();
            assert_eq!(bkv_session_new(m, p.as_ptr(), &mut s), code, "{policy}");
            assert!(s.is_null());
        }
        bkv_model_free(m);
        bkv_model_free(ptr::null_mut());
        bkv_session_free(ptr::null_mut());

        let (mut full, mut beacon) = (0, 0);
        assert_eq!(
            bkv_kv_entries(100, 10, 3, &mut full, &mut beacon),
            BkvStatus::Config
        );
    }
}

#[test]
fn cost_model_entry_points() {
    unsafe {
        let (mut full, mut beacon) = (0u64, 0u64);
        assert_eq!(
            bkv_kv_entries(8192, 1024, 8, &mut full, &mut beacon),
            BkvStatus::Ok
        );
        assert_eq!((full, beacon), (8192, 1024));

        let preset = CString::new("llama2-7b").unwrap();
        let (mut f, mut b) = (0.0, 0.0);
        assert_eq!(
            bkv_flops(preset.as_ptr(), 262_144, 8, &mut f, &mut b),
            BkvStatus::Ok
        );
        assert!(f / b >= 4.0, "{}", f / b);

        let unknown = CString::new("gpt-x").unwrap();
        assert_eq!(
            bkv_flops(unknown.as_ptr(), 1024, 8, &mut f, &mut b),
            BkvStatus::Config
        );
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/beaconkv.h"))
            .unwrap();
    for name in [
        "bkv_last_error",
        "bkv_model_load",
        "bkv_model_free",
        "bkv_model_chunk_size",
        "bkv_session_new",
        "bkv_session_append",
        "bkv_session_generate",
        "bkv_session_entries",
        "bkv_session_save",
        "bkv_session_free",
        "bkv_flops",
        "bkv_kv_entries",
        "typedef struct BkvModel BkvModel",
        "BKV_STATUS_CONFIG_MISMATCH = 8",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

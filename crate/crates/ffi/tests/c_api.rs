use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use cxrl::cli::commands::pretrain_generator;
use cxrl::cli::{Checkpoint, Config};
use cxrl::numcore::{Precision, RngStream};
use cxrl::phantom::make_dataset_sized;
use cxrl::rewards::{ClassifierModel, DualEncoder, PostureModel};
use cxrl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        cxrl_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn write_rewards(path: &Path, side: usize) {
    let dim = side * side;
    let mut s = RngStream::new(1, "ffi-test");
    let mut ck = Checkpoint::new("rewards");
    ck.meta.insert("image_dim".into(), dim.to_string());
    ck.meta.insert("embed_dim".into(), "8".into());
    ck.meta.insert("temperature".into(), "0.07".into());
    ck.meta.insert("dataset_hash".into(), "x".into());
    ck.stores.insert("posture".into(), PostureModel::init(dim, Precision::F32, &mut s).unwrap().store().clone());
    ck.stores.insert("classifier".into(), ClassifierModel::init(dim, Precision::F32, &mut s).unwrap().store().clone());
    ck.stores.insert("dual".into(), DualEncoder::init(dim, 8, Precision::F32, &mut s).unwrap().store().clone());
    ck.save(path).unwrap();
}

#[test]
fn header_parses_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cxrl.h");
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cxrl.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let mut n = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
            n += 1;
        }
        if let Some(rest) = line.strip_prefix("pub const CXRL_") {
            let (name, value) = rest.split_once(": c_int = ").unwrap();
            let value = value.trim_end_matches(';');
            assert!(header.contains(&format!("#define CXRL_{name} {value}\n")), "CXRL_{name}");
        }
    }
    assert_eq!(n, 12);
}

#[test]
fn posture_reward_matches_hand_value() {
    let psi = [1.2, 0.9, 0.3, 0.4, std::f64::consts::FRAC_PI_2];
    let r = unsafe { cxrl_reward_align(psi.as_ptr()) };
    assert!((r + 0.95).abs() < 1e-12);
    assert!(unsafe { cxrl_reward_align(ptr::null()) }.is_nan());
    let v = unsafe { CStr::from_ptr(cxrl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = ptr::null_mut();
    let missing = cstr(&dir.path().join("none.ckpt"));
    assert_eq!(unsafe { cxrl_rewards_load(missing.as_ptr(), &mut out) }, CXRL_ERR_IO);
    assert!(last_error().contains("none.ckpt"));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"NOPE0000000000000000").unwrap();
    assert_eq!(unsafe { cxrl_rewards_load(cstr(&junk).as_ptr(), &mut out) }, CXRL_ERR_BAD_MAGIC);
    assert_eq!(unsafe { cxrl_rewards_load(ptr::null(), &mut out) }, CXRL_ERR_NULL);
    assert!(out.is_null());
}

#[test]
fn scoring_identical_images_gives_zero_comparative_terms() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rewards.ckpt");
    write_rewards(&path, 8);
    let mut models = ptr::null_mut();
    assert_eq!(unsafe { cxrl_rewards_load(cstr(&path).as_ptr(), &mut models) }, CXRL_OK);
    assert_eq!(unsafe { cxrl_rewards_image_side(models) }, 8);
    let img: Vec<f64> = (0..64).map(|i| (i % 7) as f64 / 7.0).collect();
    let report = CString::new("small left effusion .").unwrap();
    let labels = [1u8, 0, 0, 0];
    let lambda = [1.0, 10.0, 10.0];
    let mut out = CxrlRewardBreakdown::default();
    let rc = unsafe {
        cxrl_rewards_score(models, img.as_ptr(), img.as_ptr(), report.as_ptr(), labels.as_ptr(), lambda.as_ptr(), &mut out)
    };
    assert_eq!(rc, CXRL_OK, "{}", last_error());
    assert_eq!((out.r_diag, out.r_consist), (0.0, 0.0));
    assert_eq!(out.total, out.r_align);
    assert!(out.r_align <= 0.0);
    let mut bad = img.clone();
    bad[3] = f64::NAN;
    let rc = unsafe {
        cxrl_rewards_score(models, bad.as_ptr(), img.as_ptr(), report.as_ptr(), labels.as_ptr(), lambda.as_ptr(), &mut out)
    };
    assert_eq!(rc, CXRL_ERR_INVALID);
    unsafe { cxrl_rewards_free(models) };
}

#[test]
fn generator_sampling_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config {
        image_size: 8,
        hidden: 16,
        d_tau: 8,
        steps: 4,
        beta_min: Some(0.02),
        beta_max: Some(0.3),
        pretrain_steps: 2,
        pretrain_batch: 2,
        ..Config::default()
    };
    let data = make_dataset_sized(0, 4, 2, 8).unwrap();
    let store = pretrain_generator(&cfg, &data.train, |_, _| {}).unwrap();
    let mut ck = Checkpoint::new("generator");
    ck.config = cfg.pairs();
    ck.stores.insert("generator".into(), store);
    let path = dir.path().join("g.ckpt");
    ck.save(&path).unwrap();

    let mut gen = ptr::null_mut();
    assert_eq!(unsafe { cxrl_generator_load(cstr(&path).as_ptr(), &mut gen) }, CXRL_OK, "{}", last_error());
    let n = unsafe { cxrl_generator_image_len(gen) };
    assert_eq!(n, 64);
    let report = CString::new("no acute findings .").unwrap();
    let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    unsafe {
        assert_eq!(cxrl_generator_sample(gen, report.as_ptr(), 3, a.as_mut_ptr(), n), CXRL_OK);
        assert_eq!(cxrl_generator_sample(gen, report.as_ptr(), 3, b.as_mut_ptr(), n), CXRL_OK);
        assert_eq!(cxrl_generator_sample(gen, report.as_ptr(), 4, c.as_mut_ptr(), n), CXRL_OK);
        assert_eq!(cxrl_generator_sample(gen, report.as_ptr(), 4, c.as_mut_ptr(), n - 1), CXRL_ERR_BUFFER);
        cxrl_generator_free(gen);
    }
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn cli_entry_reports_usage_errors() {
    let args: Vec<CString> = ["cxrl", "no-such-command"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<*const std::ffi::c_char> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { cxrl_run_cli(2, ptrs.as_ptr()) }, 1);
    assert_eq!(unsafe { cxrl_run_cli(0, ptr::null()) }, 1);
}

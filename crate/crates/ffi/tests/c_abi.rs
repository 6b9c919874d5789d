use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use adverx::ingest::Scan;
use adverx::model::{AdverxModel as Model, ArchitectureConfig};
use adverx::patching::sample_patches;
use adverx::persistence::{save_model, ArchiveSubset};
use adverx::scoring::{patch_ood_scores, score_image, ScoreOptions};
use adverx_ffi::*;

fn toy_archive(dir: &Path, subset: ArchiveSubset) -> (PathBuf, Model<f32>) {
    let m = Model::<f32>::new(ArchitectureConfig::toy(), 5).unwrap();
    let p = dir.join("toy.axr");
    save_model(&m, &p, subset).unwrap();
    (p, m)
}

fn image(h: usize, w: usize) -> Scan {
    let px = (0..h * w)
        .map(|i| (((i * 7919) % 1000) as f32 / 1000.0) * 0.8 + 0.1)
        .collect();
    Scan::new(px, h, w, 16).unwrap()
}

fn load(p: &Path) -> *mut AdverxModel {
    let c = CString::new(p.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { adverx_model_load(c.as_ptr(), &mut h) }, AdverxStatus::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let p = adverx_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn scores_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (p, m) = toy_archive(dir.path(), ArchiveSubset::DiscriminatorOnly);
    let h = load(&p);

    let mut s = 0;
    assert_eq!(unsafe { adverx_model_patch_size(h, &mut s) }, AdverxStatus::Ok);
    assert_eq!(s, 16);
    let mut n = 0;
    assert_eq!(unsafe { adverx_model_discriminator_params(h, &mut n) }, AdverxStatus::Ok);
    assert_eq!(n, m.parameter_count().discriminator);

    let scan = image(64, 64);
    let batch = sample_patches(&scan, 8, 16, 0.2, 3).unwrap();
    let want = patch_ood_scores(&batch, &m).unwrap();
    let mut got = vec![0.0; 8];
    assert_eq!(
        unsafe { adverx_score_patches(h, batch.data().as_ptr(), 8, got.as_mut_ptr()) },
        AdverxStatus::Ok
    );
    assert_eq!(got, want);

    let want = score_image(&scan, &m, &ScoreOptions { k: 8, margin: 0.2, force_k: false }, 11).unwrap();
    let mut got = 0.0;
    let st = unsafe { adverx_score_image(h, scan.pixels().as_ptr(), 64, 64, 8, 0.2, 11, &mut got) };
    assert_eq!(st, AdverxStatus::Ok);
    assert_eq!(got, want.value);

    unsafe { adverx_model_free(h) };
}

#[test]
fn errors_map_to_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.axr").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { adverx_model_load(missing.as_ptr(), &mut h) }, AdverxStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nope.axr"));

    let junk = dir.path().join("junk.axr");
    std::fs::write(&junk, b"not an archive").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { adverx_model_load(junk.as_ptr(), &mut h) }, AdverxStatus::Archive);

    assert_eq!(unsafe { adverx_model_load(ptr::null(), &mut h) }, AdverxStatus::NullPointer);

    let (p, _) = toy_archive(dir.path(), ArchiveSubset::Full);
    let h = load(&p);
    let one = vec![0.5f32; 16 * 16];
    let mut out = [0.0];
    assert_eq!(unsafe { adverx_score_patches(h, one.as_ptr(), 1, out.as_mut_ptr()) }, AdverxStatus::Shape);
    assert!(last_error().contains("at least 2"));

    let mut v = 0.0;
    let tiny = image(10, 10);
    let st = unsafe { adverx_score_image(h, tiny.pixels().as_ptr(), 10, 10, 8, 0.2, 0, &mut v) };
    assert_eq!(st, AdverxStatus::Shape);
    let bad = vec![2.0f32; 64 * 64];
    let st = unsafe { adverx_score_image(h, bad.as_ptr(), 64, 64, 8, 0.2, 0, &mut v) };
    assert_eq!(st, AdverxStatus::Data);
    let st = unsafe { adverx_score_image(h, tiny.pixels().as_ptr(), 10, 10, 8, 0.2, 0, ptr::null_mut()) };
    assert_eq!(st, AdverxStatus::NullPointer);
    unsafe { adverx_model_free(h) };
    unsafe { adverx_model_free(ptr::null_mut()) };
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(adverx_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compile the C example against the generated header and the static
/// library, then check it prints the library's score.
#[test]
fn c_program_links_against_the_header() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libadverx_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("score");
    let st = Command::new(&cc)
        .arg(crate_dir.join("examples/score.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success(), "C example failed to compile");

    let (p, m) = toy_archive(dir.path(), ArchiveSubset::DiscriminatorOnly);
    let scan = image(256, 256);
    let png = dir.path().join("img.png");
    scan.write_png16(&png).unwrap();
    let out = Command::new(&bin).arg(&p).arg(&png).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    let reloaded = adverx::ingest::load_scan_auto(&png, &Default::default()).unwrap();
    let want = score_image(&reloaded, &m, &ScoreOptions::default(), 0).unwrap().value;
    assert_eq!(got, want);

    let out = Command::new(&bin).arg(dir.path().join("missing.axr")).arg(&png).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.axr"));
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc.to_string());
        }
    }
    Err(())
}

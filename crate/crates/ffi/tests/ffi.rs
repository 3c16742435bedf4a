use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use domain_balancing_ffi::*;

const CONFIG: &str = r#"{"synth":{"head_classes":8,"input_dim":6,"samples_per_class":4,"eval_samples_per_class":3},
 "model":{"hidden_dims":[8],"feature_dim":6,"dfi":{"k_neighbors":3}},
 "optim":{"epochs":2,"batch_size":8},"seed":5}"#;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = db_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn dataset_and_model_lifecycle() {
    let cfg = cstr(CONFIG);
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(db_dataset_generate(cfg.as_ptr(), &mut ds), DbStatus::Ok);
        let (mut n, mut c, mut d) = (0, 0, 0);
        assert_eq!(db_dataset_shape(ds, &mut n, &mut c, &mut d), DbStatus::Ok);
        assert_eq!((n, c, d), (14 * 7, 14, 6));

        let ds_path = cstr(dir.path().join("d.dbds").to_str().unwrap());
        assert_eq!(db_dataset_save(ds, ds_path.as_ptr()), DbStatus::Ok);
        let mut ds2 = ptr::null_mut();
        assert_eq!(db_dataset_load(ds_path.as_ptr(), &mut ds2), DbStatus::Ok);

        let mut model = ptr::null_mut();
        assert_eq!(db_model_init(cfg.as_ptr(), &mut model), DbStatus::Ok);
        assert_eq!(db_model_fit(model, ds2), DbStatus::Ok);
        assert_eq!(db_model_epoch(model), 2);
        assert_eq!(db_model_feature_dim(model), 6);

        let ck = cstr(dir.path().join("m.dbck").to_str().unwrap());
        assert_eq!(db_model_save(model, ck.as_ptr()), DbStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(db_model_load(ck.as_ptr(), &mut loaded), DbStatus::Ok);

        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = vec![0.0; 18];
        let mut b = vec![0.0; 18];
        assert_eq!(
            db_model_embed(model, x.as_ptr(), 3, 6, a.as_mut_ptr(), 18),
            DbStatus::Ok
        );
        assert_eq!(
            db_model_embed(loaded, x.as_ptr(), 3, 6, b.as_mut_ptr(), 18),
            DbStatus::Ok
        );
        assert_eq!(a, b);
        assert_eq!(
            db_model_embed(model, x.as_ptr(), 3, 6, a.as_mut_ptr(), 17),
            DbStatus::DimMismatch
        );

        let mut json = ptr::null_mut();
        assert_eq!(db_model_config_json(loaded, &mut json), DbStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        db_string_free(json);
        assert!(text.contains("\"arm\":\"full\""));

        db_model_free(model);
        db_model_free(loaded);
        db_dataset_free(ds);
        db_dataset_free(ds2);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(
            db_dataset_generate(ptr::null(), &mut ds),
            DbStatus::NullPointer
        );
        let bad = cstr("{\"synth\": 3}");
        assert_eq!(
            db_dataset_generate(bad.as_ptr(), &mut ds),
            DbStatus::InvalidConfig
        );
        assert!(last_error().contains("config"));
        let missing = cstr("/nonexistent/x.dbck");
        let mut m = ptr::null_mut();
        assert_eq!(db_model_load(missing.as_ptr(), &mut m), DbStatus::Io);
        assert!(m.is_null());
    }
}

#[test]
fn numeric_entry_points() {
    unsafe {
        let s = 0.5f64.sqrt();
        let w = [1.0, 0.0, s, s, -0.5, 0.75f64.sqrt()];
        let mut ic = [0.0; 3];
        let mut beta = [0.0; 3];
        assert_eq!(
            db_dfi_compute(
                w.as_ptr(),
                3,
                2,
                1,
                5.5,
                30.0,
                ic.as_mut_ptr(),
                beta.as_mut_ptr()
            ),
            DbStatus::Ok
        );
        assert!((ic[0] - 30.0 * s).abs() < 1e-12);
        assert!((beta[0] * ic[0] - 5.5).abs() < 1e-12);
        assert_eq!(
            db_dfi_compute(
                w.as_ptr(),
                3,
                2,
                3,
                5.5,
                30.0,
                ic.as_mut_ptr(),
                ptr::null_mut()
            ),
            DbStatus::InvalidConfig
        );

        let x = [1.0, 0.0];
        let labels = [0u32];
        let protos = [1.0, 0.0, 0.0, 1.0];
        let unit = [1.0, 1.0];
        let (mut cos, mut dbm) = (0.0, 0.0);
        let mut g = [0.0; 2];
        assert_eq!(
            db_loss_forward(
                DbLossKind::Cosface,
                x.as_ptr(),
                1,
                2,
                labels.as_ptr(),
                protos.as_ptr(),
                2,
                ptr::null(),
                2.0,
                0.35,
                &mut cos,
                g.as_mut_ptr(),
                ptr::null_mut()
            ),
            DbStatus::Ok
        );
        assert_eq!(
            db_loss_forward(
                DbLossKind::Dbm,
                x.as_ptr(),
                1,
                2,
                labels.as_ptr(),
                protos.as_ptr(),
                2,
                unit.as_ptr(),
                2.0,
                0.35,
                &mut dbm,
                ptr::null_mut(),
                ptr::null_mut()
            ),
            DbStatus::Ok
        );
        assert_eq!(cos, dbm);
        assert!((cos - (1.0 + (-1.3f64).exp()).ln()).abs() < 1e-12);

        let sims = [0.6, 0.7, 0.8, 0.1];
        let same = [1u8, 0, 1, 0];
        let (mut acc, mut thr) = (0.0, 0.0);
        assert_eq!(
            db_verification_accuracy(sims.as_ptr(), same.as_ptr(), 4, &mut acc, &mut thr),
            DbStatus::Ok
        );
        assert_eq!(acc, 0.75);
        assert_eq!(
            db_verification_accuracy(sims.as_ptr(), same.as_ptr(), 0, &mut acc, &mut thr),
            DbStatus::InvalidArgument
        );
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
}

#[test]
fn header_is_generated_and_compiles() {
    let header = crate_dir().join("include/domain_balancing.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "db_dataset_generate",
        "db_model_fit",
        "db_dfi_compute",
        "db_loss_forward",
        "db_verification_accuracy",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping compile check");
        return;
    };
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c_smoke.c"))
        .status()
        .unwrap();
    assert!(status.success());
}

/// Links the C smoke program against the static library when cargo has
/// produced one next to this test binary.
#[test]
fn c_program_runs_against_static_library() {
    let Some(cc) = compiler() else { return };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libdomain_balancing_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link check", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(cc)
        .args(["-std=c99", "-O1", "-I"])
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c_smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

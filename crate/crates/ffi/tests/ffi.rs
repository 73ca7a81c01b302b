use std::ffi::{CStr, CString};
use std::ptr;

use pulse_core::dataset::{generate_synthetic_dataset, write_fold_archive, Modality, SyntheticConfig};
use pulse_core::mae::{MaeConfig, PhysioMae};
use pulse_core::signal::{build_fold, process_all, PreprocessConfig, WindowSpec};
use pulse_ffi::*;

fn last_error() -> String {
    let p = pulse_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn auroc_and_error_reporting() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let l = [0u8, 0, 1, 1];
    let mut v = 0.0;
    assert_eq!(unsafe { pulse_auroc(s.as_ptr(), l.as_ptr(), 4, &mut v) }, PulseStatus::Ok);
    assert!((v - 0.75).abs() < 1e-12);
    assert!(pulse_last_error().is_null());

    let bad = [0u8, 2, 1, 1];
    assert_eq!(
        unsafe { pulse_auroc(s.as_ptr(), bad.as_ptr(), 4, &mut v) },
        PulseStatus::InvalidArgument
    );
    assert!(last_error().contains("not 0 or 1"));

    assert_eq!(unsafe { pulse_auroc(ptr::null(), l.as_ptr(), 4, &mut v) }, PulseStatus::NullPointer);
    assert_eq!(
        unsafe { pulse_auroc(s.as_ptr(), l.as_ptr(), 4, ptr::null_mut()) },
        PulseStatus::NullPointer
    );

    let one_class = [1u8; 4];
    assert_ne!(
        unsafe { pulse_auroc(s.as_ptr(), one_class.as_ptr(), 4, &mut v) },
        PulseStatus::Ok
    );
    assert!(!last_error().is_empty());
}

#[test]
fn binary_and_multiclass_metrics() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let l = [0u8, 0, 1, 1];
    let mut m = PulseBinaryMetrics::default();
    assert_eq!(unsafe { pulse_binary_metrics(s.as_ptr(), l.as_ptr(), 4, 0.5, &mut m) }, PulseStatus::Ok);
    assert!((m.accuracy - 0.75).abs() < 1e-12);
    assert!((m.auprc - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    let mut ap = 0.0;
    assert_eq!(unsafe { pulse_auprc(s.as_ptr(), l.as_ptr(), 4, &mut ap) }, PulseStatus::Ok);
    assert_eq!(ap, m.auprc);

    let probs = [0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.1, 0.2, 0.7];
    let cls = [0u32, 1, 2];
    assert_eq!(
        unsafe { pulse_macro_multiclass(probs.as_ptr(), cls.as_ptr(), 3, 3, &mut m) },
        PulseStatus::Ok
    );
    assert_eq!((m.auroc, m.accuracy), (1.0, 1.0));
}

#[test]
fn collapse_of_identical_rows() {
    let e = [1.0f32, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
    let mut c = PulseCollapse::default();
    assert_eq!(unsafe { pulse_collapse_diagnostics(e.as_ptr(), 3, 3, &mut c) }, PulseStatus::Ok);
    assert!((c.mean_pairwise_cosine - 1.0).abs() < 1e-9);
    assert_eq!(c.mean_feature_variance, 0.0);
}

fn small_fold_file(dir: &std::path::Path) -> std::path::PathBuf {
    let recs = generate_synthetic_dataset(&SyntheticConfig {
        n_subjects: 3,
        duration_s: 400.0,
        seed: 2,
        coupling: 0.8,
        three_class: false,
    })
    .unwrap();
    let cfg = PreprocessConfig {
        window: WindowSpec {
            stride_samples: 640,
            ..WindowSpec::default()
        },
        ..PreprocessConfig::default()
    };
    let subjects = process_all(&recs, &cfg).unwrap();
    let fold = build_fold(&subjects, 1).unwrap();
    let p = dir.join("fold_02.pfold");
    write_fold_archive(&fold, &p).unwrap();
    p
}

#[test]
fn fold_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(small_fold_file(dir.path()).to_str().unwrap()).unwrap();
    let mut f: *mut PulseFold = ptr::null_mut();
    assert_eq!(unsafe { pulse_fold_open(path.as_ptr(), &mut f) }, PulseStatus::Ok);
    let (mut id, mut ntr, mut nte) = (0u32, 0usize, 0usize);
    assert_eq!(unsafe { pulse_fold_info(f, &mut id, &mut ntr, &mut nte) }, PulseStatus::Ok);
    assert_eq!(id, 2);
    assert!(ntr > nte && nte > 0);
    unsafe { pulse_fold_free(f) };

    let missing = CString::new(dir.path().join("nope.pfold").to_str().unwrap()).unwrap();
    let mut g: *mut PulseFold = ptr::null_mut();
    assert_eq!(unsafe { pulse_fold_open(missing.as_ptr(), &mut g) }, PulseStatus::Io);
    assert!(g.is_null());
    unsafe { pulse_fold_free(ptr::null_mut()) };
}

#[test]
fn encoder_handle_embeds_windows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("BVP.ckpt");
    PhysioMae::new(MaeConfig::toy(8, 1), Modality::Bvp, 4)
        .unwrap()
        .save(&p, serde_json::Value::Null)
        .unwrap();
    let cp = CString::new(p.to_str().unwrap()).unwrap();
    let mut e: *mut PulseEncoder = ptr::null_mut();
    assert_eq!(unsafe { pulse_encoder_load(cp.as_ptr(), &mut e) }, PulseStatus::Ok);
    let (mut len, mut d) = (0usize, 0usize);
    assert_eq!(unsafe { pulse_encoder_shape(e, &mut len, &mut d) }, PulseStatus::Ok);
    assert_eq!(d, 8);
    let x: Vec<f32> = (0..2 * len).map(|i| (i as f32 * 0.01).sin()).collect();
    let mut a = vec![0f32; 2 * d];
    let mut b = vec![0f32; 2 * d];
    assert_eq!(unsafe { pulse_encoder_embed(e, x.as_ptr(), 2, a.as_mut_ptr()) }, PulseStatus::Ok);
    assert_eq!(unsafe { pulse_encoder_embed(e, x.as_ptr(), 2, b.as_mut_ptr()) }, PulseStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_ne!(a[..d], a[d..]);
    unsafe { pulse_encoder_free(e) };
}

#[test]
fn preset_run_through_the_abi() {
    let cfg = CString::new(
        "[model]\nenc_dim = 8\nenc_depth = 1\ndec_dim = 8\ndec_depth = 1\n\
         [pretrain]\nepochs = 1\nsteps_per_epoch = 2\n\
         [distill]\nepochs = 1\nsteps_per_epoch = 2\n\
         [finetune]\nepochs = 2\n\
         [synthetic]\nn_subjects = 3\nduration_s = 400.0\n\
         [preprocess.window]\nstride_samples = 640\n",
    )
    .unwrap();
    let preset = CString::new("C").unwrap();
    let mut r: *mut PulseReport = ptr::null_mut();
    let st = unsafe { pulse_run_preset(preset.as_ptr(), cfg.as_ptr(), ptr::null(), 3, &mut r) };
    assert_eq!(st, PulseStatus::Ok, "{}", if st == PulseStatus::Ok { String::new() } else { last_error() });
    let mut n = 0usize;
    assert_eq!(unsafe { pulse_report_n_folds(r, &mut n) }, PulseStatus::Ok);
    assert_eq!(n, 3);
    let mut m = PulseBinaryMetrics::default();
    assert_eq!(unsafe { pulse_report_fold(r, 0, &mut m) }, PulseStatus::Ok);
    assert!((0.0..=1.0).contains(&m.auroc));
    assert_eq!(unsafe { pulse_report_fold(r, 3, &mut m) }, PulseStatus::InvalidArgument);
    let (mut mean, mut sd) = (0.0, 0.0);
    assert_eq!(unsafe { pulse_report_auroc(r, &mut mean, &mut sd) }, PulseStatus::Ok);
    assert!(mean.is_finite() && sd >= 0.0);
    unsafe { pulse_report_free(r) };

    let bad = CString::new("F").unwrap();
    let mut r2: *mut PulseReport = ptr::null_mut();
    assert_eq!(
        unsafe { pulse_run_preset(bad.as_ptr(), ptr::null(), ptr::null(), 0, &mut r2) },
        PulseStatus::Config
    );
    assert!(last_error().contains("A, B, C, D, E"));
    let junk = CString::new("[model]\nwidth = 3\n").unwrap();
    assert_eq!(
        unsafe { pulse_run_preset(preset.as_ptr(), junk.as_ptr(), ptr::null(), 0, &mut r2) },
        PulseStatus::Config
    );
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(pulse_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pulse.h");
    assert!(header.exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ double v; uint8_t l[2] = {{0, 1}}; double s[2] = {{0.1, 0.9}};\n\
             PulseStatus st = pulse_auroc(s, l, 2, &v); return st == PULSE_STATUS_OK ? 0 : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc).arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg(&src).output() {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}

use molfusion_ffi::*;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; mf_last_error_length()];
    assert_eq!(unsafe { mf_last_error_message(buf.as_mut_ptr(), buf.len()) }, MfStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn parse(smiles: &str) -> *mut MfGraph {
    let s = CString::new(smiles).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { mf_graph_parse(s.as_ptr(), &mut g) }, MfStatus::Ok, "{}", last_error());
    g
}

#[test]
fn graph_queries() {
    let g = parse("c1ccccc1O");
    let (mut atoms, mut bonds) = (0, 0);
    assert_eq!(unsafe { mf_graph_size(g, &mut atoms, &mut bonds) }, MfStatus::Ok);
    assert_eq!((atoms, bonds), (7, 7));

    let mut need = 0;
    assert_eq!(
        unsafe { mf_graph_spectral_operator(g, ptr::null_mut(), 0, &mut need) },
        MfStatus::BufferTooSmall
    );
    assert_eq!(need, 49);
    let mut l = vec![0.0; need];
    assert_eq!(unsafe { mf_graph_spectral_operator(g, l.as_mut_ptr(), l.len(), ptr::null_mut()) }, MfStatus::Ok);
    let expected = molfusion::molgraph::spectral_operator(&molfusion::molgraph::parse_smiles("c1ccccc1O").unwrap());
    assert_eq!(l.as_slice(), expected.matrix.as_slice());

    assert_eq!(unsafe { mf_graph_scaffold(g, ptr::null_mut(), 0, &mut need) }, MfStatus::BufferTooSmall);
    let mut buf = vec![0 as c_char; need];
    assert_eq!(unsafe { mf_graph_scaffold(g, buf.as_mut_ptr(), buf.len(), &mut need) }, MfStatus::Ok);
    let key = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(need, key.len() + 1);
    let expected = molfusion::chem::murcko_scaffold(&molfusion::molgraph::parse_smiles("c1ccccc1O").unwrap());
    assert_eq!(key, expected.0);
    unsafe { mf_graph_free(g) };
}

#[test]
fn fingerprints_and_similarity() {
    let (a, b, c) = (parse("CCO"), parse("OCC"), parse("CCN"));
    let fp = |g| {
        let mut f = ptr::null_mut();
        assert_eq!(unsafe { mf_fingerprint_new(g, 2, 2048, &mut f) }, MfStatus::Ok);
        f
    };
    let (fa, fb, fc) = (fp(a), fp(b), fp(c));
    let mut sim = -1.0;
    assert_eq!(unsafe { mf_tanimoto(fa, fb, &mut sim) }, MfStatus::Ok);
    assert_eq!(sim, 1.0);
    assert_eq!(unsafe { mf_tanimoto(fa, fc, &mut sim) }, MfStatus::Ok);
    assert!(sim > 0.0 && sim < 1.0);

    let mut pop = 0;
    assert_eq!(unsafe { mf_fingerprint_popcount(fa, &mut pop) }, MfStatus::Ok);
    let mut bits = vec![0usize; pop];
    let mut need = 0;
    assert_eq!(unsafe { mf_fingerprint_bits(fa, bits.as_mut_ptr(), bits.len(), &mut need) }, MfStatus::Ok);
    assert_eq!(need, pop);
    assert!(bits.windows(2).all(|w| w[0] < w[1]) && bits.iter().all(|&b| b < 2048));

    let mut short = ptr::null_mut();
    assert_eq!(unsafe { mf_fingerprint_new(a, 2, 1024, &mut short) }, MfStatus::Ok);
    assert_eq!(unsafe { mf_tanimoto(fa, short, &mut sim) }, MfStatus::ShapeMismatch);
    assert!(!last_error().is_empty());
    unsafe {
        for f in [fa, fb, fc, short] {
            mf_fingerprint_free(f);
        }
        for g in [a, b, c] {
            mf_graph_free(g);
        }
    }
}

#[test]
fn errors_are_reported() {
    let mut g = ptr::null_mut();
    let bad = CString::new("C(C").unwrap();
    assert_eq!(unsafe { mf_graph_parse(bad.as_ptr(), &mut g) }, MfStatus::ParseError);
    assert!(g.is_null());
    assert!(last_error().contains("C(C"));

    assert_eq!(unsafe { mf_graph_parse(ptr::null(), &mut g) }, MfStatus::NullPointer);
    let invalid = [0xffu8 as c_char, 0];
    assert_eq!(unsafe { mf_graph_parse(invalid.as_ptr(), &mut g) }, MfStatus::InvalidUtf8);
    let ok = CString::new("C").unwrap();
    assert_eq!(unsafe { mf_graph_parse(ok.as_ptr(), ptr::null_mut()) }, MfStatus::NullPointer);

    assert_eq!(unsafe { mf_graph_parse(ok.as_ptr(), &mut g) }, MfStatus::Ok);
    assert_eq!(mf_last_error_length(), 1);
    unsafe {
        mf_graph_free(g);
        mf_graph_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(mf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn trained_archive(dir: &Path) -> PathBuf {
    use molfusion::llm::{LlmClient, ProviderConfig};
    use molfusion::pipeline::{self, random_split, LabeledDataset, TrainConfig};
    let pairs = molfusion::synth::affine_dataset(24, 6, 0.01, 3);
    let mut ds = LabeledDataset::from_pairs(pairs, vec!["y".into()], None).unwrap();
    let splits = random_split(ds.len(), [0.75, 0.125, 0.125], 0).unwrap();
    let cfg = TrainConfig { d: 8, heads: 2, head_dim: 4, epochs: 2, icl_k: 4, ..TrainConfig::default() };
    let client = LlmClient::new(ProviderConfig::default(), None);
    pipeline::enrich(&mut ds, &splits, &cfg, &client, &mut |_| {}).unwrap();
    let (model, _) = pipeline::train(&ds, &splits, &cfg, &mut |_| {}).unwrap();
    let path = dir.join("model.mfa");
    molfusion::archive::save(&model, &path).unwrap();
    path
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained_archive(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(cpath.as_ptr(), ptr::null(), &mut m) }, MfStatus::Ok, "{}", last_error());
    let mut c = 0;
    assert_eq!(unsafe { mf_model_target_count(m, &mut c) }, MfStatus::Ok);
    assert_eq!(c, 1);

    let smiles = CString::new("CCO").unwrap();
    let mut y = [f64::NAN; 1];
    assert_eq!(unsafe { mf_model_predict(m, smiles.as_ptr(), y.as_mut_ptr(), 1) }, MfStatus::Ok);
    let reference = molfusion::archive::load(&path).unwrap();
    let client = molfusion::llm::LlmClient::new(Default::default(), None);
    assert_eq!(y.to_vec(), reference.predict_smiles("CCO", &client).unwrap());

    assert_eq!(unsafe { mf_model_predict(m, smiles.as_ptr(), y.as_mut_ptr(), 0) }, MfStatus::BufferTooSmall);
    let bad = CString::new("C1C").unwrap();
    assert_eq!(unsafe { mf_model_predict(m, bad.as_ptr(), y.as_mut_ptr(), 1) }, MfStatus::ParseError);
    unsafe { mf_model_free(m) };

    let missing = CString::new(dir.path().join("nope.mfa").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mf_model_load(missing.as_ptr(), ptr::null(), &mut m) }, MfStatus::Io);
    assert!(m.is_null());

    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = dir.path().join("tampered.mfa");
    std::fs::write(&tampered, text.replacen("[standardizer]", "[standardiser]", 1)).unwrap();
    let t = CString::new(tampered.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mf_model_load(t.as_ptr(), ptr::null(), &mut m) }, MfStatus::ArchiveError);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/molfusion.h")).unwrap();
    for name in [
        "mf_last_error_length", "mf_last_error_message", "mf_version", "mf_graph_parse", "mf_graph_free",
        "mf_graph_size", "mf_graph_spectral_operator", "mf_graph_scaffold", "mf_fingerprint_new",
        "mf_fingerprint_free", "mf_fingerprint_popcount", "mf_fingerprint_bits", "mf_tanimoto", "mf_model_load",
        "mf_model_free", "mf_model_target_count", "mf_model_predict", "MF_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles the C smoke program against the header and static library.
/// Skipped when no C compiler is on PATH.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libmolfusion_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = std::process::Command::new(cc)
        .arg(manifest.join("tests/smoke.c"))
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("version "));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}

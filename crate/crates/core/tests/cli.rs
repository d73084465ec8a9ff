use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};

const BIN: &str = env!("CARGO_BIN_EXE_molfusion");

/// Small model so each training run takes a fraction of a second.
const FAST: &[&str] = &[
    "--set", "d=16", "--set", "heads=2", "--set", "head_dim=8", "--set", "epochs=3", "--set", "split=random",
];

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Out {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Out {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let o = cmd.output().expect("binary runs");
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8(o.stdout).unwrap(),
        stderr: String::from_utf8(o.stderr).unwrap(),
    }
}

fn dataset(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("data.csv");
    let rows = molfusion::synth::affine_dataset(n, 8, 0.01, seed);
    std::fs::write(&path, molfusion::synth::to_csv(&rows, &["y"])).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> (Out, PathBuf) {
    let archive = dir.join(name);
    let mut args = vec!["train", "--data", s(data), "--out", s(&archive)];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(out.code, 0, "{}", out.stderr);
    (out, archive)
}

fn log_of(archive: &Path) -> String {
    let mut p = archive.as_os_str().to_owned();
    p.push(".log");
    std::fs::read_to_string(PathBuf::from(p)).unwrap()
}

#[test]
fn describe_second_run_is_all_cache_hits() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 12, 1);
    let cache = dir.path().join("cache");
    let args = ["describe", "--data", s(&data), "--cache-dir", s(&cache)];
    let first = run(&args);
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert!(first.stdout.contains("molecules=12 dropped=0 cache_hits=0 provider_calls=168"), "{}", first.stdout);
    let second = run(&args);
    assert!(second.stdout.contains("cache_hits=168 provider_calls=0 hit_rate=1.000000"), "{}", second.stdout);
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 40, 2);
    let (out, archive) = train(dir.path(), &data, "m.mfa", &[]);
    assert!(out.stdout.contains("metrics split=test n=4 task=regression"), "{}", out.stdout);
    let log = log_of(&archive);
    assert!(log.contains("epoch=3 train_loss="));
    assert!(log.contains("split method=random seed=0 train=32 valid=4 test=4"), "{log}");

    let eval = run(&["eval", "--archive", s(&archive), "--data", s(&data), "--split", "train"]);
    assert_eq!(eval.code, 0, "{}", eval.stderr);
    assert!(eval.stdout.contains("metrics split=train n=32 "), "{}", eval.stdout);
    let all = run(&["eval", "--archive", s(&archive), "--data", s(&data), "--split", "all"]);
    assert!(all.stdout.contains("metrics split=all n=40 "), "{}", all.stdout);

    let p = run(&["predict", "--archive", s(&archive), "--smiles", "CCO"]);
    assert_eq!(p.code, 0, "{}", p.stderr);
    let line = p.stdout.trim();
    let v: f64 = line.rsplit_once("y=").unwrap().1.parse().unwrap();
    assert!(v.is_finite());
    assert_eq!(run(&["predict", "--archive", s(&archive), "--smiles", "CCO"]).stdout, p.stdout);
}

#[test]
fn predict_with_invalid_smiles_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 30, 3);
    let (_, archive) = train(dir.path(), &data, "m.mfa", &[]);
    let out = run(&["predict", "--archive", s(&archive), "--smiles", "C1CC"]);
    assert_eq!(out.code, 2);
    let last = out.stderr.lines().last().unwrap();
    assert!(last.starts_with("error kind=data exit=2 message="), "{last}");
}

#[test]
fn seg_ablation_drops_text_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 30, 4);
    let (_, full) = train(dir.path(), &data, "full.mfa", &[]);
    let (_, ablated) = train(dir.path(), &data, "seg.mfa", &["--ablate", "seg"]);
    let manifest = |p: &Path| -> Vec<String> {
        let text = std::fs::read_to_string(p).unwrap();
        let mut lines = text.lines().skip_while(|l| !l.starts_with("[manifest]"));
        let n: usize = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
        lines.take(n).map(|l| l.split(' ').next().unwrap().to_string()).collect()
    };
    let a = manifest(&full);
    let b = manifest(&ablated);
    assert!(a.iter().any(|n| n.starts_with("text.")));
    assert!(!b.iter().any(|n| n.starts_with("text.")), "{b:?}");
    // Without a text branch there is nothing for cross-modal attention to attend over.
    let expected: Vec<&String> = a
        .iter()
        .filter(|n| !n.starts_with("text.") && !n.starts_with("fusion."))
        .collect();
    assert_eq!(b.iter().collect::<Vec<_>>(), expected);
    assert!(!std::fs::read_to_string(&ablated).unwrap().contains("\n[vocab]"));
    assert!(log_of(&ablated).contains("descriptions=0"));
}

#[test]
fn icl_k_sets_demo_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 40, 5);
    let (_, four) = train(dir.path(), &data, "k4.mfa", &["--icl-k", "4"]);
    let (_, sixteen) = train(dir.path(), &data, "k16.mfa", &[]);
    assert!(log_of(&four).contains("demos_min=4 demos_max=4"), "{}", log_of(&four));
    assert!(log_of(&sixteen).contains("demos_min=16 demos_max=16"));
}

#[test]
fn seeded_training_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 30, 6);
    let (_, a) = train(dir.path(), &data, "a.mfa", &["--seed", "7"]);
    let (_, b) = train(dir.path(), &data, "b.mfa", &["--seed", "7"]);
    let (_, c) = train(dir.path(), &data, "c.mfa", &["--seed", "8"]);
    assert_eq!(log_of(&a), log_of(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(log_of(&a), log_of(&c));
}

#[test]
fn fingerprint_output_is_stable() {
    let a = run(&["fp", "--smiles", "c1ccccc1O"]);
    assert_eq!(a.code, 0);
    assert_eq!(a.stdout, run(&["fp", "--smiles", "Oc1ccccc1"]).stdout.replace("Oc1ccccc1", "c1ccccc1O"));
    let head = a.stdout.lines().next().unwrap();
    let pop: usize = head.rsplit_once("popcount=").unwrap().1.parse().unwrap();
    let bits = a.stdout.lines().nth(1).unwrap().trim_start_matches("bits=");
    assert_eq!(bits.split(',').count(), pop);
    assert_eq!(run(&["fp", "--smiles", "C1C"]).code, 2);
}

#[test]
fn scaffold_demos_are_sorted_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 50, 7);
    let args = ["demos", "--data", s(&data), "--smiles", "CC(O)C", "--k", "8"];
    let a = run(&args);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, run(&args).stdout);
    let sims: Vec<f64> = a
        .stdout
        .lines()
        .skip(2)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(sims.len(), 8);
    assert!(sims.windows(2).all(|w| w[0] >= w[1]), "{sims:?}");
}

#[test]
fn config_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let defaults = run(&["config"]);
    assert_eq!(defaults.code, 0);
    assert_eq!(molfusion::config::RunConfig::parse(&defaults.stdout).unwrap(), Default::default());

    let changed = run(&["config", "--set", "lr=0.0005", "--ablate", "peg,moe", "--seed", "9"]);
    let path = dir.path().join("run.conf");
    std::fs::write(&path, &changed.stdout).unwrap();
    let back = run(&["config", "--config", s(&path)]);
    assert_eq!(back.stdout, changed.stdout);
    assert!(back.stdout.contains("ablations = peg,moe\n"), "{}", back.stdout);

    let bad = run(&["config", "--set", "lr_typo=1"]);
    assert_eq!(bad.code, 1);
    assert!(bad.stderr.contains("error kind=usage exit=1"));
}

#[test]
fn missing_api_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, 8);
    let out = run(&[
        "describe",
        "--data",
        s(&data),
        "--provider",
        "http",
        "--set",
        "provider.endpoint=http://127.0.0.1:9/v1",
        "--set",
        "provider.api_key_env=MOLFUSION_TEST_UNSET_KEY",
    ]);
    assert_eq!(out.code, 1, "{}", out.stderr);
    assert!(out.stderr.contains("MOLFUSION_TEST_UNSET_KEY is not set"), "{}", out.stderr);
}

#[test]
fn unreachable_endpoint_is_a_provider_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 3, 9);
    let endpoint = format!("provider.endpoint=http://127.0.0.1:{port}/v1");
    let out = run_env(
        &[
            "describe", "--data", s(&data), "--provider", "http", "--set", &endpoint, "--set",
            "provider.api_key_env=MF_KEY", "--set", "provider.retries=0",
        ],
        &[("MF_KEY", "k")],
    );
    assert_eq!(out.code, 3, "{}", out.stderr);
    assert!(out.stderr.contains("error kind=provider exit=3"));
}

/// Answers every request with `body`, recording the request heads and bodies.
fn serve(body: &'static str) -> (u16, Arc<Mutex<Vec<(String, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((head, String::from_utf8(buf).unwrap()));
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    (port, seen)
}

#[test]
fn http_provider_posts_prompts_and_caches_replies() {
    let (port, seen) = serve("About 2.5 in total.");
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 3, 10);
    let cache = dir.path().join("cache");
    let endpoint = format!("provider.endpoint=http://127.0.0.1:{port}/v1/complete");
    let args = [
        "describe", "--data", s(&data), "--cache-dir", s(&cache), "--provider", "http", "--set", &endpoint, "--set",
        "provider.api_key_env=MF_KEY", "--set", "provider.model=test-model",
    ];
    let first = run_env(&args, &[("MF_KEY", "secret-1")]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert!(first.stdout.contains("provider_calls=42"), "{}", first.stdout);
    {
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 42);
        let (head, body) = &seen[0];
        assert!(head.starts_with("POST /v1/complete HTTP/1.1"), "{head}");
        assert!(head.to_ascii_lowercase().contains("authorization: bearer secret-1"), "{head}");
        let json: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(json["model"], "test-model");
        assert_eq!(json["top_p"], 1.0);
        assert_eq!(json["temperature"], 0.0);
        assert!(json["prompt"].as_str().unwrap().contains("SMILES"));
    }
    let second = run_env(&args, &[("MF_KEY", "secret-1")]);
    assert!(second.stdout.contains("cache_hits=42 provider_calls=0"), "{}", second.stdout);
    assert_eq!(seen.lock().unwrap().len(), 42);
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--trials", "1"]);
    assert_eq!(out.code, 0, "{}", out.stdout);
    assert!(out.stdout.lines().last().unwrap().ends_with("result=pass"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["nonsense"]).code, 1);
    let out = run(&["train", "--set", "epochs=2"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("error kind=usage"), "{}", out.stderr);
    assert_eq!(run(&["--help"]).code, 0);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use ttm_core::formats::{read_latent, write_latent};
use ttm_core::synthdata::{generate_dataset, DatasetSpec};
use ttm_core::Tensor;

const PROMPT: &str = "a calm piano track with a slow tempo";

fn ttm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttm"))
        .args(args)
        .env("TTM_OUTPUT_ROOT", root)
        .current_dir(root)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = ttm(root, args);
    assert!(
        out.status.success(),
        "ttm {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn toy_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.toml")
        .to_string_lossy()
        .into_owned()
}

fn digest(dir: &Path) -> String {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p)
            } else {
                files.push(p)
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(f).unwrap());
    }
    hex::encode(h.finalize())
}

/// A root with a small dataset at the default location.
fn with_data() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "--n-train", "32", "--n-val", "8", "--n-test", "8"]);
    tmp
}

/// A root with a toy run trained to completion in `run/`.
fn with_run() -> TempDir {
    let tmp = with_data();
    ok(tmp.path(), &["train", "--quiet", "--config", &toy_config(), "--out", "run"]);
    tmp
}

#[test]
fn gen_data_defaults_and_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["gen-data"]);
    ok(b.path(), &["gen-data", "--out", "elsewhere"]);
    let manifest = fs::read_to_string(a.path().join("data/manifest.toml")).unwrap();
    for line in ["n_train = 512", "n_val = 64", "n_test = 64"] {
        assert!(manifest.contains(line), "{line}");
    }
    assert_eq!(digest(&a.path().join("data")), digest(&b.path().join("elsewhere")));
    // Refuses to overwrite unless forced.
    assert_eq!(ttm(a.path(), &["gen-data"]).status.code(), Some(1));
    ok(a.path(), &["gen-data", "--force", "--seed", "1", "--n-train", "8", "--n-val", "2", "--n-test", "2"]);
}

#[test]
fn gen_data_rejects_bad_grammar() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("grammar.toml");
    fs::write(&g, "template = \"a {mood} track\"\n[[slots]]\nname = \"instrument\"\nvalues = [\"piano\"]\n").unwrap();
    assert_eq!(ttm(tmp.path(), &["gen-data", "--grammar", g.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(ttm(tmp.path(), &["gen-data", "--n-train", "lots"]).status.code(), Some(2));
}

#[test]
fn config_errors_are_usage_errors() {
    let tmp = with_data();
    let bad = tmp.path().join("bad.toml");
    let text = fs::read_to_string(toy_config()).unwrap().replace("[train]", "[train]\nlearning_rat = 1.0");
    fs::write(&bad, text).unwrap();
    let out = ttm(tmp.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert_eq!(ttm(tmp.path(), &["train", "--config", "missing.toml"]).status.code(), Some(2));
}

#[test]
fn dry_run_reports_parameters_without_training() {
    let tmp = with_data();
    let out = ok(tmp.path(), &["train", "--dry-run", "--config", &toy_config(), "--out", "run"]);
    assert!(out.contains("parameters: "), "{out}");
    assert!(!tmp.path().join("run/checkpoints").exists());
}

#[test]
fn train_writes_checkpoints_and_resumes_identically() {
    let tmp = with_run();
    let run = tmp.path().join("run");
    for f in ["config.toml", "metrics.jsonl", "best_checkpoint.txt", "checkpoints/step-0000020.ttmc"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![20, 40]);

    ok(
        tmp.path(),
        &["train", "--quiet", "--config", &toy_config(), "--out", "resumed", "--resume", "run/checkpoints/step-0000020.ttmc"],
    );
    let last = "checkpoints/step-0000040.ttmc";
    assert_eq!(fs::read(run.join(last)).unwrap(), fs::read(tmp.path().join("resumed").join(last)).unwrap());
}

#[test]
fn sampling_is_deterministic_and_omega_zero_is_unconditional() {
    let tmp = with_run();
    let root = tmp.path();
    let ck = "run/checkpoints/step-0000040.ttmc";
    let base = ["sample", "--checkpoint", ck];
    let run = |extra: &[&str], out: &str| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out]);
        ok(root, &args);
        root.join(out)
    };
    let a = run(&["--prompt", PROMPT, "--steps", "5", "--num", "2"], "a");
    let b = run(&["--prompt", PROMPT, "--steps", "5", "--num", "2"], "b");
    assert_eq!(digest(&a), digest(&b));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("sample-000000.json")).unwrap()).unwrap();
    assert_eq!(manifest["prompt"], PROMPT);
    assert_eq!(manifest["num_sampling_steps"], 5);

    let zero = run(&["--prompt", PROMPT, "--steps", "5", "--num", "2", "--omega", "0"], "zero");
    let uncond = run(&["--unconditional", "--steps", "5", "--num", "2"], "uncond");
    for i in 0..2 {
        let f = format!("sample-{i:06}.lat");
        let z: Tensor<f32> = read_latent(&zero.join(&f)).unwrap();
        let u: Tensor<f32> = read_latent(&uncond.join(&f)).unwrap();
        assert_eq!(z, u);
    }
    let one = run(&["--prompt", PROMPT, "--steps", "1", "--num", "1"], "one");
    assert!(one.join("sample-000000.lat").exists());
    assert_eq!(ttm(root, &["sample", "--checkpoint", ck]).status.code(), Some(2));
    assert_eq!(ttm(root, &["sample", "--checkpoint", "nope.ttmc", "--prompt", PROMPT]).status.code(), Some(1));
}

fn eval_report(root: &Path, args: &[&str]) -> serde_json::Value {
    ok(root, args);
    let out = args.iter().position(|a| *a == "--out").map(|i| args[i + 1]).unwrap();
    serde_json::from_str(&fs::read_to_string(root.join(out)).unwrap()).unwrap()
}

#[test]
fn eval_self_comparison_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    let r = eval_report(
        tmp.path(),
        &["eval", "--generated", "data", "--reference", "data", "--kl", "--out", "self.json"],
    );
    assert!(r["fad"].as_f64().unwrap().abs() <= 1e-8, "{r}");
    assert_eq!(r["kl"].as_f64(), Some(0.0));
    assert_eq!(r["n_generated"], 64);
}

#[test]
fn eval_separates_disjoint_classes_and_needs_pairs_for_kl() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ds = generate_dataset(&DatasetSpec::new(9, 256, 0, 0)).unwrap();
    let write = |dir: &str, pick: &dyn Fn(usize, &[usize]) -> bool| {
        fs::create_dir_all(root.join(dir)).unwrap();
        for (i, e) in ds.examples.iter().enumerate().filter(|(i, e)| pick(*i, &e.attributes)) {
            write_latent(&root.join(dir).join(format!("{i:05}.lat")), &e.latent).unwrap();
        }
    };
    // Two halves of the piano examples versus the violin examples.
    write("piano-a", &|i, a| a[0] == 0 && i % 2 == 0);
    write("piano-b", &|i, a| a[0] == 0 && i % 2 == 1);
    write("violin", &|_, a| a[0] == 2);
    let fad = |g: &str, r: &str| {
        eval_report(root, &["eval", "--generated", g, "--reference", r, "--out", "r.json"])["fad"]
            .as_f64()
            .unwrap()
    };
    let same = fad("piano-a", "piano-b");
    let apart = fad("piano-a", "violin");
    assert!(apart > 5.0 * same && apart > 1.0, "same class {same}, disjoint {apart}");

    let out = ttm(root, &["eval", "--generated", "piano-a", "--reference", "piano-b", "--kl", "--out", "r.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("prompt"));
}

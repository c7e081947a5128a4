use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ptopk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptopk"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

const TINY: [&str; 14] = [
    "--set", "image_size=32",
    "--set", "train=24",
    "--set", "val=8",
    "--set", "test=8",
    "--set", "batch_size=4",
    "--samples", "20",
    "--steps", "3",
];

fn train_tiny(out: &Path, seed: &str) -> Output {
    let mut args = vec!["train", "--seed", seed, "--out", out.to_str().unwrap()];
    args.extend(TINY);
    ptopk(&args)
}

#[test]
fn gendata_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&ptopk(&["gendata", "--seed", seed, "--out", out.to_str().unwrap(), "--set", "image_size=32", "--set", "train=20"]));
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a = run("a", "5");
    assert!(!a.is_empty());
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn train_writes_headers_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&train_tiny(&a, "3"));
    ok(&train_tiny(&b, "3"));
    assert_eq!(first_line(&a.join("metrics.csv")), "step,loss,accuracy,sigma,lr,scorer_grad_norm,entropy");
    assert_eq!(first_line(&a.join("eval.csv")), "split,count,accuracy");
    assert!(a.join("config.txt").is_file());
    assert!(a.join("checkpoint").join("manifest.txt").is_file());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("eval.csv")).unwrap(), fs::read(b.join("eval.csv")).unwrap());

    let c = dir.path().join("c");
    let ckpt = a.join("checkpoint");
    let mut args = vec!["eval", "--seed", "3", "--out", c.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(TINY);
    ok(&ptopk(&args));
    assert_eq!(fs::read(a.join("eval.csv")).unwrap(), fs::read(c.join("eval.csv")).unwrap());
}

#[test]
fn bench_writes_median_and_trial_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&ptopk(&[
        "bench", "--out", out.to_str().unwrap(),
        "--set", "image_size=32",
        "--set", "bench_ks=1,2",
        "--set", "bench_samples=10",
        "--set", "bench_trials=2",
        "--set", "bench_images=2",
    ]));
    assert_eq!(first_line(&out.join("bench.csv")), "selector,K,n,images_per_s");
    assert_eq!(fs::read_to_string(out.join("bench.csv")).unwrap().lines().count(), 1 + 2 * 2);
    assert_eq!(first_line(&out.join("bench_trials.csv")), "selector,K,n,trial,images_per_s");
}

#[test]
fn invalid_values_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for (args, key) in [
        (vec!["gendata", "--task", "billiards", "--out", out], "task"),
        (vec!["train", "--sigma0=-1", "--out", out], "sigma0"),
        (vec!["train", "--set", "classes=4", "--out", out], "classes"),
        (vec!["train", "--set", "sigma=0.1", "--out", out], "sigma"),
    ] {
        let res = ptopk(&args);
        assert!(!res.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&res.stderr);
        assert!(err.contains(key), "{args:?}: {err}");
    }
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let res = ptopk(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("checkpoint"));
}

#[test]
fn corrupted_backward_fails_gradcheck_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let res = ptopk(&["gradcheck", "--corrupt-backward", "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("n2_backward"), "{err}");
    assert_eq!(first_line(&out.join("gradcheck.csv")), "check,value,reference,tolerance,pass");
}

#[test]
fn config_file_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, "k=3\nsigma0=0.2\n").unwrap();
    let out = dir.path().join("t");
    let mut args = vec![
        "train", "--config", cfg.to_str().unwrap(), "--sigma0", "0.3", "--set", "k=4",
        "--out", out.to_str().unwrap(),
    ];
    args.extend(TINY);
    ok(&ptopk(&args));
    let text = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(text.lines().any(|l| l == "k=4"), "{text}");
    assert!(text.lines().any(|l| l == "sigma0=0.3"), "{text}");
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY_BENCH: &str = r#"
[bench]
bsz = 2
seq = 16
warmup = 0
iterations = 1

[bench.model]
n_layers = 1
d_model = 32
n_heads = 4
d_ffn = 64
vocab_size = 64
max_seq = 64
"#;

fn backsieve(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backsieve"))
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .env_remove("BACKSIEVE_OUTPUT_DIR")
        .env_remove("BACKSIEVE_WORKERS")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn step_losses(dir: &Path) -> Vec<(u64, f64)> {
    fs::read_to_string(dir.join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["event"] == "step")
        .map(|v| (v["step"].as_u64().unwrap(), v["loss"].as_f64().unwrap()))
        .collect()
}

#[test]
fn trace_writes_a_deterministic_plan() {
    let dir = tempfile::tempdir().unwrap();
    let o = backsieve(dir.path(), &["trace"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("entries: 142"), "{out}");
    assert!(out.contains("structure_hash: "));
    let first = fs::read(dir.path().join("plan.bin")).unwrap();
    let o = backsieve(dir.path(), &["trace"]);
    assert!(o.status.success());
    assert_eq!(fs::read(dir.path().join("plan.bin")).unwrap(), first);
    let echo: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["model"]["d_model"], 32);
    assert_eq!(echo["entries"], 142);
}

#[test]
fn marker_collision_exits_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let o = backsieve(
        dir.path(),
        &[
            "trace",
            "--set",
            "model.d_model=1009",
            "--set",
            "model.n_heads=1",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("pick different primes"), "{}", text(&o));
    let o = backsieve(
        dir.path(),
        &[
            "trace",
            "--set",
            "model.d_model=1009",
            "--set",
            "model.n_heads=1",
            "--auto-markers",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        backsieve(dir.path(), &["trace", "--set", "no_such_key=1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        backsieve(dir.path(), &["train", "--k-percent", "0"])
            .status
            .code(),
        Some(2)
    );
    let o = backsieve(dir.path(), &["train", "--mode", "collider", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("backsieve trace"), "{}", text(&o));
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        backsieve(
            dir.path(),
            &["--config", missing.to_str().unwrap(), "trace"]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn regular_training_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = backsieve(
        dir.path(),
        &[
            "train",
            "--mode",
            "regular",
            "--steps",
            "200",
            "--set",
            "train.checkpoint_every=0",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let losses = step_losses(dir.path());
    assert_eq!(losses.len(), 200);
    let head: f64 = losses[..10].iter().map(|l| l.1).sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().map(|l| l.1).sum::<f64>() / 10.0;
    assert!(tail < head - 0.5, "{head} -> {tail}");
    assert!(dir
        .path()
        .join("checkpoints/step-000200/manifest.txt")
        .exists());
}

#[test]
fn collider_at_k100_matches_regular() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--precision", "f64", "--steps", "4", "--k-percent", "100"];
    assert!(backsieve(dir.path(), &["trace"]).status.success());
    let reg = dir.path().join("regular");
    let col = dir.path().join("collider");
    let plan = format!("plan=\"{}\"", dir.path().join("plan.bin").display());
    let o = backsieve(
        &reg,
        &[&["train", "--mode", "regular"][..], &common].concat(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let o = backsieve(
        &col,
        &[
            &["train", "--mode", "collider", "--set", &plan][..],
            &common,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(step_losses(&reg), step_losses(&col));
    let a = fs::read(reg.join("checkpoints/step-000004/params.bin")).unwrap();
    let b = fs::read(col.join("checkpoints/step-000004/params.bin")).unwrap();
    assert!(a == b, "parameters diverged");
}

#[test]
fn resume_reproduces_the_next_steps() {
    let dir = tempfile::tempdir().unwrap();
    assert!(backsieve(dir.path(), &["trace"]).status.success());
    let plan = format!("plan=\"{}\"", dir.path().join("plan.bin").display());
    let straight = dir.path().join("straight");
    let args = [
        "train",
        "--mode",
        "collider",
        "--steps",
        "6",
        "--set",
        &plan,
        "--set",
        "train.checkpoint_every=3",
    ];
    assert!(backsieve(&straight, &args).status.success());
    let resumed = dir.path().join("resumed");
    let ckpt = straight.join("checkpoints/step-000003");
    let mut with_resume = args.to_vec();
    with_resume.extend(["--resume", ckpt.to_str().unwrap()]);
    let o = backsieve(&resumed, &with_resume);
    assert!(o.status.success(), "{}", text(&o));
    let full = step_losses(&straight);
    let tail = step_losses(&resumed);
    assert_eq!(tail.len(), 3);
    assert_eq!(&full[3..], &tail[..]);
}

#[test]
fn verify_passes_and_reports_both_tolerances() {
    let dir = tempfile::tempdir().unwrap();
    let o = backsieve(dir.path(), &["verify", "--criteria", "3,10,12"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    assert!(
        out.contains("f64 1e-10") && out.contains("f32 1e-5"),
        "{out}"
    );
    assert_eq!(out.matches(" PASS ").count(), 3, "{out}");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["tolerance"]["f64"], 1e-10);
    assert!(report["config"]["seed"].is_u64());
}

#[test]
fn injected_corruption_fails_verification_at_its_node() {
    let dir = tempfile::tempdir().unwrap();
    assert!(backsieve(dir.path(), &["trace"]).status.success());
    let plan = dir.path().join("plan.bin");
    let o = backsieve(
        dir.path(),
        &[
            "verify",
            "--criteria",
            "12",
            "--fault",
            "perturb:5",
            "--plan",
            plan.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("node 5"), "{}", text(&o));
}

#[test]
fn bench_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(&cfg, TINY_BENCH).unwrap();
    let o = backsieve(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "bench",
            "--grid",
            "0.2,0.5",
            "--stem",
            "sweep",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let tsv = fs::read_to_string(dir.path().join("sweep.tsv")).unwrap();
    let header: Vec<&str> = tsv.lines().next().unwrap().split('\t').collect();
    for col in ["forward_s", "loss_s", "operator_s", "backward_s", "total_s"] {
        assert!(header.contains(&col), "{header:?}");
    }
    assert_eq!(tsv.lines().count(), 5);
    let json: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
    assert_eq!(json["config"]["run"]["bench"]["seq"], 16);
    assert_eq!(json["config"]["axis"], "ratio");
}

#[test]
fn ngram_scores_feed_mask_compare() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--set", "data.synthetic_tokens=8000"];
    let bigram = dir.path().join("bigram.scored");
    let unigram = dir.path().join("unigram.scored");
    let o = backsieve(
        dir.path(),
        &[
            &["ngram-score", "--out", bigram.to_str().unwrap()][..],
            &small,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let o = backsieve(
        dir.path(),
        &[
            &[
                "ngram-score",
                "--order",
                "1",
                "--out",
                unigram.to_str().unwrap(),
            ][..],
            &small,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let o = backsieve(
        dir.path(),
        &[
            "mask-compare",
            bigram.to_str().unwrap(),
            bigram.to_str().unwrap(),
        ],
    );
    assert!(o.status.success());
    assert!(text(&o).contains("common ratio 1.0000"), "{}", text(&o));
    let o = backsieve(
        dir.path(),
        &[
            "mask-compare",
            bigram.to_str().unwrap(),
            unigram.to_str().unwrap(),
            "--k-percent",
            "40",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mask-compare.json")).unwrap())
            .unwrap();
    let ratio = report["common_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0, "{ratio}");
    assert_eq!(report["k_percent"], 40.0);

    // a scored file drives training directly
    let o = backsieve(
        dir.path(),
        &[
            "train",
            "--mode",
            "regular",
            "--steps",
            "2",
            "--set",
            "reference.source=\"scored-file\"",
            "--set",
            &format!("reference.path=\"{}\"", bigram.display()),
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn environment_supplies_output_dir_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_backsieve"))
        .arg("trace")
        .env("BACKSIEVE_OUTPUT_DIR", dir.path())
        .env("BACKSIEVE_WORKERS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(dir.path().join("plan.bin").exists());
}

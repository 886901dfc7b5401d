mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use backsieve::bench::{format_table, sweep, write_reports, SweepAxis};
use backsieve::filter::{
    chance_common_ratio, mask_similarity, read_scored, score_corpus, select_topk, write_scored,
    NgramModel, ScoredCorpus,
};
use backsieve::model::{
    load_checkpoint, save_checkpoint, synthetic_corpus, Checkpoint, Optimizer, Parameters,
    TokenCorpus,
};
use backsieve::rewrite::{tolerance, trace_with_markers, verify_plan, Fault, ReductionPlan};
use backsieve::suite::{self, SuiteConfig};
use backsieve::tensor::{Precision, Scalar, Tensor};
use backsieve::train::{train, ModeRegistry, TrainData};
use backsieve::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{ReferenceSource, RunConfig};

#[derive(Parser)]
#[command(
    name = "backsieve",
    version,
    about = "Backward token filtering with sequence-reduced backpropagation"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, env = "BACKSIEVE_OUTPUT_DIR", global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for the numeric kernels.
    #[arg(long, env = "BACKSIEVE_WORKERS", global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace the model at marker extents and write its reduction plan.
    Trace(TraceArgs),
    /// Train, logging one JSON record per step.
    Train(TrainArgs),
    /// Run the acceptance checks; exits 1 when any fails.
    Verify(VerifyArgs),
    /// Time training iterations over a sweep.
    Bench(BenchArgs),
    /// Score a corpus with an n-gram reference and write a scored file.
    NgramScore(NgramArgs),
    /// Compare the top-k masks of two scored files.
    MaskCompare(MaskCompareArgs),
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    bsz_marker: Option<usize>,
    #[arg(long)]
    seq_marker: Option<usize>,
    /// Move the markers to the next primes that avoid the model's extents.
    #[arg(long)]
    auto_markers: bool,
    /// Plan file; defaults to the configured plan path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k_percent: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated criterion numbers; the correctness set by default.
    #[arg(long, value_delimiter = ',')]
    criteria: Vec<u8>,
    /// Include the wall-clock criteria at the benchmark shape.
    #[arg(long)]
    all: bool,
    /// Corrupt the rewrite: `perturb:<ordinal>` or `drop:<entry>`.
    #[arg(long, value_parser = parse_fault)]
    fault: Option<Fault>,
    /// Also regression-check this plan file against the configured model.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "ratio")]
    axis: SweepAxis,
    /// Grid values: filter ratios in [0, 1) or sequence lengths.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Filter ratio for the `seq` axis.
    #[arg(long, default_value_t = 0.4)]
    ratio: f64,
    #[arg(long, value_delimiter = ',', default_value = "regular,collider")]
    modes: Vec<String>,
    /// Report file stem inside the output directory.
    #[arg(long, default_value = "bench")]
    stem: String,
    /// Plan for the benchmark model; traced when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct NgramArgs {
    /// Corpus to score; defaults to the configured corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus the n-gram model is fitted on; defaults to the scored corpus.
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    seq: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskCompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    k_percent: Option<f64>,
}

fn parse_fault(s: &str) -> std::result::Result<Fault, String> {
    let (kind, n) = s
        .split_once(':')
        .ok_or("expected perturb:<ordinal> or drop:<entry>")?;
    let n: usize = n.parse().map_err(|e| format!("{n}: {e}"))?;
    match kind {
        "perturb" => Ok(Fault::PerturbSaved { ordinal: n }),
        "drop" => Ok(Fault::DropEntry { index: n }),
        other => Err(format!("unknown fault `{other}`")),
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::MarkerCollision { .. }
            | Error::HashMismatch { .. }
            | Error::TokenOutOfRange { .. }
            | Error::SeqTooLong { .. }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}

/// Returns whether the command's checks passed.
fn run(cli: Cli) -> Result<bool> {
    let mut overrides = cli.set.clone();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push(format!("{key}={v}"));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    push(
        "output_dir",
        cli.output_dir
            .as_ref()
            .map(|p| toml_str(&p.display().to_string())),
    );
    match &cli.command {
        Command::Trace(a) => {
            push("markers.bsz", a.bsz_marker.map(|v| v.to_string()));
            push("markers.seq", a.seq_marker.map(|v| v.to_string()));
        }
        Command::Train(a) => {
            push("mode", a.mode.as_deref().map(toml_str));
            push("k_percent", a.k_percent.map(|v| format!("{v:?}")));
            push("train.steps", a.steps.map(|v| v.to_string()));
            push("precision", a.precision.map(|p| toml_str(&p.to_string())));
        }
        Command::NgramScore(a) => {
            push(
                "data.corpus",
                a.corpus
                    .as_ref()
                    .map(|p| toml_str(&p.display().to_string())),
            );
            push("reference.order", a.order.map(|v| v.to_string()));
            push("reference.smoothing", a.smoothing.map(|v| format!("{v:?}")));
            push("data.seq", a.seq.map(|v| v.to_string()));
        }
        Command::MaskCompare(a) => push("k_percent", a.k_percent.map(|v| format!("{v:?}"))),
        Command::Verify(_) | Command::Bench(_) => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Trace(a) => cmd_trace(&cfg, &a).map(|_| true),
        Command::Train(a) => match cfg.precision {
            Precision::F32 => cmd_train::<f32>(&cfg, &a),
            Precision::F64 => cmd_train::<f64>(&cfg, &a),
        }
        .map(|_| true),
        Command::Verify(a) => cmd_verify(&cfg, &a),
        Command::Bench(a) => cmd_bench(&cfg, &a).map(|_| true),
        Command::NgramScore(a) => cmd_ngram_score(&cfg, &a).map(|_| true),
        Command::MaskCompare(a) => cmd_mask_compare(&cfg, &a),
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json value");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_trace(cfg: &RunConfig, args: &TraceArgs) -> Result<()> {
    let markers = if args.auto_markers {
        cfg.markers.pick_for(&cfg.model)?
    } else {
        cfg.markers
    };
    let plan = trace_with_markers(&cfg.model, &markers)?;
    let path = args.out.clone().unwrap_or_else(|| cfg.plan_path());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    plan.save(&path)?;
    write_json(
        &path.with_extension("json"),
        &json!({
            "config": cfg.to_json(),
            "markers": markers,
            "structure_hash": plan.structure_hash.to_string(),
            "entries": plan.len(),
            "version": plan.version,
        }),
    )?;
    println!("plan: {}", path.display());
    println!("markers: bsz {} seq {}", markers.bsz, markers.seq);
    println!("structure_hash: {}", plan.structure_hash);
    println!("entries: {}", plan.len());
    Ok(())
}

fn load_corpus(cfg: &RunConfig, path: Option<&Path>) -> Result<TokenCorpus> {
    match path {
        Some(p) => TokenCorpus::load(p),
        None => synthetic_corpus(cfg.data.synthetic_tokens, cfg.model.vocab_size, cfg.seed),
    }
}

fn ngram_scored(
    cfg: &RunConfig,
    corpus: &TokenCorpus,
    fit_on: &TokenCorpus,
) -> Result<ScoredCorpus> {
    let vocab = corpus.vocab_size.max(fit_on.vocab_size);
    let ngram = NgramModel::train(
        &fit_on.ids,
        vocab,
        cfg.reference.order,
        cfg.reference.smoothing,
    )?;
    let mut scored = score_corpus(corpus, cfg.data.seq, 64, |ids| ngram.score(ids))?;
    scored.vocab_size = vocab;
    Ok(scored)
}

fn training_data(cfg: &RunConfig) -> Result<ScoredCorpus> {
    match cfg.reference.source {
        ReferenceSource::ScoredFile => {
            let path = cfg.reference.path.as_ref().expect("validated");
            read_scored(path)
        }
        ReferenceSource::Ngram => {
            let corpus = load_corpus(cfg, cfg.data.corpus.as_deref())?;
            ngram_scored(cfg, &corpus, &corpus)
        }
    }
}

fn load_plan(path: &Path) -> Result<ReductionPlan> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "no reduction plan at {}; run `backsieve trace` first",
            path.display()
        )));
    }
    ReductionPlan::load(path)
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let registry = ModeRegistry::<T>::standard();
    let mode = registry.get(&cfg.mode)?;
    let plan = if mode.needs_plan() {
        Some(load_plan(&cfg.plan_path())?)
    } else {
        None
    };
    let data = TrainData::Scored(training_data(cfg)?);
    let mut state = match &args.resume {
        Some(dir) => {
            let ckpt: Checkpoint<T> = load_checkpoint(dir)?;
            if ckpt.config != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different model configuration",
                    dir.display()
                )));
            }
            ckpt
        }
        None => Checkpoint {
            config: cfg.model.clone(),
            params: Parameters::init(&cfg.model, cfg.seed)?,
            optimizer: Optimizer::new(cfg.optim.clone()),
            step: 0,
        },
    };

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut append = |value: serde_json::Value| -> Result<()> {
        writeln!(log, "{value}").map_err(|e| Error::io(&log_path, e))
    };
    append(json!({
        "event": "start",
        "step": state.step,
        "resumed_from": args.resume,
        "config": cfg.to_json(),
    }))?;

    let ckpt_dir = |step: usize| out.join("checkpoints").join(format!("step-{step:06}"));
    let every = cfg.train.checkpoint_every;
    let steps = cfg.train.steps;
    train(
        &mut state,
        &data,
        steps,
        cfg.data.bsz,
        cfg.data.seq,
        cfg.k_percent,
        mode,
        plan.as_ref(),
        |rec, s| {
            let mut v = serde_json::to_value(rec).expect("step log");
            v["event"] = json!("step");
            append(v)?;
            println!(
                "step {:>5} loss {:.5} lr {:.2e} backward {:.4}s",
                rec.step, rec.loss, rec.lr, rec.timings.backward_s
            );
            if (every > 0 && s.step % every == 0) || s.step == steps {
                save_checkpoint(&ckpt_dir(s.step), s)?;
            }
            Ok(())
        },
    )?;
    append(json!({ "event": "end", "step": state.step }))?;
    println!("checkpoint: {}", ckpt_dir(state.step).display());
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, args: &VerifyArgs) -> Result<bool> {
    let mut ids = if args.criteria.is_empty() {
        suite::CORRECTNESS.to_vec()
    } else {
        args.criteria.clone()
    };
    if args.all {
        ids.extend(suite::TIMING);
    }
    ids.sort_unstable();
    ids.dedup();
    let suite_cfg = SuiteConfig {
        seed: cfg.seed,
        fault: args.fault,
        bench: cfg.bench_config(),
        bench_markers: cfg.bench.markers,
        ..SuiteConfig::default()
    };
    let (tol64, tol32) = (tolerance(Precision::F64), tolerance(Precision::F32));
    println!("gradient tolerance: f64 {tol64:e}, f32 {tol32:e}");
    let outcomes = suite::run_all(&ids, &suite_cfg, |o| println!("{}", o.line()));
    let mut passed = outcomes.iter().all(|o| o.passed);

    let plan_report = match &args.plan {
        Some(path) => {
            let plan = ReductionPlan::load(path)?;
            let r = verify_plan(&plan, &cfg.model, cfg.seed, args.fault)?;
            if r.passed {
                println!("plan {} PASS: matches a fresh trace", path.display());
            } else {
                println!("plan {} FAIL: {}", path.display(), r.failures.join("; "));
            }
            passed &= r.passed;
            Some(r)
        }
        None => None,
    };
    write_json(
        &cfg.output_dir.join("verify.json"),
        &json!({
            "config": cfg.to_json(),
            "fault": args.fault,
            "tolerance": { "f64": tol64, "f32": tol32 },
            "criteria": outcomes,
            "plan": plan_report,
            "passed": passed,
        }),
    )?;
    println!(
        "{}",
        if passed {
            "verify: PASS"
        } else {
            "verify: FAIL"
        }
    );
    Ok(passed)
}

fn cmd_bench(cfg: &RunConfig, args: &BenchArgs) -> Result<()> {
    let bench = cfg.bench_config();
    let grid = if !args.grid.is_empty() {
        args.grid.clone()
    } else {
        match args.axis {
            SweepAxis::Ratio => (1..=9).map(|i| i as f64 / 10.0).collect(),
            SweepAxis::Seq => vec![512.0, 1024.0, 2048.0],
        }
    };
    let registry = ModeRegistry::<f32>::standard();
    let mut needs_plan = false;
    for m in &args.modes {
        needs_plan |= registry.get(m)?.needs_plan();
    }
    let plan = match (&args.plan, needs_plan) {
        (Some(p), _) => Some(ReductionPlan::load(p)?),
        (None, true) => {
            let markers = cfg.bench.markers.pick_for(&bench.model)?;
            Some(trace_with_markers(&bench.model, &markers)?)
        }
        (None, false) => None,
    };
    let rows = sweep(
        args.axis,
        &grid,
        args.ratio,
        &args.modes,
        &bench,
        plan.as_ref(),
    )?;
    let spec = json!({
        "run": cfg.to_json(),
        "axis": args.axis,
        "grid": grid,
        "ratio": args.ratio,
        "modes": args.modes,
    });
    write_reports(&cfg.output_dir, &args.stem, &rows, &spec)?;
    print!("{}", format_table(&rows)?);
    println!(
        "reports: {}",
        cfg.output_dir
            .join(format!("{}.{{tsv,json}}", args.stem))
            .display()
    );
    Ok(())
}

fn cmd_ngram_score(cfg: &RunConfig, args: &NgramArgs) -> Result<()> {
    let corpus = load_corpus(cfg, cfg.data.corpus.as_deref())?;
    let fit_on = match &args.train_corpus {
        Some(p) => TokenCorpus::load(p)?,
        None => corpus.clone(),
    };
    let scored = ngram_scored(cfg, &corpus, &fit_on)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("reference.scored"));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_scored(&path, &scored)?;
    let n: usize = scored.sequences.iter().map(|s| s.ref_nll.len()).sum();
    let mean = scored
        .sequences
        .iter()
        .flat_map(|s| &s.ref_nll)
        .sum::<f64>()
        / n as f64;
    write_json(
        &path.with_extension("json"),
        &json!({
            "config": cfg.to_json(),
            "train_corpus": args.train_corpus,
            "sequences": scored.sequences.len(),
            "scored_tokens": n,
            "mean_nll": mean,
        }),
    )?;
    println!(
        "scored: {} ({} sequences, {n} positions, mean nll {mean:.4})",
        path.display(),
        scored.sequences.len()
    );
    Ok(())
}

fn score_matrix(c: &ScoredCorpus) -> Result<Tensor<f64>> {
    let width = c.sequences.first().map_or(0, |s| s.ref_nll.len());
    if c.sequences.iter().any(|s| s.ref_nll.len() != width) {
        return Err(Error::Config("scored file mixes sequence lengths".into()));
    }
    let data = c
        .sequences
        .iter()
        .flat_map(|s| s.ref_nll.iter().copied())
        .collect();
    Ok(Tensor::new(vec![c.sequences.len(), width], data)?)
}

fn cmd_mask_compare(cfg: &RunConfig, args: &MaskCompareArgs) -> Result<bool> {
    let (a, b) = (read_scored(&args.a)?, read_scored(&args.b)?);
    let same_ids = a.sequences.len() == b.sequences.len()
        && a.sequences
            .iter()
            .zip(&b.sequences)
            .all(|(x, y)| x.ids == y.ids);
    if !same_ids {
        return Err(Error::Config(
            "scored files hold different token sequences".into(),
        ));
    }
    let (sa, sb) = (score_matrix(&a)?, score_matrix(&b)?);
    let (ma, mb) = (
        select_topk(&sa, cfg.k_percent)?,
        select_topk(&sb, cfg.k_percent)?,
    );
    let sim = mask_similarity(&ma, &mb, sa.data(), sb.data())?;
    let chance = chance_common_ratio(ma.bsz(), ma.loss_len(), cfg.k_percent, 200, cfg.seed)?;
    write_json(
        &cfg.output_dir.join("mask-compare.json"),
        &json!({
            "config": cfg.to_json(),
            "a": args.a,
            "b": args.b,
            "k_percent": cfg.k_percent,
            "common_ratio": sim.common_ratio,
            "chance_common_ratio": chance,
            "pearson": sim.pearson,
        }),
    )?;
    println!(
        "k {}%: common ratio {:.4} (chance {:.4})",
        cfg.k_percent, sim.common_ratio, chance
    );
    match sim.pearson {
        Some(p) => println!("pearson {p:.4}"),
        None => println!("pearson undefined (zero variance)"),
    }
    Ok(true)
}

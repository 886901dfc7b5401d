//! Stage timings, FLOP accounting, sweeps and the sparse GEMM baseline.

mod sparse;

pub use sparse::{sparse_baseline_gemm, CsrMatrix, SparseTiming};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{MacCount, NodeKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::rewrite::ReductionPlan;
use crate::tensor::Tensor;
use crate::train::{run_step, ModeRegistry};

/// Wall-clock seconds per stage of one training iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub forward_s: f64,
    pub loss_s: f64,
    /// Absent when the mode has no rewrite stage.
    pub operator_s: Option<f64>,
    pub backward_s: f64,
    pub total_s: f64,
}

impl StageTimings {
    fn fields(&self) -> [Option<f64>; 5] {
        [
            Some(self.forward_s),
            Some(self.loss_s),
            self.operator_s,
            Some(self.backward_s),
            Some(self.total_s),
        ]
    }

    fn from_fields(f: [Option<f64>; 5]) -> Self {
        StageTimings {
            forward_s: f[0].unwrap_or(0.0),
            loss_s: f[1].unwrap_or(0.0),
            operator_s: f[2],
            backward_s: f[3].unwrap_or(0.0),
            total_s: f[4].unwrap_or(0.0),
        }
    }

    /// Column names of the delimited report, in field order.
    pub const COLUMNS: [&'static str; 5] =
        ["forward_s", "loss_s", "operator_s", "backward_s", "total_s"];
}

/// Min, mean and max of each stage over the measured iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub min: StageTimings,
    pub mean: StageTimings,
    pub max: StageTimings,
}

impl TimingSummary {
    pub fn of(samples: &[StageTimings]) -> Self {
        let n = samples.len() as f64;
        let mut min = [None; 5];
        let mut max = [None; 5];
        let mut sum = [None; 5];
        for s in samples {
            for (i, v) in s.fields().into_iter().enumerate() {
                let Some(v) = v else { continue };
                min[i] = Some(min[i].map_or(v, |m: f64| m.min(v)));
                max[i] = Some(max[i].map_or(v, |m: f64| m.max(v)));
                sum[i] = Some(sum[i].unwrap_or(0.0) + v);
            }
        }
        TimingSummary {
            min: StageTimings::from_fields(min),
            mean: StageTimings::from_fields(sum.map(|s| s.map(|s| s / n))),
            max: StageTimings::from_fields(max),
        }
    }
}

/// Backward multiply-adds by node type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub by_node: BTreeMap<String, MacCount>,
    pub total: MacCount,
}

impl FlopReport {
    /// Node types that executed no multiply-adds are left out.
    pub fn from_macs(macs: &BTreeMap<NodeKind, MacCount>) -> Self {
        let mut total = MacCount::default();
        let by_node = macs
            .iter()
            .filter(|(_, m)| m.total() > 0)
            .map(|(k, m)| {
                total += *m;
                (k.to_string(), *m)
            })
            .collect();
        FlopReport { by_node, total }
    }

    pub fn linear_terms(&self) -> u64 {
        self.total.linear
    }

    pub fn attention_score_terms(&self) -> u64 {
        self.total.attention_score
    }
}

/// Shape and repetition settings of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub bsz: usize,
    pub seq: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig::bench(),
            bsz: 4,
            seq: 2048,
            warmup: 2,
            iterations: 10,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.bsz == 0 || self.seq < 2 {
            return Err(Error::Config("bench needs bsz >= 1 and seq >= 2".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config(
                "bench needs at least one measured iteration".into(),
            ));
        }
        Ok(())
    }
}

/// Result of [`run_iteration`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub mode: String,
    pub bsz: usize,
    pub seq: usize,
    /// Fraction of loss positions filtered out; zero for `regular`.
    pub ratio: f64,
    pub kept_per_seq: usize,
    pub iterations: usize,
    pub workers: usize,
    pub timings: TimingSummary,
    pub flops: FlopReport,
}

/// Times `warmup + iterations` training steps (f32, no parameter update)
/// and reports the measured ones.
pub fn run_iteration(
    mode: &str,
    config: &BenchConfig,
    ratio: f64,
    plan: Option<&ReductionPlan>,
) -> Result<IterationReport> {
    config.validate()?;
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "filter ratio {ratio} must lie in [0, 1)"
        )));
    }
    let registry = ModeRegistry::<f32>::standard();
    let mode = registry.get(mode)?;
    let model = ModelConfig {
        max_seq: config.model.max_seq.max(config.seq),
        ..config.model.clone()
    };
    let params = Parameters::<f32>::init(&model, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xbe7c);
    let (b, s) = (config.bsz, config.seq);
    let ids = Tensor::new(
        vec![b, s],
        (0..b * s)
            .map(|_| rng.gen_range(0..model.vocab_size))
            .collect(),
    )?;
    let reference = Tensor::new(
        vec![b, s - 1],
        (0..b * (s - 1)).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let ratio = if mode.filters_loss() { ratio } else { 0.0 };
    let k_percent = 100.0 * (1.0 - ratio);

    let mut samples = Vec::with_capacity(config.iterations);
    let mut flops = FlopReport::default();
    let mut kept = s - 1;
    for i in 0..config.warmup + config.iterations {
        let out = run_step(
            &model,
            &params,
            &ids,
            Some(&reference),
            k_percent,
            mode,
            plan,
        )?;
        if i >= config.warmup {
            samples.push(out.timings);
        }
        flops = FlopReport::from_macs(&out.grads.macs);
        kept = out.mask.as_ref().map_or(s - 1, |m| m.kept_per_seq());
    }
    Ok(IterationReport {
        mode: mode.name().to_string(),
        bsz: b,
        seq: s,
        ratio,
        kept_per_seq: kept,
        iterations: config.iterations,
        workers: rayon::current_num_threads(),
        timings: TimingSummary::of(&samples),
        flops,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Seq,
    Ratio,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "seq" => Ok(SweepAxis::Seq),
            "ratio" => Ok(SweepAxis::Ratio),
            other => Err(format!(
                "unknown sweep axis `{other}` (expected seq or ratio)"
            )),
        }
    }
}

/// Runs every mode at every grid point. On the `seq` axis the grid holds
/// sequence lengths and `ratio` is fixed; on the `ratio` axis it holds
/// filter ratios at the configured length.
pub fn sweep(
    axis: SweepAxis,
    grid: &[f64],
    ratio: f64,
    modes: &[String],
    config: &BenchConfig,
    plan: Option<&ReductionPlan>,
) -> Result<Vec<IterationReport>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut rows = Vec::new();
    for &point in grid {
        let (cfg, r) = match axis {
            SweepAxis::Seq => {
                if point < 2.0 || point.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "sequence length {point} is not an integer >= 2"
                    )));
                }
                (
                    BenchConfig {
                        seq: point as usize,
                        ..config.clone()
                    },
                    ratio,
                )
            }
            SweepAxis::Ratio => (config.clone(), point),
        };
        for mode in modes {
            rows.push(run_iteration(mode, &cfg, r, plan)?);
        }
    }
    Ok(rows)
}

/// Header of the delimited report.
pub fn report_header() -> Vec<&'static str> {
    let mut h = vec![
        "mode",
        "bsz",
        "seq",
        "ratio",
        "kept_per_seq",
        "iterations",
        "workers",
    ];
    h.extend(StageTimings::COLUMNS);
    h.extend([
        "backward_min_s",
        "backward_max_s",
        "linear_macs",
        "attention_score_macs",
    ]);
    h
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// Tab-separated table, one row per report, stage columns holding means.
pub fn format_table(rows: &[IterationReport]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("report: {e}"));
    w.write_record(report_header()).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.mode.clone(),
            r.bsz.to_string(),
            r.seq.to_string(),
            format!("{:.4}", r.ratio),
            r.kept_per_seq.to_string(),
            r.iterations.to_string(),
            r.workers.to_string(),
        ];
        rec.extend(r.timings.mean.fields().map(opt));
        rec.push(opt(Some(r.timings.min.backward_s)));
        rec.push(opt(Some(r.timings.max.backward_s)));
        rec.push(r.flops.linear_terms().to_string());
        rec.push(r.flops.attention_score_terms().to_string());
        w.write_record(rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("report: {e}")))?;
    Ok(String::from_utf8(bytes).expect("ascii report"))
}

/// Writes `<stem>.tsv` and `<stem>.json`; the JSON embeds `config`.
pub fn write_reports(
    dir: &Path,
    stem: &str,
    rows: &[IterationReport],
    config: &serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tsv = dir.join(format!("{stem}.tsv"));
    fs::write(&tsv, format_table(rows)?).map_err(|e| Error::io(&tsv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let doc = serde_json::json!({ "config": config, "rows": rows });
    let text = serde_json::to_string_pretty(&doc).expect("serializable report");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line `key=value` settings.

use std::fs;
use std::path::{Path, PathBuf};

use backsieve::bench::BenchConfig;
use backsieve::model::{ModelConfig, OptimConfig};
use backsieve::rewrite::MarkerConfig;
use backsieve::tensor::Precision;
use backsieve::train::ModeRegistry;
use backsieve::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// Reference nll precomputed in a scored-corpus file.
    ScoredFile,
    /// Count model trained on the training corpus.
    Ngram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub source: ReferenceSource,
    /// Scored-corpus file, for `scored-file`.
    pub path: Option<PathBuf>,
    pub order: usize,
    pub smoothing: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            source: ReferenceSource::Ngram,
            path: None,
            order: 2,
            smoothing: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Token file; a synthetic corpus drawn from `seed` when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_tokens: usize,
    pub bsz: usize,
    pub seq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            synthetic_tokens: 200_000,
            bsz: 8,
            seq: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    /// Steps between checkpoints; 0 saves only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 200,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub model: ModelConfig,
    pub bsz: usize,
    pub seq: usize,
    pub warmup: usize,
    pub iterations: usize,
    /// Trace extents for the benchmark model.
    pub markers: MarkerConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSection {
            model: b.model,
            bsz: b.bsz,
            seq: b.seq,
            warmup: b.warmup,
            iterations: b.iterations,
            markers: MarkerConfig { bsz: 7, seq: 263 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub mode: String,
    pub k_percent: f64,
    pub output_dir: PathBuf,
    /// Reduction plan file; `<output_dir>/plan.bin` when absent.
    pub plan: Option<PathBuf>,
    pub model: ModelConfig,
    pub markers: MarkerConfig,
    pub data: DataConfig,
    pub reference: ReferenceConfig,
    pub optim: OptimConfig,
    pub train: TrainSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            mode: "collider".into(),
            k_percent: 60.0,
            output_dir: PathBuf::from("runs"),
            plan: None,
            model: ModelConfig {
                max_seq: 512,
                ..ModelConfig::tiny()
            },
            markers: MarkerConfig::default(),
            data: DataConfig::default(),
            reference: ReferenceConfig::default(),
            optim: OptimConfig::default(),
            train: TrainSection::default(),
            bench: BenchSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses the right-hand side of a `key=value` override: any TOML value,
/// else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets dotted `key` (e.g. `model.d_model`) in `root`.
fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then each `key=value` in `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            other => {
                return Err(config_err(format!(
                    "defaults do not form a table: {other:?}"
                )))
            }
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: toml::Table = text
                .parse()
                .map_err(|e| Error::format(path, format!("{e}")))?;
            merge(&mut table, parsed);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))
    }

    /// Checks values and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        ModeRegistry::<f32>::standard().get(&self.mode)?;
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(config_err(format!(
                "k_percent {} must lie in (0, 100]",
                self.k_percent
            )));
        }
        if self.data.bsz == 0 || self.data.seq < 2 {
            return Err(config_err("data.bsz must be >= 1 and data.seq >= 2"));
        }
        if self.data.seq > self.model.max_seq {
            return Err(Error::SeqTooLong {
                seq: self.data.seq,
                max: self.model.max_seq,
            });
        }
        if self.reference.order == 0 || self.reference.smoothing < 0.0 {
            return Err(config_err(
                "reference.order must be >= 1 and reference.smoothing >= 0",
            ));
        }
        if self.reference.source == ReferenceSource::ScoredFile && self.reference.path.is_none() {
            return Err(config_err(
                "reference.source = \"scored-file\" needs reference.path",
            ));
        }
        let inputs = [
            ("data.corpus", self.data.corpus.as_ref()),
            ("reference.path", self.reference.path.as_ref()),
            ("plan", self.plan.as_ref()),
        ];
        for (name, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(config_err(format!(
                        "{name}: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn plan_path(&self) -> PathBuf {
        self.plan
            .clone()
            .unwrap_or_else(|| self.output_dir.join("plan.bin"))
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            model: self.bench.model.clone(),
            bsz: self.bench.bsz,
            seq: self.bench.seq,
            warmup: self.bench.warmup,
            iterations: self.bench.iterations,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_overrides_then_file_then_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "k_percent = 40.0\nseed = 7\n[model]\nd_model = 64\n").unwrap();
        let cfg =
            RunConfig::resolve(Some(&file), &["seed=9".into(), "model.n_heads=8".into()]).unwrap();
        assert_eq!(cfg.k_percent, 40.0);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.n_heads, 8);
        assert_eq!(cfg.model.d_ffn, RunConfig::default().model.d_ffn);
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, text).unwrap();
        assert_eq!(
            RunConfig::resolve(Some(&file), &[]).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::resolve(None, &["nonsense=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["seed".into()]).is_err());
        let bad = |o: &str| {
            RunConfig::resolve(None, &[o.into()])
                .unwrap()
                .validate()
                .is_err()
        };
        assert!(bad("k_percent=0"));
        assert!(bad("mode=\"sideways\""));
        assert!(bad("data.corpus=\"/no/such/file\""));
        assert!(bad("reference.source=\"scored-file\""));
        assert!(bad("data.seq=4096"));
    }

    #[test]
    fn bare_words_parse_as_strings() {
        let cfg = RunConfig::resolve(None, &["mode=rho".into(), "precision=f64".into()]).unwrap();
        assert_eq!(cfg.mode, "rho");
        assert_eq!(cfg.precision, Precision::F64);
    }
}

//! Checkpoints: a flat little-endian binary of named tensors plus a text
//! manifest listing each tensor's name, shape, element offset and length.
//!
//! ```text
//! backsieve-checkpoint 1
//! precision f32
//! step 12
//! config {"n_layers":2,...}
//! optim {"kind":"adam",...}
//! optim_step 12
//! tensor embed 64,32 0 2048
//! ...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, OptimConfig, Optimizer, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const DATA: &str = "params.bin";
const MAGIC: &str = "backsieve-checkpoint 1";
const FIRST_MOMENT: &str = "optim.m.";
const SECOND_MOMENT: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    pub optimizer: Optimizer<T>,
    /// Training steps completed.
    pub step: usize,
}

fn encode<T: Scalar>(v: T, out: &mut Vec<u8>) {
    match T::PRECISION {
        Precision::F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
        Precision::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
    }
}

fn width<T: Scalar>() -> usize {
    match T::PRECISION {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named: Vec<(String, &Tensor<T>)> =
        ckpt.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    for (n, t) in &ckpt.optimizer.first_moment {
        named.push((format!("{FIRST_MOMENT}{n}"), t));
    }
    for (n, t) in &ckpt.optimizer.second_moment {
        named.push((format!("{SECOND_MOMENT}{n}"), t));
    }

    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("precision {}\n", T::PRECISION));
    manifest.push_str(&format!("step {}\n", ckpt.step));
    let cfg = serde_json::to_string(&ckpt.config).map_err(|e| Error::format(dir, e.to_string()))?;
    let opt = serde_json::to_string(&ckpt.optimizer.config)
        .map_err(|e| Error::format(dir, e.to_string()))?;
    manifest.push_str(&format!(
        "config {cfg}\noptim {opt}\noptim_step {}\n",
        ckpt.optimizer.step
    ));

    let mut bytes = Vec::new();
    let mut offset = 0usize;
    for (name, t) in named {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let shape = if shape.is_empty() {
            "-".to_string()
        } else {
            shape.join(",")
        };
        manifest.push_str(&format!("tensor {name} {shape} {offset} {}\n", t.numel()));
        for &v in t.data() {
            encode(v, &mut bytes);
        }
        offset += t.numel();
    }

    let data_path = dir.join(DATA);
    let mut f = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&data_path, e))?;
    let man_path = dir.join(MANIFEST);
    fs::write(&man_path, manifest).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let man_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let data_path = dir.join(DATA);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let bad = |reason: String| Error::format(&man_path, reason);

    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing checkpoint header".into()));
    }
    let mut precision = None;
    let mut step = None;
    let mut config: Option<ModelConfig> = None;
    let mut optim: Option<OptimConfig> = None;
    let mut optim_step = 0;
    let mut tensors = BTreeMap::new();
    let w = width::<T>();
    for line in lines {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        match key {
            "precision" => precision = Some(rest.parse::<Precision>().map_err(bad)?),
            "step" => step = Some(rest.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "optim_step" => optim_step = rest.parse::<usize>().map_err(|e| bad(e.to_string()))?,
            "config" => config = Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?),
            "optim" => optim = Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?),
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let [name, shape, offset, len] = f[..] else {
                    return Err(bad(format!("malformed tensor line `{line}`")));
                };
                let shape: Vec<usize> = if shape == "-" {
                    Vec::new()
                } else {
                    shape
                        .split(',')
                        .map(|s| s.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
                        .collect::<Result<_>>()?
                };
                let offset: usize = offset
                    .parse()
                    .map_err(|_| bad(format!("bad offset in `{line}`")))?;
                let len: usize = len
                    .parse()
                    .map_err(|_| bad(format!("bad length in `{line}`")))?;
                let end = (offset + len) * w;
                if end > bytes.len() {
                    return Err(Error::format(
                        &data_path,
                        format!("tensor {name} runs past end of file"),
                    ));
                }
                let data: Vec<T> = bytes[offset * w..end]
                    .chunks_exact(w)
                    .map(|c| match T::PRECISION {
                        Precision::F32 => {
                            T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        }
                        Precision::F64 => T::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
                    })
                    .collect();
                tensors.insert(name.to_string(), Tensor::new(shape, data)?);
            }
            other => return Err(bad(format!("unknown manifest key `{other}`"))),
        }
    }
    match precision {
        Some(p) if p == T::PRECISION => {}
        Some(p) => {
            return Err(bad(format!(
                "checkpoint precision {p} does not match {}",
                T::PRECISION
            )))
        }
        None => return Err(bad("missing precision".into())),
    }
    let config = config.ok_or_else(|| bad("missing config".into()))?;
    let mut optimizer = Optimizer::new(optim.ok_or_else(|| bad("missing optim".into()))?);
    optimizer.step = optim_step;
    let mut params = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(FIRST_MOMENT) {
            optimizer.first_moment.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(SECOND_MOMENT) {
            optimizer.second_moment.insert(n.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    Ok(Checkpoint {
        params: Parameters::from_map(&config, params)?,
        config,
        optimizer,
        step: step.ok_or_else(|| bad("missing step".into()))?,
    })
}

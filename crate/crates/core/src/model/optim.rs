use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to `lr * min_lr_ratio` over `total_steps`.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub total_steps: usize,
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Cosine,
            total_steps: 200,
            min_lr_ratio: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimConfig {
            kind: OptimKind::Sgd,
            lr,
            schedule: LrSchedule::Constant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(
                "lr must be a finite non-negative number".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let total = self.total_steps.max(1) as f64;
                let t = (step as f64 / total).min(1.0);
                let floor = self.lr * self.min_lr_ratio;
                floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Optimizer with its persistent state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    /// Number of updates applied so far.
    pub step: usize,
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one update. Every parameter must have a gradient.
    pub fn update(
        &mut self,
        params: &mut Parameters<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let lr = self.config.lr_at(self.step);
        let mut updated = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Shape(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let new = match self.config.kind {
                OptimKind::Sgd => sgd(p, g, lr)?,
                OptimKind::Adam => {
                    let m = self.first_moment.entry(name.clone()).or_insert_with(|| {
                        Tensor::zeros(p.shape().to_vec()).expect("positive shape")
                    });
                    let v = self.second_moment.entry(name.clone()).or_insert_with(|| {
                        Tensor::zeros(p.shape().to_vec()).expect("positive shape")
                    });
                    let (np, nm, nv) = adam(p, g, m, v, lr, &self.config, self.step + 1)?;
                    *m = nm;
                    *v = nv;
                    np
                }
            };
            new.ensure_finite("optimizer update")
                .map_err(|_| Error::NonFinite {
                    what: format!("update for parameter {name}"),
                })?;
            updated.push((name.clone(), new));
        }
        for (name, t) in updated {
            params.set(&name, t)?;
        }
        self.step += 1;
        Ok(())
    }
}

/// `p - lr * g`.
pub fn sgd<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, lr: f64) -> Result<Tensor<T>> {
    let lr = T::from_f64(lr);
    let data = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &g)| p - lr * g)
        .collect();
    Ok(Tensor::new(p.shape().to_vec(), data)?)
}

/// One bias-corrected Adam step at 1-based step `t`.
pub fn adam<T: Scalar>(
    p: &Tensor<T>,
    g: &Tensor<T>,
    m: &Tensor<T>,
    v: &Tensor<T>,
    lr: f64,
    cfg: &OptimConfig,
    t: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    let n = p.numel();
    let (mut np, mut nm, mut nv) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let gi = g.data()[i];
        let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
        let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        np.push(p.data()[i] - lr * m_hat / (v_hat.sqrt() + eps));
        nm.push(mi);
        nv.push(vi);
    }
    let shape = p.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), np)?,
        Tensor::new(shape.clone(), nm)?,
        Tensor::new(shape, nv)?,
    ))
}

//! Named parameters with momentum state, the training schedule, and the
//! binary model format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Scalar, Tensor, TensorError};

/// One trainable tensor plus its momentum velocity (same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub velocity: Tensor,
}

/// Ordered map of named parameters. Iteration order is the name order, so
/// updates and serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a fresh parameter with zero velocity. Panics on duplicates;
    /// parameter names are a construction-time concern.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        let velocity = Tensor::zeros(value.shape());
        let prev = self.entries.insert(name.to_string(), Param { value, velocity });
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> Result<&Param, TensorError> {
        self.entries.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, TensorError> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients, keyed like the [`ParamSet`] they refer to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Zero gradient for every parameter; parameters a forward pass never
    /// touches keep their zero entry.
    pub fn zeros_like(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(name, p)| (name.clone(), Tensor::zeros(p.value.shape())))
            .collect();
        Gradients { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.entries.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name:?}"));
        entry.add_assign(grad);
    }

    /// `self += rhs`, entry by entry.
    pub fn add(&mut self, rhs: &Gradients) {
        assert_eq!(self.entries.len(), rhs.entries.len(), "gradient sets differ");
        for (name, tensor) in &rhs.entries {
            self.accumulate(name, tensor);
        }
    }

    pub fn scale(&mut self, s: Scalar) {
        for tensor in self.entries.values_mut() {
            tensor.scale(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }
}

/// Classical (heavy-ball) momentum update:
/// `v <- mu * v + g`, `p <- p - lr * v`.
pub fn momentum_step(
    params: &mut ParamSet,
    grads: &Gradients,
    lr: Scalar,
    mu: Scalar,
) -> Result<(), TensorError> {
    for (name, grad) in grads.iter() {
        if !grad.all_finite() {
            return Err(TensorError::NonFinite { context: format!("gradient of {name:?}") });
        }
    }
    for (name, param) in params.entries.iter_mut() {
        let grad = grads.get(name)?;
        assert_eq!(grad.shape(), param.value.shape(), "gradient shape for {name:?}");
        param.velocity.scale(mu);
        param.velocity.add_assign(grad);
        param.value.add_scaled(&param.velocity, -lr);
    }
    Ok(())
}

/// Training hyperparameters. The defaults are project choices, not values
/// reported anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub momentum_mu: f64,
    pub dropout_keep_prob: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub rng_seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            base_lr: 0.01,
            decay_rate: 0.95,
            decay_steps: 1000,
            momentum_mu: 0.9,
            dropout_keep_prob: 0.5,
            batch_size: 64,
            total_steps: 600,
            rng_seed: 1,
        }
    }
}

#[derive(Debug, Error)]
#[error("invalid train schedule: {0}")]
pub struct ScheduleError(String);

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let finite = self.base_lr.is_finite()
            && self.decay_rate.is_finite()
            && self.momentum_mu.is_finite()
            && self.dropout_keep_prob.is_finite();
        if !finite {
            return Err(ScheduleError("non-finite scalar".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(ScheduleError(format!("base_lr {} must be > 0", self.base_lr)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(ScheduleError(format!("decay_rate {} outside (0, 1]", self.decay_rate)));
        }
        if self.decay_steps == 0 {
            return Err(ScheduleError("decay_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_mu) {
            return Err(ScheduleError(format!("momentum_mu {} outside [0, 1)", self.momentum_mu)));
        }
        if !(self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0) {
            return Err(ScheduleError(format!(
                "dropout_keep_prob {} outside (0, 1]",
                self.dropout_keep_prob
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(ScheduleError("batch_size and total_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Continuously decayed learning rate:
/// `base_lr * decay_rate^(step / decay_steps)`.
pub fn lr_at(schedule: &TrainSchedule, step: u64) -> f64 {
    schedule.base_lr * schedule.decay_rate.powf(step as f64 / schedule.decay_steps as f64)
}

const MODEL_MAGIC: &[u8; 8] = b"MVVC-NET";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a model file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported model version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: corrupt model record: {reason}")]
    Corrupt { path: String, reason: String },
}

/// Write parameter values (not velocities) as little-endian f32 records.
pub fn save_params(params: &ParamSet, path: &Path) -> Result<(), ModelIoError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for (name, param) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(param.value.rank() as u32).to_le_bytes());
        for &e in param.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in param.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| ModelIoError::Io { path: path.display().to_string(), source: e })
}

/// Read a model file back into a `ParamSet` with zero velocities.
pub fn load_params(path: &Path) -> Result<ParamSet, ModelIoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelIoError::Io { path: path.display().to_string(), source: e })?;
    let p = || path.display().to_string();
    if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
        return Err(ModelIoError::BadMagic { path: p() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(ModelIoError::BadVersion { path: p(), version });
    }
    let mut cursor = 12usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], ModelIoError> {
        if *cursor + n > bytes.len() {
            return Err(ModelIoError::Corrupt { path: p(), reason: "unexpected end of file".into() });
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let mut params = ParamSet::new();
    while cursor < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| ModelIoError::Corrupt { path: p(), reason: "non-UTF8 name".into() })?;
        let rank = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        if rank == 0 || rank > 8 {
            return Err(ModelIoError::Corrupt { path: p(), reason: format!("rank {rank}") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            if e == 0 {
                return Err(ModelIoError::Corrupt { path: p(), reason: "zero extent".into() });
            }
            shape.push(e);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut cursor, count * 4)?;
        let data: Vec<Scalar> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Scalar)
            .collect();
        params.insert(&name, Tensor::from_vec(&shape, data));
    }
    Ok(params)
}

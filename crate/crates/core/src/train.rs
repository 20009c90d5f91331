//! Pieces shared by the training loops: schedule config, batching, loss logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Record a loss row every this many steps (and always on the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn should_log(&self, step: usize) -> bool {
        step + 1 == self.steps || self.log_every == 0 || step % self.log_every.max(1) == 0
    }
}

/// Endless shuffled batches of indices in `0..len`, reshuffled every epoch.
pub struct BatchSampler {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut rng = SeededRng::stream(seed, "batches");
        let order = rng.permutation(len);
        Self {
            rng,
            order,
            cursor: 0,
            batch: batch.min(len).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order = self.rng.permutation(self.order.len());
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Read a scalar loss and fail on NaN/Inf.
pub fn finite_scalar(loss: &Tensor, step: usize, what: &str) -> Result<f64> {
    let v = loss.double_value(&[]);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training {
            step,
            message: format!("{what} is {v}"),
        })
    }
}

/// A table of loss values keyed by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        let Some(i) = self.columns.iter().position(|c| c == name) else {
            return Vec::new();
        };
        self.rows.iter().map(|(_, v)| v[i]).collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.column(name).last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (step, values) in &self.rows {
            out.push_str(&step.to_string());
            for v in values {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Stack per-sample tensors (each without a batch axis) into one batch.
pub fn stack(items: &[&Tensor]) -> Tensor {
    Tensor::stack(items, 0)
}

//! Optimizer settings, epoch logs, and the parallel gradient reduction shared by all stages.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamWConfig, Gradients, ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    /// Hard cap on optimizer steps across all epochs; zero means no cap.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{section}.batch_size must be positive"
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "{section}.lr must be a positive number"
            )));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config(format!(
                "{section}.weight_decay and clip_norm must be non-negative"
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamWConfig::default()
        }
    }

    pub fn step_limit_reached(&self, steps: usize) -> bool {
        self.max_steps > 0 && steps >= self.max_steps
    }
}

/// Mean losses of one epoch; `parts` holds stage-specific components such as `recon` and `kl`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub parts: Vec<(&'static str, f64)>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    /// `epoch=3 steps=21 recon=0.12 kl=4.5 total=0.12 seconds=1.25`
    pub fn to_line(&self) -> String {
        let mut s = format!("epoch={} steps={}", self.epoch, self.steps);
        for (name, v) in &self.parts {
            let _ = write!(s, " {name}={v:.6e}");
        }
        let _ = write!(s, " seconds={:.3}", self.seconds);
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_text(&self) -> String {
        self.epochs.iter().map(|e| e.to_line() + "\n").collect()
    }
}

/// Accumulates per-epoch means of named loss components.
pub(crate) struct EpochMeter {
    start: Instant,
    names: Vec<&'static str>,
    sums: Vec<f64>,
    count: usize,
    steps: usize,
}

impl EpochMeter {
    pub(crate) fn new(names: &[&'static str]) -> Self {
        Self {
            start: Instant::now(),
            names: names.to_vec(),
            sums: vec![0.0; names.len()],
            count: 0,
            steps: 0,
        }
    }

    pub(crate) fn add(&mut self, values: &[f64], weight: usize) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v * weight as f64;
        }
        self.count += weight;
        self.steps += 1;
    }

    pub(crate) fn finish(self, epoch: usize) -> EpochRecord {
        let n = self.count.max(1) as f64;
        EpochRecord {
            epoch,
            steps: self.steps,
            parts: self
                .names
                .iter()
                .zip(&self.sums)
                .map(|(&name, s)| (name, s / n))
                .collect(),
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Evaluates `f` on every item in parallel and sums gradients and loss parts in item order,
/// so the result does not depend on thread scheduling.
pub(crate) fn reduce_items<T, I, F>(
    store: &ParamStore<T>,
    items: &[I],
    f: F,
) -> Result<(Gradients<T>, Vec<f64>)>
where
    T: Real,
    I: Sync,
    F: Fn(usize, &I) -> Result<(Gradients<T>, Vec<f64>)> + Sync,
{
    let results: Vec<Result<(Gradients<T>, Vec<f64>)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect();
    let mut total = Gradients::empty(store.len());
    let mut parts: Vec<f64> = Vec::new();
    for r in results {
        let (g, p) = r?;
        total.accumulate(&g);
        if parts.is_empty() {
            parts = vec![0.0; p.len()];
        }
        parts.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_line_format() {
        let r = EpochRecord {
            epoch: 2,
            steps: 5,
            parts: vec![("recon", 0.5), ("kl", 2.0)],
            seconds: 1.5,
        };
        assert_eq!(
            r.to_line(),
            "epoch=2 steps=5 recon=5.000000e-1 kl=2.000000e0 seconds=1.500"
        );
        assert_eq!(r.get("kl"), Some(2.0));
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate("x")
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate("x")
        .is_err());
        assert!(TrainConfig::default().validate("x").is_ok());
    }
}

//! Latent diffusion over variable-length latent codes.
//!
//! The denoiser sees `k x D` codes for any `k` up to the slot bank size; sampling draws
//! the initial noise with exactly as many slots as the target length activates.

mod denoiser;
mod sample;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TextEmbedding;
use crate::error::{Error, Result};
use crate::lavae::LatentCode;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use sample::{ddim_step, sample, sample_latent, DiffusionGenerator};
pub use train::{encode_posteriors, latent_rms, train_denoiser, DiffusionItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Deterministic update along the inference subsequence.
    Deterministic,
    /// Stochastic posterior sampling along the inference subsequence with respaced variances.
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub inference_steps: usize,
    pub sampler: SamplerKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule: ScheduleKind::Linear,
            inference_steps: 20,
            sampler: SamplerKind::Deterministic,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.schedule, self.inference_steps)
    }
}

pub const LINEAR_BETA_RANGE: (f64, f64) = (1e-4, 2e-2);
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal levels for `T` steps plus the timesteps visited at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alphas_bar[t]` for `t = 0..=T`; `alphas_bar[0] = 1`.
    alphas_bar: Vec<f64>,
    /// Strictly decreasing, starting at `T`.
    inference: Vec<usize>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alphas_bar[t] / self.alphas_bar[t - 1]
    }

    pub fn inference_steps(&self) -> &[usize] {
        &self.inference
    }

    /// Timestep following `inference_steps()[i]`; zero after the last one.
    pub fn next_step(&self, i: usize) -> usize {
        self.inference.get(i + 1).copied().unwrap_or(0)
    }
}

/// Builds `alphas_bar` from per-step betas and selects `inference_steps` evenly spaced
/// timesteps `T, T - T/n, ...`.
pub fn build_schedule(
    steps: usize,
    kind: ScheduleKind,
    inference_steps: usize,
) -> Result<NoiseSchedule> {
    if inference_steps == 0 || steps < inference_steps {
        return Err(Error::Config(format!(
            "need T >= inference steps >= 1, got T={steps}, inference steps={inference_steps}"
        )));
    }
    let mut alphas_bar = Vec::with_capacity(steps + 1);
    alphas_bar.push(1.0);
    match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = LINEAR_BETA_RANGE;
            for t in 1..=steps {
                let u = if steps == 1 {
                    0.0
                } else {
                    (t - 1) as f64 / (steps - 1) as f64
                };
                let beta = lo + (hi - lo) * u;
                alphas_bar.push(alphas_bar[t - 1] * (1.0 - beta));
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            for t in 1..=steps {
                let beta = (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA);
                alphas_bar.push(alphas_bar[t - 1] * (1.0 - beta));
            }
        }
    }
    if alphas_bar
        .windows(2)
        .any(|w| !(w[1] < w[0]) || !(w[1] > 0.0))
    {
        return Err(Error::Numerical(
            "noise schedule is not strictly decreasing and positive".into(),
        ));
    }
    let inference = (0..inference_steps)
        .map(|i| steps - i * steps / inference_steps)
        .collect();
    Ok(NoiseSchedule {
        alphas_bar,
        inference,
    })
}

/// `sqrt(a) z0 + sqrt(1 - a) noise` elementwise.
pub fn diffuse_with(z0: &LatentCode, alpha_bar: f64, noise: &LatentCode) -> Result<LatentCode> {
    if (z0.slots, z0.dim) != (noise.slots, noise.dim) {
        return Err(Error::Shape(format!(
            "latent is {}x{}, noise is {}x{}",
            z0.slots, z0.dim, noise.slots, noise.dim
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let values = z0
        .values
        .iter()
        .zip(&noise.values)
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Ok(LatentCode {
        slots: z0.slots,
        dim: z0.dim,
        values,
    })
}

/// Marginal forward process `q(z_t | z_0)` at step `t in [1, T]`.
pub fn forward_diffuse(
    z0: &LatentCode,
    t: usize,
    noise: &LatentCode,
    schedule: &NoiseSchedule,
) -> Result<LatentCode> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::Domain(format!(
            "timestep {t} outside [1, {}]",
            schedule.steps()
        )));
    }
    diffuse_with(z0, schedule.alpha_bar(t), noise)
}

/// Anything that predicts the noise in a diffused latent.
pub trait NoisePredictor: Sync {
    fn predict(&self, z_t: &LatentCode, t: usize, text: &TextEmbedding) -> Result<LatentCode>;
}

/// Numeric objective: mean squared error between drawn and predicted noise over every
/// coordinate of every item, with `t ~ U{1..T}` and `eps ~ N(0, I)` per item.
pub fn diffusion_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    batch: &[(LatentCode, TextEmbedding)],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData {
            what: "diffusion batch",
            needed: 1,
            available: 0,
        });
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for (z0, text) in batch {
        let t = rng.random_range(1..=schedule.steps());
        let eps = LatentCode::standard_normal(z0.slots, z0.dim, rng);
        let zt = forward_diffuse(z0, t, &eps, schedule)?;
        let pred = predictor.predict(&zt, t, text)?;
        if (pred.slots, pred.dim) != (eps.slots, eps.dim) {
            return Err(Error::Shape("predictor changed the latent shape".into()));
        }
        sq += pred
            .values
            .iter()
            .zip(&eps.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        n += eps.values.len();
    }
    let loss = sq / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: "diffusion",
            step: 0,
            batch: 0,
            detail: format!("{} items", batch.len()),
        });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_schedule_reaches_noise() {
        let s = build_schedule(1000, ScheduleKind::Linear, 20).unwrap();
        // oracle: direct product of (1 - beta_t)
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1) - 1e-4).abs() < 1e-12 && (s.beta(1000) - 2e-2).abs() < 1e-12);
    }

    #[test]
    fn inference_subsequence() {
        let s = build_schedule(1000, ScheduleKind::Linear, 20).unwrap();
        let steps = s.inference_steps();
        assert_eq!(steps.len(), 20);
        assert_eq!(steps[0], 1000);
        assert!(steps.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.next_step(19), 0);
        let one = build_schedule(1, ScheduleKind::Cosine, 1).unwrap();
        assert_eq!(
            (one.steps(), one.alpha_bar(0), one.inference_steps()),
            (1, 1.0, &[1usize][..])
        );
        assert!(build_schedule(10, ScheduleKind::Linear, 11).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, 0).is_err());
    }

    #[test]
    fn cosine_schedule_is_monotone_and_terminal() {
        let s = build_schedule(1000, ScheduleKind::Cosine, 20).unwrap();
        assert!(s.alphas_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) < 1e-3);
    }

    #[test]
    fn diffusion_endpoints() {
        let mut r = rng::seeded(1);
        let z0 = LatentCode::standard_normal(2, 3, &mut r);
        let e = LatentCode::standard_normal(2, 3, &mut r);
        assert_eq!(diffuse_with(&z0, 1.0, &e).unwrap(), z0);
        assert_eq!(diffuse_with(&z0, 0.0, &e).unwrap(), e);
        assert!(diffuse_with(&z0, 0.5, &LatentCode::zeros(1, 3)).is_err());
        let s = build_schedule(10, ScheduleKind::Linear, 2).unwrap();
        assert!(forward_diffuse(&z0, 0, &e, &s).is_err());
        assert!(forward_diffuse(&z0, 11, &e, &s).is_err());
    }

    #[test]
    fn forward_variance_at_half_signal() {
        let mut r = rng::seeded(2);
        let z0 = LatentCode::zeros(1, 1);
        let n = 100_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let e = LatentCode::standard_normal(1, 1, &mut r);
            let v = diffuse_with(&z0, 0.5, &e).unwrap().values[0];
            sq += v * v;
        }
        assert!((sq / n as f64 - 0.5).abs() < 0.02);
    }

    struct Oracle<'a> {
        z0: &'a LatentCode,
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict(&self, z_t: &LatentCode, t: usize, _: &TextEmbedding) -> Result<LatentCode> {
            let a = self.schedule.alpha_bar(t);
            let values = z_t
                .values
                .iter()
                .zip(&self.z0.values)
                .map(|(&z, &x)| (z - a.sqrt() * x) / (1.0 - a).sqrt())
                .collect();
            LatentCode::new(z_t.slots, z_t.dim, values)
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, z_t: &LatentCode, _: usize, _: &TextEmbedding) -> Result<LatentCode> {
            Ok(LatentCode::zeros(z_t.slots, z_t.dim))
        }
    }

    #[test]
    fn loss_of_the_noise_oracle_vanishes() {
        let s = build_schedule(100, ScheduleKind::Linear, 10).unwrap();
        let z0 = LatentCode::standard_normal(3, 4, &mut rng::seeded(3));
        let text = TextEmbedding(vec![1.0]);
        let loss = diffusion_loss(
            &Oracle {
                z0: &z0,
                schedule: &s,
            },
            &[(z0.clone(), text)],
            &s,
            &mut rng::seeded(4),
        )
        .unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn zero_predictor_loss_is_unit_noise_power() {
        let s = build_schedule(1000, ScheduleKind::Linear, 20).unwrap();
        let mut r = rng::seeded(5);
        let batch: Vec<_> = (0..1000)
            .map(|i| (LatentCode::zeros(1 + i % 5, 4), TextEmbedding(vec![1.0])))
            .collect();
        let loss = diffusion_loss(&Zero, &batch, &s, &mut r).unwrap();
        assert!((loss - 1.0).abs() < 0.1, "{loss}");
        let again = diffusion_loss(&Zero, &batch, &s, &mut rng::seeded(5)).unwrap();
        assert_eq!(loss, again);
    }
}

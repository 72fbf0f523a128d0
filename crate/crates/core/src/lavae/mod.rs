//! Length-aware variational autoencoder.
//!
//! A motion of `f` frames is encoded into `k = ceil(f / r)` latent slots of `D`
//! coordinates each; slot `i` exists only for motions of at least `(i - 1) r + 1`
//! frames. The decoder reconstructs exactly `f` frames from exactly `k` slots.

mod model;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{MotionSequence, SKELETON};
use crate::error::{Error, Result};

pub use model::{check_layout, DecodeTrace, LaVae, VaeLossNodes};
pub use train::{train_vae, VaeBatchLoss};

/// Lower and upper clamp applied to log-variances before exponentiation.
pub const LOG_VAR_RANGE: (f64, f64) = (-30.0, 20.0);

/// `ceil(f / r)`: number of latent slots a motion of `f` frames activates.
pub fn activation_count(frames: usize, frames_per_latent: usize) -> Result<usize> {
    if frames == 0 || frames_per_latent == 0 {
        return Err(Error::Domain(format!(
            "activation count needs positive frames and frames per latent, got f={frames}, r={frames_per_latent}"
        )));
    }
    Ok(frames.div_ceil(frames_per_latent))
}

/// How the posterior variance scales the reparameterization noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// `z = mu + sigma^2 * rho`.
    Variance,
    /// `z = mu + sigma * rho`.
    StdDev,
}

/// Where the denoising perturbation is applied during first-stage training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DvaeTarget {
    /// A fraction of input frames receives Gaussian noise.
    Input,
    /// A fraction of sampled latent coordinates receives Gaussian noise.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaVaeConfig {
    pub max_frames: usize,
    /// Frames per latent slot (`r`).
    pub frames_per_latent: usize,
    /// Coordinates per latent slot (`D`).
    pub latent_dim: usize,
    /// Transformer width.
    pub model_dim: usize,
    /// Blocks in each of the encoder and decoder.
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dvae_fraction: f64,
    pub dvae_std: f64,
    pub dvae_target: DvaeTarget,
    pub kl_weight: f64,
    pub noise_scale: NoiseScale,
    /// When false every motion uses all `K` slots.
    pub length_aware: bool,
    #[serde(skip)]
    pub pose_dim: usize,
    #[serde(skip)]
    pub fps: u32,
}

impl Default for LaVaeConfig {
    fn default() -> Self {
        Self {
            max_frames: 200,
            frames_per_latent: 48,
            latent_dim: 256,
            model_dim: 256,
            layers: 9,
            heads: 4,
            ff_dim: 1024,
            dvae_fraction: 0.33,
            dvae_std: 0.1,
            dvae_target: DvaeTarget::Input,
            kl_weight: 1e-4,
            noise_scale: NoiseScale::Variance,
            length_aware: true,
            pose_dim: SKELETON.dim(),
            fps: 20,
        }
    }
}

impl LaVaeConfig {
    /// `K = ceil(F_max / r)`.
    pub fn max_slots(&self) -> usize {
        self.max_frames
            .div_ceil(self.frames_per_latent.max(1))
            .max(1)
    }

    /// Slots used for a motion of `frames` frames.
    pub fn active_slots(&self, frames: usize) -> Result<usize> {
        if frames > self.max_frames {
            return Err(Error::Length {
                frames,
                min: 1,
                max: self.max_frames,
            });
        }
        let k = activation_count(frames, self.frames_per_latent)?;
        Ok(if self.length_aware {
            k.clamp(1, self.max_slots())
        } else {
            self.max_slots()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("lavae.{m}")));
        if self.frames_per_latent == 0 {
            return fail("frames_per_latent must be at least 1");
        }
        if self.max_frames == 0 {
            return fail("max_frames must be positive");
        }
        if self.latent_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 || self.layers == 0 {
            return fail("latent_dim, model_dim, ff_dim, and layers must be positive");
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail("heads must divide model_dim");
        }
        if !(0.0..=1.0).contains(&self.dvae_fraction) {
            return fail("dvae_fraction must lie in [0, 1]");
        }
        if !(self.dvae_std >= 0.0) || !(self.kl_weight >= 0.0) {
            return fail("dvae_std and kl_weight must be non-negative");
        }
        if self.pose_dim == 0 || self.fps == 0 {
            return fail("pose_dim and fps must be positive");
        }
        Ok(())
    }
}

/// `k x D` latent sample, row-major by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub slots: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LatentCode {
    pub fn new(slots: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if slots == 0 || dim == 0 || values.len() != slots * dim {
            return Err(Error::Shape(format!(
                "{} values do not form {slots} slots of {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "latent code has non-finite entries".into(),
            ));
        }
        Ok(Self { slots, dim, values })
    }

    pub fn zeros(slots: usize, dim: usize) -> Self {
        Self {
            slots,
            dim,
            values: vec![0.0; slots * dim],
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(slots: usize, dim: usize, rng: &mut R) -> Self {
        let values = (0..slots * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self { slots, dim, values }
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Diagonal Gaussian posterior over `k` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePosterior {
    pub slots: usize,
    pub dim: usize,
    pub mus: Vec<f64>,
    /// Already clamped to [`LOG_VAR_RANGE`].
    pub log_vars: Vec<f64>,
}

impl SubspacePosterior {
    pub fn new(slots: usize, dim: usize, mus: Vec<f64>, log_vars: Vec<f64>) -> Result<Self> {
        if slots == 0 || mus.len() != slots * dim || log_vars.len() != mus.len() {
            return Err(Error::Shape(
                "posterior means and log-variances must both be k x D".into(),
            ));
        }
        let log_vars = log_vars
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_RANGE.0, LOG_VAR_RANGE.1))
            .collect();
        Ok(Self {
            slots,
            dim,
            mus,
            log_vars,
        })
    }

    pub fn mean(&self) -> LatentCode {
        LatentCode {
            slots: self.slots,
            dim: self.dim,
            values: self.mus.clone(),
        }
    }

    /// `1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1)` over all slots and coordinates.
    pub fn kl(&self) -> f64 {
        self.mus
            .iter()
            .zip(&self.log_vars)
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
            .sum()
    }
}

/// Draws `mu + s * rho` with `rho ~ N(0, I)` independently per slot; `s` is the variance
/// or the standard deviation depending on `scale`.
pub fn reparameterize<R: Rng + ?Sized>(
    post: &SubspacePosterior,
    scale: NoiseScale,
    rng: &mut R,
) -> LatentCode {
    let scales: Vec<f64> = post
        .log_vars
        .iter()
        .map(|&lv| match scale {
            NoiseScale::Variance => lv.exp(),
            NoiseScale::StdDev => (0.5 * lv).exp(),
        })
        .collect();
    LatentCode {
        slots: post.slots,
        dim: post.dim,
        values: sample_diagonal(&post.mus, &scales, rng),
    }
}

/// `mu + s * rho` coordinatewise with one standard normal draw per coordinate.
pub fn sample_diagonal<R: Rng + ?Sized>(mus: &[f64], scales: &[f64], rng: &mut R) -> Vec<f64> {
    mus.iter()
        .zip(scales)
        .map(|(&m, &s)| {
            let rho: f64 = StandardNormal.sample(rng);
            m + s * rho
        })
        .collect()
}

/// Adds `N(0, std^2)` noise to every channel of `floor(fraction * F)` distinct frames.
pub fn perturb_frames<R: Rng + ?Sized>(
    motion: &MotionSequence,
    fraction: f64,
    std: f64,
    rng: &mut R,
) -> Result<MotionSequence> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain(format!(
            "perturbation fraction {fraction} outside [0, 1]"
        )));
    }
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Domain(format!(
            "perturbation std {std} must be finite and non-negative"
        )));
    }
    let f = motion.frames();
    let count = (fraction * f as f64).floor() as usize;
    if count == 0 || std == 0.0 {
        return Ok(motion.clone());
    }
    let v = motion.pose_dim();
    let noise = Normal::new(0.0, std).expect("validated std");
    let mut data = motion.data().to_vec();
    let mut frames = rand::seq::index::sample(rng, f, count).into_vec();
    frames.sort_unstable();
    for t in frames {
        for x in &mut data[t * v..(t + 1) * v] {
            *x += noise.sample(rng);
        }
    }
    MotionSequence::new(motion.fps(), v, data)
}

/// Loss components of one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Mean squared reconstruction error against the clean motion plus the weighted KL.
pub fn vae_loss(
    clean: &MotionSequence,
    reconstructed: &MotionSequence,
    posterior: &SubspacePosterior,
    kl_weight: f64,
) -> Result<VaeLoss> {
    if clean.frames() != reconstructed.frames() || clean.pose_dim() != reconstructed.pose_dim() {
        return Err(Error::Shape(format!(
            "clean motion is {}x{}, reconstruction is {}x{}",
            clean.frames(),
            clean.pose_dim(),
            reconstructed.frames(),
            reconstructed.pose_dim()
        )));
    }
    let n = clean.data().len() as f64;
    let recon = clean
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let kl = posterior.kl();
    Ok(VaeLoss {
        total: recon + kl_weight * kl,
        recon,
        kl,
    })
}

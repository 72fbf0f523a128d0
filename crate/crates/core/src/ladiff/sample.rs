use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Denoiser, NoisePredictor, NoiseSchedule, SamplerKind};
use crate::corpus::{MotionSequence, TextEmbedding};
use crate::error::{Error, Result};
use crate::eval::{GenerationRequest, MotionGenerator};
use crate::lavae::{LaVae, LatentCode};
use crate::nn::Real;
use crate::rng;

/// Clean-latent estimate implied by a noise prediction.
fn predicted_clean(z_t: f64, eps: f64, alpha_bar: f64) -> f64 {
    (z_t - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()
}

/// Deterministic move from signal level `alpha_bar` to `alpha_bar_next`, reusing the predicted noise.
pub fn ddim_step(
    z_t: &LatentCode,
    eps: &LatentCode,
    alpha_bar: f64,
    alpha_bar_next: f64,
) -> Result<LatentCode> {
    if (z_t.slots, z_t.dim) != (eps.slots, eps.dim) {
        return Err(Error::Shape(
            "noise prediction does not match the latent shape".into(),
        ));
    }
    let (a, b) = (alpha_bar_next.sqrt(), (1.0 - alpha_bar_next).sqrt());
    let values = z_t
        .values
        .iter()
        .zip(&eps.values)
        .map(|(&z, &e)| a * predicted_clean(z, e, alpha_bar) + b * e)
        .collect();
    Ok(LatentCode {
        slots: z_t.slots,
        dim: z_t.dim,
        values,
    })
}

/// Stochastic move with the posterior variance of the respaced two-level process.
fn ancestral_step<R: Rng + ?Sized>(
    z_t: &LatentCode,
    eps: &LatentCode,
    alpha_bar: f64,
    alpha_bar_next: f64,
    rng: &mut R,
) -> Result<LatentCode> {
    if (z_t.slots, z_t.dim) != (eps.slots, eps.dim) {
        return Err(Error::Shape(
            "noise prediction does not match the latent shape".into(),
        ));
    }
    let var =
        ((1.0 - alpha_bar_next) / (1.0 - alpha_bar) * (1.0 - alpha_bar / alpha_bar_next)).max(0.0);
    let (a, b, s) = (
        alpha_bar_next.sqrt(),
        (1.0 - alpha_bar_next - var).max(0.0).sqrt(),
        var.sqrt(),
    );
    let values = z_t
        .values
        .iter()
        .zip(&eps.values)
        .map(|(&z, &e)| {
            let xi: f64 = if s > 0.0 {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            a * predicted_clean(z, e, alpha_bar) + b * e + s * xi
        })
        .collect();
    Ok(LatentCode {
        slots: z_t.slots,
        dim: z_t.dim,
        values,
    })
}

/// Runs the reverse process from pure noise of shape `slots x dim` along the schedule's
/// inference subsequence and returns the final clean estimate in diffusion space.
pub fn sample_latent<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    text: &TextEmbedding,
    slots: usize,
    dim: usize,
    rng: &mut R,
) -> Result<LatentCode> {
    let mut z = LatentCode::standard_normal(slots, dim, rng);
    for (i, &t) in schedule.inference_steps().iter().enumerate() {
        let eps = predictor.predict(&z, t, text)?;
        let (a, next) = (
            schedule.alpha_bar(t),
            schedule.alpha_bar(schedule.next_step(i)),
        );
        z = match kind {
            SamplerKind::Deterministic => ddim_step(&z, &eps, a, next)?,
            SamplerKind::Ancestral => ancestral_step(&z, &eps, a, next, rng)?,
        };
        if z.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite latent at timestep {t}"
            )));
        }
    }
    Ok(z)
}

/// Text-and-length-conditioned generation. The noise has exactly as many slots as
/// `f_star` activates; the result is a normalized motion of `f_star` frames.
pub fn sample<T: Real, U: Real, R: Rng + ?Sized>(
    vae: &LaVae<T>,
    denoiser: &Denoiser<U>,
    schedule: &NoiseSchedule,
    text: &TextEmbedding,
    f_star: usize,
    kind: SamplerKind,
    rng: &mut R,
) -> Result<MotionSequence> {
    let dim = vae.config().latent_dim;
    if denoiser.config().latent_dim != dim {
        return Err(Error::Shape(format!(
            "denoiser works on {}-dim latents, autoencoder on {dim}",
            denoiser.config().latent_dim
        )));
    }
    let slots = vae.config().active_slots(f_star)?;
    let mut z = sample_latent(denoiser, schedule, kind, text, slots, dim, rng)?;
    let scale = denoiser.latent_scale();
    z.values.iter_mut().for_each(|x| *x *= scale);
    vae.decode(&z, f_star)
}

/// Trained text-to-motion pipeline exposed to evaluation and analysis.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionGenerator<'a, T: Real, U: Real> {
    pub vae: &'a LaVae<T>,
    pub denoiser: &'a Denoiser<U>,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerKind,
    /// Shortest admissible target length; the autoencoder bounds the longest.
    pub min_frames: usize,
}

impl<T: Real, U: Real> MotionGenerator for DiffusionGenerator<'_, T, U> {
    fn generate(&self, request: &GenerationRequest<'_>, rng: &mut rng::Rng) -> Result<MotionSequence> {
        let max = self.vae.config().max_frames;
        if request.frames < self.min_frames || request.frames > max {
            return Err(Error::Length { frames: request.frames, min: self.min_frames, max });
        }
        sample(self.vae, self.denoiser, self.schedule, request.text, request.frames, self.sampler, rng)
    }
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use super::{Denoiser, NoiseSchedule};
use crate::corpus::{MotionSequence, TextEmbedding};
use crate::error::{Error, Result};
use crate::lavae::{reparameterize, LaVae, LatentCode, NoiseScale, SubspacePosterior};
use crate::nn::{AdamW, Gradients, Graph, Real};
use crate::rng;
use crate::training::{reduce_items, EpochMeter, EpochRecord, TrainConfig, TrainingLog};

/// One second-stage training example: the frozen encoder's posterior and the caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionItem {
    pub posterior: SubspacePosterior,
    pub text: TextEmbedding,
}

impl DiffusionItem {
    pub fn slots(&self) -> usize {
        self.posterior.slots
    }
}

/// Encodes every normalized motion once; the latents themselves are resampled at each step.
pub fn encode_posteriors<T: Real>(
    vae: &LaVae<T>,
    motions: &[&MotionSequence],
    texts: &[TextEmbedding],
) -> Result<Vec<DiffusionItem>> {
    if motions.len() != texts.len() {
        return Err(Error::Shape(format!(
            "{} motions but {} captions",
            motions.len(),
            texts.len()
        )));
    }
    motions
        .par_iter()
        .zip(texts)
        .map(|(m, t)| {
            Ok(DiffusionItem {
                posterior: vae.encode(m)?,
                text: t.clone(),
            })
        })
        .collect()
}

/// Root-mean-square of the posterior means, used to bring latents to unit scale.
pub fn latent_rms(items: &[DiffusionItem]) -> f64 {
    let (sq, n) = items.iter().fold((0.0, 0usize), |(s, n), it| {
        (
            s + it.posterior.mus.iter().map(|x| x * x).sum::<f64>(),
            n + it.posterior.mus.len(),
        )
    });
    if n == 0 || sq == 0.0 {
        1.0
    } else {
        (sq / n as f64).sqrt()
    }
}

/// Items processed by one graph; a batch is split into such chunks for parallel evaluation.
const CHUNK: usize = 16;
const SHUFFLE_TAG: u64 = 1 << 62;

struct Draw {
    z_t: Vec<f64>,
    noise: Vec<f64>,
    t: usize,
}

fn draw(
    item: &DiffusionItem,
    noise_scale: NoiseScale,
    latent_scale: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Draw {
    let mut r = rng::seeded(seed);
    let z0 = reparameterize(&item.posterior, noise_scale, &mut r);
    let t = r.random_range(1..=schedule.steps());
    let eps = LatentCode::standard_normal(z0.slots, z0.dim, &mut r);
    let (a, b) = (
        schedule.alpha_bar(t).sqrt(),
        (1.0 - schedule.alpha_bar(t)).sqrt(),
    );
    let z_t = z0
        .values
        .iter()
        .zip(&eps.values)
        .map(|(&z, &e)| a * z / latent_scale + b * e)
        .collect();
    Draw {
        z_t,
        noise: eps.values,
        t,
    }
}

impl<T: Real> Denoiser<T> {
    /// Mean noise-prediction loss over every coordinate of `items` and its gradients. Item `i`
    /// draws its latent, timestep and noise from `seeds[i]`; same-size items share a graph.
    pub fn batch_gradients(
        &self,
        items: &[&DiffusionItem],
        seeds: &[u64],
        schedule: &NoiseSchedule,
        noise_scale: NoiseScale,
    ) -> Result<(Gradients<T>, f64)> {
        assert_eq!(items.len(), seeds.len(), "one seed per item");
        let mut by_slots: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            by_slots.entry(it.slots()).or_default().push(i);
        }
        let chunks: Vec<Vec<usize>> = by_slots
            .values()
            .flat_map(|idx| idx.chunks(CHUNK).map(<[usize]>::to_vec))
            .collect();
        let total: usize = items.iter().map(|it| it.slots() * it.posterior.dim).sum();
        let scale = self.latent_scale();
        let (grads, parts) = reduce_items(self.store(), &chunks, |_, chunk| {
            let draws: Vec<Draw> = chunk
                .iter()
                .map(|&i| draw(items[i], noise_scale, scale, schedule, seeds[i]))
                .collect();
            let z_t: Vec<f64> = draws.iter().flat_map(|d| d.z_t.iter().copied()).collect();
            let noise: Vec<f64> = draws.iter().flat_map(|d| d.noise.iter().copied()).collect();
            let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
            let texts: Vec<&TextEmbedding> = chunk.iter().map(|&i| &items[i].text).collect();
            let mut g = Graph::new(self.store());
            let loss =
                self.loss_nodes(&mut g, &z_t, &noise, items[chunk[0]].slots(), &ts, &texts)?;
            let weight = noise.len() as f64 / total as f64;
            let mut grads = g.backward(loss);
            grads.scale(T::from_f64_lossy(weight));
            Ok((grads, vec![g.scalar(loss).to_f64_lossy() * weight]))
        })?;
        Ok((grads, parts.first().copied().unwrap_or(0.0)))
    }
}

/// Splits a shuffled order into same-size batches and shuffles the batch order.
fn batches(
    items: &[DiffusionItem],
    order: &[usize],
    batch_size: usize,
    r: &mut rng::Rng,
) -> Vec<Vec<usize>> {
    let mut by_slots: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        by_slots.entry(items[i].slots()).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = by_slots
        .values()
        .flat_map(|idx| idx.chunks(batch_size).map(<[usize]>::to_vec))
        .collect();
    out.shuffle(r);
    out
}

/// Second-stage training. The autoencoder only supplies the reparameterization convention
/// and is checked to be bitwise unchanged afterwards. Sets the denoiser's latent scale from
/// the posterior means before the first step.
pub fn train_denoiser<T: Real, V: Real>(
    denoiser: &mut Denoiser<T>,
    vae: &LaVae<V>,
    items: &[DiffusionItem],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingLog> {
    config.validate("denoiser_train")?;
    if items.is_empty() {
        return Err(Error::InsufficientData {
            what: "diffusion training items",
            needed: 1,
            available: 0,
        });
    }
    let dim = denoiser.config().latent_dim;
    if let Some(bad) = items
        .iter()
        .find(|it| it.posterior.dim != dim || it.slots() > denoiser.config().max_slots)
    {
        return Err(Error::Shape(format!(
            "item latent {}x{} does not fit a denoiser of {dim} dims and {} slots",
            bad.slots(),
            bad.posterior.dim,
            denoiser.config().max_slots
        )));
    }
    let vae_checksum = vae.store().checksum();
    let noise_scale = vae.config().noise_scale;
    denoiser.set_latent_scale(latent_rms(items));
    let mut opt = AdamW::new(config.adamw(), denoiser.store());
    let mut log = TrainingLog::default();
    let mut steps = 0usize;
    let mut seen = 0u64;
    let mut order: Vec<usize> = (0..items.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        let mut r = rng::derived(
            seed,
            rng::stream::DENOISER_TRAIN,
            SHUFFLE_TAG | epoch as u64,
        );
        order.shuffle(&mut r);
        let mut meter = EpochMeter::new(&["diffusion"]);
        for (b, batch) in batches(items, &order, config.batch_size, &mut r)
            .into_iter()
            .enumerate()
        {
            let refs: Vec<&DiffusionItem> = batch.iter().map(|&i| &items[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|i| rng::derive_seed(seed, rng::stream::DENOISER_TRAIN, seen + i as u64))
                .collect();
            seen += batch.len() as u64;
            let (grads, loss) = denoiser.batch_gradients(&refs, &seeds, schedule, noise_scale)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "denoiser",
                    step: steps,
                    batch: b,
                    detail: format!(
                        "epoch {epoch}, {} slots, training indices {batch:?}",
                        refs[0].slots()
                    ),
                });
            }
            // the latent scale is a statistic of the data, not a trainable weight
            let scale = denoiser.latent_scale();
            opt.step(denoiser.store_mut(), &grads);
            denoiser.set_latent_scale(scale);
            meter.add(&[loss], batch.len());
            steps += 1;
            if config.step_limit_reached(steps) {
                let rec = meter.finish(epoch);
                on_epoch(&rec);
                log.epochs.push(rec);
                break 'epochs;
            }
        }
        let rec = meter.finish(epoch);
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    if vae.store().checksum() != vae_checksum {
        return Err(Error::Numerical(
            "autoencoder parameters changed during second-stage training".into(),
        ));
    }
    Ok(log)
}

use rand::seq::SliceRandom;

use super::LaVae;
use crate::corpus::MotionSequence;
use crate::error::{Error, Result};
use crate::nn::{AdamW, Gradients, Graph, Real};
use crate::rng;
use crate::training::{reduce_items, EpochMeter, EpochRecord, TrainConfig, TrainingLog};

/// Batch means of the loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeBatchLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

const SHUFFLE_TAG: u64 = 1 << 62;

impl<T: Real> LaVae<T> {
    /// Mean loss and gradients over a batch; item `i` draws its noise from `seeds[i]`.
    pub fn batch_gradients(
        &self,
        motions: &[&MotionSequence],
        seeds: &[u64],
    ) -> Result<(Gradients<T>, VaeBatchLoss)> {
        assert_eq!(motions.len(), seeds.len(), "one seed per motion");
        let items: Vec<(&MotionSequence, u64)> =
            motions.iter().copied().zip(seeds.iter().copied()).collect();
        let (mut grads, parts) = reduce_items(self.store(), &items, |_, &(m, seed)| {
            let mut r = rng::seeded(seed);
            let mut g = Graph::new(self.store());
            let nodes = self.loss_nodes(&mut g, m, &mut r)?;
            let parts = vec![
                g.scalar(nodes.total),
                g.scalar(nodes.recon),
                g.scalar(nodes.kl),
            ];
            Ok((
                g.backward(nodes.total),
                parts.into_iter().map(|x| x.to_f64_lossy()).collect(),
            ))
        })?;
        let n = motions.len().max(1) as f64;
        grads.scale(T::from_f64_lossy(1.0 / n));
        let mean = |i: usize| parts.get(i).copied().unwrap_or(0.0) / n;
        Ok((
            grads,
            VaeBatchLoss {
                total: mean(0),
                recon: mean(1),
                kl: mean(2),
            },
        ))
    }
}

/// First-stage training on normalized motions. `on_epoch` sees every epoch record as it completes.
pub fn train_vae<T: Real>(
    model: &mut LaVae<T>,
    train: &[MotionSequence],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingLog> {
    config.validate("vae_train")?;
    if train.is_empty() {
        return Err(Error::InsufficientData {
            what: "vae training motions",
            needed: 1,
            available: 0,
        });
    }
    let mut opt = AdamW::new(config.adamw(), model.store());
    let mut log = TrainingLog::default();
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng::derived(
            seed,
            rng::stream::VAE_TRAIN,
            SHUFFLE_TAG | epoch as u64,
        ));
        let mut meter = EpochMeter::new(&["recon", "kl", "total"]);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let motions: Vec<&MotionSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|i| {
                    rng::derive_seed(
                        seed,
                        rng::stream::VAE_TRAIN,
                        (steps * config.batch_size + i) as u64,
                    )
                })
                .collect();
            let (grads, loss) = model.batch_gradients(&motions, &seeds)?;
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "vae",
                    step: steps,
                    batch: b,
                    detail: format!(
                        "epoch {epoch}, recon {}, kl {}, training indices {chunk:?}",
                        loss.recon, loss.kl
                    ),
                });
            }
            opt.step(model.store_mut(), &grads);
            meter.add(&[loss.recon, loss.kl, loss.total], chunk.len());
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
    Ok(log)
}

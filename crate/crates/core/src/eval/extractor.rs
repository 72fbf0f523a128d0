use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{MotionSequence, TextEmbedding};
use crate::error::{Error, Result};
use crate::nn::layers::{sinusoidal_table, EncoderBlock, LayerNorm, Linear};
use crate::nn::{AdamW, Graph, Init, NodeId, ParamId, ParamStore, Real};
use crate::rng;
use crate::training::{EpochMeter, EpochRecord, TrainConfig, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Softmax temperature of the contrastive objective.
    pub temperature: f64,
    /// Required gap between matched and mismatched validation cosine similarity.
    pub min_margin: f64,
    #[serde(skip)]
    pub pose_dim: usize,
    #[serde(skip)]
    pub text_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            model_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            temperature: 0.1,
            min_margin: 0.2,
            pose_dim: 49,
            text_dim: 64,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.model_dim == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("extractor sizes must be positive".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(
                "extractor.heads must divide extractor.model_dim".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(
                "extractor.temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Margin stored before any validation; below every attainable cosine gap.
const UNVALIDATED: f64 = -1e30;

/// Motion and text encoders into one unit-norm feature space.
///
/// The validation margin is stored alongside the weights; evaluation refuses extractors
/// whose stored margin is below the configured requirement.
#[derive(Debug, Clone)]
pub struct FeatureExtractors<T: Real> {
    config: ExtractorConfig,
    store: ParamStore<T>,
    frame_in: Linear,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    motion_out: Linear,
    text_hidden: Linear,
    text_out: Linear,
    margin: ParamId,
}

impl<T: Real> FeatureExtractors<T> {
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived(seed, rng::stream::EXTRACTOR_INIT, 0);
        let r = &mut r;
        let mut s = ParamStore::new();
        let (d, f) = (config.model_dim, config.feature_dim);
        let frame_in = Linear::new(&mut s, "motion.frame_in", config.pose_dim, d, r);
        let blocks = (0..config.layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut s,
                    &format!("motion.block{i}"),
                    d,
                    config.heads,
                    config.ff_dim,
                    r,
                )
            })
            .collect();
        let norm = LayerNorm::new(&mut s, "motion.norm", d, r);
        let motion_out = Linear::new(&mut s, "motion.out", d, f, r);
        let text_hidden = Linear::new(&mut s, "text.hidden", config.text_dim, 2 * d, r);
        let text_out = Linear::new(&mut s, "text.out", 2 * d, f, r);
        let margin = s.add("validation.margin", 1, 1, Init::Zeros, r);
        s.get_mut(margin)[0] = T::from_f64_lossy(UNVALIDATED);
        Ok(Self {
            config,
            store: s,
            frame_in,
            blocks,
            norm,
            motion_out,
            text_hidden,
            text_out,
            margin,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn replace_parameters(&mut self, store: ParamStore<T>) -> Result<()> {
        crate::lavae::check_layout(&self.store, &store)?;
        self.store = store;
        Ok(())
    }

    /// Matched-minus-mismatched validation cosine gap recorded at fitting time.
    pub fn margin(&self) -> f64 {
        self.store.get(self.margin)[0].to_f64_lossy()
    }

    fn set_margin(&mut self, m: f64) {
        self.store.get_mut(self.margin)[0] = T::from_f64_lossy(m);
    }

    /// Errors unless the stored margin meets the configured requirement.
    pub fn ensure_validated(&self) -> Result<()> {
        let m = self.margin();
        if m < self.config.min_margin {
            return Err(Error::ExtractorQuality {
                margin: m,
                required: self.config.min_margin,
            });
        }
        Ok(())
    }

    fn motion_node<'p>(&'p self, g: &mut Graph<'p, T>, m: &MotionSequence) -> Result<NodeId> {
        let c = &self.config;
        if m.pose_dim() != c.pose_dim {
            return Err(Error::Shape(format!(
                "motion has {} channels, extractor expects {}",
                m.pose_dim(),
                c.pose_dim
            )));
        }
        let f = m.frames();
        if f == 0 {
            return Err(Error::Shape("empty motion".into()));
        }
        let x = g.input(crate::nn::Tensor::from_f64(f, c.pose_dim, m.data()));
        let pos = g.input(sinusoidal_table(f, c.model_dim));
        let h = self.frame_in.forward(g, x);
        let mut h = g.add(h, pos);
        for b in &self.blocks {
            h = b.forward(g, h, f);
        }
        let h = self.norm.forward(g, h);
        let pooled = g.mean_rows(h, f);
        let out = self.motion_out.forward(g, pooled);
        Ok(g.l2_normalize_rows(out))
    }

    fn text_node<'p>(&'p self, g: &mut Graph<'p, T>, texts: &[&TextEmbedding]) -> Result<NodeId> {
        let c = &self.config;
        let mut rows = Vec::with_capacity(texts.len() * c.text_dim);
        for t in texts {
            if t.dim() != c.text_dim {
                return Err(Error::Shape(format!(
                    "text embedding has {} dims, expected {}",
                    t.dim(),
                    c.text_dim
                )));
            }
            rows.extend_from_slice(&t.0);
        }
        let x = g.input(crate::nn::Tensor::from_f64(texts.len(), c.text_dim, &rows));
        let h = self.text_hidden.forward(g, x);
        let h = g.gelu(h);
        let out = self.text_out.forward(g, h);
        Ok(g.l2_normalize_rows(out))
    }

    /// Symmetric contrastive loss over matched pairs of a batch.
    pub fn loss_node<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        motions: &[&MotionSequence],
        texts: &[&TextEmbedding],
    ) -> Result<NodeId> {
        if motions.len() != texts.len() || motions.len() < 2 {
            return Err(Error::Shape(
                "contrastive batch needs at least two matched pairs".into(),
            ));
        }
        let rows = motions
            .iter()
            .map(|m| self.motion_node(g, m))
            .collect::<Result<Vec<_>>>()?;
        let m = g.concat_rows(&rows);
        let t = self.text_node(g, texts)?;
        let tt = g.transpose(t);
        let sim = g.matmul(m, tt);
        let logits = g.scale(sim, 1.0 / self.config.temperature);
        let motion_to_text = g.cross_entropy_diag(logits);
        let lt = g.transpose(logits);
        let text_to_motion = g.cross_entropy_diag(lt);
        let both = g.add(motion_to_text, text_to_motion);
        Ok(g.scale(both, 0.5))
    }

    /// Unit-norm motion features, one row per motion.
    pub fn motion_features(&self, motions: &[&MotionSequence]) -> Result<Vec<Vec<f64>>> {
        motions
            .par_iter()
            .map(|m| {
                let mut g = Graph::inference(&self.store);
                let n = self.motion_node(&mut g, m)?;
                Ok(g.value(n).iter().map(|x| x.to_f64_lossy()).collect())
            })
            .collect()
    }

    /// Unit-norm text features, one row per embedding.
    pub fn text_features(&self, texts: &[&TextEmbedding]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(&self.store);
        let n = self.text_node(&mut g, texts)?;
        let f = self.config.feature_dim;
        Ok(g.value(n)
            .chunks(f)
            .map(|r| r.iter().map(|x| x.to_f64_lossy()).collect())
            .collect())
    }

    /// Mean matched cosine minus mean mismatched cosine over all pairs.
    pub fn measure_margin(
        &self,
        motions: &[&MotionSequence],
        texts: &[&TextEmbedding],
    ) -> Result<f64> {
        let n = motions.len();
        if n < 2 || texts.len() != n {
            return Err(Error::InsufficientData {
                what: "validation pairs",
                needed: 2,
                available: n.min(texts.len()),
            });
        }
        let mf = self.motion_features(motions)?;
        let tf = self.text_features(texts)?;
        let (mut matched, mut mismatched) = (0.0, 0.0);
        for (i, m) in mf.iter().enumerate() {
            for (j, t) in tf.iter().enumerate() {
                let c: f64 = m.iter().zip(t).map(|(a, b)| a * b).sum();
                if i == j {
                    matched += c;
                } else {
                    mismatched += c;
                }
            }
        }
        Ok(matched / n as f64 - mismatched / (n * (n - 1)) as f64)
    }
}

const SHUFFLE_TAG: u64 = 1 << 62;

/// Contrastive fitting on matched training pairs, then the validation margin gate.
/// Fails with an extractor-quality error when the margin stays below the requirement.
pub fn train_extractors<T: Real>(
    model: &mut FeatureExtractors<T>,
    train: (&[&MotionSequence], &[&TextEmbedding]),
    val: (&[&MotionSequence], &[&TextEmbedding]),
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingLog> {
    config.validate("extractor_train")?;
    let (motions, texts) = train;
    if motions.len() != texts.len() {
        return Err(Error::Shape(format!(
            "{} motions but {} captions",
            motions.len(),
            texts.len()
        )));
    }
    if motions.len() < 2 {
        return Err(Error::InsufficientData {
            what: "extractor training pairs",
            needed: 2,
            available: motions.len(),
        });
    }
    let mut opt = AdamW::new(config.adamw(), model.store());
    let mut log = TrainingLog::default();
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..motions.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng::derived(
            seed,
            rng::stream::EXTRACTOR_TRAIN,
            SHUFFLE_TAG | epoch as u64,
        ));
        let mut meter = EpochMeter::new(&["contrastive"]);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let ms: Vec<&MotionSequence> = chunk.iter().map(|&i| motions[i]).collect();
            let ts: Vec<&TextEmbedding> = chunk.iter().map(|&i| texts[i]).collect();
            let (grads, loss) = {
                let mut g = Graph::new(model.store());
                let l = model.loss_node(&mut g, &ms, &ts)?;
                (g.backward(l), g.scalar(l).to_f64_lossy())
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "extractor",
                    step: steps,
                    batch: b,
                    detail: format!("epoch {epoch}, training indices {chunk:?}"),
                });
            }
            opt.step(model.store_mut(), &grads);
            meter.add(&[loss], chunk.len());
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
    let margin = model.measure_margin(val.0, val.1)?;
    model.set_margin(margin);
    model.ensure_validated()?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, split_of, CorpusConfig, Normalizer, Split};
    use crate::eval::r_precision;

    fn tiny() -> ExtractorConfig {
        ExtractorConfig {
            feature_dim: 16,
            model_dim: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            pose_dim: 49,
            text_dim: 64,
            ..ExtractorConfig::default()
        }
    }

    fn corpus() -> (Vec<MotionSequence>, Vec<TextEmbedding>, Vec<Split>) {
        let cfg = CorpusConfig {
            samples: 160,
            min_frames: 30,
            max_frames: 60,
            ..CorpusConfig::default()
        };
        let samples = generate_corpus(&cfg, 3).unwrap();
        let norm =
            Normalizer::fit(split_of(&samples, Split::Train).iter().map(|s| &s.motion)).unwrap();
        let e = cfg.embedder();
        (
            samples
                .iter()
                .map(|s| norm.normalize(&s.motion).unwrap())
                .collect(),
            samples
                .iter()
                .map(|s| e.embed_descriptor(&s.descriptor).unwrap())
                .collect(),
            samples.iter().map(|s| s.split).collect(),
        )
    }

    #[test]
    fn untrained_extractors_are_unvalidated() {
        let x = FeatureExtractors::<f32>::new(tiny(), 0).unwrap();
        assert!(matches!(
            x.ensure_validated(),
            Err(Error::ExtractorQuality { .. })
        ));
    }

    #[test]
    fn features_are_unit_norm_and_deterministic() {
        let (m, t, _) = corpus();
        let x = FeatureExtractors::<f32>::new(tiny(), 0).unwrap();
        let refs: Vec<&MotionSequence> = m.iter().take(5).collect();
        let a = x.motion_features(&refs).unwrap();
        assert_eq!(a, x.motion_features(&refs).unwrap());
        for row in a.iter().chain(
            &x.text_features(&t.iter().take(5).collect::<Vec<_>>())
                .unwrap(),
        ) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn contrastive_training_opens_the_margin() {
        let (m, t, splits) = corpus();
        let pick = |s: Split| -> (Vec<&MotionSequence>, Vec<&TextEmbedding>) {
            let idx: Vec<usize> = (0..m.len()).filter(|&i| splits[i] == s).collect();
            (
                idx.iter().map(|&i| &m[i]).collect(),
                idx.iter().map(|&i| &t[i]).collect(),
            )
        };
        let (tm, tt) = pick(Split::Train);
        let (vm, vt) = pick(Split::Val);
        let mut x = FeatureExtractors::<f32>::new(tiny(), 1).unwrap();
        let before = x.measure_margin(&vm, &vt).unwrap();
        let tc = TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 3e-3,
            ..Default::default()
        };
        let run = |x: &mut FeatureExtractors<f32>| {
            train_extractors(x, (&tm, &tt), (&vm, &vt), &tc, 2, |_| {})
        };
        run(&mut x).unwrap();
        assert!(
            x.margin() >= 0.2 && x.margin() > before,
            "{before} -> {}",
            x.margin()
        );
        let mut again = FeatureExtractors::<f32>::new(tiny(), 1).unwrap();
        run(&mut again).unwrap();
        assert_eq!(x.store().checksum(), again.store().checksum());
        // retrieval on real pairs beats chance once fitted
        let all_m: Vec<&MotionSequence> = m.iter().collect();
        let all_t: Vec<&TextEmbedding> = t.iter().collect();
        let (mf, tf) = (
            x.motion_features(&all_m).unwrap(),
            x.text_features(&all_t).unwrap(),
        );
        let rp = r_precision(&mf, &tf, 32, &mut rng::seeded(0)).unwrap();
        assert!(rp[0] > 3.0 / 32.0, "{rp:?}");
    }

    #[test]
    fn margin_gate_rejects_an_impossible_requirement() {
        let (m, t, _) = corpus();
        let ms: Vec<&MotionSequence> = m.iter().take(20).collect();
        let ts: Vec<&TextEmbedding> = t.iter().take(20).collect();
        let mut x = FeatureExtractors::<f32>::new(
            ExtractorConfig {
                min_margin: 2.5,
                ..tiny()
            },
            0,
        )
        .unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 10,
            lr: 1e-3,
            ..Default::default()
        };
        let r = train_extractors(&mut x, (&ms, &ts), (&ms, &ts), &tc, 0, |_| {});
        assert!(matches!(r, Err(Error::ExtractorQuality { .. })));
    }
}

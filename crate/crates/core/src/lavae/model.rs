use std::f64::consts::PI;

use rand::Rng;

use super::{
    perturb_frames, DvaeTarget, LaVaeConfig, LatentCode, NoiseScale, SubspacePosterior,
    LOG_VAR_RANGE,
};
use crate::corpus::MotionSequence;
use crate::error::{Error, Result};
use crate::nn::layers::{sinusoidal, DecoderBlock, EncoderBlock, LayerNorm, Linear};
use crate::nn::{Graph, Init, NodeId, ParamId, ParamStore, Real, Tensor};
use crate::rng;

/// Transformer VAE over variable-length motions with a variable number of latent slots.
///
/// Parameter layout depends only on the configuration, so two models built from equal
/// configurations can exchange parameter stores.
#[derive(Debug, Clone)]
pub struct LaVae<T: Real> {
    config: LaVaeConfig,
    store: ParamStore<T>,
    frame_in: Linear,
    enc_pos: Linear,
    slot_queries: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    mu_head: Linear,
    log_var_head: Linear,
    latent_in: Linear,
    slot_embed: ParamId,
    dec_pos: Linear,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    out: Linear,
}

/// Graph nodes of one training reconstruction.
#[derive(Debug, Clone, Copy)]
pub struct VaeLossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
    pub slots: usize,
}

/// A decoded motion together with the decoder's cross-attention weights.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub motion: MotionSequence,
    pub heads: usize,
    /// One entry per decoder layer, laid out `[head][frame][slot]`.
    pub cross_attention: Vec<Vec<f64>>,
}

/// Width of the positional feature vector fed to the position projections.
fn position_width(model_dim: usize) -> usize {
    3 * (model_dim / 2).max(4).next_multiple_of(2)
}

/// Per-frame features of a sequence of `frames` frames: sinusoidal absolute index,
/// harmonics of the normalized phase `i / (frames - 1)`, and a sinusoidal code of the length.
pub(crate) fn position_features(frames: usize, width: usize) -> Vec<f64> {
    let q = width / 3;
    let length = sinusoidal(frames as f64, q);
    let denom = frames.saturating_sub(1).max(1) as f64;
    let mut out = Vec::with_capacity(frames * width);
    for i in 0..frames {
        out.extend(sinusoidal(i as f64, q));
        let s = i as f64 / denom;
        for m in 0..q / 2 {
            let w = PI * (m + 1) as f64 * s;
            out.push(w.sin());
            out.push(w.cos());
        }
        out.extend_from_slice(&length);
    }
    out
}

impl<T: Real> LaVae<T> {
    pub fn new(config: LaVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived(seed, rng::stream::VAE_INIT, 0);
        let r = &mut r;
        let mut s = ParamStore::new();
        let (v, d, z) = (config.pose_dim, config.model_dim, config.latent_dim);
        let k_max = config.max_slots();
        let pw = position_width(d);
        let frame_in = Linear::new(&mut s, "enc.frame_in", v, d, r);
        let enc_pos = Linear::new(&mut s, "enc.pos", pw, d, r);
        let slot_queries = s.add("enc.slot_queries", k_max, d, Init::Normal(1.0), r);
        let encoder = (0..config.layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut s,
                    &format!("enc.block{i}"),
                    d,
                    config.heads,
                    config.ff_dim,
                    r,
                )
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut s, "enc.norm", d, r);
        let mu_head = Linear::new(&mut s, "enc.mu", d, z, r);
        let log_var_head = Linear::new(&mut s, "enc.log_var", d, z, r);
        let latent_in = Linear::new(&mut s, "dec.latent_in", z, d, r);
        let slot_embed = s.add("dec.slot_embed", k_max, d, Init::Normal(1.0), r);
        let dec_pos = Linear::new(&mut s, "dec.pos", pw, d, r);
        let decoder = (0..config.layers)
            .map(|i| {
                DecoderBlock::new(
                    &mut s,
                    &format!("dec.block{i}"),
                    d,
                    config.heads,
                    config.ff_dim,
                    r,
                )
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut s, "dec.norm", d, r);
        let out = Linear::new(&mut s, "dec.out", d, v, r);
        Ok(Self {
            config,
            store: s,
            frame_in,
            enc_pos,
            slot_queries,
            encoder,
            enc_norm,
            mu_head,
            log_var_head,
            latent_in,
            slot_embed,
            dec_pos,
            decoder,
            dec_norm,
            out,
        })
    }

    pub fn config(&self) -> &LaVaeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Swaps in parameters produced by a model of the same configuration.
    pub fn replace_parameters(&mut self, store: ParamStore<T>) -> Result<()> {
        check_layout(&self.store, &store)?;
        self.store = store;
        Ok(())
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> LaVae<U> {
        LaVae {
            config: self.config.clone(),
            store: self.store.cast(),
            frame_in: self.frame_in.clone(),
            enc_pos: self.enc_pos.clone(),
            slot_queries: self.slot_queries,
            encoder: self.encoder.clone(),
            enc_norm: self.enc_norm.clone(),
            mu_head: self.mu_head.clone(),
            log_var_head: self.log_var_head.clone(),
            latent_in: self.latent_in.clone(),
            slot_embed: self.slot_embed,
            dec_pos: self.dec_pos.clone(),
            decoder: self.decoder.clone(),
            dec_norm: self.dec_norm.clone(),
            out: self.out.clone(),
        }
    }

    fn check_motion(&self, motion: &MotionSequence) -> Result<()> {
        if motion.pose_dim() != self.config.pose_dim {
            return Err(Error::Shape(format!(
                "model expects {} channels, motion has {}",
                self.config.pose_dim,
                motion.pose_dim()
            )));
        }
        Ok(())
    }

    /// Builds the encoder; returns the posterior mean node, the clamped log-variance node,
    /// and the slot count.
    pub fn encode_nodes<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        motion: &MotionSequence,
    ) -> Result<(NodeId, NodeId, usize)> {
        self.check_motion(motion)?;
        let f = motion.frames();
        let k = self.config.active_slots(f)?;
        let pw = position_width(self.config.model_dim);
        let x = g.input(Tensor::from_f64(f, self.config.pose_dim, motion.data()));
        let h = self.frame_in.forward(g, x);
        let p = g.input(Tensor::from_f64(f, pw, &position_features(f, pw)));
        let p = self.enc_pos.forward(g, p);
        let h = g.add(h, p);
        let q = g.param(self.slot_queries);
        let q = g.slice_rows(q, 0, k);
        let mut tokens = g.concat_rows(&[q, h]);
        for block in &self.encoder {
            tokens = block.forward(g, tokens, k + f);
        }
        let tokens = self.enc_norm.forward(g, tokens);
        let slots = g.slice_rows(tokens, 0, k);
        let mu = self.mu_head.forward(g, slots);
        let lv = self.log_var_head.forward(g, slots);
        let lv = g.clamp(lv, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        Ok((mu, lv, k))
    }

    /// Builds the decoder for a `k x D` latent node; returns the `f_star x V` output node and
    /// one cross-attention node per layer.
    pub fn decode_nodes<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        z: NodeId,
        f_star: usize,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let k = self.config.active_slots(f_star)?;
        let (rows, cols) = g.shape(z);
        if rows != k || cols != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "{f_star} frames need a {k}x{} latent, got {rows}x{cols}",
                self.config.latent_dim
            )));
        }
        let pw = position_width(self.config.model_dim);
        let mem = self.latent_in.forward(g, z);
        let emb = g.param(self.slot_embed);
        let emb = g.slice_rows(emb, 0, k);
        let mem = g.add(mem, emb);
        let p = g.input(Tensor::from_f64(f_star, pw, &position_features(f_star, pw)));
        let mut x = self.dec_pos.forward(g, p);
        let mut attn = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let (y, a) = block.forward(g, x, mem);
            x = y;
            attn.push(a);
        }
        let x = self.dec_norm.forward(g, x);
        Ok((self.out.forward(g, x), attn))
    }

    /// Posterior over the `ceil(F / r)` active slots of a normalized motion.
    pub fn encode(&self, motion: &MotionSequence) -> Result<SubspacePosterior> {
        let mut g = Graph::inference(&self.store);
        let (mu, lv, k) = self.encode_nodes(&mut g, motion)?;
        let to64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        SubspacePosterior::new(
            k,
            self.config.latent_dim,
            to64(g.value(mu)),
            to64(g.value(lv)),
        )
    }

    /// Decodes exactly `f_star` normalized frames; `z` must have `ceil(f_star / r)` slots.
    pub fn decode(&self, z: &LatentCode, f_star: usize) -> Result<MotionSequence> {
        Ok(self.decode_traced(z, f_star)?.motion)
    }

    pub fn decode_traced(&self, z: &LatentCode, f_star: usize) -> Result<DecodeTrace> {
        let k = self.config.active_slots(f_star)?;
        if z.slots != k || z.dim != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "{f_star} frames need {k} latent slots of {}, got {} of {}",
                self.config.latent_dim, z.slots, z.dim
            )));
        }
        let mut g = Graph::inference(&self.store);
        let zn = g.input(Tensor::from_f64(z.slots, z.dim, &z.values));
        let (out, attn) = self.decode_nodes(&mut g, zn, f_star)?;
        let data = g.value(out).iter().map(|x| x.to_f64_lossy()).collect();
        let motion = MotionSequence::new(self.config.fps, self.config.pose_dim, data)?;
        let cross_attention = attn
            .iter()
            .map(|&a| {
                let rec = g.attention_record(a).expect("cross-attention node");
                rec.probs.iter().map(|x| x.to_f64_lossy()).collect()
            })
            .collect();
        Ok(DecodeTrace {
            motion,
            heads: self.config.heads,
            cross_attention,
        })
    }

    /// Decodes the posterior mean of a motion back to its own length.
    pub fn reconstruct(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        let post = self.encode(motion)?;
        self.decode(&post.mean(), motion.frames())
    }

    /// Full training objective for one clean normalized motion: perturb, encode,
    /// reparameterize, decode, and compare with the clean motion.
    pub fn loss_nodes<'p, R: Rng + ?Sized>(
        &'p self,
        g: &mut Graph<'p, T>,
        clean: &MotionSequence,
        rng: &mut R,
    ) -> Result<VaeLossNodes> {
        let c = &self.config;
        let input = match c.dvae_target {
            DvaeTarget::Input => perturb_frames(clean, c.dvae_fraction, c.dvae_std, rng)?,
            DvaeTarget::Latent => clean.clone(),
        };
        let (mu, lv, k) = self.encode_nodes(g, &input)?;
        let n = k * c.latent_dim;
        let rho = LatentCode::standard_normal(k, c.latent_dim, rng);
        let rho = g.input(Tensor::from_f64(k, c.latent_dim, &rho.values));
        let scale = match c.noise_scale {
            NoiseScale::Variance => g.exp(lv),
            NoiseScale::StdDev => {
                let half = g.scale(lv, 0.5);
                g.exp(half)
            }
        };
        let noise = g.mul(scale, rho);
        let mut z = g.add(mu, noise);
        if c.dvae_target == DvaeTarget::Latent {
            let shift = latent_perturbation(k, c.latent_dim, c.dvae_fraction, c.dvae_std, rng);
            let shift = g.input(Tensor::from_f64(k, c.latent_dim, &shift));
            z = g.add(z, shift);
        }
        let (out, _) = self.decode_nodes(g, z, clean.frames())?;
        let target: Vec<T> = clean.data().iter().map(|&x| T::from_f64_lossy(x)).collect();
        let recon = g.mse(out, &target);

        let mu2 = g.mul(mu, mu);
        let var = g.exp(lv);
        let a = g.add(mu2, var);
        let a = g.sub(a, lv);
        let s = g.sum(a);
        let offset = g.input(Tensor::from_f64(1, 1, &[-(n as f64)]));
        let s = g.add(s, offset);
        let kl = g.scale(s, 0.5);
        let weighted = g.scale(kl, c.kl_weight);
        let total = g.add(recon, weighted);
        Ok(VaeLossNodes {
            total,
            recon,
            kl,
            slots: k,
        })
    }
}

/// Additive noise on `floor(fraction * k * D)` distinct latent coordinates.
fn latent_perturbation<R: Rng + ?Sized>(
    slots: usize,
    dim: usize,
    fraction: f64,
    std: f64,
    rng: &mut R,
) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let n = slots * dim;
    let mut out = vec![0.0; n];
    let count = (fraction * n as f64).floor() as usize;
    if count == 0 || std == 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, std).expect("validated std");
    let mut idx = rand::seq::index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    for i in idx {
        out[i] = noise.sample(rng);
    }
    out
}

pub fn check_layout<T: Real>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter blocks, got {}",
            expected.len(),
            got.len()
        )));
    }
    for (a, b) in expected.ids().zip(got.ids()) {
        if expected.name(a) != got.name(b) || expected.shape(a) != got.shape(b) {
            return Err(Error::Shape(format!(
                "parameter block `{}` {:?} does not match `{}` {:?}",
                got.name(b),
                got.shape(b),
                expected.name(a),
                expected.shape(a)
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lavae::{activation_count, reparameterize};

    pub(crate) fn tiny() -> LaVaeConfig {
        LaVaeConfig {
            max_frames: 40,
            frames_per_latent: 8,
            latent_dim: 4,
            model_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            pose_dim: 7,
            ..LaVaeConfig::default()
        }
    }

    fn motion(frames: usize, seed: u64) -> MotionSequence {
        let mut r = rng::seeded(seed);
        MotionSequence::new(
            20,
            7,
            (0..frames * 7).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn slot_counts_follow_length() {
        let m = LaVae::<f32>::new(tiny(), 0).unwrap();
        for f in [1, 8, 9, 16, 17, 40] {
            let post = m.encode(&motion(f, f as u64)).unwrap();
            assert_eq!(post.slots, activation_count(f, 8).unwrap());
            assert_eq!(post.dim, 4);
        }
        assert!(matches!(
            m.encode(&motion(41, 0)),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn encode_is_deterministic() {
        let m = LaVae::<f32>::new(tiny(), 0).unwrap();
        let x = motion(20, 1);
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
    }

    #[test]
    fn decode_shape_contract() {
        let m = LaVae::<f32>::new(tiny(), 0).unwrap();
        for f in 1..=40 {
            let post = m.encode(&motion(f, 3)).unwrap();
            let z = reparameterize(&post, NoiseScale::Variance, &mut rng::seeded(4));
            let out = m.decode(&z, f).unwrap();
            assert_eq!((out.frames(), out.pose_dim()), (f, 7));
        }
        assert!(matches!(
            m.decode(&LatentCode::zeros(2, 4), 8),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.decode(&LatentCode::zeros(1, 3), 8),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decode_depends_only_on_supplied_slots() {
        let m = LaVae::<f32>::new(tiny(), 5).unwrap();
        let z = LatentCode::standard_normal(3, 4, &mut rng::seeded(6));
        let a = m.decode(&z, 20).unwrap();
        let b = m.decode(&z.clone(), 20).unwrap();
        assert_eq!(a, b);
        let mut z2 = z.clone();
        z2.slot_mut(2)[0] += 1.0;
        assert_ne!(m.decode(&z2, 20).unwrap(), a);
    }

    #[test]
    fn fixed_capacity_mode_uses_every_slot() {
        let m = LaVae::<f32>::new(
            LaVaeConfig {
                length_aware: false,
                ..tiny()
            },
            0,
        )
        .unwrap();
        assert_eq!(m.encode(&motion(3, 0)).unwrap().slots, 5);
        assert_eq!(m.decode(&LatentCode::zeros(5, 4), 3).unwrap().frames(), 3);
    }

    #[test]
    fn attention_trace_is_normalized() {
        let m = LaVae::<f32>::new(tiny(), 0).unwrap();
        let trace = m
            .decode_traced(&LatentCode::standard_normal(3, 4, &mut rng::seeded(1)), 20)
            .unwrap();
        assert_eq!(trace.cross_attention.len(), 1);
        for layer in &trace.cross_attention {
            assert_eq!(layer.len(), 2 * 20 * 3);
            for row in layer.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn loss_graph_matches_numeric_loss() {
        let cfg = LaVaeConfig {
            dvae_fraction: 0.0,
            ..tiny()
        };
        let m = LaVae::<f64>::new(cfg, 2).unwrap();
        let x = motion(12, 9);
        let mut g = Graph::new(m.store());
        let nodes = m.loss_nodes(&mut g, &x, &mut rng::seeded(3)).unwrap();
        // replay the same draws through the numeric path
        let post = m.encode(&x).unwrap();
        let z = reparameterize(&post, NoiseScale::Variance, &mut rng::seeded(3));
        let recon = m.decode(&z, 12).unwrap();
        let l = super::super::vae_loss(&x, &recon, &post, cfg_kl()).unwrap();
        assert!((g.scalar(nodes.recon) - l.recon).abs() < 1e-10);
        assert!((g.scalar(nodes.kl) - l.kl).abs() < 1e-9);
        assert!((g.scalar(nodes.total) - l.total).abs() < 1e-9);
    }

    fn cfg_kl() -> f64 {
        LaVaeConfig::default().kl_weight
    }

    #[test]
    fn layout_check_rejects_foreign_parameters() {
        let mut a = LaVae::<f32>::new(tiny(), 0).unwrap();
        let b = LaVae::<f32>::new(
            LaVaeConfig {
                latent_dim: 6,
                ..tiny()
            },
            0,
        )
        .unwrap();
        assert!(a.replace_parameters(b.store().clone()).is_err());
        let c = LaVae::<f32>::new(tiny(), 9).unwrap();
        a.replace_parameters(c.store().clone()).unwrap();
        assert_eq!(a.store().checksum(), c.store().checksum());
    }
}

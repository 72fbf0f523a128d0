use serde::{Deserialize, Serialize};

use super::NoisePredictor;
use crate::corpus::TextEmbedding;
use crate::error::{Error, Result};
use crate::lavae::LatentCode;
use crate::nn::layers::{sinusoidal, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, Init, NodeId, ParamId, ParamStore, Real, Tensor};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    #[serde(skip)]
    pub latent_dim: usize,
    #[serde(skip)]
    pub max_slots: usize,
    #[serde(skip)]
    pub text_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            layers: 9,
            heads: 4,
            ff_dim: 1024,
            latent_dim: 256,
            max_slots: 5,
            text_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config(
                "denoiser.model_dim, layers, and ff_dim must be positive".into(),
            ));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(
                "denoiser.heads must divide denoiser.model_dim".into(),
            ));
        }
        if self.latent_dim == 0 || self.max_slots == 0 || self.text_dim == 0 {
            return Err(Error::Config(
                "denoiser latent, slot, and text sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Scale-and-shift modulation of normalized features by the conditioning vector, followed
/// by a zero-initialized projection so every block starts as the identity.
#[derive(Debug, Clone)]
struct Stylization {
    modulation: Linear,
    norm: LayerNorm,
    out: Linear,
}

impl Stylization {
    fn new<T: Real>(s: &mut ParamStore<T>, name: &str, dim: usize, r: &mut rng::Rng) -> Self {
        Self {
            modulation: Linear::new(s, &format!("{name}.modulation"), dim, 2 * dim, r),
            norm: LayerNorm::new(s, &format!("{name}.norm"), dim, r),
            out: Linear::zeroed(s, &format!("{name}.out"), dim, dim, r),
        }
    }

    /// `h` is `rows x d`; `cond` is `rows x d` (already expanded per slot).
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        h: NodeId,
        cond: NodeId,
        dim: usize,
    ) -> NodeId {
        let c = g.silu(cond);
        let m = self.modulation.forward(g, c);
        let scale = g.slice_cols(m, 0, dim);
        let shift = g.slice_cols(m, dim, dim);
        let n = self.norm.forward(g, h);
        let modulated = g.mul(n, scale);
        let y = g.add(n, modulated);
        let y = g.add(y, shift);
        let y = g.silu(y);
        self.out.forward(g, y)
    }
}

#[derive(Debug, Clone)]
struct DenoiserBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    style_self: Stylization,
    text_value: Linear,
    text_out: Linear,
    style_text: Stylization,
    ln_ff: LayerNorm,
    ff: FeedForward,
    style_ff: Stylization,
}

/// Noise predictor over `k x D` latent codes conditioned on the timestep and a text embedding.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Real> {
    config: DenoiserConfig,
    store: ParamStore<T>,
    latent_in: Linear,
    slot_embed: ParamId,
    time_hidden: Linear,
    time_out: Linear,
    text_proj: Linear,
    blocks: Vec<DenoiserBlock>,
    out_norm: LayerNorm,
    out: Linear,
    latent_scale: ParamId,
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived(seed, rng::stream::DENOISER_INIT, 0);
        let r = &mut r;
        let mut s = ParamStore::new();
        let (d, z) = (config.model_dim, config.latent_dim);
        let latent_in = Linear::new(&mut s, "latent_in", z, d, r);
        let slot_embed = s.add("slot_embed", config.max_slots, d, Init::Normal(1.0), r);
        let time_hidden = Linear::new(&mut s, "time.hidden", d, d, r);
        let time_out = Linear::new(&mut s, "time.out", d, d, r);
        let text_proj = Linear::new(&mut s, "text.proj", config.text_dim, d, r);
        let blocks = (0..config.layers)
            .map(|i| {
                let n = format!("block{i}");
                DenoiserBlock {
                    ln_self: LayerNorm::new(&mut s, &format!("{n}.ln_self"), d, r),
                    self_attn: MultiHeadAttention::new(
                        &mut s,
                        &format!("{n}.self_attn"),
                        d,
                        d,
                        config.heads,
                        r,
                    ),
                    style_self: Stylization::new(&mut s, &format!("{n}.style_self"), d, r),
                    text_value: Linear::new(
                        &mut s,
                        &format!("{n}.text_value"),
                        config.text_dim,
                        d,
                        r,
                    ),
                    text_out: Linear::new(&mut s, &format!("{n}.text_out"), d, d, r),
                    style_text: Stylization::new(&mut s, &format!("{n}.style_text"), d, r),
                    ln_ff: LayerNorm::new(&mut s, &format!("{n}.ln_ff"), d, r),
                    ff: FeedForward::new(&mut s, &format!("{n}.ff"), d, config.ff_dim, r),
                    style_ff: Stylization::new(&mut s, &format!("{n}.style_ff"), d, r),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(&mut s, "out.norm", d, r);
        let out = Linear::zeroed(&mut s, "out", d, z, r);
        let latent_scale = s.add("latent_scale", 1, 1, Init::Ones, r);
        Ok(Self {
            config,
            store: s,
            latent_in,
            slot_embed,
            time_hidden,
            time_out,
            text_proj,
            blocks,
            out_norm,
            out,
            latent_scale,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
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

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            store: self.store.cast(),
            latent_in: self.latent_in.clone(),
            slot_embed: self.slot_embed,
            time_hidden: self.time_hidden.clone(),
            time_out: self.time_out.clone(),
            text_proj: self.text_proj.clone(),
            blocks: self.blocks.clone(),
            out_norm: self.out_norm.clone(),
            out: self.out.clone(),
            latent_scale: self.latent_scale,
        }
    }

    /// Factor dividing first-stage latents before diffusion (and multiplying samples after).
    pub fn latent_scale(&self) -> f64 {
        self.store.get(self.latent_scale)[0].to_f64_lossy()
    }

    pub fn set_latent_scale(&mut self, scale: f64) {
        self.store.get_mut(self.latent_scale)[0] = T::from_f64_lossy(scale);
    }

    /// Predicted noise for `items` codes of `slots` slots each, stacked row-wise in `z_t`.
    pub fn predict_nodes<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        z_t: NodeId,
        slots: usize,
        timesteps: &[usize],
        texts: &[&TextEmbedding],
    ) -> Result<NodeId> {
        let c = &self.config;
        let n = timesteps.len();
        if n == 0 || texts.len() != n {
            return Err(Error::Shape("one timestep and one text per item".into()));
        }
        if slots == 0 || slots > c.max_slots {
            return Err(Error::Shape(format!(
                "{slots} slots outside [1, {}]",
                c.max_slots
            )));
        }
        if g.shape(z_t) != (n * slots, c.latent_dim) {
            return Err(Error::Shape(format!(
                "expected {}x{} stacked latents, got {:?}",
                n * slots,
                c.latent_dim,
                g.shape(z_t)
            )));
        }
        let d = c.model_dim;
        let mut text_rows = Vec::with_capacity(n * c.text_dim);
        for t in texts {
            if t.dim() != c.text_dim {
                return Err(Error::Shape(format!(
                    "text embedding has {} dims, expected {}",
                    t.dim(),
                    c.text_dim
                )));
            }
            text_rows.extend_from_slice(&t.0);
        }
        let text = g.input(Tensor::from_f64(n, c.text_dim, &text_rows));
        let time: Vec<f64> = timesteps
            .iter()
            .flat_map(|&t| sinusoidal(t as f64, d))
            .collect();
        let time = g.input(Tensor::from_f64(n, d, &time));
        let h = self.time_hidden.forward(g, time);
        let h = g.silu(h);
        let time_emb = self.time_out.forward(g, h);
        let text_emb = self.text_proj.forward(g, text);
        let cond = g.add(time_emb, text_emb);
        let cond = g.repeat_rows(cond, slots);

        let x = self.latent_in.forward(g, z_t);
        let emb = g.param(self.slot_embed);
        let emb = g.slice_rows(emb, 0, slots);
        let emb = g.concat_rows(&vec![emb; n]);
        let mut x = g.add(x, emb);
        for b in &self.blocks {
            let h = b.ln_self.forward(g, x);
            let (a, _) = b.self_attn.forward(g, h, h, slots, slots);
            let a = b.style_self.forward(g, a, cond, d);
            x = g.add(x, a);
            // a single key makes softmax attention the identity on its value
            let v = b.text_value.forward(g, text);
            let v = b.text_out.forward(g, v);
            let v = g.repeat_rows(v, slots);
            let v = b.style_text.forward(g, v, cond, d);
            x = g.add(x, v);
            let h = b.ln_ff.forward(g, x);
            let f = b.ff.forward(g, h);
            let f = b.style_ff.forward(g, f, cond, d);
            x = g.add(x, f);
        }
        let x = self.out_norm.forward(g, x);
        Ok(self.out.forward(g, x))
    }

    /// Graph of the noise-prediction error for same-size items; returns the mean squared error node.
    pub fn loss_nodes<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        z_t: &[f64],
        noise: &[f64],
        slots: usize,
        timesteps: &[usize],
        texts: &[&TextEmbedding],
    ) -> Result<NodeId> {
        let rows = timesteps.len() * slots;
        let zn = g.input(Tensor::from_f64(rows, self.config.latent_dim, z_t));
        let pred = self.predict_nodes(g, zn, slots, timesteps, texts)?;
        let target: Vec<T> = noise.iter().map(|&x| T::from_f64_lossy(x)).collect();
        Ok(g.mse(pred, &target))
    }
}

impl<T: Real> NoisePredictor for Denoiser<T> {
    fn predict(&self, z_t: &LatentCode, t: usize, text: &TextEmbedding) -> Result<LatentCode> {
        if z_t.dim != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} dims, expected {}",
                z_t.dim, self.config.latent_dim
            )));
        }
        let mut g = Graph::inference(&self.store);
        let zn = g.input(Tensor::from_f64(z_t.slots, z_t.dim, &z_t.values));
        let out = self.predict_nodes(&mut g, zn, z_t.slots, &[t], &[text])?;
        let values = g.value(out).iter().map(|x| x.to_f64_lossy()).collect();
        LatentCode::new(z_t.slots, z_t.dim, values)
    }
}

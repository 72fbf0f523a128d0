//! Transformer building blocks on top of [`Graph`].

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use super::{Graph, NodeId, Real, Tensor};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), fan_in, fan_out, Init::FanIn(1.0), rng);
        let b = store.add(format!("{name}.b"), 1, fan_out, Init::Zeros, rng);
        Self { w, b }
    }

    /// Output projection that starts as the zero map.
    pub fn zeroed<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), fan_in, fan_out, Init::Zeros, rng);
        let b = store.add(format!("{name}.b"), 1, fan_out, Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let gain = store.add(format!("{name}.gain"), 1, dim, Init::Ones, rng);
        let bias = store.add(format!("{name}.bias"), 1, dim, Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads >= 1 && dim % heads == 0,
            "model width {dim} must divide into {heads} heads"
        );
        Self {
            heads,
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.k"), kv_dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
        }
    }

    /// Returns the projected output and the raw attention node (for weight capture).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        xq: NodeId,
        xkv: NodeId,
        q_seg: usize,
        kv_seg: usize,
    ) -> (NodeId, NodeId) {
        let q = self.wq.forward(g, xq);
        let k = self.wk.forward(g, xkv);
        let v = self.wv.forward(g, xkv);
        let a = g.attention(q, k, v, self.heads, q_seg, kv_seg);
        (self.wo.forward(g, a), a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
        }
    }

    /// `seg` rows form one independent sequence.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, seg: usize) -> NodeId {
        let h = self.ln_attn.forward(g, x);
        let (a, _) = self.attn.forward(g, h, h, seg, seg);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Pre-norm decoder block: self-attention over queries, cross-attention to a memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim, rng),
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                dim,
                dim,
                heads,
                rng,
            ),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim, rng),
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                dim,
                dim,
                heads,
                rng,
            ),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
        }
    }

    /// Returns the block output and the cross-attention node.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        memory: NodeId,
    ) -> (NodeId, NodeId) {
        let (rows, _) = g.shape(x);
        let (mem_rows, _) = g.shape(memory);
        let h = self.ln_self.forward(g, x);
        let (a, _) = self.self_attn.forward(g, h, h, rows, rows);
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, x);
        let (c, attn) = self.cross_attn.forward(g, h, memory, rows, mem_rows);
        let x = g.add(x, c);
        let h = self.ln_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        (g.add(x, f), attn)
    }
}

/// Standard sinusoidal embedding of a (possibly fractional) position.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = (pos).sin();
    }
    out
}

/// Stack of sinusoidal rows for positions `0..n`.
pub fn sinusoidal_table<T: Real>(n: usize, dim: usize) -> Tensor<T> {
    let data: Vec<f64> = (0..n).flat_map(|p| sinusoidal(p as f64, dim)).collect();
    Tensor::from_f64(n, dim, &data)
}

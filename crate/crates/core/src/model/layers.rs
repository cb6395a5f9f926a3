//! Tape-level building blocks: linear layers, layer norm, multi-head
//! attention, and transformer layers.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Value;

use super::params::{Forward, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.xavier(format!("{name}.w"), dim_in, dim_out, rng),
            b: store.zeros(format!("{name}.b"), &[dim_out]),
        }
    }

    /// Zero-initialized weight and bias; the layer starts as the zero map.
    pub fn init_zero(store: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize) -> Self {
        Self {
            w: store.zeros(format!("{name}.w"), &[dim_in, dim_out]),
            b: store.zeros(format!("{name}.b"), &[dim_out]),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Value) -> Value {
        let w = f.p(self.w);
        let b = f.p(self.b);
        let y = f.tape.matmul(x, w);
        f.tape.add_rowvec(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Value) -> Value {
        let gain = f.p(self.gain);
        let bias = f.p(self.bias);
        f.tape.layernorm_rows(x, gain, bias, 1e-5)
    }
}

/// Multi-head attention over 2-d `[rows, C]` values.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention dim must divide heads");
        Self {
            wq: Linear::init(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::init(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::init(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::init(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Zero-initialized output projection; the residual add is then the
    /// identity at initialization.
    pub fn init_zero_out(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mha = Self::init(store, name, dim, heads, rng);
        mha.wo = Linear::init_zero(store, &format!("{name}.wo_zero"), dim, dim);
        mha
    }

    /// `queries: [R, C]`, `keys/values: [S, C]` (optionally with positional
    /// terms already added to the attention inputs) -> `[R, C]`.
    pub fn forward(&self, f: &mut Forward, q_in: Value, k_in: Value, v_in: Value) -> Value {
        let q = self.wq.forward(f, q_in);
        let k = self.wk.forward(f, k_in);
        let v = self.wv.forward(f, v_in);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = f.tape.narrow2(q, 1, h * dh, dh);
            let kh = f.tape.narrow2(k, 1, h * dh, dh);
            let vh = f.tape.narrow2(v, 1, h * dh, dh);
            let kt = f.tape.transpose2(kh);
            let logits = f.tape.matmul(qh, kt);
            let scaled = f.tape.scale(logits, scale);
            let att = f.tape.softmax_rows(scaled);
            head_outs.push(f.tape.matmul(att, vh));
        }
        let merged = f.tape.concat2(1, &head_outs);
        self.wo.forward(f, merged)
    }
}

/// Two-layer feed-forward with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            l1: Linear::init(store, &format!("{name}.l1"), dim, hidden, rng),
            l2: Linear::init(store, &format!("{name}.l2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Value) -> Value {
        let h = self.l1.forward(f, x);
        let h = f.tape.relu(h);
        self.l2.forward(f, h)
    }
}

/// Pre-norm transformer decoder layer: self-attention over the queries,
/// cross-attention into a memory sequence, feed-forward, all residual.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::init(store, &format!("{name}.self_attn"), dim, heads, rng),
            cross_attn: MultiHeadAttention::init(store, &format!("{name}.cross_attn"), dim, heads, rng),
            ffn: FeedForward::init(store, &format!("{name}.ffn"), dim, dim * 2, rng),
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), dim),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), dim),
            norm3: LayerNorm::init(store, &format!("{name}.norm3"), dim),
        }
    }

    /// `x: [R, C]` queries, `memory: [S, C]`, positional terms added to the
    /// attention inputs only (never the values).
    pub fn forward(
        &self,
        f: &mut Forward,
        x: Value,
        q_pos: Option<Value>,
        memory: Value,
        mem_pos: Option<Value>,
    ) -> Value {
        let with_pos = |f: &mut Forward, v: Value, pos: Option<Value>| match pos {
            Some(p) => f.tape.add(v, p),
            None => v,
        };
        // self-attention
        let n1 = self.norm1.forward(f, x);
        let qk = with_pos(f, n1, q_pos);
        let sa = self.self_attn.forward(f, qk, qk, n1);
        let x = f.tape.add(x, sa);
        // cross-attention
        let n2 = self.norm2.forward(f, x);
        let q = with_pos(f, n2, q_pos);
        let k = with_pos(f, memory, mem_pos);
        let ca = self.cross_attn.forward(f, q, k, memory);
        let x = f.tape.add(x, ca);
        // feed-forward
        let n3 = self.norm3.forward(f, x);
        let ff = self.ffn.forward(f, n3);
        f.tape.add(x, ff)
    }
}

/// Three-layer MLP with ReLU between layers, the head used for box offsets
/// and mask embeddings.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Mlp3 {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            l1: Linear::init(store, &format!("{name}.l1"), dim_in, hidden, rng),
            l2: Linear::init(store, &format!("{name}.l2"), hidden, hidden, rng),
            l3: Linear::init(store, &format!("{name}.l3"), hidden, dim_out, rng),
        }
    }

    /// Last layer zero-initialized so the head starts at its reference.
    pub fn init_zero_final(
        store: &mut ParamStore,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mlp = Self::init(store, name, dim_in, hidden, dim_out, rng);
        mlp.l3 = Linear::init_zero(store, &format!("{name}.l3z"), hidden, dim_out);
        mlp
    }

    pub fn forward(&self, f: &mut Forward, x: Value) -> Value {
        let h = self.l1.forward(f, x);
        let h = f.tape.relu(h);
        let h = self.l2.forward(f, h);
        let h = f.tape.relu(h);
        self.l3.forward(f, h)
    }
}

//! Pre-norm transformer encoder block shared by the attention backbones.

use crate::graph::{Activation, Graph, Var};
use crate::params::{Builder, LayerNorm, Linear};

pub(crate) struct EncoderBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    act: Activation,
}

impl EncoderBlock {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, mlp_ratio: usize, eps: f32, act: Activation) -> EncoderBlock {
        EncoderBlock {
            norm1: b.layer_norm("norm1", dim, eps),
            qkv: b.linear("attn.qkv", dim, 3 * dim),
            proj: b.linear("attn.proj", dim, dim),
            norm2: b.layer_norm("norm2", dim, eps),
            fc1: b.linear("mlp.fc1", dim, dim * mlp_ratio),
            fc2: b.linear("mlp.fc2", dim * mlp_ratio, dim),
            heads,
            act,
        }
    }

    /// `(B, N, D)` to `(B, N, D)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.layer_norm(x, &self.norm1);
        let h = self.attention(g, h);
        let x = g.add(x, h);
        let h = g.layer_norm(x, &self.norm2);
        let h = g.linear(h, &self.fc1);
        let h = g.act(h, self.act);
        let h = g.linear(h, &self.fc2);
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, x: Var) -> Var {
        let (b, n, d) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let (heads, hd) = (self.heads, d / self.heads);
        let qkv = g.linear(x, &self.qkv);
        let qkv = g.reshape(qkv, &[b, n, 3, heads, hd]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let mut part = |i: usize| {
            let t = g.narrow(qkv, 0, i, 1);
            g.reshape(t, &[b * heads, n, hd])
        };
        let (q, k, v) = (part(0), part(1), part(2));
        let q = g.scale(q, (hd as f32).powf(-0.5));
        let scores = g.bmm(q, k, true);
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v, false);
        let out = g.reshape(out, &[b, heads, n, hd]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, n, d]);
        g.linear(out, &self.proj)
    }
}

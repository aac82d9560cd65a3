//! ViT-Tiny over a ResNet-style stem (stride 16 overall, patch 8).

use super::transformer::EncoderBlock;
use super::{Backbone, Recipe};
use crate::graph::{Activation, Graph, Var};
use crate::kernels::PoolGeom;
use crate::params::{Builder, Conv, ConvSpec, GroupNorm, Init, InitScheme, LayerNorm};

pub(crate) const SCHEME: InitScheme = InitScheme {
    conv: Init::KaimingNormalFanOut,
    conv_bias: Init::Zeros,
    linear: Init::TruncNormal(0.02),
    linear_bias: Init::Zeros,
};

const STEM: usize = 64;
const DIM: usize = 192;
const DEPTH: usize = 12;
const HEADS: usize = 3;
const PATCH: usize = 8;
/// Tokens per side for a 224 input: 224 / 2 / 2 / 8.
const GRID: usize = 7;

struct HybridVit {
    stem_conv: Conv,
    stem_norm: GroupNorm,
    patch: Conv,
    cls_token: usize,
    pos_embed: usize,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

pub(crate) fn build(b: &mut Builder) -> Recipe {
    let stem_conv = b.conv(
        "patch_embed.backbone.stem.conv",
        ConvSpec::new(3, STEM, 7).stride(2).same().weight_std(1e-8),
    );
    let stem_norm = b.group_norm("patch_embed.backbone.stem.norm", 32, STEM, 1e-5);
    // The patch projection keeps PyTorch's default conv initialization.
    let saved = b.scheme;
    b.scheme = InitScheme::TORCH;
    let patch = b.conv("patch_embed.proj", ConvSpec::new(STEM, DIM, PATCH).stride(PATCH).bias(true));
    b.scheme = saved;
    let cls_token = b.embedding("cls_token", &[1, 1, DIM], Init::Normal(1e-6));
    let pos_embed = b.embedding("pos_embed", &[1, GRID * GRID + 1, DIM], Init::TruncNormal(0.02));
    let blocks = (0..DEPTH)
        .map(|i| {
            b.with_prefix(&format!("blocks.{i}"), |b| {
                EncoderBlock::new(b, DIM, HEADS, 4, 1e-6, Activation::Gelu)
            })
        })
        .collect();
    let norm = b.layer_norm("norm", DIM, 1e-6);
    Recipe {
        backbone: Box::new(HybridVit {
            stem_conv,
            stem_norm,
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
        }),
        head_dropout: 0.0,
    }
}

impl Backbone for HybridVit {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.conv(x, &self.stem_conv);
        let y = g.group_norm(y, &self.stem_norm);
        let y = g.relu(y);
        let (h, w) = (g.shape(y)[2], g.shape(y)[3]);
        let y = g.max_pool(y, PoolGeom::same(3, 2, h, w));
        let y = g.conv(y, &self.patch);
        let (b, n) = {
            let s = g.shape(y);
            (s[0], s[2] * s[3])
        };
        assert_eq!(n, GRID * GRID, "position embedding expects a {GRID}x{GRID} token grid");
        let y = g.reshape(y, &[b, DIM, n]);
        let tokens = g.permute(y, &[0, 2, 1]);
        let cls = g.param(self.cls_token);
        let cls = g.expand(cls, b);
        let y = g.concat(&[cls, tokens], 1);
        let pos = g.param(self.pos_embed);
        let pos = g.reshape(pos, &[(n + 1) * DIM]);
        let mut y = g.add_tiled(y, pos);
        for block in &self.blocks {
            y = block.forward(g, y);
        }
        let y = g.layer_norm(y, &self.norm);
        let cls = g.narrow(y, 1, 0, 1);
        g.reshape(cls, &[b, DIM])
    }

    fn feature_width(&self) -> usize {
        DIM
    }
}

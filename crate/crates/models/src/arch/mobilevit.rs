//! MobileViT-XS.

use super::transformer::EncoderBlock;
use super::{Backbone, ConvBn, Recipe};
use crate::graph::{Activation, Graph, Var};
use crate::params::{Builder, Conv, ConvSpec, Init, InitScheme, LayerNorm};

pub(crate) const SCHEME: InitScheme = InitScheme {
    conv: Init::KaimingNormalFanOut,
    conv_bias: Init::Zeros,
    linear: Init::Normal(0.01),
    linear_bias: Init::Zeros,
};

const SILU: Option<Activation> = Some(Activation::Silu);
const PATCH: usize = 2;
const HEADS: usize = 4;
const EXPANSION: usize = 4;
const FEATURES: usize = 384;

/// Inverted bottleneck with a linear output and an identity shortcut when
/// shapes allow.
struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    skip: bool,
}

impl Bottleneck {
    fn new(b: &mut Builder, cin: usize, cout: usize, stride: usize) -> Bottleneck {
        let mid = cin * EXPANSION;
        Bottleneck {
            conv1: ConvBn::new(b, "conv1_1x1.conv", "conv1_1x1.bn", ConvSpec::new(cin, mid, 1), 1e-5, SILU),
            conv2: ConvBn::new(
                b,
                "conv2_kxk.conv",
                "conv2_kxk.bn",
                ConvSpec::new(mid, mid, 3).stride(stride).pad(1).depthwise(),
                1e-5,
                SILU,
            ),
            conv3: ConvBn::new(b, "conv3_1x1.conv", "conv3_1x1.bn", ConvSpec::new(mid, cout, 1), 1e-5, None),
            skip: cin == cout && stride == 1,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, y);
        let y = self.conv3.forward(g, y);
        if self.skip {
            g.add(y, x)
        } else {
            y
        }
    }
}

struct VitBlock {
    conv_kxk: ConvBn,
    conv_1x1: Conv,
    transformer: Vec<EncoderBlock>,
    norm: LayerNorm,
    conv_proj: ConvBn,
    conv_fusion: ConvBn,
    dim: usize,
}

impl VitBlock {
    fn new(b: &mut Builder, c: usize, dim: usize, depth: usize) -> VitBlock {
        let conv_kxk = ConvBn::new(b, "conv_kxk.conv", "conv_kxk.bn", ConvSpec::new(c, c, 3).pad(1), 1e-5, SILU);
        let conv_1x1 = b.conv("conv_1x1", ConvSpec::new(c, dim, 1));
        let transformer = (0..depth)
            .map(|i| {
                b.with_prefix(&format!("transformer.{i}"), |b| {
                    EncoderBlock::new(b, dim, HEADS, 2, 1e-5, Activation::Silu)
                })
            })
            .collect();
        let norm = b.layer_norm("norm", dim, 1e-5);
        let conv_proj = ConvBn::new(b, "conv_proj.conv", "conv_proj.bn", ConvSpec::new(dim, c, 1), 1e-5, SILU);
        let conv_fusion = ConvBn::new(
            b,
            "conv_fusion.conv",
            "conv_fusion.bn",
            ConvSpec::new(2 * c, c, 3).pad(1),
            1e-5,
            SILU,
        );
        VitBlock {
            conv_kxk,
            conv_1x1,
            transformer,
            norm,
            conv_proj,
            conv_fusion,
            dim,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let shortcut = x;
        let (b, h, w) = {
            let s = g.shape(x);
            (s[0], s[2], s[3])
        };
        let y = self.conv_kxk.forward(g, x);
        let mut y = g.conv(y, &self.conv_1x1);
        let (nh, nw) = (h.div_ceil(PATCH) * PATCH, w.div_ceil(PATCH) * PATCH);
        let resized = (nh, nw) != (h, w);
        if resized {
            y = g.resize_bilinear(y, (nh, nw));
        }
        let (ph, pw) = (nh / PATCH, nw / PATCH);
        let c = self.dim;
        // (B, C, nph, ph, npw, pw) -> (B, ph, pw, nph, npw, C)
        let y = g.reshape(y, &[b, c, ph, PATCH, pw, PATCH]);
        let y = g.permute(y, &[0, 3, 5, 2, 4, 1]);
        let mut y = g.reshape(y, &[b * PATCH * PATCH, ph * pw, c]);
        for block in &self.transformer {
            y = block.forward(g, y);
        }
        let y = g.layer_norm(y, &self.norm);
        let y = g.reshape(y, &[b, PATCH, PATCH, ph, pw, c]);
        let y = g.permute(y, &[0, 5, 3, 1, 4, 2]);
        let mut y = g.reshape(y, &[b, c, nh, nw]);
        if resized {
            y = g.resize_bilinear(y, (h, w));
        }
        let y = self.conv_proj.forward(g, y);
        let y = g.concat(&[shortcut, y], 1);
        self.conv_fusion.forward(g, y)
    }
}

enum Block {
    Bottleneck(Bottleneck),
    Vit(VitBlock),
}

struct MobileVit {
    stem: ConvBn,
    blocks: Vec<Block>,
    final_conv: ConvBn,
}

pub(crate) fn build(b: &mut Builder) -> Recipe {
    let stem = ConvBn::new(b, "stem.conv", "stem.bn", ConvSpec::new(3, 16, 3).stride(2).pad(1), 1e-5, SILU);
    let bottle = |b: &mut Builder, stage: usize, idx: usize, cin: usize, cout: usize, stride: usize| {
        let block = b.with_prefix(&format!("stages.{stage}.{idx}"), |b| Bottleneck::new(b, cin, cout, stride));
        Block::Bottleneck(block)
    };
    let mut blocks = vec![
        bottle(b, 0, 0, 16, 32, 1),
        bottle(b, 1, 0, 32, 48, 2),
        bottle(b, 1, 1, 48, 48, 1),
        bottle(b, 1, 2, 48, 48, 1),
    ];
    let mut cin = 48;
    for (stage, (c, dim, depth)) in [(64, 96, 2), (80, 120, 4), (96, 144, 3)].into_iter().enumerate() {
        let stage = stage + 2;
        blocks.push(bottle(b, stage, 0, cin, c, 2));
        let vit = b.with_prefix(&format!("stages.{stage}.1"), |b| VitBlock::new(b, c, dim, depth));
        blocks.push(Block::Vit(vit));
        cin = c;
    }
    let final_conv = ConvBn::new(
        b,
        "final_conv.conv",
        "final_conv.bn",
        ConvSpec::new(cin, FEATURES, 1),
        1e-5,
        SILU,
    );
    Recipe {
        backbone: Box::new(MobileVit {
            stem,
            blocks,
            final_conv,
        }),
        head_dropout: 0.0,
    }
}

impl Backbone for MobileVit {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var {
        let mut y = self.stem.forward(g, x);
        for block in &self.blocks {
            y = match block {
                Block::Bottleneck(m) => m.forward(g, y),
                Block::Vit(m) => m.forward(g, y),
            };
        }
        let y = self.final_conv.forward(g, y);
        g.global_avg_pool(y)
    }

    fn feature_width(&self) -> usize {
        FEATURES
    }
}

//! MobileNetV2 with a channel width multiplier.

use super::{make_divisible, Backbone, ConvBn, Recipe};
use crate::graph::{Activation, Graph, Var};
use crate::params::{Builder, ConvSpec, Init, InitScheme};

pub(crate) const SCHEME: InitScheme = InitScheme {
    conv: Init::KaimingNormalFanOut,
    conv_bias: Init::Zeros,
    linear: Init::FanInUniform,
    linear_bias: Init::Zeros,
};

const HEAD: usize = 1280;
const RELU6: Option<Activation> = Some(Activation::Relu6);

/// (repeats, stride, channels, expansion) per stage after the first block.
const STAGES: [(usize, usize, usize, usize); 6] =
    [(2, 2, 24, 6), (3, 2, 32, 6), (4, 2, 64, 6), (3, 1, 96, 6), (3, 2, 160, 6), (1, 1, 320, 6)];

enum Block {
    DepthwiseSeparable { dw: ConvBn, pw: ConvBn, skip: bool },
    InvertedResidual { pw: ConvBn, dw: ConvBn, pwl: ConvBn, skip: bool },
}

struct MobileNetV2 {
    stem: ConvBn,
    blocks: Vec<Block>,
    head: ConvBn,
}

pub(crate) fn build(b: &mut Builder, multiplier: f64) -> Recipe {
    let ch = |c: usize| make_divisible(c as f64 * multiplier, 8);
    let stem_c = ch(32);
    let stem = ConvBn::new(b, "conv_stem", "bn1", ConvSpec::new(3, stem_c, 3).stride(2).pad(1), 1e-5, RELU6);
    let mut blocks = Vec::new();
    let mut cin = stem_c;
    let out = ch(16);
    blocks.push(b.with_prefix("blocks.0.0", |b| Block::DepthwiseSeparable {
        dw: ConvBn::new(b, "conv_dw", "bn1", ConvSpec::new(cin, cin, 3).pad(1).depthwise(), 1e-5, RELU6),
        pw: ConvBn::new(b, "conv_pw", "bn2", ConvSpec::new(cin, out, 1), 1e-5, None),
        skip: cin == out,
    }));
    cin = out;
    for (si, &(repeats, stride, c, exp)) in STAGES.iter().enumerate() {
        let cout = ch(c);
        for r in 0..repeats {
            let s = if r == 0 { stride } else { 1 };
            let mid = cin * exp;
            blocks.push(b.with_prefix(&format!("blocks.{}.{r}", si + 1), |b| Block::InvertedResidual {
                pw: ConvBn::new(b, "conv_pw", "bn1", ConvSpec::new(cin, mid, 1), 1e-5, RELU6),
                dw: ConvBn::new(b, "conv_dw", "bn2", ConvSpec::new(mid, mid, 3).stride(s).pad(1).depthwise(), 1e-5, RELU6),
                pwl: ConvBn::new(b, "conv_pwl", "bn3", ConvSpec::new(mid, cout, 1), 1e-5, None),
                skip: cin == cout && s == 1,
            }));
            cin = cout;
        }
    }
    let head = ConvBn::new(b, "conv_head", "bn2", ConvSpec::new(cin, HEAD, 1), 1e-5, RELU6);
    Recipe {
        backbone: Box::new(MobileNetV2 { stem, blocks, head }),
        head_dropout: 0.0,
    }
}

impl Backbone for MobileNetV2 {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var {
        let mut y = self.stem.forward(g, x);
        for block in &self.blocks {
            let input = y;
            let (out, skip) = match block {
                Block::DepthwiseSeparable { dw, pw, skip } => {
                    let t = dw.forward(g, input);
                    (pw.forward(g, t), *skip)
                }
                Block::InvertedResidual { pw, dw, pwl, skip } => {
                    let t = pw.forward(g, input);
                    let t = dw.forward(g, t);
                    (pwl.forward(g, t), *skip)
                }
            };
            y = if skip { g.add(out, input) } else { out };
        }
        let y = self.head.forward(g, y);
        g.global_avg_pool(y)
    }

    fn feature_width(&self) -> usize {
        HEAD
    }
}

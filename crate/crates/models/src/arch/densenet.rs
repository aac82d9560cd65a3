//! DenseNet-121.

use super::{Backbone, ConvBn, Recipe};
use crate::graph::{Activation, Graph, Var};
use crate::kernels::PoolGeom;
use crate::params::{BatchNorm, Builder, Conv, ConvSpec, Init, InitScheme};

pub(crate) const SCHEME: InitScheme = InitScheme {
    conv: Init::KaimingNormalFanIn,
    conv_bias: Init::Zeros,
    linear: Init::FanInUniform,
    linear_bias: Init::Zeros,
};

const BLOCKS: [usize; 4] = [6, 12, 24, 16];
const GROWTH: usize = 32;
const BN_SIZE: usize = 4;
const INIT_FEATURES: usize = 64;

/// Pre-activation batch norm followed by a convolution.
struct BnConv {
    bn: BatchNorm,
    conv: Conv,
}

impl BnConv {
    fn new(b: &mut Builder, suffix: &str, spec: ConvSpec) -> BnConv {
        BnConv {
            bn: b.bn(&format!("norm{suffix}"), spec.cin, 1e-5),
            conv: b.conv(&format!("conv{suffix}"), spec),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.batch_norm(x, &self.bn);
        let y = g.relu(y);
        g.conv(y, &self.conv)
    }
}

struct DenseLayer {
    bottleneck: BnConv,
    conv: BnConv,
}

struct DenseNet {
    stem: ConvBn,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<BnConv>,
    final_norm: BatchNorm,
    width: usize,
}

pub(crate) fn build(b: &mut Builder) -> Recipe {
    let relu = Some(Activation::Relu);
    let stem = ConvBn::new(
        b,
        "features.conv0",
        "features.norm0",
        ConvSpec::new(3, INIT_FEATURES, 7).stride(2).pad(3),
        1e-5,
        relu,
    );
    let mut c = INIT_FEATURES;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (bi, &n) in BLOCKS.iter().enumerate() {
        let mut layers = Vec::new();
        for li in 0..n {
            let cin = c + li * GROWTH;
            layers.push(b.with_prefix(&format!("features.denseblock{}.denselayer{}", bi + 1, li + 1), |b| {
                DenseLayer {
                    bottleneck: BnConv::new(b, "1", ConvSpec::new(cin, BN_SIZE * GROWTH, 1)),
                    conv: BnConv::new(b, "2", ConvSpec::new(BN_SIZE * GROWTH, GROWTH, 3).pad(1)),
                }
            }));
        }
        blocks.push(layers);
        c += n * GROWTH;
        if bi + 1 < BLOCKS.len() {
            transitions.push(b.with_prefix(&format!("features.transition{}", bi + 1), |b| {
                BnConv::new(b, "", ConvSpec::new(c, c / 2, 1))
            }));
            c /= 2;
        }
    }
    let final_norm = b.bn("features.norm5", c, 1e-5);
    Recipe {
        backbone: Box::new(DenseNet {
            stem,
            blocks,
            transitions,
            final_norm,
            width: c,
        }),
        head_dropout: 0.0,
    }
}

impl Backbone for DenseNet {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.stem.forward(g, x);
        let mut y = g.max_pool(y, PoolGeom::new(3, 2, 1));
        for (bi, layers) in self.blocks.iter().enumerate() {
            let mut features = vec![y];
            for layer in layers {
                let cat = if features.len() == 1 { features[0] } else { g.concat(&features, 1) };
                let t = layer.bottleneck.forward(g, cat);
                features.push(layer.conv.forward(g, t));
            }
            y = g.concat(&features, 1);
            if let Some(t) = self.transitions.get(bi) {
                let t = t.forward(g, y);
                y = g.avg_pool(t, 2, 2);
            }
        }
        let y = g.batch_norm(y, &self.final_norm);
        let y = g.relu(y);
        g.global_avg_pool(y)
    }

    fn feature_width(&self) -> usize {
        self.width
    }
}

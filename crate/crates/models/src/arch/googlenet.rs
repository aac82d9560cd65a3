//! GoogLeNet (Inception v1) without auxiliary classifiers.

use super::{Backbone, ConvBn, Recipe};
use crate::graph::{Activation, Graph, Var};
use crate::kernels::PoolGeom;
use crate::params::{Builder, ConvSpec, Init, InitScheme};

pub(crate) const SCHEME: InitScheme = InitScheme {
    conv: Init::TruncNormal(0.01),
    conv_bias: Init::Zeros,
    linear: Init::TruncNormal(0.01),
    linear_bias: Init::Zeros,
};

/// (name, in, 1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool proj)
const INCEPTIONS: [(&str, [usize; 7]); 9] = [
    ("inception3a", [192, 64, 96, 128, 16, 32, 32]),
    ("inception3b", [256, 128, 128, 192, 32, 96, 64]),
    ("inception4a", [480, 192, 96, 208, 16, 48, 64]),
    ("inception4b", [512, 160, 112, 224, 24, 64, 64]),
    ("inception4c", [512, 128, 128, 256, 24, 64, 64]),
    ("inception4d", [512, 112, 144, 288, 32, 64, 64]),
    ("inception4e", [528, 256, 160, 320, 32, 128, 128]),
    ("inception5a", [832, 256, 160, 320, 32, 128, 128]),
    ("inception5b", [832, 384, 192, 384, 48, 128, 128]),
];

fn basic(b: &mut Builder, name: &str, spec: ConvSpec) -> ConvBn {
    ConvBn::new(b, &format!("{name}.conv"), &format!("{name}.bn"), spec, 1e-3, Some(Activation::Relu))
}

struct Inception {
    branch1: ConvBn,
    branch2: [ConvBn; 2],
    branch3: [ConvBn; 2],
    branch4: ConvBn,
}

struct GoogLeNet {
    stem: [ConvBn; 3],
    inceptions: Vec<Inception>,
}

pub(crate) fn build(b: &mut Builder) -> Recipe {
    let stem = [
        basic(b, "conv1", ConvSpec::new(3, 64, 7).stride(2).pad(3)),
        basic(b, "conv2", ConvSpec::new(64, 64, 1)),
        basic(b, "conv3", ConvSpec::new(64, 192, 3).pad(1)),
    ];
    let inceptions = INCEPTIONS
        .iter()
        .map(|&(name, [cin, c1, r3, c3, r5, c5, pp])| {
            b.with_prefix(name, |b| Inception {
                branch1: basic(b, "branch1", ConvSpec::new(cin, c1, 1)),
                branch2: [
                    basic(b, "branch2.0", ConvSpec::new(cin, r3, 1)),
                    basic(b, "branch2.1", ConvSpec::new(r3, c3, 3).pad(1)),
                ],
                branch3: [
                    basic(b, "branch3.0", ConvSpec::new(cin, r5, 1)),
                    basic(b, "branch3.1", ConvSpec::new(r5, c5, 3).pad(1)),
                ],
                branch4: basic(b, "branch4.1", ConvSpec::new(cin, pp, 1)),
            })
        })
        .collect();
    Recipe {
        backbone: Box::new(GoogLeNet { stem, inceptions }),
        head_dropout: 0.2,
    }
}

impl Backbone for GoogLeNet {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var {
        let pool = PoolGeom::new(3, 2, 0).ceil();
        let y = self.stem[0].forward(g, x);
        let y = g.max_pool(y, pool);
        let y = self.stem[1].forward(g, y);
        let y = self.stem[2].forward(g, y);
        let mut y = g.max_pool(y, pool);
        for (i, inc) in self.inceptions.iter().enumerate() {
            let b1 = inc.branch1.forward(g, y);
            let t = inc.branch2[0].forward(g, y);
            let b2 = inc.branch2[1].forward(g, t);
            let t = inc.branch3[0].forward(g, y);
            let b3 = inc.branch3[1].forward(g, t);
            let t = g.max_pool(y, PoolGeom::new(3, 1, 1).ceil());
            let b4 = inc.branch4.forward(g, t);
            y = g.concat(&[b1, b2, b3, b4], 1);
            match i {
                1 => y = g.max_pool(y, pool),
                6 => y = g.max_pool(y, PoolGeom::new(2, 2, 0).ceil()),
                _ => {}
            }
        }
        g.global_avg_pool(y)
    }

    fn feature_width(&self) -> usize {
        1024
    }
}

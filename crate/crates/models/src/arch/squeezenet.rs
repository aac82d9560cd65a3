//! SqueezeNet 1.0 with a pooled linear head in place of the final
//! classifier convolution.

use super::{Backbone, Recipe};
use crate::graph::{Graph, Var};
use crate::kernels::PoolGeom;
use crate::params::{Builder, Conv, ConvSpec, Init, InitScheme};

pub(crate) const SCHEME: InitScheme = InitScheme {
    conv: Init::KaimingUniform,
    conv_bias: Init::Zeros,
    linear: Init::Normal(0.01),
    linear_bias: Init::Zeros,
};

const FIRES: [(usize, usize, usize, usize); 8] = [
    (96, 16, 64, 64),
    (128, 16, 64, 64),
    (128, 32, 128, 128),
    (256, 32, 128, 128),
    (256, 48, 192, 192),
    (384, 48, 192, 192),
    (384, 64, 256, 256),
    (512, 64, 256, 256),
];

/// Feature indices after which a max pool runs (the stem pool is separate).
const POOL_AFTER: [usize; 2] = [2, 6];

struct Fire {
    squeeze: Conv,
    expand1: Conv,
    expand3: Conv,
}

struct SqueezeNet {
    stem: Conv,
    fires: Vec<Fire>,
}

pub(crate) fn build(b: &mut Builder) -> Recipe {
    let stem = b.conv("features.0", ConvSpec::new(3, 96, 7).stride(2).bias(true));
    let fires = FIRES
        .iter()
        .enumerate()
        .map(|(i, &(cin, s, e1, e3))| {
            let idx = i + 3 + POOL_AFTER.iter().filter(|&&p| p < i).count();
            b.with_prefix(&format!("features.{idx}"), |b| Fire {
                squeeze: b.conv("squeeze", ConvSpec::new(cin, s, 1).bias(true)),
                expand1: b.conv("expand1x1", ConvSpec::new(s, e1, 1).bias(true)),
                expand3: b.conv("expand3x3", ConvSpec::new(s, e3, 3).pad(1).bias(true)),
            })
        })
        .collect();
    Recipe {
        backbone: Box::new(SqueezeNet { stem, fires }),
        head_dropout: 0.5,
    }
}

impl Backbone for SqueezeNet {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var {
        let pool = PoolGeom::new(3, 2, 0).ceil();
        let y = g.conv(x, &self.stem);
        let y = g.relu(y);
        let mut y = g.max_pool(y, pool);
        for (i, fire) in self.fires.iter().enumerate() {
            let s = g.conv(y, &fire.squeeze);
            let s = g.relu(s);
            let a = g.conv(s, &fire.expand1);
            let a = g.relu(a);
            let b = g.conv(s, &fire.expand3);
            let b = g.relu(b);
            y = g.concat(&[a, b], 1);
            if POOL_AFTER.contains(&i) {
                y = g.max_pool(y, pool);
            }
        }
        g.global_avg_pool(y)
    }

    fn feature_width(&self) -> usize {
        512
    }
}

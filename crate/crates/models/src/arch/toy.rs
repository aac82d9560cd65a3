//! Synthetic two-stage CNN for fast tests. Not a published architecture.

use super::{Backbone, ConvBn, Recipe};
use crate::graph::{Activation, Graph, Var};
use crate::params::{Builder, ConvSpec, Init, InitScheme, Linear};

pub(crate) const SCHEME: InitScheme = InitScheme {
    conv: Init::KaimingNormalFanOut,
    conv_bias: Init::Zeros,
    linear: Init::FanInUniform,
    linear_bias: Init::Zeros,
};

pub(crate) const WIDTH: usize = 8;

struct ToyCnn {
    stem: ConvBn,
    stages: [[ConvBn; 2]; 2],
    proj: Linear,
}

pub(crate) fn build(b: &mut Builder) -> Recipe {
    let relu = Some(Activation::Relu);
    let stem = ConvBn::new(b, "stem.conv", "stem.bn", ConvSpec::new(3, 8, 4).stride(4), 1e-5, relu);
    let stage = |b: &mut Builder, i: usize, cin: usize, cout: usize| {
        b.with_prefix(&format!("stage{i}"), |b| {
            [
                ConvBn::new(b, "conv1", "bn1", ConvSpec::new(cin, cin, 3).pad(1), 1e-5, relu),
                ConvBn::new(b, "conv2", "bn2", ConvSpec::new(cin, cout, 3).stride(2).pad(1), 1e-5, relu),
            ]
        })
    };
    let s1 = stage(b, 1, 8, 16);
    let s2 = stage(b, 2, 16, 16);
    let proj = b.linear("proj", 16, WIDTH);
    Recipe {
        backbone: Box::new(ToyCnn {
            stem,
            stages: [s1, s2],
            proj,
        }),
        head_dropout: 0.0,
    }
}

impl Backbone for ToyCnn {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var {
        let mut y = self.stem.forward(g, x);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, y);
            }
        }
        let y = g.global_avg_pool(y);
        let y = g.linear(y, &self.proj);
        g.relu(y)
    }

    fn feature_width(&self) -> usize {
        WIDTH
    }
}

//! Backbone definitions. Each backbone maps `(B, 3, H, W)` to a pooled
//! `(B, width)` feature matrix; the classification head lives in
//! [`crate::model`].

mod densenet;
mod googlenet;
mod mobilenet;
mod mobilevit;
mod squeezenet;
mod toy;
mod transformer;
mod vit;

use crate::graph::{Activation, Graph, Var};
use crate::params::{BatchNorm, Builder, Conv, ConvSpec, InitScheme};

pub(crate) trait Backbone: Send + Sync {
    fn forward_features(&self, g: &mut Graph, x: Var) -> Var;
    fn feature_width(&self) -> usize;
}

/// Head attached to a backbone by the single-model builder.
pub(crate) struct Recipe {
    pub backbone: Box<dyn Backbone>,
    pub head_dropout: f32,
}

pub(crate) fn scheme(arch: crate::model::Architecture) -> InitScheme {
    use crate::model::Architecture as A;
    match arch {
        A::Mobilenetv2050 | A::Mobilenetv2100 => mobilenet::SCHEME,
        A::Densenet121 => densenet::SCHEME,
        A::Squeezenet10 => squeezenet::SCHEME,
        A::Googlenet => googlenet::SCHEME,
        A::MobilevitXs => mobilevit::SCHEME,
        A::VitTinyRS16P8224 => vit::SCHEME,
        A::ToyCnn => toy::SCHEME,
    }
}

/// Register the backbone's layers in canonical order.
pub(crate) fn build(arch: crate::model::Architecture, b: &mut Builder) -> Recipe {
    use crate::model::Architecture as A;
    match arch {
        A::Mobilenetv2050 => mobilenet::build(b, 0.5),
        A::Mobilenetv2100 => mobilenet::build(b, 1.0),
        A::Densenet121 => densenet::build(b),
        A::Squeezenet10 => squeezenet::build(b),
        A::Googlenet => googlenet::build(b),
        A::MobilevitXs => mobilevit::build(b),
        A::VitTinyRS16P8224 => vit::build(b),
        A::ToyCnn => toy::build(b),
    }
}

/// Convolution, batch norm and an optional activation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new(b: &mut Builder, conv: &str, bn: &str, spec: ConvSpec, eps: f32, act: Option<Activation>) -> ConvBn {
        let cout = spec.cout;
        ConvBn {
            conv: b.conv(conv, spec),
            bn: b.bn(bn, cout, eps),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.conv(x, &self.conv);
        let y = g.batch_norm(y, &self.bn);
        match self.act {
            Some(a) => g.act(y, a),
            None => y,
        }
    }
}

/// Round `v` to a multiple of `divisor`, never dropping below 90% of `v`.
pub(crate) fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = ((v + d / 2.0) / d).floor() as usize * divisor;
    out = out.max(divisor);
    if (out as f64) < 0.9 * v {
        out += divisor;
    }
    out
}

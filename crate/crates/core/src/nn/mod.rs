//! Differentiable building blocks: contextual-transformer attention, the
//! CCSP block, the multi-scale backbone and the CCSP feature-fusion neck.

mod backbone;
mod ccsp;
mod cot;
mod layers;
mod neck;

pub use backbone::{Backbone, BackboneConfig, BackboneOutput, STRIDES};
pub use ccsp::CcspBlock;
pub use cot::{cot_forward, CotConfig, CotLayer, CotParts};
pub use layers::{Conv, ConvNormAct};
pub use neck::{Neck, NeckConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::ConvNormAct;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    /// Channel widths of the stride 8, 16 and 32 taps.
    pub widths: [usize; 3],
    /// Stride-1 `3×3` convolutions following each strided stage.
    pub stage_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 3, stem_width: 16, widths: [16, 32, 64], stage_depth: 1 }
    }
}

/// Feature maps at strides 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub scales: [Var; 3],
}

/// Convolutional stand-in for a vision-transformer backbone: a stride-2 stem
/// followed by four stride-2 stages, tapped at strides 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvNormAct,
    stages: Vec<Vec<ConvNormAct>>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.in_channels == 0 || config.stem_width == 0 || config.widths.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        let stem = ConvNormAct::new(store, "backbone.stem", config.in_channels, config.stem_width, 3, 2, 1, rng);
        let outs = [config.stem_width, config.widths[0], config.widths[1], config.widths[2]];
        let mut prev = config.stem_width;
        let mut stages = Vec::new();
        for (i, &out) in outs.iter().enumerate() {
            let mut stage = vec![ConvNormAct::new(store, &format!("backbone.stage{i}.down"), prev, out, 3, 2, 1, rng)];
            for d in 0..config.stage_depth {
                stage.push(ConvNormAct::new(store, &format!("backbone.stage{i}.conv{d}"), out, out, 3, 1, 1, rng));
            }
            stages.push(stage);
            prev = out;
        }
        Ok(Backbone { config, stem, stages })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<BackboneOutput> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::input(format!("image size {h}×{w} must be a positive multiple of 32")));
        }
        if c != self.config.in_channels {
            return Err(Error::config(format!(
                "backbone expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let mut x = self.stem.forward(g, store, image)?;
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            for layer in stage {
                x = layer.forward(g, store, x)?;
            }
            if i >= 1 {
                taps.push(x);
            }
        }
        Ok(BackboneOutput { scales: [taps[0], taps[1], taps[2]] })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.param_ids();
        for layer in self.stages.iter().flatten() {
            ids.extend(layer.param_ids());
        }
        ids
    }
}

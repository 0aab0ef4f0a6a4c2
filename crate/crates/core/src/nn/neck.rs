use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::BackboneOutput;
use super::ccsp::CcspBlock;
use super::cot::CotConfig;
use super::layers::ConvNormAct;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeckConfig {
    pub in_widths: [usize; 3],
    pub out_widths: [usize; 3],
    pub cot: CotConfig,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig { in_widths: [16, 32, 64], out_widths: [16, 32, 64], cot: CotConfig::default() }
    }
}

/// Path-aggregation neck: a top-down pass (upsample, concatenate) followed by
/// a bottom-up pass (strided conv, concatenate). Each fusion is a pointwise
/// projection refined by a CCSP block.
#[derive(Clone, Debug)]
pub struct Neck {
    pub config: NeckConfig,
    lateral5: ConvNormAct,
    fuse4: ConvNormAct,
    refine4: CcspBlock,
    lateral4: ConvNormAct,
    fuse3: ConvNormAct,
    refine3: CcspBlock,
    down3: ConvNormAct,
    fuse_out4: ConvNormAct,
    refine_out4: CcspBlock,
    down4: ConvNormAct,
    fuse_out5: ConvNormAct,
    refine_out5: CcspBlock,
}

impl Neck {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: NeckConfig, rng: &mut R) -> Result<Self> {
        let [i3, i4, i5] = config.in_widths;
        let [o3, o4, o5] = config.out_widths;
        for w in [i3, i4, i5, o3, o4, o5] {
            if w == 0 {
                return Err(Error::config("neck widths must be positive"));
            }
            config.cot.validate(w)?;
        }
        let cot = config.cot;
        Ok(Neck {
            lateral5: ConvNormAct::new(store, "neck.lateral5", i5, o4, 1, 1, 1, rng),
            fuse4: ConvNormAct::new(store, "neck.fuse4", o4 + i4, o4, 1, 1, 1, rng),
            refine4: CcspBlock::new(store, "neck.refine4", o4, cot, rng)?,
            lateral4: ConvNormAct::new(store, "neck.lateral4", o4, o3, 1, 1, 1, rng),
            fuse3: ConvNormAct::new(store, "neck.fuse3", o3 + i3, o3, 1, 1, 1, rng),
            refine3: CcspBlock::new(store, "neck.refine3", o3, cot, rng)?,
            down3: ConvNormAct::new(store, "neck.down3", o3, o3, 3, 2, 1, rng),
            fuse_out4: ConvNormAct::new(store, "neck.fuse_out4", o3 + o3, o4, 1, 1, 1, rng),
            refine_out4: CcspBlock::new(store, "neck.refine_out4", o4, cot, rng)?,
            down4: ConvNormAct::new(store, "neck.down4", o4, o4, 3, 2, 1, rng),
            fuse_out5: ConvNormAct::new(store, "neck.fuse_out5", o4 + o4, o5, 1, 1, 1, rng),
            refine_out5: CcspBlock::new(store, "neck.refine_out5", o5, cot, rng)?,
            config,
        })
    }

    /// Fuses three scales; accepts exactly three inputs.
    pub fn forward_scales<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, scales: &[Var]) -> Result<BackboneOutput> {
        let &[p3, p4, p5] = scales else {
            return Err(Error::config(format!("neck expects 3 scales, got {}", scales.len())));
        };
        for (i, (&v, &want)) in scales.iter().zip(&self.config.in_widths).enumerate() {
            let (_, c, _, _) = g.value(v).dims4()?;
            if c != want {
                return Err(Error::config(format!("neck scale {i} expects {want} channels, got {c}")));
            }
        }
        // top-down
        let l5 = self.lateral5.forward(g, store, p5)?;
        let up5 = g.upsample2x(l5)?;
        let cat4 = g.concat(&[up5, p4])?;
        let t4 = self.fuse4.forward(g, store, cat4)?;
        let t4 = self.refine4.forward(g, store, t4)?;
        let l4 = self.lateral4.forward(g, store, t4)?;
        let up4 = g.upsample2x(l4)?;
        let cat3 = g.concat(&[up4, p3])?;
        let n3 = self.fuse3.forward(g, store, cat3)?;
        let n3 = self.refine3.forward(g, store, n3)?;
        // bottom-up
        let d3 = self.down3.forward(g, store, n3)?;
        let cat_o4 = g.concat(&[d3, l4])?;
        let n4 = self.fuse_out4.forward(g, store, cat_o4)?;
        let n4 = self.refine_out4.forward(g, store, n4)?;
        let d4 = self.down4.forward(g, store, n4)?;
        let cat_o5 = g.concat(&[d4, l5])?;
        let n5 = self.fuse_out5.forward(g, store, cat_o5)?;
        let n5 = self.refine_out5.forward(g, store, n5)?;
        Ok(BackboneOutput { scales: [n3, n4, n5] })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &BackboneOutput) -> Result<BackboneOutput> {
        self.forward_scales(g, store, &input.scales)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [
            &self.lateral5,
            &self.fuse4,
            &self.lateral4,
            &self.fuse3,
            &self.down3,
            &self.fuse_out4,
            &self.down4,
            &self.fuse_out5,
        ]
        .iter()
        .flat_map(|l| l.param_ids())
        .chain(
            [&self.refine4, &self.refine3, &self.refine_out4, &self.refine_out5]
                .iter()
                .flat_map(|b| b.param_ids()),
        )
        .collect()
    }
}

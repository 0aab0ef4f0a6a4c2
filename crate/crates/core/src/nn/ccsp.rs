use rand::Rng;

use super::cot::{CotConfig, CotLayer};
use super::layers::ConvNormAct;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Residual pointwise conv, CoT layer, residual `3×3` conv, fused with the input:
/// `X₁ = X + f(X)`, `X₂ = CoT(X₁)`, `X₃ = X₂ + g(X₂)`, output `X + X₃`.
///
/// With every inner weight at zero the block is the identity map.
#[derive(Clone, Debug)]
pub struct CcspBlock {
    pub channels: usize,
    pub pre: ConvNormAct,
    pub cot: CotLayer,
    pub post: ConvNormAct,
}

impl CcspBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cot: CotConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CcspBlock {
            channels,
            pre: ConvNormAct::new(store, &format!("{name}.pre"), channels, channels, 1, 1, 1, rng),
            cot: CotLayer::new(store, &format!("{name}.cot"), channels, cot, rng)?,
            post: ConvNormAct::new(store, &format!("{name}.post"), channels, channels, 3, 1, 1, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::config(format!(
                "CCSP block built for {} channels, input has {c}",
                self.channels
            )));
        }
        let f = self.pre.forward(g, store, x)?;
        let x1 = g.add(x, f)?;
        let x2 = self.cot.forward(g, store, x1)?;
        let r = self.post.forward(g, store, x2)?;
        let x3 = g.add(x2, r)?;
        g.add(x, x3)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.pre.param_ids();
        ids.extend(self.cot.param_ids());
        ids.extend(self.post.param_ids());
        ids
    }
}

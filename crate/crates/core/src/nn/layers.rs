use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Plain 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels / groups) * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_channels, in_channels / groups, kernel, kernel], bound, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Conv {
            weight,
            bias,
            spec: ConvSpec { stride, padding: kernel / 2, groups },
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Convolution, per-channel affine normalization, SiLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), in_channels, out_channels, kernel, stride, groups, false, rng);
        let scale = store.add(format!("{name}.norm.scale"), Tensor::full(&[out_channels], T::one()));
        let shift = store.add(format!("{name}.norm.shift"), Tensor::zeros(&[out_channels]));
        ConvNormAct { conv, scale, shift }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let s = g.param(store, self.scale);
        let b = g.param(store, self.shift);
        let y = g.channel_affine(y, s, b)?;
        Ok(g.silu(y))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.extend([self.scale, self.shift]);
        ids
    }
}

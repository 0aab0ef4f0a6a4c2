use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvNormAct};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape settings of a contextual-transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotConfig {
    /// Side of the local window; odd.
    pub kernel_size: usize,
    /// Hidden width of the logit path is `2C / reduction`.
    pub reduction: usize,
    /// Attention heads; also the group count of the key convolution.
    pub heads: usize,
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig { kernel_size: 3, reduction: 4, heads: 1 }
    }
}

impl CotConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction factor must be positive"));
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::config(format!(
                "head count {} must divide {channels} channels",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        (2 * channels / self.reduction).max(1)
    }
}

/// Contextual-transformer layer.
///
/// The static context `K₁` comes from a grouped `k×k` convolution of the input;
/// `[K₁, Q]` goes through two pointwise convolutions to per-position logits over
/// the `k×k` window; their softmax aggregates the value projection `V` over the
/// same zero-padded window into the dynamic context `K₂`; the output is `K₁ + K₂`.
#[derive(Clone, Debug)]
pub struct CotLayer {
    pub channels: usize,
    pub config: CotConfig,
    pub key: ConvNormAct,
    pub value: ConvNormAct,
    pub attn_hidden: ConvNormAct,
    pub attn_logits: Conv,
}

/// Intermediate tensors of one forward pass.
pub struct CotParts {
    pub static_context: Var,
    pub logits: Var,
    pub value: Var,
    pub output: Var,
}

impl CotLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        config: CotConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(channels)?;
        let k = config.kernel_size;
        let hidden = config.hidden_width(channels);
        Ok(CotLayer {
            channels,
            config,
            key: ConvNormAct::new(store, &format!("{name}.key"), channels, channels, k, 1, config.heads, rng),
            value: ConvNormAct::new(store, &format!("{name}.value"), channels, channels, 1, 1, 1, rng),
            attn_hidden: ConvNormAct::new(store, &format!("{name}.attn1"), 2 * channels, hidden, 1, 1, 1, rng),
            attn_logits: Conv::new(
                store,
                &format!("{name}.attn2"),
                hidden,
                config.heads * k * k,
                1,
                1,
                1,
                true,
                rng,
            ),
        })
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::config(format!(
                "CoT layer built for {} channels, input has {c}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn forward_parts<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<CotParts> {
        self.check_input(g, x)?;
        let k1 = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let qk = g.concat(&[k1, x])?;
        let hidden = self.attn_hidden.forward(g, store, qk)?;
        let logits = self.attn_logits.forward(g, store, hidden)?;
        let k2 = g.local_attention(logits, v, self.config.kernel_size, self.config.heads)?;
        let output = g.add(k1, k2)?;
        Ok(CotParts { static_context: k1, logits, value: v, output })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, store, x)?.output)
    }

    /// Softmax-normalized local attention weights, `(N, heads·k², H, W)`.
    pub fn attention_weights<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let parts = self.forward_parts(&mut g, store, xv)?;
        ops::local_softmax(g.value(parts.logits), self.config.kernel_size, self.config.heads)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.key.param_ids();
        ids.extend(self.value.param_ids());
        ids.extend(self.attn_hidden.param_ids());
        ids.extend(self.attn_logits.param_ids());
        ids
    }
}

/// Runs a layer on a plain tensor.
pub fn cot_forward<T: Scalar>(layer: &CotLayer, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = layer.forward(&mut g, store, xv)?;
    Ok(g.value(y).clone())
}

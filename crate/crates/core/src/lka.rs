//! Large kernel attention block.
//!
//! A large receptive field is decomposed into a depthwise conv followed by a
//! dilated depthwise conv; the resulting map gates the input element-wise.
//! A batch-normalized pointwise/depthwise feed-forward stack follows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, Session};
use crate::tensor::{Conv2dConfig, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LkaConfig {
    pub kernel: usize,
    pub dilated_kernel: usize,
    pub dilation: usize,
    pub ffn_expansion: usize,
    pub residual: bool,
}

impl Default for LkaConfig {
    fn default() -> Self {
        Self {
            kernel: 5,
            dilated_kernel: 7,
            dilation: 3,
            ffn_expansion: 1,
            residual: true,
        }
    }
}

impl LkaConfig {
    /// Half-width of the attention map's receptive field:
    /// `(k − 1)/2 + d·(k_d − 1)/2`, i.e. 11 for the 5 + 7·3 default.
    pub fn receptive_radius(&self) -> usize {
        (self.kernel - 1) / 2 + self.dilation * (self.dilated_kernel - 1) / 2
    }
}

/// Leaves under `prefix`: `proj_in`, `dw`, `dw_dilated`, `proj_attn` (all
/// with bias), `norm` (batch norm), `ffn.fc1`, `ffn.dw`, `ffn.fc2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LkaParams {
    pub prefix: String,
    pub channels: usize,
    pub config: LkaConfig,
}

impl LkaParams {
    pub fn new(prefix: impl Into<String>, channels: usize, config: LkaConfig) -> Result<Self> {
        if config.kernel.is_multiple_of(2) || config.dilated_kernel.is_multiple_of(2) || config.dilation == 0 || config.ffn_expansion == 0 {
            return Err(Error::Config(format!("invalid LKA geometry {config:?}")));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
            config,
        })
    }

    fn id(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = self.channels;
        let ce = c * self.config.ffn_expansion;
        let (k, kd) = (self.config.kernel, self.config.dilated_kernel);
        init::conv(store, &self.id("proj_in"), c, c, (1, 1), 1, true, rng)?;
        init::conv(store, &self.id("dw"), c, 1, (k, k), c, true, rng)?;
        init::conv(store, &self.id("dw_dilated"), c, 1, (kd, kd), c, true, rng)?;
        init::conv(store, &self.id("proj_attn"), c, c, (1, 1), 1, true, rng)?;
        init::batch_norm(store, &self.id("norm"), c)?;
        init::conv(store, &self.id("ffn.fc1"), ce, c, (1, 1), 1, true, rng)?;
        init::conv(store, &self.id("ffn.dw"), ce, 1, (3, 3), ce, true, rng)?;
        init::conv(store, &self.id("ffn.fc2"), c, ce, (1, 1), 1, true, rng)?;
        Ok(())
    }

    /// `proj_attn(dw_dilated(dw(gelu(proj_in(x)))))`, shape preserving.
    pub fn attention_map(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(
                "channel",
                format!("LKA `{}` expects [B, {}, T, F], got {shape:?}", self.prefix, self.channels),
            ));
        }
        let c = self.channels;
        let (k, kd, d) = (self.config.kernel, self.config.dilated_kernel, self.config.dilation);
        let a = s.conv(&self.id("proj_in"), x, Conv2dConfig::default())?;
        let a = s.graph.gelu(a);
        let a = s.conv(&self.id("dw"), a, Conv2dConfig::same((k, k), (1, 1)).groups(c))?;
        let a = s.conv(&self.id("dw_dilated"), a, Conv2dConfig::same((kd, kd), (d, d)).groups(c))?;
        s.conv(&self.id("proj_attn"), a, Conv2dConfig::default())
    }

    /// `u = x + x ⊙ attention_map(x)`, `v = u + ffn(bn(u))` with
    /// `ffn = 1×1 → depthwise 3×3 → GELU → 1×1`. Without residuals the
    /// identity terms are dropped.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let a = self.attention_map(s, x)?;
        let gated = s.graph.mul(x, a)?;
        let u = if self.config.residual { s.graph.add(x, gated)? } else { gated };
        let n = s.batch_norm(&self.id("norm"), u)?;
        let ce = self.channels * self.config.ffn_expansion;
        let f = s.conv(&self.id("ffn.fc1"), n, Conv2dConfig::default())?;
        let f = s.conv(&self.id("ffn.dw"), f, Conv2dConfig::same((3, 3), (1, 1)).groups(ce))?;
        let f = s.graph.gelu(f);
        let f = s.conv(&self.id("ffn.fc2"), f, Conv2dConfig::default())?;
        if self.config.residual {
            s.graph.add(u, f)
        } else {
            Ok(f)
        }
    }
}

//! Frequency dynamic convolution.
//!
//! `K` basis 3×3 kernels are applied to the input, and their responses are
//! mixed per frequency bin by attention weights `π_k(b, f)` computed from the
//! time-averaged input. The effective kernel therefore changes along the
//! frequency axis, which removes translation equivariance in frequency.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init, Session};
use crate::tensor::{xavier_uniform, Conv2dConfig, ParamStore, Tensor, Var};

/// Shape description and parameter ids of one frequency dynamic convolution.
///
/// Leaves under `prefix`:
/// - `basis.weight [K·Cout, Cin, 3, 3]`, `basis.bias [K·Cout]`: the K kernels
///   stacked along the output-channel axis
/// - `att.conv1.weight [H, Cin, 1, 3]`: first 1D convolution along frequency
/// - `att.bn`: batch norm over the H hidden channels
/// - `att.conv2.{weight [K, H, 1, 3], bias [K]}`: second 1D convolution
#[derive(Clone, Debug, PartialEq)]
pub struct FdyParams {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub basis: usize,
    pub hidden: usize,
    pub temperature: f64,
}

impl FdyParams {
    /// Hidden width defaults to `max(Cin / 4, K)`.
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, basis: usize) -> Result<Self> {
        if basis == 0 {
            return Err(Error::Config("FDY needs at least one basis kernel".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            basis,
            hidden: (in_channels / 4).max(basis),
            temperature: 1.0,
        })
    }

    fn id(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (cin, cout, k, h) = (self.in_channels, self.out_channels, self.basis, self.hidden);
        // Each basis kernel is initialized as an independent Cin → Cout conv.
        let w = xavier_uniform(&[k * cout, cin, 3, 3], cin * 9, cout * 9, rng);
        store.add_param(self.id("basis.weight"), w)?;
        store.add_param(self.id("basis.bias"), Tensor::zeros(&[k * cout]))?;
        init::conv(store, &self.id("att.conv1"), h, cin, (1, 3), 1, false, rng)?;
        init::batch_norm(store, &self.id("att.bn"), h)?;
        init::conv(store, &self.id("att.conv2"), k, h, (1, 3), 1, true, rng)?;
        Ok(())
    }

    /// Attention weights `[B, K, F]`, a softmax over K for every (b, f).
    pub fn attention(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        self.check_input(&shape)?;
        let (b, f) = (shape[0], shape[3]);
        let pooled = s.graph.mean_axis(x, 2)?;
        let pooled = s.graph.reshape(pooled, &[b, self.in_channels, 1, f])?;
        let same = Conv2dConfig::same((1, 3), (1, 1));
        let h = s.conv(&self.id("att.conv1"), pooled, same)?;
        let h = s.batch_norm(&self.id("att.bn"), h)?;
        let h = s.graph.relu(h);
        let logits = s.conv(&self.id("att.conv2"), h, same)?;
        let logits = s.graph.reshape(logits, &[b, self.basis, f])?;
        let logits = if self.temperature == 1.0 {
            logits
        } else {
            s.graph.scale(logits, 1.0 / self.temperature)
        };
        s.graph.softmax(logits, 1)
    }

    /// `y[b, :, :, f] = Σ_k π_k(b, f) · conv(x, W_k, b_k)[b, :, :, f]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let att = self.attention(s, x)?;
        let responses = s.conv(&self.id("basis"), x, Conv2dConfig::same((3, 3), (1, 1)))?;
        s.graph.fdy_mix(responses, att, self.basis)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::dim("input", format!("FDY expects [B, C, T, F], got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(Error::dim(
                "channel",
                format!("FDY `{}` expects {} channels, got {}", self.prefix, self.in_channels, shape[1]),
            ));
        }
        Ok(())
    }
}

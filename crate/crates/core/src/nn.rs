//! Layer building blocks on top of the autodiff graph: a forward session
//! that resolves named parameters, plus convolution, batch norm, GLU gating,
//! dropout, linear and bidirectional GRU layers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, BatchNormStats, Conv2dConfig, Graph, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics gathered by a training-mode batch norm, to be folded
/// into the running buffers once the step owning the store is done.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub stats: BatchNormStats,
}

/// One forward pass: a graph plus the read-only parameter store it draws from.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: Mode,
    rng: ChaCha8Rng,
    params: HashMap<String, Var>,
    bn_updates: Vec<BnUpdate>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, graph: Graph) -> Self {
        Self {
            graph,
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            params: HashMap::new(),
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    /// Seed the dropout mask stream.
    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = rng;
        self
    }

    /// Record `(label, shape)` for every traced intermediate.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(id) {
            return Ok(v);
        }
        let v = self.graph.param(self.store, id)?;
        self.params.insert(id.to_string(), v);
        Ok(v)
    }

    fn opt_param(&mut self, id: &str) -> Result<Option<Var>> {
        if self.store.index_of(id).is_some() {
            self.param(id).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn trace(&mut self, label: &str, v: Var) {
        let shape = self.graph.shape(v).to_vec();
        if let Some(t) = &mut self.trace {
            t.push((label.to_string(), shape));
        }
    }

    pub fn take_trace(&mut self) -> Vec<(String, Vec<usize>)> {
        self.trace.take().unwrap_or_default()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn into_parts(self) -> (Graph, Vec<BnUpdate>) {
        (self.graph, self.bn_updates)
    }

    /// Convolution with weight `{prefix}.weight` and optional `{prefix}.bias`.
    pub fn conv(&mut self, prefix: &str, x: Var, cfg: Conv2dConfig) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.opt_param(&format!("{prefix}.bias"))?;
        self.graph.conv2d(x, w, b, cfg)
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.opt_param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, b)
    }

    /// Batch norm over axis 1: batch statistics in train mode, running
    /// statistics in eval mode.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, gamma, beta, None, BN_EPS)?;
                self.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    stats: stats.expect("batch statistics in train mode"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let missing = || Error::Contract(format!("missing running statistics for `{prefix}`"));
                let mean = self.store.buffer(&format!("{prefix}.running_mean")).ok_or_else(missing)?;
                let var = self.store.buffer(&format!("{prefix}.running_var")).ok_or_else(missing)?;
                let (y, _) = self
                    .graph
                    .batch_norm(x, gamma, beta, Some((mean.data(), var.data())), BN_EPS)?;
                Ok(y)
            }
        }
    }

    /// Channel-preserving gate `x ⊙ σ(conv1x1(x))`.
    pub fn glu_gate(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gate = self.conv(prefix, x, Conv2dConfig::default())?;
        let gate = self.graph.sigmoid(gate);
        self.graph.mul(x, gate)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.graph.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    /// Bidirectional single-layer GRU over `x: [B, T, D]` → `[B, T, 2H]`.
    ///
    /// Gate order in the stacked weights is reset, update, candidate:
    /// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z = σ(…)`,
    /// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn gru_bidirectional(&mut self, prefix: &str, x: Var, hidden: usize) -> Result<Var> {
        let fwd = self.gru_direction(&format!("{prefix}.fwd"), x, hidden, false)?;
        let bwd = self.gru_direction(&format!("{prefix}.bwd"), x, hidden, true)?;
        self.graph.concat(&[fwd, bwd], 2)
    }

    fn gru_direction(&mut self, prefix: &str, x: Var, h: usize, reverse: bool) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("input", format!("GRU expects [B, T, D], got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        let w_ih = self.param(&format!("{prefix}.w_ih"))?;
        let b_ih = self.param(&format!("{prefix}.b_ih"))?;
        let w_hh = self.param(&format!("{prefix}.w_hh"))?;
        let b_hh = self.param(&format!("{prefix}.b_hh"))?;
        if self.graph.shape(w_hh) != [3 * h, h] {
            return Err(Error::dim("hidden", format!("{prefix}.w_hh must be [{}, {h}]", 3 * h)));
        }
        let gi_all = self.graph.linear(x, w_ih, Some(b_ih))?;
        let g = &mut self.graph;
        let mut state = g.constant(Tensor::zeros(&[b, h]));
        let mut outs = vec![state; t];
        let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for ti in steps {
            let gi = g.narrow(gi_all, 1, ti, 1)?;
            let gi = g.reshape(gi, &[b, 3 * h])?;
            let gh = g.linear(state, w_hh, Some(b_hh))?;
            let (i_r, i_z, i_n) = (g.narrow(gi, 1, 0, h)?, g.narrow(gi, 1, h, h)?, g.narrow(gi, 1, 2 * h, h)?);
            let (h_r, h_z, h_n) = (g.narrow(gh, 1, 0, h)?, g.narrow(gh, 1, h, h)?, g.narrow(gh, 1, 2 * h, h)?);
            let r = g.add(i_r, h_r)?;
            let r = g.sigmoid(r);
            let z = g.add(i_z, h_z)?;
            let z = g.sigmoid(z);
            let rn = g.mul(r, h_n)?;
            let n = g.add(i_n, rn)?;
            let n = g.tanh(n);
            // h' = n + z ⊙ (h − n)
            let diff = g.sub(state, n)?;
            let zd = g.mul(z, diff)?;
            state = g.add(n, zd)?;
            outs[ti] = g.reshape(state, &[b, 1, h])?;
        }
        g.concat(&outs, 1)
    }
}

/// Fold batch statistics into the running buffers:
/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) -> Result<()> {
    for u in updates {
        for (suffix, vals) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
            let id = format!("{}.{suffix}", u.prefix);
            let buf = store
                .buffer_mut(&id)
                .ok_or_else(|| Error::Contract(format!("missing buffer `{id}`")))?;
            for (r, v) in buf.data_mut().iter_mut().zip(vals) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
    Ok(())
}

/// Parameter registration with Xavier-uniform weights and zero biases.
pub mod init {
    use super::*;

    #[allow(clippy::too_many_arguments)]
    pub fn conv<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        out_ch: usize,
        in_ch_per_group: usize,
        kernel: (usize, usize),
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        let taps = kernel.0 * kernel.1;
        let w = xavier_uniform(
            &[out_ch, in_ch_per_group, kernel.0, kernel.1],
            in_ch_per_group * taps,
            out_ch / groups * taps,
            rng,
        );
        store.add_param(format!("{prefix}.weight"), w)?;
        if bias {
            store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]))?;
        }
        Ok(())
    }

    pub fn linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        store.add_param(
            format!("{prefix}.weight"),
            xavier_uniform(&[out_dim, in_dim], in_dim, out_dim, rng),
        )?;
        if bias {
            store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]))?;
        }
        Ok(())
    }

    pub fn batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
        store.add_param(format!("{prefix}.weight"), Tensor::full(&[channels], 1.0))?;
        store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[channels]))?;
        store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
        store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0))?;
        Ok(())
    }

    pub fn glu_gate<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Result<()> {
        conv(store, prefix, channels, channels, (1, 1), 1, true, rng)
    }

    pub fn gru_bidirectional<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        for dir in ["fwd", "bwd"] {
            let p = format!("{prefix}.{dir}");
            store.add_param(format!("{p}.w_ih"), xavier_uniform(&[3 * hidden, input], input, 3 * hidden, rng))?;
            store.add_param(format!("{p}.w_hh"), xavier_uniform(&[3 * hidden, hidden], hidden, 3 * hidden, rng))?;
            store.add_param(format!("{p}.b_ih"), Tensor::zeros(&[3 * hidden]))?;
            store.add_param(format!("{p}.b_hh"), Tensor::zeros(&[3 * hidden]))?;
        }
        Ok(())
    }
}

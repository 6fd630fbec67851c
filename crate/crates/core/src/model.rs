//! The full FDY-LKA-CRNN: stem, FDY-LKA blocks, optional embedding fusion,
//! a Bi-GRU stack, a frame-level head and an attention-pooled clip head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdy::FdyParams;
use crate::lka::{LkaConfig, LkaParams};
use crate::nn::{init, Mode, Session};
use crate::tensor::{Conv2dConfig, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub class_count: usize,
    /// Stem width followed by one entry per FDY-LKA block.
    pub channels: Vec<usize>,
    /// `(time, frequency)` pooling window after the stem and after each block.
    pub pooling: Vec<(usize, usize)>,
    pub basis_kernels: usize,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    /// Width of the external embedding; `None` disables the fusion block.
    pub embedding_dim: Option<usize>,
    pub dropout: f64,
    pub width_scale: f64,
    pub n_frames: usize,
    pub n_mels: usize,
    pub lka: LkaConfig,
    /// ReLU after each recurrent layer.
    pub rnn_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            class_count: 10,
            channels: vec![32, 64, 128, 256, 256, 256, 256],
            pooling: vec![(2, 2), (2, 2), (1, 2), (1, 2), (1, 2), (1, 2), (1, 2)],
            basis_kernels: 4,
            rnn_hidden: 256,
            rnn_layers: 2,
            embedding_dim: Some(768),
            dropout: 0.5,
            width_scale: 1.0,
            n_frames: 1001,
            n_mels: 128,
            lka: LkaConfig::default(),
            rnn_relu: false,
        }
    }
}

impl ModelConfig {
    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Channel schedule after `width_scale`.
    pub fn widths(&self) -> Vec<usize> {
        self.channels.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn hidden(&self) -> usize {
        self.scaled(self.rnn_hidden)
    }

    pub fn blocks(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    /// Frame count after all pooling stages.
    pub fn output_frames(&self) -> usize {
        self.pooling.iter().fold(self.n_frames, |t, p| t / p.0)
    }

    fn cnn_out(&self) -> usize {
        *self.widths().last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() < 2 {
            return bad("need a stem width and at least one block width".into());
        }
        if self.pooling.len() != self.channels.len() {
            return bad(format!(
                "{} pooling windows for {} stages",
                self.pooling.len(),
                self.channels.len()
            ));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return bad(format!("width_scale must be positive, got {}", self.width_scale));
        }
        if self.class_count == 0 || self.rnn_layers == 0 || self.basis_kernels == 0 || self.rnn_hidden == 0 {
            return bad("class_count, rnn_layers, rnn_hidden and basis_kernels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.embedding_dim == Some(0) {
            return bad("embedding_dim must be positive".into());
        }
        let (mut t, mut f) = (self.n_frames, self.n_mels);
        for (i, &(pt, pf)) in self.pooling.iter().enumerate() {
            if pt == 0 || pf == 0 || pt > t || pf > f {
                return bad(format!("pooling {:?} at stage {i} does not fit a {t}x{f} map", (pt, pf)));
            }
            t /= pt;
            f /= pf;
        }
        if f != 1 {
            return bad(format!("frequency axis must pool down to 1, ends at {f}"));
        }
        LkaParams::new("lka", 1, self.lka.clone())?;
        Ok(())
    }
}

fn fdy(cfg: &ModelConfig, i: usize) -> Result<FdyParams> {
    let w = cfg.widths();
    FdyParams::new(format!("block{}.fdy", i + 1), w[i], w[i + 1], cfg.basis_kernels)
}

fn lka(cfg: &ModelConfig, i: usize) -> Result<LkaParams> {
    LkaParams::new(format!("block{}.lka", i + 1), cfg.widths()[i + 1], cfg.lka.clone())
}

/// A configuration together with every learnable leaf and batch-norm buffer.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, deterministic under `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.widths();
        // The stem conv feeds a batch norm, which would cancel any bias.
        init::conv(&mut store, "stem.conv", w[0], 1, (3, 3), 1, false, &mut rng)?;
        init::batch_norm(&mut store, "stem.bn", w[0])?;
        init::glu_gate(&mut store, "stem.glu", w[0], &mut rng)?;
        for i in 0..config.blocks() {
            fdy(&config, i)?.register(&mut store, &mut rng)?;
            init::batch_norm(&mut store, &format!("block{}.bn", i + 1), w[i + 1])?;
            init::glu_gate(&mut store, &format!("block{}.glu", i + 1), w[i + 1], &mut rng)?;
            lka(&config, i)?.register(&mut store, &mut rng)?;
        }
        let mut rnn_in = config.cnn_out();
        if let Some(e) = config.embedding_dim {
            init::linear(&mut store, "fusion", rnn_in, rnn_in + e, true, &mut rng)?;
        }
        let h = config.hidden();
        for l in 0..config.rnn_layers {
            init::gru_bidirectional(&mut store, &format!("rnn{l}"), rnn_in, h, &mut rng)?;
            rnn_in = 2 * h;
        }
        init::linear(&mut store, "strong_head", config.class_count, 2 * h, true, &mut rng)?;
        init::linear(&mut store, "attn_head", config.class_count, 2 * h, true, &mut rng)?;
        Ok(Self { config, store })
    }

    /// Eval-mode, gradient-free prediction for a batch of clips.
    ///
    /// `features[i]` is `[n_frames, n_mels]`; `embeddings[i]`, when fusion is
    /// configured, is `[output_frames, embedding_dim]`.
    pub fn predict(&self, features: &[&Tensor], embeddings: Option<&[&Tensor]>) -> Result<Vec<ClipPrediction>> {
        let mut s = Session::new(&self.store, Mode::Eval, Graph::no_grad());
        let x = stack_features(&mut s.graph, &self.config, features)?;
        let e = embeddings.map(|e| stack_embeddings(&mut s.graph, &self.config, e)).transpose()?;
        let out = forward(&mut s, &self.config, x, e)?;
        Ok(out.predictions(&s.graph))
    }
}

/// Frame-level and clip-level probabilities for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    /// `[frames][class]`
    pub strong: Vec<Vec<f64>>,
    pub weak: Vec<f64>,
}

impl ClipPrediction {
    pub fn frames(&self) -> usize {
        self.strong.len()
    }

    pub fn classes(&self) -> usize {
        self.weak.len()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, T, C]` sigmoid probabilities.
    pub strong: Var,
    /// `[B, T, C]` pre-sigmoid logits.
    pub strong_logits: Var,
    /// `[B, T, C]` attention logits (softmax over T happens in pooling).
    pub attn_logits: Var,
    /// `[B, C]`
    pub weak: Var,
}

impl ModelOutput {
    pub fn predictions(&self, g: &Graph) -> Vec<ClipPrediction> {
        let strong = g.value(self.strong);
        let weak = g.value(self.weak);
        let (b, t, c) = (strong.dim(0), strong.dim(1), strong.dim(2));
        (0..b)
            .map(|bi| ClipPrediction {
                strong: (0..t)
                    .map(|ti| strong.data()[(bi * t + ti) * c..][..c].to_vec())
                    .collect(),
                weak: weak.data()[bi * c..(bi + 1) * c].to_vec(),
            })
            .collect()
    }
}

/// Stack `[n_frames, n_mels]` features into a `[B, 1, n_frames, n_mels]` constant.
pub fn stack_features(g: &mut Graph, cfg: &ModelConfig, features: &[&Tensor]) -> Result<Var> {
    let want = [cfg.n_frames, cfg.n_mels];
    let mut data = Vec::with_capacity(features.len() * cfg.n_frames * cfg.n_mels);
    for f in features {
        if f.shape() != want {
            return Err(Error::dim("input", format!("feature {:?}, model expects {want:?}", f.shape())));
        }
        data.extend_from_slice(f.data());
    }
    Ok(g.constant(Tensor::new(vec![features.len(), 1, cfg.n_frames, cfg.n_mels], data)?))
}

/// Stack aligned embeddings into a `[B, output_frames, embedding_dim]` constant.
pub fn stack_embeddings(g: &mut Graph, cfg: &ModelConfig, embeddings: &[&Tensor]) -> Result<Var> {
    let dim = cfg
        .embedding_dim
        .ok_or_else(|| Error::Input("embeddings given but the model has no fusion block".into()))?;
    let want = [cfg.output_frames(), dim];
    let mut data = Vec::new();
    for e in embeddings {
        if e.shape() != want {
            return Err(Error::dim("embedding", format!("embedding {:?}, model expects {want:?}", e.shape())));
        }
        data.extend_from_slice(e.data());
    }
    Ok(g.constant(Tensor::new(vec![embeddings.len(), want[0], want[1]], data)?))
}

/// `x: [B, 1, n_frames, n_mels]`, `emb: [B, T_out, embedding_dim]`.
///
/// Traced stages (when the session traces): `input`, `stem`, `block1`…,
/// `squeeze`, `fusion`, `rnn`, `strong`, `weak`.
pub fn forward(s: &mut Session, cfg: &ModelConfig, x: Var, emb: Option<Var>) -> Result<ModelOutput> {
    let shape = s.graph.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.n_frames || shape[3] != cfg.n_mels {
        let axis = if shape.len() == 4 && shape[1] == 1 && shape[2] == cfg.n_frames {
            "frequency"
        } else if shape.len() == 4 && shape[1] == 1 {
            "frame"
        } else {
            "input"
        };
        return Err(Error::dim(
            axis,
            format!("feature {shape:?}, model expects [B, 1, {}, {}]", cfg.n_frames, cfg.n_mels),
        ));
    }
    if cfg.embedding_dim.is_some() != emb.is_some() {
        return Err(Error::Input(if emb.is_none() {
            "fusion is configured but no embedding was supplied".into()
        } else {
            "embedding supplied but the model has no fusion block".into()
        }));
    }
    let b = shape[0];
    s.trace("input", x);

    let h = s.conv("stem.conv", x, Conv2dConfig::same((3, 3), (1, 1)))?;
    let h = s.batch_norm("stem.bn", h)?;
    let h = s.glu_gate("stem.glu", h)?;
    let mut h = s.graph.avg_pool2d(h, cfg.pooling[0])?;
    s.trace("stem", h);

    for i in 0..cfg.blocks() {
        let p = format!("block{}", i + 1);
        h = fdy(cfg, i)?.forward(s, h)?;
        h = s.batch_norm(&format!("{p}.bn"), h)?;
        h = s.glu_gate(&format!("{p}.glu"), h)?;
        h = lka(cfg, i)?.forward(s, h)?;
        h = s.graph.avg_pool2d(h, cfg.pooling[i + 1])?;
        h = s.dropout(h, cfg.dropout)?;
        s.trace(&p, h);
    }

    let (c, t) = (cfg.cnn_out(), cfg.output_frames());
    let h = s.graph.reshape(h, &[b, c, t])?;
    let mut h = s.graph.permute(h, &[0, 2, 1])?;
    s.trace("squeeze", h);

    if let Some(e) = emb {
        let es = s.graph.shape(e).to_vec();
        let dim = cfg.embedding_dim.expect("checked above");
        if es != [b, t, dim] {
            return Err(Error::dim("embedding", format!("embedding {es:?}, expected [{b}, {t}, {dim}]")));
        }
        let cat = s.graph.concat(&[h, e], 2)?;
        s.trace("concat", cat);
        h = s.linear("fusion", cat)?;
        s.trace("fusion", h);
    }

    for l in 0..cfg.rnn_layers {
        h = s.gru_bidirectional(&format!("rnn{l}"), h, cfg.hidden())?;
        if cfg.rnn_relu {
            h = s.graph.relu(h);
        }
    }
    let h = s.dropout(h, cfg.dropout)?;
    s.trace("rnn", h);

    let strong_logits = s.linear("strong_head", h)?;
    let strong = s.graph.sigmoid(strong_logits);
    s.trace("strong", strong);
    let attn_logits = s.linear("attn_head", h)?;
    let weak = attention_pool_graph(&mut s.graph, strong, attn_logits)?;
    s.trace("weak", weak);
    Ok(ModelOutput {
        strong,
        strong_logits,
        attn_logits,
        weak,
    })
}

/// `weak[b, c] = Σ_t softmax_t(attn[b, ·, c])[t] · strong[b, t, c]`.
pub fn attention_pool_graph(g: &mut Graph, strong: Var, attn_logits: Var) -> Result<Var> {
    let a = g.softmax(attn_logits, 1)?;
    let w = g.mul(a, strong)?;
    g.sum_axis(w, 1)
}

/// Attention pooling of one clip's `[T][C]` grids into a `C` vector.
pub fn attention_pool(strong: &[Vec<f64>], attn_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = strong.len();
    if t == 0 || attn_logits.len() != t {
        return Err(Error::dim("frame", format!("{t} strong frames vs {} attention frames", attn_logits.len())));
    }
    let c = strong[0].len();
    if strong.iter().chain(attn_logits).any(|r| r.len() != c) {
        return Err(Error::dim("class", "ragged class axis"));
    }
    Ok((0..c)
        .map(|ci| {
            let m = attn_logits.iter().map(|r| r[ci]).fold(f64::NEG_INFINITY, f64::max);
            let (mut num, mut den) = (0.0, 0.0);
            for (s, a) in strong.iter().zip(attn_logits) {
                let e = (a[ci] - m).exp();
                num += e * s[ci];
                den += e;
            }
            num / den
        })
        .collect())
}

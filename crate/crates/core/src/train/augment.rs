//! Batch augmentations. Feature frames relate to target frames by the
//! integer ratio `n_frames / target_frames` (4 for the standard model), so
//! spans and shifts are mapped through that ratio.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::data::{Example, LabelKind, Target};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mixup: bool,
    /// Probability that a batch is mixed at all.
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
    pub time_mask: bool,
    /// Longest masked span as a fraction of the clip.
    pub time_mask_rate: f64,
    pub shift: bool,
    /// Largest roll in feature frames; applied in whole target frames.
    pub max_frame_shift: usize,
    pub max_band_shift: usize,
    pub filter: bool,
    pub filter_db: f64,
    pub filter_knots: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup: true,
            mixup_prob: 0.5,
            mixup_alpha: 0.2,
            time_mask: true,
            time_mask_rate: 0.1,
            shift: true,
            max_frame_shift: 24,
            max_band_shift: 4,
            filter: true,
            filter_db: 6.0,
            filter_knots: 6,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            mixup: false,
            time_mask: false,
            shift: false,
            filter: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mixup_prob) || !(self.mixup_alpha > 0.0) {
            return Err(Error::Config("mixup needs prob in [0, 1] and alpha > 0".into()));
        }
        if !(0.0..1.0).contains(&self.time_mask_rate) {
            return Err(Error::Config("time_mask_rate must be in [0, 1)".into()));
        }
        if self.filter && self.filter_knots < 2 {
            return Err(Error::Config("filter augmentation needs at least 2 knots".into()));
        }
        Ok(())
    }
}

fn ratio(e: &Example) -> usize {
    match &e.target {
        Target::Strong(t) if t.dim(0) > 0 => (e.features.dim(0) / t.dim(0)).max(1),
        _ => 1,
    }
}

fn lerp(a: &Tensor, b: &Tensor, lambda: f64) -> Tensor {
    let mut out = a.clone();
    for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *o = lambda * *o + (1.0 - lambda) * y;
    }
    out
}

/// `λ·a + (1 − λ)·b` on features, embeddings and targets. Both clips must
/// carry the same label kind.
pub fn mix(a: &Example, b: &Example, lambda: f64) -> Result<Example> {
    let target = match (&a.target, &b.target) {
        (Target::Strong(x), Target::Strong(y)) => Target::Strong(lerp(x, y, lambda)),
        (Target::Weak(x), Target::Weak(y)) => {
            Target::Weak(x.iter().zip(y).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect())
        }
        (Target::Unlabeled, Target::Unlabeled) => Target::Unlabeled,
        _ => return Err(Error::Contract("mixup across label kinds".into())),
    };
    if a.features.shape() != b.features.shape() {
        return Err(Error::dim("input", "mixup of differently shaped features"));
    }
    Ok(Example {
        clip_id: a.clip_id.clone(),
        features: lerp(&a.features, &b.features, lambda),
        embedding: match (&a.embedding, &b.embedding) {
            (Some(x), Some(y)) => Some(lerp(x, y, lambda)),
            _ => a.embedding.clone(),
        },
        target,
    })
}

/// Zero feature frames `[start, start + len)` and the strong-target frames
/// they touch.
pub fn time_mask(e: &mut Example, start: usize, len: usize) {
    let r = ratio(e);
    let (frames, bands) = (e.features.dim(0), e.features.dim(1));
    let end = (start + len).min(frames);
    let start = start.min(end);
    e.features.data_mut()[start * bands..end * bands].fill(0.0);
    if let Target::Strong(t) = &mut e.target {
        let c = t.dim(1);
        let (ts, te) = (start / r, end.div_ceil(r).min(t.dim(0)));
        t.data_mut()[ts * c..te * c].fill(0.0);
    }
}

fn roll_rows(t: &Tensor, shift: isize) -> Tensor {
    let (n, w) = (t.dim(0), t.numel() / t.dim(0).max(1));
    let mut out = t.clone();
    for i in 0..n {
        let j = (i as isize + shift).rem_euclid(n as isize) as usize;
        out.data_mut()[j * w..(j + 1) * w].copy_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    out
}

/// Circular roll by `frames` target frames (`frames·ratio` feature frames)
/// and `bands` mel bands.
pub fn shift(e: &mut Example, frames: isize, bands: isize) {
    let r = ratio(e) as isize;
    e.features = roll_rows(&e.features, frames * r);
    if bands != 0 {
        let nb = e.features.dim(1);
        for row in e.features.data_mut().chunks_exact_mut(nb) {
            let src = row.to_vec();
            for (k, v) in src.into_iter().enumerate() {
                row[(k as isize + bands).rem_euclid(nb as isize) as usize] = v;
            }
        }
    }
    if let Target::Strong(t) = &mut e.target {
        *t = roll_rows(t, frames);
    }
    if let Some(emb) = &mut e.embedding {
        *emb = roll_rows(emb, frames);
    }
}

/// Per-band gains in dB, piecewise linear between `(band, dB)` knots.
pub fn filter_gains(knots: &[(f64, f64)], bands: usize) -> Vec<f64> {
    (0..bands)
        .map(|b| {
            let x = b as f64;
            match knots.iter().position(|k| k.0 >= x) {
                Some(0) => knots[0].1,
                None => knots.last().map_or(0.0, |k| k.1),
                Some(i) => {
                    let (a, c) = (knots[i - 1], knots[i]);
                    a.1 + (c.1 - a.1) * (x - a.0) / (c.0 - a.0)
                }
            }
        })
        .collect()
}

/// Scale band powers by the given gains: in the log domain this adds
/// `dB·ln(10)/10` to each band.
pub fn apply_filter(e: &mut Example, gains_db: &[f64]) {
    let nb = e.features.dim(1);
    let offs: Vec<f64> = gains_db.iter().map(|g| g * std::f64::consts::LN_10 / 10.0).collect();
    for row in e.features.data_mut().chunks_exact_mut(nb) {
        for (v, o) in row.iter_mut().zip(&offs) {
            *v += o;
        }
    }
}

/// Apply the enabled augmentations with parameters drawn from `rng`.
/// Mixup partners are drawn within the same label kind.
pub fn augment<R: Rng>(batch: &mut [Example], cfg: &AugmentConfig, rng: &mut R) -> Result<()> {
    if cfg.mixup && rng.gen_bool(cfg.mixup_prob) {
        let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
            .map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
        let mut groups: BTreeMap<LabelKind, Vec<usize>> = BTreeMap::new();
        for (i, e) in batch.iter().enumerate() {
            groups.entry(e.target.kind()).or_default().push(i);
        }
        for idx in groups.values() {
            if idx.len() < 2 {
                continue;
            }
            let lambda = beta.sample(rng);
            let mut partner = idx.clone();
            partner.shuffle(rng);
            let src: Vec<Example> = idx.iter().map(|&i| batch[i].clone()).collect();
            for (k, &i) in idx.iter().enumerate() {
                let j = idx.iter().position(|&x| x == partner[k]).expect("partner in group");
                batch[i] = mix(&src[k], &src[j], lambda)?;
            }
        }
    }
    for e in batch.iter_mut() {
        let (frames, bands) = (e.features.dim(0), e.features.dim(1));
        if cfg.shift {
            let r = ratio(e);
            let max_f = (cfg.max_frame_shift / r) as isize;
            let max_b = cfg.max_band_shift as isize;
            let (f, b) = (rng.gen_range(-max_f..=max_f), rng.gen_range(-max_b..=max_b));
            shift(e, f, b);
        }
        if cfg.time_mask {
            let max_len = (cfg.time_mask_rate * frames as f64) as usize;
            if max_len > 0 {
                let len = rng.gen_range(1..=max_len);
                let start = rng.gen_range(0..=frames - len);
                time_mask(e, start, len);
            }
        }
        if cfg.filter && bands > 1 {
            let n = rng.gen_range(2..=cfg.filter_knots);
            let mut xs: Vec<f64> = (0..n - 2).map(|_| rng.gen_range(0.0..(bands - 1) as f64)).collect();
            xs.push(0.0);
            xs.push((bands - 1) as f64);
            xs.sort_by(f64::total_cmp);
            let knots: Vec<(f64, f64)> = xs
                .into_iter()
                .map(|x| (x, rng.gen_range(-cfg.filter_db..=cfg.filter_db)))
                .collect();
            apply_filter(e, &filter_gains(&knots, bands));
        }
    }
    Ok(())
}

//! Strong pseudo-labels from ensembled predictions: plain 0.5 thresholding
//! for in-domain clips, and a clip-confidence and weak-label gate for
//! external weakly labeled clips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{decode, DecodeConfig, EventAnnotation};
use crate::model::ClipPrediction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    InDomain,
    External,
}

impl PseudoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PseudoSource::InDomain => "in_domain",
            PseudoSource::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    /// Frame gate, strict.
    pub frame_threshold: f64,
    /// Clip-confidence gate for external clips, strict.
    pub clip_threshold: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            frame_threshold: 0.5,
            clip_threshold: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelGrid {
    pub clip_id: String,
    /// `[frames][class]`, entries 0 or 1.
    pub labels: Vec<Vec<u8>>,
    pub source: PseudoSource,
}

impl PseudoLabelGrid {
    /// Events through the standard decoder (median smoothing included).
    pub fn to_events(&self, classes: &[String], cfg: &DecodeConfig) -> Result<Vec<EventAnnotation>> {
        let grid: Vec<Vec<f64>> = self
            .labels
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        decode(&self.clip_id, &grid, classes, cfg)
    }
}

/// Element-wise mean of several predictions of the same clip.
pub fn ensemble(preds: &[ClipPrediction]) -> Result<ClipPrediction> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Input("ensemble of zero predictions".into()))?;
    let (t, c) = (first.frames(), first.classes());
    for p in preds {
        if p.frames() != t || p.classes() != c || p.strong.iter().any(|r| r.len() != c) {
            return Err(Error::dim("class", format!("prediction shapes differ: {t}x{c} vs {}x{}", p.frames(), p.classes())));
        }
    }
    // Running mean, so k copies of the same value average to it exactly.
    let mut out = first.clone();
    for (k, p) in preds.iter().enumerate().skip(1) {
        let n = (k + 1) as f64;
        for (ro, rp) in out.strong.iter_mut().zip(&p.strong) {
            for (o, &v) in ro.iter_mut().zip(rp) {
                *o += (v - *o) / n;
            }
        }
        for (o, &v) in out.weak.iter_mut().zip(&p.weak) {
            *o += (v - *o) / n;
        }
    }
    Ok(out)
}

/// `pl[t][c] = 1` iff `strong[t][c] > frame_threshold`.
pub fn label_in_domain(clip_id: &str, p: &ClipPrediction, cfg: &PseudoConfig) -> PseudoLabelGrid {
    PseudoLabelGrid {
        clip_id: clip_id.to_string(),
        labels: p
            .strong
            .iter()
            .map(|r| r.iter().map(|&v| (v > cfg.frame_threshold) as u8).collect())
            .collect(),
        source: PseudoSource::InDomain,
    }
}

/// `pl[t][c] = 1` iff `strong[t][c] > frame_threshold`, `weak[c] > clip_threshold`
/// and the clip's given weak label for `c` is set.
pub fn label_external(clip_id: &str, p: &ClipPrediction, weak_label: &[bool], cfg: &PseudoConfig) -> Result<PseudoLabelGrid> {
    if weak_label.len() != p.classes() {
        return Err(Error::dim(
            "class",
            format!("weak label has {} classes, prediction {}", weak_label.len(), p.classes()),
        ));
    }
    let gate: Vec<bool> = p
        .weak
        .iter()
        .zip(weak_label)
        .map(|(&w, &l)| w > cfg.clip_threshold && l)
        .collect();
    Ok(PseudoLabelGrid {
        clip_id: clip_id.to_string(),
        labels: p
            .strong
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&gate)
                    .map(|(&v, &g)| (g && v > cfg.frame_threshold) as u8)
                    .collect()
            })
            .collect(),
        source: PseudoSource::External,
    })
}

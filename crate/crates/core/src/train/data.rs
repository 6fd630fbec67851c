use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{self, CorpusStats};
use crate::embeddings::{self, AlignMethod, EmbeddingSource};
use crate::error::{Error, Result};
use crate::eval::EventAnnotation;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Strong,
    Weak,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// `[frames, classes]` frame targets in [0, 1].
    Strong(Tensor),
    /// Clip-level targets in [0, 1].
    Weak(Vec<f64>),
    Unlabeled,
}

impl Target {
    pub fn kind(&self) -> LabelKind {
        match self {
            Target::Strong(_) => LabelKind::Strong,
            Target::Weak(_) => LabelKind::Weak,
            Target::Unlabeled => LabelKind::Unlabeled,
        }
    }
}

/// One training clip: normalized features, optional aligned embedding and
/// its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub clip_id: String,
    /// `[n_frames, n_mels]`
    pub features: Tensor,
    /// `[output_frames, embedding_dim]`
    pub embedding: Option<Tensor>,
    pub target: Target,
}

/// Frame `t` covers `[t·frame_seconds, (t+1)·frame_seconds)`; an event sets
/// frames `round(onset/fs) .. round(offset/fs)`, halves rounding up even when
/// the division lands a hair below them.
pub fn strong_target(events: &[&EventAnnotation], classes: &[String], frames: usize, frame_seconds: f64) -> Result<Tensor> {
    let c = classes.len();
    let mut t = Tensor::zeros(&[frames, c]);
    for e in events {
        let ci = classes
            .iter()
            .position(|k| *k == e.label)
            .ok_or_else(|| Error::Input(format!("label {:?} of {} is not a model class", e.label, e.clip_id)))?;
        let idx = |x: f64| ((x / frame_seconds + 1e-9).round().max(0.0) as usize).min(frames);
        let (s, f) = (idx(e.onset), idx(e.offset));
        for ti in s..f {
            t.data_mut()[ti * c + ci] = 1.0;
        }
    }
    Ok(t)
}

pub fn weak_target(labels: &[String], classes: &[String]) -> Result<Vec<f64>> {
    let mut t = vec![0.0; classes.len()];
    for l in labels {
        let ci = classes
            .iter()
            .position(|k| k == l)
            .ok_or_else(|| Error::Input(format!("label {l:?} is not a model class")))?;
        t[ci] = 1.0;
    }
    Ok(t)
}

/// Where cached features and embeddings come from.
#[derive(Clone, Debug)]
pub struct ExampleSource<'a> {
    pub feature_dir: &'a Path,
    pub stats: &'a CorpusStats,
    /// `None` for models without a fusion block.
    pub embeddings: Option<&'a EmbeddingSource>,
    pub embedding_dim: usize,
    pub output_frames: usize,
    pub align: AlignMethod,
}

impl ExampleSource<'_> {
    pub fn load(&self, clip_id: &str, target: Target) -> Result<Example> {
        let raw = dsp::read_features(&dsp::feature_path(self.feature_dir, clip_id))?;
        let features = dsp::normalize(&raw, self.stats)?;
        let embedding = self
            .embeddings
            .map(|src| {
                let e = embeddings::provide(clip_id, src, self.embedding_dim)?;
                embeddings::align(&e, self.align, self.output_frames)
            })
            .transpose()?;
        Ok(Example {
            clip_id: clip_id.to_string(),
            features,
            embedding,
            target,
        })
    }
}

/// Labeled clip streams for one stage plus a validation set with its
/// reference events.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub strong: Vec<Example>,
    pub weak: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub validation: Vec<Example>,
    pub validation_events: Vec<EventAnnotation>,
}

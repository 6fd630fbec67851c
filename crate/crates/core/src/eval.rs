//! Frame-probability decoding into timed events and collar-based
//! event-level F1 scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLIP_SECONDS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub clip_id: String,
    pub label: String,
    pub onset: f64,
    pub offset: f64,
}

impl EventAnnotation {
    pub fn new(clip_id: impl Into<String>, label: impl Into<String>, onset: f64, offset: f64) -> Self {
        Self {
            clip_id: clip_id.into(),
            label: label.into(),
            onset,
            offset,
        }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub threshold: f64,
    /// Odd median window in frames; 1 disables smoothing.
    pub median_window: usize,
    pub frame_seconds: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_window: 7,
            frame_seconds: 0.04,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_window.is_multiple_of(2) {
            return Err(Error::Config(format!("median window must be odd, got {}", self.median_window)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        if !(self.frame_seconds > 0.0) {
            return Err(Error::Config("frame_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// One pass of a binary median filter. Windows are truncated at the edges
/// and a frame is set only on a strict majority of ones.
pub fn median_filter(x: &[bool], window: usize) -> Vec<bool> {
    let h = window / 2;
    let n = x.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v as usize;
    }
    (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(h), (i + h + 1).min(n));
            2 * (prefix[hi] - prefix[lo]) > hi - lo
        })
        .collect()
}

/// Repeat [`median_filter`] until the sequence stops changing (its root).
/// A single pass is not idempotent, e.g. on alternating sequences; the root
/// is, by construction.
pub fn median_root(x: &[bool], window: usize) -> Vec<bool> {
    let mut cur = x.to_vec();
    // Binary median filters reach their root within a handful of passes;
    // the cap only guards against pathological inputs.
    for _ in 0..=x.len() {
        let next = median_filter(&cur, window);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Maximal runs of set frames as `[start, end)` index pairs.
pub fn runs(x: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in x.iter().enumerate() {
        match (v, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, x.len()));
    }
    out
}

/// Decode a `[frames][class]` probability grid into events.
pub fn decode(clip_id: &str, strong: &[Vec<f64>], classes: &[String], cfg: &DecodeConfig) -> Result<Vec<EventAnnotation>> {
    if strong.iter().any(|r| r.len() != classes.len()) {
        return Err(Error::dim("class", format!("grid rows do not have {} classes", classes.len())));
    }
    let mut events = Vec::new();
    for (c, label) in classes.iter().enumerate() {
        let active: Vec<bool> = strong.iter().map(|r| r[c] > cfg.threshold).collect();
        let smooth = median_root(&active, cfg.median_window);
        for (s, e) in runs(&smooth) {
            events.push(EventAnnotation::new(
                clip_id,
                label.clone(),
                s as f64 * cfg.frame_seconds,
                e as f64 * cfg.frame_seconds,
            ));
        }
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.label.cmp(&b.label)));
    Ok(events)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// One-to-one, references in onset order each take the first unmatched
    /// estimate (in onset order) within collars.
    #[default]
    Greedy,
    /// Maximum-cardinality bipartite matching.
    Bipartite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub onset_collar: f64,
    pub offset_collar: f64,
    /// Offset collar is `max(offset_collar, offset_ratio · ref duration)`.
    pub offset_ratio: f64,
    pub matching: Matching,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            onset_collar: 0.2,
            offset_collar: 0.2,
            offset_ratio: 0.2,
            matching: Matching::Greedy,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScore {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: BTreeMap<String, ClassScore>,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

impl F1Report {
    pub fn table(&self) -> String {
        let w = self.per_class.keys().map(|k| k.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>5} {:>5} {:>5}  {:>9} {:>9} {:>9}", "class", "tp", "fp", "fn", "precision", "recall", "f1");
        for (k, c) in &self.per_class {
            let _ = writeln!(
                s,
                "{k:<w$}  {:>5} {:>5} {:>5}  {:>9.4} {:>9.4} {:>9.4}",
                c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1
            );
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>5} {:>5} {:>5}  {:>9.4} {:>9.4} {:>9.4}",
            "macro", "", "", "", self.macro_precision, self.macro_recall, self.macro_f1
        );
        s
    }
}

fn check_event(e: &EventAnnotation) -> Result<()> {
    if !(e.onset.is_finite() && e.offset.is_finite()) || e.offset <= e.onset {
        return Err(Error::Input(format!(
            "malformed event {} {} [{}, {}]",
            e.clip_id, e.label, e.onset, e.offset
        )));
    }
    Ok(())
}

fn hit(r: &EventAnnotation, e: &EventAnnotation, cfg: &MetricConfig) -> bool {
    let off_collar = cfg.offset_collar.max(cfg.offset_ratio * r.duration());
    // A tiny tolerance keeps boundary cases like 0.2 == 0.2 from failing on
    // binary rounding of the decoded times.
    const TOL: f64 = 1e-9;
    (e.onset - r.onset).abs() <= cfg.onset_collar + TOL && (e.offset - r.offset).abs() <= off_collar + TOL
}

fn count_matches(refs: &[&EventAnnotation], ests: &[&EventAnnotation], cfg: &MetricConfig) -> usize {
    match cfg.matching {
        Matching::Greedy => {
            let mut used = vec![false; ests.len()];
            let mut tp = 0;
            for r in refs {
                if let Some(j) = (0..ests.len()).find(|&j| !used[j] && hit(r, ests[j], cfg)) {
                    used[j] = true;
                    tp += 1;
                }
            }
            tp
        }
        Matching::Bipartite => {
            let adj: Vec<Vec<usize>> = refs
                .iter()
                .map(|r| (0..ests.len()).filter(|&j| hit(r, ests[j], cfg)).collect())
                .collect();
            let mut owner: Vec<Option<usize>> = vec![None; ests.len()];
            fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
                for &j in &adj[i] {
                    if seen[j] {
                        continue;
                    }
                    seen[j] = true;
                    if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                        owner[j] = Some(i);
                        return true;
                    }
                }
                false
            }
            (0..refs.len())
                .filter(|&i| augment(i, &adj, &mut vec![false; ests.len()], &mut owner))
                .count()
        }
    }
}

/// Event-based precision, recall and F1, macro-averaged over the classes
/// that occur in either list. Two empty lists score a perfect 1.0.
pub fn event_f1(reference: &[EventAnnotation], estimate: &[EventAnnotation], cfg: &MetricConfig) -> Result<F1Report> {
    for e in reference.iter().chain(estimate) {
        check_event(e)?;
    }
    let classes: BTreeSet<&str> = reference.iter().chain(estimate).map(|e| e.label.as_str()).collect();
    let mut per_class = BTreeMap::new();
    for class in &classes {
        let mut groups: BTreeMap<&str, (Vec<&EventAnnotation>, Vec<&EventAnnotation>)> = BTreeMap::new();
        for e in reference.iter().filter(|e| e.label == *class) {
            groups.entry(&e.clip_id).or_default().0.push(e);
        }
        for e in estimate.iter().filter(|e| e.label == *class) {
            groups.entry(&e.clip_id).or_default().1.push(e);
        }
        let (mut tp, mut n_ref, mut n_est) = (0, 0, 0);
        for (_, (mut refs, mut ests)) in groups {
            refs.sort_by(|a, b| a.onset.total_cmp(&b.onset));
            ests.sort_by(|a, b| a.onset.total_cmp(&b.onset));
            tp += count_matches(&refs, &ests, cfg);
            n_ref += refs.len();
            n_est += ests.len();
        }
        per_class.insert(class.to_string(), ClassScore::from_counts(tp, n_est - tp, n_ref - tp));
    }
    let n = per_class.len();
    let avg = |f: fn(&ClassScore) -> f64| {
        if n == 0 {
            1.0
        } else {
            per_class.values().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(F1Report {
        macro_f1: avg(|c| c.f1),
        macro_precision: avg(|c| c.precision),
        macro_recall: avg(|c| c.recall),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_is_not_idempotent_on_alternation() {
        let x: Vec<bool> = (0..12).map(|i| i % 2 == 1).collect();
        let once = median_filter(&x, 3);
        assert_ne!(median_filter(&once, 3), once);
        let root = median_root(&x, 3);
        assert_eq!(median_filter(&root, 3), root);
    }

    #[test]
    fn runs_cover_edges() {
        assert_eq!(runs(&[true, true, false, true]), vec![(0, 2), (3, 4)]);
        assert!(runs(&[]).is_empty());
    }
}

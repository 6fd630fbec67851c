//! TSV manifests, prediction and pseudo-label files, and the synthetic
//! soundscape generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::eval::{EventAnnotation, CLIP_SECONDS};
use crate::model::ClipPrediction;
use crate::pseudolabel::{PseudoConfig, PseudoLabelGrid};

pub const DESED_CLASSES: [&str; 10] = [
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
];

pub const STRONG_HEADER: &str = "filename\tonset\toffset\tevent_label";
pub const WEAK_HEADER: &str = "filename\tevent_labels";
pub const UNLABELED_HEADER: &str = "filename";

pub fn desed_classes() -> Vec<String> {
    DESED_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// File name without its extension, used to key per-clip caches.
pub fn clip_stem(filename: &str) -> &str {
    Path::new(filename)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(filename)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Strong,
    Weak,
    Unlabeled,
}

/// Strong annotations. `clips` lists every clip in file order, including
/// clips declared with no events (a line whose other fields are empty).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StrongManifest {
    pub clips: Vec<String>,
    pub events: Vec<EventAnnotation>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeakManifest {
    pub records: Vec<(String, Vec<String>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetManifest {
    Strong(StrongManifest),
    Weak(WeakManifest),
    Unlabeled(Vec<String>),
}

impl DatasetManifest {
    pub fn kind(&self) -> ManifestKind {
        match self {
            DatasetManifest::Strong(_) => ManifestKind::Strong,
            DatasetManifest::Weak(_) => ManifestKind::Weak,
            DatasetManifest::Unlabeled(_) => ManifestKind::Unlabeled,
        }
    }

    pub fn clips(&self) -> Vec<String> {
        match self {
            DatasetManifest::Strong(m) => m.clips.clone(),
            DatasetManifest::Weak(m) => m.records.iter().map(|r| r.0.clone()).collect(),
            DatasetManifest::Unlabeled(c) => c.clone(),
        }
    }
}

fn read_lines(path: &Path, header: &str) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == header => {}
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!(
                    "expected header {header:?}, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    Ok(lines
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

fn parse_err(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn check_label(path: &Path, line: usize, label: &str, vocab: &[String]) -> Result<()> {
    if vocab.iter().any(|v| v == label) {
        Ok(())
    } else {
        Err(parse_err(path, line, format!("unknown class {label:?}")))
    }
}

pub fn parse_strong(path: &Path, vocab: &[String]) -> Result<StrongManifest> {
    let mut m = StrongManifest::default();
    let mut seen = BTreeSet::new();
    for (ln, line) in read_lines(path, STRONG_HEADER)? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 || f[0].is_empty() {
            return Err(parse_err(path, ln, format!("expected 4 tab-separated fields, got {}", f.len())));
        }
        if seen.insert(f[0].to_string()) {
            m.clips.push(f[0].to_string());
        }
        if f[1].is_empty() && f[2].is_empty() && f[3].is_empty() {
            continue;
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, ln, format!("malformed {what} {s:?}")))
        };
        let (onset, offset) = (num(f[1], "onset")?, num(f[2], "offset")?);
        if !(0.0 <= onset && onset < offset && offset <= CLIP_SECONDS) {
            return Err(parse_err(path, ln, format!("event [{onset}, {offset}] outside the clip")));
        }
        check_label(path, ln, f[3], vocab)?;
        m.events.push(EventAnnotation::new(f[0], f[3], onset, offset));
    }
    Ok(m)
}

pub fn parse_weak(path: &Path, vocab: &[String]) -> Result<WeakManifest> {
    let mut m = WeakManifest::default();
    for (ln, line) in read_lines(path, WEAK_HEADER)? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 || f[0].is_empty() {
            return Err(parse_err(path, ln, format!("expected 2 tab-separated fields, got {}", f.len())));
        }
        let mut labels = Vec::new();
        for l in f[1].split(',').map(str::trim).filter(|l| !l.is_empty()) {
            check_label(path, ln, l, vocab)?;
            if !labels.iter().any(|x| x == l) {
                labels.push(l.to_string());
            }
        }
        m.records.push((f[0].to_string(), labels));
    }
    Ok(m)
}

pub fn parse_unlabeled(path: &Path) -> Result<Vec<String>> {
    read_lines(path, UNLABELED_HEADER)?
        .into_iter()
        .map(|(ln, line)| {
            let name = line.split('\t').next().unwrap_or("").trim();
            if name.is_empty() {
                Err(parse_err(path, ln, "empty filename".into()))
            } else {
                Ok(name.to_string())
            }
        })
        .collect()
}

/// Manifest kind from the header line.
pub fn detect_kind(path: &Path) -> Result<ManifestKind> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("").trim_end_matches('\r');
    match header {
        STRONG_HEADER => Ok(ManifestKind::Strong),
        WEAK_HEADER => Ok(ManifestKind::Weak),
        UNLABELED_HEADER => Ok(ManifestKind::Unlabeled),
        other => Err(parse_err(path, 1, format!("unrecognized manifest header {other:?}"))),
    }
}

/// Parse a manifest whose kind is read from its header.
pub fn parse_any(path: &Path, vocab: &[String]) -> Result<DatasetManifest> {
    parse_manifest(path, detect_kind(path)?, vocab)
}

pub fn parse_manifest(path: &Path, kind: ManifestKind, vocab: &[String]) -> Result<DatasetManifest> {
    Ok(match kind {
        ManifestKind::Strong => DatasetManifest::Strong(parse_strong(path, vocab)?),
        ManifestKind::Weak => DatasetManifest::Weak(parse_weak(path, vocab)?),
        ManifestKind::Unlabeled => DatasetManifest::Unlabeled(parse_unlabeled(path)?),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Canonical strong TSV: seconds with three decimals, sorted by
/// `(clip, onset, offset, label)`. Clips in `empty_clips` that have no
/// events get a declaration line.
pub fn write_strong(path: &Path, events: &[EventAnnotation], empty_clips: &[String]) -> Result<()> {
    let mut sorted: Vec<&EventAnnotation> = events.iter().collect();
    sorted.sort_by(|a, b| {
        a.clip_id
            .cmp(&b.clip_id)
            .then(a.onset.total_cmp(&b.onset))
            .then(a.offset.total_cmp(&b.offset))
            .then(a.label.cmp(&b.label))
    });
    let with_events: BTreeSet<&str> = events.iter().map(|e| e.clip_id.as_str()).collect();
    let mut lines: Vec<(String, String)> = sorted
        .iter()
        .map(|e| {
            (
                e.clip_id.clone(),
                format!("{}\t{:.3}\t{:.3}\t{}", e.clip_id, e.onset, e.offset, e.label),
            )
        })
        .collect();
    for c in empty_clips.iter().filter(|c| !with_events.contains(c.as_str())) {
        lines.push((c.clone(), format!("{c}\t\t\t")));
    }
    // Stable: keeps event order within a clip.
    lines.sort_by(|a, b| a.0.cmp(&b.0));
    let mut text = String::from(STRONG_HEADER);
    text.push('\n');
    for (_, l) in lines {
        text.push_str(&l);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Decoded predictions in the strong format.
pub fn write_predictions(path: &Path, events: &[EventAnnotation]) -> Result<()> {
    write_strong(path, events, &[])
}

pub fn write_weak(path: &Path, records: &[(String, Vec<String>)]) -> Result<()> {
    let mut text = String::from(WEAK_HEADER);
    text.push('\n');
    for (clip, labels) in records {
        text.push_str(&format!("{clip}\t{}\n", labels.join(",")));
    }
    write_text(path, &text)
}

pub fn write_unlabeled(path: &Path, clips: &[String]) -> Result<()> {
    let mut text = String::from(UNLABELED_HEADER);
    text.push('\n');
    for c in clips {
        text.push_str(c);
        text.push('\n');
    }
    write_text(path, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub clip_id: String,
    /// `[frames][class]`
    pub strong: Vec<Vec<f64>>,
    pub weak: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(clip_id: &str, p: ClipPrediction) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            strong: p.strong,
            weak: p.weak,
        }
    }

    pub fn prediction(&self) -> ClipPrediction {
        ClipPrediction {
            strong: self.strong.clone(),
            weak: self.weak.clone(),
        }
    }
}

/// Frame probabilities, one JSON object per line. Floats round-trip exactly.
pub fn write_prediction_jsonl(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_prediction_jsonl(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, i + 1, e.to_string())))
        .collect()
}

/// Provenance sidecar written next to a pseudo-label manifest.
pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.tsv");
    PathBuf::from(s)
}

/// Pseudo-labels as a strong TSV (every clip declared) plus a provenance
/// sidecar `filename, source, frame_threshold, clip_threshold`.
pub fn write_pseudolabels(
    path: &Path,
    grids: &[PseudoLabelGrid],
    classes: &[String],
    decode: &crate::eval::DecodeConfig,
    cfg: &PseudoConfig,
) -> Result<Vec<EventAnnotation>> {
    let mut events = Vec::new();
    for g in grids {
        events.extend(g.to_events(classes, decode)?);
    }
    let clips: Vec<String> = grids.iter().map(|g| g.clip_id.clone()).collect();
    write_strong(path, &events, &clips)?;
    let mut text = String::from("filename\tsource\tframe_threshold\tclip_threshold\n");
    for g in grids {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            g.clip_id,
            g.source.as_str(),
            cfg.frame_threshold,
            cfg.clip_threshold
        ));
    }
    write_text(&provenance_path(path), &text)?;
    Ok(events)
}

/// Per-clip label sets, in vocabulary order; `clips` fixes the output order
/// and includes clips without events.
pub fn weak_projection(clips: &[String], events: &[EventAnnotation], vocab: &[String]) -> Vec<(String, Vec<String>)> {
    let mut present: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in events {
        present.entry(&e.clip_id).or_default().insert(&e.label);
    }
    clips
        .iter()
        .map(|c| {
            let set = present.get(c.as_str());
            let labels = vocab
                .iter()
                .filter(|v| set.is_some_and(|s| s.contains(v.as_str())))
                .cloned()
                .collect();
            (c.clone(), labels)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthSource {
    /// Sine burst with a frequency drawn per event.
    Tone { freq_lo: f64, freq_hi: f64 },
    /// Band-limited noise built from random-phase partials.
    Noise { band_lo: f64, band_hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    pub source: SynthSource,
    /// Peak amplitude range.
    pub amplitude: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub clip_count: usize,
    pub classes: Vec<SynthClass>,
    pub events_per_clip: (usize, usize),
    pub event_seconds: (f64, f64),
    /// Minimum silence between two events of the same class.
    pub same_class_gap: f64,
    pub max_overlap: usize,
    pub background_rms: f64,
    /// Fractions of clips in the strong and weak splits; the rest is unlabeled.
    pub strong_fraction: f64,
    pub weak_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clip_count: 20,
            classes: vec![
                SynthClass {
                    name: "Alarm_bell_ringing".into(),
                    source: SynthSource::Tone {
                        freq_lo: 1800.0,
                        freq_hi: 2200.0,
                    },
                    amplitude: (0.15, 0.3),
                },
                SynthClass {
                    name: "Blender".into(),
                    source: SynthSource::Noise {
                        band_lo: 3500.0,
                        band_hi: 6000.0,
                    },
                    amplitude: (0.15, 0.3),
                },
                SynthClass {
                    name: "Dog".into(),
                    source: SynthSource::Tone {
                        freq_lo: 300.0,
                        freq_hi: 450.0,
                    },
                    amplitude: (0.15, 0.3),
                },
            ],
            events_per_clip: (1, 3),
            event_seconds: (0.5, 3.0),
            same_class_gap: 0.5,
            max_overlap: 5,
            background_rms: 0.01,
            strong_fraction: 0.5,
            weak_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes.is_empty() && self.events_per_clip.1 > 0 {
            return bad("events requested but no classes defined".into());
        }
        if self.events_per_clip.0 > self.events_per_clip.1 {
            return bad("events_per_clip range is reversed".into());
        }
        let (lo, hi) = self.event_seconds;
        if !(lo >= 0.25 && lo <= hi && hi < CLIP_SECONDS) {
            return bad(format!("event durations must lie in [0.25, 10) s, got {:?}", self.event_seconds));
        }
        if self.max_overlap == 0 || self.max_overlap > 5 {
            return bad("max_overlap must be between 1 and 5".into());
        }
        if !(0.0..=1.0).contains(&self.strong_fraction)
            || !(0.0..=1.0).contains(&self.weak_fraction)
            || self.strong_fraction + self.weak_fraction > 1.0 + 1e-12
        {
            return bad("split fractions must be in [0, 1] and sum to at most 1".into());
        }
        for c in &self.classes {
            let nyq = SAMPLE_RATE as f64 / 2.0;
            let (a, b) = match c.source {
                SynthSource::Tone { freq_lo, freq_hi } => (freq_lo, freq_hi),
                SynthSource::Noise { band_lo, band_hi } => (band_lo, band_hi),
            };
            if !(0.0 < a && a <= b && b < nyq) {
                return bad(format!("class {} has frequency range [{a}, {b}]", c.name));
            }
            if !(0.0 < c.amplitude.0 && c.amplitude.0 <= c.amplitude.1 && c.amplitude.1 <= 1.0) {
                return bad(format!("class {} has amplitude range {:?}", c.name, c.amplitude));
            }
        }
        Ok(())
    }
}

/// What [`synth_generate`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub clips: Vec<String>,
    pub events: Vec<EventAnnotation>,
    pub strong_clips: Vec<String>,
    pub weak_clips: Vec<String>,
    pub unlabeled_clips: Vec<String>,
}

pub const SYNTH_EDGE_SECONDS: f64 = 0.01;

fn ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn sample_events<R: Rng>(spec: &SynthSpec, clip: &str, rng: &mut R) -> Vec<(usize, EventAnnotation)> {
    let n = rng.gen_range(spec.events_per_clip.0..=spec.events_per_clip.1);
    let mut out: Vec<(usize, EventAnnotation)> = Vec::new();
    for _ in 0..n {
        for _attempt in 0..100 {
            let class = rng.gen_range(0..spec.classes.len());
            let dur = ms(rng.gen_range(spec.event_seconds.0..=spec.event_seconds.1));
            let onset = ms(rng.gen_range(0.0..=CLIP_SECONDS - dur));
            let offset = ms(onset + dur);
            let clash = out.iter().any(|(c, e)| {
                *c == class && onset < e.offset + spec.same_class_gap && e.onset < offset + spec.same_class_gap
            });
            // Overlap depth is maximal at some event onset.
            let depth = |t: f64, extra: bool| {
                out.iter().filter(|(_, e)| e.onset <= t && t < e.offset).count()
                    + (extra && onset <= t && t < offset) as usize
            };
            let too_deep = std::iter::once(onset)
                .chain(out.iter().map(|(_, e)| e.onset))
                .any(|t| depth(t, true) > spec.max_overlap);
            if !clash && !too_deep {
                out.push((class, EventAnnotation::new(clip, &spec.classes[class].name, onset, offset)));
                break;
            }
        }
    }
    out.sort_by(|a, b| a.1.onset.total_cmp(&b.1.onset));
    out
}

fn render_event<R: Rng>(class: &SynthClass, e: &EventAnnotation, buf: &mut [f64], rng: &mut R) {
    let sr = SAMPLE_RATE as f64;
    let start = (e.onset * sr).round() as usize;
    let end = ((e.offset * sr).round() as usize).min(buf.len());
    let len = end - start;
    let edge = ((SYNTH_EDGE_SECONDS * sr) as usize).min(len / 2);
    let amp = rng.gen_range(class.amplitude.0..=class.amplitude.1);
    let partials: Vec<(f64, f64, f64)> = match class.source {
        SynthSource::Tone { freq_lo, freq_hi } => {
            vec![(rng.gen_range(freq_lo..=freq_hi), rng.gen_range(0.0..std::f64::consts::TAU), amp)]
        }
        SynthSource::Noise { band_lo, band_hi } => {
            const K: usize = 24;
            (0..K)
                .map(|_| {
                    (
                        rng.gen_range(band_lo..=band_hi),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        amp / (K as f64).sqrt(),
                    )
                })
                .collect()
        }
    };
    for i in 0..len {
        let env = if i < edge {
            0.5 - 0.5 * (std::f64::consts::PI * i as f64 / edge as f64).cos()
        } else if i >= len - edge {
            0.5 - 0.5 * (std::f64::consts::PI * (len - 1 - i) as f64 / edge as f64).cos()
        } else {
            1.0
        };
        let t = i as f64 / sr;
        let v: f64 = partials
            .iter()
            .map(|&(f, ph, a)| a * (std::f64::consts::TAU * f * t + ph).sin())
            .sum();
        buf[start + i] += env * v;
    }
}

/// Render one clip's audio and events; a pure function of `(spec, index)`.
pub fn synth_clip(spec: &SynthSpec, index: usize) -> (String, Waveform, Vec<EventAnnotation>) {
    let clip = format!("synth_{index:04}.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let events = sample_events(spec, &clip, &mut rng);
    let noise = Normal::new(0.0, spec.background_rms.max(0.0)).expect("finite std");
    let mut buf: Vec<f64> = (0..CLIP_SAMPLES).map(|_| noise.sample(&mut rng)).collect();
    for (class, e) in &events {
        render_event(&spec.classes[*class], e, &mut buf, &mut rng);
    }
    (
        clip,
        Waveform {
            samples: buf,
            sample_rate: SAMPLE_RATE,
        },
        events.into_iter().map(|(_, e)| e).collect(),
    )
}

/// Write `audio/*.wav`, `ground_truth.tsv` (all clips), `strong.tsv`,
/// `weak.tsv`, `unlabeled.tsv` and `synth_spec.json` under `out_dir`.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let audio = out_dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let mut clips = Vec::new();
    let mut events = Vec::new();
    for i in 0..spec.clip_count {
        let (clip, wave, ev) = synth_clip(spec, i);
        dsp::write_wav(&audio.join(&clip), &wave)?;
        clips.push(clip);
        events.extend(ev);
    }
    let n = spec.clip_count;
    let n_strong = ((spec.strong_fraction * n as f64).round() as usize).min(n);
    let n_weak = ((spec.weak_fraction * n as f64).round() as usize).min(n - n_strong);
    let strong_clips = clips[..n_strong].to_vec();
    let weak_clips = clips[n_strong..n_strong + n_weak].to_vec();
    let unlabeled_clips = clips[n_strong + n_weak..].to_vec();
    let vocab = spec.class_names();
    let in_set = |set: &[String]| -> Vec<EventAnnotation> {
        events.iter().filter(|e| set.contains(&e.clip_id)).cloned().collect()
    };
    write_strong(&out_dir.join("ground_truth.tsv"), &events, &clips)?;
    write_strong(&out_dir.join("strong.tsv"), &in_set(&strong_clips), &strong_clips)?;
    write_weak(
        &out_dir.join("weak.tsv"),
        &weak_projection(&weak_clips, &in_set(&weak_clips), &vocab),
    )?;
    write_unlabeled(&out_dir.join("unlabeled.tsv"), &unlabeled_clips)?;
    write_text(&out_dir.join("synth_spec.json"), &serde_json::to_string_pretty(spec)?)?;
    Ok(SynthOutput {
        clips,
        events,
        strong_clips,
        weak_clips,
        unlabeled_clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_drops_extension() {
        assert_eq!(clip_stem("a1.wav"), "a1");
        assert_eq!(clip_stem("noext"), "noext");
    }

    #[test]
    fn same_class_events_never_overlap() {
        let spec = SynthSpec {
            events_per_clip: (4, 6),
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let ev = sample_events(&spec, "c", &mut rng);
            for (i, a) in ev.iter().enumerate() {
                for b in &ev[i + 1..] {
                    if a.0 == b.0 {
                        assert!(a.1.offset + spec.same_class_gap <= b.1.onset || b.1.offset + spec.same_class_gap <= a.1.onset);
                    }
                }
            }
        }
    }
}

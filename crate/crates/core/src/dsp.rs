//! Log-mel frontend: WAV decoding, rational-ratio resampling, STFT, mel
//! filterbank, and corpus-level normalization.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_file;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const SOURCE_RATE: u32 = 44_100;
pub const CLIP_SAMPLES: usize = 160_000;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 160;
pub const N_MELS: usize = 128;
pub const FRAMES: usize = CLIP_SAMPLES / HOP + 1;
pub const LOG_EPS: f64 = 1e-10;
pub const FEATURE_MAGIC: &[u8; 4] = b"LMEL";

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Read a PCM16 or float32 WAV; multi-channel input is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Format {
                context: path.display().to_string(),
                message: format!("unsupported WAV encoding {fmt:?} {bits}-bit (need PCM16 or float32)"),
            })
        }
    };
    let samples: Vec<f64> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            context: path.display().to_string(),
            message: "non-finite samples".into(),
        });
    }
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Write mono 16-bit PCM, clipping to [−1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Windowed-sinc polyphase resampler for a fixed rational ratio `up/down`.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    half: isize,
    /// `phases[φ][j]` weights input sample `⌊mM/L⌋ − half + 1 + j`.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    const ZERO_CROSSINGS: f64 = 16.0;
    const ROLLOFF: f64 = 0.95;

    pub fn new(from: u32, to: u32) -> Self {
        let g = gcd(from as usize, to as usize);
        let (up, down) = (to as usize / g, from as usize / g);
        // Cutoff as a fraction of the input Nyquist.
        let fc = (up as f64 / down as f64).min(1.0) * Self::ROLLOFF;
        let reach = Self::ZERO_CROSSINGS / fc;
        let half = reach.ceil() as isize;
        let phases = (0..up)
            .map(|phi| {
                let frac = phi as f64 / up as f64;
                let mut taps: Vec<f64> = (-half + 1..=half)
                    .map(|j| {
                        let x = j as f64 - frac;
                        if x.abs() >= reach {
                            return 0.0;
                        }
                        let u = fc * x;
                        let sinc = if u == 0.0 { 1.0 } else { (PI * u).sin() / (PI * u) };
                        // Blackman window over [−reach, reach].
                        let r = (x + reach) / (2.0 * reach);
                        let w = 0.42 - 0.5 * (2.0 * PI * r).cos() + 0.08 * (4.0 * PI * r).cos();
                        fc * sinc * w
                    })
                    .collect();
                let s: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= s);
                taps
            })
            .collect();
        Self { up, down, half, phases }
    }

    pub fn output_len(&self, n: usize) -> usize {
        ((n * self.up) as f64 / self.down as f64).round() as usize
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        (0..self.output_len(x.len()))
            .map(|m| {
                let pos = m * self.down;
                let base = (pos / self.up) as isize - self.half + 1;
                let taps = &self.phases[pos % self.up];
                let mut acc = 0.0;
                for (j, &t) in taps.iter().enumerate() {
                    let i = base + j as isize;
                    if i >= 0 && i < n {
                        acc += t * x[i as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Bring a waveform to 16 kHz. Only 44.1 kHz and 16 kHz sources are accepted.
pub fn resample(w: &Waveform) -> Result<Waveform> {
    match w.sample_rate {
        SAMPLE_RATE => Ok(w.clone()),
        SOURCE_RATE => Ok(Waveform {
            samples: Resampler::new(SOURCE_RATE, SAMPLE_RATE).process(&w.samples),
            sample_rate: SAMPLE_RATE,
        }),
        r => Err(Error::Config(format!(
            "unsupported sample rate {r} Hz (expected {SOURCE_RATE} or {SAMPLE_RATE})"
        ))),
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters with unit peak, stored sparsely.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `(first FFT bin, weights)` per band.
    rows: Vec<(usize, Vec<f64>)>,
    centers: Vec<f64>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let rows = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match weights.first() {
                    Some(&(start, _)) => (start, weights.iter().map(|&(_, w)| w).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        Self {
            rows,
            centers: edges[1..=n_mels].to_vec(),
            n_bins,
        }
    }

    pub fn standard() -> Self {
        Self::new(N_MELS, N_FFT, SAMPLE_RATE, 0.0, SAMPLE_RATE as f64 / 2.0)
    }

    pub fn bands(&self) -> usize {
        self.rows.len()
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.centers[band]
    }

    /// Dense weight of `band` at FFT bin `k`.
    pub fn weight(&self, band: usize, k: usize) -> f64 {
        let (start, w) = &self.rows[band];
        if k < *start {
            0.0
        } else {
            w.get(k - start).copied().unwrap_or(0.0)
        }
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for ((start, w), o) in self.rows.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// STFT + mel + log feature extractor for 16 kHz, 10-second clips.
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            window: hann(N_FFT),
            bank: MelFilterbank::standard(),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// `[FRAMES, N_MELS]` unnormalized log-mel energies. Input shorter or
    /// longer than 10 s is zero-padded or truncated.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!("log-mel needs {SAMPLE_RATE} Hz audio, got {}", w.sample_rate)));
        }
        if w.samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        let mut clip = w.samples.clone();
        clip.resize(CLIP_SAMPLES, 0.0);
        let padded = reflect_pad(&clip, N_FFT / 2);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0; N_FFT / 2 + 1];
        let mut out = vec![0.0; FRAMES * N_MELS];
        for (t, row) in out.chunks_exact_mut(N_MELS).enumerate() {
            let frame = &padded[t * HOP..t * HOP + N_FFT];
            for ((b, s), w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            self.bank.apply(&power, row);
            row.iter_mut().for_each(|v| *v = (*v + LOG_EPS).ln());
        }
        Tensor::new(vec![FRAMES, N_MELS], out)
    }
}

/// Mirror padding without repeating the edge sample.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let idx = |i: isize| -> usize {
        let period = 2 * (n - 1).max(1);
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - j;
        }
        j as usize
    };
    (-(pad as isize)..n + pad as isize).map(|i| x[idx(i)]).collect()
}

/// Read, resample and extract one clip's unnormalized feature.
pub fn featurize_file(path: &Path, extractor: &LogMel) -> Result<Tensor> {
    let w = read_wav(path)?;
    extractor.compute(&resample(&w)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    Global,
    PerBand,
}

/// Mean and (population) standard deviation of training-set feature cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: f64,
    pub std: f64,
    pub clip_count: usize,
    /// Per-band `(mean, std)` when normalizing band by band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_band: Option<Vec<(f64, f64)>>,
}

impl CorpusStats {
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            clip_count: 0,
            per_band: None,
        }
    }
}

/// Streaming count/mean/M2 triple, mergeable across workers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        let n = (self.count + o.count) as f64;
        let d = o.mean - self.mean;
        self.mean += d * o.count as f64 / n;
        self.m2 += o.m2 + d * d * self.count as f64 * o.count as f64 / n;
        self.count += o.count;
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }
}

/// Accumulates corpus statistics clip by clip.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    all: Moments,
    bands: Vec<Moments>,
    clips: usize,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one `[frames, bands]` feature.
    pub fn add(&mut self, f: &Tensor) -> Result<()> {
        if f.rank() != 2 {
            return Err(Error::dim("input", format!("feature must be [frames, bands], got {:?}", f.shape())));
        }
        let nb = f.dim(1);
        if self.bands.is_empty() {
            self.bands = vec![Moments::default(); nb];
        } else if self.bands.len() != nb {
            return Err(Error::dim("frequency", format!("{nb} bands, previous clips had {}", self.bands.len())));
        }
        // Per-clip moments first, merged in: keeps long corpora well conditioned.
        let mut clip = Moments::default();
        for row in f.data().chunks_exact(nb) {
            for (b, &v) in self.bands.iter_mut().zip(row) {
                b.push(v);
                clip.push(v);
            }
        }
        self.all.merge(&clip);
        self.clips += 1;
        Ok(())
    }

    pub fn merge(&mut self, o: &StatsAccumulator) -> Result<()> {
        if self.bands.is_empty() {
            self.bands = o.bands.clone();
        } else if !o.bands.is_empty() {
            if o.bands.len() != self.bands.len() {
                return Err(Error::dim("frequency", "cannot merge stats with different band counts"));
            }
            self.bands.iter_mut().zip(&o.bands).for_each(|(a, b)| a.merge(b));
        }
        self.all.merge(&o.all);
        self.clips += o.clips;
        Ok(())
    }

    pub fn finish(&self, scope: NormScope) -> Result<CorpusStats> {
        if self.clips == 0 {
            return Err(Error::DegenerateCorpus("no training clips to compute statistics from".into()));
        }
        let std = self.all.std();
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::DegenerateCorpus(format!("feature std is {std}")));
        }
        let per_band = match scope {
            NormScope::Global => None,
            NormScope::PerBand => {
                let v: Vec<(f64, f64)> = self.bands.iter().map(|b| (b.mean, b.std())).collect();
                if let Some(i) = v.iter().position(|b| b.1 <= 0.0) {
                    return Err(Error::DegenerateCorpus(format!("band {i} has zero variance")));
                }
                Some(v)
            }
        };
        Ok(CorpusStats {
            mean: self.all.mean,
            std,
            clip_count: self.clips,
            per_band,
        })
    }
}

/// `(x − mean) / std`, globally or band by band.
pub fn normalize(f: &Tensor, s: &CorpusStats) -> Result<Tensor> {
    if f.rank() != 2 {
        return Err(Error::dim("input", format!("feature must be [frames, bands], got {:?}", f.shape())));
    }
    match &s.per_band {
        None => {
            if s.std <= 0.0 {
                return Err(Error::DegenerateCorpus(format!("std is {}", s.std)));
            }
            Ok(f.map(|x| (x - s.mean) / s.std))
        }
        Some(bands) => {
            if bands.len() != f.dim(1) {
                return Err(Error::dim("frequency", format!("stats have {} bands, feature {}", bands.len(), f.dim(1))));
            }
            if bands.iter().any(|b| b.1 <= 0.0) {
                return Err(Error::DegenerateCorpus("zero band std".into()));
            }
            let mut out = f.clone();
            for row in out.data_mut().chunks_exact_mut(bands.len()) {
                for (v, (m, sd)) in row.iter_mut().zip(bands) {
                    *v = (*v - m) / sd;
                }
            }
            Ok(out)
        }
    }
}

/// Cache location of a clip's feature: `<dir>/<clip_id>.lmel`.
pub fn feature_path(dir: &Path, clip_id: &str) -> std::path::PathBuf {
    dir.join(format!("{clip_id}.lmel"))
}

pub fn write_features(path: &Path, f: &Tensor) -> Result<()> {
    matrix_file::write(FEATURE_MAGIC, path, f)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    matrix_file::read(FEATURE_MAGIC, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        assert_eq!(reflect_pad(&[1.0, 2.0, 3.0, 4.0], 2), vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn resampler_ratio_reduces() {
        let r = Resampler::new(44_100, 16_000);
        assert_eq!((r.up, r.down), (160, 441));
        assert_eq!(r.output_len(441_000), 160_000);
    }
}

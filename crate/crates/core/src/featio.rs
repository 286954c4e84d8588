//! Audio input, log-mel frame features and the `ULMF` feature file.
//!
//! `ULMF` layout (little-endian): magic `ULMF`, u32 version (1), u32 T,
//! u32 D, f32 frame rate, u32 tag length, UTF-8 tag, then `T·D` f32 values
//! in row-major order.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FEATURE_MAGIC: &[u8; 4] = b"ULMF";
pub const FEATURE_VERSION: u32 = 1;

/// Mono 16 kHz audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::WavFormat {
                field: "sample_rate",
                found: sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("audio contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 20.0,
            n_mels: 40,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn frame_rate(&self) -> f64 {
        1000.0 / self.hop_ms
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.hop_ms > 0.0) || self.hop_ms > self.window_ms {
            return bad("need 0 < hop_ms <= window_ms");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1");
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= SAMPLE_RATE as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= 8000");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }
}

/// `T × D` frame features with their frame rate and extractor tag.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f32>,
    pub frame_rate: f32,
    pub source_tag: String,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>, frame_rate: f32, source_tag: impl Into<String>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Dimension(format!("feature matrix must be non-empty, got {:?}", data.dim())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            data,
            frame_rate,
            source_tag: source_tag.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Reads a PCM 16-bit mono 16 kHz WAV file.
pub fn load_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavHeader(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavFormat {
            field: "channels",
            found: spec.channels as u32,
            expected: 1,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::WavFormat {
            field: "sample_rate",
            found: spec.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::WavFormat {
            field: "bits_per_sample",
            found: spec.bits_per_sample as u32,
            expected: 16,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::WavHeader(e.to_string()))?;
    AudioBuffer::new(samples, SAMPLE_RATE)
}

/// Writes `audio` as PCM 16-bit mono, clamping to the i16 range.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| Error::WavHeader(e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over `n_fft/2+1` bins, each summing to one
/// (filters that cover no bin stay zero).
pub fn mel_filterbank(cfg: &FeatureConfig, n_fft: usize) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let sr = SAMPLE_RATE as f64;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * sr / n_fft as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
        let area: f64 = fb.row(m).sum();
        if area > 0.0 {
            fb.row_mut(m).mapv_inplace(|w| w / area);
        }
    }
    fb
}

/// Log-mel energies with a Hann window and power spectrum.
///
/// Produces `floor((n - win) / hop) + 1` frames.
pub fn logmel(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let n = audio.samples.len();
    if n < win {
        return Err(Error::AudioTooShort { samples: n, window: win });
    }
    let frames = (n - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let fb = mel_filterbank(cfg, n_fft);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = ndarray::Array1::<f64>::zeros(n_fft / 2 + 1);
    let mut out = Array2::<f32>::zeros((frames, cfg.n_mels));
    for t in 0..frames {
        let start = t * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(audio.samples[start + i] as f64 * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let mel = fb.dot(&power);
        for (o, e) in out.row_mut(t).iter_mut().zip(mel.iter()) {
            *o = e.max(cfg.log_floor).ln() as f32;
        }
    }
    FeatureMatrix::new(out, cfg.frame_rate() as f32, format!("logmel-{}", cfg.n_mels))
}

pub fn feature_bytes(m: &FeatureMatrix) -> Vec<u8> {
    let tag = m.source_tag.as_bytes();
    let mut out = Vec::with_capacity(24 + tag.len() + 4 * m.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&m.frame_rate.to_le_bytes());
    out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    out.extend_from_slice(tag);
    for v in m.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, feature_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn parse_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let take = |o: usize, n: usize| bytes.get(o..o + n).ok_or(Error::Truncated);
    if take(0, 4)? != FEATURE_MAGIC {
        return Err(Error::BadMagic);
    }
    let u32_at = |o: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(o, 4)?.try_into().unwrap())) };
    let version = u32_at(4)?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let t = u32_at(8)? as usize;
    let d = u32_at(12)? as usize;
    let frame_rate = f32::from_le_bytes(take(16, 4)?.try_into().unwrap());
    let tag_len = u32_at(20)? as usize;
    let tag = std::str::from_utf8(take(24, tag_len)?)
        .map_err(|e| Error::Invalid(format!("tag is not UTF-8: {e}")))?
        .to_string();
    let payload = take(24 + tag_len, t * d * 4)?;
    let vals: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((t, d), vals).map_err(|e| Error::Invalid(e.to_string()))?;
    FeatureMatrix::new(data, frame_rate, tag)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes)
}

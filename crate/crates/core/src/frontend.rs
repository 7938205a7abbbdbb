//! Audio frontend: WAV decoding and dataset-normalized log-mel spectrograms.
//!
//! The frontend is fixed at 16 kHz input, 25 ms Hann windows, 10 ms hop,
//! and 80 mel bins spanning 50–8000 Hz. Framing is center-padded (reflect)
//! with the trailing frame dropped, so a clip always yields exactly
//! `floor(len / hop)` frames — 100 frames per second.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio in [-1, 1] at 16 kHz.
#[derive(Debug, Clone)]
pub struct PcmSignal {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl PcmSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("empty signal".into()));
        }
        if sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate { got: sample_rate, want: SAMPLE_RATE });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite sample amplitude".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// STFT/mel parameters. Defaults are the only in-scope configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f32,
    pub f_max: f32,
    pub log_floor: f32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            win_length: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 50.0,
            f_max: 8000.0,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_min <= 0.0 || self.f_min >= self.f_max {
            return Err(Error::Config("require 0 < f_min < f_max".into()));
        }
        if self.f_max > self.sample_rate as f32 / 2.0 {
            return Err(Error::Config("f_max above Nyquist".into()));
        }
        if self.n_fft < self.win_length {
            return Err(Error::Config("n_fft must be >= win_length".into()));
        }
        if self.n_mels == 0 || self.hop == 0 || self.win_length == 0 {
            return Err(Error::Config("zero-sized frontend parameter".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// F x T grid of log-mel magnitudes, row-major `[mel][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl Spectrogram {
    pub fn new(data: Vec<f32>, n_mels: usize, n_frames: usize) -> Result<Self> {
        if data.len() != n_mels * n_frames {
            return Err(Error::Shape(format!(
                "spectrogram buffer has {} values, expected {}x{}",
                data.len(),
                n_mels,
                n_frames
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite spectrogram value".into()));
        }
        Ok(Self { data, n_mels, n_frames })
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.data[mel * self.n_frames + frame]
    }

    /// Copy of the first `n_frames` columns.
    pub fn crop_frames(&self, n_frames: usize) -> Result<Spectrogram> {
        if n_frames == 0 || n_frames > self.n_frames {
            return Err(Error::Shape(format!(
                "cannot crop {} frames from a {}-frame spectrogram",
                n_frames, self.n_frames
            )));
        }
        let mut data = Vec::with_capacity(self.n_mels * n_frames);
        for m in 0..self.n_mels {
            let row = &self.data[m * self.n_frames..m * self.n_frames + n_frames];
            data.extend_from_slice(row);
        }
        Spectrogram::new(data, self.n_mels, n_frames)
    }
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

/// Decode a RIFF/WAVE byte stream into a mono 16 kHz signal.
///
/// Accepts PCM16 and 32-bit float payloads. Multichannel input is averaged
/// to mono; integer samples are scaled by 1/32768. Any other sample rate is
/// rejected: resampling is out of scope.
pub fn read_wav(bytes: &[u8]) -> Result<PcmSignal> {
    let mut r = ByteReader { buf: bytes, pos: 0 };
    if r.take(4)? != b"RIFF" {
        return Err(Error::Wav("missing RIFF header".into()));
    }
    r.take(4)?; // container size, not trusted
    if r.take(4)? != b"WAVE" {
        return Err(Error::Wav("missing WAVE tag".into()));
    }

    let mut fmt: Option<WavFmt> = None;
    let mut data: Option<&[u8]> = None;
    while r.remaining() >= 8 {
        let id: [u8; 4] = r.take(4)?.try_into().unwrap();
        let size = r.read_u32()? as usize;
        let chunk = r.take(size)?;
        match &id {
            b"fmt " => fmt = Some(WavFmt::parse(chunk)?),
            b"data" => data = Some(chunk),
            _ => {}
        }
        if size % 2 == 1 && r.remaining() > 0 {
            r.take(1)?; // chunks are word-aligned
        }
        if fmt.is_some() && data.is_some() {
            break;
        }
    }
    let fmt = fmt.ok_or_else(|| Error::Wav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Wav("missing data chunk".into()))?;

    if fmt.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate { got: fmt.sample_rate, want: SAMPLE_RATE });
    }

    let channels = fmt.channels as usize;
    let bytes_per_sample = (fmt.bits_per_sample / 8) as usize;
    let frame_bytes = bytes_per_sample * channels;
    if frame_bytes == 0 || data.len() % frame_bytes != 0 {
        return Err(Error::Wav("data chunk is not a whole number of frames".into()));
    }
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(Error::Wav("empty data chunk".into()));
    }

    let mut mono = Vec::with_capacity(n_frames);
    for fidx in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..channels {
            let off = fidx * frame_bytes + c * bytes_per_sample;
            let v = match fmt.format {
                SampleFormat::Pcm16 => {
                    i16::from_le_bytes([data[off], data[off + 1]]) as f64 / 32768.0
                }
                SampleFormat::Float32 => {
                    let raw = f32::from_le_bytes([
                        data[off],
                        data[off + 1],
                        data[off + 2],
                        data[off + 3],
                    ]);
                    if !raw.is_finite() {
                        return Err(Error::Wav("non-finite float sample".into()));
                    }
                    raw.clamp(-1.0, 1.0) as f64
                }
            };
            acc += v;
        }
        mono.push((acc / channels as f64) as f32);
    }
    PcmSignal::new(mono, fmt.sample_rate)
}

/// Encode a mono signal as PCM16 WAV bytes.
pub fn encode_wav_pcm16(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    encode_wav_pcm16_multi(&[samples.to_vec()], sample_rate)
}

/// Encode interleaved multichannel PCM16 WAV bytes (one Vec per channel).
pub fn encode_wav_pcm16_multi(channels: &[Vec<f32>], sample_rate: u32) -> Vec<u8> {
    let n_ch = channels.len();
    let n = channels.iter().map(|c| c.len()).min().unwrap_or(0);
    let data_len = n * n_ch * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&(n_ch as u16).to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * n_ch as u32 * 2).to_le_bytes());
    out.extend_from_slice(&((n_ch * 2) as u16).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..n {
        for ch in channels {
            let v = (ch[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_wav(path: &std::path::Path, signal: &PcmSignal) -> Result<()> {
    std::fs::write(path, encode_wav_pcm16(signal.samples(), signal.sample_rate()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum SampleFormat {
    Pcm16,
    Float32,
}

struct WavFmt {
    format: SampleFormat,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

impl WavFmt {
    fn parse(chunk: &[u8]) -> Result<Self> {
        if chunk.len() < 16 {
            return Err(Error::Wav("fmt chunk too short".into()));
        }
        let tag = u16::from_le_bytes([chunk[0], chunk[1]]);
        let channels = u16::from_le_bytes([chunk[2], chunk[3]]);
        let sample_rate = u32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]);
        let bits = u16::from_le_bytes([chunk[14], chunk[15]]);
        if channels == 0 {
            return Err(Error::Wav("zero channels".into()));
        }
        let format = match (tag, bits) {
            (1, 16) => SampleFormat::Pcm16,
            (3, 32) => SampleFormat::Float32,
            _ => {
                return Err(Error::Wav(format!(
                    "unsupported codec: format tag {tag} with {bits} bits per sample"
                )))
            }
        };
        Ok(WavFmt { format, channels, sample_rate, bits_per_sample: bits })
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Wav("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

// ---------------------------------------------------------------------------
// Mel filterbank and log-mel spectrogram
// ---------------------------------------------------------------------------

/// mel(f) = 2595 * log10(1 + f/700)
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangle corner frequencies in Hz: n_mels + 2 points equally spaced on
/// the mel scale between f_min and f_max.
fn mel_corner_freqs(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min as f64);
    let hi = hz_to_mel(cfg.f_max as f64);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Build the triangular mel filterbank, shape `n_mels x (n_fft/2 + 1)`,
/// row-major. Rows are ordered by ascending center frequency; every entry
/// is non-negative and every row touches at least one FFT bin.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let corners = mel_corner_freqs(cfg);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();

    let mut filters = vec![0f32; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (corners[m], corners[m + 1], corners[m + 2]);
        let mut any = false;
        for (k, &f) in bin_hz.iter().enumerate() {
            let w = if f <= left || f >= right {
                0.0
            } else if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            if w > 0.0 {
                any = true;
            }
            filters[m * n_bins + k] = w as f32;
        }
        if !any {
            return Err(Error::Config(format!(
                "mel filter {m} covers no FFT bin; n_mels={} is too large for n_fft={}",
                cfg.n_mels, cfg.n_fft
            )));
        }
    }
    Ok(filters)
}

fn hann_window(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .map(|v| v as f32)
        .collect()
}

/// Reflect index `i` (may be out of range) into `0..len`.
fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < len {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Compute the log-scaled mel spectrogram of a signal.
///
/// The signal is reflect-padded by `win_length/2` on both sides, framed at
/// the hop interval, Hann-windowed, and transformed with an `n_fft`-point
/// FFT. Mel energies are power (magnitude squared) and are floored before
/// the natural log. Output frame count is exactly `floor(len / hop)`.
pub fn log_mel_spectrogram(signal: &PcmSignal, cfg: &FrontendConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if signal.sample_rate() != cfg.sample_rate {
        return Err(Error::SampleRate { got: signal.sample_rate(), want: cfg.sample_rate });
    }
    let len = signal.len();
    if len < cfg.hop {
        return Err(Error::Shape(format!(
            "signal of {len} samples is shorter than one hop ({})",
            cfg.hop
        )));
    }
    let n_frames = len / cfg.hop;
    let filters = mel_filterbank(cfg)?;
    let window = hann_window(cfg.win_length);
    let n_bins = cfg.n_bins();
    let pad = cfg.win_length / 2;

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let fft_offset = (cfg.n_fft - cfg.win_length) / 2;

    let samples = signal.samples();
    let mut buf = vec![Complex::new(0f32, 0f32); cfg.n_fft];
    let mut power = vec![0f32; n_bins];
    let mut data = vec![0f32; cfg.n_mels * n_frames];

    for t in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let start = t as isize * cfg.hop as isize - pad as isize;
        for (j, w) in window.iter().enumerate() {
            let idx = reflect_index(start + j as isize, len);
            buf[fft_offset + j] = Complex::new(samples[idx] * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let row = &filters[m * n_bins..(m + 1) * n_bins];
            let e: f32 = row.iter().zip(power.iter()).map(|(w, p)| w * p).sum();
            data[m * n_frames + t] = (e + cfg.log_floor).ln();
        }
    }
    Spectrogram::new(data, cfg.n_mels, n_frames)
}

// ---------------------------------------------------------------------------
// Dataset normalization
// ---------------------------------------------------------------------------

/// Dataset-level mean/std used to normalize model inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl NormStats {
    pub fn apply(&self, spec: &Spectrogram) -> Spectrogram {
        let data = spec.data.iter().map(|v| (v - self.mean) / self.std).collect();
        Spectrogram { data, n_mels: spec.n_mels, n_frames: spec.n_frames }
    }
}

/// Pooled mean/std over every value of every spectrogram, then normalize.
///
/// Errors if the corpus is constant-valued (zero variance).
pub fn compute_and_apply_norm(specs: &[Spectrogram]) -> Result<(NormStats, Vec<Spectrogram>)> {
    let stats = compute_norm_stats(specs)?;
    let normalized = specs.iter().map(|s| stats.apply(s)).collect();
    Ok((stats, normalized))
}

pub fn compute_norm_stats(specs: &[Spectrogram]) -> Result<NormStats> {
    if specs.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let count: usize = specs.iter().map(|s| s.data.len()).sum();
    let mut sum = 0f64;
    for s in specs {
        sum += s.data.iter().map(|&v| v as f64).sum::<f64>();
    }
    let mean = sum / count as f64;
    let mut sq = 0f64;
    for s in specs {
        sq += s.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
    }
    let var = sq / count as f64;
    if var <= 1e-24 {
        return Err(Error::Numeric("corpus has zero variance; cannot normalize".into()));
    }
    Ok(NormStats { mean: mean as f32, std: var.sqrt() as f32 })
}

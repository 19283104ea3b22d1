//! Audio front-end: WAV ingestion, log-mel / MFCC features and the
//! deterministic augmentations used during training.
//!
//! Features are framed with a Hann window, center-padded with zeros so that
//! a one-second clip at 16 kHz with a 10 ms hop yields 101 frames. The
//! 20 Hz / 4 kHz band limit is applied through the mel filterbank edges.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Samples in the one-second clips the network consumes.
pub const CLIP_SAMPLES: usize = SAMPLE_RATE_HZ as usize;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("audio contains non-finite samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate_hz,
        })
    }

    /// Pads with trailing zeros or center-crops to exactly one second.
    pub fn one_second(samples: Vec<f32>) -> Result<Self> {
        Ok(AudioClip::new(samples, SAMPLE_RATE_HZ)?.fit_to(CLIP_SAMPLES))
    }

    pub fn silence() -> Self {
        AudioClip {
            samples: vec![0.0; CLIP_SAMPLES],
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }

    pub fn fit_to(mut self, len: usize) -> Self {
        if self.samples.len() > len {
            let start = (self.samples.len() - len) / 2;
            self.samples = self.samples[start..start + len].to_vec();
        } else {
            self.samples.resize(len, 0.0);
        }
        self
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn scaled(&self, k: f32) -> AudioClip {
        AudioClip {
            samples: self.samples.iter().map(|s| s * k).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

fn mean_power(s: &[f32]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    s.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / s.len() as f64
}

fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::NotMono(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{} contains non-finite samples",
            path.display()
        )));
    }
    Ok(samples)
}

/// Loads a 16 kHz mono PCM16 / float32 WAV as a one-second clip.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    AudioClip::one_second(read_wav(path.as_ref())?)
}

/// Loads a WAV at its full length (background-noise recordings).
pub fn load_wav_full(path: impl AsRef<Path>) -> Result<AudioClip> {
    AudioClip::new(read_wav(path.as_ref())?, SAMPLE_RATE_HZ)
}

/// Writes a clip as 16-bit PCM.
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Mfcc,
    Fbank,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Fbank => "fbank",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfcc" => Ok(FeatureKind::Mfcc),
            "fbank" => Ok(FeatureKind::Fbank),
            other => Err(Error::InvalidConfig(format!("unknown feature kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MelScale {
    /// `2595 log10(1 + f / 700)`
    Htk,
    /// Linear below 1 kHz, logarithmic above (Auditory Toolbox).
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, hz: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if hz >= min_log_hz {
                    min_log_mel + (hz / min_log_hz).ln() / logstep
                } else {
                    hz / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, mel: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if mel >= min_log_mel {
                    min_log_hz * (logstep * (mel - min_log_mel)).exp()
                } else {
                    mel * f_sp
                }
            }
        }
    }
}

impl std::str::FromStr for MelScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "htk" => Ok(MelScale::Htk),
            "slaney" => Ok(MelScale::Slaney),
            other => Err(Error::InvalidConfig(format!("unknown mel scale {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub feature_kind: FeatureKind,
    pub mel_scale: MelScale,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate_hz: SAMPLE_RATE_HZ,
            window_ms: 30.0,
            hop_ms: 10.0,
            n_mels: 40,
            n_coeffs: 40,
            band_low_hz: 20.0,
            band_high_hz: 4000.0,
            feature_kind: FeatureKind::Mfcc,
            mel_scale: MelScale::Htk,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn with_kind(mut self, kind: FeatureKind) -> Self {
        self.feature_kind = kind;
        self
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Frames produced for a signal of `len` samples (center padding).
    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop_samples() + 1
    }

    /// Number of feature columns for the configured kind.
    pub fn feature_dim(&self) -> usize {
        match self.feature_kind {
            FeatureKind::Mfcc => self.n_coeffs,
            FeatureKind::Fbank => self.n_mels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate_hz) / 2.0;
        if !(self.band_low_hz >= 0.0 && self.band_low_hz < self.band_high_hz) {
            return Err(Error::InvalidConfig(format!(
                "band {}..{} Hz is empty",
                self.band_low_hz, self.band_high_hz
            )));
        }
        if self.band_high_hz > nyquist {
            return Err(Error::InvalidConfig(format!(
                "band_high_hz {} exceeds Nyquist {nyquist}",
                self.band_high_hz
            )));
        }
        if self.n_mels == 0 || self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(Error::InvalidConfig(format!(
                "need 0 < n_coeffs ({}) <= n_mels ({})",
                self.n_coeffs, self.n_mels
            )));
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(Error::InvalidConfig("window and hop must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// A `t x f` time-frequency plane, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    frames: usize,
    dims: usize,
    kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, frames: usize, dims: usize, kind: FeatureKind) -> Result<Self> {
        if values.len() != frames * dims {
            return Err(Error::Shape(format!(
                "{frames}x{dims} features need {} values, got {}",
                frames * dims,
                values.len()
            )));
        }
        Ok(FeatureMatrix {
            values,
            frames,
            dims,
            kind,
        })
    }

    /// Frame count `t`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Coefficients per frame `f`.
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.dims + f]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    /// `t` lines of `f` comma-separated values.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 12);
        for t in 0..self.frames {
            let line: Vec<String> = self.row(t).iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Triangular filters on the one-sided spectrum, `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let n_fft = cfg.fft_size();
    let bins = n_fft / 2 + 1;
    let sr = f64::from(cfg.sample_rate_hz);
    let lo = cfg.mel_scale.hz_to_mel(cfg.band_low_hz);
    let hi = cfg.mel_scale.hz_to_mel(cfg.band_high_hz);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| {
            cfg.mel_scale
                .mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)
        })
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = cfg.mel_scale.hz_to_mel(cfg.band_low_hz);
    let hi = cfg.mel_scale.hz_to_mel(cfg.band_high_hz);
    (1..=cfg.n_mels)
        .map(|i| {
            cfg.mel_scale
                .mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)
        })
        .collect()
}

/// Orthonormal DCT-II matrix, `n x n`, row `k` holding basis vector `k`.
pub fn dct_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable feature extractor (FFT plan, window, filterbank, DCT).
pub struct Frontend {
    cfg: FrontendConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish()
    }
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size());
        Ok(Frontend {
            window: hann_window(cfg.window_samples()),
            filters: mel_filterbank(&cfg),
            dct: dct_matrix(cfg.n_mels),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    fn check_clip(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(Error::UnsupportedSampleRate(clip.sample_rate_hz()));
        }
        if clip.is_empty() {
            return Err(Error::InvalidArgument("empty clip".into()));
        }
        Ok(())
    }

    /// Log mel-filterbank energies.
    pub fn fbank(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        self.check_clip(clip)?;
        let win = self.cfg.window_samples();
        let hop = self.cfg.hop_samples();
        let n_fft = self.cfg.fft_size();
        let half = win / 2;
        let samples = clip.samples();
        let frames = self.cfg.frame_count(samples.len());
        let n_mels = self.cfg.n_mels;
        let mut out = Vec::with_capacity(frames * n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; n_fft / 2 + 1];
        for t in 0..frames {
            // padded index p maps to sample p - half
            let start = (t * hop) as isize - half as isize;
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = start + n as isize;
                let v = if n < win && idx >= 0 && (idx as usize) < samples.len() {
                    f64::from(samples[idx as usize]) * self.window[n]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out.push(e.max(self.cfg.log_floor).ln());
            }
        }
        FeatureMatrix::new(out, frames, n_mels, FeatureKind::Fbank)
    }

    /// DCT-II (orthonormal) of the log-mel frames, keeping `n_coeffs`.
    pub fn mfcc(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let fb = self.fbank(clip)?;
        let k = self.cfg.n_coeffs;
        let mut out = Vec::with_capacity(fb.frames() * k);
        for t in 0..fb.frames() {
            out.extend(self.dct_row(fb.row(t)));
        }
        FeatureMatrix::new(out, fb.frames(), k, FeatureKind::Mfcc)
    }

    /// Cepstral coefficients of one log-mel frame.
    pub fn dct_row(&self, log_mel: &[f64]) -> Vec<f64> {
        self.dct[..self.cfg.n_coeffs]
            .iter()
            .map(|basis| basis.iter().zip(log_mel).map(|(b, v)| b * v).sum())
            .collect()
    }

    /// Features of the configured kind.
    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        match self.cfg.feature_kind {
            FeatureKind::Mfcc => self.mfcc(clip),
            FeatureKind::Fbank => self.fbank(clip),
        }
    }
}

pub fn compute_fbank(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    Frontend::new(cfg.clone())?.fbank(clip)
}

pub fn compute_mfcc(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    Frontend::new(cfg.clone())?.mfcc(clip)
}

/// Parameters chosen by one noise-mixing call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseMix {
    /// Offset of the crop inside the noise recording.
    pub offset: usize,
    /// Amplitude applied to the crop.
    pub gain: f64,
}

/// Gain that brings noise of power `noise_power` to `snr_db` below a
/// signal of power `signal_power`.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Mixes a random crop of `noise` into `clip` at the requested SNR.
///
/// A zero-power `clip` is rejected: no gain can reach a finite SNR against
/// silence, and the trainer leaves such clips clean.
pub fn augment_noise_detailed(
    clip: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng_seed: u64,
) -> Result<(AudioClip, NoiseMix)> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr {snr_db} dB")));
    }
    if noise.len() < clip.len() {
        return Err(Error::InvalidArgument(format!(
            "noise clip of {} samples is shorter than the {}-sample signal",
            noise.len(),
            clip.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let offset = rng.gen_range(0..=noise.len() - clip.len());
    let crop = &noise.samples()[offset..offset + clip.len()];
    let p_noise = mean_power(crop);
    if p_noise == 0.0 {
        return Err(Error::InvalidArgument("noise crop has zero power".into()));
    }
    let p_signal = clip.power();
    if p_signal == 0.0 {
        return Err(Error::InvalidArgument("signal has zero power".into()));
    }
    let gain = snr_gain(p_signal, p_noise, snr_db);
    let samples = clip
        .samples()
        .iter()
        .zip(crop)
        .map(|(&s, &n)| (f64::from(s) + gain * f64::from(n)).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok((
        AudioClip::new(samples, clip.sample_rate_hz())?,
        NoiseMix { offset, gain },
    ))
}

pub fn augment_noise(clip: &AudioClip, noise: &AudioClip, snr_db: f64, rng_seed: u64) -> Result<AudioClip> {
    augment_noise_detailed(clip, noise, snr_db, rng_seed).map(|(c, _)| c)
}

/// Largest shift accepted by [`time_shift`].
pub const MAX_SHIFT_MS: f64 = 100.0;

/// Delays (positive) or advances (negative) the clip, zero-filling.
pub fn time_shift(clip: &AudioClip, shift_ms: f64) -> Result<AudioClip> {
    if !(shift_ms.abs() <= MAX_SHIFT_MS) {
        return Err(Error::InvalidArgument(format!(
            "time shift {shift_ms} ms outside [-{MAX_SHIFT_MS}, {MAX_SHIFT_MS}]"
        )));
    }
    let per_ms = f64::from(clip.sample_rate_hz()) / 1000.0;
    let shift = (shift_ms * per_ms).round() as isize;
    let n = clip.len() as isize;
    let src = clip.samples();
    let samples = (0..n)
        .map(|i| {
            let j = i - shift;
            if j >= 0 && j < n {
                src[j as usize]
            } else {
                0.0
            }
        })
        .collect();
    AudioClip::new(samples, clip.sample_rate_hz())
}

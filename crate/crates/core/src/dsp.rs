//! Audio front end: WAV decoding, framing and the four per-frame static
//! features (fundamental frequency, RMS energy, MFCC coefficient 2 and
//! spectral centroid).

use std::f64::consts::PI;
use std::io::Cursor;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SereError};

/// Floor applied to mel energies before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SereError::Precondition("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SereError::Validation(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes a RIFF/WAVE byte stream (16-bit PCM or 32-bit float), mixing
/// multichannel audio down to mono by averaging.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(SereError::Format("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| {
                s.map_err(map_hound).and_then(|v| {
                    if v.is_finite() {
                        Ok((v as f64).clamp(-1.0, 1.0))
                    } else {
                        Err(SereError::Format("non-finite float sample".into()))
                    }
                })
            })
            .collect::<Result<_>>()?,
        (fmt, bits) => {
            return Err(SereError::Unsupported(format!(
                "{bits}-bit {fmt:?} samples (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

fn map_hound(e: hound::Error) -> SereError {
    match e {
        hound::Error::Unsupported => SereError::Unsupported("WAV encoding".into()),
        hound::Error::FormatError(m) => SereError::Format(m.to_string()),
        hound::Error::IoError(e) => SereError::Format(format!("truncated or unreadable WAV: {e}")),
        other => SereError::Format(other.to_string()),
    }
}

/// Encodes mono samples as 16-bit PCM WAV. Used for fixtures and the toy corpus.
pub fn encode_wav_pcm16(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec).map_err(map_hound)?;
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(map_hound)?;
        }
        w.finalize().map_err(map_hound)?;
    }
    Ok(cursor.into_inner())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub frame_length: usize,
    pub hop_length: usize,
    pub num_frames: usize,
}

impl FrameGrid {
    pub fn new(signal_len: usize, frame_length: usize, hop_length: usize) -> Result<Self> {
        if hop_length == 0 || frame_length < hop_length {
            return Err(SereError::Precondition(format!(
                "need frame_length >= hop_length >= 1, got {frame_length}/{hop_length}"
            )));
        }
        let num_frames = if signal_len < frame_length {
            0
        } else {
            (signal_len - frame_length) / hop_length + 1
        };
        Ok(Self {
            frame_length,
            hop_length,
            num_frames,
        })
    }

    pub fn frame<'a>(&self, signal: &'a [f64], t: usize) -> &'a [f64] {
        let start = t * self.hop_length;
        &signal[start..start + self.frame_length]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub n_mels: usize,
    pub n_fft: usize,
    pub voicing_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            fmin: 80.0,
            fmax: 1000.0,
            n_mels: 40,
            n_fft: 512,
            voicing_threshold: 0.5,
        }
    }
}

impl FeatureConfig {
    pub fn grid(&self, sample_rate: u32, signal_len: usize) -> Result<FrameGrid> {
        let frame = (sample_rate as f64 * self.frame_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize;
        FrameGrid::new(signal_len, frame, hop)
    }
}

/// Column order of [`StaticFeatures`].
pub const F0: usize = 0;
pub const ENERGY: usize = 1;
pub const MFCC2: usize = 2;
pub const CENTROID: usize = 3;
pub const NUM_STATIC: usize = 4;

/// Per-frame `[F0, E, M, C]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures(pub Array2<f64>);

impl StaticFeatures {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() != NUM_STATIC {
            return Err(SereError::Shape(format!(
                "static features need {NUM_STATIC} columns, got {}",
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SereError::Validation("non-finite static feature".into()));
        }
        Ok(Self(values))
    }

    pub fn num_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

pub fn rms_energy(frame: &[f64]) -> Result<f64> {
    if frame.is_empty() {
        return Err(SereError::Precondition("empty frame".into()));
    }
    Ok((frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchEstimate {
    /// Fundamental frequency in Hz, 0 when unvoiced.
    pub hz: f64,
    /// `1 - d'(tau)` at the selected lag of the cumulative-mean normalized difference.
    pub confidence: f64,
}

const YIN_DIP: f64 = 0.15;

/// YIN-style estimator. A lag is chosen from the cumulative-mean normalized
/// difference function and refined by parabolic interpolation; frames whose
/// confidence falls below `voicing_threshold` report 0 Hz.
pub fn estimate_pitch(
    frame: &[f64],
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
    voicing_threshold: f64,
) -> Result<PitchEstimate> {
    let sr = sample_rate as f64;
    if !(fmin > 0.0 && fmin < fmax && fmax < sr / 2.0) {
        return Err(SereError::Precondition(format!(
            "need 0 < fmin < fmax < sample_rate/2, got {fmin}, {fmax}, {sr}"
        )));
    }
    let required = (2.0 * sr / fmin).ceil() as usize;
    if frame.len() < required {
        return Err(SereError::Precondition(format!(
            "frame of {} samples is shorter than the {required} needed for fmin {fmin} Hz",
            frame.len()
        )));
    }
    let unvoiced = PitchEstimate {
        hz: 0.0,
        confidence: 0.0,
    };
    if frame.iter().all(|&x| x == 0.0) {
        return Ok(unvoiced);
    }

    let tau_max = ((sr / fmin).floor() as usize).min(frame.len() / 2);
    let tau_min = ((sr / fmax).floor() as usize).max(2);
    let window = frame.len() - tau_max;

    let diff: Vec<f64> = (0..=tau_max)
        .map(|tau| {
            (0..window)
                .map(|i| {
                    let d = frame[i] - frame[i + tau];
                    d * d
                })
                .sum()
        })
        .collect();
    let mut cmnd = vec![1.0; tau_max + 1];
    let mut running = 0.0;
    for tau in 1..=tau_max {
        running += diff[tau];
        cmnd[tau] = if running > 0.0 {
            diff[tau] * tau as f64 / running
        } else {
            1.0
        };
    }

    let mut best = None;
    let mut tau = tau_min;
    while tau <= tau_max {
        if cmnd[tau] < YIN_DIP {
            while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            best = Some(tau);
            break;
        }
        tau += 1;
    }
    let best = best.unwrap_or_else(|| {
        (tau_min..=tau_max)
            .min_by(|&a, &b| cmnd[a].total_cmp(&cmnd[b]))
            .expect("non-empty lag range")
    });

    let confidence = (1.0 - cmnd[best]).clamp(0.0, 1.0);
    if confidence < voicing_threshold {
        return Ok(PitchEstimate { hz: 0.0, confidence });
    }

    let mut period = best as f64;
    if best > 0 && best < tau_max {
        let (a, b, c) = (diff[best - 1], diff[best], diff[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom > 0.0 {
            period += 0.5 * (a - c) / denom;
        }
    }
    Ok(PitchEstimate {
        hz: sr / period,
        confidence,
    })
}

pub fn estimate_f0(frame: &[f64], sample_rate: u32, fmin: f64, fmax: f64) -> Result<f64> {
    estimate_pitch(frame, sample_rate, fmin, fmax, 0.5).map(|p| p.hz)
}

/// Shared FFT plan, window and mel filterbank for one frame size.
pub struct SpectralAnalyzer {
    sample_rate: u32,
    frame_length: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    mel_bank: Vec<Vec<(usize, f64)>>,
}

impl SpectralAnalyzer {
    pub fn new(sample_rate: u32, frame_length: usize, n_fft: usize, n_mels: usize) -> Result<Self> {
        if frame_length == 0 {
            return Err(SereError::Precondition("empty frame".into()));
        }
        if n_mels < 4 {
            return Err(SereError::Precondition(format!("n_mels must be >= 4, got {n_mels}")));
        }
        let n_fft = n_fft.max(frame_length);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            sample_rate,
            frame_length,
            n_fft,
            window: hann(frame_length),
            fft,
            mel_bank: mel_filterbank(sample_rate as f64, n_fft, n_mels),
        })
    }

    fn check(&self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.frame_length {
            return Err(SereError::Shape(format!(
                "analyzer built for {} samples, got {}",
                self.frame_length,
                frame.len()
            )));
        }
        Ok(())
    }

    /// Magnitudes of bins `0..=n_fft/2` of the Hann-windowed, zero-padded frame.
    pub fn magnitudes(&self, frame: &[f64]) -> Result<Vec<f64>> {
        self.check(frame)?;
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.n_fft)
            .collect();
        self.fft.process(&mut buf);
        Ok(buf[..=self.n_fft / 2].iter().map(|c| c.norm()).collect())
    }

    pub fn centroid(&self, frame: &[f64]) -> Result<f64> {
        let mags = self.magnitudes(frame)?;
        let total: f64 = mags.iter().sum();
        if total <= 0.0 {
            return Ok(0.0);
        }
        let bin_hz = self.sample_rate as f64 / self.n_fft as f64;
        let weighted: f64 = mags
            .iter()
            .enumerate()
            .map(|(k, m)| k as f64 * bin_hz * m)
            .sum();
        Ok(weighted / total)
    }

    /// Floored log-mel energies in decibels.
    pub fn log_mel(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let power: Vec<f64> = self.magnitudes(frame)?.iter().map(|m| m * m).collect();
        Ok(self
            .mel_bank
            .iter()
            .map(|band| {
                let e: f64 = band.iter().map(|&(k, w)| w * power[k]).sum();
                10.0 * e.max(LOG_FLOOR).log10()
            })
            .collect())
    }

    pub fn mfcc_coeff2(&self, frame: &[f64]) -> Result<f64> {
        Ok(dct2_ortho_coeff(&self.log_mel(frame)?, 2))
    }
}

pub fn spectral_centroid(frame: &[f64], sample_rate: u32) -> Result<f64> {
    if frame.is_empty() {
        return Err(SereError::Precondition("empty frame".into()));
    }
    SpectralAnalyzer::new(sample_rate, frame.len(), frame.len().next_power_of_two(), 4)?
        .centroid(frame)
}

pub fn mfcc_coeff2(frame: &[f64], sample_rate: u32, n_mels: usize, n_fft: usize) -> Result<f64> {
    SpectralAnalyzer::new(sample_rate, frame.len(), n_fft, n_mels)?.mfcc_coeff2(frame)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Coefficient `k` of the orthonormal DCT-II of `x`.
pub fn dct2_ortho_coeff(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
    scale
        * x.iter()
            .enumerate()
            .map(|(i, v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
            .sum::<f64>()
}

// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
const MEL_F_SP: f64 = 200.0 / 3.0;
const MEL_MIN_LOG_HZ: f64 = 1000.0;
const MEL_MIN_LOG_MEL: f64 = MEL_MIN_LOG_HZ / MEL_F_SP;

fn mel_logstep() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MEL_MIN_LOG_HZ {
        MEL_MIN_LOG_MEL + (hz / MEL_MIN_LOG_HZ).ln() / mel_logstep()
    } else {
        hz / MEL_F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MEL_MIN_LOG_MEL {
        MEL_MIN_LOG_HZ * (mel_logstep() * (mel - MEL_MIN_LOG_MEL)).exp()
    } else {
        mel * MEL_F_SP
    }
}

/// Triangular, area-normalized filters over `0..sr/2`, stored sparsely as
/// `(bin, weight)` pairs.
fn mel_filterbank(sr: f64, n_fft: usize, n_mels: usize) -> Vec<Vec<(usize, f64)>> {
    let top = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            (0..bins)
                .filter_map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0);
                    (w > 0.0).then_some((k, w * norm))
                })
                .collect()
        })
        .collect()
}

/// Applies the four extractors to every frame of `audio`.
pub fn extract_static(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<StaticFeatures> {
    let grid = cfg.grid(audio.sample_rate, audio.samples.len())?;
    if grid.num_frames == 0 {
        return Err(SereError::Precondition(format!(
            "audio of {} samples is shorter than one {}-sample frame",
            audio.samples.len(),
            grid.frame_length
        )));
    }
    let sr = audio.sample_rate;
    // The pitch search needs two periods of the lowest frequency in a frame.
    let fmin = cfg.fmin.max(2.0 * sr as f64 / grid.frame_length as f64);
    let analyzer = SpectralAnalyzer::new(sr, grid.frame_length, cfg.n_fft, cfg.n_mels)?;

    let rows: Vec<[f64; NUM_STATIC]> = (0..grid.num_frames)
        .into_par_iter()
        .map(|t| {
            let frame = grid.frame(&audio.samples, t);
            let f0 = estimate_pitch(frame, sr, fmin, cfg.fmax, cfg.voicing_threshold)?.hz;
            Ok([
                f0,
                rms_energy(frame)?,
                analyzer.mfcc_coeff2(frame)?,
                analyzer.centroid(frame)?,
            ])
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    StaticFeatures::new(Array2::from_shape_vec((grid.num_frames, NUM_STATIC), flat).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    fn wav_bytes(spec: hound::WavSpec, write: impl FnOnce(&mut hound::WavWriter<&mut Cursor<Vec<u8>>>)) -> Vec<u8> {
        let mut cursor = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
            write(&mut w);
            w.finalize().unwrap();
        }
        cursor.into_inner()
    }

    #[test]
    fn decode_pcm16_scales_by_32768() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let bytes = wav_bytes(spec, |w| {
            for s in [0i16, 16384, -32768] {
                w.write_sample(s).unwrap();
            }
        });
        let audio = decode_wav(&bytes).unwrap();
        assert_eq!(audio.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(audio.sample_rate, 16000);
    }

    #[test]
    fn decode_stereo_float_averages_channels() {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let bytes = wav_bytes(spec, |w| {
            w.write_sample(1.0f32).unwrap();
            w.write_sample(0.0f32).unwrap();
        });
        assert_eq!(decode_wav(&bytes).unwrap().samples, vec![0.5]);
    }

    #[test]
    fn decode_rejects_truncated_and_unsupported() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let bytes = wav_bytes(spec, |w| w.write_sample(1i16).unwrap());
        assert!(matches!(decode_wav(&bytes[..10]), Err(SereError::Format(_))));

        let spec24 = hound::WavSpec {
            bits_per_sample: 24,
            ..spec
        };
        let bytes = wav_bytes(spec24, |w| w.write_sample(1i32).unwrap());
        assert!(matches!(decode_wav(&bytes), Err(SereError::Unsupported(_))));
    }

    #[test]
    fn pcm16_encoder_round_trips() {
        let x = vec![0.0, 0.5, -1.0, 0.25];
        let audio = decode_wav(&encode_wav_pcm16(&x, 16000).unwrap()).unwrap();
        assert_eq!(audio.samples, x);
    }

    #[test]
    fn frame_grid_boundaries() {
        assert_eq!(FrameGrid::new(16000, 400, 160).unwrap().num_frames, 98);
        assert_eq!(FrameGrid::new(400, 400, 160).unwrap().num_frames, 1);
        assert_eq!(FrameGrid::new(399, 400, 160).unwrap().num_frames, 0);
        assert!(FrameGrid::new(100, 10, 20).is_err());
        assert!(FrameGrid::new(100, 10, 0).is_err());
    }

    #[test]
    fn f0_of_sines_within_one_percent() {
        for freq in [110.0, 220.0, 440.0, 880.0] {
            let f0 = estimate_f0(&sine(freq, 16000, 1024, 0.8), 16000, 50.0, 1000.0).unwrap();
            assert!((f0 - freq).abs() <= 0.01 * freq, "{freq} Hz estimated as {f0}");
        }
    }

    #[test]
    fn f0_unvoiced_cases() {
        assert_eq!(estimate_f0(&[0.0; 1024], 16000, 50.0, 1000.0).unwrap(), 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = estimate_pitch(&noise, 16000, 50.0, 1000.0, 0.5).unwrap();
        assert!(p.confidence < 0.5, "noise confidence {}", p.confidence);
        assert_eq!(p.hz, 0.0);
    }

    #[test]
    fn f0_rejects_short_frames_and_bad_ranges() {
        assert!(matches!(
            estimate_f0(&[0.1; 100], 16000, 50.0, 1000.0),
            Err(SereError::Precondition(_))
        ));
        assert!(estimate_f0(&[0.1; 2048], 16000, 500.0, 100.0).is_err());
        assert!(estimate_f0(&[0.1; 2048], 16000, 50.0, 9000.0).is_err());
    }

    #[test]
    fn rms_cases() {
        assert_eq!(rms_energy(&[0.0; 8]).unwrap(), 0.0);
        assert_eq!(rms_energy(&[-0.3; 8]).unwrap(), 0.3);
        // 4 full periods of a 400 Hz tone in 160 samples.
        let x = sine(400.0, 16000, 160, 0.6);
        assert!((rms_energy(&x).unwrap() - 0.6 / 2f64.sqrt()).abs() < 1e-6);
        assert!(rms_energy(&[]).is_err());
    }

    #[test]
    fn centroid_cases() {
        assert_eq!(spectral_centroid(&[0.0; 512], 16000).unwrap(), 0.0);
        let c = spectral_centroid(&sine(2000.0, 16000, 400, 0.5), 16000).unwrap();
        assert!((c - 2000.0).abs() <= 50.0, "centroid {c}");
        let two: Vec<f64> = sine(1000.0, 16000, 400, 0.4)
            .iter()
            .zip(sine(3000.0, 16000, 400, 0.4))
            .map(|(a, b)| a + b)
            .collect();
        let c = spectral_centroid(&two, 16000).unwrap();
        assert!((c - 2000.0).abs() <= 100.0, "centroid {c}");
    }

    #[test]
    fn dct_of_constant_has_no_ac_terms() {
        let flat = vec![-37.5; 40];
        assert!(dct2_ortho_coeff(&flat, 2).abs() < 1e-9);
        assert!((dct2_ortho_coeff(&flat, 0) - (-37.5 * 40f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn mfcc2_of_silence_is_zero() {
        assert!(mfcc_coeff2(&[0.0; 400], 16000, 40, 512).unwrap().abs() < 1e-9);
        assert!(mfcc_coeff2(&[0.0; 400], 16000, 3, 512).is_err());
    }

    #[test]
    fn mfcc2_matches_numpy_reference() {
        // Reference computed offline with an independent numpy/scipy pipeline
        // (periodic Hann, rfft n=512, Slaney mel bank with area norm,
        // 10*log10(max(E, 1e-10)), scipy.fft.dct(type=2, norm="ortho")[2]).
        let x = sine(440.0, 16000, 400, 0.5);
        let c2 = mfcc_coeff2(&x, 16000, 40, 512).unwrap();
        assert!((c2 - MFCC2_SINE440_REFERENCE).abs() < 1e-4, "c2 = {c2}");
    }

    const MFCC2_SINE440_REFERENCE: f64 = 66.217_467_843_231_47;

    #[test]
    fn silence_extracts_zero_rows() {
        let audio = AudioBuffer::new(vec![0.0; 16000], 16000).unwrap();
        let f = extract_static(&audio, &FeatureConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 98);
        for row in f.values().rows() {
            assert_eq!((row[F0], row[ENERGY], row[CENTROID]), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn sine_extracts_constant_pitch_and_energy() {
        let audio = AudioBuffer::new(sine(440.0, 16000, 16000, 0.5), 16000).unwrap();
        let f = extract_static(&audio, &FeatureConfig::default()).unwrap();
        for row in f.values().rows() {
            assert!((row[F0] - 440.0).abs() < 4.4, "F0 {}", row[F0]);
            assert!((row[ENERGY] - 0.5 / 2f64.sqrt()).abs() < 0.01, "E {}", row[ENERGY]);
        }
    }

    #[test]
    fn one_frame_boundary_and_short_audio() {
        let cfg = FeatureConfig::default();
        let audio = AudioBuffer::new(sine(200.0, 16000, 400, 0.5), 16000).unwrap();
        assert_eq!(extract_static(&audio, &cfg).unwrap().num_frames(), 1);
        let short = AudioBuffer::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(extract_static(&short, &cfg), Err(SereError::Precondition(_))));
    }

    proptest! {
        #[test]
        fn framing_count_formula(len in 0usize..5000, frame in 1usize..600, hop_frac in 0.01f64..1.0) {
            let hop = ((frame as f64 * hop_frac) as usize).max(1);
            let g = FrameGrid::new(len, frame, hop).unwrap();
            let expected = if len >= frame { (len - frame) / hop + 1 } else { 0 };
            prop_assert_eq!(g.num_frames, expected);
            if g.num_frames > 0 {
                prop_assert!((g.num_frames - 1) * hop + frame <= len);
                prop_assert!(g.num_frames * hop + frame > len);
            }
        }

        #[test]
        fn rms_is_homogeneous(x in proptest::collection::vec(-1.0f64..1.0, 1..64), k in -4.0f64..4.0) {
            let scaled: Vec<f64> = x.iter().map(|v| k * v).collect();
            let a = rms_energy(&scaled).unwrap();
            let b = k.abs() * rms_energy(&x).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b));
        }

        #[test]
        fn centroid_is_scale_invariant(x in proptest::collection::vec(-1.0f64..1.0, 64), k in 0.01f64..50.0) {
            let scaled: Vec<f64> = x.iter().map(|v| k * v).collect();
            let a = spectral_centroid(&x, 16000).unwrap();
            let b = spectral_centroid(&scaled, 16000).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn static_features_are_finite(seed in any::<u64>(), amp in 0.0f64..1.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..1200).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
            let f = extract_static(&AudioBuffer::new(x, 16000).unwrap(), &FeatureConfig::default()).unwrap();
            prop_assert!(f.values().iter().all(|v| v.is_finite()));
            prop_assert!(f.values().column(F0).iter().all(|&v| v >= 0.0));
            prop_assert!(f.values().column(CENTROID).iter().all(|&v| v >= 0.0));
        }
    }
}

//! Time-domain signals, WAV I/O and SNR-controlled mixing.

use std::ops::Deref;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use log::warn;

use crate::error::{Error, Result};

/// The only sample rate the toolkit accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono, finite, 16 kHz waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate {
                found: sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(Signal {
            samples,
            sample_rate,
        })
    }

    /// Wraps samples assumed to be at 16 kHz.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn zeros(len: usize) -> Self {
        Signal {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Signal {
        Signal {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates to the first `len` samples (no-op if already shorter).
    pub fn truncated(&self, len: usize) -> Signal {
        Signal {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

impl Deref for Signal {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.samples
    }
}

impl AsRef<[f64]> for Signal {
    fn as_ref(&self) -> &[f64] {
        &self.samples
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Sample encoding used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a 16 kHz PCM-16 or float-32 WAV file.
///
/// Multichannel files yield their first channel. PCM-16 samples are divided
/// by 32768, so full scale 32767 maps to 32767/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Signal> {
    let path = path.as_ref();
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            found: spec.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    let channels = spec.channels.max(1) as usize;
    if channels > 1 {
        warn!(
            "{}: {} channels, using channel 0 only",
            path.display(),
            channels
        );
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::UnsupportedCodec(format!(
                "{format:?} with {bits} bits per sample (expected PCM-16 or float-32)"
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    Signal::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file. PCM-16 output is rounded and saturated; float-32
/// output is written unclipped.
pub fn write_wav(path: impl AsRef<Path>, signal: &Signal, format: WavFormat) -> Result<()> {
    let (bits_per_sample, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample,
        sample_format,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    match format {
        WavFormat::Pcm16 => {
            for &v in signal.iter() {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q)?;
            }
        }
        WavFormat::Float32 => {
            for &v in signal.iter() {
                writer.write_sample(v as f32)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Output of [`mix_at_snr`].
#[derive(Debug, Clone)]
pub struct Mixture {
    pub noisy: Signal,
    pub scaled_noise: Signal,
    pub noise_gain: f64,
}

/// Scales `noise` so that `10 log10(|clean|^2 / |scaled_noise|^2) == snr_db`
/// and adds it to `clean`.
pub fn mix_at_snr(clean: &Signal, noise: &Signal, snr_db: f64) -> Result<Mixture> {
    if clean.len() != noise.len() {
        return Err(Error::LengthMismatch {
            left: clean.len(),
            right: noise.len(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db must be finite, got {snr_db}")));
    }
    let clean_energy = clean.energy();
    let noise_energy = noise.energy();
    if clean_energy <= 0.0 {
        return Err(Error::ZeroEnergy { what: "clean signal" });
    }
    if noise_energy <= 0.0 {
        return Err(Error::ZeroEnergy { what: "noise signal" });
    }
    let noise_gain = (clean_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise = noise.scaled(noise_gain);
    let noisy: Vec<f64> = clean
        .iter()
        .zip(scaled_noise.iter())
        .map(|(c, n)| c + n)
        .collect();
    Ok(Mixture {
        noisy: Signal::from_samples(noisy)?,
        scaled_noise,
        noise_gain,
    })
}

/// Measured SNR in dB of `clean` against `noise`.
pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (energy(clean) / energy(noise)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_rate_and_non_finite() {
        assert!(matches!(
            Signal::new(vec![0.0; 4], 8000),
            Err(Error::SampleRate { found: 8000, .. })
        ));
        assert!(matches!(
            Signal::from_samples(vec![0.0, f64::NAN]),
            Err(Error::NonFiniteSample { index: 1 })
        ));
    }

    #[test]
    fn silence_file_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        write_wav(&path, &Signal::zeros(16000), WavFormat::Pcm16).unwrap();
        let s = load_wav(&path).unwrap();
        assert_eq!(s.len(), 16000);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pcm16_full_scale_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(32767i16).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.finalize().unwrap();
        let s = load_wav(&path).unwrap();
        assert_eq!(s[0], 32767.0 / 32768.0);
        assert_eq!(s[1], -1.0);
    }

    #[test]
    fn tone_round_trips_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let amp = 10f64.powf(-6.0 / 20.0);
        let tone: Vec<f64> = (0..16000)
            .map(|n| amp * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16000.0).sin())
            .collect();
        let tone = Signal::from_samples(tone).unwrap();
        write_wav(&path, &tone, WavFormat::Pcm16).unwrap();
        let back = load_wav(&path).unwrap();
        let worst = tone
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0, "worst {worst}");
    }

    #[test]
    fn multichannel_takes_first_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for i in 0..10 {
            w.write_sample(i as f32 * 0.1).unwrap();
            w.write_sample(-1.0f32).unwrap();
        }
        w.finalize().unwrap();
        let s = load_wav(&path).unwrap();
        assert_eq!(s.len(), 10);
        assert!((s[3] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn unsupported_codec_and_rate_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pcm24.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::UnsupportedCodec(_))));

        let path = dir.path().join("8k.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::SampleRate { found: 8000, .. })));

        let path = dir.path().join("empty.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        WavWriter::create(&path, spec).unwrap().finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::Empty)));
    }

    #[test]
    fn mix_unit_gain_at_zero_db() {
        let clean = Signal::from_samples(vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        let noise = Signal::from_samples(vec![0.5, 0.5, 1.0, -1.0]).unwrap();
        let m = mix_at_snr(&clean, &noise, 0.0).unwrap();
        assert!((m.noise_gain - 1.0).abs() < 1e-15);
        assert_eq!(m.noisy[0], 1.5);
    }

    #[test]
    fn mix_twenty_db_is_one_percent_energy() {
        let clean = Signal::from_samples((0..100).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let noise = Signal::from_samples((0..100).map(|i| (i as f64 * 1.7).cos()).collect()).unwrap();
        let m = mix_at_snr(&clean, &noise, 20.0).unwrap();
        let ratio = m.scaled_noise.energy() / clean.energy();
        assert!((ratio - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mix_rejects_zero_energy() {
        let clean = Signal::from_samples(vec![1.0, 0.0]).unwrap();
        let zero = Signal::zeros(2);
        assert!(matches!(
            mix_at_snr(&clean, &zero, 0.0),
            Err(Error::ZeroEnergy { .. })
        ));
        assert!(matches!(
            mix_at_snr(&zero, &clean, 0.0),
            Err(Error::ZeroEnergy { .. })
        ));
    }
}

//! Container sounds: procedural synthesis, MFCC front end with an envelope
//! noise gate, and the Bi-GRU recognizer with its four-action vote.

pub mod classifier;
pub mod dsp;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classifier::{
    majority_vote, ActionTable, FeatureItem, FeatureSet, FrontEnd, FrontEndConfig, Pooling, SoundModel, SoundModelConfig,
    SoundTrainConfig, SoundTrainReport, VoteEntry, VoteRecord,
};
pub use dsp::{frame_count, mfcc, noise_gate, GateConfig, GatedClip, MfccConfig, MfccExtractor, MfccMatrix};
pub use synth::{
    add_robot_noise, build_dataset, profile, synthesize, synthesize_detailed, ClipRecord, DatasetSpec, NoiseConfig,
    SynthProfile,
};

pub const SAMPLE_RATE: u32 = 16_000;
/// Length of the clip recorded for one probing action, s.
pub const CLIP_SECONDS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("wave file error: {0}")]
    Wav(#[from] hound::Error),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Neural(#[from] crate::neural::NeuralError),
}

/// Mono clip with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    pub rate: u32,
    pub samples: Vec<f64>,
}

impl AudioClip {
    /// Rejects non-finite samples and clamps the rest to `[-1, 1]`.
    pub fn new(rate: u32, mut samples: Vec<f64>) -> Result<Self, AudioError> {
        if rate == 0 {
            return Err(AudioError::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::Domain(format!("sample {i} is not finite")));
        }
        samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
        Ok(Self { rate, samples })
    }

    pub fn silence(rate: u32, len: usize) -> Self {
        Self {
            rate,
            samples: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    /// 16-bit PCM mono.
    pub fn write_wav(&self, path: &Path) -> Result<(), AudioError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| AudioError::Io(format!("{}: {e}", dir.display())))?;
            }
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }

    /// Reads integer or float PCM; multi-channel files are averaged to mono.
    pub fn read_wav(path: &Path) -> Result<Self, AudioError> {
        let mut r = hound::WavReader::open(path)?;
        let spec = r.spec();
        let ch = spec.channels.max(1) as usize;
        let raw: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = ((1i64 << (spec.bits_per_sample - 1)) - 1) as f64;
                r.samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<Result<_, _>>()?
            }
            hound::SampleFormat::Float => r
                .samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<Result<_, _>>()?,
        };
        let mono = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        Self::new(spec.sample_rate, mono)
    }
}

/// Stateless 64-bit mixer used to derive per-record seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..800).map(|i| (i as f64 * 0.05).sin() * 0.7).collect();
        let c = AudioClip::new(SAMPLE_RATE, samples).unwrap();
        c.write_wav(&p).unwrap();
        let back = AudioClip::read_wav(&p).unwrap();
        assert_eq!(back.rate, SAMPLE_RATE);
        assert_eq!(back.len(), c.len());
        for (a, b) in c.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32767.0 + 1e-12);
        }
    }

    #[test]
    fn construction_clamps_and_rejects_nan() {
        let c = AudioClip::new(8000, vec![2.0, -3.0, 0.5]).unwrap();
        assert_eq!(c.samples, vec![1.0, -1.0, 0.5]);
        assert!(AudioClip::new(8000, vec![f64::NAN]).is_err());
        assert!(AudioClip::new(0, vec![0.0]).is_err());
    }
}

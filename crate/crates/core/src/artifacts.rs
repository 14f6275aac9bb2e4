//! Checkpoint sections for the trained models and the settings they need at
//! inference time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::classifier::{SoundModelMeta, CHECKPOINT_SECTION};
use crate::audio::{FrontEnd, FrontEndConfig, NoiseConfig, SoundModel, SAMPLE_RATE};
use crate::engine::{LearnedGrounder, LearnedRecognizer};
use crate::grounding::{GroundingModel, GroundingModelConfig};
use crate::instruction::Vocabulary;
use crate::language::{EncoderConfig, LanguageEncoder, SlotHeads};
use crate::neural::{Checkpoint, NeuralError, OptimizerState};
use crate::scene::{DetectorConfig, PyramidConfig};

pub const GROUNDING_SECTION: &str = "grounding";
pub const LANGUAGE_SECTION: &str = "language_encoder";
pub const SLOTS_SECTION: &str = "language_slots";
const OPTIMIZER_SUFFIX: &str = "_optimizer";
const PROGRESS_SUFFIX: &str = "_progress";

/// Training position stored with a model, so a resumed run continues it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub seed: u64,
    /// Loss per epoch so far.
    pub loss_curve: Vec<f64>,
}

pub fn put_progress(ckpt: &mut Checkpoint, section: &str, opt: &OptimizerState, p: &Progress) -> Result<(), NeuralError> {
    ckpt.put_value(&format!("{section}{OPTIMIZER_SUFFIX}"), opt)?;
    ckpt.put_value(&format!("{section}{PROGRESS_SUFFIX}"), p)
}

pub fn progress(ckpt: &Checkpoint, section: &str) -> Result<(OptimizerState, Progress), NeuralError> {
    Ok((
        ckpt.config(&format!("{section}{OPTIMIZER_SUFFIX}"))?,
        ckpt.config(&format!("{section}{PROGRESS_SUFFIX}"))?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GroundingMeta {
    model: GroundingModelConfig,
    vocab: Vocabulary,
    pyramid: PyramidConfig,
    detector: DetectorConfig,
}

pub fn put_grounding(ckpt: &mut Checkpoint, g: &LearnedGrounder) -> Result<(), NeuralError> {
    let meta = GroundingMeta {
        model: g.model.config(),
        vocab: g.model.vocab.clone(),
        pyramid: g.pyramid,
        detector: g.detector,
    };
    ckpt.put(GROUNDING_SECTION, &meta, &g.model)
}

pub fn grounding(ckpt: &Checkpoint) -> Result<LearnedGrounder, NeuralError> {
    let meta: GroundingMeta = ckpt.config(GROUNDING_SECTION)?;
    let mut model = GroundingModel::zeros(meta.vocab.reindex(), &meta.model);
    ckpt.fill(GROUNDING_SECTION, &mut model)?;
    Ok(LearnedGrounder {
        model,
        pyramid: meta.pyramid,
        detector: meta.detector,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AudioMeta {
    model: SoundModelMeta,
    front: FrontEndConfig,
    noise: NoiseConfig,
}

pub fn put_audio(ckpt: &mut Checkpoint, model: &SoundModel, front: FrontEndConfig, noise: NoiseConfig) -> Result<(), NeuralError> {
    let meta = AudioMeta {
        model: model.meta(),
        front,
        noise,
    };
    ckpt.put(CHECKPOINT_SECTION, &meta, model)
}

pub fn audio(ckpt: &Checkpoint) -> Result<LearnedRecognizer, NeuralError> {
    let meta: AudioMeta = ckpt.config(CHECKPOINT_SECTION)?;
    let mut model = SoundModel::from_meta(meta.model).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    ckpt.fill(CHECKPOINT_SECTION, &mut model)?;
    let front = FrontEnd::new(meta.front, SAMPLE_RATE).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    Ok(LearnedRecognizer {
        model,
        front,
        noise: meta.noise,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LanguageMeta {
    encoder: EncoderConfig,
    vocab: Vocabulary,
}

pub fn put_language(ckpt: &mut Checkpoint, vocab: &Vocabulary, enc: &LanguageEncoder, heads: &SlotHeads) -> Result<(), NeuralError> {
    let meta = LanguageMeta {
        encoder: enc.config,
        vocab: vocab.clone(),
    };
    ckpt.put(LANGUAGE_SECTION, &meta, enc)?;
    ckpt.put(SLOTS_SECTION, &enc.feature_dim(), heads)
}

pub fn language(ckpt: &Checkpoint) -> Result<(Vocabulary, LanguageEncoder, SlotHeads), NeuralError> {
    let meta: LanguageMeta = ckpt.config(LANGUAGE_SECTION)?;
    let mut enc = LanguageEncoder::zeros(meta.encoder);
    ckpt.fill(LANGUAGE_SECTION, &mut enc)?;
    let mut heads = SlotHeads::new(enc.feature_dim(), 0);
    ckpt.fill(SLOTS_SECTION, &mut heads)?;
    Ok((meta.vocab.reindex(), enc, heads))
}

/// Loads a checkpoint, creating an empty one when the file does not exist.
pub fn open_or_new(path: &Path) -> Result<Checkpoint, NeuralError> {
    if path.exists() {
        Checkpoint::load(path)
    } else {
        Ok(Checkpoint::default())
    }
}

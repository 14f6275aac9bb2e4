//! Bi-GRU sound recognizer over MFCC frames, its training loop, the
//! per-action evaluation table and the four-action majority vote.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dsp::{noise_gate, GateConfig, MfccConfig, MfccExtractor, MfccMatrix};
use super::synth::{ClipRecord, NoiseConfig};
use super::{mix_seed, AudioClip, AudioError};
use crate::classes::{ActionKind, ObjectClass};
use crate::neural::{
    accumulate, argmax, clip_global_norm, cross_entropy, join, one_hot, softmax, zeros_like, AdamConfig, BiGru,
    Linear, Matrix, OptimizerState, Params,
};

pub const N_CLASSES: usize = ObjectClass::COUNT;

/// Clip → MFCC frames, optionally gated with masked frames dropped.
#[derive(Debug)]
pub struct FrontEnd {
    pub mfcc: MfccExtractor,
    pub gate: GateConfig,
    pub use_gate: bool,
    pub drop_masked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontEndConfig {
    pub mfcc: MfccConfig,
    pub gate: GateConfig,
    pub use_gate: bool,
    pub drop_masked: bool,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            mfcc: MfccConfig::default(),
            gate: GateConfig::default(),
            use_gate: true,
            drop_masked: true,
        }
    }
}

impl FrontEnd {
    pub fn new(cfg: FrontEndConfig, rate: u32) -> Result<Self, AudioError> {
        if cfg.gate.factor <= 0.0 {
            return Err(AudioError::Config("gate factor must be positive".into()));
        }
        Ok(Self {
            mfcc: MfccExtractor::new(cfg.mfcc, rate)?,
            gate: cfg.gate,
            use_gate: cfg.use_gate,
            drop_masked: cfg.drop_masked,
        })
    }

    pub fn standard() -> Self {
        Self::new(FrontEndConfig::default(), super::SAMPLE_RATE).expect("default front end")
    }

    pub fn features(&self, clip: &AudioClip) -> Result<MfccMatrix, AudioError> {
        if !self.use_gate {
            return self.mfcc.extract(clip);
        }
        let gated = noise_gate(clip, &self.gate);
        let m = self.mfcc.extract(&gated.clip)?;
        if !self.drop_masked {
            return Ok(m);
        }
        let keep = gated.frame_mask(m.frames(), self.mfcc.window_len(), self.mfcc.hop_len());
        Ok(m.select(&keep))
    }
}

/// Readout of the Bi-GRU sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final states of both directions.
    #[default]
    Final,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for SoundModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 21,
            hidden_dim: 48,
            pooling: Pooling::Final,
        }
    }
}

/// Per-coefficient standardization learned from the training frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundModel {
    pub config: SoundModelConfig,
    pub norm: FeatureNorm,
    pub gru: BiGru,
    pub out: Linear,
}

/// Checkpoint metadata stored next to the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundModelMeta {
    pub config: SoundModelConfig,
    pub norm: FeatureNorm,
    pub classes: Vec<ObjectClass>,
}

impl Params for SoundModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.gru.visit(&join(prefix, "gru"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.gru.visit_mut(&join(prefix, "gru"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

pub const CHECKPOINT_SECTION: &str = "audio_classifier";

impl SoundModel {
    pub fn new(config: SoundModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gru: BiGru::new(config.input_dim, config.hidden_dim, &mut rng),
            out: Linear::new(2 * config.hidden_dim, N_CLASSES, &mut rng),
            norm: FeatureNorm::identity(config.input_dim),
            config,
        }
    }

    pub fn zeros(config: SoundModelConfig) -> Self {
        Self {
            gru: BiGru::zeros(config.input_dim, config.hidden_dim),
            out: Linear::zeros(2 * config.hidden_dim, N_CLASSES),
            norm: FeatureNorm::identity(config.input_dim),
            config,
        }
    }

    pub fn meta(&self) -> SoundModelMeta {
        SoundModelMeta {
            config: self.config,
            norm: self.norm.clone(),
            classes: ObjectClass::ALL.to_vec(),
        }
    }

    pub fn from_meta(meta: SoundModelMeta) -> Result<Self, AudioError> {
        if meta.classes != ObjectClass::ALL {
            return Err(AudioError::Config("checkpoint class list does not match".into()));
        }
        let mut m = Self::zeros(meta.config);
        m.norm = meta.norm;
        Ok(m)
    }

    /// Standardized `T × D` input matrix.
    pub fn prepare(&self, frames: usize, data: impl Iterator<Item = f64>) -> Result<Matrix, AudioError> {
        let d = self.config.input_dim;
        let vals: Vec<f64> = data
            .enumerate()
            .map(|(i, v)| (v - self.norm.mean[i % d]) / self.norm.std[i % d])
            .collect();
        Ok(Matrix::from_vec(frames, d, vals)?)
    }

    fn pooled(&self, trace: &crate::neural::BiGruTrace) -> Vec<f64> {
        match self.config.pooling {
            Pooling::Final => trace.final_states(),
            Pooling::Mean => {
                let out = trace.outputs();
                let n = out.rows() as f64;
                (0..out.cols())
                    .map(|c| (0..out.rows()).map(|r| out.get(r, c)).sum::<f64>() / n)
                    .collect()
            }
        }
    }

    /// Class logits of a standardized non-empty sequence.
    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>, AudioError> {
        let trace = self.gru.forward(x)?;
        Ok(self.out.forward(&self.pooled(&trace)))
    }

    /// Class probabilities. A sequence with no frames (fully gated clip) is
    /// `empty` with certainty.
    pub fn predict(&self, feats: &MfccMatrix) -> Result<Vec<f64>, AudioError> {
        if feats.frames() == 0 {
            return Ok(one_hot(N_CLASSES, ObjectClass::Empty.ordinal()));
        }
        if feats.n_coeffs != self.config.input_dim {
            return Err(AudioError::Config(format!(
                "model expects {} coefficients, got {}",
                self.config.input_dim, feats.n_coeffs
            )));
        }
        let x = self.prepare(feats.frames(), feats.data.iter().copied())?;
        Ok(softmax(&self.logits(&x)?)?)
    }

    pub fn predict_item(&self, item: &FeatureItem) -> Result<Vec<f64>, AudioError> {
        if item.frames == 0 {
            return Ok(one_hot(N_CLASSES, ObjectClass::Empty.ordinal()));
        }
        let x = self.prepare(item.frames, item.data.iter().map(|&v| v as f64))?;
        Ok(softmax(&self.logits(&x)?)?)
    }

    pub fn predict_clip(&self, front: &FrontEnd, clip: &AudioClip) -> Result<Vec<f64>, AudioError> {
        self.predict(&front.features(clip)?)
    }

    /// Cross-entropy of one standardized sequence and its gradients.
    pub fn loss_grad(&self, x: &Matrix, label: usize) -> Result<(f64, SoundModel), AudioError> {
        let trace = self.gru.forward(x)?;
        let h = self.pooled(&trace);
        let z = self.out.forward(&h);
        let (loss, dz) = cross_entropy(&z, &one_hot(N_CLASSES, label));
        let mut g = zeros_like(self);
        let dh = self.out.backward(&h, &dz, &mut g.out);
        match self.config.pooling {
            Pooling::Final => {
                self.gru.backward_final(x, &trace, &dh, &mut g.gru);
            }
            Pooling::Mean => {
                let n = trace.len();
                let mut d_out = Matrix::zeros(n, dh.len());
                for t in 0..n {
                    for (c, v) in dh.iter().enumerate() {
                        d_out.set(t, c, v / n as f64);
                    }
                }
                self.gru.backward(x, &trace, &d_out, &mut g.gru);
            }
        }
        Ok((loss, g))
    }
}

/// Features of one clip, stored compactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureItem {
    pub class: ObjectClass,
    pub action: ActionKind,
    pub episode: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n_coeffs: usize,
    pub items: Vec<FeatureItem>,
}

impl FeatureSet {
    /// Renders and featurizes every record in parallel; order is preserved.
    pub fn from_records(records: &[ClipRecord], front: &FrontEnd, noise: &NoiseConfig) -> Result<Self, AudioError> {
        let items = records
            .par_iter()
            .map(|r| {
                let clip = r.render(noise)?;
                let m = front.features(&clip)?;
                Ok(FeatureItem {
                    class: r.class,
                    action: r.action,
                    episode: r.episode,
                    frames: m.frames(),
                    data: m.data.iter().map(|&v| v as f32).collect(),
                })
            })
            .collect::<Result<Vec<_>, AudioError>>()?;
        Ok(Self {
            n_coeffs: front.mfcc.config.n_coeffs,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Mean and standard deviation of every coefficient over all frames.
    pub fn norm(&self) -> FeatureNorm {
        let d = self.n_coeffs;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for it in &self.items {
            for row in it.data.chunks_exact(d) {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return FeatureNorm::identity(d);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        FeatureNorm { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundTrainConfig {
    pub model: SoundModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Permute labels across clips (chance-level control).
    #[serde(default)]
    pub shuffle_labels: bool,
}

impl Default for SoundTrainConfig {
    fn default() -> Self {
        Self {
            model: SoundModelConfig::default(),
            epochs: 4,
            batch_size: 32,
            lr: 3e-3,
            clip_norm: 5.0,
            shuffle_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundTrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub clips: usize,
    /// Clips left out because the gate removed every frame.
    pub skipped: usize,
}

fn training_labels(set: &FeatureSet, cfg: &SoundTrainConfig, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = set.items.iter().map(|i| i.class.ordinal()).collect();
    if cfg.shuffle_labels {
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5348)));
    }
    labels
}

/// Runs the given epochs of minibatch training on an existing model.
/// Epoch `e` shuffles with a seed derived from `(seed, e)`, so a resumed run
/// repeats the uninterrupted one.
pub fn fit(
    model: &mut SoundModel,
    opt: &mut OptimizerState,
    set: &FeatureSet,
    cfg: &SoundTrainConfig,
    seed: u64,
    epochs: Range<usize>,
) -> Result<SoundTrainReport, AudioError> {
    let labels = training_labels(set, cfg, seed);
    let usable: Vec<usize> = (0..set.len()).filter(|&i| set.items[i].frames > 0).collect();
    let batch = cfg.batch_size.max(1);
    let mut curve = Vec::new();
    for epoch in epochs {
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let m: &SoundModel = model;
            let parts = chunk
                .par_iter()
                .map(|&i| {
                    let it = &set.items[i];
                    let x = m.prepare(it.frames, it.data.iter().map(|&v| v as f64))?;
                    m.loss_grad(&x, labels[i])
                })
                .collect::<Result<Vec<_>, AudioError>>()?;
            let mut grads = zeros_like(model);
            for (l, g) in &parts {
                total += l;
                accumulate(&mut grads, g, 1.0 / chunk.len() as f64);
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.apply(model, &grads)?;
        }
        curve.push(total / usable.len().max(1) as f64);
    }
    Ok(SoundTrainReport {
        loss_curve: curve,
        clips: usable.len(),
        skipped: set.len() - usable.len(),
    })
}

pub fn check_coverage(set: &FeatureSet) -> Result<(), AudioError> {
    let missing: Vec<&str> = ObjectClass::ALL
        .iter()
        .filter(|c| !set.items.iter().any(|i| i.class == **c))
        .map(|c| c.name())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(AudioError::Config(format!("corpus lacks classes: {}", missing.join(", "))))
    }
}

/// Fresh model, normalization from the training frames, then `cfg.epochs` epochs.
pub fn train_sound(
    set: &FeatureSet,
    cfg: &SoundTrainConfig,
    seed: u64,
) -> Result<(SoundModel, OptimizerState, SoundTrainReport), AudioError> {
    check_coverage(set)?;
    if set.n_coeffs != cfg.model.input_dim {
        return Err(AudioError::Config(format!(
            "features have {} coefficients, model expects {}",
            set.n_coeffs, cfg.model.input_dim
        )));
    }
    let mut model = SoundModel::new(cfg.model, seed);
    model.norm = set.norm();
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let report = fit(&mut model, &mut opt, set, cfg, seed, 0..cfg.epochs)?;
    Ok((model, opt, report))
}

/// One per-action prediction entering the vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteEntry {
    pub action: ActionKind,
    pub predicted: ObjectClass,
    pub probs: Vec<f64>,
}

impl VoteEntry {
    pub fn new(action: ActionKind, probs: Vec<f64>) -> Self {
        let predicted = ObjectClass::from_ordinal(argmax(&probs)).expect("12 probabilities");
        Self {
            action,
            predicted,
            probs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    None,
    SummedProbability,
    Ordinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub entries: Vec<VoteEntry>,
    pub class: ObjectClass,
    pub tie_break: TieBreak,
}

/// Modal class; ties go to the highest summed probability, then the lowest ordinal.
pub fn majority_vote(entries: &[VoteEntry]) -> Result<VoteRecord, AudioError> {
    if entries.is_empty() {
        return Err(AudioError::Domain("no predictions to vote on".into()));
    }
    let mut counts = [0usize; N_CLASSES];
    let mut mass = [0.0f64; N_CLASSES];
    for e in entries {
        counts[e.predicted.ordinal()] += 1;
        for (m, p) in mass.iter_mut().zip(&e.probs) {
            *m += p;
        }
    }
    let top = *counts.iter().max().expect("nonempty");
    let modal: Vec<usize> = (0..N_CLASSES).filter(|&c| counts[c] == top).collect();
    let (winner, tie_break) = if modal.len() == 1 {
        (modal[0], TieBreak::None)
    } else {
        let best = modal.iter().map(|&c| mass[c]).fold(f64::NEG_INFINITY, f64::max);
        let by_mass: Vec<usize> = modal.iter().copied().filter(|&c| mass[c] == best).collect();
        if by_mass.len() == 1 {
            (by_mass[0], TieBreak::SummedProbability)
        } else {
            (by_mass[0], TieBreak::Ordinal)
        }
    };
    Ok(VoteRecord {
        entries: entries.to_vec(),
        class: ObjectClass::from_ordinal(winner).expect("valid ordinal"),
        tie_break,
    })
}

/// Table columns in report order.
pub const TABLE_COLUMNS: [&str; 5] = ["all_actions", "pitch", "yaw", "roll", "shake"];
const COLUMN_ACTIONS: [ActionKind; 4] = [ActionKind::Pitch, ActionKind::Yaw, ActionKind::Roll, ActionKind::Shake];

/// Accuracy per class and column (all-actions vote, then pitch, yaw, roll, shake).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTable {
    pub rows: Vec<(ObjectClass, [f64; 5])>,
    pub average: [f64; 5],
    /// Episodes per class that had all four probe clips.
    pub episodes: Vec<usize>,
    /// Episodes left out of the all-actions column for a missing clip.
    pub excluded: usize,
}

impl ActionTable {
    pub fn row(&self, class: ObjectClass) -> [f64; 5] {
        self.rows.iter().find(|(c, _)| *c == class).map(|r| r.1).unwrap_or([0.0; 5])
    }

    /// Classes sorted by all-actions accuracy, worst first (ties by ordinal).
    pub fn ranking(&self) -> Vec<ObjectClass> {
        let mut r = self.rows.clone();
        r.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]).then(a.0.cmp(&b.0)));
        r.into_iter().map(|(c, _)| c).collect()
    }

    /// Percentages with two decimals, 12 class rows plus `Average`.
    pub fn write_csv(&self, path: &Path) -> Result<(), AudioError> {
        let io = |e: std::io::Error| AudioError::Io(format!("{}: {e}", path.display()));
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv().as_bytes()).map_err(io)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("class,{}\n", TABLE_COLUMNS.join(","));
        let fmt = |v: &[f64; 5]| v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join(",");
        for (c, v) in &self.rows {
            s.push_str(&format!("{},{}\n", c.title(), fmt(v)));
        }
        s.push_str(&format!("Average,{}\n", fmt(&self.average)));
        s
    }
}

/// Probability vectors for every item, computed in parallel.
pub fn predict_all(model: &SoundModel, set: &FeatureSet) -> Result<Vec<Vec<f64>>, AudioError> {
    set.items.par_iter().map(|it| model.predict_item(it)).collect()
}

/// Table from precomputed predictions (one probability vector per item).
pub fn table_from_predictions(set: &FeatureSet, probs: &[Vec<f64>]) -> ActionTable {
    use std::collections::BTreeMap;
    let mut episodes: BTreeMap<(ObjectClass, usize), Vec<usize>> = BTreeMap::new();
    for (i, it) in set.items.iter().enumerate() {
        episodes.entry((it.class, it.episode)).or_default().push(i);
    }
    let mut hits = [[0usize; 5]; N_CLASSES];
    let mut totals = [[0usize; 5]; N_CLASSES];
    let mut excluded = 0;
    for ((class, _), idx) in &episodes {
        let c = class.ordinal();
        for &i in idx {
            if let Some(col) = COLUMN_ACTIONS.iter().position(|a| *a == set.items[i].action) {
                totals[c][col + 1] += 1;
                if argmax(&probs[i]) == c {
                    hits[c][col + 1] += 1;
                }
            }
        }
        let entries: Vec<VoteEntry> = ActionKind::PROBES
            .iter()
            .filter_map(|a| idx.iter().find(|&&i| set.items[i].action == *a))
            .map(|&i| VoteEntry::new(set.items[i].action, probs[i].clone()))
            .collect();
        if entries.len() != 4 {
            excluded += 1;
            continue;
        }
        totals[c][0] += 1;
        if majority_vote(&entries).map(|v| v.class == *class).unwrap_or(false) {
            hits[c][0] += 1;
        }
    }
    let mut rows = Vec::new();
    for class in ObjectClass::ALL {
        let c = class.ordinal();
        if totals[c].iter().all(|t| *t == 0) {
            continue;
        }
        let mut v = [0.0; 5];
        for k in 0..5 {
            v[k] = if totals[c][k] > 0 {
                hits[c][k] as f64 / totals[c][k] as f64
            } else {
                0.0
            };
        }
        rows.push((class, v));
    }
    let mut average = [0.0; 5];
    for (_, v) in &rows {
        for k in 0..5 {
            average[k] += v[k] / rows.len() as f64;
        }
    }
    ActionTable {
        episodes: rows.iter().map(|(c, _)| totals[c.ordinal()][0]).collect(),
        rows,
        average,
        excluded,
    }
}

pub fn evaluate_per_action(model: &SoundModel, set: &FeatureSet) -> Result<ActionTable, AudioError> {
    Ok(table_from_predictions(set, &predict_all(model, set)?))
}

//! Instruction encoder: word embedding, Bi-GRU, and three learned attention
//! vectors (subject, location, relationship) whose weighted sums are
//! concatenated into the instruction feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::instruction::{Intent, TaskKind, Vocabulary};
use crate::neural::{
    axpy, cross_entropy, dot, join, softmax_backward, softmax_unchecked, zeros_like, AdamConfig, BiGru, BiGruTrace,
    Linear, Matrix, NeuralError, OptimizerState, Params,
};

/// Number of attention modules: subject, location, relationship.
pub const MODULES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Sum Bi-GRU states instead of embeddings in the attention pooling.
    #[serde(default)]
    pub pool_hidden: bool,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            pool_hidden: false,
        }
    }

    /// Length of one pooled module vector.
    pub fn module_dim(&self) -> usize {
        if self.pool_hidden {
            2 * self.hidden_dim
        } else {
            self.embed_dim
        }
    }

    pub fn feature_dim(&self) -> usize {
        MODULES * self.module_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEncoder {
    pub config: EncoderConfig,
    /// Row `w` is the embedding of word `w`.
    pub embed: Matrix,
    pub gru: BiGru,
    /// Rows are `s_subj`, `s_loc`, `s_rel`.
    pub attn: Matrix,
}

/// Encoder output: `q_subj ‖ q_loc ‖ q_rel` plus the attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionFeature {
    pub f_t: Vec<f64>,
    /// `MODULES × T`; each row sums to one.
    pub attention: Matrix,
}

impl InstructionFeature {
    pub fn module(&self, m: usize) -> &[f64] {
        let d = self.f_t.len() / MODULES;
        &self.f_t[m * d..(m + 1) * d]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    tokens: Vec<usize>,
    embedded: Matrix,
    gru: BiGruTrace,
    hidden: Matrix,
}

impl LanguageEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Matrix::uniform(config.vocab_size, config.embed_dim, 0.5, &mut rng);
        let gru = BiGru::new(config.embed_dim, config.hidden_dim, &mut rng);
        let attn = Matrix::uniform(MODULES, 2 * config.hidden_dim, 0.5, &mut rng);
        Self { config, embed, gru, attn }
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        Self {
            config,
            embed: Matrix::zeros(config.vocab_size, config.embed_dim),
            gru: BiGru::zeros(config.embed_dim, config.hidden_dim),
            attn: Matrix::zeros(MODULES, 2 * config.hidden_dim),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix, NeuralError> {
        let mut e = Matrix::zeros(tokens.len(), self.config.embed_dim);
        for (t, &w) in tokens.iter().enumerate() {
            if w >= self.config.vocab_size {
                return Err(NeuralError::Config(format!(
                    "token index {w} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            e.row_mut(t).copy_from_slice(self.embed.row(w));
        }
        Ok(e)
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<InstructionFeature, NeuralError> {
        self.encode_traced(tokens).map(|(f, _)| f)
    }

    pub fn encode_traced(&self, tokens: &[usize]) -> Result<(InstructionFeature, EncodeTrace), NeuralError> {
        if tokens.is_empty() {
            return Err(NeuralError::Domain("cannot encode an empty token sequence".into()));
        }
        let embedded = self.embed(tokens)?;
        let gru = self.gru.forward(&embedded)?;
        let hidden = gru.outputs();
        let n = tokens.len();
        let dq = self.config.module_dim();
        let mut attention = Matrix::zeros(MODULES, n);
        let mut f_t = vec![0.0; MODULES * dq];
        for m in 0..MODULES {
            let logits: Vec<f64> = (0..n).map(|t| dot(self.attn.row(m), hidden.row(t))).collect();
            let a = softmax_unchecked(&logits);
            let q = &mut f_t[m * dq..(m + 1) * dq];
            for t in 0..n {
                let v = if self.config.pool_hidden { hidden.row(t) } else { embedded.row(t) };
                axpy(a[t], v, q);
            }
            attention.row_mut(m).copy_from_slice(&a);
        }
        if f_t.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::Domain("non-finite instruction feature".into()));
        }
        let trace = EncodeTrace {
            tokens: tokens.to_vec(),
            embedded,
            gru,
            hidden,
        };
        Ok((InstructionFeature { f_t, attention }, trace))
    }

    /// Accumulates `dL/dθ` given `dL/df_t`.
    pub fn backward(&self, feat: &InstructionFeature, trace: &EncodeTrace, d_ft: &[f64], grads: &mut LanguageEncoder) {
        let n = trace.tokens.len();
        let dq = self.config.module_dim();
        let h2 = 2 * self.config.hidden_dim;
        let mut d_hidden = Matrix::zeros(n, h2);
        let mut d_embedded = Matrix::zeros(n, self.config.embed_dim);
        for m in 0..MODULES {
            let a = feat.attention.row(m);
            let g = &d_ft[m * dq..(m + 1) * dq];
            let mut da = vec![0.0; n];
            for t in 0..n {
                if self.config.pool_hidden {
                    da[t] = dot(g, trace.hidden.row(t));
                    axpy(a[t], g, d_hidden.row_mut(t));
                } else {
                    da[t] = dot(g, trace.embedded.row(t));
                    axpy(a[t], g, d_embedded.row_mut(t));
                }
            }
            let dl = softmax_backward(a, &da);
            for t in 0..n {
                axpy(dl[t], trace.hidden.row(t), grads.attn.row_mut(m));
                axpy(dl[t], self.attn.row(m), d_hidden.row_mut(t));
            }
        }
        let dx = self.gru.backward(&trace.embedded, &trace.gru, &d_hidden, &mut grads.gru);
        d_embedded.add_scaled(&dx, 1.0);
        for (t, &w) in trace.tokens.iter().enumerate() {
            axpy(1.0, d_embedded.row(t), grads.embed.row_mut(w));
        }
    }
}

impl Params for LanguageEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "embed"), &self.embed);
        self.gru.visit(&join(prefix, "gru"), f);
        f(&join(prefix, "attn"), &self.attn);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "embed"), &mut self.embed);
        self.gru.visit_mut(&join(prefix, "gru"), f);
        f(&join(prefix, "attn"), &mut self.attn);
    }
}

/// Slot-prediction heads used to pretrain the encoder on the instruction
/// corpus alone: family, target class, destination word, anchor relation and
/// landmark (the last three with an extra "absent" class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotHeads {
    pub heads: Vec<Linear>,
}

const SLOT_SIZES: [usize; 5] = [3, 12, 13, 7, 4];

fn slot_labels(intent: &Intent) -> [usize; 5] {
    use crate::instruction::Destination;
    let dest = match intent.destination {
        None => 12,
        Some(Destination::Relation(r)) => r as usize,
        Some(Destination::Color(c)) => 5 + c.ordinal(),
    };
    let (rel, lm) = match intent.anchor {
        None => (6, 3),
        Some(a) => (a.relation.ordinal(), a.landmark.ordinal()),
    };
    [intent.kind.ordinal(), intent.target.ordinal(), dest, rel, lm]
}

impl SlotHeads {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            heads: SLOT_SIZES.iter().map(|&k| Linear::new(feature_dim, k, &mut rng)).collect(),
        }
    }

    pub fn predict(&self, f_t: &[f64]) -> [usize; 5] {
        let mut out = [0; 5];
        for (o, h) in out.iter_mut().zip(&self.heads) {
            *o = crate::neural::argmax(&h.forward(f_t));
        }
        out
    }
}

impl Params for SlotHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Summed slot cross-entropy and gradients for one instruction.
pub fn slot_loss(
    enc: &LanguageEncoder,
    heads: &SlotHeads,
    tokens: &[usize],
    intent: &Intent,
) -> Result<(f64, LanguageEncoder, SlotHeads), NeuralError> {
    let (feat, trace) = enc.encode_traced(tokens)?;
    let labels = slot_labels(intent);
    let mut g_heads = zeros_like(heads);
    let mut d_ft = vec![0.0; feat.f_t.len()];
    let mut loss = 0.0;
    for (i, h) in heads.heads.iter().enumerate() {
        let logits = h.forward(&feat.f_t);
        let mut target = vec![0.0; logits.len()];
        target[labels[i]] = 1.0;
        let (l, dl) = cross_entropy(&logits, &target);
        loss += l;
        let dx = h.backward(&feat.f_t, &dl, &mut g_heads.heads[i]);
        axpy(1.0, &dx, &mut d_ft);
    }
    let mut g_enc = zeros_like(enc);
    enc.backward(&feat, &trace, &d_ft, &mut g_enc);
    Ok((loss, g_enc, g_heads))
}

#[derive(Clone, Debug, Serialize)]
pub struct LanguageTrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    /// Mean slot loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Fraction of corpus sentences whose five slots are all recovered.
    pub slot_accuracy: f64,
}

/// Pretrains an encoder on the instruction corpus with the slot heads.
pub fn train_language(
    vocab: &Vocabulary,
    config: EncoderConfig,
    epochs: usize,
    seed: u64,
) -> Result<(LanguageEncoder, SlotHeads, OptimizerState, LanguageTrainReport), NeuralError> {
    use rand::seq::SliceRandom;
    let corpus = crate::instruction::corpus();
    let data: Vec<(Vec<usize>, Intent)> = corpus.iter().map(|(i, t)| (vocab.tokenize(t), *i)).collect();
    let mut model = crate::neural::Joint(LanguageEncoder::new(config, seed), SlotHeads::new(config.feature_dim(), seed ^ 0x51));
    let mut opt = OptimizerState::new(AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = 16;
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = zeros_like(&model);
            for &i in chunk {
                let (l, ge, gh) = slot_loss(&model.0, &model.1, &data[i].0, &data[i].1)?;
                total += l;
                crate::neural::accumulate(&mut grads.0, &ge, 1.0 / chunk.len() as f64);
                crate::neural::accumulate(&mut grads.1, &gh, 1.0 / chunk.len() as f64);
            }
            opt.apply(&mut model, &grads)?;
        }
        curve.push(total / data.len() as f64);
    }
    let mut correct = 0;
    for (tokens, intent) in &data {
        let f = model.0.encode(tokens)?;
        if model.1.predict(&f.f_t) == slot_labels(intent) {
            correct += 1;
        }
    }
    let report = LanguageTrainReport {
        epochs,
        final_loss: curve.last().copied().unwrap_or(0.0),
        loss_curve: curve,
        slot_accuracy: correct as f64 / data.len() as f64,
    };
    let crate::neural::Joint(enc, heads) = model;
    Ok((enc, heads, opt, report))
}

/// True when the family of an intent needs a destination grounding.
pub fn needs_destination(kind: TaskKind) -> bool {
    kind != TaskKind::Exploratory
}

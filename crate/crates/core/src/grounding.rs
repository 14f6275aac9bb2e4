//! Visual-language grounding: per-level gated fusion of the instruction
//! feature with the feature pyramid, nearest-neighbour upsampling to the
//! finest grid, attention over candidate regions and target selection.
//!
//! ```text
//! f_m_i = LReLU(W_t f_t + b_t) ⊙ LReLU(W_v_i f_v_i + b_v_i)      per cell
//! f_m   = concat_i upsample(f_m_i)
//! m_j   = mean of f_m over the cells inside candidate box j
//! t_j   = κ tanh(w · ((W_v m_j + b_v) ⊙ (W_t' r_j + b_t')) / κ)
//! β     = softmax(t),  u_loc = Σ_j β_j m_j,  s_loc_j = cos(u_loc, m_j)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction::{TaskKind, Vocabulary};
use crate::language::{EncoderConfig, LanguageEncoder};
use crate::neural::{
    argmax, axpy, cross_entropy, dot, join, leaky_relu, leaky_relu_grad, softmax_unchecked, Linear, Matrix,
    NeuralError, Params,
};
use crate::scene::{cells_in_box, BBox, CandidateRegion, FeatureMap, FeatureMapPyramid, REGION_DIM};

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("no candidates")]
    NoCandidates,
    #[error("grounding configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// How the final referent is picked from the attention output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest cosine similarity to the attended feature `u_loc`.
    #[default]
    Cosine,
    /// Highest attention weight.
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub level_channels: Vec<usize>,
    pub fused_dim: usize,
    pub att_dim: usize,
    pub region_dim: usize,
    /// Logits are `κ·tanh(z/κ)`.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
}

pub const LOGIT_SCALE: f64 = 10.0;

fn default_logit_scale() -> f64 {
    LOGIT_SCALE
}

impl HeadConfig {
    pub fn new(feature_dim: usize, level_channels: Vec<usize>) -> Self {
        Self {
            feature_dim,
            level_channels,
            fused_dim: 64,
            att_dim: 32,
            region_dim: REGION_DIM,
            logit_scale: LOGIT_SCALE,
        }
    }

    pub fn merged_dim(&self) -> usize {
        self.fused_dim * self.level_channels.len()
    }
}

/// One grounding pass: fusion projections plus the candidate attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingHead {
    pub config: HeadConfig,
    pub w_t: Linear,
    pub w_v: Vec<Linear>,
    pub att_v: Linear,
    pub att_t: Linear,
    /// Scalar projection of the elementwise product, `att_dim × 1`.
    pub att_w: Matrix,
}

/// Fused maps per level and the merged map at the finest resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub frame: f64,
    pub levels: Vec<FeatureMap>,
    pub merged: FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub logits: Vec<f64>,
    pub beta: Vec<f64>,
    pub s_loc: Vec<f64>,
    /// Index into the candidate list.
    pub selected: usize,
    pub center_px: [f64; 2],
}

impl GroundingResult {
    /// Table coordinates of the predicted center.
    pub fn robot_mm(&self, calib: &crate::scene::Calibration) -> Result<[f64; 2], crate::scene::SceneError> {
        calib.image_to_robot(self.center_px)
    }

    /// Candidates whose attention is at least half the maximum, in descending β order.
    pub fn referent_set(&self) -> Vec<usize> {
        let max = self.beta.iter().cloned().fold(0.0, f64::max);
        let mut idx: Vec<usize> = (0..self.beta.len()).filter(|&j| self.beta[j] >= 0.5 * max).collect();
        idx.sort_by(|&a, &b| self.beta[b].total_cmp(&self.beta[a]).then(a.cmp(&b)));
        idx
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Everything the backward pass needs from one forward pass over one scene
/// and one instruction.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pre_g: Vec<f64>,
    g: Vec<f64>,
    /// Per candidate, per level: pooled gated visual vector.
    vbar: Vec<Vec<Vec<f64>>>,
    m: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Per-scene visual cache for one head: projected cells touched by any
/// candidate box, and each candidate's cell list per level.
#[derive(Clone, Debug)]
pub struct VisualCache {
    /// Per level: coarse cell index → (pre-activation, activation).
    cells: Vec<Vec<Option<(Vec<f64>, Vec<f64>)>>>,
    /// Per candidate, per level: coarse cell indices (with repetition).
    members: Vec<Vec<Vec<usize>>>,
    vbar: Vec<Vec<Vec<f64>>>,
}

impl GroundingHead {
    pub fn new(config: HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_t = Linear::new(config.feature_dim, config.fused_dim, &mut rng);
        let w_v = config
            .level_channels
            .iter()
            .map(|&c| Linear::new(c, config.fused_dim, &mut rng))
            .collect();
        let att_v = Linear::new(config.merged_dim(), config.att_dim, &mut rng);
        let att_t = Linear::new(config.region_dim, config.att_dim, &mut rng);
        let att_w = Matrix::uniform(config.att_dim, 1, 1.0 / (config.att_dim as f64).sqrt(), &mut rng);
        let mut h = Self {
            config,
            w_t,
            w_v,
            att_v,
            att_t,
            att_w,
        };
        // Positive gate biases keep the leaky units in their linear regime at start.
        h.w_t.b.fill(0.1);
        for l in &mut h.w_v {
            l.b.fill(0.1);
        }
        h
    }

    fn check_pyramid(&self, pyr: &FeatureMapPyramid) -> Result<(), GroundingError> {
        let ch = pyr.channels();
        if ch != self.config.level_channels {
            return Err(GroundingError::Config(format!(
                "pyramid channels {ch:?} do not match {:?}",
                self.config.level_channels
            )));
        }
        let fine = pyr.finest().size;
        for l in &pyr.levels {
            if l.size == 0 || !fine.is_multiple_of(l.size) {
                return Err(GroundingError::Config(format!("level size {} does not divide {fine}", l.size)));
            }
        }
        Ok(())
    }

    fn gate(&self, f_t: &[f64]) -> Result<(Vec<f64>, Vec<f64>), GroundingError> {
        if f_t.len() != self.config.feature_dim {
            return Err(GroundingError::Config(format!(
                "instruction feature has length {}, expected {}",
                f_t.len(),
                self.config.feature_dim
            )));
        }
        let pre = self.w_t.forward(f_t);
        let g = pre.iter().map(|&v| leaky_relu(v)).collect();
        Ok((pre, g))
    }

    /// Per-level fusion and merge at the finest resolution.
    pub fn fuse(&self, f_t: &[f64], pyr: &FeatureMapPyramid) -> Result<FusedFeature, GroundingError> {
        self.check_pyramid(pyr)?;
        let (_, g) = self.gate(f_t)?;
        let dm = self.config.fused_dim;
        let mut levels = Vec::with_capacity(pyr.levels.len());
        for (i, map) in pyr.levels.iter().enumerate() {
            let mut out = FeatureMap::zeros(map.size, dm);
            for y in 0..map.size {
                for x in 0..map.size {
                    let v = self.w_v[i].forward(map.cell(y, x));
                    for (o, (gk, vk)) in out.cell_mut(y, x).iter_mut().zip(g.iter().zip(&v)) {
                        *o = gk * leaky_relu(*vk);
                    }
                }
            }
            levels.push(out);
        }
        let fine = pyr.finest().size;
        let mut merged = FeatureMap::zeros(fine, dm * levels.len());
        for y in 0..fine {
            for x in 0..fine {
                for (i, l) in levels.iter().enumerate() {
                    let f = fine / l.size;
                    let src = l.cell(y / f, x / f).to_vec();
                    merged.cell_mut(y, x)[i * dm..(i + 1) * dm].copy_from_slice(&src);
                }
            }
        }
        Ok(FusedFeature {
            frame: pyr.frame,
            levels,
            merged,
        })
    }

    fn scores(&self, m: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let a = self.att_v.forward(m);
        let b = self.att_t.forward(r);
        let z: f64 = (0..a.len()).map(|k| self.att_w.get(k, 0) * a[k] * b[k]).sum();
        let k = self.config.logit_scale;
        (a, b, k * (z / k).tanh())
    }

    fn finish(
        &self,
        m: &[Vec<f64>],
        logits: Vec<f64>,
        candidates: &[CandidateRegion],
        selection: Selection,
    ) -> GroundingResult {
        let beta = softmax_unchecked(&logits);
        let mut u = vec![0.0; m[0].len()];
        for (bj, mj) in beta.iter().zip(m) {
            axpy(*bj, mj, &mut u);
        }
        let s_loc: Vec<f64> = m.iter().map(|mj| cosine(&u, mj)).collect();
        let selected = match selection {
            Selection::Cosine => argmax(&s_loc),
            Selection::Attention => argmax(&beta),
        };
        let (cx, cy) = candidates[selected].bbox.center();
        GroundingResult {
            logits,
            beta,
            s_loc,
            selected,
            center_px: [cx, cy],
        }
    }

    /// Attention over candidates given an already fused map.
    pub fn attend(
        &self,
        fused: &FusedFeature,
        candidates: &[CandidateRegion],
        selection: Selection,
    ) -> Result<GroundingResult, GroundingError> {
        if candidates.is_empty() {
            return Err(GroundingError::NoCandidates);
        }
        let mut m = Vec::with_capacity(candidates.len());
        let mut logits = Vec::with_capacity(candidates.len());
        for c in candidates {
            if c.r_loc.len() != self.config.region_dim {
                return Err(GroundingError::Config(format!("region feature has length {}", c.r_loc.len())));
            }
            let cells = cells_in_box(&fused.merged, &c.bbox, fused.frame);
            let mut mj = vec![0.0; fused.merged.channels];
            for &(y, x) in &cells {
                axpy(1.0 / cells.len() as f64, fused.merged.cell(y, x), &mut mj);
            }
            logits.push(self.scores(&mj, &c.r_loc).2);
            m.push(mj);
        }
        Ok(self.finish(&m, logits, candidates, selection))
    }

    /// Projects only the coarse cells under candidate boxes and pools them.
    /// Pooling commutes with the instruction gate, so this cache is shared
    /// by every instruction on the same scene.
    pub fn visual_cache(
        &self,
        pyr: &FeatureMapPyramid,
        candidates: &[CandidateRegion],
    ) -> Result<VisualCache, GroundingError> {
        self.check_pyramid(pyr)?;
        let fine = pyr.finest();
        let mut cells: Vec<Vec<Option<(Vec<f64>, Vec<f64>)>>> =
            pyr.levels.iter().map(|l| vec![None; l.size * l.size]).collect();
        let mut members = Vec::with_capacity(candidates.len());
        let mut vbar = Vec::with_capacity(candidates.len());
        for c in candidates {
            let fine_cells = cells_in_box(fine, &c.bbox, pyr.frame);
            let mut per_level = Vec::with_capacity(pyr.levels.len());
            let mut pooled = Vec::with_capacity(pyr.levels.len());
            for (i, l) in pyr.levels.iter().enumerate() {
                let f = fine.size / l.size;
                let idx: Vec<usize> = fine_cells.iter().map(|&(y, x)| (y / f) * l.size + x / f).collect();
                let mut mean = vec![0.0; self.config.fused_dim];
                for &k in &idx {
                    let entry = cells[i][k].get_or_insert_with(|| {
                        let pre = self.w_v[i].forward(l.cell(k / l.size, k % l.size));
                        let act = pre.iter().map(|&v| leaky_relu(v)).collect();
                        (pre, act)
                    });
                    axpy(1.0 / idx.len() as f64, &entry.1, &mut mean);
                }
                per_level.push(idx);
                pooled.push(mean);
            }
            members.push(per_level);
            vbar.push(pooled);
        }
        Ok(VisualCache { cells, members, vbar })
    }

    /// Forward pass on cached visual features; equals `fuse` + `attend`.
    pub fn forward_cached(
        &self,
        f_t: &[f64],
        cache: &VisualCache,
        candidates: &[CandidateRegion],
    ) -> Result<HeadTrace, GroundingError> {
        if candidates.is_empty() {
            return Err(GroundingError::NoCandidates);
        }
        let (pre_g, g) = self.gate(f_t)?;
        let n = candidates.len();
        let mut tr = HeadTrace {
            pre_g,
            g,
            vbar: cache.vbar.clone(),
            m: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            logits: Vec::with_capacity(n),
        };
        for (vb, c) in cache.vbar.iter().zip(candidates) {
            let mut mj = Vec::with_capacity(self.config.merged_dim());
            for level in vb {
                mj.extend(level.iter().zip(&tr.g).map(|(v, gk)| v * gk));
            }
            let (a, b, t) = self.scores(&mj, &c.r_loc);
            tr.m.push(mj);
            tr.a.push(a);
            tr.b.push(b);
            tr.logits.push(t);
        }
        Ok(tr)
    }

    pub fn result(&self, tr: &HeadTrace, candidates: &[CandidateRegion], selection: Selection) -> GroundingResult {
        self.finish(&tr.m, tr.logits.clone(), candidates, selection)
    }

    /// Cross-entropy of β against `target` (a distribution over candidates).
    /// Accumulates parameter gradients, adds visual-pool gradients into
    /// `d_vbar` and returns `(loss, dL/df_t)`.
    pub fn backward(
        &self,
        f_t: &[f64],
        tr: &HeadTrace,
        candidates: &[CandidateRegion],
        target: &[f64],
        grads: &mut GroundingHead,
        d_vbar: &mut [Vec<Vec<f64>>],
    ) -> (f64, Vec<f64>) {
        let (loss, dt) = cross_entropy(&tr.logits, target);
        let dm_n = self.config.fused_dim;
        let mut dg = vec![0.0; dm_n];
        for j in 0..candidates.len() {
            let t = tr.logits[j];
            let k = self.config.logit_scale;
            let dz = dt[j] * (1.0 - (t / k) * (t / k));
            if dz == 0.0 {
                continue;
            }
            let (a, b) = (&tr.a[j], &tr.b[j]);
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            for k in 0..a.len() {
                let w = self.att_w.get(k, 0);
                grads.att_w.as_mut_slice()[k] += dz * a[k] * b[k];
                da[k] = dz * w * b[k];
                db[k] = dz * w * a[k];
            }
            let dm = self.att_v.backward(&tr.m[j], &da, &mut grads.att_v);
            self.att_t.backward(&candidates[j].r_loc, &db, &mut grads.att_t);
            for (i, vb) in tr.vbar[j].iter().enumerate() {
                let blk = &dm[i * dm_n..(i + 1) * dm_n];
                for k in 0..dm_n {
                    dg[k] += blk[k] * vb[k];
                    d_vbar[j][i][k] += blk[k] * tr.g[k];
                }
            }
        }
        let dpre: Vec<f64> = dg.iter().zip(&tr.pre_g).map(|(d, p)| d * leaky_relu_grad(*p)).collect();
        let d_ft = self.w_t.backward(f_t, &dpre, &mut grads.w_t);
        (loss, d_ft)
    }

    /// Pushes pooled-feature gradients through the per-level projections.
    pub fn backward_visual(
        &self,
        pyr: &FeatureMapPyramid,
        cache: &VisualCache,
        d_vbar: &[Vec<Vec<f64>>],
        grads: &mut GroundingHead,
    ) {
        for (i, l) in pyr.levels.iter().enumerate() {
            let mut d_cell: Vec<Option<Vec<f64>>> = vec![None; l.size * l.size];
            for (j, members) in cache.members.iter().enumerate() {
                let idx = &members[i];
                let w = 1.0 / idx.len() as f64;
                for &k in idx {
                    let acc = d_cell[k].get_or_insert_with(|| vec![0.0; self.config.fused_dim]);
                    axpy(w, &d_vbar[j][i], acc);
                }
            }
            for (k, d) in d_cell.iter().enumerate() {
                let Some(d) = d else { continue };
                let (pre, _) = cache.cells[i][k].as_ref().expect("cached cell");
                let dpre: Vec<f64> = d.iter().zip(pre).map(|(g, p)| g * leaky_relu_grad(*p)).collect();
                grads.w_v[i].w.add_outer(&dpre, l.cell(k / l.size, k % l.size));
                grads.w_v[i].b.add_column(&dpre);
            }
        }
    }

    /// Zeroed `d_vbar` buffer shaped like a cache.
    pub fn zero_vbar(cache: &VisualCache) -> Vec<Vec<Vec<f64>>> {
        cache.vbar.iter().map(|c| c.iter().map(|v| vec![0.0; v.len()]).collect()).collect()
    }
}

impl Params for GroundingHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.w_t.visit(&join(prefix, "w_t"), f);
        for (i, l) in self.w_v.iter().enumerate() {
            l.visit(&join(prefix, &format!("w_v{i}")), f);
        }
        self.att_v.visit(&join(prefix, "att_v"), f);
        self.att_t.visit(&join(prefix, "att_t"), f);
        f(&join(prefix, "att_w"), &self.att_w);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.w_t.visit_mut(&join(prefix, "w_t"), f);
        for (i, l) in self.w_v.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("w_v{i}")), f);
        }
        self.att_v.visit_mut(&join(prefix, "att_v"), f);
        self.att_t.visit_mut(&join(prefix, "att_t"), f);
        f(&join(prefix, "att_w"), &mut self.att_w);
    }
}

/// Instruction encoder plus the two grounding passes: the referred bottle(s)
/// and the destination bowl. Bottle sets (existence, classification) and the
/// single anchored bottle (exploratory) are grounded by separate heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingModel {
    pub vocab: Vocabulary,
    pub selection: Selection,
    pub encoder: LanguageEncoder,
    pub target: GroundingHead,
    pub anchor: GroundingHead,
    pub destination: GroundingHead,
}

impl Params for GroundingModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.target.visit(&join(prefix, "target"), f);
        self.anchor.visit(&join(prefix, "anchor"), f);
        self.destination.visit(&join(prefix, "destination"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.target.visit_mut(&join(prefix, "target"), f);
        self.anchor.visit_mut(&join(prefix, "anchor"), f);
        self.destination.visit_mut(&join(prefix, "destination"), f);
    }
}

/// Structural description of a [`GroundingModel`], stored alongside its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub selection: Selection,
}

/// Grounding output for one instruction on one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub target: GroundingResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<GroundingResult>,
}

impl GroundingModel {
    pub fn new(vocab: Vocabulary, config: &GroundingModelConfig, seed: u64) -> Self {
        Self {
            vocab,
            selection: config.selection,
            encoder: LanguageEncoder::new(config.encoder, seed),
            target: GroundingHead::new(config.head.clone(), seed.wrapping_add(1)),
            anchor: GroundingHead::new(config.head.clone(), seed.wrapping_add(3)),
            destination: GroundingHead::new(config.head.clone(), seed.wrapping_add(2)),
        }
    }

    pub fn target_head(&self, kind: TaskKind) -> &GroundingHead {
        match kind {
            TaskKind::Exploratory => &self.anchor,
            _ => &self.target,
        }
    }

    /// Shape-only model used to load checkpoints.
    pub fn zeros(vocab: Vocabulary, config: &GroundingModelConfig) -> Self {
        let mut m = Self::new(vocab, config, 0);
        crate::neural::scale_all(&mut m, 0.0);
        m
    }

    pub fn config(&self) -> GroundingModelConfig {
        GroundingModelConfig {
            encoder: self.encoder.config,
            head: self.target.config.clone(),
            selection: self.selection,
        }
    }

    pub fn ground_tokens(
        &self,
        tokens: &[usize],
        kind: TaskKind,
        pyr: &FeatureMapPyramid,
        candidates: &[CandidateRegion],
    ) -> Result<Grounding, GroundingError> {
        if candidates.is_empty() {
            return Err(GroundingError::NoCandidates);
        }
        let f = self.encoder.encode(tokens)?;
        let run = |h: &GroundingHead| -> Result<GroundingResult, GroundingError> {
            let cache = h.visual_cache(pyr, candidates)?;
            let tr = h.forward_cached(&f.f_t, &cache, candidates)?;
            Ok(h.result(&tr, candidates, self.selection))
        };
        Ok(Grounding {
            target: run(self.target_head(kind))?,
            destination: if crate::language::needs_destination(kind) {
                Some(run(&self.destination)?)
            } else {
                None
            },
        })
    }

    pub fn ground(
        &self,
        instruction: &str,
        kind: TaskKind,
        pyr: &FeatureMapPyramid,
        candidates: &[CandidateRegion],
    ) -> Result<Grounding, GroundingError> {
        self.ground_tokens(&self.vocab.tokenize(instruction), kind, pyr, candidates)
    }
}

/// One instruction on a scene, with ground truth in candidate indices.
#[derive(Clone, Debug)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub kind: TaskKind,
    pub target_idx: Vec<usize>,
    pub dest_idx: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    pub pyramid: FeatureMapPyramid,
    pub candidates: Vec<CandidateRegion>,
    pub tasks: Vec<TaskSample>,
}

/// Generates grounding data: scene `i` uses archetype `i mod 6 + 1` and
/// carries one instruction of each family. With `augment`, every other
/// (relation, landmark) pair that picks out exactly one bottle adds an extra
/// exploratory instruction. Tasks whose referents were not proposed by the
/// detector are skipped and counted.
pub fn build_samples(
    n_scenes: usize,
    seed: u64,
    vocab: &Vocabulary,
    pyramid: &crate::scene::PyramidConfig,
    detector: &crate::scene::DetectorConfig,
    augment: bool,
) -> Result<(Vec<SceneSample>, usize), crate::scene::SceneError> {
    let mut out = Vec::with_capacity(n_scenes);
    let mut skipped = 0;
    for i in 0..n_scenes {
        let archetype = (i % 6) as u8 + 1;
        let s_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = crate::scene::make_scene(archetype, s_seed)?;
        let pyr = crate::scene::render_features(&scene, pyramid, s_seed)?;
        let candidates = crate::scene::propose_regions(&scene, &pyr, detector, s_seed);
        let index_of = |id: usize| candidates.iter().position(|c| c.object_id == Some(id));
        let mut tasks = Vec::new();
        let mut all = Vec::new();
        for kind in TaskKind::ALL {
            all.push(crate::scene::make_task(&scene, kind, s_seed.wrapping_add(kind.ordinal() as u64))?);
        }
        if augment {
            all.extend(extra_exploratory(&scene, s_seed)?);
        }
        for task in all {
            let kind = task.intent.kind;
            let target_idx: Option<Vec<usize>> = task.truth.target_set.iter().map(|&id| index_of(id)).collect();
            let dest_idx = task.truth.destination.map(index_of);
            match (target_idx, dest_idx) {
                (Some(t), None) | (Some(t), Some(Some(_))) if !t.is_empty() => tasks.push(TaskSample {
                    tokens: vocab.tokenize(&task.instruction),
                    kind,
                    target_idx: t,
                    dest_idx: dest_idx.flatten(),
                }),
                _ => skipped += 1,
            }
        }
        out.push(SceneSample {
            pyramid: pyr,
            candidates,
            tasks,
        });
    }
    Ok((out, skipped))
}

fn extra_exploratory(scene: &crate::scene::Scene, seed: u64) -> Result<Vec<crate::scene::Task>, crate::scene::SceneError> {
    use crate::instruction::{generate, AnchorRelation, Intent};
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6175_6720);
    let mut out = Vec::new();
    for lm in scene.objects.iter().filter_map(|o| o.landmark) {
        for rel in AnchorRelation::ALL {
            if (rel, lm) == (scene.anchor_relation, scene.anchor_landmark) {
                continue;
            }
            let target = *crate::classes::ObjectClass::ALL.choose(&mut rng).expect("classes");
            let intent = Intent::exploratory(target, rel, lm);
            let Ok(truth) = crate::scene::ground_truth(scene, &intent) else { continue };
            let instruction = generate(&intent, rand::Rng::gen(&mut rng))
                .map_err(|e| crate::scene::SceneError::Generation(e.to_string()))?;
            out.push(crate::scene::Task {
                intent,
                instruction,
                truth,
            });
        }
    }
    Ok(out)
}

fn distribution(n: usize, idx: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; n];
    for &i in idx {
        t[i] = 1.0 / idx.len() as f64;
    }
    t
}

/// Summed cross-entropy over every task of one scene, and its gradient.
pub fn scene_loss(model: &GroundingModel, sample: &SceneSample) -> Result<(f64, GroundingModel), GroundingError> {
    let mut grads = crate::neural::zeros_like(model);
    let mut loss = 0.0;
    let cands = &sample.candidates;
    let tc = model.target.visual_cache(&sample.pyramid, cands)?;
    let ac = model.anchor.visual_cache(&sample.pyramid, cands)?;
    let dc = model.destination.visual_cache(&sample.pyramid, cands)?;
    let mut tv = GroundingHead::zero_vbar(&tc);
    let mut av = GroundingHead::zero_vbar(&ac);
    let mut dv = GroundingHead::zero_vbar(&dc);
    for task in &sample.tasks {
        let (feat, trace) = model.encoder.encode_traced(&task.tokens)?;
        let (head, cache, head_grads, d_vbar) = match task.kind {
            TaskKind::Exploratory => (&model.anchor, &ac, &mut grads.anchor, &mut av),
            _ => (&model.target, &tc, &mut grads.target, &mut tv),
        };
        let tr = head.forward_cached(&feat.f_t, cache, cands)?;
        let (l, mut d_ft) = head.backward(
            &feat.f_t,
            &tr,
            cands,
            &distribution(cands.len(), &task.target_idx),
            head_grads,
            d_vbar,
        );
        loss += l;
        if let Some(d) = task.dest_idx {
            let tr = model.destination.forward_cached(&feat.f_t, &dc, cands)?;
            let (l, dd) = model.destination.backward(
                &feat.f_t,
                &tr,
                cands,
                &distribution(cands.len(), &[d]),
                &mut grads.destination,
                &mut dv,
            );
            loss += l;
            axpy(1.0, &dd, &mut d_ft);
        }
        model.encoder.backward(&feat, &trace, &d_ft, &mut grads.encoder);
    }
    model.target.backward_visual(&sample.pyramid, &tc, &tv, &mut grads.target);
    model.anchor.backward_visual(&sample.pyramid, &ac, &av, &mut grads.anchor);
    model.destination.backward_visual(&sample.pyramid, &dc, &dv, &mut grads.destination);
    Ok((loss, grads))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundingTrainConfig {
    pub epochs: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Replace every label with a random candidate (chance-level control).
    pub shuffle_labels: bool,
    /// Keep updating the instruction encoder during grounding training.
    pub tune_encoder: bool,
    /// Decoupled weight decay per unit learning rate.
    pub weight_decay: f64,
}

impl Default for GroundingTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_scenes: 8,
            lr: 2e-3,
            clip_norm: 5.0,
            shuffle_labels: false,
            tune_encoder: true,
            weight_decay: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundingTrainReport {
    /// Mean loss per task before training, then after each epoch.
    pub loss_curve: Vec<f64>,
    pub tasks: usize,
}

fn shuffled(samples: &[SceneSample], seed: u64) -> Vec<SceneSample> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546);
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            let n = s.candidates.len();
            for t in &mut s.tasks {
                t.target_idx = vec![rng.gen_range(0..n)];
                if t.dest_idx.is_some() {
                    t.dest_idx = Some(rng.gen_range(0..n));
                }
            }
            s
        })
        .collect()
}

fn mean_loss(model: &GroundingModel, samples: &[SceneSample]) -> Result<f64, GroundingError> {
    let mut total = 0.0;
    let mut n = 0;
    for s in samples {
        total += scene_loss(model, s)?.0;
        n += s.tasks.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Minimizes the attention cross-entropy of both heads (and the encoder) over
/// the training scenes. Scene gradients inside a batch are computed in
/// parallel and summed in a fixed order.
pub fn train_grounding(
    model: &mut GroundingModel,
    samples: &[SceneSample],
    cfg: &GroundingTrainConfig,
    opt: &mut crate::neural::OptimizerState,
    seed: u64,
) -> Result<GroundingTrainReport, GroundingError> {
    use rand::seq::SliceRandom;
    use rayon::prelude::*;
    let data = if cfg.shuffle_labels { shuffled(samples, seed) } else { samples.to_vec() };
    let tasks: usize = data.iter().map(|s| s.tasks.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = vec![mean_loss(model, &data)?];
    for epoch in 0..cfg.epochs {
        // Cosine learning-rate decay over the run.
        let progress = epoch as f64 / cfg.epochs as f64;
        opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_scenes.max(1)) {
            let results: Vec<Result<(f64, GroundingModel), GroundingError>> =
                chunk.par_iter().map(|&i| scene_loss(model, &data[i])).collect();
            let n_tasks: usize = chunk.iter().map(|&i| data[i].tasks.len()).sum();
            let mut grads = crate::neural::zeros_like(model);
            for r in results {
                let (l, g) = r?;
                total += l;
                crate::neural::accumulate(&mut grads, &g, 1.0 / n_tasks.max(1) as f64);
            }
            if !cfg.tune_encoder {
                crate::neural::scale_all(&mut grads.encoder, 0.0);
            }
            crate::neural::clip_global_norm(&mut grads, cfg.clip_norm);
            opt.apply(model, &grads)?;
            if cfg.weight_decay > 0.0 {
                crate::neural::scale_all(model, 1.0 - opt.config.lr * cfg.weight_decay);
            }
        }
        curve.push(total / tasks.max(1) as f64);
    }
    Ok(GroundingTrainReport {
        loss_curve: curve,
        tasks,
    })
}

/// Full recipe: slot-decoding pretraining of the encoder, then joint
/// grounding training of encoder and heads.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundingFitConfig {
    pub pretrain_epochs: usize,
    pub train: GroundingTrainConfig,
    pub selection: Selection,
    pub fused_dim: usize,
    pub att_dim: usize,
    pub logit_scale: f64,
}

impl Default for GroundingFitConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 30,
            train: GroundingTrainConfig::default(),
            selection: Selection::Cosine,
            fused_dim: 64,
            att_dim: 32,
            logit_scale: LOGIT_SCALE,
        }
    }
}

pub fn fit_grounding(
    vocab: &Vocabulary,
    samples: &[SceneSample],
    cfg: &GroundingFitConfig,
    seed: u64,
) -> Result<(GroundingModel, GroundingTrainReport), GroundingError> {
    let enc = EncoderConfig::new(vocab.len());
    let channels = samples
        .first()
        .map(|s| s.pyramid.channels())
        .ok_or_else(|| GroundingError::Config("no training scenes".into()))?;
    let config = GroundingModelConfig {
        encoder: enc,
        head: HeadConfig {
            fused_dim: cfg.fused_dim,
            att_dim: cfg.att_dim,
            logit_scale: cfg.logit_scale,
            ..HeadConfig::new(enc.feature_dim(), channels)
        },
        selection: cfg.selection,
    };
    let mut model = GroundingModel::new(vocab.clone(), &config, seed);
    if cfg.pretrain_epochs > 0 {
        model.encoder = crate::language::train_language(vocab, enc, cfg.pretrain_epochs, seed ^ 0x70)?.0;
    }
    let mut opt = crate::neural::OptimizerState::new(crate::neural::AdamConfig::default());
    let report = train_grounding(&mut model, samples, &cfg.train, &mut opt, seed)?;
    Ok((model, report))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GroundingEval {
    pub tasks: usize,
    /// Target and (when present) destination both correct.
    pub accuracy: f64,
    pub target_accuracy: f64,
    pub destination_accuracy: f64,
    /// Accuracy per family, in [`TaskKind::ALL`] order.
    pub per_kind: Vec<f64>,
    pub mean_candidates: f64,
}

/// Whether a grounding picks exactly the ground-truth referents.
pub fn grounding_correct(g: &Grounding, kind: TaskKind, target_idx: &[usize], dest_idx: Option<usize>) -> (bool, bool) {
    let target_ok = if kind == TaskKind::Exploratory {
        target_idx == [g.target.selected]
    } else {
        let mut set = g.target.referent_set();
        set.sort_unstable();
        let mut truth = target_idx.to_vec();
        truth.sort_unstable();
        set == truth
    };
    let dest_ok = match (dest_idx, &g.destination) {
        (None, _) => true,
        (Some(d), Some(r)) => r.selected == d,
        (Some(_), None) => false,
    };
    (target_ok, dest_ok)
}

pub fn evaluate_grounding(model: &GroundingModel, samples: &[SceneSample]) -> Result<GroundingEval, GroundingError> {
    let mut n = 0usize;
    let (mut both, mut tgt, mut dst, mut dst_n) = (0usize, 0usize, 0usize, 0usize);
    let mut per = [(0usize, 0usize); 3];
    let mut cand = 0usize;
    for s in samples {
        for t in &s.tasks {
            let g = model.ground_tokens(&t.tokens, t.kind, &s.pyramid, &s.candidates)?;
            let (a, b) = grounding_correct(&g, t.kind, &t.target_idx, t.dest_idx);
            n += 1;
            cand += s.candidates.len();
            tgt += a as usize;
            if t.dest_idx.is_some() {
                dst_n += 1;
                dst += b as usize;
            }
            both += (a && b) as usize;
            per[t.kind.ordinal()].0 += (a && b) as usize;
            per[t.kind.ordinal()].1 += 1;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(GroundingEval {
        tasks: n,
        accuracy: frac(both, n),
        target_accuracy: frac(tgt, n),
        destination_accuracy: frac(dst, dst_n),
        per_kind: per.iter().map(|&(a, b)| frac(a, b)).collect(),
        mean_candidates: frac(cand, n),
    })
}

/// Pixel box helper for tests and demos.
pub fn candidate(bbox: BBox, r_loc: Vec<f64>) -> CandidateRegion {
    CandidateRegion {
        object_id: None,
        bbox,
        r_loc,
        confidence: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{grad_check, GradCheckConfig};
    use rand::Rng;

    fn lrelu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            0.01 * x
        }
    }

    fn lin(l: &Linear, x: &[f64]) -> Vec<f64> {
        (0..l.w.rows())
            .map(|k| (0..x.len()).map(|j| l.w.get(k, j) * x[j]).sum::<f64>() + l.b.get(k, 0))
            .collect()
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, sizes: &[usize], channels: &[usize]) -> FeatureMapPyramid {
        let levels = sizes
            .iter()
            .zip(channels)
            .map(|(&s, &c)| FeatureMap {
                size: s,
                channels: c,
                data: (0..s * s * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        FeatureMapPyramid { frame: 64.0, levels }
    }

    fn random_candidates(rng: &mut ChaCha8Rng, n: usize, region_dim: usize) -> Vec<CandidateRegion> {
        (0..n)
            .map(|_| {
                let b = BBox::centered(rng.gen_range(4.0..60.0), rng.gen_range(4.0..60.0), rng.gen_range(2.0..40.0), rng.gen_range(2.0..40.0));
                candidate(b, (0..region_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect()
    }

    /// Direct scalar evaluation of the fusion/attention formulas.
    fn oracle(h: &GroundingHead, f_t: &[f64], pyr: &FeatureMapPyramid, cands: &[CandidateRegion]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let g: Vec<f64> = lin(&h.w_t, f_t).into_iter().map(lrelu).collect();
        let fine = pyr.levels.last().unwrap().size;
        let px = pyr.frame / fine as f64;
        let mut logits = Vec::new();
        let mut ms = Vec::new();
        for c in cands {
            let mut inside = Vec::new();
            for y in 0..fine {
                for x in 0..fine {
                    let (cx, cy) = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
                    if cx >= c.bbox.x0 && cx <= c.bbox.x1 && cy >= c.bbox.y0 && cy <= c.bbox.y1 {
                        inside.push((y, x));
                    }
                }
            }
            if inside.is_empty() {
                let (cx, cy) = c.bbox.center();
                let q = |v: f64| ((v / px).floor().max(0.0) as usize).min(fine - 1);
                inside.push((q(cy), q(cx)));
            }
            let mut m = Vec::new();
            for (i, l) in pyr.levels.iter().enumerate() {
                let mut acc = vec![0.0; g.len()];
                for &(y, x) in &inside {
                    let (ly, lx) = (y * l.size / fine, x * l.size / fine);
                    let cell = &l.data[(ly * l.size + lx) * l.channels..(ly * l.size + lx + 1) * l.channels];
                    let v = lin(&h.w_v[i], cell);
                    for k in 0..g.len() {
                        acc[k] += g[k] * lrelu(v[k]) / inside.len() as f64;
                    }
                }
                m.extend(acc);
            }
            let a = lin(&h.att_v, &m);
            let b = lin(&h.att_t, &c.r_loc);
            let z: f64 = (0..a.len()).map(|k| h.att_w.get(k, 0) * a[k] * b[k]).sum();
            let kappa = h.config.logit_scale;
            logits.push(kappa * (z / kappa).tanh());
            ms.push(m);
        }
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|t| (t - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let beta: Vec<f64> = e.iter().map(|v| v / z).collect();
        let u: Vec<f64> = (0..ms[0].len()).map(|k| (0..ms.len()).map(|j| beta[j] * ms[j][k]).sum()).collect();
        let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = ms
            .iter()
            .map(|m| {
                let nm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nm == 0.0 || nu == 0.0 {
                    0.0
                } else {
                    m.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / (nm * nu)
                }
            })
            .collect();
        (logits, beta, s)
    }

    fn random_config(rng: &mut ChaCha8Rng) -> (HeadConfig, Vec<usize>) {
        let fine = [2usize, 4][rng.gen_range(0..2)];
        let n_levels = rng.gen_range(1..=3);
        let divisors: Vec<usize> = [1usize, 2, 4].into_iter().filter(|d| fine.is_multiple_of(*d)).collect();
        let mut sizes: Vec<usize> = (0..n_levels).map(|_| divisors[rng.gen_range(0..divisors.len())]).collect();
        sizes.push(fine);
        sizes.sort_unstable();
        let channels = sizes.iter().map(|_| rng.gen_range(1..=4)).collect();
        let cfg = HeadConfig {
            feature_dim: rng.gen_range(1..=5),
            level_channels: channels,
            fused_dim: rng.gen_range(1..=4),
            att_dim: rng.gen_range(1..=4),
            region_dim: rng.gen_range(1..=4),
            logit_scale: rng.gen_range(0.5..6.0),
        };
        (cfg, sizes)
    }

    #[test]
    fn fuse_and_attend_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..150 {
            let (cfg, sizes) = random_config(&mut rng);
            let h = GroundingHead::new(cfg.clone(), trial);
            let pyr = random_pyramid(&mut rng, &sizes, &cfg.level_channels);
            let n = rng.gen_range(1..=3);
            let cands = random_candidates(&mut rng, n, cfg.region_dim);
            let f_t: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let res = h.attend(&h.fuse(&f_t, &pyr).unwrap(), &cands, Selection::Cosine).unwrap();
            let (logits, beta, s) = oracle(&h, &f_t, &pyr, &cands);
            for j in 0..cands.len() {
                assert!((res.logits[j] - logits[j]).abs() < 1e-9, "trial {trial}");
                assert!((res.beta[j] - beta[j]).abs() < 1e-9);
                assert!((res.s_loc[j] - s[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cached_forward_equals_full_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..40 {
            let (cfg, sizes) = random_config(&mut rng);
            let h = GroundingHead::new(cfg.clone(), trial);
            let pyr = random_pyramid(&mut rng, &sizes, &cfg.level_channels);
            let cands = random_candidates(&mut rng, 3, cfg.region_dim);
            let f_t: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let full = h.attend(&h.fuse(&f_t, &pyr).unwrap(), &cands, Selection::Attention).unwrap();
            let cache = h.visual_cache(&pyr, &cands).unwrap();
            let fast = h.result(&h.forward_cached(&f_t, &cache, &cands).unwrap(), &cands, Selection::Attention);
            for j in 0..3 {
                assert!((full.logits[j] - fast.logits[j]).abs() < 1e-12);
            }
            assert_eq!(full.selected, fast.selected);
        }
    }

    fn tiny_model(rng: &mut ChaCha8Rng) -> (GroundingModel, SceneSample) {
        let vocab = Vocabulary::from_templates();
        let mut enc = EncoderConfig::new(vocab.len());
        enc.embed_dim = 4;
        enc.hidden_dim = 3;
        let head = HeadConfig {
            feature_dim: enc.feature_dim(),
            level_channels: vec![3, 2],
            fused_dim: 3,
            att_dim: 4,
            region_dim: 3,
            logit_scale: LOGIT_SCALE,
        };
        let cfg = GroundingModelConfig {
            encoder: enc,
            head,
            selection: Selection::Cosine,
        };
        let model = GroundingModel::new(vocab.clone(), &cfg, 5);
        let pyr = random_pyramid(rng, &[2, 4], &[3, 2]);
        let candidates = random_candidates(rng, 3, 3);
        let sample = SceneSample {
            pyramid: pyr,
            candidates,
            tasks: vec![
                TaskSample {
                    tokens: vocab.tokenize("find all the pills and put them in the red bowl"),
                    kind: TaskKind::Classification,
                    target_idx: vec![0, 2],
                    dest_idx: Some(1),
                },
                TaskSample {
                    tokens: vocab.tokenize("check the bottle on the box for rice"),
                    kind: TaskKind::Exploratory,
                    target_idx: vec![1],
                    dest_idx: None,
                },
            ],
        };
        (model, sample)
    }

    #[test]
    fn gradients_through_heads_and_encoder_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (model, sample) = tiny_model(&mut rng);
        let report = grad_check(
            &model,
            |m| scene_loss(m, &sample).unwrap(),
            GradCheckConfig {
                samples: 600,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn identical_candidates_get_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (model, sample) = tiny_model(&mut rng);
        let c = sample.candidates[0].clone();
        let cands = vec![c.clone(), c.clone(), c];
        let g = model
            .ground("find the bottle with the pill, put it in the red bowl", TaskKind::Existence, &sample.pyramid, &cands)
            .unwrap();
        for b in &g.target.beta {
            assert!((b - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(g.target.referent_set().len(), 3);
    }

    #[test]
    fn single_and_empty_candidate_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (model, sample) = tiny_model(&mut rng);
        let one = &sample.candidates[..1];
        let g = model.ground_tokens(&sample.tasks[0].tokens, TaskKind::Classification, &sample.pyramid, one).unwrap();
        assert_eq!(g.target.beta, vec![1.0]);
        assert_eq!(g.target.selected, 0);
        assert_eq!(g.target.center_px, {
            let (x, y) = one[0].bbox.center();
            [x, y]
        });
        assert!(matches!(
            model.ground_tokens(&sample.tasks[0].tokens, TaskKind::Classification, &sample.pyramid, &[]),
            Err(GroundingError::NoCandidates)
        ));
    }

    #[test]
    fn zero_gate_gives_zero_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut h = GroundingHead::new(HeadConfig::new(4, vec![2, 3]), 1);
        h.w_t.w.fill(0.0);
        h.w_t.b.fill(0.0);
        let pyr = random_pyramid(&mut rng, &[2, 4], &[2, 3]);
        let fused = h.fuse(&[0.3, -0.2, 0.5, 1.0], &pyr).unwrap();
        assert!(fused.merged.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_pyramid_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = GroundingHead::new(HeadConfig::new(4, vec![2, 3]), 1);
        let pyr = random_pyramid(&mut rng, &[2, 4], &[3, 3]);
        assert!(matches!(h.fuse(&[0.0; 4], &pyr), Err(GroundingError::Config(_))));
        let pyr = random_pyramid(&mut rng, &[3, 4], &[2, 3]);
        assert!(matches!(h.fuse(&[0.0; 4], &pyr), Err(GroundingError::Config(_))));
    }

    #[test]
    fn reordering_candidates_reorders_outputs() {
        // Swapping which candidate is which permutes the outputs the same way.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (model, sample) = tiny_model(&mut rng);
        let toks = &sample.tasks[0].tokens;
        let a = model.ground_tokens(toks, TaskKind::Classification, &sample.pyramid, &sample.candidates).unwrap();
        let mut rev = sample.candidates.clone();
        rev.reverse();
        let b = model.ground_tokens(toks, TaskKind::Classification, &sample.pyramid, &rev).unwrap();
        for j in 0..3 {
            assert!((a.target.s_loc[j] - b.target.s_loc[2 - j]).abs() < 1e-12);
            assert!((a.target.beta[j] - b.target.beta[2 - j]).abs() < 1e-12);
        }
    }

    #[test]
    fn bottle_contents_do_not_reach_the_scores() {
        let vocab = Vocabulary::from_templates();
        let pc = crate::scene::PyramidConfig::default();
        let enc = EncoderConfig::new(vocab.len());
        let cfg = GroundingModelConfig {
            encoder: enc,
            head: HeadConfig::new(enc.feature_dim(), pc.channels.to_vec()),
            selection: Selection::Cosine,
        };
        let model = GroundingModel::new(vocab, &cfg, 2);
        let scene = crate::scene::make_scene(1, 4).unwrap();
        let mut permuted = scene.clone();
        let ids = permuted.bottle_ids();
        let first = permuted.objects[ids[0]].contents;
        for w in ids.windows(2) {
            permuted.objects[w[0]].contents = permuted.objects[w[1]].contents;
        }
        permuted.objects[*ids.last().unwrap()].contents = first;
        let text = "find the bottle with the pill, put it in the left bowl";
        let run = |s: &crate::scene::Scene| {
            let p = crate::scene::render_features(s, &pc, 1).unwrap();
            let c = crate::scene::propose_regions(s, &p, &crate::scene::DetectorConfig::default(), 1);
            model.ground(text, TaskKind::Existence, &p, &c).unwrap()
        };
        assert_eq!(run(&scene).target.s_loc, run(&permuted).target.s_loc);
    }

    #[test]
    fn shuffled_labels_keep_one_label_per_task() {
        let vocab = Vocabulary::from_templates();
        let (samples, _) = build_samples(
            6,
            1,
            &vocab,
            &crate::scene::PyramidConfig::default(),
            &crate::scene::DetectorConfig::default(),
            true,
        )
        .unwrap();
        let sh = shuffled(&samples, 2);
        for (a, b) in samples.iter().zip(&sh) {
            assert_eq!(a.tasks.len(), b.tasks.len());
            for (x, y) in a.tasks.iter().zip(&b.tasks) {
                assert_eq!(y.target_idx.len(), 1);
                assert_eq!(x.dest_idx.is_some(), y.dest_idx.is_some());
            }
        }
    }
}

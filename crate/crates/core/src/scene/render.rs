//! Procedural three-level feature pyramid standing in for a CNN backbone.
//!
//! Every level starts with the same 16 base planes per cell: kind coverage
//! (bottle, bowl, distractor), color coverage (7), landmark-type coverage (3),
//! shape size and the normalized cell-center position. The coarse level adds
//! directional context (which kinds sit in the neighbouring slots), the middle
//! level adds 3×3-blurred copies of the base planes. Remaining channels up to
//! the configured width are fixed random mixtures of the semantic planes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, Scene, SceneError, FRAME, GRID, SLOT};
use crate::classes::{Color, Landmark};

pub const BASE_CHANNELS: usize = 16;
/// Channel indices of the normalized cell-center position.
pub const POSITION_CHANNELS: [usize; 2] = [14, 15];
const SIZE_CHANNEL: usize = 13;
/// Planes whose neighbourhood the coarse level describes: three kinds and three landmark types.
pub const CONTEXT_PLANES: usize = 6;
const DIRECTIONS: usize = 8;
const MIX_SEED: u64 = 0x6d69_7865;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub size: usize,
    pub channels: usize,
    /// Row-major cells, channels contiguous per cell.
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            data: vec![0.0; size * size * channels],
        }
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.size + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.size + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.size + x) * self.channels + c]
    }

    /// Per-cell pixel box in a frame of `frame` px.
    pub fn cell_box(&self, y: usize, x: usize, frame: f64) -> BBox {
        let s = frame / self.size as f64;
        BBox {
            x0: x as f64 * s,
            y0: y as f64 * s,
            x1: (x + 1) as f64 * s,
            y1: (y + 1) as f64 * s,
        }
    }
}

/// Feature maps from coarse to fine; each level doubles the grid size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapPyramid {
    pub frame: f64,
    pub levels: Vec<FeatureMap>,
}

impl FeatureMapPyramid {
    pub fn finest(&self) -> &FeatureMap {
        self.levels.last().expect("pyramid has levels")
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.channels).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Channel counts for the 8×8, 16×16 and 32×32 levels.
    pub channels: [usize; 3],
    /// Standard deviation of the noise added to unoccupied cells.
    pub noise: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            channels: [64, 32, 16],
            noise: 0.02,
        }
    }
}

impl PyramidConfig {
    pub fn full_scale() -> Self {
        Self {
            channels: [1024, 512, 256],
            ..Self::default()
        }
    }

    fn semantic(level: usize) -> usize {
        match level {
            0 => BASE_CHANNELS + CONTEXT_PLANES * DIRECTIONS,
            1 => BASE_CHANNELS + BASE_CHANNELS - POSITION_CHANNELS.len(),
            _ => BASE_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, &c) in self.channels.iter().enumerate() {
            if c < Self::semantic(i) {
                return Err(SceneError::Invalid(format!(
                    "level {i} needs at least {} channels, got {c}",
                    Self::semantic(i)
                )));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SceneError::Invalid("noise must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

fn base_map(scene: &Scene, size: usize) -> (FeatureMap, Vec<bool>) {
    let mut map = FeatureMap::zeros(size, BASE_CHANNELS);
    let mut occupied = vec![false; size * size];
    let cell_area = (FRAME / size as f64).powi(2);
    for y in 0..size {
        for x in 0..size {
            let cb = map.cell_box(y, x, FRAME);
            let (cx, cy) = cb.center();
            let cell = map.cell_mut(y, x);
            for o in &scene.objects {
                let cov = o.bbox.overlap_area(&cb) / cell_area;
                if cov <= 0.0 {
                    continue;
                }
                occupied[y * size + x] = true;
                cell[o.kind.ordinal()] += cov;
                cell[3 + o.color.ordinal()] += cov;
                if let Some(l) = o.landmark {
                    cell[3 + Color::ALL.len() + l.ordinal()] += cov;
                }
                cell[SIZE_CHANNEL] += cov * o.bbox.width().max(o.bbox.height()) / SLOT;
            }
            cell[POSITION_CHANNELS[0]] = cx / FRAME;
            cell[POSITION_CHANNELS[1]] = cy / FRAME;
        }
    }
    (map, occupied)
}

/// Presence of each context plane in each slot (kinds, then landmark types).
fn slot_presence(scene: &Scene) -> Vec<[f64; CONTEXT_PLANES]> {
    let mut p = vec![[0.0; CONTEXT_PLANES]; GRID * GRID];
    for o in &scene.objects {
        let (r, c) = o.slot();
        if r < GRID && c < GRID {
            let cell = &mut p[r * GRID + c];
            cell[o.kind.ordinal()] = 1.0;
            if let Some(l) = o.landmark {
                cell[3 + l.ordinal()] = 1.0;
            }
        }
    }
    p
}

/// Directional context of slot (r, c): immediate neighbour up/down/left/right,
/// then the maximum over slots two or more steps away in each direction.
fn context(p: &[[f64; CONTEXT_PLANES]], r: usize, c: usize, out: &mut [f64]) {
    let at = |rr: isize, cc: isize, k: usize| -> f64 {
        if rr < 0 || cc < 0 || rr >= GRID as isize || cc >= GRID as isize {
            0.0
        } else {
            p[rr as usize * GRID + cc as usize][k]
        }
    };
    let (r, c) = (r as isize, c as isize);
    let g = GRID as isize;
    for k in 0..CONTEXT_PLANES {
        let far = |dr: isize, dc: isize| -> f64 {
            let mut m: f64 = 0.0;
            let mut step = 2;
            loop {
                let (rr, cc) = (r + dr * step, c + dc * step);
                if rr < 0 || cc < 0 || rr >= g || cc >= g {
                    break;
                }
                m = m.max(at(rr, cc, k));
                step += 1;
            }
            m
        };
        let o = &mut out[k * DIRECTIONS..(k + 1) * DIRECTIONS];
        o[0] = at(r - 1, c, k);
        o[1] = at(r + 1, c, k);
        o[2] = at(r, c - 1, k);
        o[3] = at(r, c + 1, k);
        o[4] = far(-1, 0);
        o[5] = far(1, 0);
        o[6] = far(0, -1);
        o[7] = far(0, 1);
    }
}

fn mixture_weights(level: usize, n_out: usize, n_in: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(MIX_SEED + level as u64);
    let bound = 1.0 / (n_in as f64).sqrt();
    let u = rand_distr::Uniform::new_inclusive(-bound, bound);
    (0..n_out * n_in).map(|_| u.sample(&mut rng)).collect()
}

/// Renders the feature pyramid of a scene. Same scene and seed give a
/// bit-identical pyramid; noise touches only unoccupied cells.
pub fn render_features(scene: &Scene, cfg: &PyramidConfig, seed: u64) -> Result<FeatureMapPyramid, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(1e-300)).expect("valid sigma");
    let presence = slot_presence(scene);
    let mut levels = Vec::with_capacity(3);
    for (li, &channels) in cfg.channels.iter().enumerate() {
        let size = GRID << li;
        let (base, occupied) = base_map(scene, size);
        let sem = PyramidConfig::semantic(li);
        let mix = mixture_weights(li, channels - sem, sem);
        let mut map = FeatureMap::zeros(size, channels);
        let mut semantic = vec![0.0; sem];
        for y in 0..size {
            for x in 0..size {
                semantic.iter_mut().for_each(|v| *v = 0.0);
                semantic[..BASE_CHANNELS].copy_from_slice(base.cell(y, x));
                match li {
                    0 => context(&presence, y, x, &mut semantic[BASE_CHANNELS..]),
                    1 => {
                        let mut k = BASE_CHANNELS;
                        for ch in (0..BASE_CHANNELS).filter(|c| !POSITION_CHANNELS.contains(c)) {
                            let mut s = 0.0;
                            for dy in -1isize..=1 {
                                for dx in -1isize..=1 {
                                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                                    if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                                        s += base.get(yy as usize, xx as usize, ch);
                                    }
                                }
                            }
                            semantic[k] = s / 9.0;
                            k += 1;
                        }
                    }
                    _ => {}
                }
                if !occupied[y * size + x] && cfg.noise > 0.0 {
                    for (ch, v) in semantic.iter_mut().enumerate() {
                        if !POSITION_CHANNELS.contains(&ch) {
                            *v += noise.sample(&mut rng);
                        }
                    }
                }
                let cell = map.cell_mut(y, x);
                cell[..sem].copy_from_slice(&semantic);
                for (j, out) in cell[sem..].iter_mut().enumerate() {
                    *out = crate::neural::dot(&mix[j * sem..(j + 1) * sem], &semantic);
                }
            }
        }
        levels.push(map);
    }
    Ok(FeatureMapPyramid { frame: FRAME, levels })
}

/// Channel index of a landmark-type plane in the base block.
pub fn landmark_channel(l: Landmark) -> usize {
    3 + Color::ALL.len() + l.ordinal()
}

/// Channel index of a color plane in the base block.
pub fn color_channel(c: Color) -> usize {
    3 + c.ordinal()
}

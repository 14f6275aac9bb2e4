use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::render::{FeatureMap, FeatureMapPyramid, BASE_CHANNELS, POSITION_CHANNELS};
use super::{slot_center, BBox, Scene, FRAME, GRID};

/// Length of a region feature: 4 geometry values + 14 pooled appearance planes.
pub const REGION_DIM: usize = 4 + BASE_CHANNELS - POSITION_CHANNELS.len();

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Standard deviation of box-center jitter, px.
    pub jitter_px: f64,
    pub p_miss: f64,
    /// Mean number of spurious regions per scene.
    pub fp_rate: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            jitter_px: 2.0,
            p_miss: 0.0,
            fp_rate: 0.2,
        }
    }
}

impl DetectorConfig {
    pub fn exact() -> Self {
        Self {
            jitter_px: 0.0,
            p_miss: 0.0,
            fp_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRegion {
    /// Scene object this region was proposed for; `None` for a false positive.
    pub object_id: Option<usize>,
    pub bbox: BBox,
    pub r_loc: Vec<f64>,
    pub confidence: f64,
}

/// Cells of `map` whose centers lie inside `b`; falls back to the cell
/// containing the box center when none do.
pub fn cells_in_box(map: &FeatureMap, b: &BBox, frame: f64) -> Vec<(usize, usize)> {
    let s = frame / map.size as f64;
    let mut cells = Vec::new();
    for y in 0..map.size {
        let cy = (y as f64 + 0.5) * s;
        if cy < b.y0 || cy > b.y1 {
            continue;
        }
        for x in 0..map.size {
            let cx = (x as f64 + 0.5) * s;
            if cx >= b.x0 && cx <= b.x1 {
                cells.push((y, x));
            }
        }
    }
    if cells.is_empty() {
        let (cx, cy) = b.center();
        let clamp = |v: f64| ((v / s).floor().max(0.0) as usize).min(map.size - 1);
        cells.push((clamp(cy), clamp(cx)));
    }
    cells
}

/// Region feature: normalized center and size, then the finest-level base
/// planes (without position) averaged over the cells inside the box.
pub fn region_feature(pyramid: &FeatureMapPyramid, b: &BBox) -> Vec<f64> {
    let f = pyramid.frame;
    let (cx, cy) = b.center();
    let mut r = vec![cx / f, cy / f, b.width() / f, b.height() / f];
    let fine = pyramid.finest();
    let cells = cells_in_box(fine, b, f);
    let n = cells.len() as f64;
    for ch in (0..BASE_CHANNELS).filter(|c| !POSITION_CHANNELS.contains(c)) {
        r.push(cells.iter().map(|&(y, x)| fine.get(y, x, ch)).sum::<f64>() / n);
    }
    r
}

fn clamp_box(b: BBox) -> BBox {
    let dx = if b.x0 < 0.0 {
        -b.x0
    } else if b.x1 > FRAME {
        FRAME - b.x1
    } else {
        0.0
    };
    let dy = if b.y0 < 0.0 {
        -b.y0
    } else if b.y1 > FRAME {
        FRAME - b.y1
    } else {
        0.0
    };
    BBox {
        x0: b.x0 + dx,
        y0: b.y0 + dy,
        x1: b.x1 + dx,
        y1: b.y1 + dy,
    }
}

/// Simulated detector: one jittered box per object (each dropped with
/// probability `p_miss`) plus Poisson-many spurious boxes on empty slots,
/// returned in seeded random order.
pub fn propose_regions(
    scene: &Scene,
    pyramid: &FeatureMapPyramid,
    cfg: &DetectorConfig,
    seed: u64,
) -> Vec<CandidateRegion> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, cfg.jitter_px.max(1e-300)).expect("valid sigma");
    let mut out = Vec::new();
    for o in &scene.objects {
        if cfg.p_miss > 0.0 && rng.gen::<f64>() < cfg.p_miss {
            continue;
        }
        let (dx, dy) = if cfg.jitter_px > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let (cx, cy) = o.bbox.center();
        let bbox = clamp_box(BBox::centered(cx + dx, cy + dy, o.bbox.width(), o.bbox.height()));
        out.push(CandidateRegion {
            object_id: Some(o.id),
            r_loc: region_feature(pyramid, &bbox),
            bbox,
            confidence: rng.gen_range(0.6..1.0),
        });
    }
    if cfg.fp_rate > 0.0 {
        let n_fp = Poisson::new(cfg.fp_rate).expect("positive rate").sample(&mut rng) as usize;
        let mut free: Vec<(usize, usize)> = (0..GRID)
            .flat_map(|r| (0..GRID).map(move |c| (r, c)))
            .filter(|&(r, c)| !scene.objects.iter().any(|o| o.slot() == (r, c)))
            .collect();
        free.shuffle(&mut rng);
        for &(r, c) in free.iter().take(n_fp) {
            let (cx, cy) = slot_center(r, c);
            let w = rng.gen_range(14.0..28.0);
            let h = rng.gen_range(14.0..28.0);
            let bbox = BBox::centered(cx + rng.gen_range(-2.0..2.0), cy + rng.gen_range(-2.0..2.0), w, h);
            out.push(CandidateRegion {
                object_id: None,
                r_loc: region_feature(pyramid, &bbox),
                bbox,
                confidence: rng.gen_range(0.2..0.6),
            });
        }
    }
    out.shuffle(&mut rng);
    out
}

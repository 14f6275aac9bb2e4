//! Geometric semantics of every relation word, in image pixels. Image y grows
//! towards the camera, so "behind" means smaller y.

use super::{BBox, BowlLayout, ObjectKind, Scene};
use crate::instruction::{AnchorRelation, DestRelation, Destination};

/// Minimum center-x offset for "left of" / "right of".
pub const SIDE_DX: f64 = 20.0;
/// Maximum center-y offset for two objects to count as in the same row.
pub const ROW_BAND: f64 = 16.0;
/// Maximum vertical gap for "on"; anything further above is "behind".
pub const ON_GAP: f64 = 12.0;
/// Maximum horizontal gap for "next to".
pub const NEXT_TO_GAP: f64 = 16.0;

fn x_overlap(a: &BBox, b: &BBox) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1
}

fn y_overlap(a: &BBox, b: &BBox) -> bool {
    a.y0 < b.y1 && b.y0 < a.y1
}

/// Whether the object in box `a` stands in `rel` to the landmark in box `l`.
pub fn anchor_holds(rel: AnchorRelation, a: &BBox, l: &BBox) -> bool {
    let (ax, ay) = a.center();
    let (lx, ly) = l.center();
    let same_row = (ay - ly).abs() <= ROW_BAND;
    match rel {
        AnchorRelation::LeftOf => same_row && lx - ax >= SIDE_DX,
        AnchorRelation::RightOf => same_row && ax - lx >= SIDE_DX,
        AnchorRelation::On => x_overlap(a, l) && ay < ly && l.y0 - a.y1 <= ON_GAP,
        AnchorRelation::Behind => x_overlap(a, l) && ay < ly && l.y0 - a.y1 > ON_GAP,
        AnchorRelation::InFrontOf => x_overlap(a, l) && ay > ly,
        AnchorRelation::NextTo => {
            let gap = (a.x0 - l.x1).max(l.x0 - a.x1);
            y_overlap(a, l) && gap <= NEXT_TO_GAP
        }
    }
}

/// The bowl a destination phrase names in this scene, if the layout supports it.
///
/// Colors name the bowl of that color. Relation words follow the layout: a
/// row names its bowls left/middle/right by center x, a column names them
/// back/front by center y. Scattered bowls have no relation names.
pub fn bowl_for(scene: &Scene, dest: Destination) -> Option<usize> {
    let bowls: Vec<_> = scene.objects.iter().filter(|o| o.kind == ObjectKind::Bowl).collect();
    match dest {
        Destination::Color(c) => {
            let mut m = bowls.iter().filter(|b| b.color == c);
            let first = m.next()?;
            m.next().is_none().then_some(first.id)
        }
        Destination::Relation(r) => {
            let by_x = |pick_max: bool| {
                let it = bowls.iter().map(|b| (b.bbox.center().0, b.id));
                if pick_max {
                    it.max_by(|a, b| a.0.total_cmp(&b.0)).map(|p| p.1)
                } else {
                    it.min_by(|a, b| a.0.total_cmp(&b.0)).map(|p| p.1)
                }
            };
            let by_y = |pick_max: bool| {
                let it = bowls.iter().map(|b| (b.bbox.center().1, b.id));
                if pick_max {
                    it.max_by(|a, b| a.0.total_cmp(&b.0)).map(|p| p.1)
                } else {
                    it.min_by(|a, b| a.0.total_cmp(&b.0)).map(|p| p.1)
                }
            };
            match (scene.bowl_layout, r) {
                (BowlLayout::Row, DestRelation::Left) => by_x(false),
                (BowlLayout::Row, DestRelation::Right) => by_x(true),
                (BowlLayout::Row, DestRelation::Middle) => {
                    let (l, rr) = (by_x(false)?, by_x(true)?);
                    let mut mid = bowls.iter().filter(|b| b.id != l && b.id != rr);
                    let m = mid.next()?;
                    mid.next().is_none().then_some(m.id)
                }
                (BowlLayout::Column, DestRelation::Back) => by_y(false),
                (BowlLayout::Column, DestRelation::Front) => by_y(true),
                _ => None,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{object_size, slot_center};
    use super::*;
    use crate::classes::Landmark;

    fn bottle_at(r: usize, c: usize) -> BBox {
        let (cx, cy) = slot_center(r, c);
        let (w, h) = object_size(ObjectKind::Bottle, None);
        BBox::centered(cx, cy, w, h)
    }

    fn landmark_at(l: Landmark, r: usize, c: usize) -> BBox {
        let (cx, cy) = slot_center(r, c);
        let (w, h) = object_size(ObjectKind::Distractor, Some(l));
        BBox::centered(cx, cy, w, h)
    }

    #[test]
    fn slot_neighbours_get_the_expected_relations() {
        use AnchorRelation::*;
        for l in Landmark::ALL {
            let lm = landmark_at(l, 4, 4);
            let cases = [
                ((3, 4), On),
                ((1, 4), Behind),
                ((5, 4), InFrontOf),
                ((7, 4), InFrontOf),
                ((4, 3), NextTo),
                ((4, 5), NextTo),
                ((4, 1), LeftOf),
                ((4, 6), RightOf),
            ];
            for ((r, c), rel) in cases {
                assert!(anchor_holds(rel, &bottle_at(r, c), &lm), "{l:?} {rel:?} at {r},{c}");
            }
            assert!(!anchor_holds(On, &bottle_at(2, 4), &lm));
            assert!(!anchor_holds(Behind, &bottle_at(3, 4), &lm));
            assert!(!anchor_holds(NextTo, &bottle_at(4, 2), &lm));
            assert!(!anchor_holds(NextTo, &bottle_at(3, 3), &lm));
            assert!(!anchor_holds(LeftOf, &bottle_at(3, 1), &lm));
            assert!(!anchor_holds(InFrontOf, &bottle_at(5, 5), &lm));
        }
    }
}

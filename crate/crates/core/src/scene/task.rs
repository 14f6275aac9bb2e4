use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bowl_for, make_scene, BowlLayout, Scene, SceneError};
use crate::classes::ObjectClass;
use crate::instruction::{generate, DestRelation, Destination, Intent, TaskKind};

/// What a correct agent must ground and achieve for one instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Bottles the instruction refers to visually: every bottle for existence
    /// and classification, the anchored bottle for exploratory.
    pub target_set: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<usize>,
    /// Bottles whose contents match the target class.
    pub matching: Vec<usize>,
    /// Expected exploratory report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub intent: Intent,
    pub instruction: String,
    pub truth: GroundTruth,
}

fn destinations(scene: &Scene) -> Vec<Destination> {
    let mut out: Vec<Destination> = match scene.bowl_layout {
        BowlLayout::Row => [DestRelation::Left, DestRelation::Middle, DestRelation::Right]
            .into_iter()
            .map(Destination::Relation)
            .collect(),
        BowlLayout::Column => [DestRelation::Back, DestRelation::Front]
            .into_iter()
            .map(Destination::Relation)
            .collect(),
        BowlLayout::Scattered => vec![],
    };
    out.extend(scene.bowls().map(|b| Destination::Color(b.color)));
    out
}

/// Ground truth of an arbitrary intent on a scene.
pub fn ground_truth(scene: &Scene, intent: &Intent) -> Result<GroundTruth, SceneError> {
    let matching: Vec<usize> = scene
        .bottles()
        .filter(|b| b.contents == Some(intent.target))
        .map(|b| b.id)
        .collect();
    match intent.kind {
        TaskKind::Existence | TaskKind::Classification => {
            let dest = intent.destination.expect("validated intent");
            let destination = bowl_for(scene, dest)
                .ok_or_else(|| SceneError::Invalid(format!("scene has no `{}` bowl", dest.word())))?;
            Ok(GroundTruth {
                target_set: scene.bottle_ids(),
                destination: Some(destination),
                matching,
                report: None,
            })
        }
        TaskKind::Exploratory => {
            let anchor = intent.anchor.expect("validated intent");
            let lm = scene
                .landmark(anchor.landmark)
                .ok_or_else(|| SceneError::Invalid(format!("scene has no {}", anchor.landmark)))?;
            let referred: Vec<usize> = scene
                .bottles()
                .filter(|b| super::anchor_holds(anchor.relation, &b.bbox, &lm.bbox))
                .map(|b| b.id)
                .collect();
            if referred.len() != 1 {
                return Err(SceneError::Invalid(format!(
                    "`{} the {}` refers to {} bottles",
                    anchor.relation.phrase(),
                    anchor.landmark,
                    referred.len()
                )));
            }
            let id = referred[0];
            let report = scene.object(id).and_then(|b| b.contents) == Some(intent.target);
            Ok(GroundTruth {
                target_set: referred,
                destination: None,
                matching,
                report: Some(report),
            })
        }
    }
}

/// Draws an instruction of the given family that the scene supports.
pub fn make_task(scene: &Scene, kind: TaskKind, seed: u64) -> Result<Task, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_736b);
    let bottles: Vec<_> = scene.bottles().collect();
    let pick_dest = |rng: &mut ChaCha8Rng| -> Destination {
        let all = destinations(scene);
        let relations: Vec<_> = all.iter().copied().filter(|d| matches!(d, Destination::Relation(_))).collect();
        let colors: Vec<_> = all.iter().copied().filter(|d| matches!(d, Destination::Color(_))).collect();
        let pool = match scene.archetype {
            1 if !relations.is_empty() => relations,
            2 => colors,
            _ => all,
        };
        *pool.choose(rng).expect("scene has bowls")
    };
    let intent = match kind {
        TaskKind::Existence => {
            let target = bottles.choose(&mut rng).and_then(|b| b.contents).expect("scene has bottles");
            Intent::existence(target, pick_dest(&mut rng))
        }
        TaskKind::Classification => {
            let target = scene
                .shared_class
                .or_else(|| bottles.choose(&mut rng).and_then(|b| b.contents))
                .expect("scene has bottles");
            Intent::classification(target, pick_dest(&mut rng))
        }
        TaskKind::Exploratory => {
            let held = scene.object(scene.referred_bottle).and_then(|b| b.contents).expect("referred bottle");
            let target = if rng.gen_bool(0.5) {
                held
            } else {
                *ObjectClass::ALL
                    .iter()
                    .filter(|c| **c != held)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .copied()
                    .expect("other classes")
            };
            Intent::exploratory(target, scene.anchor_relation, scene.anchor_landmark)
        }
    };
    let instruction = generate(&intent, rng.gen()).map_err(|e| SceneError::Generation(e.to_string()))?;
    let truth = ground_truth(scene, &intent)?;
    Ok(Task {
        intent,
        instruction,
        truth,
    })
}

/// Scenes and tasks for every (archetype, family, seed) combination, with a
/// distinct scene seed per combination derived from `master_seed`.
pub fn suite_tasks(
    archetypes: &[u8],
    kinds: &[TaskKind],
    seeds: std::ops::Range<u64>,
    master_seed: u64,
) -> Result<Vec<(Scene, Task)>, SceneError> {
    let mut out = Vec::new();
    for &a in archetypes {
        for &k in kinds {
            for s in seeds.clone() {
                let scene_seed = master_seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((a as u64) << 40 | (k.ordinal() as u64) << 32 | s);
                let scene = make_scene(a, scene_seed)?;
                let task = make_task(&scene, k, scene_seed)?;
                out.push((scene, task));
            }
        }
    }
    Ok(out)
}

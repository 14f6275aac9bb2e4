//! Episode state machine: ground the instruction, probe bottles with the four
//! wrist actions, vote on the contents, place at the destination or back.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::classifier::{FrontEnd, SoundModel, VoteEntry, VoteRecord};
use crate::audio::{majority_vote, mix_seed, AudioError, ClipRecord, NoiseConfig};
use crate::classes::{ActionKind, ObjectClass};
use crate::grounding::{GroundingError, GroundingModel};
use crate::instruction::{Intent, TaskKind};
use crate::language::needs_destination;
use crate::scene::{
    ground_truth, propose_regions, render_features, DetectorConfig, ObjectKind, PyramidConfig, Scene, SceneError, Task,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid trace: {0}")]
    Trace(String),
    #[error("trace i/o: {0}")]
    Io(String),
}

/// Trained grounding model with the perception settings it was trained under.
#[derive(Clone, Debug)]
pub struct LearnedGrounder {
    pub model: GroundingModel,
    pub pyramid: PyramidConfig,
    pub detector: DetectorConfig,
}

#[derive(Clone, Debug)]
pub enum Grounder {
    /// Returns the ground-truth referents.
    Oracle,
    Learned(Box<LearnedGrounder>),
}

#[derive(Debug)]
pub struct LearnedRecognizer {
    pub model: SoundModel,
    pub front: FrontEnd,
    pub noise: NoiseConfig,
}

#[derive(Debug)]
pub enum Recognizer {
    /// Reports the hidden contents with certainty.
    Oracle,
    Learned(Box<LearnedRecognizer>),
}

impl Recognizer {
    /// Probability vector for one probe clip of a bottle holding `class`.
    pub fn classify(&self, class: ObjectClass, action: ActionKind, fill: f64, seed: u64) -> Result<Vec<f64>, AudioError> {
        match self {
            Recognizer::Oracle => Ok(crate::neural::one_hot(ObjectClass::COUNT, class.ordinal())),
            Recognizer::Learned(r) => {
                let rec = ClipRecord {
                    path: None,
                    class,
                    action,
                    fill,
                    seed,
                    episode: 0,
                    snr_db: r.noise.snr_db,
                };
                let clip = rec.render(&r.noise)?;
                r.model.predict_clip(&r.front, &clip)
            }
        }
    }
}

#[derive(Debug)]
pub struct Models {
    pub grounder: Grounder,
    pub recognizer: Recognizer,
}

impl Models {
    pub fn oracle() -> Self {
        Self {
            grounder: Grounder::Oracle,
            recognizer: Recognizer::Oracle,
        }
    }
}

/// What grounding decided, mapped back to scene objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSnapshot {
    /// Scene object behind each candidate region; `None` for a spurious box.
    pub candidates: Vec<Option<usize>>,
    /// Target attention per candidate.
    pub beta: Vec<f64>,
    /// Bottles to act on, in probe order (descending β).
    pub targets: Vec<usize>,
    /// Referent candidates that are not real objects.
    pub spurious: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<usize>,
}

/// Grounds an instruction on a scene. `seed` drives rendering noise and the
/// simulated detector.
pub fn ground(grounder: &Grounder, scene: &Scene, task: &Task, seed: u64) -> Result<GroundingSnapshot, String> {
    match grounder {
        Grounder::Oracle => {
            let truth = ground_truth(scene, &task.intent).map_err(|e| e.to_string())?;
            let n = truth.target_set.len();
            Ok(GroundingSnapshot {
                candidates: truth.target_set.iter().map(|&i| Some(i)).collect(),
                beta: vec![1.0 / n.max(1) as f64; n],
                targets: truth.target_set,
                spurious: 0,
                destination: truth.destination,
            })
        }
        Grounder::Learned(g) => {
            let pyr = render_features(scene, &g.pyramid, seed).map_err(|e| e.to_string())?;
            let cands = propose_regions(scene, &pyr, &g.detector, mix_seed(seed, 0x6465));
            let out = g
                .model
                .ground(&task.instruction, task.intent.kind, &pyr, &cands)
                .map_err(|e: GroundingError| e.to_string())?;
            let ids: Vec<Option<usize>> = cands.iter().map(|c| c.object_id).collect();
            let picked = if task.intent.kind == TaskKind::Exploratory {
                vec![out.target.selected]
            } else {
                out.target.referent_set()
            };
            let spurious = picked.iter().filter(|&&j| ids[j].is_none()).count();
            let is_bottle = |id: usize| scene.object(id).map(|o| o.kind == ObjectKind::Bottle).unwrap_or(false);
            Ok(GroundingSnapshot {
                targets: picked.iter().filter_map(|&j| ids[j]).filter(|&id| is_bottle(id)).collect(),
                spurious: spurious + picked.iter().filter_map(|&j| ids[j]).filter(|&id| !is_bottle(id)).count(),
                destination: out.destination.as_ref().and_then(|d| ids[d.selected]),
                beta: out.target.beta.clone(),
                candidates: ids,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Probe with sound; otherwise the uniform-choice baseline.
    pub audio: bool,
    /// Step budget per bottle on the table.
    pub budget_per_bottle: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            audio: true,
            budget_per_bottle: 6,
        }
    }
}

impl PolicyConfig {
    pub fn no_audio() -> Self {
        Self {
            audio: false,
            ..Self::default()
        }
    }
}

/// Enough to regenerate the clip from the bottle's hidden contents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRef {
    pub fill: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub action: ActionKind,
    pub object: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipRef>,
    /// Set on the shake step that completes a probe cycle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<VoteRecord>,
    /// Bowl for a place step; `None` puts the bottle back where it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    /// The policy ran to its end (which may still miss the goal).
    Completed,
    /// Existence: every candidate probed without a match.
    NoMatch,
    GroundingFailed { message: String },
    BudgetExceeded,
}

impl Outcome {
    pub fn aborted(&self) -> bool {
        matches!(self, Outcome::GroundingFailed { .. } | Outcome::BudgetExceeded)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub instruction: String,
    pub intent: Intent,
    pub seed: u64,
    pub audio: bool,
    pub budget: usize,
    /// Wrist angular velocity during probing, rad/s (metadata only).
    pub angular_velocity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding: Option<GroundingSnapshot>,
    pub steps: Vec<Step>,
    /// Exploratory answer: does the referred bottle hold the target?
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<bool>,
    /// `None` until the episode terminates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

impl EpisodeTrace {
    pub fn votes(&self) -> impl Iterator<Item = (usize, &VoteRecord)> {
        self.steps.iter().filter_map(|s| s.vote.as_ref().map(|v| (s.object, v)))
    }

    pub fn probe_count(&self) -> usize {
        self.steps.iter().filter(|s| s.action == ActionKind::Shake).count()
    }

    pub fn actions(&self) -> Vec<ActionKind> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Unprobed,
    Probed,
    Held,
    /// In the given bowl.
    AtDestination(usize),
}

/// Where every bottle is, plus the remaining step budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    /// `(bottle id, location)` in scene order.
    pub bottles: Vec<(usize, Location)>,
    pub held: Option<usize>,
    pub budget: usize,
    pub bowls: Vec<usize>,
}

impl EpisodeState {
    pub fn new(scene: &Scene, budget: usize) -> Self {
        Self {
            bottles: scene.bottles().map(|b| (b.id, Location::Unprobed)).collect(),
            held: None,
            budget,
            bowls: scene.bowls().map(|b| b.id).collect(),
        }
    }

    pub fn location(&self, id: usize) -> Option<Location> {
        self.bottles.iter().find(|(b, _)| *b == id).map(|(_, l)| *l)
    }

    fn set(&mut self, id: usize, loc: Location) {
        if let Some(e) = self.bottles.iter_mut().find(|(b, _)| *b == id) {
            e.1 = loc;
        }
    }

    pub fn at_destination(&self, bowl: usize) -> Vec<usize> {
        self.bottles
            .iter()
            .filter(|(_, l)| *l == Location::AtDestination(bowl))
            .map(|(b, _)| *b)
            .collect()
    }

    pub fn placed(&self) -> Vec<(usize, usize)> {
        self.bottles
            .iter()
            .filter_map(|(b, l)| match l {
                Location::AtDestination(d) => Some((*b, *d)),
                _ => None,
            })
            .collect()
    }

    /// Applies one step; illegal transitions are errors.
    pub fn apply(&mut self, step: &Step) -> Result<(), String> {
        if self.budget == 0 {
            return Err("step budget exhausted".into());
        }
        let loc = self
            .location(step.object)
            .ok_or_else(|| format!("object {} is not a bottle", step.object))?;
        match step.action {
            ActionKind::Pick => {
                if self.held.is_some() {
                    return Err("pick while holding".into());
                }
                if matches!(loc, Location::AtDestination(_) | Location::Held) {
                    return Err(format!("bottle {} is not on the table", step.object));
                }
                self.held = Some(step.object);
                self.set(step.object, Location::Held);
            }
            a if a.is_probe() => {
                if self.held != Some(step.object) {
                    return Err(format!("{a} on bottle {} which is not held", step.object));
                }
            }
            ActionKind::Place => {
                if self.held != Some(step.object) {
                    return Err(format!("place of bottle {} which is not held", step.object));
                }
                self.held = None;
                match step.destination {
                    Some(d) if self.bowls.contains(&d) => self.set(step.object, Location::AtDestination(d)),
                    Some(d) => return Err(format!("object {d} is not a bowl")),
                    None => self.set(step.object, Location::Probed),
                }
            }
            _ => unreachable!("all actions covered"),
        }
        self.budget -= 1;
        Ok(())
    }
}

struct Runner<'a> {
    scene: &'a Scene,
    models: &'a Models,
    seed: u64,
    state: EpisodeState,
    trace: EpisodeTrace,
}

impl Runner<'_> {
    fn push(&mut self, step: Step) -> Result<(), ()> {
        if self.state.budget == 0 {
            return Err(());
        }
        self.state.apply(&step).expect("policy only emits legal steps");
        self.trace.steps.push(step);
        Ok(())
    }

    fn step(&mut self, action: ActionKind, object: usize) -> Step {
        Step {
            index: self.trace.steps.len(),
            action,
            object,
            clip: None,
            vote: None,
            destination: None,
        }
    }

    /// pick → yaw, roll, pitch, shake → vote. Leaves the bottle held.
    fn probe(&mut self, bottle: usize) -> Result<Result<VoteRecord, AudioError>, ()> {
        let s = self.step(ActionKind::Pick, bottle);
        self.push(s)?;
        let class = self.scene.object(bottle).and_then(|o| o.contents).unwrap_or(ObjectClass::Empty);
        let bottle_seed = mix_seed(self.seed, 0x626f_7474 ^ bottle as u64);
        let fill = ChaCha8Rng::seed_from_u64(bottle_seed).gen_range(0.2..=0.8);
        let mut entries = Vec::with_capacity(4);
        for action in ActionKind::PROBES {
            let seed = mix_seed(bottle_seed, action as u64 + 1);
            let mut s = self.step(action, bottle);
            s.clip = Some(ClipRef { fill, seed });
            let probs = match self.models.recognizer.classify(class, action, fill, seed) {
                Ok(p) => p,
                Err(e) => return Ok(Err(e)),
            };
            entries.push(VoteEntry::new(action, probs));
            if action == ActionKind::Shake {
                s.vote = Some(majority_vote(&entries).expect("four entries"));
            }
            self.push(s)?;
        }
        Ok(Ok(self.trace.steps.last().and_then(|s| s.vote.clone()).expect("vote on shake")))
    }

    fn place(&mut self, bottle: usize, destination: Option<usize>) -> Result<(), ()> {
        let mut s = self.step(ActionKind::Place, bottle);
        s.destination = destination;
        self.push(s)
    }
}

/// Token of [`Runner`] control flow: budget ran out.
type Budget<T> = Result<T, ()>;

fn run_policy(r: &mut Runner, snap: &GroundingSnapshot, audio: bool) -> Budget<Result<Outcome, AudioError>> {
    let intent = r.trace.intent;
    let dest = snap.destination;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(r.seed, 0x7261_6e64));
    if !audio {
        match intent.kind {
            TaskKind::Existence => {
                if let Some(&b) = snap.targets.choose(&mut rng) {
                    let s = r.step(ActionKind::Pick, b);
                    r.push(s)?;
                    r.place(b, dest)?;
                }
            }
            TaskKind::Classification => {
                for &b in &snap.targets {
                    if rng.gen_bool(0.5) {
                        let s = r.step(ActionKind::Pick, b);
                        r.push(s)?;
                        r.place(b, dest)?;
                    }
                }
            }
            TaskKind::Exploratory => r.trace.report = Some(rng.gen_bool(0.5)),
        }
        return Ok(Ok(Outcome::Completed));
    }
    match intent.kind {
        TaskKind::Existence => {
            for &b in &snap.targets {
                let vote = match r.probe(b)? {
                    Ok(v) => v,
                    Err(e) => return Ok(Err(e)),
                };
                if vote.class == intent.target {
                    r.place(b, dest)?;
                    return Ok(Ok(Outcome::Completed));
                }
                r.place(b, None)?;
            }
            Ok(Ok(Outcome::NoMatch))
        }
        TaskKind::Classification => {
            for &b in &snap.targets {
                let vote = match r.probe(b)? {
                    Ok(v) => v,
                    Err(e) => return Ok(Err(e)),
                };
                r.place(b, if vote.class == intent.target { dest } else { None })?;
            }
            Ok(Ok(Outcome::Completed))
        }
        TaskKind::Exploratory => {
            if let Some(&b) = snap.targets.first() {
                let vote = match r.probe(b)? {
                    Ok(v) => v,
                    Err(e) => return Ok(Err(e)),
                };
                r.trace.report = Some(vote.class == intent.target);
                r.place(b, None)?;
            }
            Ok(Ok(Outcome::Completed))
        }
    }
}

/// Runs one episode. Grounding failures and budget exhaustion terminate the
/// trace with the corresponding outcome; audio errors are returned.
pub fn run_episode(
    task: &Task,
    scene: &Scene,
    models: &Models,
    policy: &PolicyConfig,
    seed: u64,
) -> Result<EpisodeTrace, EngineError> {
    let budget = policy.budget_per_bottle * scene.num_bottles();
    let mut r = Runner {
        scene,
        models,
        seed,
        state: EpisodeState::new(scene, budget),
        trace: EpisodeTrace {
            instruction: task.instruction.clone(),
            intent: task.intent,
            seed,
            audio: policy.audio,
            budget,
            angular_velocity: ActionKind::PROBE_ANGULAR_VELOCITY,
            grounding: None,
            steps: Vec::new(),
            report: None,
            outcome: None,
        },
    };
    let snap = match ground(&models.grounder, scene, task, mix_seed(seed, 0x6772)) {
        Ok(s) if s.targets.is_empty() => {
            r.trace.grounding = Some(s);
            r.trace.outcome = Some(Outcome::GroundingFailed {
                message: "no bottle grounded".into(),
            });
            return Ok(r.trace);
        }
        Ok(s) if needs_destination(task.intent.kind) && s.destination.map(|d| !r.state.bowls.contains(&d)).unwrap_or(true) => {
            r.trace.grounding = Some(s);
            r.trace.outcome = Some(Outcome::GroundingFailed {
                message: "destination is not a bowl".into(),
            });
            return Ok(r.trace);
        }
        Ok(s) => s,
        Err(message) => {
            r.trace.outcome = Some(Outcome::GroundingFailed { message });
            return Ok(r.trace);
        }
    };
    r.trace.grounding = Some(snap.clone());
    let outcome = match run_policy(&mut r, &snap, policy.audio) {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => return Err(e.into()),
        Err(()) => Outcome::BudgetExceeded,
    };
    // A bottle still in hand on abort is put back.
    if let Some(b) = r.state.held {
        let mut s = r.step(ActionKind::Place, b);
        s.destination = None;
        r.state.budget += 1;
        r.state.apply(&s).map_err(EngineError::Trace)?;
        r.trace.steps.push(s);
    }
    r.trace.outcome = Some(outcome);
    Ok(r.trace)
}

/// The uniform-choice baseline: same grounding, no probing.
pub fn no_audio_baseline(task: &Task, scene: &Scene, grounder: &Grounder, seed: u64) -> Result<EpisodeTrace, EngineError> {
    let models = Models {
        grounder: grounder.clone(),
        recognizer: Recognizer::Oracle,
    };
    run_episode(task, scene, &models, &PolicyConfig::no_audio(), seed)
}

/// Replays a trace on its scene, checking every transition, the exact probe
/// sequence and conservation. Returns the terminal state.
pub fn replay(trace: &EpisodeTrace, scene: &Scene) -> Result<EpisodeState, EngineError> {
    let mut st = EpisodeState::new(scene, trace.budget);
    let mut i = 0;
    let steps = &trace.steps;
    while i < steps.len() {
        let s = &steps[i];
        if s.index != i {
            return Err(EngineError::Trace(format!("step {i} has index {}", s.index)));
        }
        if s.action.is_probe() {
            // A probe cycle is yaw, roll, pitch, shake right after the pick.
            let start = i;
            for (k, a) in ActionKind::PROBES.iter().enumerate() {
                match steps.get(start + k) {
                    Some(p) if p.action == *a && p.object == s.object => {}
                    _ => return Err(EngineError::Trace(format!("broken probe sequence at step {start}"))),
                }
            }
            if start == 0 || steps[start - 1].action != ActionKind::Pick {
                return Err(EngineError::Trace(format!("probe at step {start} without a pick")));
            }
            if steps[start + 3].vote.is_none() {
                return Err(EngineError::Trace(format!("probe cycle at step {start} has no vote")));
            }
            for p in &steps[start..start + 4] {
                st.apply(p).map_err(EngineError::Trace)?;
            }
            i += 4;
            continue;
        }
        st.apply(s).map_err(EngineError::Trace)?;
        i += 1;
    }
    if trace.outcome.is_some() && st.held.is_some() {
        return Err(EngineError::Trace("episode ended holding a bottle".into()));
    }
    Ok(st)
}

/// One JSON object per line: a header, each step, then the terminal record.
pub fn write_trace(trace: &EpisodeTrace, out: &mut dyn Write) -> Result<(), EngineError> {
    let io = |e: std::io::Error| EngineError::Io(e.to_string());
    let mut header = trace.clone();
    header.steps.clear();
    header.outcome = None;
    header.report = None;
    let line = |v: &serde_json::Value| serde_json::to_string(v).expect("serializable");
    writeln!(out, "{}", line(&serde_json::json!({ "record": "episode", "episode": header }))).map_err(io)?;
    for s in &trace.steps {
        writeln!(out, "{}", line(&serde_json::json!({ "record": "step", "step": s }))).map_err(io)?;
    }
    if let Some(o) = &trace.outcome {
        writeln!(
            out,
            "{}",
            line(&serde_json::json!({ "record": "end", "outcome": o, "report": trace.report }))
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn read_trace(input: &mut dyn BufRead) -> Result<EpisodeTrace, EngineError> {
    let bad = |e: String| EngineError::Trace(e);
    let mut trace: Option<EpisodeTrace> = None;
    for line in input.lines() {
        let line = line.map_err(|e| EngineError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let t = trace.as_mut();
        match (v["record"].as_str(), t) {
            (Some("episode"), None) => {
                trace = Some(serde_json::from_value(v["episode"].clone()).map_err(|e| bad(e.to_string()))?)
            }
            (Some("step"), Some(t)) => t
                .steps
                .push(serde_json::from_value(v["step"].clone()).map_err(|e| bad(e.to_string()))?),
            (Some("end"), Some(t)) => {
                t.outcome = Some(serde_json::from_value(v["outcome"].clone()).map_err(|e| bad(e.to_string()))?);
                t.report = serde_json::from_value(v["report"].clone()).map_err(|e| bad(e.to_string()))?;
            }
            _ => return Err(bad(format!("unexpected record: {line}"))),
        }
    }
    trace.ok_or_else(|| bad("empty trace".into()))
}

pub fn save_trace(trace: &EpisodeTrace, path: &Path) -> Result<(), EngineError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| EngineError::Io(e.to_string()))?);
    write_trace(trace, &mut f)
}

pub fn load_trace(path: &Path) -> Result<EpisodeTrace, EngineError> {
    let f = std::fs::File::open(path).map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
    read_trace(&mut std::io::BufReader::new(f))
}

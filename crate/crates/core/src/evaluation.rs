//! Episode scoring (TRA, ARA, OTSR), suite reports, and the paired
//! audio-visual versus no-audio comparison.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::mix_seed;
use crate::classes::ObjectClass;
use crate::engine::{replay, run_episode, EngineError, EpisodeTrace, Models, PolicyConfig};
use crate::instruction::TaskKind;
use crate::scene::{suite_tasks, GroundTruth, Scene, SceneError, Task, ARCHETYPES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace has not terminated")]
    Unterminated,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io error: {0}")]
    Io(String),
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let center = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub tra: bool,
    pub ara: bool,
    pub otsr: bool,
}

/// Scores a terminated trace against its scene and ground truth.
///
/// OTSR additionally requires the terminal world state to satisfy the goal;
/// aborted episodes fail all three.
pub fn score_episode(trace: &EpisodeTrace, scene: &Scene, truth: &GroundTruth) -> Result<EpisodeScore, EvalError> {
    let outcome = trace.outcome.as_ref().ok_or(EvalError::Unterminated)?;
    const FAIL: EpisodeScore = EpisodeScore {
        tra: false,
        ara: false,
        otsr: false,
    };
    if outcome.aborted() {
        return Ok(FAIL);
    }
    let Some(g) = &trace.grounding else {
        return Ok(FAIL);
    };
    let end = replay(trace, scene)?;
    let tra = g.spurious == 0
        && match trace.intent.kind {
            TaskKind::Exploratory => g.targets == truth.target_set,
            _ => {
                g.targets.iter().collect::<BTreeSet<_>>() == truth.target_set.iter().collect::<BTreeSet<_>>()
                    && g.destination == truth.destination
            }
        };
    let ara = trace
        .votes()
        .all(|(b, v)| scene.object(b).and_then(|o| o.contents) == Some(v.class));
    let placed = end.placed();
    let goal = match trace.intent.kind {
        TaskKind::Existence => match truth.matching.is_empty() {
            true => placed.is_empty(),
            false => {
                placed.len() == 1 && truth.matching.contains(&placed[0].0) && Some(placed[0].1) == truth.destination
            }
        },
        TaskKind::Classification => {
            let got: BTreeSet<usize> = placed.iter().map(|p| p.0).collect();
            got == truth.matching.iter().copied().collect()
                && placed.iter().all(|p| Some(p.1) == truth.destination)
        }
        TaskKind::Exploratory => placed.is_empty() && trace.report.is_some() && trace.report == truth.report,
    };
    Ok(EpisodeScore {
        tra,
        ara,
        otsr: tra && ara && goal,
    })
}

/// Success counts with 95% intervals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub k: usize,
    pub n: usize,
}

impl Rate {
    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.k as f64 / self.n as f64
        }
    }

    pub fn ci(&self) -> (f64, f64) {
        wilson(self.k, self.n)
    }

    fn add(&mut self, ok: bool) {
        self.n += 1;
        self.k += ok as usize;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub archetype: u8,
    pub kind: TaskKind,
    pub episodes: usize,
    pub aborted: usize,
    pub tra: Rate,
    pub ara: Rate,
    pub otsr: Rate,
}

impl CellMetrics {
    fn new(archetype: u8, kind: TaskKind) -> Self {
        Self {
            archetype,
            kind,
            episodes: 0,
            aborted: 0,
            tra: Rate::default(),
            ara: Rate::default(),
            otsr: Rate::default(),
        }
    }

    /// OTSR never exceeds TRA or ARA.
    pub fn consistent(&self) -> bool {
        self.otsr.k <= self.tra.k.min(self.ara.k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Cells in archetype then task-kind order.
    pub cells: Vec<CellMetrics>,
    /// `confusion[true][voted]` over every vote in the suite.
    pub confusion: Vec<Vec<usize>>,
}

/// One scored episode of a suite.
#[derive(Clone, Debug)]
pub struct ScoredEpisode {
    pub archetype: u8,
    pub kind: TaskKind,
    pub score: EpisodeScore,
    pub aborted: bool,
    pub trace: EpisodeTrace,
    /// `(true contents, voted class)` for each probe.
    pub votes: Vec<(ObjectClass, ObjectClass)>,
}

impl MetricsReport {
    /// Aggregates in input order, so the result does not depend on how the
    /// episodes were scheduled.
    pub fn from_episodes(eps: &[ScoredEpisode]) -> Self {
        let mut cells: Vec<CellMetrics> = Vec::new();
        let mut confusion = vec![vec![0; ObjectClass::COUNT]; ObjectClass::COUNT];
        for e in eps {
            let i = match cells.iter().position(|c| c.archetype == e.archetype && c.kind == e.kind) {
                Some(i) => i,
                None => {
                    cells.push(CellMetrics::new(e.archetype, e.kind));
                    cells.len() - 1
                }
            };
            let c = &mut cells[i];
            c.episodes += 1;
            c.aborted += e.aborted as usize;
            c.tra.add(e.score.tra);
            c.ara.add(e.score.ara);
            c.otsr.add(e.score.otsr);
            for (t, v) in &e.votes {
                confusion[t.ordinal()][v.ordinal()] += 1;
            }
        }
        cells.sort_by_key(|c| (c.archetype, c.kind.ordinal()));
        Self { cells, confusion }
    }

    pub fn cell(&self, archetype: u8, kind: TaskKind) -> Option<&CellMetrics> {
        self.cells.iter().find(|c| c.archetype == archetype && c.kind == kind)
    }

    /// Pools every cell of one task kind.
    pub fn by_kind(&self, kind: TaskKind) -> CellMetrics {
        let mut out = CellMetrics::new(0, kind);
        for c in self.cells.iter().filter(|c| c.kind == kind) {
            out.episodes += c.episodes;
            out.aborted += c.aborted;
            for (a, b) in [(&mut out.tra, c.tra), (&mut out.ara, c.ara), (&mut out.otsr, c.otsr)] {
                a.k += b.k;
                a.n += b.n;
            }
        }
        out
    }

    pub fn consistent(&self) -> bool {
        self.cells.iter().all(CellMetrics::consistent)
    }

    /// One row per scene archetype and instruction type, rates in percent.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scene", "instruction", "episodes", "aborted", "tra", "tra_lo", "tra_hi", "ara", "ara_lo", "ara_hi", "otsr",
            "otsr_lo", "otsr_hi",
        ])
        .expect("in-memory write");
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        for c in &self.cells {
            let mut rec = vec![
                format!("scene{}", c.archetype),
                c.kind.title().to_string(),
                c.episodes.to_string(),
                c.aborted.to_string(),
            ];
            for r in [c.tra, c.ara, c.otsr] {
                let (lo, hi) = r.ci();
                rec.extend([pct(r.value()), pct(lo), pct(hi)]);
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Long-form `true,predicted,count` rows for plotting.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true,predicted,count\n");
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, n) in row.iter().enumerate() {
                let name = |k| ObjectClass::from_ordinal(k).expect("class ordinal").name();
                s.push_str(&format!("{},{},{}\n", name(i), name(j), n));
            }
        }
        s
    }
}

/// Which episodes to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub archetypes: Vec<u8>,
    pub kinds: Vec<TaskKind>,
    pub episodes_per_cell: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            archetypes: ARCHETYPES.to_vec(),
            kinds: TaskKind::ALL.to_vec(),
            episodes_per_cell: 144,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn tasks(&self) -> Result<Vec<(Scene, Task)>, EvalError> {
        Ok(suite_tasks(&self.archetypes, &self.kinds, 0..self.episodes_per_cell as u64, self.seed)?)
    }
}

/// Runs and scores every task in parallel; output order follows `tasks`.
pub fn run_tasks(
    tasks: &[(Scene, Task)],
    models: &Models,
    policy: &PolicyConfig,
    seed: u64,
) -> Result<Vec<ScoredEpisode>, EvalError> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, (scene, task))| {
            let trace = run_episode(task, scene, models, policy, mix_seed(seed, i as u64))?;
            let score = score_episode(&trace, scene, &task.truth)?;
            let votes = trace
                .votes()
                .map(|(b, v)| (scene.object(b).and_then(|o| o.contents).unwrap_or(ObjectClass::Empty), v.class))
                .collect();
            Ok(ScoredEpisode {
                archetype: scene.archetype,
                kind: task.intent.kind,
                score,
                aborted: trace.outcome.as_ref().is_some_and(|o| o.aborted()),
                trace,
                votes,
            })
        })
        .collect()
}

pub fn run_suite(cfg: &SuiteConfig, models: &Models, policy: &PolicyConfig) -> Result<MetricsReport, EvalError> {
    let tasks = cfg.tasks()?;
    Ok(MetricsReport::from_episodes(&run_tasks(&tasks, models, policy, cfg.seed)?))
}

/// Paired OTSR comparison for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub archetype: u8,
    pub kind: TaskKind,
    pub episodes: usize,
    pub audio: Rate,
    pub no_audio: Rate,
    /// TRA of the no-audio arm; grounding is identical in both arms.
    pub tra: Rate,
    /// Mean paired difference (audio minus no-audio) with a 95% normal interval.
    pub diff: f64,
    pub diff_lo: f64,
    pub diff_hi: f64,
}

impl BaselineRow {
    /// Audio-visual beats the baseline with disjoint Wilson intervals.
    pub fn separated(&self) -> bool {
        self.audio.ci().0 > self.no_audio.ci().1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rows: Vec<BaselineRow>,
}

impl BaselineReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "scene,instruction,episodes,audio_otsr,audio_lo,audio_hi,no_audio_otsr,no_audio_lo,no_audio_hi,tra,diff,diff_lo,diff_hi\n",
        );
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        for r in &self.rows {
            let (al, ah) = r.audio.ci();
            let (nl, nh) = r.no_audio.ci();
            s.push_str(&format!(
                "scene{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.archetype,
                r.kind.title(),
                r.episodes,
                pct(r.audio.value()),
                pct(al),
                pct(ah),
                pct(r.no_audio.value()),
                pct(nl),
                pct(nh),
                pct(r.tra.value()),
                pct(r.diff),
                pct(r.diff_lo),
                pct(r.diff_hi)
            ));
        }
        s
    }
}

/// Runs both arms on the same tasks and episode seeds.
pub fn compare_baseline(tasks: &[(Scene, Task)], models: &Models, seed: u64) -> Result<BaselineReport, EvalError> {
    let a = run_tasks(tasks, models, &PolicyConfig::default(), seed)?;
    let b = run_tasks(tasks, models, &PolicyConfig::no_audio(), seed)?;
    let mut rows: Vec<(BaselineRow, Vec<f64>)> = Vec::new();
    for (x, y) in a.iter().zip(&b) {
        let i = match rows.iter().position(|r| r.0.archetype == x.archetype && r.0.kind == x.kind) {
            Some(i) => i,
            None => {
                rows.push((
                    BaselineRow {
                        archetype: x.archetype,
                        kind: x.kind,
                        episodes: 0,
                        audio: Rate::default(),
                        no_audio: Rate::default(),
                        tra: Rate::default(),
                        diff: 0.0,
                        diff_lo: 0.0,
                        diff_hi: 0.0,
                    },
                    Vec::new(),
                ));
                rows.len() - 1
            }
        };
        let (r, d) = &mut rows[i];
        r.episodes += 1;
        r.audio.add(x.score.otsr);
        r.no_audio.add(y.score.otsr);
        r.tra.add(y.score.tra);
        d.push(x.score.otsr as u8 as f64 - y.score.otsr as u8 as f64);
    }
    let mut out: Vec<BaselineRow> = rows
        .into_iter()
        .map(|(mut r, d)| {
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = if d.len() > 1 {
                d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let half = 1.959_963_984_540_054 * (var / n).sqrt();
            r.diff = mean;
            r.diff_lo = mean - half;
            r.diff_hi = mean + half;
            r
        })
        .collect();
    out.sort_by_key(|r| (r.archetype, r.kind.ordinal()));
    Ok(BaselineReport { rows: out })
}

/// Writes `x,y` rows.
pub fn write_series(path: &Path, header: (&str, &str), points: &[(f64, f64)]) -> Result<(), EvalError> {
    let mut s = format!("{},{}\n", header.0, header.1);
    for (x, y) in points {
        s.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(path, s).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

//! Browser bindings: instruction parsing, clip synthesis with its MFCC image,
//! and ground-truth-driven episodes on generated scenes. Every export returns
//! JSON text.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use avground::audio::{add_robot_noise, mfcc, noise_gate, synthesize, GateConfig, SAMPLE_RATE};
use avground::classes::{ActionKind, ObjectClass};
use avground::engine::{run_episode, Models, PolicyConfig};
use avground::evaluation::score_episode;
use avground::instruction::{parse, TaskKind};
use avground::scene::{make_scene, make_task};

#[derive(Serialize)]
struct ClipView {
    /// Peak magnitude per display bin.
    envelope: Vec<f64>,
    /// Envelope-gate decision per display bin.
    kept: Vec<bool>,
    retained: f64,
    frames: usize,
    n_coeffs: usize,
    /// Row-major frames × coefficients; coefficient 0 omitted (it dwarfs the rest).
    mfcc: Vec<f64>,
}

pub fn parse_json(text: &str) -> Result<String, String> {
    let intent = parse(text).map_err(|e| e.to_string())?;
    serde_json::to_string(&intent).map_err(|e| e.to_string())
}

pub fn clip_json(class: &str, action: &str, fill: f64, seed: u64, bins: usize) -> Result<String, String> {
    let class: ObjectClass = class.parse().map_err(|_| format!("unknown class `{class}`"))?;
    let action: ActionKind = action.parse().map_err(|_| format!("unknown action `{action}`"))?;
    let clip = synthesize(class, action, fill, seed).map_err(|e| e.to_string())?;
    let clip = add_robot_noise(&clip, 20.0, seed ^ 0x6e);
    let gated = noise_gate(&clip, &GateConfig::default());
    let m = mfcc(&clip).map_err(|e| e.to_string())?;
    let bins = bins.clamp(1, clip.len());
    let per = clip.len().div_ceil(bins);
    let envelope = clip
        .samples
        .chunks(per)
        .map(|c| c.iter().fold(0.0f64, |a, s| a.max(s.abs())))
        .collect();
    let kept = (0..clip.len().div_ceil(per))
        .map(|b| gated.mask.get(b * per / gated.window).copied().unwrap_or(false))
        .collect();
    let n = m.n_coeffs - 1;
    let data = (0..m.frames()).flat_map(|f| m.row(f)[1..].to_vec()).collect();
    serde_json::to_string(&ClipView {
        envelope,
        kept,
        retained: gated.retained_fraction(),
        frames: m.frames(),
        n_coeffs: n,
        mfcc: data,
    })
    .map_err(|e| e.to_string())
}

pub fn episode_json(archetype: u8, kind: &str, seed: u64, audio: bool) -> Result<String, String> {
    let kind = TaskKind::ALL
        .into_iter()
        .find(|k| k.name() == kind)
        .ok_or_else(|| format!("unknown instruction type `{kind}`"))?;
    let scene = make_scene(archetype, seed).map_err(|e| e.to_string())?;
    let task = make_task(&scene, kind, seed).map_err(|e| e.to_string())?;
    let policy = if audio { PolicyConfig::default() } else { PolicyConfig::no_audio() };
    let trace = run_episode(&task, &scene, &Models::oracle(), &policy, seed).map_err(|e| e.to_string())?;
    let score = score_episode(&trace, &scene, &task.truth).map_err(|e| e.to_string())?;
    serde_json::to_string(&serde_json::json!({
        "scene": scene,
        "instruction": task.instruction,
        "trace": trace,
        "score": score,
    }))
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn parse_instruction(text: &str) -> Result<String, JsValue> {
    parse_json(text).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn synthesize_clip(class: &str, action: &str, fill: f64, seed: u32, bins: usize) -> Result<String, JsValue> {
    clip_json(class, action, fill, seed as u64, bins).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate_episode(archetype: u8, kind: &str, seed: u32, audio: bool) -> Result<String, JsValue> {
    episode_json(archetype, kind, seed as u64, audio).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sample_rate() -> u32 {
    SAMPLE_RATE
}

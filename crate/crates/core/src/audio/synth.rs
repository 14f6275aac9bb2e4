//! Procedural container sounds and robot-motion noise.
//!
//! Granular contents are Poisson-timed decaying resonances whose rate grows
//! with action intensity and fill; liquid is band-limited noise modulated at
//! the action period; weak contents produce only faint clicks that sit under
//! the robot noise floor.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, AudioClip, AudioError, CLIP_SECONDS, SAMPLE_RATE};
use crate::classes::{ActionKind, ObjectClass};

pub const FILL_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoundFamily {
    Granular,
    Liquid,
    Weak,
}

/// Generation parameters for one (class, action, fill).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub family: SoundFamily,
    /// Mean impact events per second before the periodic modulation.
    pub event_rate: f64,
    /// Exponential decay constant of one event, s.
    pub event_decay: f64,
    pub center_hz: f64,
    /// Resonance band, Hz.
    pub band_hz: (f64, f64),
    /// Peak amplitude of one event, or RMS of the liquid noise.
    pub amplitude: f64,
    /// RMS of the broadband friction noise under the events.
    pub noise_level: f64,
    pub slosh_depth: f64,
    pub period: f64,
    pub intensity: f64,
}

/// Relative excitation of each probing action: shake > yaw ≈ pitch > roll.
pub fn action_intensity(action: ActionKind) -> Option<f64> {
    match action {
        ActionKind::Shake => Some(1.0),
        ActionKind::Yaw => Some(0.6),
        ActionKind::Pitch => Some(0.55),
        ActionKind::Roll => Some(0.35),
        _ => None,
    }
}

/// Period of the wrist motion, s.
pub fn action_period(action: ActionKind) -> Option<f64> {
    match action {
        ActionKind::Shake => Some(0.2),
        ActionKind::Yaw => Some(0.8),
        ActionKind::Pitch => Some(0.9),
        ActionKind::Roll => Some(1.2),
        _ => None,
    }
}

/// (base resonance Hz, decay ms, base rate per s, amplitude) of granular contents.
fn granular_base(class: ObjectClass) -> Option<(f64, f64, f64, f64)> {
    Some(match class {
        ObjectClass::RedDates => (700.0, 14.0, 14.0, 0.6),
        ObjectClass::Hawthorn => (1000.0, 10.0, 18.0, 0.55),
        ObjectClass::Oyster => (1500.0, 8.0, 12.0, 0.7),
        ObjectClass::WaxPill => (2000.0, 9.0, 22.0, 0.5),
        ObjectClass::Capsule => (2600.0, 6.0, 30.0, 0.5),
        ObjectClass::Tablet => (3400.0, 4.0, 40.0, 0.45),
        ObjectClass::Pill => (4400.0, 3.0, 55.0, 0.4),
        ObjectClass::SemanCassiae => (5600.0, 2.0, 90.0, 0.3),
        ObjectClass::Particle => (6800.0, 1.5, 140.0, 0.2),
        _ => return None,
    })
}

/// Log-normal spread of per-event resonance.
const FREQ_JITTER: f64 = 0.06;
const SECOND_MODE_RATIO: f64 = 2.76;

/// Resonance falls linearly with fill: more contents, more damping mass.
pub fn resonance_center(f0: f64, fill: f64) -> f64 {
    f0 * (1.12 - 0.3 * fill)
}

pub fn profile(class: ObjectClass, action: ActionKind, fill: f64) -> Result<SynthProfile, AudioError> {
    if !(FILL_RANGE.0..=FILL_RANGE.1).contains(&fill) {
        return Err(AudioError::Domain(format!(
            "fill {fill} outside [{}, {}]",
            FILL_RANGE.0, FILL_RANGE.1
        )));
    }
    let (intensity, period) = match (action_intensity(action), action_period(action)) {
        (Some(i), Some(p)) => (i, p),
        _ => return Err(AudioError::Domain(format!("`{action}` is not a probing action"))),
    };
    let excite = 0.6 + 0.4 * intensity;
    if let Some((f0, decay_ms, rate, amp)) = granular_base(class) {
        let c = resonance_center(f0, fill);
        let spread = (2.0 * FREQ_JITTER).exp();
        return Ok(SynthProfile {
            family: SoundFamily::Granular,
            event_rate: rate * intensity * (0.4 + fill),
            event_decay: decay_ms * 1e-3,
            center_hz: c,
            band_hz: (c / spread, c * spread),
            amplitude: amp * excite,
            noise_level: 0.01 * amp * excite,
            slosh_depth: 0.0,
            period,
            intensity,
        });
    }
    Ok(match class {
        ObjectClass::Alcohol => {
            let c = 1400.0 * (1.1 - 0.3 * fill);
            SynthProfile {
                family: SoundFamily::Liquid,
                event_rate: 0.0,
                event_decay: 0.0,
                center_hz: c,
                band_hz: (c - 450.0, c + 450.0),
                amplitude: 0.15 * excite * (0.5 + fill),
                noise_level: 0.0,
                slosh_depth: 0.8,
                period,
                intensity,
            }
        }
        ObjectClass::CicadaSlough => SynthProfile {
            family: SoundFamily::Weak,
            event_rate: 3.0 * intensity * (0.4 + fill),
            event_decay: 1.5e-3,
            center_hz: 0.0,
            band_hz: (0.0, SAMPLE_RATE as f64 / 2.0),
            amplitude: 0.04 * excite,
            noise_level: 0.0,
            slosh_depth: 0.0,
            period,
            intensity,
        },
        ObjectClass::Empty => SynthProfile {
            family: SoundFamily::Weak,
            event_rate: 0.8 * intensity,
            event_decay: 1.5e-3,
            center_hz: 0.0,
            band_hz: (0.0, SAMPLE_RATE as f64 / 2.0),
            amplitude: 0.04 * excite,
            noise_level: 0.0,
            slosh_depth: 0.0,
            period,
            intensity,
        },
        _ => unreachable!("granular classes handled above"),
    })
}

/// Periodic modulation of event rate or liquid level over one wrist cycle.
fn cycle(t: f64, period: f64) -> f64 {
    (PI * t / period).sin().abs()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Event onset times from an inhomogeneous Poisson process (thinning).
fn onsets(rng: &mut ChaCha8Rng, p: &SynthProfile, duration: f64) -> Vec<f64> {
    let shape = |t: f64| 0.3 + 1.4 * cycle(t, p.period);
    let peak = p.event_rate * 1.7;
    let mut out = Vec::new();
    if peak <= 0.0 {
        return out;
    }
    let mut t = 0.0;
    loop {
        t += -(1.0 - rng.gen::<f64>()).ln() / peak;
        if t >= duration {
            return out;
        }
        if rng.gen::<f64>() * peak < p.event_rate * shape(t) {
            out.push(t);
        }
    }
}

fn add_mode(buf: &mut [f64], rate: f64, n0: usize, amp: f64, freq: f64, decay: f64, phase: f64) {
    let len = ((6.0 * decay * rate) as usize).max(1);
    let w = 2.0 * PI * freq / rate;
    let k = (-1.0 / (decay * rate)).exp();
    let mut env = amp;
    for (i, s) in buf.iter_mut().skip(n0).take(len).enumerate() {
        *s += env * (w * i as f64 + phase).sin();
        env *= k;
    }
}

/// Second-order band-pass (constant peak gain) applied in place.
fn bandpass(x: &mut [f64], rate: f64, center: f64, bandwidth: f64) {
    let w0 = 2.0 * PI * center / rate;
    let q = center / bandwidth;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for s in x.iter_mut() {
        let y = b0 * *s + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *s;
        y2 = y1;
        y1 = y;
        *s = y;
    }
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Clip for one probing action plus the number of impact events drawn.
pub fn synthesize_detailed(
    class: ObjectClass,
    action: ActionKind,
    fill: f64,
    seed: u64,
) -> Result<(AudioClip, usize), AudioError> {
    let p = profile(class, action, fill)?;
    let rate = SAMPLE_RATE as f64;
    let n = (CLIP_SECONDS * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class.ordinal() as u64 * 8 + action as u64));
    let mut buf = vec![0.0; n];
    let mut events = 0;
    match p.family {
        SoundFamily::Granular | SoundFamily::Weak => {
            let times = onsets(&mut rng, &p, CLIP_SECONDS);
            events = times.len();
            for t in times {
                let n0 = (t * rate) as usize;
                let amp = p.amplitude * rng.gen_range(0.5..1.0);
                let decay = p.event_decay * rng.gen_range(0.8..1.25);
                if p.family == SoundFamily::Weak {
                    // Faint broadband tick: a decaying noise burst.
                    let len = ((6.0 * decay * rate) as usize).max(1);
                    let k = (-1.0 / (decay * rate)).exp();
                    let mut env = amp;
                    for s in buf.iter_mut().skip(n0).take(len) {
                        *s += env * gauss(&mut rng).clamp(-3.0, 3.0);
                        env *= k;
                    }
                    continue;
                }
                let f = p.center_hz * (FREQ_JITTER * gauss(&mut rng)).exp();
                add_mode(&mut buf, rate, n0, amp, f, decay, rng.gen_range(0.0..2.0 * PI));
                if p.family == SoundFamily::Granular && f * SECOND_MODE_RATIO < rate / 2.0 {
                    let ph = rng.gen_range(0.0..2.0 * PI);
                    add_mode(&mut buf, rate, n0, 0.35 * amp, f * SECOND_MODE_RATIO, 0.6 * decay, ph);
                }
            }
            if p.noise_level > 0.0 {
                let mut hiss: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
                normalize_rms(&mut hiss, p.noise_level);
                for (i, (s, h)) in buf.iter_mut().zip(&hiss).enumerate() {
                    *s += h * (0.3 + 1.4 * cycle(i as f64 / rate, p.period));
                }
            }
        }
        SoundFamily::Liquid => {
            let mut noise: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
            bandpass(&mut noise, rate, p.center_hz, p.band_hz.1 - p.band_hz.0);
            normalize_rms(&mut noise, p.amplitude);
            let phase = rng.gen_range(0.0..p.period);
            for (i, (s, v)) in buf.iter_mut().zip(&noise).enumerate() {
                let m = 1.0 - p.slosh_depth + p.slosh_depth * cycle(i as f64 / rate + phase, p.period);
                *s = v * m;
            }
        }
    }
    Ok((AudioClip::new(SAMPLE_RATE, buf)?, events))
}

/// Deterministic clip for one probing action of a bottle.
pub fn synthesize(class: ObjectClass, action: ActionKind, fill: f64, seed: u64) -> Result<AudioClip, AudioError> {
    synthesize_detailed(class, action, fill, seed).map(|(c, _)| c)
}

/// Robot-motion noise: motor hum (fundamental 50–100 Hz plus harmonics up
/// to 300 Hz) over a white floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub snr_db: f64,
    /// Noise RMS never drops below this, so quiet clips are buried.
    pub floor_rms: f64,
    /// Share of the noise power in the hum.
    pub hum_fraction: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            snr_db: 20.0,
            floor_rms: 0.004,
            hum_fraction: 0.7,
        }
    }
}

impl NoiseConfig {
    pub fn noise_rms(&self, clip_rms: f64) -> f64 {
        (clip_rms * 10f64.powf(-self.snr_db / 20.0)).max(self.floor_rms)
    }
}

/// Noise signal of exactly `target_rms`.
pub fn robot_noise(len: usize, rate: u32, target_rms: f64, hum_fraction: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6e6f_6973));
    let r = rate as f64;
    let f_h = rng.gen_range(50.0..100.0);
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64)
        .take_while(|k| k * f_h <= 300.0)
        .map(|k| (k * f_h, 1.0 / k, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let wobble = rng.gen_range(0.3..1.0);
    let mut hum: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / r;
            let a = 1.0 + 0.1 * (2.0 * PI * wobble * t).sin();
            a * harmonics.iter().map(|(f, g, ph)| g * (2.0 * PI * f * t + ph).sin()).sum::<f64>()
        })
        .collect();
    let mut white: Vec<f64> = (0..len).map(|_| gauss(&mut rng)).collect();
    normalize_rms(&mut hum, hum_fraction.sqrt());
    normalize_rms(&mut white, (1.0 - hum_fraction).sqrt());
    let mut out: Vec<f64> = hum.iter().zip(&white).map(|(a, b)| a + b).collect();
    normalize_rms(&mut out, target_rms);
    out
}

/// Adds robot noise at `cfg.snr_db` relative to the clip RMS (with the
/// absolute floor for near-silent clips). `+∞` returns the input unchanged.
pub fn add_robot_noise_with(clip: &AudioClip, cfg: &NoiseConfig, seed: u64) -> AudioClip {
    if cfg.snr_db == f64::INFINITY || clip.is_empty() {
        return clip.clone();
    }
    let target = cfg.noise_rms(clip.rms());
    let noise = robot_noise(clip.len(), clip.rate, target, cfg.hum_fraction, seed);
    AudioClip {
        rate: clip.rate,
        samples: clip
            .samples
            .iter()
            .zip(&noise)
            .map(|(s, n)| (s + n).clamp(-1.0, 1.0))
            .collect(),
    }
}

pub fn add_robot_noise(clip: &AudioClip, snr_db: f64, seed: u64) -> AudioClip {
    add_robot_noise_with(
        clip,
        &NoiseConfig {
            snr_db,
            ..NoiseConfig::default()
        },
        seed,
    )
}

/// One labeled clip of the corpus, rendered on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Wave file backing the record; synthesized from `seed` when `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub class: ObjectClass,
    pub action: ActionKind,
    pub fill: f64,
    pub seed: u64,
    /// Bottle index within its class; the four actions of one episode share it.
    pub episode: usize,
    pub snr_db: f64,
}

impl ClipRecord {
    /// Noisy clip as the microphone hears it.
    pub fn render(&self, noise: &NoiseConfig) -> Result<AudioClip, AudioError> {
        if let Some(p) = &self.path {
            return AudioClip::read_wav(p);
        }
        let clean = synthesize(self.class, self.action, self.fill, self.seed)?;
        let cfg = NoiseConfig {
            snr_db: self.snr_db,
            ..*noise
        };
        Ok(add_robot_noise_with(&clean, &cfg, mix_seed(self.seed, 0x726f_626f)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<ObjectClass>,
    pub actions: Vec<ActionKind>,
    /// Episodes per class; each episode yields one clip per action.
    pub repetitions: usize,
    pub fill_range: (f64, f64),
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(repetitions: usize, seed: u64) -> Self {
        Self {
            classes: ObjectClass::ALL.to_vec(),
            actions: ActionKind::PROBES.to_vec(),
            repetitions,
            fill_range: FILL_RANGE,
            noise: NoiseConfig::default(),
            seed,
        }
    }

    /// Twelve objects, four actions, twenty repetitions.
    pub fn full_protocol(seed: u64) -> Self {
        Self::new(20, seed)
    }

    pub fn training(seed: u64) -> Self {
        Self::new(500, seed)
    }
}

/// Corpus ordered by class, episode, then action.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Vec<ClipRecord>, AudioError> {
    if spec.repetitions == 0 {
        return Err(AudioError::Config("repetitions must be at least 1".into()));
    }
    let (lo, hi) = spec.fill_range;
    if !(FILL_RANGE.0 <= lo && lo <= hi && hi <= FILL_RANGE.1) {
        return Err(AudioError::Domain(format!("fill range [{lo}, {hi}] outside [0.2, 0.8]")));
    }
    if let Some(a) = spec.actions.iter().find(|a| !a.is_probe()) {
        return Err(AudioError::Domain(format!("`{a}` is not a probing action")));
    }
    let mut out = Vec::with_capacity(spec.classes.len() * spec.repetitions * spec.actions.len());
    for &class in &spec.classes {
        for episode in 0..spec.repetitions {
            let ep_seed = mix_seed(spec.seed, (class.ordinal() as u64) << 40 | episode as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
            let fill = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            for &action in &spec.actions {
                out.push(ClipRecord {
                    path: None,
                    class,
                    action,
                    fill,
                    seed: mix_seed(ep_seed, action as u64 + 1),
                    episode,
                    snr_db: spec.noise.snr_db,
                });
            }
        }
    }
    Ok(out)
}

/// Manifest row: `path,class,action,fill,seed,episode,snr_db`.
pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<(), AudioError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AudioError::Io(format!("{}: {e}", path.display())))?;
    w.write_record(["path", "class", "action", "fill", "seed", "episode", "snr_db"])
        .map_err(|e| AudioError::Io(e.to_string()))?;
    for r in records {
        let p = r.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        w.write_record([
            p,
            r.class.name().to_string(),
            r.action.name().to_string(),
            format!("{}", r.fill),
            r.seed.to_string(),
            r.episode.to_string(),
            format!("{}", r.snr_db),
        ])
        .map_err(|e| AudioError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| AudioError::Io(e.to_string()))
}

/// Reads a manifest; relative wave paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>, AudioError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut r = csv::Reader::from_path(path).map_err(|e| AudioError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| AudioError::Io(e.to_string()))?;
        let bad = |what: &str| AudioError::Domain(format!("manifest row {}: bad {what}", line + 2));
        let get = |i: usize| row.get(i).unwrap_or("").trim();
        let p = get(0);
        out.push(ClipRecord {
            path: (!p.is_empty()).then(|| base.join(p)),
            class: get(1).parse().map_err(|_| bad("class"))?,
            action: get(2).parse().map_err(|_| bad("action"))?,
            fill: get(3).parse().map_err(|_| bad("fill"))?,
            seed: get(4).parse().map_err(|_| bad("seed"))?,
            episode: get(5).parse().map_err(|_| bad("episode"))?,
            snr_db: match get(6) {
                "" => NoiseConfig::default().snr_db,
                s => s.parse().map_err(|_| bad("snr_db"))?,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};
    use std::collections::HashSet;

    #[test]
    fn empty_shake_is_quiet() {
        for seed in 0..20 {
            assert!(synthesize(ObjectClass::Empty, ActionKind::Shake, 0.5, seed).unwrap().rms() < 0.02);
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize(ObjectClass::Pill, ActionKind::Yaw, 0.4, 3).unwrap();
        let b = synthesize(ObjectClass::Pill, ActionKind::Yaw, 0.4, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32_000);
        assert!(a.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn shake_excites_more_events_than_roll() {
        let mean = |a| {
            (0..50)
                .map(|s| synthesize_detailed(ObjectClass::Pill, a, 0.5, s).unwrap().1 as f64)
                .sum::<f64>()
                / 50.0
        };
        let (shake, roll) = (mean(ActionKind::Shake), mean(ActionKind::Roll));
        assert!(shake > roll, "{shake} vs {roll}");
        // Monte-Carlo mean agrees with the integrated rate 55·I·0.9·E[0.3 + 1.4|sin|].
        let expected = |i: f64, period: f64| {
            let m = 4000;
            let avg = (0..m)
                .map(|k| 0.3 + 1.4 * (PI * (k as f64 + 0.5) * 2.0 / m as f64 / period).sin().abs())
                .sum::<f64>()
                / m as f64;
            55.0 * i * 0.9 * avg * 2.0
        };
        assert!((shake - expected(1.0, 0.2)).abs() < 0.1 * expected(1.0, 0.2));
        assert!((roll - expected(0.35, 1.2)).abs() < 0.15 * expected(0.35, 1.2));
    }

    #[test]
    fn profile_laws() {
        for c in ObjectClass::ALL.into_iter().filter(|c| c.is_granular()) {
            let r = |a| profile(c, a, 0.5).unwrap().event_rate;
            assert!(r(ActionKind::Shake) >= r(ActionKind::Yaw));
            assert!(r(ActionKind::Yaw) >= r(ActionKind::Roll));
            assert!(r(ActionKind::Shake) >= r(ActionKind::Pitch));
            let f = |fill| profile(c, ActionKind::Yaw, fill).unwrap().center_hz;
            assert!(f(0.2) > f(0.5) && f(0.5) > f(0.8));
        }
        assert!(profile(ObjectClass::Empty, ActionKind::Shake, 0.5).unwrap().event_rate < 2.0);
        assert!(profile(ObjectClass::Pill, ActionKind::Shake, 0.9).is_err());
        assert!(profile(ObjectClass::Pill, ActionKind::Pick, 0.5).is_err());
    }

    #[test]
    fn weak_classes_are_quieter_than_every_granular_class() {
        for a in ActionKind::PROBES {
            for seed in 0..5 {
                let weak = [ObjectClass::CicadaSlough, ObjectClass::Empty]
                    .map(|c| synthesize(c, a, 0.5, seed).unwrap().rms());
                let loudest_weak = weak.iter().cloned().fold(0.0, f64::max);
                for c in ObjectClass::ALL.into_iter().filter(|c| c.is_granular()) {
                    assert!(synthesize(c, a, 0.5, seed).unwrap().rms() > loudest_weak, "{c} {a}");
                }
            }
        }
    }

    #[test]
    fn infinite_snr_is_identity() {
        let c = synthesize(ObjectClass::Tablet, ActionKind::Shake, 0.3, 1).unwrap();
        assert_eq!(add_robot_noise(&c, f64::INFINITY, 4), c);
    }

    #[test]
    fn noise_level_follows_snr() {
        // Unit-RMS reference: 10 dB below is 10^(-1/2).
        let target = NoiseConfig {
            snr_db: 10.0,
            ..NoiseConfig::default()
        }
        .noise_rms(1.0);
        let n = robot_noise(32_000, SAMPLE_RATE, target, 0.7, 2);
        let rms = (n.iter().map(|v| v * v).sum::<f64>() / n.len() as f64).sqrt();
        assert!((rms - 0.316).abs() < 0.316 * 0.05);
        // A quieter clip, so nothing clamps: the added signal has RMS 0.1·0.316.
        let clip = AudioClip::new(
            SAMPLE_RATE,
            (0..32_000).map(|i| 0.1 * 2f64.sqrt() * (i as f64 * 0.3).sin()).collect(),
        )
        .unwrap();
        let noisy = add_robot_noise(&clip, 10.0, 5);
        let added: f64 = clip.samples.iter().zip(&noisy.samples).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
        let added = (added / clip.len() as f64).sqrt();
        let want = clip.rms() * 10f64.powf(-0.5);
        assert!((added - want).abs() < want * 0.05, "{added} vs {want}");
    }

    #[test]
    fn near_silent_clips_get_the_absolute_floor() {
        let clip = AudioClip::silence(SAMPLE_RATE, 16_000);
        let noisy = add_robot_noise(&clip, 20.0, 3);
        assert!((noisy.rms() - NoiseConfig::default().floor_rms).abs() < 1e-9);
    }

    #[test]
    fn hum_dominates_the_noise_spectrum() {
        let n = robot_noise(8000, SAMPLE_RATE, 0.1, 0.7, 11);
        // Direct DFT magnitude on a 5 Hz grid.
        let power = |f: f64| {
            let w = 2.0 * PI * f / SAMPLE_RATE as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in n.iter().enumerate() {
                re += v * (w * i as f64).cos();
                im += v * (w * i as f64).sin();
            }
            re * re + im * im
        };
        let (mut best, mut best_f) = (0.0, 0.0);
        for k in 1..1600 {
            let f = k as f64 * 5.0;
            let p = power(f);
            if p > best {
                best = p;
                best_f = f;
            }
        }
        assert!((50.0..=300.0).contains(&best_f), "peak at {best_f} Hz");
    }

    #[test]
    fn full_protocol_counts_and_balance() {
        let recs = build_dataset(&DatasetSpec::full_protocol(1)).unwrap();
        assert_eq!(recs.len(), 960);
        for c in ObjectClass::ALL {
            assert_eq!(recs.iter().filter(|r| r.class == c).count(), 80);
        }
        for r in &recs {
            assert!((0.2..=0.8).contains(&r.fill));
        }
        assert!(build_dataset(&DatasetSpec::new(0, 1)).is_err());
    }

    #[test]
    fn different_master_seeds_give_disjoint_clips() {
        let hashes = |seed| -> HashSet<Vec<u8>> {
            let mut spec = DatasetSpec::new(1, seed);
            spec.classes = vec![ObjectClass::Pill, ObjectClass::Alcohol, ObjectClass::Empty];
            build_dataset(&spec)
                .unwrap()
                .iter()
                .map(|r| {
                    let c = r.render(&spec.noise).unwrap();
                    let mut h = Sha256::new();
                    for s in &c.samples {
                        h.update(s.to_le_bytes());
                    }
                    h.finalize().to_vec()
                })
                .collect()
        };
        let (a, b) = (hashes(1), hashes(2));
        assert_eq!(a.len(), 12);
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        let mut recs = build_dataset(&DatasetSpec::new(1, 4)).unwrap();
        recs[0].path = Some(dir.path().join("clip0.wav"));
        write_manifest(&p, &recs).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back.len(), recs.len());
        assert_eq!(back[1..], recs[1..]);
        assert_eq!(back[0].path, recs[0].path);
    }
}

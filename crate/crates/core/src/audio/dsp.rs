//! MFCC front end and envelope noise gate.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, AudioError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub pre_emphasis: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_filters: usize,
    pub n_coeffs: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            pre_emphasis: 0.97,
            window_ms: 30.0,
            hop_ms: 15.0,
            n_filters: 40,
            n_coeffs: 21,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn window_len(&self, rate: u32) -> usize {
        (self.window_ms * 1e-3 * rate as f64).round() as usize
    }

    pub fn hop_len(&self, rate: u32) -> usize {
        (self.hop_ms * 1e-3 * rate as f64).round() as usize
    }
}

/// `⌊(n − w)/h⌋ + 1` for `n ≥ w`, else 0.
pub fn frame_count(n: usize, w: usize, h: usize) -> usize {
    if n < w || w == 0 || h == 0 {
        0
    } else {
        (n - w) / h + 1
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Frames × coefficients, row-major, with frame-center timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccMatrix {
    pub n_coeffs: usize,
    pub data: Vec<f64>,
    /// Frame centers, s.
    pub times: Vec<f64>,
}

impl MfccMatrix {
    pub fn frames(&self) -> usize {
        self.times.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_coeffs..(i + 1) * self.n_coeffs]
    }

    /// Keeps the frames whose flag is set.
    pub fn select(&self, keep: &[bool]) -> MfccMatrix {
        let mut out = MfccMatrix {
            n_coeffs: self.n_coeffs,
            data: Vec::new(),
            times: Vec::new(),
        };
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k).take(self.frames()) {
            out.data.extend_from_slice(self.row(i));
            out.times.push(self.times[i]);
        }
        out
    }

    /// Columns `time,c0,…,c{n-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<(), AudioError> {
        let io = |e: std::io::Error| AudioError::Io(format!("{}: {e}", path.display()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header: Vec<String> = std::iter::once("time".to_string())
            .chain((0..self.n_coeffs).map(|k| format!("c{k}")))
            .collect();
        writeln!(f, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.frames() {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{},{}", self.times[i], row.join(",")).map_err(io)?;
        }
        Ok(())
    }
}

/// Precomputed window, filterbank, DCT basis and FFT plan for one sample rate.
pub struct MfccExtractor {
    pub config: MfccConfig,
    pub rate: u32,
    window: Vec<f64>,
    hop: usize,
    nfft: usize,
    /// `n_filters × (nfft/2 + 1)`.
    filters: Vec<Vec<f64>>,
    /// `n_coeffs × n_filters`.
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("config", &self.config)
            .field("rate", &self.rate)
            .finish()
    }
}

impl MfccExtractor {
    pub fn new(config: MfccConfig, rate: u32) -> Result<Self, AudioError> {
        let w = config.window_len(rate);
        let hop = config.hop_len(rate);
        if w < 2 || hop == 0 {
            return Err(AudioError::Config("window and hop must span samples".into()));
        }
        if config.n_coeffs == 0 || config.n_coeffs > config.n_filters {
            return Err(AudioError::Config(format!(
                "{} coefficients from {} filters",
                config.n_coeffs, config.n_filters
            )));
        }
        if config.log_floor <= 0.0 {
            return Err(AudioError::Config("log floor must be positive".into()));
        }
        let nfft = w.next_power_of_two();
        let window = (0..w)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (w - 1) as f64).cos())
            .collect();
        let edges = filter_edges(config.n_filters, rate);
        let bins = nfft / 2 + 1;
        let filters = (0..config.n_filters)
            .map(|m| {
                (0..bins)
                    .map(|k| triangle(k as f64 * rate as f64 / nfft as f64, edges[m], edges[m + 1], edges[m + 2]))
                    .collect()
            })
            .collect();
        let m = config.n_filters as f64;
        let dct = (0..config.n_coeffs)
            .map(|k| {
                (0..config.n_filters)
                    .map(|j| (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos())
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Ok(Self {
            config,
            rate,
            window,
            hop,
            nfft,
            filters,
            dct,
            fft,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn hop_len(&self) -> usize {
        self.hop
    }

    pub fn fft_size(&self) -> usize {
        self.nfft
    }

    /// Triangle peaks, Hz.
    pub fn filter_centers(&self) -> Vec<f64> {
        filter_edges(self.config.n_filters, self.rate)[1..=self.config.n_filters].to_vec()
    }

    fn check(&self, clip: &AudioClip) -> Result<(), AudioError> {
        if clip.rate != self.rate {
            return Err(AudioError::Config(format!(
                "extractor built for {} Hz, clip is {} Hz",
                self.rate, clip.rate
            )));
        }
        if clip.len() < self.window.len() {
            return Err(AudioError::TooShort {
                len: clip.len(),
                need: self.window.len(),
            });
        }
        Ok(())
    }

    /// Mel filterbank energies per frame (before the log).
    pub fn filterbank(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>, AudioError> {
        self.check(clip)?;
        let w = self.window.len();
        let x = &clip.samples;
        let a = self.config.pre_emphasis;
        let emph: Vec<f64> = (0..x.len())
            .map(|i| if i == 0 { x[0] } else { x[i] - a * x[i - 1] })
            .collect();
        let n_frames = frame_count(x.len(), w, self.hop);
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.nfft / 2 + 1];
        let mut out = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let seg = &emph[f * self.hop..f * self.hop + w];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(if i < w { seg[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            out.push(
                self.filters
                    .iter()
                    .map(|h| h.iter().zip(&power).map(|(a, b)| a * b).sum())
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MfccMatrix, AudioError> {
        let energies = self.filterbank(clip)?;
        let floor = self.config.log_floor;
        let mut data = Vec::with_capacity(energies.len() * self.config.n_coeffs);
        let mut logs = vec![0.0; self.config.n_filters];
        for e in &energies {
            for (l, v) in logs.iter_mut().zip(e) {
                *l = v.max(floor).ln();
            }
            data.extend(self.dct.iter().map(|basis| basis.iter().zip(&logs).map(|(a, b)| a * b).sum::<f64>()));
        }
        let w = self.window.len() as f64;
        let times = (0..energies.len())
            .map(|f| (f as f64 * self.hop as f64 + w / 2.0) / self.rate as f64)
            .collect();
        Ok(MfccMatrix {
            n_coeffs: self.config.n_coeffs,
            data,
            times,
        })
    }
}

/// `n + 2` equally mel-spaced edges from 0 Hz to Nyquist.
fn filter_edges(n: usize, rate: u32) -> Vec<f64> {
    let top = hz_to_mel(rate as f64 / 2.0);
    (0..n + 2).map(|i| mel_to_hz(top * i as f64 / (n + 1) as f64)).collect()
}

fn triangle(f: f64, lo: f64, c: f64, hi: f64) -> f64 {
    if f > lo && f <= c {
        (f - lo) / (c - lo)
    } else if f > c && f < hi {
        (hi - f) / (hi - c)
    } else {
        0.0
    }
}

/// MFCCs with the default configuration at the clip's own rate.
pub fn mfcc(clip: &AudioClip) -> Result<MfccMatrix, AudioError> {
    MfccExtractor::new(MfccConfig::default(), clip.rate)?.extract(clip)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Envelope RMS window, ms.
    pub window_ms: f64,
    /// Threshold as a multiple of the median envelope.
    pub factor: f64,
    /// Retained runs shorter than this many windows are dropped.
    pub min_span_windows: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            window_ms: 10.0,
            factor: 1.5,
            min_span_windows: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedClip {
    pub clip: AudioClip,
    /// Per envelope window: kept or zeroed.
    pub mask: Vec<bool>,
    pub window: usize,
}

impl GatedClip {
    pub fn retained_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
        }
    }

    /// MFCC frame `i` is kept when the envelope window holding its center is.
    pub fn frame_mask(&self, n_frames: usize, frame_len: usize, hop: usize) -> Vec<bool> {
        (0..n_frames)
            .map(|i| {
                let c = i * hop + frame_len / 2;
                self.mask.get(c / self.window).copied().unwrap_or(false)
            })
            .collect()
    }
}

/// RMS of consecutive non-overlapping windows (the last may be partial).
pub fn envelope(samples: &[f64], window: usize) -> Vec<f64> {
    samples
        .chunks(window.max(1))
        .map(|c| (c.iter().map(|s| s * s).sum::<f64>() / c.len() as f64).sqrt())
        .collect()
}

/// Zeroes the windows whose envelope falls below `factor × median`. When no
/// window reaches that level the clip has no foreground and every non-silent
/// window is kept; silent windows are always dropped.
pub fn noise_gate(clip: &AudioClip, cfg: &GateConfig) -> GatedClip {
    let window = ((cfg.window_ms * 1e-3 * clip.rate as f64).round() as usize).max(1);
    let env = envelope(&clip.samples, window);
    let mut sorted = env.clone();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let max = sorted.last().copied().unwrap_or(0.0);
    let threshold = cfg.factor * median;
    let mut mask: Vec<bool> = if max < threshold {
        env.iter().map(|&e| e > 0.0).collect()
    } else {
        env.iter().map(|&e| e > 0.0 && e >= threshold).collect()
    };
    if cfg.min_span_windows > 1 {
        let mut i = 0;
        while i < mask.len() {
            if !mask[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            if i - start < cfg.min_span_windows {
                mask[start..i].iter_mut().for_each(|m| *m = false);
            }
        }
    }
    let mut samples = clip.samples.clone();
    for (chunk, keep) in samples.chunks_mut(window).zip(&mask) {
        if !keep {
            chunk.iter_mut().for_each(|s| *s = 0.0);
        }
    }
    GatedClip {
        clip: AudioClip {
            rate: clip.rate,
            samples,
        },
        mask,
        window,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, amp: f64, n: usize) -> AudioClip {
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        AudioClip::new(SAMPLE_RATE, s).unwrap()
    }

    #[test]
    fn two_second_clip_has_132_frames() {
        let m = mfcc(&tone(440.0, 0.3, 32_000)).unwrap();
        assert_eq!(m.frames(), 132);
        assert_eq!(m.n_coeffs, 21);
        assert!(m.data.iter().all(|v| v.is_finite()));
        assert!((m.times[0] - 0.015).abs() < 1e-12);
    }

    #[test]
    fn frame_law_over_random_lengths() {
        let ex = MfccExtractor::new(MfccConfig::default(), SAMPLE_RATE).unwrap();
        assert_eq!((ex.window_len(), ex.hop_len(), ex.fft_size()), (480, 240, 512));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = rng.gen_range(480..6000);
            let m = ex.extract(&AudioClip::silence(SAMPLE_RATE, n)).unwrap();
            assert_eq!(m.frames(), (n - 480) / 240 + 1);
        }
        assert!(matches!(
            ex.extract(&AudioClip::silence(SAMPLE_RATE, 479)),
            Err(AudioError::TooShort { .. })
        ));
    }

    #[test]
    fn silence_maps_to_the_floor_image() {
        let m = mfcc(&AudioClip::silence(SAMPLE_RATE, 4000)).unwrap();
        let l = 1e-10f64.ln();
        for f in 0..m.frames() {
            let r = m.row(f);
            assert!((r[0] - 40.0 * l).abs() < 1e-9);
            // Σ_j cos(πk(j+½)/M) vanishes for 0 < k < 2M.
            for &c in &r[1..] {
                assert!(c.abs() < 1e-9);
            }
            assert_eq!(r, m.row(0));
        }
    }

    #[test]
    fn one_kilohertz_lands_in_its_filter() {
        // Oracle: the triangle with the largest weight at 1 kHz, from the mel
        // formula evaluated independently.
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let e: Vec<f64> = (0..42).map(|i| inv(top * i as f64 / 41.0)).collect();
        let w = |m: usize| {
            let (l, c, h) = (e[m], e[m + 1], e[m + 2]);
            if (l..=c).contains(&1000.0) {
                (1000.0 - l) / (c - l)
            } else if (c..h).contains(&1000.0) {
                (h - 1000.0) / (h - c)
            } else {
                0.0
            }
        };
        let want = (0..40).max_by(|&a, &b| w(a).total_cmp(&w(b))).unwrap();
        let ex = MfccExtractor::new(MfccConfig::default(), SAMPLE_RATE).unwrap();
        let fb = ex.filterbank(&tone(1000.0, 0.5, 8000)).unwrap();
        for frame in &fb {
            let got = (0..40).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn scaling_only_shifts_c0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..4000).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let a = AudioClip::new(SAMPLE_RATE, s.clone()).unwrap();
        let b = AudioClip::new(SAMPLE_RATE, s.iter().map(|v| v * 0.25).collect()).unwrap();
        let (ma, mb) = (mfcc(&a).unwrap(), mfcc(&b).unwrap());
        let shift = 40.0 * 2.0 * 0.25f64.ln();
        for f in 0..ma.frames() {
            assert!((mb.row(f)[0] - ma.row(f)[0] - shift).abs() < 1e-6);
            for k in 1..21 {
                assert!((mb.row(f)[k] - ma.row(f)[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gate_silence_tone_and_burst() {
        let g = GateConfig::default();
        let s = noise_gate(&AudioClip::silence(SAMPLE_RATE, 32_000), &g);
        assert!(s.mask.iter().all(|m| !m));

        let t = noise_gate(&tone(500.0, 0.5, 32_000), &g);
        assert!(t.mask.iter().all(|m| *m));
        assert_eq!(t.clip, tone(500.0, 0.5, 32_000));

        // 0.5 s burst at 0.75–1.25 s over floor noise 30 dB down.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..32_000)
            .map(|i| {
                let floor = 0.0316 * rng.gen_range(-1.0..1.0) * 3f64.sqrt();
                let burst = if (12_000..20_000).contains(&i) {
                    (i as f64 * 0.2).sin() * 2f64.sqrt() * 0.9
                } else {
                    0.0
                };
                (floor + burst).clamp(-1.0, 1.0)
            })
            .collect();
        let b = noise_gate(&AudioClip::new(SAMPLE_RATE, samples).unwrap(), &g);
        let w = 160;
        for (i, &m) in b.mask.iter().enumerate() {
            let start = i * w;
            if start >= 12_000 + 2 * w && start + w <= 20_000 - 2 * w {
                assert!(m, "burst window {i} dropped");
            }
            if start + w <= 12_000 - 2 * w || start >= 20_000 + 2 * w {
                assert!(!m, "floor window {i} kept");
            }
        }
    }

    #[test]
    fn frame_mask_uses_the_center_window() {
        let g = GatedClip {
            clip: AudioClip::silence(SAMPLE_RATE, 1200),
            mask: vec![false, true, false, false, true, false, false, false],
            window: 160,
        };
        // Centers at 240, 480, 720 fall in windows 1, 3, 4.
        assert_eq!(g.frame_mask(3, 480, 240), vec![true, false, true]);
    }

    #[test]
    fn min_span_drops_short_runs() {
        let mut s = vec![0.001; 3200];
        s[800..960].iter_mut().for_each(|v| *v = 0.5);
        s[1600..2240].iter_mut().for_each(|v| *v = 0.5);
        let clip = AudioClip::new(SAMPLE_RATE, s).unwrap();
        let cfg = GateConfig {
            min_span_windows: 2,
            ..GateConfig::default()
        };
        let g = noise_gate(&clip, &cfg);
        assert!(!g.mask[5]);
        assert!(g.mask[10..14].iter().all(|m| *m));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gate_never_adds_energy_and_is_idempotent(
            seed in 0u64..1000,
            n in 160usize..4000,
            min_span in 1usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let burst_at = rng.gen_range(0..n);
            let s: Vec<f64> = (0..n)
                .map(|i| {
                    let a = if i.abs_diff(burst_at) < 300 { 0.6 } else { 0.02 };
                    if rng.gen_bool(0.05) { 0.0 } else { a * rng.gen_range(-1.0..1.0) }
                })
                .collect();
            let clip = AudioClip::new(SAMPLE_RATE, s).unwrap();
            let cfg = GateConfig { min_span_windows: min_span, ..GateConfig::default() };
            let once = noise_gate(&clip, &cfg);
            prop_assert!(once.clip.energy() <= clip.energy() + 1e-12);
            let twice = noise_gate(&once.clip, &cfg);
            prop_assert_eq!(&twice.clip, &once.clip);
            prop_assert_eq!(twice.mask, once.mask);
        }

        #[test]
        fn frame_law_holds(n in 480usize..100_000) {
            prop_assert_eq!(frame_count(n, 480, 240), (n - 480) / 240 + 1);
        }
    }
}

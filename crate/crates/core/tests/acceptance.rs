//! Acceptance run: one PASS/FAIL line per criterion. Trained models are
//! shared between the criteria that need them.

#![allow(clippy::needless_range_loop)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avground::audio::classifier::{evaluate_per_action, train_sound, Pooling};
use avground::audio::{
    build_dataset, frame_count, AudioClip, DatasetSpec, FeatureSet, FrontEnd, FrontEndConfig, MfccConfig, MfccExtractor,
    NoiseConfig, SoundModel, SoundModelConfig, SoundTrainConfig, SAMPLE_RATE,
};
use avground::classes::ObjectClass;
use avground::engine::{Grounder, LearnedGrounder, LearnedRecognizer, Models, PolicyConfig, Recognizer};
use avground::evaluation::{compare_baseline, run_tasks, MetricsReport, SuiteConfig};
use avground::grounding::{
    build_samples, candidate, evaluate_grounding, fit_grounding, scene_loss, GroundingFitConfig, GroundingHead,
    GroundingModel, GroundingModelConfig, HeadConfig, SceneSample, Selection, TaskSample,
};
use avground::instruction::{parse, TaskKind, Vocabulary};
use avground::language::{slot_loss, EncoderConfig, LanguageEncoder, SlotHeads};
use avground::neural::{grad_check, GradCheckConfig, Joint, Linear, Matrix};
use avground::scene::{make_scene, make_task, BBox, DetectorConfig, FeatureMap, FeatureMapPyramid, PyramidConfig, Scene, Task};

type Outcome = Result<String, String>;

struct Harness {
    passed: usize,
    total: usize,
}

impl Harness {
    fn check(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let el = t.elapsed();
        let (ok, detail) = match r {
            Ok(d) if el <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
            Err(d) => (false, d),
        };
        self.total += 1;
        self.passed += ok as usize;
        println!(
            "[{}] {id:>2}. {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            el.as_secs_f64()
        );
    }
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

// ---------- scalar reference implementations ----------

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

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Embedding, Bi-GRU, three attention modules and pooling, written as loops.
fn encode_reference(enc: &LanguageEncoder, tokens: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = tokens.len();
    let hd = enc.config.hidden_dim;
    let e: Vec<Vec<f64>> = tokens.iter().map(|&w| enc.embed.row(w).to_vec()).collect();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let step = |p: &avground::neural::GruParams, x: &[f64], h: &[f64]| -> Vec<f64> {
        let aff = |w: &Matrix, u: &Matrix, b: &Matrix, hv: &[f64], i: usize| {
            let mut s = b.get(i, 0);
            for j in 0..x.len() {
                s += w.get(i, j) * x[j];
            }
            for j in 0..hd {
                s += u.get(i, j) * hv[j];
            }
            s
        };
        let r: Vec<f64> = (0..hd).map(|i| sig(aff(&p.w_r, &p.u_r, &p.b_r, h, i))).collect();
        let z: Vec<f64> = (0..hd).map(|i| sig(aff(&p.w_z, &p.u_z, &p.b_z, h, i))).collect();
        let rh: Vec<f64> = (0..hd).map(|i| r[i] * h[i]).collect();
        (0..hd)
            .map(|i| (1.0 - z[i]) * h[i] + z[i] * aff(&p.w_h, &p.u_h, &p.b_h, &rh, i).tanh())
            .collect()
    };
    let mut hf = vec![vec![0.0; hd]; n + 1];
    for t in 0..n {
        hf[t + 1] = step(&enc.gru.fwd, &e[t], &hf[t]);
    }
    let mut hb = vec![vec![0.0; hd]; n + 1];
    for t in (0..n).rev() {
        hb[t] = step(&enc.gru.bwd, &e[t], &hb[t + 1]);
    }
    let h: Vec<Vec<f64>> = (0..n).map(|t| [hf[t + 1].clone(), hb[t].clone()].concat()).collect();
    let mut f = Vec::new();
    let mut atts = Vec::new();
    for m in 0..enc.attn.rows() {
        let logits: Vec<f64> = (0..n).map(|t| (0..2 * hd).map(|j| enc.attn.get(m, j) * h[t][j]).sum()).collect();
        let a = softmax(&logits);
        let src = if enc.config.pool_hidden { &h } else { &e };
        for j in 0..src[0].len() {
            f.push((0..n).map(|t| a[t] * src[t][j]).sum());
        }
        atts.push(a);
    }
    (f, atts)
}

/// Gated fusion per level at every cell.
fn fuse_reference(h: &GroundingHead, f_t: &[f64], pyr: &FeatureMapPyramid) -> Vec<Vec<f64>> {
    let g: Vec<f64> = lin(&h.w_t, f_t).into_iter().map(lrelu).collect();
    pyr.levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut out = Vec::new();
            for c in 0..l.size * l.size {
                let v = lin(&h.w_v[i], &l.data[c * l.channels..(c + 1) * l.channels]);
                out.extend((0..g.len()).map(|k| g[k] * lrelu(v[k])));
            }
            out
        })
        .collect()
}

/// Region pooling over the merged map, attention logits, β, and localization scores.
fn attend_reference(
    h: &GroundingHead,
    f_t: &[f64],
    pyr: &FeatureMapPyramid,
    cands: &[avground::scene::CandidateRegion],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
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
    let beta = softmax(&logits);
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

fn random_candidates(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<avground::scene::CandidateRegion> {
    (0..n)
        .map(|_| {
            let b = BBox::centered(
                rng.gen_range(4.0..60.0),
                rng.gen_range(4.0..60.0),
                rng.gen_range(2.0..40.0),
                rng.gen_range(2.0..40.0),
            );
            candidate(b, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect()
}

fn random_head(rng: &mut ChaCha8Rng, seed: u64) -> (GroundingHead, Vec<usize>) {
    let fine = [2usize, 4, 8][rng.gen_range(0..3)];
    let n_levels = rng.gen_range(1..=3);
    let divisors: Vec<usize> = [1usize, 2, 4, 8].into_iter().filter(|d| fine.is_multiple_of(*d)).collect();
    let mut sizes: Vec<usize> = (0..n_levels - 1).map(|_| divisors[rng.gen_range(0..divisors.len())]).collect();
    sizes.push(fine);
    sizes.sort_unstable();
    let cfg = HeadConfig {
        feature_dim: rng.gen_range(1..=6),
        level_channels: sizes.iter().map(|_| rng.gen_range(1..=5)).collect(),
        fused_dim: rng.gen_range(1..=5),
        att_dim: rng.gen_range(1..=5),
        region_dim: rng.gen_range(1..=5),
        logit_scale: rng.gen_range(0.5..6.0),
    };
    (GroundingHead::new(cfg, seed), sizes)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c1_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let configs = 120;
    for trial in 0..configs {
        let (h, sizes) = random_head(&mut rng, trial);
        let pyr = random_pyramid(&mut rng, &sizes, &h.config.level_channels);
        let f_t: Vec<f64> = (0..h.config.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fused = h.fuse(&f_t, &pyr).map_err(|e| e.to_string())?;
        for (got, want) in fused.levels.iter().zip(fuse_reference(&h, &f_t, &pyr)) {
            worst = worst.max(max_diff(&got.data, &want));
        }
        let n = rng.gen_range(1..=5);
        let cands = random_candidates(&mut rng, n, h.config.region_dim);
        let res = h.attend(&fused, &cands, Selection::Cosine).map_err(|e| e.to_string())?;
        let (logits, beta, s) = attend_reference(&h, &f_t, &pyr, &cands);
        worst = worst.max(max_diff(&res.logits, &logits)).max(max_diff(&res.beta, &beta)).max(max_diff(&res.s_loc, &s));

        let cfg = EncoderConfig {
            vocab_size: rng.gen_range(3..=20),
            embed_dim: rng.gen_range(1..=6),
            hidden_dim: rng.gen_range(1..=5),
            pool_hidden: rng.gen_bool(0.5),
        };
        let enc = LanguageEncoder::new(cfg, 1000 + trial);
        let tokens: Vec<usize> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let got = enc.encode(&tokens).map_err(|e| e.to_string())?;
        let (f, atts) = encode_reference(&enc, &tokens);
        worst = worst.max(max_diff(&got.f_t, &f));
        for (m, a) in atts.iter().enumerate() {
            worst = worst.max(max_diff(got.attention.row(m), a));
        }
    }
    ensure(worst < 1e-9, format!("max error {worst:.2e}"))?;
    Ok(format!("{configs} fusion/attention and {configs} encoder configurations, max error {worst:.1e}"))
}

fn c2_gradients() -> Outcome {
    let cfg = |samples| GradCheckConfig {
        eps: 1e-5,
        samples,
        seed: 1,
    };
    let mut parts = Vec::new();
    // Language encoder through the slot-decoding loss.
    let mut lang = 0.0f64;
    for pool_hidden in [false, true] {
        let enc = LanguageEncoder::new(
            EncoderConfig {
                vocab_size: 11,
                embed_dim: 5,
                hidden_dim: 4,
                pool_hidden,
            },
            13,
        );
        let heads = SlotHeads::new(enc.feature_dim(), 3);
        let intent = parse("Check the bottle on the apple for pill.").map_err(|e| e.to_string())?;
        let tokens = [1, 4, 4, 9, 0, 2];
        let model = Joint(enc, heads);
        let rep = grad_check(
            &model,
            |m| {
                let (l, ge, gh) = slot_loss(&m.0, &m.1, &tokens, &intent).unwrap();
                (l, Joint(ge, gh))
            },
            cfg(500),
        )
        .map_err(|e| e.to_string())?;
        lang = lang.max(rep.max_rel_error);
    }
    parts.push(("language encoder", lang));
    // Grounding heads plus encoder through the scene loss.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vocab = Vocabulary::from_templates();
    let mut enc = EncoderConfig::new(vocab.len());
    enc.embed_dim = 4;
    enc.hidden_dim = 3;
    let gcfg = GroundingModelConfig {
        encoder: enc,
        head: HeadConfig {
            feature_dim: enc.feature_dim(),
            level_channels: vec![3, 2],
            fused_dim: 3,
            att_dim: 4,
            region_dim: 3,
            logit_scale: 4.0,
        },
        selection: Selection::Cosine,
    };
    let model = GroundingModel::new(vocab.clone(), &gcfg, 5);
    let sample = SceneSample {
        pyramid: random_pyramid(&mut rng, &[2, 4], &[3, 2]),
        candidates: random_candidates(&mut rng, 3, 3),
        tasks: vec![
            TaskSample {
                tokens: vocab.tokenize("find all the pills and put them in the red bowl"),
                kind: TaskKind::Classification,
                target_idx: vec![0, 2],
                dest_idx: Some(1),
            },
            TaskSample {
                tokens: vocab.tokenize("check the bottle on the book for pill"),
                kind: TaskKind::Exploratory,
                target_idx: vec![1],
                dest_idx: None,
            },
        ],
    };
    let rep = grad_check(&model, |m| scene_loss(m, &sample).unwrap(), cfg(600)).map_err(|e| e.to_string())?;
    parts.push(("grounding", rep.max_rel_error));
    // Audio classifier for both readouts.
    let mut audio = 0.0f64;
    for pooling in [Pooling::Final, Pooling::Mean] {
        let m = SoundModel::new(
            SoundModelConfig {
                input_dim: 4,
                hidden_dim: 5,
                pooling,
            },
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::from_vec(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let rep = grad_check(&m, |p| p.loss_grad(&x, 7).unwrap(), cfg(400)).map_err(|e| e.to_string())?;
        audio = audio.max(rep.max_rel_error);
    }
    parts.push(("audio classifier", audio));
    let text = parts.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(parts.iter().all(|(_, e)| *e <= 1e-5), format!("relative error above 1e-5: {text}"))?;
    Ok(format!("max relative error: {text}"))
}

fn c3_mfcc() -> Outcome {
    let cfg = MfccConfig::default();
    let ex = MfccExtractor::new(cfg, SAMPLE_RATE).map_err(|e| e.to_string())?;
    let (w, h) = (ex.window_len(), ex.hop_len());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(w..=3 * SAMPLE_RATE as usize);
        let clip = AudioClip::silence(SAMPLE_RATE, n);
        let got = ex.extract(&clip).map_err(|e| e.to_string())?.frames();
        let want = (n - w) / h + 1;
        ensure(got == want && frame_count(n, w, h) == want, format!("length {n}: {got} frames, expected {want}"))?;
    }
    let two = ex.extract(&AudioClip::silence(SAMPLE_RATE, 2 * SAMPLE_RATE as usize)).map_err(|e| e.to_string())?;
    ensure(two.frames() == 132, format!("2 s clip gave {} frames", two.frames()))?;
    let tone: Vec<f64> = (0..SAMPLE_RATE as usize)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    let bank = ex.filterbank(&AudioClip::new(SAMPLE_RATE, tone).unwrap()).map_err(|e| e.to_string())?;
    let centers = ex.filter_centers();
    let nearest = (0..centers.len())
        .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
        .unwrap();
    let mid = &bank[bank.len() / 2];
    let arg = (0..mid.len()).max_by(|&a, &b| mid[a].total_cmp(&mid[b])).unwrap();
    ensure(arg == nearest, format!("1 kHz tone peaks in filter {arg}, nearest to 1 kHz is {nearest}"))?;
    Ok(format!(
        "frame law over 1000 lengths, 132 frames for 2 s, tone peaks in filter {arg} ({:.0} Hz)",
        centers[arg]
    ))
}

struct AudioResult {
    table: avground::audio::ActionTable,
    model: SoundModel,
}

fn c4_audio(slot: &mut Option<AudioResult>) -> Outcome {
    let front = FrontEnd::standard();
    let noise = NoiseConfig::default();
    let train = FeatureSet::from_records(&build_dataset(&DatasetSpec::new(500, 1)).unwrap(), &front, &noise)
        .map_err(|e| e.to_string())?;
    let test = FeatureSet::from_records(&build_dataset(&DatasetSpec::new(100, 2)).unwrap(), &front, &noise)
        .map_err(|e| e.to_string())?;
    let (model, _, _) = train_sound(&train, &SoundTrainConfig::default(), 7).map_err(|e| e.to_string())?;
    let table = evaluate_per_action(&model, &test).map_err(|e| e.to_string())?;
    let avg = table.average;
    let detail = format!(
        "all-actions {:.2}%, pitch {:.2}%, yaw {:.2}%, roll {:.2}%, shake {:.2}%",
        100.0 * avg[0],
        100.0 * avg[1],
        100.0 * avg[2],
        100.0 * avg[3],
        100.0 * avg[4]
    );
    *slot = Some(AudioResult { table, model });
    ensure(avg[0] >= 0.85, format!("all-actions accuracy below 85%: {detail}"))?;
    ensure(avg[1..].iter().all(|&a| avg[0] >= a), format!("a single action beats the vote: {detail}"))?;
    Ok(detail)
}

fn c5_weak_classes(slot: &Option<AudioResult>) -> Outcome {
    let r = slot.as_ref().ok_or("no trained audio model")?;
    let rank = r.table.ranking();
    let bottom: Vec<String> = rank[..3]
        .iter()
        .map(|c| format!("{} {:.1}%", c.name(), 100.0 * r.table.row(*c)[0]))
        .collect();
    ensure(
        rank[..3].contains(&ObjectClass::Empty) && rank[..3].contains(&ObjectClass::CicadaSlough),
        format!("bottom three: {}", bottom.join(", ")),
    )?;
    Ok(format!("bottom three: {}", bottom.join(", ")))
}

fn c6_grounding(slot: &mut Option<GroundingModel>) -> Outcome {
    let vocab = Vocabulary::from_templates();
    let (pyr, det) = (PyramidConfig::default(), DetectorConfig::default());
    let (train, _) = build_samples(500, 1, &vocab, &pyr, &det, true).map_err(|e| e.to_string())?;
    let (test, _) = build_samples(100, 999, &vocab, &pyr, &det, false).map_err(|e| e.to_string())?;
    let (model, _) = fit_grounding(&vocab, &train, &GroundingFitConfig::default(), 3).map_err(|e| e.to_string())?;
    let ev = evaluate_grounding(&model, &test).map_err(|e| e.to_string())?;
    *slot = Some(model);
    let mut cfg = GroundingFitConfig::default();
    cfg.train.shuffle_labels = true;
    let (shuffled, _) = fit_grounding(&vocab, &train, &cfg, 3).map_err(|e| e.to_string())?;
    let sh = evaluate_grounding(&shuffled, &test).map_err(|e| e.to_string())?;
    let chance = 1.0 / ev.mean_candidates + 0.1;
    let detail = format!(
        "held-out accuracy {:.1}% over {} instructions; shuffled labels {:.1}% (bound {:.1}%)",
        100.0 * ev.accuracy,
        ev.tasks,
        100.0 * sh.accuracy,
        100.0 * chance
    );
    ensure(ev.accuracy >= 0.95 && sh.accuracy <= chance, detail.clone())?;
    Ok(detail)
}

fn c7_oracle(reports: &mut Vec<(String, MetricsReport)>) -> Outcome {
    let cfg = SuiteConfig {
        episodes_per_cell: 20,
        seed: 17,
        ..SuiteConfig::default()
    };
    let tasks = cfg.tasks().map_err(|e| e.to_string())?;
    let eps = run_tasks(&tasks, &Models::oracle(), &PolicyConfig::default(), cfg.seed).map_err(|e| e.to_string())?;
    let rep = MetricsReport::from_episodes(&eps);
    let bad: Vec<String> = rep
        .cells
        .iter()
        .filter(|c| c.otsr.k != c.episodes)
        .map(|c| format!("scene{} {}: {}/{}", c.archetype, c.kind.name(), c.otsr.k, c.episodes))
        .collect();
    let n = eps.len();
    let cells = rep.cells.len();
    reports.push(("oracle suite".into(), rep));
    ensure(bad.is_empty() && cells == 18, format!("cells below 100%: {}", bad.join(", ")))?;
    Ok(format!("{n} episodes over {cells} cells, all at 100% OTSR"))
}

fn learned(model: &GroundingModel, audio: &SoundModel) -> Models {
    Models {
        grounder: Grounder::Learned(Box::new(LearnedGrounder {
            model: model.clone(),
            pyramid: PyramidConfig::default(),
            detector: DetectorConfig::default(),
        })),
        recognizer: Recognizer::Learned(Box::new(LearnedRecognizer {
            model: audio.clone(),
            front: FrontEnd::new(FrontEndConfig::default(), SAMPLE_RATE).unwrap(),
            noise: NoiseConfig::default(),
        })),
    }
}

fn c8_invariant(models: Option<&Models>, reports: &mut Vec<(String, MetricsReport)>) -> Outcome {
    let models = models.ok_or("no trained models")?;
    let cfg = SuiteConfig {
        episodes_per_cell: 30,
        seed: 23,
        ..SuiteConfig::default()
    };
    let tasks = cfg.tasks().map_err(|e| e.to_string())?;
    for (name, policy) in [("learned suite", PolicyConfig::default()), ("learned no-audio suite", PolicyConfig::no_audio())] {
        let eps = run_tasks(&tasks, models, &policy, cfg.seed).map_err(|e| e.to_string())?;
        reports.push((name.into(), MetricsReport::from_episodes(&eps)));
    }
    let cells: usize = reports.iter().map(|(_, r)| r.cells.len()).sum();
    let bad: Vec<String> = reports
        .iter()
        .flat_map(|(n, r)| {
            r.cells
                .iter()
                .filter(|c| !c.consistent())
                .map(move |c| format!("{n} scene{} {}", c.archetype, c.kind.name()))
        })
        .collect();
    ensure(bad.is_empty(), format!("violations: {}", bad.join(", ")))?;
    let learned = &reports.iter().find(|(n, _)| n == "learned suite").unwrap().1;
    let pooled: Vec<String> = TaskKind::ALL
        .iter()
        .map(|k| {
            let c = learned.by_kind(*k);
            format!(
                "{} TRA {:.0}/ARA {:.0}/OTSR {:.0}",
                k.name(),
                100.0 * c.tra.value(),
                100.0 * c.ara.value(),
                100.0 * c.otsr.value()
            )
        })
        .collect();
    Ok(format!("{} reports, {cells} cells consistent; learned: {}", reports.len(), pooled.join(", ")))
}

fn identical_bottle_tasks(n: usize) -> Vec<(Scene, Task)> {
    let mut out = Vec::with_capacity(n);
    let mut seed = 0;
    while out.len() < n {
        let s = make_scene(1, 50_000 + seed).unwrap();
        let t = make_task(&s, TaskKind::Existence, 50_000 + seed).unwrap();
        seed += 1;
        let white = s.bottles().all(|b| b.color == avground::classes::Color::White);
        if s.num_bottles() == 3 && white && t.truth.matching.len() == 1 {
            out.push((s, t));
        }
    }
    out
}

fn c9_baseline(models: Option<&Models>, reports: &mut Vec<(String, MetricsReport)>) -> Outcome {
    let models = models.ok_or("no trained models")?;
    let tasks = identical_bottle_tasks(1000);
    let rep = compare_baseline(&tasks, models, 31).map_err(|e| e.to_string())?;
    let r = &rep.rows[0];
    let (al, ah) = r.audio.ci();
    let (nl, nh) = r.no_audio.ci();
    let third = r.tra.value() / 3.0;
    let detail = format!(
        "{} paired episodes: audio-visual {:.1}% [{:.1}, {:.1}], no-audio {:.1}% [{:.1}, {:.1}], TRA/3 {:.1}%",
        r.episodes,
        100.0 * r.audio.value(),
        100.0 * al,
        100.0 * ah,
        100.0 * r.no_audio.value(),
        100.0 * nl,
        100.0 * nh,
        100.0 * third
    );
    let eps = run_tasks(&tasks, models, &PolicyConfig::default(), 31).map_err(|e| e.to_string())?;
    reports.push(("identical-bottle suite".into(), MetricsReport::from_episodes(&eps)));
    ensure(r.episodes >= 1000 && r.separated() && nl <= third && third <= nh, detail.clone())?;
    Ok(detail)
}

fn c10_ara_trend(models: Option<&Models>) -> Outcome {
    let models = models.ok_or("no trained models")?;
    let per_arm = 1002;
    let mut ex = Vec::new();
    let mut cl = Vec::new();
    for i in 0..per_arm as u64 {
        let arch = avground::scene::ARCHETYPES[(i % 6) as usize];
        let s = make_scene(arch, 90_000 + i).unwrap();
        let (te, tc) = (make_task(&s, TaskKind::Existence, i).unwrap(), make_task(&s, TaskKind::Classification, i).unwrap());
        ex.push((s.clone(), te));
        cl.push((s, tc));
    }
    let e = MetricsReport::from_episodes(&run_tasks(&ex, models, &PolicyConfig::default(), 41).map_err(|e| e.to_string())?)
        .by_kind(TaskKind::Existence);
    let c = MetricsReport::from_episodes(&run_tasks(&cl, models, &PolicyConfig::default(), 41).map_err(|e| e.to_string())?)
        .by_kind(TaskKind::Classification);
    let detail = format!(
        "ARA existence {:.1}% ({} episodes) vs classification {:.1}% ({} episodes)",
        100.0 * e.ara.value(),
        e.episodes,
        100.0 * c.ara.value(),
        c.episodes
    );
    ensure(e.episodes >= 1000 && c.episodes >= 1000 && e.ara.value() >= c.ara.value(), detail.clone())?;
    Ok(detail)
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_avground"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .env_remove("AVGROUND_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::write(
        dir.join("run.toml"),
        "seed = 5\n[grounding]\ntrain_scenes = 60\nheldout_scenes = 12\n[grounding.fit]\npretrain_epochs = 2\n\
         [eval]\naudio_test_repetitions = 5\n",
    )
    .map_err(|e| e.to_string())?;
    let corpus = dir.join("corpus");
    let manifest = corpus.join("manifest.csv");
    let m = manifest.to_str().unwrap();
    Command::new(env!("CARGO_BIN_EXE_avground"))
        .args(["synth-data", "--reps", "20", "--seed", "5", "--out"])
        .arg(&corpus)
        .output()
        .map_err(|e| e.to_string())?
        .status
        .success()
        .then_some(())
        .ok_or("synth-data failed")?;
    run_cli(dir, &["train", "audio", "--manifest", m, "--epochs", "1"])?;
    run_cli(dir, &["train", "grounding", "--epochs", "1"])?;
    let g = dir.join("grounding.ckpt.json");
    let a = dir.join("audio.ckpt.json");
    run_cli(
        dir,
        &[
            "eval",
            "--grounding",
            g.to_str().unwrap(),
            "--audio",
            a.to_str().unwrap(),
            "--archetypes",
            "1",
            "--kinds",
            "existence",
            "--episodes",
            "50",
        ],
    )?;
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.push(("manifest.csv".into(), std::fs::read(&manifest).map_err(|e| e.to_string())?));
    files.sort();
    Ok(files)
}

fn c11_reproducible() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline(&tmp.path().join("a"))?;
    let b = pipeline(&tmp.path().join("b"))?;
    ensure(a.iter().any(|(n, _)| n == "table_iv.csv"), "no table_iv.csv produced".into())?;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    ensure(a.len() == b.len() && differing.is_empty(), format!("differing outputs: {differing:?}"))?;
    Ok(format!("{} CSVs byte-identical across two runs: {}", a.len(), names.join(", ")))
}

fn main() {
    let mut h = Harness { passed: 0, total: 0 };
    let min = |m: u64| Duration::from_secs(60 * m);
    h.check(1, "fusion, attention and encoder match scalar references", Duration::from_secs(10), c1_oracles);
    h.check(2, "gradient checks", min(1), c2_gradients);
    h.check(3, "MFCC framing and filterbank", Duration::from_secs(10), c3_mfcc);
    let mut audio = None;
    h.check(4, "per-action audio recognition", min(15), || c4_audio(&mut audio));
    h.check(5, "weak-sound classes rank lowest", Duration::from_secs(5), || c5_weak_classes(&audio));
    let mut grounding = None;
    h.check(6, "grounding held-out accuracy and chance control", min(10), || c6_grounding(&mut grounding));
    let mut reports = Vec::new();
    h.check(7, "oracle policy completeness", min(1), || c7_oracle(&mut reports));
    let models = match (&grounding, &audio) {
        (Some(g), Some(a)) => Some(learned(g, &a.model)),
        _ => None,
    };
    let mut c8_reports = Vec::new();
    h.check(9, "audio-visual beats the no-audio baseline", min(5), || {
        c9_baseline(models.as_ref(), &mut c8_reports)
    });
    h.check(10, "existence ARA at least classification ARA", min(5), || c10_ara_trend(models.as_ref()));
    reports.extend(c8_reports);
    h.check(8, "OTSR never exceeds TRA or ARA", min(5), || c8_invariant(models.as_ref(), &mut reports));
    h.check(11, "CLI pipeline is byte-reproducible", min(5), c11_reproducible);
    println!("{}/{} criteria passed", h.passed, h.total);
    if h.passed != h.total {
        std::process::exit(1);
    }
}

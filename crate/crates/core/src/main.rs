use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use avground::artifacts::{self, Progress};
use avground::audio::classifier::{evaluate_per_action, fit};
use avground::audio::synth::{read_manifest, write_manifest};
use avground::audio::{
    build_dataset, mix_seed, DatasetSpec, FeatureSet, FrontEnd, FrontEndConfig, NoiseConfig, SoundModel, SoundTrainConfig,
    SAMPLE_RATE,
};
use avground::audio::classifier::train_sound;
use avground::engine::{run_episode, save_trace, write_trace, Grounder, LearnedGrounder, Models, PolicyConfig, Recognizer};
use avground::evaluation::{compare_baseline, run_tasks, score_episode, write_series, MetricsReport, SuiteConfig};
use avground::grounding::{build_samples, evaluate_grounding, fit_grounding, train_grounding, GroundingFitConfig};
use avground::instruction::{parse, TaskKind, Vocabulary};
use avground::language::{train_language, EncoderConfig};
use avground::neural::{Checkpoint, OptimizerState};
use avground::scene::{ground_truth, make_scene, DetectorConfig, PyramidConfig, Scene, Task};

/// Error carrying a non-default exit code: 2 for bad input, 3 for a missing artifact.
#[derive(Debug, thiserror::Error)]
#[error("{inner:#}")]
struct Coded {
    code: u8,
    inner: anyhow::Error,
}

type Fail = anyhow::Error;

fn input_error(e: impl Into<anyhow::Error>) -> Fail {
    Coded { code: 2, inner: e.into() }.into()
}

fn missing(e: anyhow::Error) -> Fail {
    Coded { code: 3, inner: e }.into()
}

trait Classify<T> {
    fn input(self) -> Result<T, Fail>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Fail> {
        self.map_err(input_error)
    }
}

#[derive(Parser)]
#[command(name = "avground", version, about = "Audio-visual grounding and manipulation simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; its values take precedence over flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "AVGROUND_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled clip corpus: wave files plus manifest.csv.
    SynthData {
        /// Episodes per class; each episode yields one clip per action.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Train a model and write its checkpoint and loss curve.
    Train {
        #[arg(value_enum)]
        model: ModelKind,
        #[arg(long)]
        epochs: Option<usize>,
        /// Audio: train on this corpus instead of a freshly synthesized one.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Grounding: number of training scenes.
        #[arg(long)]
        scenes: Option<usize>,
        /// Continue from the existing checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run one instruction on a scene and print the episode trace.
    Run {
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        scene: PathBuf,
        /// Grounding checkpoint; ground-truth grounding when omitted.
        #[arg(long)]
        grounding: Option<PathBuf>,
        /// Audio checkpoint; ground-truth contents when omitted.
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Also write the trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Run the uniform-choice baseline instead of audio probing.
        #[arg(long)]
        no_audio: bool,
    },
    /// Evaluate a scene suite and write the report tables and plot data.
    Eval {
        #[arg(long)]
        grounding: Option<PathBuf>,
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Episodes per (scene, instruction type) cell.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        archetypes: Option<Vec<u8>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        kinds: Option<Vec<TaskKind>>,
    },
    /// Write a generated scene as JSON.
    Scene {
        #[arg(long)]
        archetype: u8,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Audio,
    Grounding,
    Language,
}

fn parse_kind(s: &str) -> Result<TaskKind, String> {
    TaskKind::ALL
        .into_iter()
        .find(|k| k.name() == s.to_ascii_lowercase())
        .ok_or_else(|| format!("unknown instruction type `{s}`"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfig {
    seed: u64,
    out: PathBuf,
    jobs: usize,
    synth: SynthSection,
    audio: AudioSection,
    grounding: GroundingSection,
    language: LanguageSection,
    eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SynthSection {
    repetitions: usize,
    noise: NoiseConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AudioSection {
    /// Corpus size when training without a manifest.
    train_repetitions: usize,
    train: SoundTrainConfig,
    front: FrontEndConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GroundingSection {
    train_scenes: usize,
    heldout_scenes: usize,
    augment: bool,
    fit: GroundingFitConfig,
    pyramid: PyramidConfig,
    detector: DetectorConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LanguageSection {
    epochs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EvalSection {
    suite: SuiteConfig,
    /// Held-out corpus size for the per-action audio table.
    audio_test_repetitions: usize,
    baseline: bool,
    policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 0,
            synth: SynthSection {
                repetitions: 20,
                noise: NoiseConfig::default(),
            },
            audio: AudioSection {
                train_repetitions: 500,
                train: SoundTrainConfig::default(),
                front: FrontEndConfig::default(),
            },
            grounding: GroundingSection {
                train_scenes: 500,
                heldout_scenes: 100,
                augment: true,
                fit: GroundingFitConfig::default(),
                pyramid: PyramidConfig::default(),
                detector: DetectorConfig::default(),
            },
            language: LanguageSection { epochs: 30 },
            eval: EvalSection {
                suite: SuiteConfig::default(),
                audio_test_repetitions: 20,
                baseline: true,
                policy: PolicyConfig::default(),
            },
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then flags, then the config file.
fn load_config(g: &Global, cmd: &Command) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::default();
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    match cmd {
        Command::SynthData { reps: Some(r) } => cfg.synth.repetitions = *r,
        Command::Train { model, epochs, scenes, .. } => {
            if let Some(e) = epochs {
                match model {
                    ModelKind::Audio => cfg.audio.train.epochs = *e,
                    ModelKind::Grounding => cfg.grounding.fit.train.epochs = *e,
                    ModelKind::Language => cfg.language.epochs = *e,
                }
            }
            if let Some(n) = scenes {
                cfg.grounding.train_scenes = *n;
            }
        }
        Command::Eval {
            episodes,
            archetypes,
            kinds,
            ..
        } => {
            if let Some(n) = episodes {
                cfg.eval.suite.episodes_per_cell = *n;
            }
            if let Some(a) = archetypes {
                cfg.eval.suite.archetypes = a.clone();
            }
            if let Some(k) = kinds {
                cfg.eval.suite.kinds = k.clone();
            }
        }
        _ => {}
    }
    let Some(path) = &g.config else {
        return Ok(cfg);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(missing)?;
    let file: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display())).input()?;
    let mut base = toml::Value::try_from(&cfg)?;
    merge(&mut base, file);
    base.try_into()
        .with_context(|| format!("invalid configuration in {}", path.display()))
        .input()
}

fn create_dir(p: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Fail> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint, Fail> {
    if !p.exists() {
        return Err(missing(anyhow!("checkpoint {} does not exist", p.display())));
    }
    Ok(Checkpoint::load(p)?)
}

fn curve_points(curve: &[f64]) -> Vec<(f64, f64)> {
    curve.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect()
}

fn synth_data(cfg: &RunConfig) -> Result<(), Fail> {
    let dir = &cfg.out;
    create_dir(&dir.join("wav"))?;
    let spec = DatasetSpec {
        noise: cfg.synth.noise,
        ..DatasetSpec::new(cfg.synth.repetitions, cfg.seed)
    };
    let mut records = build_dataset(&spec).input()?;
    records
        .par_iter_mut()
        .map(|r| {
            let clip = r.render(&spec.noise)?;
            let rel = PathBuf::from("wav").join(format!("{}_{}_{:03}.wav", r.class.name(), r.action.name(), r.episode));
            clip.write_wav(&dir.join(&rel))?;
            r.path = Some(rel);
            Ok(())
        })
        .collect::<Result<Vec<()>, avground::audio::AudioError>>()?;
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    println!("wrote {} clips and {}", records.len(), manifest.display());
    Ok(())
}

fn train_audio(cfg: &RunConfig, manifest: Option<&Path>, resume: bool) -> Result<(), Fail> {
    let records = match manifest {
        Some(m) if !m.exists() => return Err(missing(anyhow!("manifest {} does not exist", m.display()))),
        Some(m) => read_manifest(m).input()?,
        None => build_dataset(&DatasetSpec {
            noise: cfg.synth.noise,
            ..DatasetSpec::new(cfg.audio.train_repetitions, cfg.seed)
        })
        .input()?,
    };
    let front = FrontEnd::new(cfg.audio.front, SAMPLE_RATE).input()?;
    let set = FeatureSet::from_records(&records, &front, &cfg.synth.noise)?;
    let ckpt_path = cfg.out.join("audio.ckpt.json");
    let tc = &cfg.audio.train;
    let (model, opt, progress) = if resume {
        let ck = load_checkpoint(&ckpt_path)?;
        let mut rec = artifacts::audio(&ck)?;
        let (mut opt, mut p) = artifacts::progress(&ck, avground::audio::classifier::CHECKPOINT_SECTION)?;
        let start = p.epochs_done;
        let rep = fit(&mut rec.model, &mut opt, &set, tc, p.seed, start..start + tc.epochs)?;
        p.epochs_done += tc.epochs;
        p.loss_curve.extend(rep.loss_curve);
        (rec.model, opt, p)
    } else {
        let (model, opt, rep): (SoundModel, OptimizerState, _) = train_sound(&set, tc, cfg.seed)?;
        let p = Progress {
            epochs_done: tc.epochs,
            seed: cfg.seed,
            loss_curve: rep.loss_curve,
        };
        (model, opt, p)
    };
    create_dir(&cfg.out)?;
    let mut ck = artifacts::open_or_new(&ckpt_path)?;
    artifacts::put_audio(&mut ck, &model, cfg.audio.front, cfg.synth.noise)?;
    artifacts::put_progress(&mut ck, avground::audio::classifier::CHECKPOINT_SECTION, &opt, &progress)?;
    ck.save(&ckpt_path)?;
    write_series(&cfg.out.join("audio_curve.csv"), ("epoch", "loss"), &curve_points(&progress.loss_curve))?;
    println!(
        "audio: {} clips, {} epochs, final loss {:.4}; wrote {}",
        set.len(),
        progress.epochs_done,
        progress.loss_curve.last().copied().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

fn train_grounding_cmd(cfg: &RunConfig, resume: bool) -> Result<(), Fail> {
    let g = &cfg.grounding;
    let vocab = Vocabulary::from_templates();
    let (train, _) = build_samples(g.train_scenes, cfg.seed, &vocab, &g.pyramid, &g.detector, g.augment).input()?;
    let ckpt_path = cfg.out.join("grounding.ckpt.json");
    let (grounder, opt, progress) = if resume {
        let ck = load_checkpoint(&ckpt_path)?;
        let mut lg = artifacts::grounding(&ck)?;
        let (mut opt, mut p) = artifacts::progress(&ck, artifacts::GROUNDING_SECTION)?;
        let rep = train_grounding(&mut lg.model, &train, &g.fit.train, &mut opt, mix_seed(p.seed, p.epochs_done as u64))?;
        p.epochs_done += g.fit.train.epochs;
        p.loss_curve.extend(rep.loss_curve.into_iter().skip(1));
        (lg, opt, p)
    } else {
        let (model, rep) = fit_grounding(&vocab, &train, &g.fit, cfg.seed)?;
        // The fit recipe does not expose its optimizer; a resumed run starts a fresh one.
        let opt = OptimizerState::new(avground::neural::AdamConfig::default());
        let lg = LearnedGrounder {
            model,
            pyramid: g.pyramid,
            detector: g.detector,
        };
        let p = Progress {
            epochs_done: g.fit.train.epochs,
            seed: cfg.seed,
            loss_curve: rep.loss_curve,
        };
        (lg, opt, p)
    };
    let (held, _) = build_samples(g.heldout_scenes, mix_seed(cfg.seed, 0x68656c64), &vocab, &g.pyramid, &g.detector, false)
        .input()?;
    let ev = evaluate_grounding(&grounder.model, &held)?;
    create_dir(&cfg.out)?;
    let mut ck = artifacts::open_or_new(&ckpt_path)?;
    artifacts::put_grounding(&mut ck, &grounder)?;
    artifacts::put_progress(&mut ck, artifacts::GROUNDING_SECTION, &opt, &progress)?;
    ck.save(&ckpt_path)?;
    write_series(&cfg.out.join("grounding_curve.csv"), ("epoch", "loss"), &curve_points(&progress.loss_curve))?;
    println!(
        "grounding: {} scenes, {} epochs, held-out accuracy {:.2}%; wrote {}",
        train.len(),
        progress.epochs_done,
        100.0 * ev.accuracy,
        ckpt_path.display()
    );
    Ok(())
}

fn train_language_cmd(cfg: &RunConfig) -> Result<(), Fail> {
    let vocab = Vocabulary::from_templates();
    let (enc, heads, _, rep) = train_language(&vocab, EncoderConfig::new(vocab.len()), cfg.language.epochs, cfg.seed)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("language.ckpt.json");
    let mut ck = artifacts::open_or_new(&path)?;
    artifacts::put_language(&mut ck, &vocab, &enc, &heads)?;
    ck.save(&path)?;
    write_series(&cfg.out.join("language_curve.csv"), ("epoch", "loss"), &curve_points(&rep.loss_curve))?;
    println!(
        "language: {} epochs, slot accuracy {:.2}%; wrote {}",
        rep.epochs,
        100.0 * rep.slot_accuracy,
        path.display()
    );
    Ok(())
}

fn load_models(grounding: Option<&Path>, audio: Option<&Path>) -> Result<Models, Fail> {
    let grounder = match grounding {
        Some(p) => Grounder::Learned(Box::new(artifacts::grounding(&load_checkpoint(p)?)?)),
        None => Grounder::Oracle,
    };
    let recognizer = match audio {
        Some(p) => Recognizer::Learned(Box::new(artifacts::audio(&load_checkpoint(p)?)?)),
        None => Recognizer::Oracle,
    };
    Ok(Models { grounder, recognizer })
}

fn run_cmd(
    cfg: &RunConfig,
    instruction: &str,
    scene: &Path,
    models: &Models,
    trace_out: Option<&Path>,
    no_audio: bool,
) -> Result<(), Fail> {
    let intent = parse(instruction).input()?;
    if !scene.exists() {
        return Err(missing(anyhow!("scene {} does not exist", scene.display())));
    }
    let scene = Scene::load(scene).input()?;
    let truth = ground_truth(&scene, &intent).input()?;
    let task = Task {
        intent,
        instruction: instruction.to_string(),
        truth,
    };
    let policy = PolicyConfig {
        audio: !no_audio,
        ..cfg.eval.policy
    };
    let trace = run_episode(&task, &scene, models, &policy, cfg.seed)?;
    let mut stdout = std::io::stdout().lock();
    write_trace(&trace, &mut stdout)?;
    if let Some(p) = trace_out {
        save_trace(&trace, p)?;
    }
    let score = score_episode(&trace, &scene, &task.truth)?;
    eprintln!(
        "outcome {:?}; tra {} ara {} otsr {}",
        trace.outcome.as_ref().expect("terminated"),
        score.tra,
        score.ara,
        score.otsr
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, models: &Models, audio_ckpt: Option<&Path>, grounding_ckpt: Option<&Path>) -> Result<(), Fail> {
    let out = &cfg.out;
    create_dir(out)?;
    let tasks = cfg.eval.suite.tasks()?;
    let episodes = run_tasks(&tasks, models, &cfg.eval.policy, cfg.eval.suite.seed)?;
    let report = MetricsReport::from_episodes(&episodes);
    if !report.consistent() {
        return Err(anyhow!("OTSR exceeds TRA or ARA in some cell"));
    }
    write(&out.join("table_iv.csv"), &report.to_csv())?;
    write(&out.join("confusion.csv"), &report.confusion_csv())?;
    write(&out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    if cfg.eval.baseline {
        let base = compare_baseline(&tasks, models, cfg.eval.suite.seed)?;
        write(&out.join("baseline.csv"), &base.to_csv())?;
    }
    if let Recognizer::Learned(r) = &models.recognizer {
        let spec = DatasetSpec {
            noise: r.noise,
            ..DatasetSpec::new(cfg.eval.audio_test_repetitions, mix_seed(cfg.seed, 0x7465_7374))
        };
        let set = FeatureSet::from_records(&build_dataset(&spec)?, &r.front, &r.noise)?;
        let table = evaluate_per_action(&r.model, &set)?;
        table.write_csv(&out.join("table_ii.csv"))?;
        let pts: Vec<(f64, f64)> = table.rows.iter().map(|(c, v)| (c.ordinal() as f64, v[0])).collect();
        write_series(&out.join("plot_audio_accuracy.csv"), ("class", "accuracy"), &pts)?;
    }
    for (ckpt, section, name) in [
        (audio_ckpt, avground::audio::classifier::CHECKPOINT_SECTION, "plot_audio_loss.csv"),
        (grounding_ckpt, artifacts::GROUNDING_SECTION, "plot_grounding_loss.csv"),
    ] {
        if let Some(p) = ckpt {
            if let Ok((_, prog)) = artifacts::progress(&Checkpoint::load(p)?, section) {
                write_series(&out.join(name), ("epoch", "loss"), &curve_points(&prog.loss_curve))?;
            }
        }
    }
    let pooled: Vec<String> = TaskKind::ALL
        .iter()
        .filter(|k| cfg.eval.suite.kinds.contains(k))
        .map(|k| {
            let c = report.by_kind(*k);
            format!(
                "{}: TRA {:.1}% ARA {:.1}% OTSR {:.1}%",
                k.title(),
                100.0 * c.tra.value(),
                100.0 * c.ara.value(),
                100.0 * c.otsr.value()
            )
        })
        .collect();
    println!("{} episodes; {}; wrote {}", episodes.len(), pooled.join("; "), out.display());
    Ok(())
}

fn scene_cmd(cfg: &RunConfig, archetype: u8) -> Result<(), Fail> {
    let scene = make_scene(archetype, cfg.seed).input()?;
    match &cfg.out {
        p if p.extension().is_some_and(|e| e == "json") => {
            scene.save(p)?;
            println!("wrote {}", p.display());
        }
        _ => println!("{}", scene.to_json()),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Fail> {
    let cfg = load_config(&cli.global, &cli.command)?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global()?;
    }
    match &cli.command {
        Command::SynthData { .. } => synth_data(&cfg),
        Command::Train { model, manifest, resume, .. } => match model {
            ModelKind::Audio => train_audio(&cfg, manifest.as_deref(), *resume),
            ModelKind::Grounding => train_grounding_cmd(&cfg, *resume),
            ModelKind::Language => train_language_cmd(&cfg),
        },
        Command::Run {
            instruction,
            scene,
            grounding,
            audio,
            trace,
            no_audio,
        } => {
            let models = load_models(grounding.as_deref(), audio.as_deref())?;
            run_cmd(&cfg, instruction, scene, &models, trace.as_deref(), *no_audio)
        }
        Command::Eval { grounding, audio, .. } => {
            let models = load_models(grounding.as_deref(), audio.as_deref())?;
            eval_cmd(&cfg, &models, audio.as_deref(), grounding.as_deref())
        }
        Command::Scene { archetype } => scene_cmd(&cfg, *archetype),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Coded>().map_or(1, |c| c.code))
        }
    }
}

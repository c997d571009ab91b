use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use avseg::checkpoint::Checkpoint;
use avseg::config::RunConfig;
use avseg::data::prepare;
use avseg::experiments::{make_openset_split, run_finetune_sweep, run_zero_shot};
use avseg::fixtures::{fixture_manifest, FixtureSpec, RenderStyle};
use avseg::ontology::load_alias_table;
use avseg::synthesis::{
    read_audio_annotations, read_manifest, read_visual_annotations, stratified_subsample, synthesize, write_manifest,
    AnnotationSource, DatasetManifest, Split, TripletSample,
};
use avseg::train::{evaluate_report, model_checkpoint, restore_model, Trainer};
use avseg::Execution;

#[derive(Parser)]
#[command(name = "avseg", version, about = "Annotation-free audio-visual segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Join visual and audio annotations into a triplet manifest.
    Synthesize(SynthesizeArgs),
    /// Render procedural shape/tone corpora and their manifest.
    Fixtures(FixturesArgs),
    /// Train on a manifest's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Evaluate on the classes the checkpoint was trained on.
    ZeroShot(EvalArgs),
    /// Finetune with growing fractions of a second corpus, with and without pretraining.
    FinetuneSweep(SweepArgs),
    /// Split a manifest into class-disjoint seen/unseen halves.
    SplitOpenset(SplitArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Ok(RunConfig::from_toml_with_overrides(&text, &self.overrides)?)
    }
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Visual annotation files, optionally `dataset=path`.
    #[arg(long, num_args = 1.., required = true)]
    visual: Vec<String>,
    /// Audio annotation files, optionally `dataset=path`.
    #[arg(long, num_args = 1.., required = true)]
    audio: Vec<String>,
    #[arg(long)]
    aliases: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Synthetic,
    Real,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = StyleArg::Synthetic)]
    style: StyleArg,
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    #[arg(long, default_value_t = 1)]
    min_instances: usize,
    #[arg(long, default_value_t = 3)]
    max_instances: usize,
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint path for the final weights; the best validation weights
    /// go next to it with a `.best` suffix.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint (optimizer state included).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Evaluate on the test split every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    val_every: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of the target corpus; its train split is subsampled, its
    /// test split is evaluated.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2, 0.3, 1.0])]
    fractions: Vec<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    n_seen: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_seen: PathBuf,
    #[arg(long)]
    out_unseen: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = Execution::from_env();
    match cli.command {
        Command::Synthesize(a) => cmd_synthesize(a, exec),
        Command::Fixtures(a) => cmd_fixtures(a, exec),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec, false),
        Command::ZeroShot(a) => cmd_eval(a, exec, true),
        Command::FinetuneSweep(a) => cmd_sweep(a, exec),
        Command::SplitOpenset(a) => cmd_split(a),
    }
}

fn root_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_report(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Make a URI relative to `from_dir` usable from `to_dir`.
fn rebase(uri: &str, from_dir: &Path, to_dir: &Path) -> String {
    let p = Path::new(uri);
    if p.is_absolute() {
        return uri.to_string();
    }
    let abs = |d: &Path| std::fs::canonicalize(if d.as_os_str().is_empty() { Path::new(".") } else { d }).ok();
    match (abs(from_dir), abs(to_dir)) {
        (Some(f), Some(t)) if f == t => uri.to_string(),
        (Some(f), Some(t)) => match f.strip_prefix(&t) {
            Ok(rel) => rel.join(p).to_string_lossy().into_owned(),
            Err(_) => f.join(p).to_string_lossy().into_owned(),
        },
        _ => from_dir.join(p).to_string_lossy().into_owned(),
    }
}

fn cmd_synthesize(a: SynthesizeArgs, exec: Execution) -> Result<()> {
    let table = load_alias_table(&a.aliases)?;
    let out_dir = root_of(&a.out);
    std::fs::create_dir_all(if out_dir.as_os_str().is_empty() { Path::new(".") } else { &out_dir })?;
    let mut visual = Vec::new();
    for arg in &a.visual {
        let src = AnnotationSource::parse(arg);
        let dir = root_of(&src.path);
        visual.extend(read_visual_annotations(&src)?.into_iter().map(|r| {
            r.map(|mut v| {
                v.image_uri = rebase(&v.image_uri, &dir, &out_dir);
                v
            })
        }));
    }
    let mut audio = Vec::new();
    for arg in &a.audio {
        let src = AnnotationSource::parse(arg);
        let dir = root_of(&src.path);
        audio.extend(read_audio_annotations(&src)?.into_iter().map(|r| {
            r.map(|mut v| {
                v.audio_uri = rebase(&v.audio_uri, &dir, &out_dir);
                v
            })
        }));
    }
    let report = synthesize(visual, audio, &table, a.test_frac, a.seed, exec)?;
    write_manifest(&report.manifest, &a.out)?;
    println!(
        "visual: {} kept, {} unresolved, {} malformed",
        report.visual_kept, report.visual_unresolved, report.visual_malformed
    );
    println!(
        "audio:  {} kept, {} unresolved, {} malformed",
        report.audio_kept, report.audio_unresolved, report.audio_malformed
    );
    println!("{} triplets from {} images -> {}", report.manifest.len(), report.images, a.out.display());
    for (class, n) in &report.manifest.class_counts {
        println!("  {class:<24} {n}");
    }
    Ok(())
}

fn cmd_fixtures(a: FixturesArgs, exec: Execution) -> Result<()> {
    let style = match a.style {
        StyleArg::Synthetic => RenderStyle::Synthetic,
        StyleArg::Real => RenderStyle::Real,
    };
    let spec = FixtureSpec::new(a.canvas, a.classes, style).with_instances(a.min_instances, a.max_instances);
    let (manifest, report) = fixture_manifest(&spec, a.n, a.seed, a.test_frac, &a.out, exec)?;
    println!(
        "{} images, {} triplets -> {}",
        report.images,
        manifest.len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn split_samples(m: &DatasetManifest, split: SplitArg) -> Vec<TripletSample> {
    match split {
        SplitArg::Train => m.split(Split::Train).into_iter().cloned().collect(),
        SplitArg::Test => m.split(Split::Test).into_iter().cloned().collect(),
        SplitArg::All => m.samples.clone(),
    }
}

fn cmd_train(a: TrainArgs, exec: Execution) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let root = root_of(&a.manifest);
    let (mut trainer, cfg) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let cfg = ck.config.clone();
            (Trainer::from_checkpoint(&ck, None)?, cfg)
        }
        None => {
            let cfg = a.cfg.load()?;
            (Trainer::new(&cfg)?, cfg)
        }
    };
    trainer = trainer.with_execution(exec);
    let train = prepare(
        &split_samples(&manifest, SplitArg::Train),
        &root,
        &trainer.model,
        cfg.data.canvas,
        &cfg.audio,
        exec,
    )?;
    if train.is_empty() {
        bail!("{} has no training samples", a.manifest.display());
    }
    let val = if a.val_every > 0 {
        prepare(&split_samples(&manifest, SplitArg::Test), &root, &trainer.model, cfg.data.canvas, &cfg.audio, exec)?
    } else {
        Vec::new()
    };
    let total = cfg.optim.total_steps(train.len());
    let remaining = total.saturating_sub(trainer.step_count());
    let log_every = cfg.optim.log_every.max(1);
    let (report, best) = trainer.fit(&train, remaining, (!val.is_empty()).then_some((&val[..], a.val_every)), |step, loss| {
        if step % log_every == 0 || step == total {
            eprintln!("step {step:>6}/{total}  loss {loss:.5}");
        }
    })?;
    let last = trainer.checkpoint()?;
    last.save(&a.out)?;
    eprintln!("trained {} steps in {:.1}s -> {}", report.steps, report.seconds, a.out.display());
    if let (Some(best), Some(bv)) = (best, &report.best_val) {
        let model = restore_model(&last)?;
        model.load_weights(&best)?;
        let mut path = a.out.clone().into_os_string();
        path.push(".best");
        model_checkpoint(&model, &cfg, bv.step, &last.classes, None)?.save(Path::new(&path))?;
        eprintln!("best validation M_J {:.4} at step {}", bv.m_j, bv.step);
    }
    write_report(a.report.as_deref(), &serde_json::to_value(&report)?)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, exec: Execution, zero_shot: bool) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = restore_model(&ck)?;
    let manifest = read_manifest(&a.manifest)?;
    let cfg = &ck.config;
    let data = prepare(
        &split_samples(&manifest, a.split),
        &root_of(&a.manifest),
        &model,
        cfg.data.canvas,
        &cfg.audio,
        exec,
    )?;
    if zero_shot {
        let r = run_zero_shot(&model, &ck.classes, &data, cfg, exec)?;
        print!("{}", r.to_table());
        write_report(a.report.as_deref(), &serde_json::to_value(&r)?)
    } else {
        if data.is_empty() {
            bail!("no samples to evaluate");
        }
        let r = evaluate_report(&model, &data, cfg, exec)?;
        print!("{}", r.to_table());
        write_report(a.report.as_deref(), &serde_json::to_value(&r)?)
    }
}

fn cmd_sweep(a: SweepArgs, exec: Execution) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = a.cfg.load()?;
    cfg.model = ck.config.model.clone();
    let model = restore_model(&ck)?;
    let manifest = read_manifest(&a.manifest)?;
    let root = root_of(&a.manifest);
    let train_samples = split_samples(&manifest, SplitArg::Train);
    let train = prepare(&train_samples, &root, &model, cfg.data.canvas, &cfg.audio, exec)?;
    let test = prepare(&split_samples(&manifest, SplitArg::Test), &root, &model, cfg.data.canvas, &cfg.audio, exec)?;
    let pick = |f: f64| {
        let chosen = stratified_subsample(&train_samples, f, cfg.seed);
        train_samples
            .iter()
            .enumerate()
            .filter(|(_, s)| chosen.iter().any(|c| c.id == s.id))
            .map(|(i, _)| i)
            .collect()
    };
    let table = run_finetune_sweep(&ck, &train, pick, &test, &a.fractions, &cfg, exec)?;
    print!("{}", table.to_table());
    write_report(a.report.as_deref(), &serde_json::to_value(&table)?)
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let m = read_manifest(&a.manifest)?;
    let (seen, unseen) = make_openset_split(&m, a.n_seen, a.seed)?;
    let root = root_of(&a.manifest);
    for (part, out) in [(&seen, &a.out_seen), (&unseen, &a.out_unseen)] {
        let mut part = part.clone();
        let dir = root_of(out);
        for s in &mut part.samples {
            s.image_uri = rebase(&s.image_uri, &root, &dir);
            s.audio_uri = rebase(&s.audio_uri, &root, &dir);
        }
        write_manifest(&part, out)?;
    }
    println!("seen:   {}", seen.classes().join(", "));
    println!("unseen: {}", unseen.classes().join(", "));
    Ok(())
}

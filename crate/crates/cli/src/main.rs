use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jepa_act_core::attention::{latent_attention, mass_by_class, patch_classes};
use jepa_act_core::data_synth::{generate_dataset, read_dataset, GenerateConfig, NuisanceConfig};
use jepa_act_core::eval::{evaluate_model, EvalConfig, EvalReport};
use jepa_act_core::plot;
use jepa_act_core::probe::{self, ProbeReport};
use jepa_act_core::trainer::{prepare_episode, Checkpoint, RunOptions, StepMetrics, TrainConfig, TrainData, Trainer};

#[derive(Parser)]
#[command(name = "jepa-act", version, about = "Latent-action world-model policy on a synthetic pick-and-place scene")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train (or resume) a model.
    Train(Train),
    /// Closed-loop evaluation of a checkpoint.
    Eval(Eval),
    /// Leakage, mask-soundness and frozen-encoder checks.
    ProbeLeakage(ProbeLeakage),
    /// Export latent-token attention over the first frame.
    InspectAttention(InspectAttention),
    /// Compare latents of paired episodes.
    ProbeActionRelevance(ProbeRelevance),
    /// Render SVG charts from metrics or reports.
    Plot(Plot),
}

#[derive(Args)]
struct NuisanceArgs {
    /// Start from no nuisance instead of the default mix.
    #[arg(long)]
    clean: bool,
    #[arg(long)]
    jitter: Option<u32>,
    #[arg(long)]
    flicker: Option<f32>,
    #[arg(long)]
    distractors: Option<u32>,
    #[arg(long)]
    drift: Option<f32>,
}

impl NuisanceArgs {
    fn resolve(&self) -> NuisanceConfig {
        let mut n = if self.clean { NuisanceConfig::none() } else { NuisanceConfig::default() };
        if let Some(v) = self.jitter {
            n.camera_jitter_px = v;
        }
        if let Some(v) = self.flicker {
            n.background_flicker_amp = v;
        }
        if let Some(v) = self.distractors {
            n.distractor_count = v;
        }
        if let Some(v) = self.drift {
            n.lighting_drift_amp = v;
        }
        n
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, env = "JEPA_ACT_SEED", default_value_t = 7)]
    seed: u64,
    /// Comma-separated task names.
    #[arg(long, default_value = "pick_place", value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 40)]
    ticks: usize,
    #[arg(long, default_value_t = 3)]
    action_dim: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Emit (base, same-action, different-action) triples.
    #[arg(long)]
    paired: bool,
    /// Drop the action labels (human-video stand-in).
    #[arg(long)]
    action_free: bool,
    #[command(flatten)]
    nuisance: NuisanceArgs,
}

#[derive(Args)]
struct Train {
    /// Action-labeled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Action-free dataset directory.
    #[arg(long)]
    free_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; overrides `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "compact", value_parser = ["compact", "desk"])]
    preset: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, env = "JEPA_ACT_SEED")]
    seed: Option<u64>,
    /// Train on action-labeled data only (ratio 0).
    #[arg(long)]
    no_human_videos: bool,
    #[arg(long)]
    ratio: Option<f32>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Latent replicas per step; required when 24 is not divisible by T.
    #[arg(long)]
    k: Option<usize>,
    /// Stop after this many completed steps (the schedule still targets
    /// the configured total).
    #[arg(long)]
    stop_at: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    rollouts: usize,
    #[arg(long, env = "JEPA_ACT_SEED", default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value = "pick_place", value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 40)]
    max_ticks: usize,
    #[arg(long)]
    replan_every: Option<usize>,
    #[arg(long)]
    no_breakdown: bool,
    /// Environment image size; must match the checkpoint.
    #[arg(long)]
    image_size: Option<usize>,
    /// Environment action dimension; must match the checkpoint.
    #[arg(long)]
    action_dim: Option<usize>,
    #[command(flatten)]
    nuisance: NuisanceArgs,
}

#[derive(Args)]
struct ProbeLeakage {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to draw the probe episode from; one is generated otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, env = "JEPA_ACT_SEED", default_value_t = 5)]
    seed: u64,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectAttention {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeRelevance {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Paired dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    #[arg(long, env = "JEPA_ACT_SEED", default_value_t = 13)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    /// `metrics.csv` from a training run.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// `report.json` from an evaluation, for the nuisance chart.
    #[arg(long)]
    report: Option<PathBuf>,
    /// `label=report.json` pairs for a side-by-side chart.
    /// Labels may contain `=` (e.g. `T=4=runs/t4/report.json`)
    #[arg(long = "compare", value_name = "LABEL=PATH")]
    compare: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = GenerateConfig {
        n_episodes: a.episodes,
        tasks: a.tasks,
        nuisance: a.nuisance.resolve(),
        seed: a.seed,
        image_size: a.image_size,
        ticks: a.ticks,
        action_dim: a.action_dim,
        views: a.views,
        paired: a.paired,
        action_free: a.action_free,
        ..Default::default()
    };
    generate_dataset(&cfg, &a.out)?;
    let m = jepa_act_core::data_synth::dataset::read_manifest(&a.out)?;
    println!("wrote {} records ({} successful) to {}", m.n_records, m.n_successful, a.out.display());
    Ok(())
}

fn train_config(a: &Train) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None if a.preset == "desk" => TrainConfig::desk(),
        None => TrainConfig::compact(),
    };
    if let Some(s) = a.steps {
        cfg.total_steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.ratio {
        cfg.ratio = r;
    }
    if a.no_human_videos {
        cfg.ratio = 0.0;
    }
    if let Some(t) = a.horizon {
        cfg.model.horizon = t;
    }
    if a.k.is_some() {
        cfg.model.k_override = a.k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: Train) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let tr = Checkpoint::load(p)?.into_trainer()?;
            let explicit = a.config.is_some()
                || a.steps.is_some()
                || a.ratio.is_some()
                || a.no_human_videos
                || a.horizon.is_some()
                || a.k.is_some();
            if explicit && train_config(&a)? != tr.config {
                bail!(jepa_act_core::Error::Config("flags disagree with the checkpoint's training config".into()));
            }
            tr
        }
        None => Trainer::new(train_config(&a)?)?,
    };
    let labeled = read_dataset(&a.data)?;
    let free = a.free_data.as_deref().map(read_dataset).transpose()?;
    let free = if trainer.config.ratio > 0.0 { free } else { None };
    let data = TrainData::prepare(&trainer.model, &labeled, free.as_ref())?;
    println!(
        "training config {} from step {} to {} ({} labeled, {} action-free windows)",
        trainer.config.hash(),
        trainer.step,
        a.stop_at.unwrap_or(trainer.config.total_steps).min(trainer.config.total_steps),
        data.labeled_windows.len(),
        data.free_windows.len()
    );
    trainer.run(
        &data,
        &RunOptions {
            out_dir: Some(a.out.clone()),
            stop_at: a.stop_at,
        },
    )?;
    if let Some(m) = trainer.history.last() {
        println!(
            "step {} loss_total {:.5} loss_wm {:.5} loss_fm {:.5}",
            m.step, m.loss_total, m.loss_wm, m.loss_fm
        );
    }
    println!("checkpoint {}", a.out.join("checkpoint.bin").display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let normalizer = ck.header.normalizer.clone();
    let model = ck.into_model()?;
    let mc = &model.config;
    if a.image_size.is_some_and(|s| s != mc.image_size) || a.action_dim.is_some_and(|d| d != mc.action_dim) {
        bail!(jepa_act_core::Error::Config(format!(
            "environment does not match checkpoint (image {}, action dim {})",
            mc.image_size, mc.action_dim
        )));
    }
    let cfg = EvalConfig {
        n_rollouts: a.rollouts,
        seed: a.seed,
        tasks: a.tasks,
        nuisance: a.nuisance.resolve(),
        max_ticks: a.max_ticks,
        replan_every: a.replan_every,
        breakdown: !a.no_breakdown,
    };
    let report = evaluate_model(&model, &normalizer, &cfg)?;
    write(&a.out.join("report.json"), &report.to_json()?)?;
    write(&a.out.join("rollouts.csv"), &report.to_csv())?;
    println!(
        "success {:.3} random {:.3} expert {:.3} over {} rollouts",
        report.success_rate, report.random_success_rate, report.expert_success_rate, report.n_rollouts
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, jepa_act_core::Model)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.clone().into_model()?;
    Ok((ck, model))
}

fn probe_leakage(a: ProbeLeakage) -> Result<bool> {
    let (ck, model) = load_model(&a.checkpoint)?;
    let mc = &model.config;
    let episode = match &a.data {
        Some(dir) => {
            let ds = read_dataset(dir)?;
            let n = ds.episodes.len();
            ds.episodes
                .into_iter()
                .nth(a.episode)
                .with_context(|| format!("episode {} out of range ({n} episodes)", a.episode))?
        }
        None => {
            let cfg = GenerateConfig {
                n_episodes: 1,
                seed: a.seed,
                image_size: mc.image_size,
                action_dim: mc.action_dim,
                ..Default::default()
            };
            jepa_act_core::data_synth::generate_episodes(&cfg)?.remove(0)
        }
    };
    let prepared = prepare_episode(&model, &episode, &ck.header.normalizer)?;
    let fresh = jepa_act_core::Model::new(mc.clone(), ck.header.config.seed)?.frozen_values();
    let last = prepared.num_frames().saturating_sub(mc.horizon + 1);
    let report = ProbeReport::new(vec![
        probe::check_leakage(&model, &prepared, 0, a.seed)?,
        probe::check_leakage(&model, &prepared, last / 2, a.seed)?,
        probe::check_mask_soundness(&model, a.seed, None)?,
        probe::check_frozen(&model, &fresh, prepared.frame(0, 0), a.seed)?,
    ]);
    print!("{}", report.lines());
    if let Some(p) = &a.out {
        write(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(report.passed)
}

fn inspect_attention(a: InspectAttention) -> Result<()> {
    let (_, model) = load_model(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let n = ds.episodes.len();
    let ep = ds
        .episodes
        .get(a.episode)
        .with_context(|| format!("episode {} out of range ({n} episodes)", a.episode))?
        .clone()
        .normalize_views()?;
    let seq = model.sequence(&[ep.frame(0, 0), ep.frame(1, 0)], &ep.meta.instruction)?;
    let export = latent_attention(&model, &seq, a.layer)?;
    write(&a.out.join("attention.csv"), &export.to_csv())?;
    write(&a.out.join("attention.svg"), &export.to_svg())?;
    let classes = patch_classes(
        &ep.meta.initial_state,
        &ep.meta.nuisance,
        ep.meta.nuisance_seed,
        model.config.image_size,
        model.config.backbone_patch,
    );
    let mass = mass_by_class(&export, &classes);
    write(&a.out.join("mass.json"), &(serde_json::to_string_pretty(&mass)? + "\n"))?;
    match mass {
        Some(m) => println!(
            "mean attention per patch: moving {:.5} ({} patches), background {:.5} ({} patches)",
            m.moving, m.moving_patches, m.background, m.background_patches
        ),
        None => println!("episode lacks moving or background patches; mass summary skipped"),
    }
    Ok(())
}

fn probe_relevance(a: ProbeRelevance) -> Result<()> {
    let (_, model) = load_model(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let r = probe::action_relevance(&model, &ds, a.bootstrap, a.seed)?;
    println!(
        "groups {} d_same {:.6} d_diff {:.6} difference {:.6} ci{:.0} [{:.6}, {:.6}]",
        r.groups,
        r.d_same,
        r.d_diff,
        r.difference,
        r.ci_level * 100.0,
        r.ci_low,
        r.ci_high
    );
    if let Some(p) = &a.out {
        write(p, &(serde_json::to_string_pretty(&r)? + "\n"))?;
    }
    Ok(())
}

fn read_report(p: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// First `=` whose right-hand side names an existing file, else the first `=`.
fn split_compare(spec: &str) -> Option<(&str, &str)> {
    let cuts: Vec<usize> = spec.match_indices('=').map(|(i, _)| i).collect();
    let at = cuts.iter().copied().find(|&i| Path::new(&spec[i + 1..]).is_file()).or(cuts.first().copied())?;
    Some((&spec[..at], &spec[at + 1..]))
}

fn plot_cmd(a: Plot) -> Result<()> {
    if a.metrics.is_none() && a.report.is_none() && a.compare.is_empty() {
        bail!(jepa_act_core::Error::Config("nothing to plot; pass --metrics, --report or --compare".into()));
    }
    if let Some(p) = &a.metrics {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let metrics = StepMetrics::parse_csv(&text)?;
        write(&a.out.join("loss.svg"), &plot::loss_curve(&metrics)?)?;
    }
    if let Some(p) = &a.report {
        write(&a.out.join("nuisance.svg"), &plot::nuisance_chart(&read_report(p)?)?)?;
    }
    if !a.compare.is_empty() {
        let mut runs = Vec::new();
        for spec in &a.compare {
            let (label, path) = split_compare(spec)
                .with_context(|| format!("--compare expects LABEL=PATH, got {spec}"))?;
            runs.push((label.to_string(), read_report(Path::new(path))?));
        }
        let refs: Vec<(String, &EvalReport)> = runs.iter().map(|(l, r)| (l.clone(), r)).collect();
        write(&a.out.join("compare.svg"), &plot::comparison_chart("success rate", &refs)?)?;
    }
    println!("wrote charts to {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::ProbeLeakage(a) => return probe_leakage(a),
        Command::InspectAttention(a) => inspect_attention(a)?,
        Command::ProbeActionRelevance(a) => probe_relevance(a)?,
        Command::Plot(a) => plot_cmd(a)?,
    }
    Ok(true)
}

/// `error kind=<kind>: <message>` on one line.
fn report_error(e: &anyhow::Error) -> u8 {
    let core = e.chain().find_map(|c| c.downcast_ref::<jepa_act_core::Error>());
    let kind = core.map(|c| c.kind()).unwrap_or("runtime");
    let msg = format!("{e:#}").replace('\n', " ");
    eprintln!("error kind={kind}: {msg}");
    if kind == "config" {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => ExitCode::from(report_error(&e)),
    }
}

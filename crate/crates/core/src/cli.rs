//! Command-line front end.
//!
//! Every subcommand starts from a JSON experiment config (`--config`, or
//! the config stored in `--ckpt`, or the defaults), applies `--set key=value`
//! overrides, and writes its outputs under `--out`. JSON reports carry the
//! config digest and every seed used, so rerunning with the same inputs
//! reproduces them byte for byte.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::backbone::{ModelInput, ParamBreakdown, TextContext};
use crate::checkpoint;
use crate::config::{ConverterSetting, ExperimentConfig, InitKind, TaskPrompt};
use crate::converters::{converter_param_count, task_patch_param_count, MergeModel};
use crate::io;
use crate::metrics::{block_similarity_matrix, evaluate_task, similarity_by_distance, EvalReport, TaskScores};
use crate::numerics::{Rng, Tensor};
use crate::scenes::{make_split, Role, SceneParams};
use crate::schedule::{forward_diffuse, Timestep};
use crate::tasks::{generate_images, run_inference, SamplerConfig, TaskMode};
use crate::trainer::{self, TrainOutcome};

#[derive(Parser, Debug)]
#[command(
    name = "plugdit",
    version,
    about = "Pluggable converters on a frozen toy text-to-image DiT"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment config. Defaults to the checkpoint's own config, or
    /// the built-in defaults when there is no checkpoint.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override such as `train.iterations=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    /// Load checkpoints whose model config differs from the requested one.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    /// Train converters and the task patch on a frozen backbone.
    Converters,
    /// Train every weight (baseline).
    Full,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write procedural scenes as PNG and MAPF files with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// pretrain, task_train or task_test.
        #[arg(long, default_value = "task_test")]
        role: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Pretrain the text-to-image backbone.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Freeze a backbone and attach converters plus the task patch.
    Attach {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Converter composition A-E.
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long, action = clap::ArgAction::Set)]
        gre: Option<bool>,
        #[arg(long)]
        stack_n: Option<usize>,
        /// pretrained or random.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        init_seed: Option<u64>,
    },
    /// Train a depth or normal model.
    TrainTask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::Converters)]
        strategy: Strategy,
        /// depth or normal.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict a depth or normal map for one RGB image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        /// RGB PNG of the configured image size.
        #[arg(long)]
        input: PathBuf,
        /// Output path prefix; `.mapf`, `.png` and `.json` are appended.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample images from the text-to-image mode.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated prompt token ids; empty for the null prompt.
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a task model on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Cosine similarity between the outputs of every pair of blocks.
    Similarity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Diffusion step of the probed inputs; defaults to the middle.
        #[arg(long)]
        timestep: Option<usize>,
    },
    /// Parameter breakdown of a checkpoint.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train and score a grid of converter variants from one backbone.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Axis such as `settings=A,B,C`; axes: settings, groups, gre,
        /// stack_n, init, prompt (repeatable, crossed).
        #[arg(long = "grid", value_name = "AXIS=V1,V2")]
        grid: Vec<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        eval_count: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Attach { common, .. }
            | Command::TrainTask { common, .. }
            | Command::Infer { common, .. }
            | Command::Generate { common, .. }
            | Command::Eval { common, .. }
            | Command::Similarity { common, .. }
            | Command::Params { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Attach { .. } => "attach",
            Command::TrainTask { .. } => "train-task",
            Command::Infer { .. } => "infer",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::Similarity { .. } => "similarity",
            Command::Params { .. } => "params",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Sets `key` (dotted path) in the config to `raw`, read as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(cfg: &ExperimentConfig, spec: &str) -> anyhow::Result<ExperimentConfig> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not KEY=VALUE"))?;
    let mut v = serde_json::to_value(cfg)?;
    let mut slot = &mut v;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let out: ExperimentConfig = serde_json::from_value(v).with_context(|| format!("bad value in override {spec:?}"))?;
    out.validate()?;
    Ok(out)
}

fn resolve_config(common: &Common, stored: Option<&ExperimentConfig>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&common.config, stored) {
        (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(c)) => c.clone(),
        (None, None) => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        cfg = apply_override(&cfg, o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint and reconciles its config with the requested one.
fn open_model(path: &Path, common: &Common) -> anyhow::Result<MergeModel> {
    let loaded = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = resolve_config(common, Some(&loaded.model.config))?;
    checkpoint::check_digest(&loaded, &cfg, common.force).map_err(|e| anyhow!("{e}; pass --force to load anyway"))?;
    let mut model = loaded.model;
    let backbone = model.config.backbone.clone();
    model.config = cfg;
    // the stored weights fix the architecture
    model.config.backbone = backbone;
    Ok(model)
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    config_digest: String,
    model_digest: String,
    seeds: BTreeMap<&'a str, u64>,
    config: &'a ExperimentConfig,
    result: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn report<T: Serialize>(
    path: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    seeds: &[(&str, u64)],
    result: T,
) -> anyhow::Result<()> {
    let r = Report {
        command,
        config_digest: cfg.digest(),
        model_digest: cfg.model_digest(),
        seeds: seeds.iter().copied().collect(),
        config: cfg,
        result,
    };
    write_json(path, &r)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_mode(raw: Option<&str>, cfg: &ExperimentConfig) -> anyhow::Result<TaskMode> {
    let mode = match raw {
        Some(m) => m.parse()?,
        None => cfg.task.mode,
    };
    if mode == TaskMode::Generate {
        bail!("a task mode (depth or normal) is required");
    }
    Ok(mode)
}

fn train_log(out: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    initial_loss: f64,
    final_loss: f64,
    checkpoint: PathBuf,
}

impl TrainSummary {
    fn new(run: &TrainOutcome, checkpoint: PathBuf) -> Self {
        Self {
            iterations: run.losses.len(),
            initial_loss: run.initial_loss(trainer::FINAL_LOSS_WINDOW),
            final_loss: run.final_loss(),
            checkpoint,
        }
    }
}

#[derive(Serialize)]
struct ParamsReport {
    full: ParamBreakdown,
    trainable: ParamBreakdown,
    per_converter: Option<usize>,
    task_patch: usize,
    setting: Option<char>,
    n_groups: Option<usize>,
    stack_n: Option<usize>,
    gre: Option<bool>,
}

fn params_report(m: &MergeModel) -> ParamsReport {
    let bc = m.backbone_config();
    let stack = m.converters.as_ref();
    ParamsReport {
        full: m.param_counts(false),
        trainable: m.param_counts(true),
        per_converter: stack.map(|s| converter_param_count(s.setting, bc)),
        task_patch: task_patch_param_count(bc),
        setting: stack.map(|s| s.setting.as_char()),
        n_groups: stack.map(|s| s.plan.n_groups()),
        stack_n: stack.map(|s| s.plan.stack_n()),
        gre: stack.map(|s| s.plan.gre()),
    }
}

fn print_params(p: &ParamsReport) {
    println!("{:<12} {:>12} {:>12}", "", "all", "trainable");
    for (name, a, t) in [
        ("backbone", p.full.backbone, p.trainable.backbone),
        ("converters", p.full.converters, p.trainable.converters),
        ("task_patch", p.full.task_patch, p.trainable.task_patch),
        ("total", p.full.total, p.trainable.total),
    ] {
        println!("{name:<12} {a:>12} {t:>12}");
    }
    if let (Some(s), Some(g), Some(n), Some(c)) = (p.setting, p.n_groups, p.stack_n, p.per_converter) {
        println!("setting {s}: {g} groups x {n} stacked x {c} per converter");
    }
}

fn gen_data(common: &Common, role: &str, count: usize) -> anyhow::Result<()> {
    let cfg = resolve_config(common, None)?;
    let role: Role = role.parse()?;
    let b = &cfg.backbone;
    let params = SceneParams::new(b.image_size);
    let role_dir = serde_json::to_value(role)?.as_str().unwrap_or("scenes").to_string();
    let dir = common.out.join(&role_dir);
    #[derive(Serialize)]
    struct Entry {
        seed: u64,
        role: Role,
        prompt: Vec<usize>,
        rgb: PathBuf,
        depth: PathBuf,
        normal: PathBuf,
        depth_png: PathBuf,
        normal_png: PathBuf,
    }
    let mut entries = Vec::with_capacity(count);
    for scene in make_split(role, count, &params, b.text_len)? {
        let scene = scene?;
        let rel = PathBuf::from(&role_dir).join(format!("{:06}", scene.seed));
        let sdir = common.out.join(&rel);
        fs::create_dir_all(&sdir)?;
        io::write_rgb_png(&sdir.join("rgb.png"), &scene.rgb)?;
        io::write_mapf(&sdir.join("depth.mapf"), &scene.depth)?;
        io::write_map_png(&sdir.join("depth.png"), &scene.depth)?;
        io::write_mapf(&sdir.join("normal.mapf"), &scene.normal)?;
        io::write_normal_png(&sdir.join("normal.png"), &scene.normal)?;
        entries.push(Entry {
            seed: scene.seed,
            role,
            prompt: scene.prompt.clone(),
            rgb: rel.join("rgb.png"),
            depth: rel.join("depth.mapf"),
            normal: rel.join("normal.mapf"),
            depth_png: rel.join("depth.png"),
            normal_png: rel.join("normal.png"),
        });
    }
    log::info!("wrote {} scenes under {}", entries.len(), dir.display());
    let first = entries.first().map_or(0, |e| e.seed);
    report(
        &common.out.join("manifest.json"),
        "gen-data",
        &cfg,
        &[("first_seed", first)],
        entries,
    )
}

fn pretrain(common: &Common, iterations: Option<usize>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = resolve_config(common, None)?;
    if let Some(n) = iterations {
        cfg.pretrain.iterations = n;
    }
    if let Some(s) = seed {
        cfg.pretrain.seed = s;
    }
    cfg.validate()?;
    let mut model = MergeModel::new_backbone(cfg.clone(), cfg.pretrain.seed)?;
    let mut log = train_log(&common.out, "pretrain_log.jsonl")?;
    let run = trainer::pretrain_t2i(&mut model, &cfg.pretrain, Some(&mut log))?;
    log.flush()?;
    let path = common.out.join("pretrained.mrge");
    checkpoint::save(&model, &path)?;
    println!(
        "loss {:.4} -> {:.4}",
        run.initial_loss(trainer::FINAL_LOSS_WINDOW),
        run.final_loss()
    );
    report(
        &common.out.join("pretrain.json"),
        "pretrain",
        &cfg,
        &[("pretrain", cfg.pretrain.seed)],
        TrainSummary::new(&run, "pretrained.mrge".into()),
    )
}

#[allow(clippy::too_many_arguments)]
fn attach(
    common: &Common,
    ckpt: &Path,
    setting: Option<&str>,
    groups: Option<usize>,
    gre: Option<bool>,
    stack_n: Option<usize>,
    init: Option<&str>,
    init_seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut model = open_model(ckpt, common)?;
    let c = &mut model.config.converters;
    if let Some(s) = setting {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(ch), None) => c.setting = ConverterSetting::from_char(ch.to_ascii_uppercase())?,
            _ => bail!("setting must be one letter A-E, got {s:?}"),
        }
    }
    if groups.is_some() {
        c.n_groups = groups;
    }
    if let Some(g) = gre {
        c.gre = g;
    }
    if let Some(n) = stack_n {
        c.stack_n = n;
    }
    if let Some(i) = init {
        c.init = serde_json::from_value(Value::String(i.to_string()))
            .map_err(|_| anyhow!("init must be pretrained or random"))?;
    }
    if let Some(s) = init_seed {
        c.init_seed = s;
    }
    model.config.validate()?;
    model.attach()?;
    fs::create_dir_all(&common.out)?;
    let path = common.out.join("merged.mrge");
    checkpoint::save(&model, &path)?;
    let p = params_report(&model);
    print_params(&p);
    report(
        &common.out.join("attach.json"),
        "attach",
        &model.config,
        &[("init", model.config.converters.init_seed)],
        p,
    )
}

fn train_task(
    common: &Common,
    ckpt: &Path,
    strategy: Strategy,
    mode: Option<&str>,
    iterations: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut model = open_model(ckpt, common)?;
    if let Some(n) = iterations {
        model.config.train.iterations = n;
    }
    if let Some(s) = seed {
        model.config.train.seed = s;
    }
    let mode = parse_mode(mode, &model.config)?;
    model.config.task.mode = mode;
    model.config.validate()?;
    let tc = model.config.train.clone();
    let mut log = train_log(&common.out, "train_log.jsonl")?;
    let run = match strategy {
        Strategy::Converters => {
            if model.converters.is_none() {
                model.attach()?;
            }
            trainer::train_converters(&mut model, mode, &tc, Some(&mut log))?
        }
        Strategy::Full => {
            if model.converters.is_some() {
                bail!("full fine-tuning starts from a bare backbone checkpoint");
            }
            model.attach_full_finetune()?;
            trainer::full_finetune(&mut model, mode, &tc, Some(&mut log))?
        }
    };
    log.flush()?;
    let name = format!("{mode}.mrge");
    checkpoint::save(&model, &common.out.join(&name))?;
    println!(
        "loss {:.4} -> {:.4}",
        run.initial_loss(trainer::FINAL_LOSS_WINDOW),
        run.final_loss()
    );
    report(
        &common.out.join("train-task.json"),
        "train-task",
        &model.config,
        &[("train", tc.seed), ("init", model.config.converters.init_seed)],
        TrainSummary::new(&run, name.into()),
    )
}

fn infer(
    common: &Common,
    ckpt: &Path,
    mode: Option<&str>,
    seed: u64,
    steps: Option<usize>,
    input: &Path,
    output: Option<&Path>,
) -> anyhow::Result<()> {
    let model = open_model(ckpt, common)?;
    let mode = parse_mode(mode, &model.config)?;
    let steps = steps.unwrap_or(model.config.schedule.sample_steps);
    let rgb = io::read_rgb_png(input).with_context(|| format!("reading {}", input.display()))?;
    let map = run_inference(&model, &rgb, mode, SamplerConfig { steps }, seed)?;
    let prefix = output.map_or_else(|| common.out.join("prediction"), Path::to_path_buf);
    if let Some(dir) = prefix.parent() {
        fs::create_dir_all(dir)?;
    }
    let with_ext = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
    io::write_mapf(&with_ext("mapf"), &map)?;
    match mode {
        TaskMode::Normal => io::write_normal_png(&with_ext("png"), &map)?,
        _ => io::write_map_png(&with_ext("png"), &map)?,
    }
    #[derive(Serialize)]
    struct Infer {
        mode: TaskMode,
        steps: usize,
        input_sha256: String,
        output_sha256: String,
    }
    let result = Infer {
        mode,
        steps,
        input_sha256: checkpoint::sha256_hex(&fs::read(input)?),
        output_sha256: checkpoint::sha256_hex(&io::mapf_bytes(&map)?),
    };
    report(&with_ext("json"), "infer", &model.config, &[("noise", seed)], result)
}

fn parse_prompt(raw: &str) -> anyhow::Result<Vec<usize>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| anyhow!("bad prompt token {s:?}: {e}")))
        .collect()
}

fn generate(
    common: &Common,
    ckpt: &Path,
    prompt: &str,
    seed: u64,
    count: usize,
    steps: Option<usize>,
) -> anyhow::Result<()> {
    let model = open_model(ckpt, common)?;
    let b = model.backbone_config();
    let tokens = parse_prompt(prompt)?;
    let text = TextContext::new(&tokens, b.text_len, b.text_vocab)?;
    let steps = steps.unwrap_or(model.config.schedule.sample_steps);
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed + i).collect();
    let images = generate_images(&model, &vec![text; count], SamplerConfig { steps }, &seeds)?;
    let dir = common.out.join("generate");
    fs::create_dir_all(&dir)?;
    #[derive(Serialize)]
    struct Image {
        seed: u64,
        path: PathBuf,
        sha256: String,
    }
    let mut out = Vec::new();
    for (img, &s) in images.iter().zip(&seeds) {
        let rel = PathBuf::from("generate").join(format!("seed_{s}.png"));
        io::write_rgb_png(&common.out.join(&rel), img)?;
        out.push(Image {
            seed: s,
            path: rel,
            sha256: checkpoint::sha256_hex(&img.to_le_bytes()),
        });
    }
    #[derive(Serialize)]
    struct Generated {
        prompt: Vec<usize>,
        steps: usize,
        images: Vec<Image>,
    }
    let result = Generated {
        prompt: tokens,
        steps,
        images: out,
    };
    report(
        &common.out.join("generate.json"),
        "generate",
        &model.config,
        &[("noise", seed)],
        result,
    )
}

fn eval(
    common: &Common,
    ckpt: &Path,
    mode: Option<&str>,
    count: Option<usize>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> anyhow::Result<()> {
    let mut model = open_model(ckpt, common)?;
    if let Some(c) = count {
        model.config.eval.count = c;
    }
    if let Some(s) = seed {
        model.config.eval.seed = s;
    }
    let mode = parse_mode(mode, &model.config)?;
    let steps = steps.unwrap_or(model.config.schedule.sample_steps);
    let r: EvalReport = evaluate_task(&model, mode, model.config.eval.count, model.config.eval.seed, steps)?;
    let agg: &TaskScores = &r.aggregate;
    println!("{}", serde_json::to_string(agg)?);
    report(
        &common.out.join("eval.json"),
        "eval",
        &model.config,
        &[("noise", model.config.eval.seed)],
        r,
    )
}

fn similarity(common: &Common, ckpt: &Path, count: usize, seed: u64, timestep: Option<usize>) -> anyhow::Result<()> {
    let model = open_model(ckpt, common)?;
    let b = model.backbone_config().clone();
    let sched = model.config.schedule.build()?;
    let t = timestep.unwrap_or(sched.timesteps() / 2);
    if t >= sched.timesteps() {
        bail!("timestep {t} outside [0, {})", sched.timesteps());
    }
    let params = SceneParams::new(b.image_size);
    let root = Rng::new(seed);
    let (mut zs, mut text) = (Vec::new(), Vec::new());
    for (i, scene) in make_split(Role::TaskTest, count, &params, b.text_len)?.enumerate() {
        let scene = scene?;
        let eps = root.split(i as u64).normal_tensor(scene.rgb.shape());
        zs.push(forward_diffuse(&sched, &scene.rgb, t, &eps)?);
        text.push(TextContext::new(&scene.prompt, b.text_len, b.text_vocab)?);
    }
    let input = ModelInput {
        z: Tensor::stack(&zs)?,
        times: vec![Timestep::Discrete(t); count],
        text,
    };
    let m = block_similarity_matrix(&model, &input)?;
    fs::create_dir_all(&common.out)?;
    let n = m.shape()[0];
    let mut csv = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:.6}", m.data()[i * n + j])).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(common.out.join("similarity.csv"), csv)?;
    io::write_heatmap_png(&common.out.join("similarity.png"), &m, -1.0, 1.0, 16)?;
    let (near, far) = similarity_by_distance(&m);
    println!("adjacent blocks {near:.4}, distant blocks {far:.4}");
    #[derive(Serialize)]
    struct Sim {
        timestep: usize,
        count: usize,
        adjacent_mean: f64,
        distant_mean: f64,
        matrix: Vec<Vec<f64>>,
    }
    let result = Sim {
        timestep: t,
        count,
        adjacent_mean: near,
        distant_mean: far,
        matrix: (0..n).map(|i| m.data()[i * n..(i + 1) * n].to_vec()).collect(),
    };
    report(
        &common.out.join("similarity.json"),
        "similarity",
        &model.config,
        &[("noise", seed)],
        result,
    )
}

fn params(common: &Common, ckpt: &Path) -> anyhow::Result<()> {
    let model = open_model(ckpt, common)?;
    let p = params_report(&model);
    print_params(&p);
    report(&common.out.join("params.json"), "params", &model.config, &[], p)
}

/// One grid axis and its values.
type Axis = (String, Vec<String>);

fn parse_grid(specs: &[String]) -> anyhow::Result<Vec<Axis>> {
    const AXES: [&str; 6] = ["settings", "groups", "gre", "stack_n", "init", "prompt"];
    specs
        .iter()
        .map(|s| {
            let (axis, values) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("grid {s:?} is not AXIS=V1,V2"))?;
            if !AXES.contains(&axis) {
                bail!("unknown grid axis {axis:?}; expected one of {AXES:?}");
            }
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                bail!("grid axis {axis} has no values");
            }
            Ok((axis.to_string(), values))
        })
        .collect()
}

fn apply_cell(cfg: &mut ExperimentConfig, axis: &str, value: &str) -> anyhow::Result<()> {
    let c = &mut cfg.converters;
    match axis {
        "settings" => {
            let ch = value.chars().next().ok_or_else(|| anyhow!("empty setting"))?;
            c.setting = ConverterSetting::from_char(ch.to_ascii_uppercase())?;
        }
        "groups" => c.n_groups = Some(value.parse()?),
        "gre" => c.gre = value.parse()?,
        "stack_n" => c.stack_n = value.parse()?,
        "init" => {
            c.init = match value {
                "pretrained" => InitKind::Pretrained,
                "random" => InitKind::Random,
                _ => bail!("init must be pretrained or random"),
            }
        }
        "prompt" => {
            cfg.task.prompt = match value {
                "empty" => TaskPrompt::Empty,
                "depth_map" => TaskPrompt::DepthMap,
                _ => bail!("prompt must be empty or depth_map"),
            }
        }
        _ => unreachable!("axes are validated"),
    }
    Ok(())
}

fn ablate(
    common: &Common,
    ckpt: &Path,
    grid: &[String],
    iterations: Option<usize>,
    eval_count: Option<usize>,
    mode: Option<&str>,
) -> anyhow::Result<()> {
    let base = open_model(ckpt, common)?;
    if base.converters.is_some() || base.has_task_patch() {
        bail!("ablation starts from a bare pretrained backbone");
    }
    let axes = parse_grid(grid)?;
    let mode = parse_mode(mode, &base.config)?;
    let iterations = iterations.unwrap_or(base.config.train.iterations);
    let eval_count = eval_count.unwrap_or(base.config.eval.count);

    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (axis, values) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }

    #[derive(Serialize)]
    struct Cell {
        values: BTreeMap<String, String>,
        trainable_params: usize,
        converter_params: usize,
        final_loss: f64,
        scores: TaskScores,
    }
    let mut results = Vec::with_capacity(cells.len());
    for (k, cell) in cells.iter().enumerate() {
        let mut model = base.clone();
        for (axis, value) in cell {
            apply_cell(&mut model.config, axis, value)?;
        }
        model.config.train.iterations = iterations;
        model.config.task.mode = mode;
        model.config.validate()?;
        model.attach()?;
        log::info!("ablation cell {}/{}: {cell:?}", k + 1, cells.len());
        let mut log = train_log(&common.out, &format!("cell_{k}.jsonl"))?;
        let tc = model.config.train.clone();
        let run = trainer::train_converters(&mut model, mode, &tc, Some(&mut log))?;
        let steps = model.config.schedule.sample_steps;
        let r = evaluate_task(&model, mode, eval_count, model.config.eval.seed, steps)?;
        let counts = model.param_counts(true);
        println!(
            "{cell:?}: final loss {:.4}, {}",
            run.final_loss(),
            serde_json::to_string(&r.aggregate)?
        );
        results.push(Cell {
            values: cell.iter().cloned().collect(),
            trainable_params: counts.total,
            converter_params: counts.converters,
            final_loss: run.final_loss(),
            scores: r.aggregate,
        });
    }
    report(
        &common.out.join("ablation.json"),
        "ablate",
        &base.config,
        &[("train", base.config.train.seed), ("eval", base.config.eval.seed)],
        results,
    )
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cmd = &cli.command;
    let common = cmd.common();
    log::debug!("running {}", cmd.name());
    match cmd {
        Command::GenData { role, count, .. } => gen_data(common, role, *count),
        Command::Pretrain { iterations, seed, .. } => pretrain(common, *iterations, *seed),
        Command::Attach {
            ckpt,
            setting,
            groups,
            gre,
            stack_n,
            init,
            init_seed,
            ..
        } => attach(
            common,
            ckpt,
            setting.as_deref(),
            *groups,
            *gre,
            *stack_n,
            init.as_deref(),
            *init_seed,
        ),
        Command::TrainTask {
            ckpt,
            strategy,
            mode,
            iterations,
            seed,
            ..
        } => train_task(common, ckpt, *strategy, mode.as_deref(), *iterations, *seed),
        Command::Infer {
            ckpt,
            mode,
            seed,
            steps,
            input,
            output,
            ..
        } => infer(common, ckpt, mode.as_deref(), *seed, *steps, input, output.as_deref()),
        Command::Generate {
            ckpt,
            prompt,
            seed,
            count,
            steps,
            ..
        } => generate(common, ckpt, prompt, *seed, *count, *steps),
        Command::Eval {
            ckpt,
            mode,
            count,
            seed,
            steps,
            ..
        } => eval(common, ckpt, mode.as_deref(), *count, *seed, *steps),
        Command::Similarity {
            ckpt,
            count,
            seed,
            timestep,
            ..
        } => similarity(common, ckpt, *count, *seed, *timestep),
        Command::Params { ckpt, .. } => params(common, ckpt),
        Command::Ablate {
            ckpt,
            grid,
            iterations,
            eval_count,
            mode,
            ..
        } => ablate(common, ckpt, grid, *iterations, *eval_count, mode.as_deref()),
    }
}

/// Binary entry point: parses `std::env::args`, runs, and maps failures to
/// a nonzero exit code with the error chain on stderr.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

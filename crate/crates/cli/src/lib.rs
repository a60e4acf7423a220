//! Command-line harness: training runs, ablation grids, evaluation and
//! attention probes over the synthetic concept world.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use villa_core::adversary::Modality;
use villa_core::checkpoint::{self, Fnv1a};
use villa_core::metrics::write_metrics;
use villa_core::model::{ModelConfig, ModelParams, Sample, SampleLabels, Task};
use villa_core::objectives::KlTargetGrad;
use villa_core::optim::OptimizerConfig;
use villa_core::probe::{concept_links, probe_report};
use villa_core::rng::{derive, stream};
use villa_core::synth::{gen_downstream_dataset, gen_pair};
use villa_core::train::{batches_of, evaluate, run_two_stage, DataConfig, Mode, RunPlan, RunResult, StagePlan, StageSummary, TrainConfig};
use villa_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "villa", version, about = "Free multimodal adversarial training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run (pre-training, finetuning or both).
    Train(RunArgs),
    /// Run an ablation grid (`--grid`) and print one summary row per cell.
    Ablate(RunArgs),
    /// Evaluate a finetuned checkpoint on the downstream validation set.
    Eval(RunArgs),
    /// Report attention probes between regions and the words naming them.
    Probe {
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 32)]
        probe_samples: usize,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Modality,
    Mode,
    Stage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Pretrain,
    Downstream,
}

/// Flags shared by every subcommand. Options left unset fall back to the
/// config file, then to built-in defaults.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// plain-text `key=value` file; keys are long flag names
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// run an ablation grid instead of a single run
    #[arg(long, visible_alias = "grid", value_enum)]
    ablate: Option<Grid>,
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    /// mode for the pre-training stage only
    #[arg(long)]
    pretrain_mode: Option<String>,
    /// mode for the finetuning stage only
    #[arg(long)]
    finetune_mode: Option<String>,
    #[arg(long)]
    adv_steps: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    adv_lr: Option<f64>,
    /// weight of the KL consistency term
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    modality: Option<String>,
    #[arg(long)]
    kl_target_grad: Option<String>,
    /// perturb both modalities in the same forward pass
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    simultaneous: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    /// finetuning epochs
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    load: Option<PathBuf>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    /// record wall-clock milliseconds in the metrics file
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    timing: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    quiet: Option<bool>,
}

const ADVERSARIAL_FLAGS: [&str; 6] = ["adv-steps", "epsilon", "adv-lr", "alpha", "modality", "kl-target-grad"];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_flag<T: std::str::FromStr>(flag: &str, v: &str) -> Result<T, Error> {
    v.parse()
        .map_err(|_| config_err(format!("--{flag}: invalid value `{v}`")))
}

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("--config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(config_err(format!("{}:{}: expected key=value", path.display(), i + 1)));
        };
        map.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(map)
}

macro_rules! fill {
    ($args:ident, $map:ident, $( $field:ident => $key:literal ),+ $(,)?) => {
        $(
            if let Some(v) = $map.remove($key) {
                if $args.$field.is_none() {
                    $args.$field = Some(parse_flag($key, &v)?);
                }
            }
        )+
    };
}

impl RunArgs {
    /// Fills unset options from the config file; flags take precedence.
    fn merge_file(mut self) -> Result<Self, Error> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let mut map = read_config_file(&path)?;
        if let Some(v) = map.remove("ablate").or_else(|| map.remove("grid")) {
            if self.ablate.is_none() {
                self.ablate = Some(
                    Grid::from_str(&v, true).map_err(|_| config_err(format!("--ablate: invalid value `{v}`")))?,
                );
            }
        }
        if let Some(v) = map.remove("task") {
            if self.task.is_none() {
                self.task = Some(
                    TaskArg::from_str(&v, true).map_err(|_| config_err(format!("--task: invalid value `{v}`")))?,
                );
            }
        }
        fill!(self, map,
            stage => "stage", mode => "mode", pretrain_mode => "pretrain-mode",
            finetune_mode => "finetune-mode", adv_steps => "adv-steps", epsilon => "epsilon",
            adv_lr => "adv-lr", alpha => "alpha", modality => "modality",
            kl_target_grad => "kl-target-grad", simultaneous => "simultaneous", lr => "lr",
            optimizer => "optimizer", epochs => "epochs", pretrain_epochs => "pretrain-epochs",
            pretrain_steps => "pretrain-steps", batch_size => "batch-size", seed => "seed",
            out => "out", load => "load", train_samples => "train-samples",
            val_samples => "val-samples", noise_sigma => "noise-sigma", layers => "layers",
            hidden => "hidden", heads => "heads", ffn => "ffn", timing => "timing", quiet => "quiet",
        );
        if let Some(k) = map.keys().next() {
            return Err(config_err(format!("{}: unknown key `{k}`", path.display())));
        }
        Ok(self)
    }

    fn given_adversarial_flags(&self) -> Vec<&'static str> {
        let given = [
            self.adv_steps.is_some(),
            self.epsilon.is_some(),
            self.adv_lr.is_some(),
            self.alpha.is_some(),
            self.modality.is_some(),
            self.kl_target_grad.is_some(),
        ];
        ADVERSARIAL_FLAGS
            .iter()
            .zip(given)
            .filter(|(_, g)| *g)
            .map(|(f, _)| *f)
            .collect()
    }

    fn stages(&self) -> Result<StagePlan, Error> {
        let stage = self.stage.as_deref().map(|s| parse_flag::<StagePlan>("stage", s)).transpose()?;
        match (self.task, stage) {
            (None, s) => Ok(s.unwrap_or(StagePlan::Both)),
            (Some(TaskArg::Pretrain), None | Some(StagePlan::Pretrain)) => Ok(StagePlan::Pretrain),
            (Some(TaskArg::Downstream), None) => Ok(StagePlan::Finetune),
            (Some(TaskArg::Downstream), Some(s)) if s != StagePlan::Pretrain => Ok(s),
            (Some(t), Some(s)) => Err(config_err(format!(
                "--task {} is inconsistent with --stage {}",
                if t == TaskArg::Pretrain { "pretrain" } else { "downstream" },
                s.as_str()
            ))),
        }
    }

    fn model(&self) -> Result<ModelConfig, Error> {
        let d = ModelConfig::default();
        let m = ModelConfig {
            num_layers: self.layers.unwrap_or(d.num_layers),
            hidden: self.hidden.unwrap_or(d.hidden),
            num_heads: self.heads.unwrap_or(d.num_heads),
            ffn_dim: self.ffn.unwrap_or(d.ffn_dim),
            ..d
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds and checks the run plan, rejecting flag combinations that
    /// have no effect in the selected modes.
    fn plan(&self) -> Result<RunPlan, Error> {
        let stages = self.stages()?;
        let base: Option<Mode> = self.mode.as_deref().map(|m| parse_flag("mode", m)).transpose()?;
        let pre_mode: Option<Mode> = self.pretrain_mode.as_deref().map(|m| parse_flag("pretrain-mode", m)).transpose()?;
        let fine_mode: Option<Mode> = self.finetune_mode.as_deref().map(|m| parse_flag("finetune-mode", m)).transpose()?;
        let default_mode = base.unwrap_or(Mode::Villa);
        let pre = pre_mode.unwrap_or(default_mode);
        let fine = fine_mode.unwrap_or(default_mode);
        let active: Vec<Mode> = [(stages.pretrains(), pre), (stages.finetunes(), fine)]
            .into_iter()
            .filter(|(on, _)| *on)
            .map(|(_, m)| m)
            .collect();
        if active.iter().all(|m| *m == Mode::Standard) {
            if let Some(flag) = self.given_adversarial_flags().first() {
                return Err(config_err(format!("--{flag} has no effect with --mode standard")));
            }
            if self.simultaneous.is_some() {
                return Err(config_err("--simultaneous has no effect with --mode standard"));
            }
        }
        if self.alpha.is_some() && !active.contains(&Mode::Villa) {
            return Err(config_err("--alpha requires --mode villa (freelb has no KL term)"));
        }
        if stages == StagePlan::Pretrain && (self.finetune_mode.is_some() || self.epochs.is_some()) {
            return Err(config_err("--finetune-mode/--epochs given but --stage pretrain skips finetuning"));
        }
        if stages == StagePlan::Finetune && (self.pretrain_mode.is_some() || self.pretrain_epochs.is_some()) {
            return Err(config_err("--pretrain-mode/--pretrain-epochs given but --stage finetune skips pre-training"));
        }

        let defaults = TrainConfig::default();
        let optimizer: OptimizerConfig = match self.optimizer.as_deref() {
            Some(o) => parse_flag("optimizer", o)?,
            None => OptimizerConfig::default(),
        };
        let optimizer = optimizer.with_lr(self.lr.unwrap_or(1e-3));
        let modality: Modality = match self.modality.as_deref() {
            Some(m) => parse_flag("modality", m)?,
            None => Modality::Both,
        };
        let kl_target_grad: KlTargetGrad = match self.kl_target_grad.as_deref() {
            Some(k) => parse_flag("kl-target-grad", k)?,
            None => KlTargetGrad::Stop,
        };
        let stage_config = |mode: Mode, epochs: usize| TrainConfig {
            mode,
            adv_steps: self.adv_steps.unwrap_or(defaults.adv_steps),
            epsilon: self.epsilon.unwrap_or(defaults.epsilon),
            adv_step_size: self.adv_lr.unwrap_or(defaults.adv_step_size),
            kl_weight: self.alpha.unwrap_or(defaults.kl_weight),
            modality_mode: modality,
            kl_target_grad,
            simultaneous: self.simultaneous.unwrap_or(false),
            optimizer,
            epochs,
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
        };
        let data = DataConfig {
            noise_sigma: self.noise_sigma.unwrap_or(DataConfig::default().noise_sigma),
            train_samples: self.train_samples.unwrap_or(DataConfig::default().train_samples),
            val_samples: self.val_samples.unwrap_or(DataConfig::default().val_samples),
            pretrain_steps_per_epoch: self.pretrain_steps.unwrap_or(DataConfig::default().pretrain_steps_per_epoch),
            ..DataConfig::default()
        };
        let plan = RunPlan {
            model: self.model()?,
            data,
            stages,
            pretrain: stage_config(pre, self.pretrain_epochs.unwrap_or(1)),
            finetune: stage_config(fine, self.epochs.unwrap_or(RunPlan::default().finetune.epochs)),
            seed: self.seed.unwrap_or(0),
            record_wall_time: self.timing.unwrap_or(false),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// 64-bit digest of everything in the plan except the seed.
pub fn plan_digest(plan: &RunPlan) -> u64 {
    let mut p = plan.clone();
    p.seed = 0;
    let text = serde_json::to_string(&p).expect("plans serialize");
    Fnv1a::hash(text.as_bytes())
}

pub fn run_dir(out: &Path, plan: &RunPlan) -> PathBuf {
    out.join(format!("{:016x}-s{}", plan_digest(plan), plan.seed))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    run_dir: String,
    stages: &'static str,
    seed: u64,
    summaries: &'a [StageSummary],
    finetune_initial_checksum: Option<u64>,
    pretrain_final_checksum: Option<u64>,
}

struct Ctx<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    quiet: bool,
}

impl Ctx<'_> {
    fn log(&mut self, msg: impl AsRef<str>) {
        if !self.quiet {
            let _ = writeln!(self.err, "{}", msg.as_ref());
        }
    }
}

fn load_init(args: &RunArgs, model: &ModelConfig) -> Result<Option<ModelParams>, Error> {
    args.load.as_deref().map(|p| checkpoint::load(p, model)).transpose()
}

fn execute(plan: &RunPlan, args: &RunArgs, ctx: &mut Ctx<'_>) -> Result<(PathBuf, RunResult), Error> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let dir = run_dir(&out, plan);
    fs::create_dir_all(&dir)?;
    let mut modes = Vec::new();
    if plan.stages.pretrains() {
        modes.push(format!("pretrain {}", plan.pretrain.mode.as_str()));
    }
    if plan.stages.finetunes() {
        modes.push(format!("finetune {}", plan.finetune.mode.as_str()));
    }
    ctx.log(format!("run {} ({})", dir.display(), modes.join(", ")));
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(plan).expect("plans serialize"))?;
    let init = load_init(args, &plan.model)?;
    let result = run_two_stage(plan, init, Some(&dir))?;
    write_metrics(&result.history, &dir.join("metrics.csv"))?;
    for s in &result.summaries {
        ctx.log(format!(
            "{:?}: {} steps, train acc {:.4}, val acc {:.4}",
            s.stage, s.steps, s.train_accuracy, s.val_accuracy
        ));
    }
    Ok((dir, result))
}

fn summary_json(dir: &Path, plan: &RunPlan, r: &RunResult) -> serde_json::Value {
    serde_json::to_value(RunSummary {
        run_dir: dir.display().to_string(),
        stages: plan.stages.as_str(),
        seed: plan.seed,
        summaries: &r.summaries,
        finetune_initial_checksum: r.finetune_initial_checksum,
        pretrain_final_checksum: r.pretrained.as_ref().map(ModelParams::encoder_checksum),
    })
    .expect("summaries serialize")
}

fn emit(ctx: &mut Ctx<'_>, dir: Option<&Path>, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string(value).expect("json values serialize");
    if let Some(dir) = dir {
        fs::write(dir.join("summary.json"), format!("{text}\n"))?;
    }
    writeln!(ctx.out, "{text}")?;
    Ok(())
}

fn cmd_train(args: RunArgs, ctx: &mut Ctx<'_>) -> Result<(), Error> {
    let plan = args.plan()?;
    let (dir, result) = execute(&plan, &args, ctx)?;
    emit(ctx, Some(&dir), &summary_json(&dir, &plan, &result))
}

fn cmd_ablate(grid: Grid, args: RunArgs, ctx: &mut Ctx<'_>) -> Result<(), Error> {
    let mut cells: Vec<(String, RunArgs)> = Vec::new();
    match grid {
        Grid::Modality => {
            if args.modality.is_some() {
                return Err(config_err("--modality is set by the modality grid"));
            }
            for m in ["txt", "img", "both"] {
                let mut a = args.clone();
                a.modality = Some(m.into());
                if a.mode.is_none() {
                    a.mode = Some("villa".into());
                }
                cells.push((m.into(), a));
            }
        }
        Grid::Mode => {
            if args.mode.is_some() {
                return Err(config_err("--mode is set by the mode grid"));
            }
            for m in ["standard", "freelb", "villa"] {
                let mut a = args.clone();
                a.mode = Some(m.into());
                if m == "standard" {
                    strip_adversarial(&mut a);
                } else if m == "freelb" {
                    a.alpha = None;
                }
                cells.push((m.into(), a));
            }
        }
        Grid::Stage => {
            if args.mode.is_some() || args.pretrain_mode.is_some() || args.finetune_mode.is_some() {
                return Err(config_err("stage modes are set by the stage grid"));
            }
            for pre in ["standard", "villa"] {
                for fine in ["standard", "villa"] {
                    let mut a = args.clone();
                    a.stage = Some("both".into());
                    a.task = None;
                    a.pretrain_mode = Some(pre.into());
                    a.finetune_mode = Some(fine.into());
                    if pre == "standard" && fine == "standard" {
                        strip_adversarial(&mut a);
                    }
                    cells.push((format!("pre-{pre}/fine-{fine}"), a));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (label, a) in cells {
        let plan = a.plan()?;
        ctx.log(format!("ablation cell {label}"));
        let (dir, result) = execute(&plan, &a, ctx)?;
        let mut row = summary_json(&dir, &plan, &result);
        row["cell"] = json!(label);
        rows.push(row);
    }
    let grid_name = match grid {
        Grid::Modality => "modality",
        Grid::Mode => "mode",
        Grid::Stage => "stage",
    };
    emit(ctx, None, &json!({ "grid": grid_name, "rows": rows }))
}

fn strip_adversarial(a: &mut RunArgs) {
    a.adv_steps = None;
    a.epsilon = None;
    a.adv_lr = None;
    a.alpha = None;
    a.modality = None;
    a.kl_target_grad = None;
    a.simultaneous = None;
}

fn cmd_eval(args: RunArgs, ctx: &mut Ctx<'_>) -> Result<(), Error> {
    let Some(path) = args.load.clone() else {
        return Err(config_err("eval needs --load"));
    };
    let model = args.model()?;
    let params = checkpoint::load(&path, &model)?;
    let plan = RunPlan {
        model: model.clone(),
        seed: args.seed.unwrap_or(0),
        data: DataConfig {
            noise_sigma: args.noise_sigma.unwrap_or(DataConfig::default().noise_sigma),
            ..DataConfig::default()
        },
        ..RunPlan::default()
    };
    let world = plan.world()?;
    let n = args.val_samples.unwrap_or(plan.data.val_samples);
    let val = gen_downstream_dataset(&world, n, plan.seed, stream::VAL_DATA);
    let m = evaluate(&params, &batches_of(&val, 128, model.region_feat_dim)?, Task::Answer)?;
    ctx.log(format!("accuracy {:.4} over {} samples", m.accuracy, m.count));
    emit(
        ctx,
        None,
        &json!({ "checkpoint": path.display().to_string(), "accuracy": m.accuracy, "mean_loss": m.mean_loss, "count": m.count }),
    )
}

fn cmd_probe(layer: usize, head: usize, n: usize, args: RunArgs, ctx: &mut Ctx<'_>) -> Result<(), Error> {
    let model = args.model()?;
    let seed = args.seed.unwrap_or(0);
    let params = match load_init(&args, &model)? {
        Some(p) => p,
        None => ModelParams::init(&model, &mut derive(seed, stream::INIT, 0))?,
    };
    let plan = RunPlan {
        model: model.clone(),
        seed,
        ..RunPlan::default()
    };
    let world = plan.world()?;
    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            let p = gen_pair(&world, &mut derive(seed, stream::PROBE_DATA, i as u64));
            Sample {
                img_feats: p.img_feats,
                boxes: p.boxes,
                tokens: p.tokens,
                labels: SampleLabels::default(),
            }
        })
        .collect();
    let pairs = concept_links(&world, &samples);
    let report = probe_report(&params, &samples, layer, head, &pairs)?;
    ctx.log(format!(
        "{} pairs, max attention row-sum error {:.3e}",
        report.pairs.len(),
        report.max_row_sum_error
    ));
    let value = serde_json::to_value(&report).expect("reports serialize");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("probe.json"), format!("{value}\n"))?;
    }
    emit(ctx, None, &value)
}

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Runs the CLI with explicit output streams and returns the exit code.
pub fn run_cli_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let args = match &cli.command {
        Command::Train(a) | Command::Eval(a) | Command::Ablate(a) | Command::Probe { run: a, .. } => {
            a.clone().merge_file()
        }
    };
    let args = match args {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    let mut ctx = Ctx {
        out,
        err,
        quiet: args.quiet.unwrap_or(false),
    };
    let result = match cli.command {
        Command::Train(_) => match args.ablate {
            Some(grid) => cmd_ablate(grid, args, &mut ctx),
            None => cmd_train(args, &mut ctx),
        },
        Command::Eval(_) => cmd_eval(args, &mut ctx),
        Command::Ablate(_) => match args.ablate {
            Some(grid) => cmd_ablate(grid, args, &mut ctx),
            None => Err(config_err("ablate needs --grid {modality,mode,stage}")),
        },
        Command::Probe {
            layer,
            head,
            probe_samples,
            ..
        } => cmd_probe(layer, head, probe_samples, args, &mut ctx),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(ctx.err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run_cli(argv: &[String]) -> i32 {
    run_cli_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

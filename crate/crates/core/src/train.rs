//! Training loops: standard empirical risk minimization, FreeLB-style free
//! adversarial training, and the full multimodal variant with the KL
//! consistency term, plus the two-stage pre-train/finetune workflow.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{Modality, PerturbationState};
use crate::checkpoint;
use crate::error::{contract, Error, Result};
use crate::metrics::{MetricsRecord, Split};
use crate::model::{
    collate, forward, forward_values, DeltaVars, Injection, ModelConfig, ModelParams, MultimodalBatch, Sample, Task,
};
use crate::objectives::{adversarial_branch_loss, task_loss, Branch, KlTargetGrad, KlTerm, LossBreakdown};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{derive, stream};
use crate::synth::{gen_downstream_dataset, gen_pretrain_batch, WorldSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use crate::metrics::Stage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Standard,
    Freelb,
    Villa,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Freelb => "freelb",
            Mode::Villa => "villa",
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != Mode::Standard
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "freelb" => Ok(Mode::Freelb),
            "villa" => Ok(Mode::Villa),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Which stages a run executes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagePlan {
    Pretrain,
    Finetune,
    #[default]
    Both,
}

impl StagePlan {
    pub fn as_str(self) -> &'static str {
        match self {
            StagePlan::Pretrain => "pretrain",
            StagePlan::Finetune => "finetune",
            StagePlan::Both => "both",
        }
    }

    pub fn pretrains(self) -> bool {
        self != StagePlan::Finetune
    }

    pub fn finetunes(self) -> bool {
        self != StagePlan::Pretrain
    }
}

impl FromStr for StagePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(StagePlan::Pretrain),
            "finetune" => Ok(StagePlan::Finetune),
            "both" => Ok(StagePlan::Both),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// ascent iterations per minibatch (K)
    pub adv_steps: usize,
    pub epsilon: f64,
    pub adv_step_size: f64,
    /// weight of the KL term in the parameter objective (villa only)
    pub kl_weight: f64,
    pub modality_mode: Modality,
    pub kl_target_grad: KlTargetGrad,
    /// perturb both modalities in a single forward instead of one branch
    /// per modality
    pub simultaneous: bool,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Standard,
            adv_steps: 3,
            epsilon: 1.0,
            adv_step_size: 1e-2,
            kl_weight: 1.0,
            modality_mode: Modality::Both,
            kl_target_grad: KlTargetGrad::Stop,
            simultaneous: false,
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.optimizer.validate()?;
        if !self.mode.is_adversarial() {
            return Ok(());
        }
        if self.adv_steps == 0 {
            return Err(Error::Config("adv_steps must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.adv_step_size >= 0.0 && self.adv_step_size.is_finite()) {
            return Err(Error::Config(format!(
                "adv_step_size must be finite and >= 0, got {}",
                self.adv_step_size
            )));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!("kl_weight must be finite and >= 0, got {}", self.kl_weight)));
        }
        if self.simultaneous && self.modality_mode != Modality::Both {
            return Err(Error::Config("simultaneous perturbation needs modality both".into()));
        }
        Ok(())
    }

    /// Whether the KL consistency term participates at all. A zero weight
    /// removes it from the ascent objective as well.
    pub fn kl_active(&self) -> bool {
        self.mode == Mode::Villa && self.kl_weight != 0.0
    }

    fn effective_kl_weight(&self) -> f64 {
        if self.kl_active() {
            self.kl_weight
        } else {
            0.0
        }
    }

    fn branches(&self) -> Vec<Branch> {
        if self.simultaneous {
            return vec![Branch::Joint];
        }
        let mut b = Vec::with_capacity(2);
        if self.modality_mode.has_img() {
            b.push(Branch::Img);
        }
        if self.modality_mode.has_txt() {
            b.push(Branch::Txt);
        }
        b
    }
}

/// Side information about one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    /// the gradient handed to the optimizer, one tensor per parameter
    pub accumulated: Vec<Tensor>,
    /// per-iteration parameter gradients, when tracing was requested
    pub per_iteration: Option<Vec<Vec<Tensor>>>,
    pub delta_norm_img: f64,
    pub delta_norm_txt: f64,
    pub grad_norm: f64,
    /// optimizer updates applied during this step
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// accuracy of the clean prediction before the update
    pub accuracy: f64,
    pub diagnostics: StepDiagnostics,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.last_dim().max(1);
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn l2_norm(ts: &[Tensor]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn check_task(batch: &MultimodalBatch, params: &ModelParams, task: Task) -> Result<()> {
    batch.validate(&params.config)?;
    batch.labels(task)?;
    Ok(())
}

fn finite(v: f64, iteration: usize, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { iteration, what })
    }
}

/// One clean forward/backward and one optimizer update.
pub fn standard_train_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    batch: &MultimodalBatch,
    task: Task,
) -> Result<StepOutcome> {
    check_task(batch, params, task)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward(&mut tape, params, &vars, batch, DeltaVars::default(), task)?;
    let loss = task_loss(&mut tape, out.logits, batch, task)?;
    let l_std = finite(tape.value(loss).item(), 1, "clean loss")?;
    let acc = accuracy(tape.value(out.logits), &batch.labels(task)?);
    let mut grads = tape.backward(loss)?;
    let accumulated: Vec<Tensor> = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    let grad_norm = finite(l2_norm(&accumulated), 1, "gradient")?;
    optimizer.apply(&mut params.tensors, &accumulated)?;
    Ok(StepOutcome {
        loss: LossBreakdown::standard(l_std),
        accuracy: acc,
        diagnostics: StepDiagnostics {
            accumulated,
            per_iteration: None,
            delta_norm_img: 0.0,
            delta_norm_txt: 0.0,
            grad_norm,
            updates: 1,
        },
    })
}

/// Free multi-step adversarial training on one minibatch.
///
/// Each of the `K` iterations recomputes the clean loss and prediction,
/// evaluates every active perturbation branch, adds `1/K` of the parameter
/// gradient of `L_std + R_at (+ α·R_kl)` to the accumulator and takes one
/// ascent step on each perturbation. A single optimizer update follows.
pub fn villa_train_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    batch: &MultimodalBatch,
    task: Task,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    adversarial_step(params, optimizer, batch, task, config, rng, false)
}

/// As [`villa_train_step`], also returning every per-iteration gradient.
pub fn villa_train_step_traced(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    batch: &MultimodalBatch,
    task: Task,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    adversarial_step(params, optimizer, batch, task, config, rng, true)
}

fn adversarial_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    batch: &MultimodalBatch,
    task: Task,
    config: &TrainConfig,
    rng: &mut impl Rng,
    trace: bool,
) -> Result<StepOutcome> {
    if !config.mode.is_adversarial() {
        return contract("adversarial step requested in standard mode");
    }
    config.validate()?;
    check_task(batch, params, task)?;
    let k = config.adv_steps;
    let labels = batch.labels(task)?;
    let mut state = PerturbationState::init(
        batch,
        &params.config,
        config.epsilon,
        config.adv_step_size,
        config.modality_mode,
        rng,
    )?;
    let kl = config.kl_active().then_some(KlTerm {
        weight: config.kl_weight,
        target_grad: config.kl_target_grad,
    });
    // the parameter objective doubles as the ascent objective when the KL
    // weight is one or the KL term is off
    let shared_backward = kl.is_none_or(|t| t.weight == 1.0);
    let branches = config.branches();
    let inv_k = 1.0 / k as f64;

    let mut sum: Vec<Tensor> = params.tensors.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut per_iteration = trace.then(Vec::new);
    let (mut l_std_sum, mut r_at_sum, mut r_kl_sum) = (0.0, 0.0, 0.0);
    let mut acc = 0.0;

    // Unless KL gradients flow through the clean prediction, the clean pass
    // does not depend on the perturbations and is computed once per step.
    let cached_clean = if kl.is_none_or(|t| t.target_grad == KlTargetGrad::Stop) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let clean = forward(&mut tape, params, &vars, batch, DeltaVars::default(), task)?;
        let l_std = task_loss(&mut tape, clean.logits, batch, task)?;
        acc = accuracy(tape.value(clean.logits), &labels);
        let loss = finite(tape.value(l_std).item(), 1, "clean loss")?;
        let mut grads = tape.backward(l_std)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Some((tape.value(clean.logits).clone(), loss, grads))
    } else {
        None
    };

    for t in 1..=k {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let deltas = DeltaVars {
            img: config
                .modality_mode
                .has_img()
                .then(|| tape.leaf(state.delta_img.clone(), true)),
            txt: config
                .modality_mode
                .has_txt()
                .then(|| tape.leaf(state.delta_txt.clone(), true)),
        };
        let (clean_logits, mut objective) = match &cached_clean {
            Some((logits, loss, _)) => (tape.constant(logits.clone()), tape.constant(Tensor::scalar(*loss))),
            None => {
                let clean = forward(&mut tape, params, &vars, batch, DeltaVars::default(), task)?;
                let l_std = task_loss(&mut tape, clean.logits, batch, task)?;
                if t == 1 {
                    acc = accuracy(tape.value(clean.logits), &labels);
                }
                (clean.logits, l_std)
            }
        };
        let l_std = objective;
        let mut ascent = None;
        let (mut r_at, mut r_kl) = (0.0, 0.0);
        for &branch in &branches {
            let b = adversarial_branch_loss(
                &mut tape,
                params,
                &vars,
                batch,
                deltas,
                config.modality_mode,
                branch,
                task,
                clean_logits,
                kl,
            )?;
            r_at += tape.value(b.adv).item();
            if let Some(v) = b.kl {
                r_kl += tape.value(v).item();
            }
            objective = tape.add(objective, b.theta_loss)?;
            ascent = Some(match ascent {
                None => b.ascent_loss,
                Some(a) => tape.add(a, b.ascent_loss)?,
            });
        }
        l_std_sum += finite(tape.value(l_std).item(), t, "clean loss")?;
        r_at_sum += finite(r_at, t, "adversarial loss")?;
        r_kl_sum += finite(r_kl, t, "KL regularizer")?;
        finite(tape.value(objective).item(), t, "objective")?;

        let delta_vars: Vec<_> = [deltas.img, deltas.txt].into_iter().flatten().collect();
        let mut grads = tape.backward(objective)?;
        let mut delta_grads = if shared_backward {
            None
        } else {
            let a = ascent.expect("at least one branch");
            Some(tape.backward_wrt(a, &delta_vars)?)
        };

        let iteration: Vec<Tensor> = vars
            .iter()
            .zip(&params.tensors)
            .enumerate()
            .map(|(i, (&v, p))| {
                let mut g = grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
                if let Some((_, _, clean)) = &cached_clean {
                    g.data_mut().iter_mut().zip(clean[i].data()).for_each(|(a, b)| *a += b);
                }
                g
            })
            .collect();
        for (s, g) in sum.iter_mut().zip(&iteration) {
            for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        if let Some(trace) = per_iteration.as_mut() {
            trace.push(iteration);
        }

        let source = delta_grads.as_mut().unwrap_or(&mut grads);
        if let Some(d) = deltas.img {
            let g = source.take(d).unwrap_or_else(|| Tensor::zeros(state.delta_img.shape().to_vec()));
            if !g.is_finite() {
                return Err(Error::Divergence {
                    iteration: t,
                    what: "image perturbation gradient",
                });
            }
            state.step_img(&g)?;
        }
        if let Some(d) = deltas.txt {
            let g = source.take(d).unwrap_or_else(|| Tensor::zeros(state.delta_txt.shape().to_vec()));
            if !g.is_finite() {
                return Err(Error::Divergence {
                    iteration: t,
                    what: "text perturbation gradient",
                });
            }
            state.step_txt(&g)?;
        }
    }

    let accumulated: Vec<Tensor> = sum.into_iter().map(|s| s.map(|v| v * inv_k)).collect();
    let grad_norm = finite(l2_norm(&accumulated), k, "accumulated gradient")?;
    optimizer.apply(&mut params.tensors, &accumulated)?;
    if !params.all_finite() {
        return Err(Error::Divergence {
            iteration: k,
            what: "parameters after update",
        });
    }
    Ok(StepOutcome {
        loss: LossBreakdown::new(
            l_std_sum * inv_k,
            r_at_sum * inv_k,
            r_kl_sum * inv_k,
            config.effective_kl_weight(),
        ),
        accuracy: acc,
        diagnostics: StepDiagnostics {
            accumulated,
            per_iteration,
            delta_norm_img: state.mean_norm_img(),
            delta_norm_txt: state.mean_norm_txt(),
            grad_norm,
            updates: 1,
        },
    })
}

/// Dispatches on `config.mode`.
pub fn train_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    batch: &MultimodalBatch,
    task: Task,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    match config.mode {
        Mode::Standard => standard_train_step(params, optimizer, batch, task),
        Mode::Freelb | Mode::Villa => villa_train_step(params, optimizer, batch, task, config, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// number of prediction rows (masked positions for MLM)
    pub count: usize,
}

/// Clean accuracy and mean cross-entropy over `batches`, weighting each
/// batch by its number of prediction rows.
pub fn evaluate(params: &ModelParams, batches: &[MultimodalBatch], task: Task) -> Result<EvalMetrics> {
    let (mut hits, mut loss, mut count) = (0.0, 0.0, 0usize);
    for batch in batches {
        check_task(batch, params, task)?;
        let labels = batch.labels(task)?;
        if labels.is_empty() {
            continue;
        }
        let out = forward_values(params, batch, Injection::default(), task)?;
        let c = out.task_logits.last_dim();
        for (row, &y) in out.task_logits.data().chunks(c).zip(&labels) {
            if argmax(row) == y {
                hits += 1.0;
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        count += labels.len();
    }
    if count == 0 {
        return contract("evaluation dataset is empty");
    }
    Ok(EvalMetrics {
        accuracy: hits / count as f64,
        mean_loss: loss / count as f64,
        count,
    })
}

/// Collates `samples` into batches of at most `batch_size`, in order.
pub fn batches_of(samples: &[Sample], batch_size: usize, region_feat_dim: usize) -> Result<Vec<MultimodalBatch>> {
    if batch_size == 0 {
        return contract("batch_size must be positive");
    }
    samples
        .chunks(batch_size)
        .map(|c| collate(c, region_feat_dim))
        .collect()
}

/// Synthetic world and dataset sizes for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_concepts: usize,
    pub noise_sigma: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    /// pre-training minibatches per epoch (alternating MLM and ITM)
    pub pretrain_steps_per_epoch: usize,
    /// held-out ITM and MLM batches evaluated after each pre-training epoch
    pub pretrain_val_batches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_concepts: 16,
            noise_sigma: 0.1,
            train_samples: 512,
            val_samples: 512,
            pretrain_steps_per_epoch: 16,
            pretrain_val_batches: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stages: StagePlan,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seed: u64,
    /// fill the `wall_ms` column; leaving it zero keeps metrics files
    /// reproducible byte for byte
    pub record_wall_time: bool,
}

impl Default for RunPlan {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stages: StagePlan::Both,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stages.pretrains() {
            self.pretrain.validate()?;
            if self.data.pretrain_steps_per_epoch == 0 || self.data.pretrain_val_batches == 0 {
                return Err(Error::Config("pre-training needs at least one step and one validation batch".into()));
            }
            if self.pretrain.batch_size < 2 {
                return Err(Error::Config("pre-training batch_size must be at least 2".into()));
            }
        }
        if self.stages.finetunes() {
            self.finetune.validate()?;
            if self.data.train_samples == 0 || self.data.val_samples == 0 {
                return Err(Error::Config("finetuning needs training and validation samples".into()));
            }
        }
        Ok(())
    }

    pub fn world(&self) -> Result<WorldSpec> {
        WorldSpec::new(&self.model, self.data.num_concepts, self.data.noise_sigma, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub mode: Mode,
    pub steps: usize,
    pub optimizer_updates: u64,
    /// final clean accuracy on the training data (ITM for pre-training)
    pub train_accuracy: f64,
    pub train_loss: f64,
    /// final validation accuracy (ITM for pre-training)
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// final MLM validation accuracy, pre-training only
    pub mlm_val_accuracy: Option<f64>,
    pub encoder_checksum: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub pretrained: Option<ModelParams>,
    pub finetuned: Option<ModelParams>,
    pub history: Vec<MetricsRecord>,
    pub summaries: Vec<StageSummary>,
    /// parameters finetuning started from, after the heads were reset
    pub finetune_initial: Option<ModelParams>,
    /// encoder checksum of the finetuning initialization
    pub finetune_initial_checksum: Option<u64>,
}

struct StageRun<'a> {
    stage: Stage,
    config: &'a TrainConfig,
    seed: u64,
    timed: bool,
}

impl StageRun<'_> {
    fn record(&self, epoch: usize, step: usize, split: Split, task: Task, o: &StepOutcome, ms: u64) -> MetricsRecord {
        MetricsRecord {
            stage: self.stage,
            epoch,
            step,
            split,
            task,
            l_std: o.loss.l_std,
            r_at: o.loss.r_at,
            r_kl: o.loss.r_kl,
            total: o.loss.total,
            accuracy: o.accuracy,
            delta_norm_img: o.diagnostics.delta_norm_img,
            delta_norm_txt: o.diagnostics.delta_norm_txt,
            grad_norm: o.diagnostics.grad_norm,
            wall_ms: if self.timed { ms } else { 0 },
        }
    }

    fn eval_record(&self, epoch: usize, step: usize, task: Task, m: &EvalMetrics) -> MetricsRecord {
        MetricsRecord {
            stage: self.stage,
            epoch,
            step,
            split: Split::Val,
            task,
            l_std: m.mean_loss,
            r_at: 0.0,
            r_kl: 0.0,
            total: m.mean_loss,
            accuracy: m.accuracy,
            delta_norm_img: 0.0,
            delta_norm_txt: 0.0,
            grad_norm: 0.0,
            wall_ms: 0,
        }
    }

    /// Runs `epochs × steps` updates. `batch_for(epoch, step)` supplies each
    /// minibatch and its task; `validate` is called after every epoch.
    fn run(
        &self,
        params: &mut ModelParams,
        history: &mut Vec<MetricsRecord>,
        steps_per_epoch: usize,
        mut batch_for: impl FnMut(usize, usize) -> Result<(MultimodalBatch, Task)>,
        mut validate: impl FnMut(&ModelParams) -> Result<(Task, EvalMetrics)>,
    ) -> Result<(usize, u64)> {
        let mut optimizer = Optimizer::new(self.config.optimizer, &params.tensors)?;
        let mut step = 0usize;
        for epoch in 1..=self.config.epochs {
            for i in 0..steps_per_epoch {
                let (batch, task) = batch_for(epoch, i)?;
                let mut rng = derive(self.seed, stream::DELTA, ((self.stage as u64) << 40) | step as u64);
                let start = Instant::now();
                let outcome = train_step(params, &mut optimizer, &batch, task, self.config, &mut rng)?;
                let ms = start.elapsed().as_millis() as u64;
                history.push(self.record(epoch, step, Split::Train, task, &outcome, ms));
                step += 1;
            }
            let (task, m) = validate(params)?;
            history.push(self.eval_record(epoch, step, task, &m));
        }
        Ok((step, optimizer.step))
    }
}

fn pretrain_val_batches(world: &WorldSpec, plan: &RunPlan, task: Task) -> Result<Vec<MultimodalBatch>> {
    let offset = if task == Task::Mlm { 0 } else { 1 << 32 };
    (0..plan.data.pretrain_val_batches)
        .map(|j| {
            let mut rng = derive(plan.seed, stream::PRETRAIN_VAL, offset + j as u64);
            gen_pretrain_batch(world, plan.pretrain.batch_size, task, &mut rng)
        })
        .collect()
}

fn pretrain_stage(plan: &RunPlan, world: &WorldSpec, params: &mut ModelParams, history: &mut Vec<MetricsRecord>) -> Result<StageSummary> {
    let cfg = &plan.pretrain;
    let val_itm = pretrain_val_batches(world, plan, Task::Itm)?;
    let val_mlm = pretrain_val_batches(world, plan, Task::Mlm)?;
    let steps = plan.data.pretrain_steps_per_epoch;
    let run = StageRun {
        stage: Stage::Pretrain,
        config: cfg,
        seed: plan.seed,
        timed: plan.record_wall_time,
    };
    let (total_steps, updates) = run.run(
        params,
        history,
        steps,
        |epoch, i| {
            let global = ((epoch - 1) * steps + i) as u64;
            let task = if i % 2 == 0 { Task::Mlm } else { Task::Itm };
            let mut rng = derive(plan.seed, stream::PRETRAIN_DATA, global);
            Ok((gen_pretrain_batch(world, cfg.batch_size, task, &mut rng)?, task))
        },
        |p| Ok((Task::Itm, evaluate(p, &val_itm, Task::Itm)?)),
    )?;
    let itm = evaluate(params, &val_itm, Task::Itm)?;
    let mlm = evaluate(params, &val_mlm, Task::Mlm)?;
    Ok(StageSummary {
        stage: Stage::Pretrain,
        mode: cfg.mode,
        steps: total_steps,
        optimizer_updates: updates,
        train_accuracy: f64::NAN,
        train_loss: f64::NAN,
        val_accuracy: itm.accuracy,
        val_loss: itm.mean_loss,
        mlm_val_accuracy: Some(mlm.accuracy),
        encoder_checksum: params.encoder_checksum(),
    })
    .map(|mut s| {
        // pre-training draws fresh data every step, so there is no fixed
        // training set; report the last epoch's mean clean accuracy instead
        let last: Vec<_> = history
            .iter()
            .rev()
            .filter(|r| r.stage == Stage::Pretrain && r.split == Split::Train)
            .take(steps)
            .collect();
        s.train_accuracy = last.iter().map(|r| r.accuracy).sum::<f64>() / last.len() as f64;
        s.train_loss = last.iter().map(|r| r.l_std).sum::<f64>() / last.len() as f64;
        s
    })
}

fn finetune_stage(plan: &RunPlan, world: &WorldSpec, params: &mut ModelParams, history: &mut Vec<MetricsRecord>) -> Result<StageSummary> {
    let cfg = &plan.finetune;
    let d = plan.model.region_feat_dim;
    let train = gen_downstream_dataset(world, plan.data.train_samples, plan.seed, stream::TRAIN_DATA);
    let val = gen_downstream_dataset(world, plan.data.val_samples, plan.seed, stream::VAL_DATA);
    let eval_size = 128;
    let train_eval = batches_of(&train, eval_size, d)?;
    let val_eval = batches_of(&val, eval_size, d)?;
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut current_epoch = 0;
    let run = StageRun {
        stage: Stage::Finetune,
        config: cfg,
        seed: plan.seed,
        timed: plan.record_wall_time,
    };
    let (total_steps, updates) = run.run(
        params,
        history,
        steps,
        |epoch, i| {
            if epoch != current_epoch {
                order = (0..train.len()).collect();
                order.shuffle(&mut derive(plan.seed, stream::SHUFFLE, epoch as u64));
                current_epoch = epoch;
            }
            let end = ((i + 1) * cfg.batch_size).min(order.len());
            let chunk: Vec<Sample> = order[i * cfg.batch_size..end].iter().map(|&j| train[j].clone()).collect();
            Ok((collate(&chunk, d)?, Task::Answer))
        },
        |p| Ok((Task::Answer, evaluate(p, &val_eval, Task::Answer)?)),
    )?;
    let tr = evaluate(params, &train_eval, Task::Answer)?;
    let va = evaluate(params, &val_eval, Task::Answer)?;
    Ok(StageSummary {
        stage: Stage::Finetune,
        mode: cfg.mode,
        steps: total_steps,
        optimizer_updates: updates,
        train_accuracy: tr.accuracy,
        train_loss: tr.mean_loss,
        val_accuracy: va.accuracy,
        val_loss: va.mean_loss,
        mlm_val_accuracy: None,
        encoder_checksum: params.encoder_checksum(),
    })
}

/// Pre-trains on MLM and ITM (alternating minibatches), then reinitializes
/// the task heads and finetunes on the downstream task, each stage with its
/// own mode.
///
/// With `checkpoint_dir`, the pre-trained parameters are written to
/// `pretrain.ckpt` and finetuning starts from what is read back; the final
/// parameters go to `finetune.ckpt`. `init` replaces the random
/// initialization of the first executed stage.
pub fn run_two_stage(plan: &RunPlan, init: Option<ModelParams>, checkpoint_dir: Option<&Path>) -> Result<RunResult> {
    plan.validate()?;
    let world = plan.world()?;
    let mut params = match init {
        Some(p) => {
            if p.config != plan.model {
                return Err(Error::Load("initial parameters were built for a different model config".into()));
            }
            p
        }
        None => ModelParams::init(&plan.model, &mut derive(plan.seed, stream::INIT, 0))?,
    };
    let mut history = Vec::new();
    let mut summaries = Vec::new();
    let mut pretrained = None;
    let mut finetuned = None;
    let mut finetune_initial_checksum = None;
    let mut finetune_initial = None;

    if plan.stages.pretrains() {
        summaries.push(pretrain_stage(plan, &world, &mut params, &mut history)?);
        pretrained = Some(params.clone());
        if let Some(dir) = checkpoint_dir {
            let path = dir.join("pretrain.ckpt");
            checkpoint::save(&path, &params)?;
            if plan.stages.finetunes() {
                params = checkpoint::load(&path, &plan.model)?;
            }
        }
    }
    if plan.stages.finetunes() {
        params.reinit_heads(&mut derive(plan.seed, stream::HEAD_INIT, 0));
        finetune_initial_checksum = Some(params.encoder_checksum());
        finetune_initial = Some(params.clone());
        summaries.push(finetune_stage(plan, &world, &mut params, &mut history)?);
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&dir.join("finetune.ckpt"), &params)?;
        }
        finetuned = Some(params);
    }
    Ok(RunResult {
        pretrained,
        finetuned,
        history,
        summaries,
        finetune_initial,
        finetune_initial_checksum,
    })
}

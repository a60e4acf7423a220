//! Loss functions: clean cross-entropy, the label-preserving adversarial
//! loss, and the symmetric-KL consistency regularizer.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::Modality;
use crate::error::{contract, Error, Result};
use crate::model::{forward, DeltaVars, ModelParams, MultimodalBatch, Task};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether gradient flows into the parameters through the clean
/// prediction used as the KL target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlTargetGrad {
    #[default]
    Stop,
    Flow,
}

impl KlTargetGrad {
    pub fn as_str(self) -> &'static str {
        match self {
            KlTargetGrad::Stop => "stop",
            KlTargetGrad::Flow => "flow",
        }
    }
}

impl FromStr for KlTargetGrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stop" => Ok(KlTargetGrad::Stop),
            "flow" => Ok(KlTargetGrad::Flow),
            other => Err(Error::Config(format!("unknown kl-target-grad `{other}`"))),
        }
    }
}

/// Per-step decomposition `total = l_std + r_at + kl_weight · r_kl`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_std: f64,
    pub r_at: f64,
    pub r_kl: f64,
    pub kl_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_std: f64, r_at: f64, r_kl: f64, kl_weight: f64) -> Self {
        Self {
            l_std,
            r_at,
            r_kl,
            kl_weight,
            total: l_std + r_at + kl_weight * r_kl,
        }
    }

    pub fn standard(l_std: f64) -> Self {
        Self::new(l_std, 0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.l_std.is_finite() && self.r_at.is_finite() && self.r_kl.is_finite() && self.total.is_finite()
    }
}

/// Mean over non-ignored rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[i64], ignore_index: Option<i64>) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let c = shape.last().copied().unwrap_or(0);
    let rows = if c == 0 { 0 } else { tape.value(logits).numel() / c };
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let mut picked = Vec::with_capacity(rows);
    for (i, &y) in labels.iter().enumerate() {
        if Some(y) == ignore_index {
            continue;
        }
        if y < 0 || y as usize >= c {
            return contract(format!("label {y} outside [0, {c})"));
        }
        picked.push(i * c + y as usize);
    }
    if picked.is_empty() {
        return contract("cross_entropy over zero labelled rows");
    }
    let weight = -1.0 / picked.len() as f64;
    let mut w = Tensor::zeros(shape);
    for &i in &picked {
        w.data_mut()[i] = weight;
    }
    let lsm = tape.log_softmax(logits)?;
    let w = tape.constant(w);
    let terms = tape.mul(lsm, w)?;
    Ok(tape.sum(terms))
}

/// Cross-entropy over rows whose target is not `-1`.
pub fn masked_lm_loss(tape: &mut Tape, mlm_logits: Var, mlm_targets: &[i64]) -> Result<Var> {
    if mlm_targets.iter().all(|&y| y < 0) {
        return contract("masked LM loss needs at least one masked position");
    }
    cross_entropy(tape, mlm_logits, mlm_targets, Some(-1))
}

/// Batch mean of `KL(p‖q) + KL(q‖p)` with `p`, `q` the softmax of each
/// logit row, evaluated as `Σ (p - q)(log p - log q)` in log space.
pub fn sym_kl(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    if tape.shape(p_logits) != tape.shape(q_logits) {
        return Err(Error::Dimension {
            op: "sym_kl",
            lhs: tape.shape(p_logits).to_vec(),
            rhs: tape.shape(q_logits).to_vec(),
        });
    }
    let c = tape.value(p_logits).last_dim();
    let rows = if c == 0 { 0 } else { tape.value(p_logits).numel() / c };
    if rows == 0 {
        return contract("sym_kl over zero rows");
    }
    let lp = tape.log_softmax(p_logits)?;
    let lq = tape.log_softmax(q_logits)?;
    let p = tape.softmax(p_logits)?;
    let q = tape.softmax(q_logits)?;
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let terms = tape.mul(dp, dl)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Task loss for the logits returned by [`forward`].
pub fn task_loss(tape: &mut Tape, logits: Var, batch: &MultimodalBatch, task: Task) -> Result<Var> {
    let labels: Vec<i64> = batch.labels(task)?.into_iter().map(|y| y as i64).collect();
    match task {
        Task::Mlm => masked_lm_loss(tape, logits, &labels),
        Task::Itm | Task::Answer => cross_entropy(tape, logits, &labels, None),
    }
}

/// Which input the adversarial branch perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Img,
    Txt,
    /// Both modalities in one forward pass.
    Joint,
}

/// KL regularizer settings for a branch; `None` disables it entirely.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlTerm {
    pub weight: f64,
    pub target_grad: KlTargetGrad,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchLoss {
    /// cross-entropy on the perturbed input against the true labels
    pub adv: Var,
    /// symmetric KL to the clean prediction, when enabled
    pub kl: Option<Var>,
    /// `adv + weight · kl`, differentiated with respect to the parameters
    pub theta_loss: Var,
    /// `adv + kl`, differentiated with respect to the branch's delta
    pub ascent_loss: Var,
}

/// Runs a perturbed forward for one branch and builds both its
/// parameter-side and delta-side objectives against `clean_logits`.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_branch_loss(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    batch: &MultimodalBatch,
    deltas: DeltaVars,
    modality_mode: Modality,
    branch: Branch,
    task: Task,
    clean_logits: Var,
    kl: Option<KlTerm>,
) -> Result<BranchLoss> {
    let wanted = match branch {
        Branch::Img => {
            if !modality_mode.has_img() {
                return contract("image branch requested but image perturbation is disabled");
            }
            DeltaVars {
                img: deltas.img,
                txt: None,
            }
        }
        Branch::Txt => {
            if !modality_mode.has_txt() {
                return contract("text branch requested but text perturbation is disabled");
            }
            DeltaVars {
                img: None,
                txt: deltas.txt,
            }
        }
        Branch::Joint => {
            if modality_mode != Modality::Both {
                return contract("joint branch needs both modalities enabled");
            }
            deltas
        }
    };
    if wanted.img.is_none() && wanted.txt.is_none() {
        return contract("adversarial branch has no perturbation to apply");
    }
    let out = forward(tape, params, vars, batch, wanted, task)?;
    let adv = task_loss(tape, out.logits, batch, task)?;
    let Some(term) = kl else {
        return Ok(BranchLoss {
            adv,
            kl: None,
            theta_loss: adv,
            ascent_loss: adv,
        });
    };
    let target = match term.target_grad {
        KlTargetGrad::Stop => tape.constant(tape.value(clean_logits).clone()),
        KlTargetGrad::Flow => clean_logits,
    };
    let kl_var = sym_kl(tape, out.logits, target)?;
    let weighted = tape.scale(kl_var, term.weight);
    let theta_loss = tape.add(adv, weighted)?;
    let ascent_loss = tape.add(adv, kl_var)?;
    Ok(BranchLoss {
        adv,
        kl: Some(kl_var),
        theta_loss,
        ascent_loss,
    })
}

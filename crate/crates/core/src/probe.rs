//! Attention probing: how strongly image regions attend to the words that
//! name them.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{attention_probe, collate, forward_values, Injection, ModelOutput, ModelParams, Sample, Task};
use crate::synth::WorldSpec;

/// A region of one sample and the half-open token span it is linked to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePair {
    pub sample: usize,
    pub region: usize,
    pub span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub id: usize,
    pub pair: ProbePair,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMean {
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub head: usize,
    /// probe values of every pair at the selected layer and head
    pub pairs: Vec<PairValue>,
    /// mean probe value over all pairs for every layer and head, in
    /// row-major `(layer, head)` order
    pub head_means: Vec<HeadMean>,
    /// largest deviation from 1 of any valid attention row's sum over
    /// valid keys
    pub max_row_sum_error: f64,
}

/// Links each caption token naming a concept to every region whose
/// features are nearest to that concept's prototype.
pub fn concept_links(world: &WorldSpec, samples: &[Sample]) -> Vec<ProbePair> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let regions: Vec<usize> = s.img_feats.iter().map(|f| world.nearest_concept(f)).collect();
        for (j, &tok) in s.tokens.iter().enumerate() {
            let Some(c) = world.concept_of_token(tok) else {
                continue;
            };
            for (r, _) in regions.iter().enumerate().filter(|(_, &rc)| rc == c) {
                out.push(ProbePair {
                    sample: i,
                    region: r,
                    span: (j, j + 1),
                });
            }
        }
    }
    out
}

/// Largest deviation of a valid attention row's mass over valid keys
/// from 1, across every layer, head and sample.
pub fn attention_row_error(output: &ModelOutput) -> f64 {
    let mut worst = 0.0f64;
    for attn in &output.attention {
        let shape = attn.shape();
        let (b, heads, s) = (shape[0], shape[1], shape[2]);
        for i in 0..b {
            let mask = &output.position_mask[i * s..(i + 1) * s];
            for h in 0..heads {
                for q in (0..s).filter(|&q| mask[q] == 1.0) {
                    let base = ((i * heads + h) * s + q) * s;
                    let row = &attn.data()[base..base + s];
                    let sum: f64 = row.iter().zip(mask).filter(|(_, &m)| m == 1.0).map(|(a, _)| a).sum();
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
    }
    worst
}

/// Runs the model over `samples` and reports probe values for `pairs` at
/// `(layer, head)` together with per-head means over the whole grid.
pub fn probe_report(
    params: &ModelParams,
    samples: &[Sample],
    layer: usize,
    head: usize,
    pairs: &[ProbePair],
) -> Result<ProbeReport> {
    let cfg = &params.config;
    if samples.is_empty() {
        return contract("probe needs at least one sample");
    }
    if pairs.is_empty() {
        return contract("probe needs at least one region/token pair");
    }
    if layer >= cfg.num_layers || head >= cfg.num_heads {
        return contract(format!("probe cell ({layer}, {head}) outside the model"));
    }
    let mut stripped = samples.to_vec();
    for s in &mut stripped {
        s.labels = Default::default();
        s.labels.itm = Some(1);
    }
    let batch = collate(&stripped, cfg.region_feat_dim)?;
    let output = forward_values(params, &batch, Injection::default(), Task::Itm)?;

    let mut sums = vec![0.0; cfg.num_layers * cfg.num_heads];
    let mut selected = Vec::with_capacity(pairs.len());
    for (id, p) in pairs.iter().enumerate() {
        for l in 0..cfg.num_layers {
            for h in 0..cfg.num_heads {
                let v = attention_probe(&output, p.sample, l, h, p.region, p.span)?;
                sums[l * cfg.num_heads + h] += v;
                if (l, h) == (layer, head) {
                    selected.push(PairValue { id, pair: *p, value: v });
                }
            }
        }
    }
    let n = pairs.len() as f64;
    let head_means = (0..cfg.num_layers)
        .flat_map(|l| (0..cfg.num_heads).map(move |h| (l, h)))
        .map(|(l, h)| HeadMean {
            layer: l,
            head: h,
            mean: sums[l * cfg.num_heads + h] / n,
        })
        .collect();
    Ok(ProbeReport {
        layer,
        head,
        pairs: selected,
        head_means,
        max_row_sum_error: attention_row_error(&output),
    })
}

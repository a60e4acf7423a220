use serde::{Deserialize, Serialize};

use super::{ModelConfig, Task, CLS, PAD};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm_targets: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itm: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
}

/// One image-text example before batching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub img_feats: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub tokens: Vec<usize>,
    pub labels: SampleLabels,
}

/// Padded batch of image-region features, token ids, masks and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub batch_size: usize,
    pub num_tokens: usize,
    pub num_regions: usize,
    /// `B×R×region_feat_dim`
    pub img_feats: Tensor,
    /// `B×R×4`, normalized coordinates
    pub region_boxes: Tensor,
    /// `B×T`
    pub txt_tokens: Vec<usize>,
    pub txt_mask: Vec<f64>,
    pub region_mask: Vec<f64>,
    /// `B×T`, `-1` where no prediction is required
    pub mlm_targets: Option<Vec<i64>>,
    pub itm_label: Option<Vec<usize>>,
    pub answer_label: Option<Vec<usize>>,
}

impl MultimodalBatch {
    pub fn seq_len(&self) -> usize {
        self.num_tokens + self.num_regions
    }

    pub fn feat_dim(&self) -> usize {
        self.img_feats.last_dim()
    }

    /// Task implied by the single active label family.
    pub fn task(&self) -> Option<Task> {
        match (
            self.mlm_targets.is_some(),
            self.itm_label.is_some(),
            self.answer_label.is_some(),
        ) {
            (true, false, false) => Some(Task::Mlm),
            (false, true, false) => Some(Task::Itm),
            (false, false, true) => Some(Task::Answer),
            _ => None,
        }
    }

    /// Validity of each fused position, ordered `[tokens.., regions..]`.
    pub fn position_mask(&self) -> Vec<f64> {
        let (t, r) = (self.num_tokens, self.num_regions);
        let mut mask = Vec::with_capacity(self.batch_size * (t + r));
        for b in 0..self.batch_size {
            mask.extend_from_slice(&self.txt_mask[b * t..(b + 1) * t]);
            mask.extend_from_slice(&self.region_mask[b * r..(b + 1) * r]);
        }
        mask
    }

    /// Number of unpadded tokens in sample `b`.
    pub fn valid_tokens(&self, b: usize) -> usize {
        self.txt_mask[b * self.num_tokens..(b + 1) * self.num_tokens]
            .iter()
            .filter(|&&m| m == 1.0)
            .count()
    }

    pub fn valid_regions(&self, b: usize) -> usize {
        self.region_mask[b * self.num_regions..(b + 1) * self.num_regions]
            .iter()
            .filter(|&&m| m == 1.0)
            .count()
    }

    /// `(sample, token position, target)` for every MLM prediction site.
    pub fn mlm_sites(&self) -> Vec<(usize, usize, usize)> {
        let Some(targets) = &self.mlm_targets else {
            return Vec::new();
        };
        targets
            .iter()
            .enumerate()
            .filter(|(_, &y)| y >= 0)
            .map(|(i, &y)| (i / self.num_tokens, i % self.num_tokens, y as usize))
            .collect()
    }

    /// Class labels for `task`, one per prediction row.
    pub fn labels(&self, task: Task) -> Result<Vec<usize>> {
        match task {
            Task::Mlm => {
                let sites = self.mlm_sites();
                if self.mlm_targets.is_none() {
                    return contract("batch carries no MLM targets");
                }
                Ok(sites.into_iter().map(|(_, _, y)| y).collect())
            }
            Task::Itm => self
                .itm_label
                .clone()
                .ok_or_else(|| crate::Error::Contract("batch carries no ITM labels".into())),
            Task::Answer => self
                .answer_label
                .clone()
                .ok_or_else(|| crate::Error::Contract("batch carries no answer labels".into())),
        }
    }

    /// Checks every structural invariant against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (b, t, r, d) = (self.batch_size, self.num_tokens, self.num_regions, config.region_feat_dim);
        if b == 0 || t == 0 {
            return contract("batch must contain at least one sample and one token");
        }
        if t > config.max_tokens || r > config.max_regions {
            return contract(format!(
                "batch of {t} tokens / {r} regions exceeds model limits {} / {}",
                config.max_tokens, config.max_regions
            ));
        }
        if self.img_feats.shape() != [b, r, d] || self.region_boxes.shape() != [b, r, 4] {
            return contract(format!(
                "feature shapes {:?} / {:?} do not match B={b} R={r} d={d}",
                self.img_feats.shape(),
                self.region_boxes.shape()
            ));
        }
        if self.txt_tokens.len() != b * t || self.txt_mask.len() != b * t || self.region_mask.len() != b * r {
            return contract("token or mask length mismatch");
        }
        if self.txt_mask.iter().chain(&self.region_mask).any(|&m| m != 0.0 && m != 1.0) {
            return contract("masks must be 0/1");
        }
        for s in 0..b {
            if self.txt_tokens[s * t] != CLS || self.txt_mask[s * t] != 1.0 {
                return contract(format!("sample {s} does not start with [CLS]"));
            }
        }
        for (i, (&tok, &m)) in self.txt_tokens.iter().zip(&self.txt_mask).enumerate() {
            if tok >= config.vocab_size {
                return contract(format!("token id {tok} outside vocabulary"));
            }
            if m == 0.0 && tok != PAD {
                return contract(format!("padded token position {i} is not [PAD]"));
            }
        }
        let feats = self.img_feats.data();
        let boxes = self.region_boxes.data();
        for (i, &m) in self.region_mask.iter().enumerate() {
            if m == 0.0
                && (feats[i * d..(i + 1) * d].iter().any(|&v| v != 0.0)
                    || boxes[i * 4..(i + 1) * 4].iter().any(|&v| v != 0.0))
            {
                return contract(format!("padded region {i} has nonzero features"));
            }
        }
        if !self.img_feats.is_finite() || !self.region_boxes.is_finite() {
            return Err(crate::Error::NumericDomain { op: "batch" });
        }
        let Some(task) = self.task() else {
            return contract("exactly one label family must be active");
        };
        match task {
            Task::Mlm => {
                let targets = self.mlm_targets.as_ref().unwrap();
                if targets.len() != b * t {
                    return contract("mlm_targets length mismatch");
                }
                if targets
                    .iter()
                    .any(|&y| y < -1 || (y >= 0 && y as usize >= config.vocab_size))
                {
                    return contract("mlm target outside vocabulary");
                }
            }
            Task::Itm => {
                let labels = self.itm_label.as_ref().unwrap();
                if labels.len() != b || labels.iter().any(|&y| y > 1) {
                    return contract("itm labels must be one 0/1 value per sample");
                }
            }
            Task::Answer => {
                let labels = self.answer_label.as_ref().unwrap();
                if labels.len() != b || labels.iter().any(|&y| y >= config.num_answers) {
                    return contract("answer labels out of range");
                }
            }
        }
        Ok(())
    }

    /// The samples making up this batch, with padding stripped.
    pub fn to_samples(&self) -> Vec<Sample> {
        let (t, r, d) = (self.num_tokens, self.num_regions, self.feat_dim());
        (0..self.batch_size)
            .map(|b| {
                let nt = self.valid_tokens(b);
                let nr = self.valid_regions(b);
                let feats = self.img_feats.data();
                let boxes = self.region_boxes.data();
                Sample {
                    img_feats: (0..nr)
                        .map(|j| feats[(b * r + j) * d..(b * r + j + 1) * d].to_vec())
                        .collect(),
                    boxes: (0..nr)
                        .map(|j| {
                            let o = (b * r + j) * 4;
                            [boxes[o], boxes[o + 1], boxes[o + 2], boxes[o + 3]]
                        })
                        .collect(),
                    tokens: self.txt_tokens[b * t..b * t + nt].to_vec(),
                    labels: SampleLabels {
                        mlm_targets: self.mlm_targets.as_ref().map(|m| m[b * t..b * t + nt].to_vec()),
                        itm: self.itm_label.as_ref().map(|l| l[b]),
                        answer: self.answer_label.as_ref().map(|l| l[b]),
                    },
                }
            })
            .collect()
    }
}

/// Pads samples to the longest caption and the largest region count.
pub fn collate(samples: &[Sample], region_feat_dim: usize) -> Result<MultimodalBatch> {
    if samples.is_empty() {
        return contract("cannot collate an empty sample list");
    }
    let b = samples.len();
    let t = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    let r = samples.iter().map(|s| s.img_feats.len()).max().unwrap_or(0);
    let d = region_feat_dim;
    let has_mlm = samples[0].labels.mlm_targets.is_some();
    let has_itm = samples[0].labels.itm.is_some();
    let has_answer = samples[0].labels.answer.is_some();

    let mut feats = vec![0.0; b * r * d];
    let mut boxes = vec![0.0; b * r * 4];
    let mut tokens = vec![PAD; b * t];
    let mut txt_mask = vec![0.0; b * t];
    let mut region_mask = vec![0.0; b * r];
    let mut mlm = has_mlm.then(|| vec![-1i64; b * t]);
    let mut itm = has_itm.then(|| Vec::with_capacity(b));
    let mut answer = has_answer.then(|| Vec::with_capacity(b));

    for (i, s) in samples.iter().enumerate() {
        if s.labels.mlm_targets.is_some() != has_mlm
            || s.labels.itm.is_some() != has_itm
            || s.labels.answer.is_some() != has_answer
        {
            return contract("samples in one batch must share a label family");
        }
        if s.boxes.len() != s.img_feats.len() {
            return contract("every region needs exactly one box");
        }
        for (j, (f, bx)) in s.img_feats.iter().zip(&s.boxes).enumerate() {
            if f.len() != d {
                return contract(format!("region feature of length {} (expected {d})", f.len()));
            }
            let o = (i * r + j) * d;
            feats[o..o + d].copy_from_slice(f);
            boxes[(i * r + j) * 4..(i * r + j + 1) * 4].copy_from_slice(bx);
            region_mask[i * r + j] = 1.0;
        }
        for (j, &tok) in s.tokens.iter().enumerate() {
            tokens[i * t + j] = tok;
            txt_mask[i * t + j] = 1.0;
        }
        if let (Some(m), Some(src)) = (mlm.as_mut(), &s.labels.mlm_targets) {
            if src.len() != s.tokens.len() {
                return contract("mlm_targets must align with tokens");
            }
            m[i * t..i * t + src.len()].copy_from_slice(src);
        }
        if let Some(v) = itm.as_mut() {
            v.push(s.labels.itm.unwrap());
        }
        if let Some(v) = answer.as_mut() {
            v.push(s.labels.answer.unwrap());
        }
    }
    Ok(MultimodalBatch {
        batch_size: b,
        num_tokens: t,
        num_regions: r,
        img_feats: Tensor::new([b, r, d], feats)?,
        region_boxes: Tensor::new([b, r, 4], boxes)?,
        txt_tokens: tokens,
        txt_mask,
        region_mask,
        mlm_targets: mlm,
        itm_label: itm,
        answer_label: answer,
    })
}

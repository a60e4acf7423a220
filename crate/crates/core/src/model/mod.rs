//! Toy single-stream multimodal transformer.
//!
//! Image-region features and token embeddings are fused into one sequence
//! laid out as `[CLS] tokens.. regions..`, run through a stack of post-norm
//! transformer layers, and read out by task heads. The model exposes two
//! perturbation injection points: raw region features (before projection)
//! and word embeddings (before positions and types are added).

mod batch;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{collate, MultimodalBatch, Sample, SampleLabels};
pub use forward::{
    attention_probe, embed_inputs, forward, forward_values, self_attention, DeltaVars, Forward, Injection,
    ModelOutput,
};
pub use params::{LayerIndex, ModelParams, ParamIndex};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
/// First vocabulary id available for ordinary tokens.
pub const FIRST_WORD: usize = 3;

/// Logit offset applied to padded attention keys.
pub const ATTENTION_MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mlm,
    Itm,
    Answer,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mlm => "mlm",
            Task::Itm => "itm",
            Task::Answer => "answer",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Task::Mlm),
            "itm" => Ok(Task::Itm),
            "answer" => Ok(Task::Answer),
            other => Err(Error::Contract(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub max_regions: usize,
    pub region_feat_dim: usize,
    pub num_answers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 64,
            max_tokens: 16,
            max_regions: 8,
            region_feat_dim: 32,
            num_answers: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_tokens", self.max_tokens),
            ("max_regions", self.max_regions),
            ("region_feat_dim", self.region_feat_dim),
            ("num_answers", self.num_answers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by num_heads ({})",
                self.hidden, self.num_heads
            )));
        }
        if self.vocab_size <= FIRST_WORD {
            return Err(Error::Config("vocab_size must leave room beyond [PAD]/[CLS]/[MASK]".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    /// Stable `key=value;` rendering used for config digests.
    pub fn canonical(&self) -> String {
        format!(
            "num_layers={};hidden={};num_heads={};ffn_dim={};vocab_size={};max_tokens={};max_regions={};region_feat_dim={};num_answers={}",
            self.num_layers,
            self.hidden,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_tokens,
            self.max_regions,
            self.region_feat_dim,
            self.num_answers
        )
    }

    pub fn num_classes(&self, task: Task) -> usize {
        match task {
            Task::Mlm => self.vocab_size,
            Task::Itm => 2,
            Task::Answer => self.num_answers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_hidden() {
        let cfg = ModelConfig {
            num_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn task_round_trips_through_str() {
        for t in [Task::Mlm, Task::Itm, Task::Answer] {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert!("vqa".parse::<Task>().is_err());
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
/// Name prefix shared by all task heads; everything else is the encoder.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIndex {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
}

/// Positions of every named parameter inside [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIndex {
    pub word_embedding: usize,
    pub image_proj_w: usize,
    pub image_proj_b: usize,
    pub token_position: usize,
    pub region_pos_w: usize,
    pub region_pos_b: usize,
    pub modality_type: usize,
    pub emb_ln_gain: usize,
    pub emb_ln_bias: usize,
    pub layers: Vec<LayerIndex>,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub itm_w: usize,
    pub itm_b: usize,
    pub answer_w1: usize,
    pub answer_b1: usize,
    pub answer_w2: usize,
    pub answer_b2: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Embedding tables: N(0, 0.02²).
    Normal,
    /// Weight matrices: N(0, 1/fan_in).
    FanIn,
    Zeros,
    Ones,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Layout {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.names.push(name.into());
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, ParamIndex) {
    use Init::*;
    let h = cfg.hidden;
    let mut l = Layout {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let word_embedding = l.add("word_embedding", &[cfg.vocab_size, h], Normal);
    let image_proj_w = l.add("image_projection.weight", &[cfg.region_feat_dim, h], FanIn);
    let image_proj_b = l.add("image_projection.bias", &[h], Zeros);
    let token_position = l.add("token_position_embedding", &[cfg.max_tokens, h], Normal);
    let region_pos_w = l.add("region_position.weight", &[4, h], FanIn);
    let region_pos_b = l.add("region_position.bias", &[h], Zeros);
    let modality_type = l.add("modality_type_embedding", &[2, h], Normal);
    let emb_ln_gain = l.add("embedding_norm.gain", &[h], Ones);
    let emb_ln_bias = l.add("embedding_norm.bias", &[h], Zeros);
    let layers = (0..cfg.num_layers)
        .map(|i| {
            let p = format!("layer{i}.");
            LayerIndex {
                wq: l.add(format!("{p}query.weight"), &[h, h], FanIn),
                bq: l.add(format!("{p}query.bias"), &[h], Zeros),
                wk: l.add(format!("{p}key.weight"), &[h, h], FanIn),
                bk: l.add(format!("{p}key.bias"), &[h], Zeros),
                wv: l.add(format!("{p}value.weight"), &[h, h], FanIn),
                bv: l.add(format!("{p}value.bias"), &[h], Zeros),
                wo: l.add(format!("{p}output.weight"), &[h, h], FanIn),
                bo: l.add(format!("{p}output.bias"), &[h], Zeros),
                ln1_gain: l.add(format!("{p}attention_norm.gain"), &[h], Ones),
                ln1_bias: l.add(format!("{p}attention_norm.bias"), &[h], Zeros),
                ffn_w1: l.add(format!("{p}ffn.in.weight"), &[h, cfg.ffn_dim], FanIn),
                ffn_b1: l.add(format!("{p}ffn.in.bias"), &[cfg.ffn_dim], Zeros),
                ffn_w2: l.add(format!("{p}ffn.out.weight"), &[cfg.ffn_dim, h], FanIn),
                ffn_b2: l.add(format!("{p}ffn.out.bias"), &[h], Zeros),
                ln2_gain: l.add(format!("{p}ffn_norm.gain"), &[h], Ones),
                ln2_bias: l.add(format!("{p}ffn_norm.bias"), &[h], Zeros),
            }
        })
        .collect();
    let mlm_w = l.add("head.mlm.weight", &[h, cfg.vocab_size], FanIn);
    let mlm_b = l.add("head.mlm.bias", &[cfg.vocab_size], Zeros);
    let itm_w = l.add("head.itm.weight", &[h, 2], FanIn);
    let itm_b = l.add("head.itm.bias", &[2], Zeros);
    let answer_w1 = l.add("head.answer.hidden.weight", &[h, h], FanIn);
    let answer_b1 = l.add("head.answer.hidden.bias", &[h], Zeros);
    let answer_w2 = l.add("head.answer.out.weight", &[h, cfg.num_answers], FanIn);
    let answer_b2 = l.add("head.answer.out.bias", &[cfg.num_answers], Zeros);
    let index = ParamIndex {
        word_embedding,
        image_proj_w,
        image_proj_b,
        token_position,
        region_pos_w,
        region_pos_b,
        modality_type,
        emb_ln_gain,
        emb_ln_bias,
        layers,
        mlm_w,
        mlm_b,
        itm_w,
        itm_b,
        answer_w1,
        answer_b1,
        answer_w2,
        answer_b2,
    };
    (l, index)
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape.to_vec()),
        Init::Ones => return Tensor::full(shape.to_vec(), 1.0),
        Init::Normal => INIT_STD,
        Init::FanIn => (shape[0] as f64).sqrt().recip(),
    };
    let dist = Normal::new(0.0, std).expect("valid std");
    let mut t = Tensor::zeros(shape.to_vec());
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

/// All learnable parameters, in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub index: ParamIndex,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (l, index) = layout(config);
        let tensors = l
            .shapes
            .iter()
            .zip(&l.inits)
            .map(|(s, &i)| init_tensor(s, i, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            names: l.names,
            tensors,
            index,
        })
    }

    /// Builds a parameter set from named tensors, checking that names and
    /// shapes match the layout of `config` exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (l, index) = layout(config);
        if named.len() != l.names.len() {
            return Err(Error::Load(format!(
                "expected {} tensors, found {}",
                l.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(l.names.iter().zip(&l.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "tensor `{name}` {:?} does not match expected `{want}` {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names: l.names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_head(&self, i: usize) -> bool {
        self.names[i].starts_with(HEAD_PREFIX)
    }

    /// Draws fresh initial values for every task head.
    pub fn reinit_heads(&mut self, rng: &mut impl Rng) {
        let (l, _) = layout(&self.config);
        for i in 0..self.tensors.len() {
            if self.is_head(i) {
                self.tensors[i] = init_tensor(&l.shapes[i], l.inits[i], rng);
            }
        }
    }

    /// 64-bit FNV-1a over the names and little-endian bytes of the encoder
    /// (non-head) tensors.
    pub fn encoder_checksum(&self) -> u64 {
        let mut h = crate::checkpoint::Fnv1a::new();
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            if self.is_head(i) {
                continue;
            }
            h.write(name.as_bytes());
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Registers every tensor as a gradient-requiring leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant (inference only).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

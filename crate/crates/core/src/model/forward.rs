use super::{LayerIndex, ModelParams, MultimodalBatch, Task, ATTENTION_MASK_BIAS, MASK};
use crate::error::{contract, Result};
use crate::tape::{softmax_row, Tape, Var};
use crate::tensor::Tensor;

/// Perturbations already registered on a tape. `None` leaves that
/// modality unperturbed.
#[derive(Clone, Copy, Debug, Default)]
pub struct DeltaVars {
    /// `B×R×region_feat_dim`, added to raw region features
    pub img: Option<Var>,
    /// `B×T×hidden`, added to word embeddings
    pub txt: Option<Var>,
}

/// Value-level counterpart of [`DeltaVars`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Injection<'a> {
    pub img: Option<&'a Tensor>,
    pub txt: Option<&'a Tensor>,
}

/// Graph handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub task: Task,
    /// `B×S×hidden` final hidden states
    pub sequence: Var,
    /// `B×hidden`
    pub cls: Var,
    /// `B×C`, or `M×V` over the `M` MLM prediction sites for [`Task::Mlm`]
    pub logits: Var,
    /// per layer, `B×heads×S×S`
    pub attention: Vec<Var>,
}

/// Detached forward results.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub task: Task,
    pub cls_repr: Tensor,
    pub task_logits: Tensor,
    pub attention: Vec<Tensor>,
    pub clean_probs: Tensor,
    pub num_tokens: usize,
    pub num_regions: usize,
    /// `B×S` validity of each fused position
    pub position_mask: Vec<f64>,
}

/// Repeats each mask entry `width` times along a new trailing axis.
fn expand_mask(mask: &[f64], leading: &[usize], width: usize) -> Result<Tensor> {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, width))
        .collect();
    let mut shape = leading.to_vec();
    shape.push(width);
    Tensor::new(shape, data)
}

fn check_delta(tape: &Tape, delta: Option<Var>, want: &[usize], what: &str) -> Result<()> {
    if let Some(d) = delta {
        if tape.shape(d) != want {
            return contract(format!(
                "{what} perturbation has shape {:?}, batch needs {want:?}",
                tape.shape(d)
            ));
        }
    }
    Ok(())
}

/// Sum of word, position and type embeddings for the text side and of
/// projected features, box embeddings and type embeddings for the image
/// side, concatenated into `B×S×hidden`. Perturbations touch only word
/// embeddings and raw region features, and are masked at padding.
pub fn embed_inputs(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    batch: &MultimodalBatch,
    delta: DeltaVars,
) -> Result<Var> {
    let cfg = &params.config;
    let ix = &params.index;
    let (b, t, r, h, d) = (
        batch.batch_size,
        batch.num_tokens,
        batch.num_regions,
        cfg.hidden,
        cfg.region_feat_dim,
    );
    check_delta(tape, delta.img, &[b, r, d], "image")?;
    check_delta(tape, delta.txt, &[b, t, h], "text")?;

    let mut text = tape.embedding(vars[ix.word_embedding], &batch.txt_tokens, &[b, t])?;
    if let Some(dt) = delta.txt {
        let mask = tape.constant(expand_mask(&batch.txt_mask, &[b, t], h)?);
        let masked = tape.mul(dt, mask)?;
        text = tape.add(text, masked)?;
    }
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = tape.embedding(vars[ix.token_position], &positions, &[b, t])?;
    text = tape.add(text, pos)?;
    let text_type = tape.embedding(vars[ix.modality_type], &vec![0; b * t], &[b, t])?;
    text = tape.add(text, text_type)?;

    let mut feats = tape.constant(batch.img_feats.clone());
    if let Some(di) = delta.img {
        let mask = tape.constant(expand_mask(&batch.region_mask, &[b, r], d)?);
        let masked = tape.mul(di, mask)?;
        feats = tape.add(feats, masked)?;
    }
    let proj = tape.matmul(feats, vars[ix.image_proj_w])?;
    let mut image = tape.add_bias(proj, vars[ix.image_proj_b])?;
    let boxes = tape.constant(batch.region_boxes.clone());
    let box_proj = tape.matmul(boxes, vars[ix.region_pos_w])?;
    let box_emb = tape.add_bias(box_proj, vars[ix.region_pos_b])?;
    image = tape.add(image, box_emb)?;
    let image_type = tape.embedding(vars[ix.modality_type], &vec![1; b * r], &[b, r])?;
    image = tape.add(image, image_type)?;

    tape.concat(&[text, image], 1)
}

/// Multi-head scaled dot-product self-attention over `x: B×S×hidden`.
/// Returns the projected output and the `B×heads×S×S` attention map.
pub fn self_attention(
    tape: &mut Tape,
    vars: &[Var],
    layer: &LayerIndex,
    x: Var,
    mask_bias: Var,
    num_heads: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let (b, s, h) = (shape[0], shape[1], shape[2]);
    let dh = h / num_heads;

    let heads = |w: usize, bias: usize, tape: &mut Tape| -> Result<Var> {
        let y = tape.matmul(x, vars[w])?;
        let y = tape.add_bias(y, vars[bias])?;
        let y = tape.reshape(y, &[b, s, num_heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = heads(layer.wq, layer.bq, tape)?;
    let k = heads(layer.wk, layer.bk, tape)?;
    let v = heads(layer.wv, layer.bv, tape)?;

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = tape.add(scores, mask_bias)?;
    let probs = tape.softmax(scores)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, s, h])?;
    let out = tape.matmul(ctx, vars[layer.wo])?;
    let out = tape.add_bias(out, vars[layer.bo])?;
    Ok((out, probs))
}

fn attention_bias(batch: &MultimodalBatch, heads: usize) -> Result<Tensor> {
    let s = batch.seq_len();
    let valid = batch.position_mask();
    let mut data = Vec::with_capacity(batch.batch_size * heads * s * s);
    for bi in 0..batch.batch_size {
        let row: Vec<f64> = valid[bi * s..(bi + 1) * s]
            .iter()
            .map(|&m| if m == 1.0 { 0.0 } else { ATTENTION_MASK_BIAS })
            .collect();
        for _ in 0..heads * s {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new([batch.batch_size, heads, s, s], data)
}

/// Rows of the flattened `B*S` sequence where the MLM head is applied:
/// labelled sites when targets are present, `[MASK]` tokens otherwise.
fn mlm_rows(batch: &MultimodalBatch) -> Vec<usize> {
    let s = batch.seq_len();
    let t = batch.num_tokens;
    if batch.mlm_targets.is_some() {
        batch.mlm_sites().into_iter().map(|(b, p, _)| b * s + p).collect()
    } else {
        batch
            .txt_tokens
            .iter()
            .enumerate()
            .filter(|(_, &tok)| tok == MASK)
            .map(|(i, _)| (i / t) * s + i % t)
            .collect()
    }
}

pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    batch: &MultimodalBatch,
    delta: DeltaVars,
    task: Task,
) -> Result<Forward> {
    let cfg = &params.config;
    let ix = &params.index;
    if vars.len() != params.len() {
        return contract("parameter handles do not match the parameter set");
    }
    let emb = embed_inputs(tape, params, vars, batch, delta)?;
    let mut x = tape.layer_norm(emb, vars[ix.emb_ln_gain], vars[ix.emb_ln_bias])?;
    let bias = tape.constant(attention_bias(batch, cfg.num_heads)?);

    let mut attention = Vec::with_capacity(cfg.num_layers);
    for layer in &ix.layers {
        let (attn, probs) = self_attention(tape, vars, layer, x, bias, cfg.num_heads)?;
        attention.push(probs);
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, vars[layer.ln1_gain], vars[layer.ln1_bias])?;
        let f = tape.matmul(x, vars[layer.ffn_w1])?;
        let f = tape.add_bias(f, vars[layer.ffn_b1])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, vars[layer.ffn_w2])?;
        let f = tape.add_bias(f, vars[layer.ffn_b2])?;
        let res = tape.add(x, f)?;
        x = tape.layer_norm(res, vars[layer.ln2_gain], vars[layer.ln2_bias])?;
    }

    let (b, h) = (batch.batch_size, cfg.hidden);
    let cls = tape.slice(x, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, h])?;
    let logits = match task {
        Task::Mlm => {
            let rows = mlm_rows(batch);
            let picked = tape.gather_rows(x, &rows, &[rows.len()])?;
            let y = tape.matmul(picked, vars[ix.mlm_w])?;
            tape.add_bias(y, vars[ix.mlm_b])?
        }
        Task::Itm => {
            let y = tape.matmul(cls, vars[ix.itm_w])?;
            tape.add_bias(y, vars[ix.itm_b])?
        }
        Task::Answer => {
            let y = tape.matmul(cls, vars[ix.answer_w1])?;
            let y = tape.add_bias(y, vars[ix.answer_b1])?;
            let y = tape.gelu(y);
            let y = tape.matmul(y, vars[ix.answer_w2])?;
            tape.add_bias(y, vars[ix.answer_b2])?
        }
    };
    Ok(Forward {
        task,
        sequence: x,
        cls,
        logits,
        attention,
    })
}

/// Runs [`forward`] on a private tape with frozen parameters.
pub fn forward_values(
    params: &ModelParams,
    batch: &MultimodalBatch,
    injection: Injection<'_>,
    task: Task,
) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let delta = DeltaVars {
        img: injection.img.map(|t| tape.constant(t.clone())),
        txt: injection.txt.map(|t| tape.constant(t.clone())),
    };
    let out = forward(&mut tape, params, &vars, batch, delta, task)?;
    let task_logits = tape.value(out.logits).clone();
    let mut clean_probs = task_logits.clone();
    let c = clean_probs.last_dim().max(1);
    for row in clean_probs.data_mut().chunks_mut(c) {
        softmax_row(row);
    }
    Ok(ModelOutput {
        task,
        cls_repr: tape.value(out.cls).clone(),
        task_logits,
        attention: out.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        clean_probs,
        num_tokens: batch.num_tokens,
        num_regions: batch.num_regions,
        position_mask: batch.position_mask(),
    })
}

/// Largest attention weight from region `region_index` of `sample` to any
/// token in `token_span` (half-open) at the given layer and head.
pub fn attention_probe(
    output: &ModelOutput,
    sample: usize,
    layer: usize,
    head: usize,
    region_index: usize,
    token_span: (usize, usize),
) -> Result<f64> {
    let Some(attn) = output.attention.get(layer) else {
        return contract(format!("layer {layer} out of range"));
    };
    let shape = attn.shape();
    let (b, heads, s) = (shape[0], shape[1], shape[2]);
    let (t, r) = (output.num_tokens, output.num_regions);
    if sample >= b || head >= heads {
        return contract(format!("sample {sample} / head {head} out of range"));
    }
    let mask = &output.position_mask[sample * s..(sample + 1) * s];
    if region_index >= r || mask[t + region_index] != 1.0 {
        return contract(format!("region {region_index} is not a valid region of sample {sample}"));
    }
    let (start, end) = token_span;
    if start >= end || end > t || mask[start..end].iter().any(|&m| m != 1.0) {
        return contract(format!("token span [{start}, {end}) is empty or covers padding"));
    }
    let row = t + region_index;
    let base = ((sample * heads + head) * s + row) * s;
    Ok(attn.data()[base + start..base + end]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}

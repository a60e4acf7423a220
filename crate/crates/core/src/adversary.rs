//! Embedding-space adversaries: random init inside the Frobenius ball,
//! normalized-gradient ascent, and projection back onto the ball.
//!
//! All norms are per sample: the leading axis of a delta indexes examples
//! and each example's slice is constrained independently.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{ModelConfig, MultimodalBatch};
use crate::tensor::{frobenius_norm, Tensor};

/// Gradients with a per-sample norm at or below this leave delta unchanged.
pub const ZERO_GRAD_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Txt,
    Img,
    Both,
}

impl Modality {
    pub fn has_img(self) -> bool {
        matches!(self, Modality::Img | Modality::Both)
    }

    pub fn has_txt(self) -> bool {
        matches!(self, Modality::Txt | Modality::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Txt => "txt",
            Modality::Img => "img",
            Modality::Both => "both",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "txt" => Ok(Modality::Txt),
            "img" => Ok(Modality::Img),
            "both" => Ok(Modality::Both),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Zeroes every trailing-axis row whose mask entry is 0.
fn apply_row_mask(t: &mut Tensor, row_mask: Option<&[f64]>) {
    let Some(mask) = row_mask else { return };
    let w = t.last_dim();
    if w == 0 {
        return;
    }
    for (row, &m) in t.data_mut().chunks_mut(w).zip(mask) {
        if m == 0.0 {
            row.fill(0.0);
        }
    }
}

/// `U(-ε, ε) / √N_δ` per entry, `N_δ` the size of one sample's slice;
/// masked rows are zeroed afterwards.
pub fn init_delta(shape: &[usize], epsilon: f64, row_mask: Option<&[f64]>, rng: &mut impl Rng) -> Result<Tensor> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return contract(format!("epsilon must be a finite non-negative number, got {epsilon}"));
    }
    let mut t = Tensor::zeros(shape.to_vec());
    let samples = shape.first().copied().unwrap_or(0);
    if t.numel() == 0 || samples == 0 {
        return Ok(t);
    }
    if epsilon > 0.0 {
        let n_delta = (t.numel() / samples) as f64;
        let scale = 1.0 / n_delta.sqrt();
        for v in t.data_mut() {
            *v = rng.gen_range(-epsilon..=epsilon) * scale;
        }
    }
    apply_row_mask(&mut t, row_mask);
    Ok(t)
}

fn project_slice(slice: &mut [f64], epsilon: f64) {
    let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= epsilon {
        return;
    }
    let scale = epsilon / norm;
    slice.iter_mut().for_each(|v| *v *= scale);
    // Rounding can leave the result a few ulps outside the ball; nudge it
    // inside so the projection is exactly idempotent.
    loop {
        let n = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= epsilon {
            break;
        }
        slice.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
}

/// Euclidean projection of every sample slice onto `{‖δ_b‖_F ≤ ε}`.
pub fn project(delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return contract(format!("epsilon must be non-negative, got {epsilon}"));
    }
    let mut out = delta.clone();
    let samples = delta.shape().first().copied().unwrap_or(0);
    if samples == 0 || out.numel() == 0 {
        return Ok(out);
    }
    let slice = out.numel() / samples;
    for chunk in out.data_mut().chunks_mut(slice) {
        project_slice(chunk, epsilon);
    }
    Ok(out)
}

/// One PGD step: `Π_ε(δ_b + step · g_b / ‖g_b‖_F)` per sample, skipping
/// samples whose gradient norm is at most [`ZERO_GRAD_GUARD`].
pub fn ascent_step(
    delta: &Tensor,
    grad: &Tensor,
    adv_step_size: f64,
    epsilon: f64,
    row_mask: Option<&[f64]>,
) -> Result<Tensor> {
    if delta.shape() != grad.shape() {
        return Err(Error::Dimension {
            op: "ascent_step",
            lhs: delta.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !grad.is_finite() {
        return Err(Error::NumericDomain { op: "ascent_step" });
    }
    let mut out = delta.clone();
    let samples = delta.shape().first().copied().unwrap_or(0);
    if samples == 0 || out.numel() == 0 {
        return Ok(out);
    }
    let slice = out.numel() / samples;
    let norms = frobenius_norm(grad, true);
    for (b, chunk) in out.data_mut().chunks_mut(slice).enumerate() {
        if norms[b] <= ZERO_GRAD_GUARD {
            continue;
        }
        let g = &grad.data()[b * slice..(b + 1) * slice];
        let step = adv_step_size / norms[b];
        for (d, gi) in chunk.iter_mut().zip(g) {
            *d += step * gi;
        }
    }
    apply_row_mask(&mut out, row_mask);
    project(&out, epsilon)
}

/// Adversarial deltas for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    /// `B×R×region_feat_dim`
    pub delta_img: Tensor,
    /// `B×T×hidden`
    pub delta_txt: Tensor,
    pub epsilon: f64,
    pub adv_step_size: f64,
    pub modality_mode: Modality,
    img_mask: Vec<f64>,
    txt_mask: Vec<f64>,
}

impl PerturbationState {
    /// Fresh deltas for `batch`; disabled modalities stay identically zero.
    pub fn init(
        batch: &MultimodalBatch,
        config: &ModelConfig,
        epsilon: f64,
        adv_step_size: f64,
        modality_mode: Modality,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(adv_step_size >= 0.0) || !adv_step_size.is_finite() {
            return contract(format!("adv_step_size must be finite and non-negative, got {adv_step_size}"));
        }
        let (b, t, r) = (batch.batch_size, batch.num_tokens, batch.num_regions);
        let img_shape = [b, r, config.region_feat_dim];
        let txt_shape = [b, t, config.hidden];
        let delta_img = if modality_mode.has_img() {
            init_delta(&img_shape, epsilon, Some(&batch.region_mask), rng)?
        } else {
            Tensor::zeros(img_shape)
        };
        let delta_txt = if modality_mode.has_txt() {
            init_delta(&txt_shape, epsilon, Some(&batch.txt_mask), rng)?
        } else {
            Tensor::zeros(txt_shape)
        };
        Ok(Self {
            delta_img,
            delta_txt,
            epsilon,
            adv_step_size,
            modality_mode,
            img_mask: batch.region_mask.clone(),
            txt_mask: batch.txt_mask.clone(),
        })
    }

    pub fn step_img(&mut self, grad: &Tensor) -> Result<()> {
        if !self.modality_mode.has_img() {
            return contract("image perturbation is disabled");
        }
        self.delta_img = ascent_step(
            &self.delta_img,
            grad,
            self.adv_step_size,
            self.epsilon,
            Some(&self.img_mask),
        )?;
        Ok(())
    }

    pub fn step_txt(&mut self, grad: &Tensor) -> Result<()> {
        if !self.modality_mode.has_txt() {
            return contract("text perturbation is disabled");
        }
        self.delta_txt = ascent_step(
            &self.delta_txt,
            grad,
            self.adv_step_size,
            self.epsilon,
            Some(&self.txt_mask),
        )?;
        Ok(())
    }

    pub fn mean_norm_img(&self) -> f64 {
        mean(&frobenius_norm(&self.delta_img, true))
    }

    pub fn mean_norm_txt(&self) -> f64 {
        mean(&frobenius_norm(&self.delta_txt, true))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn init_with_zero_epsilon_is_zero() {
        let d = init_delta(&[2, 3, 4], 0.0, None, &mut seeded(1)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_scaled_entry_bound() {
        let d = init_delta(&[5, 8, 8], 1.0, None, &mut seeded(2)).unwrap();
        assert!(d.data().iter().all(|v| v.abs() <= 0.125));
        assert!(frobenius_norm(&d, true).iter().all(|&n| n <= 1.0));
        assert!(d.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_deterministic_and_masks_rows() {
        let mask = [1.0, 0.0, 1.0, 1.0];
        let a = init_delta(&[2, 2, 3], 0.5, Some(&mask), &mut seeded(3)).unwrap();
        let b = init_delta(&[2, 2, 3], 0.5, Some(&mask), &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.data()[3..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ascent_closed_form() {
        let delta = Tensor::zeros([1, 2, 2]);
        let grad = t(&[1, 2, 2], &[0.0, 3.0, 4.0, 0.0]);
        let out = ascent_step(&delta, &grad, 0.1, 1.0, None).unwrap();
        let want = [0.0, 0.06, 0.08, 0.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_delta_unchanged() {
        let delta = t(&[1, 2], &[0.1, -0.2]);
        let out = ascent_step(&delta, &Tensor::zeros([1, 2]), 0.5, 1.0, None).unwrap();
        assert_eq!(out, delta);
    }

    #[test]
    fn radial_step_stays_on_sphere() {
        let delta = t(&[1, 2], &[0.6, 0.8]);
        let grad = t(&[1, 2], &[3.0, 4.0]);
        let out = ascent_step(&delta, &grad, 0.3, 1.0, None).unwrap();
        assert!((frobenius_norm(&out, true)[0] - 1.0).abs() < 1e-12);
        assert!((out.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let delta = Tensor::zeros([1, 2]);
        let grad = t(&[1, 2], &[f64::NAN, 0.0]);
        assert!(matches!(
            ascent_step(&delta, &grad, 0.1, 1.0, None),
            Err(Error::NumericDomain { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        let d = t(&[1, 2], &[3.0, 4.0]);
        assert_eq!(project(&d, 5.0).unwrap(), d);
        assert_eq!(project(&d, 2.5).unwrap().data(), &[1.5, 2.0]);
        assert_eq!(project(&Tensor::zeros([2, 3]), 0.7).unwrap(), Tensor::zeros([2, 3]));
    }

    #[test]
    fn projection_is_per_sample() {
        let d = t(&[2, 2], &[3.0, 4.0, 0.3, 0.4]);
        let p = project(&d, 1.0).unwrap();
        assert!((frobenius_norm(&p, true)[0] - 1.0).abs() < 1e-12);
        assert_eq!(&p.data()[2..], &[0.3, 0.4]);
    }

    #[test]
    fn disabled_modality_cannot_step() {
        use crate::model::{collate, Sample, SampleLabels, CLS};
        let cfg = ModelConfig {
            region_feat_dim: 2,
            hidden: 4,
            num_heads: 2,
            ..ModelConfig::default()
        };
        let s = Sample {
            img_feats: vec![vec![1.0, 0.0]],
            boxes: vec![[0.0, 0.0, 1.0, 1.0]],
            tokens: vec![CLS, 4],
            labels: SampleLabels {
                itm: Some(1),
                ..Default::default()
            },
        };
        let batch = collate(&[s], 2).unwrap();
        let mut st = PerturbationState::init(&batch, &cfg, 0.5, 0.1, Modality::Txt, &mut seeded(4)).unwrap();
        assert!(st.delta_img.data().iter().all(|&v| v == 0.0));
        assert!(st.step_img(&Tensor::zeros([1, 1, 2])).is_err());
        st.step_txt(&Tensor::full([1, 2, 4], 1.0)).unwrap();
        assert!(st.mean_norm_txt() <= 0.5 + 1e-9);
    }

    /// 1000 random init/ascent/project sequences never leave the ball.
    #[test]
    fn fuzzed_sequences_stay_in_ball() {
        let mut rng = seeded(99);
        for _ in 0..1000 {
            let b = rng.gen_range(1..4);
            let p = rng.gen_range(1..5);
            let w = rng.gen_range(1..6);
            let eps: f64 = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(1e-3..3.0) };
            let mask: Vec<f64> = (0..b * p).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
            let mut delta = init_delta(&[b, p, w], eps, Some(&mask), &mut rng).unwrap();
            for _ in 0..rng.gen_range(1..8) {
                if rng.gen_bool(0.7) {
                    let scale = 10f64.powf(rng.gen_range(-6.0..6.0));
                    let g: Vec<f64> = (0..b * p * w).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
                    let step = rng.gen_range(0.0..2.0) * eps.max(1e-3);
                    delta = ascent_step(&delta, &t(&[b, p, w], &g), step, eps, Some(&mask)).unwrap();
                } else {
                    delta = project(&delta, eps).unwrap();
                }
                for n in frobenius_norm(&delta, true) {
                    assert!(n <= eps + 1e-9, "norm {n} > eps {eps}");
                }
                for (row, &m) in delta.data().chunks(w).zip(&mask) {
                    if m == 0.0 {
                        assert!(row.iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..4, 1usize..6).prop_flat_map(|(b, w)| {
            prop::collection::vec(-10.0f64..10.0, b * w).prop_map(move |v| Tensor::new([b, w], v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(d in tensor_strategy(), eps in 0.0f64..5.0) {
            let once = project(&d, eps).unwrap();
            let twice = project(&once, eps).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn zero_step_is_identity(d in tensor_strategy(), eps in 0.0f64..5.0) {
            let start = project(&d, eps).unwrap();
            let g = d.map(|v| v.sin() + 0.5);
            let out = ascent_step(&start, &g, 0.0, eps, None).unwrap();
            prop_assert_eq!(out, start);
        }

        #[test]
        fn gradient_scale_is_irrelevant(
            d in tensor_strategy(),
            eps in 0.01f64..5.0,
            step in 0.0f64..1.0,
            c in 1e-3f64..1e3,
        ) {
            let start = project(&d, eps).unwrap();
            let g = d.map(|v| v.cos() - 0.3);
            let a = ascent_step(&start, &g, step, eps, None).unwrap();
            let b = ascent_step(&start, &g.map(|v| v * c), step, eps, None).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }
}

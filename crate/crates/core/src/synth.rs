//! Synthetic concept world producing paired region features and captions.
//!
//! Each concept owns a unit-norm prototype feature vector and a vocabulary
//! token. An image is a bag of noisy prototypes; its caption names some of
//! the depicted concepts. Pre-training tasks (MLM, ITM) and a counting
//! question task are derived from these pairs.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{collate, ModelConfig, MultimodalBatch, Sample, SampleLabels, Task, CLS, FIRST_WORD, MASK};
use crate::rng::{derive, stream};

pub const MASK_PROB: f64 = 0.15;
pub const ITM_NEGATIVE_PROB: f64 = 0.5;
/// Number of answer classes of the counting question (0, 1, 2, 3+).
pub const COUNT_CLASSES: usize = 4;
const MIN_REGIONS: usize = 3;
const MAX_FILLERS: usize = 2;
const MAX_PROTOTYPE_DRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_concepts: usize,
    pub region_feat_dim: usize,
    pub noise_sigma: f64,
    /// `num_concepts` unit vectors of length `region_feat_dim`
    pub prototypes: Vec<Vec<f64>>,
    pub concept_tokens: Vec<usize>,
    pub question_token: usize,
    pub filler_tokens: Vec<usize>,
    pub max_tokens: usize,
    pub max_regions: usize,
    pub seed: u64,
}

/// A generated image-caption pair before any task labels are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub img_feats: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub tokens: Vec<usize>,
    pub region_concepts: Vec<usize>,
}

impl WorldSpec {
    /// Draws prototypes for a world compatible with `config`.
    pub fn new(config: &ModelConfig, num_concepts: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_concepts < 2 {
            return Err(Error::Config("a world needs at least two concepts".into()));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {noise_sigma}")));
        }
        let question_token = FIRST_WORD + num_concepts;
        if question_token + 1 >= config.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} is too small for {num_concepts} concepts plus question and filler tokens",
                config.vocab_size
            )));
        }
        if config.max_tokens < 3 {
            return Err(Error::Config("max_tokens must be at least 3".into()));
        }
        if config.num_answers != COUNT_CLASSES {
            return Err(Error::Config(format!("the counting task needs num_answers = {COUNT_CLASSES}")));
        }
        let d = config.region_feat_dim;
        let mut rng = derive(seed, stream::WORLD, 0);
        let margin = 4.0 * noise_sigma;
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(num_concepts);
        let mut draws = 0;
        while prototypes.len() < num_concepts {
            draws += 1;
            if draws > MAX_PROTOTYPE_DRAWS {
                return Err(Error::Config(format!(
                    "could not place {num_concepts} prototypes in {d} dimensions with separation > {margin}"
                )));
            }
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            if prototypes.iter().all(|p| distance(p, &v) > margin) {
                prototypes.push(v);
            }
        }
        Ok(Self {
            num_concepts,
            region_feat_dim: d,
            noise_sigma,
            prototypes,
            concept_tokens: (0..num_concepts).map(|c| FIRST_WORD + c).collect(),
            question_token,
            filler_tokens: (question_token + 1..config.vocab_size).collect(),
            max_tokens: config.max_tokens,
            max_regions: config.max_regions,
            seed,
        })
    }

    pub fn default_for(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, 16, 0.1, seed)
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.prototypes.iter().enumerate() {
            for b in &self.prototypes[i + 1..] {
                best = best.min(distance(a, b));
            }
        }
        best
    }

    pub fn concept_of_token(&self, token: usize) -> Option<usize> {
        token
            .checked_sub(FIRST_WORD)
            .filter(|&c| c < self.num_concepts)
    }

    /// Index of the closest prototype to `feat`.
    pub fn nearest_concept(&self, feat: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (c, p) in self.prototypes.iter().enumerate() {
            let d = distance(p, feat);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    fn region_count_range(&self) -> (usize, usize) {
        let hi = self.max_regions.min(8);
        (MIN_REGIONS.min(hi), hi)
    }

    fn region(&self, concept: usize, rng: &mut impl Rng) -> (Vec<f64>, [f64; 4]) {
        let noise = Normal::new(0.0, self.noise_sigma).expect("sigma validated at construction");
        let feat = self.prototypes[concept]
            .iter()
            .map(|&p| if self.noise_sigma == 0.0 { p } else { p + noise.sample(rng) })
            .collect();
        let (x1, x2) = ordered(rng.gen(), rng.gen());
        let (y1, y2) = ordered(rng.gen(), rng.gen());
        (feat, [x1, y1, x2, y2])
    }

    fn image(&self, concepts: Vec<usize>, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<[f64; 4]>, Vec<usize>) {
        let (feats, boxes) = concepts.iter().map(|&c| self.region(c, rng)).unzip();
        (feats, boxes, concepts)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Samples an image of 3 to 8 noisy concept regions and a caption naming a
/// non-empty subset of the depicted concepts, padded with filler words.
pub fn gen_pair(world: &WorldSpec, rng: &mut impl Rng) -> Pair {
    let (lo, hi) = world.region_count_range();
    let r = rng.gen_range(lo..=hi);
    let concepts: Vec<usize> = (0..r).map(|_| rng.gen_range(0..world.num_concepts)).collect();
    let (img_feats, boxes, region_concepts) = world.image(concepts, rng);

    let mut distinct = region_concepts.clone();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.shuffle(rng);
    let budget = world.max_tokens - 1;
    let named = rng.gen_range(1..=distinct.len().min(budget));
    let fillers = rng.gen_range(0..=MAX_FILLERS.min(budget - named));
    let mut words: Vec<usize> = distinct[..named].iter().map(|&c| world.concept_tokens[c]).collect();
    for _ in 0..fillers {
        words.push(*world.filler_tokens.choose(rng).expect("world has filler tokens"));
    }
    words.shuffle(rng);
    let mut tokens = Vec::with_capacity(words.len() + 1);
    tokens.push(CLS);
    tokens.extend(words);
    Pair {
        img_feats,
        boxes,
        tokens,
        region_concepts,
    }
}

pub fn gen_pretrain_batch(world: &WorldSpec, batch_size: usize, task: Task, rng: &mut impl Rng) -> Result<MultimodalBatch> {
    gen_pretrain_batch_with(world, batch_size, task, MASK_PROB, rng)
}

/// As [`gen_pretrain_batch`] with an explicit MLM mask probability.
///
/// An MLM batch always carries at least one prediction site: if the coin
/// flips mask nothing, one maskable token is chosen uniformly and masked.
pub fn gen_pretrain_batch_with(
    world: &WorldSpec,
    batch_size: usize,
    task: Task,
    mask_prob: f64,
    rng: &mut impl Rng,
) -> Result<MultimodalBatch> {
    if batch_size == 0 {
        return contract("batch_size must be positive");
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return contract(format!("mask probability {mask_prob} outside [0, 1]"));
    }
    let pairs: Vec<Pair> = (0..batch_size).map(|_| gen_pair(world, rng)).collect();
    let samples = match task {
        Task::Mlm => {
            let mut samples: Vec<Sample> = Vec::with_capacity(batch_size);
            let mut any = false;
            for p in pairs {
                let mut tokens = p.tokens;
                let mut targets = vec![-1i64; tokens.len()];
                for j in 1..tokens.len() {
                    if rng.gen_bool(mask_prob) {
                        targets[j] = tokens[j] as i64;
                        tokens[j] = MASK;
                        any = true;
                    }
                }
                samples.push(Sample {
                    img_feats: p.img_feats,
                    boxes: p.boxes,
                    tokens,
                    labels: SampleLabels {
                        mlm_targets: Some(targets),
                        ..Default::default()
                    },
                });
            }
            if !any {
                let sites: Vec<(usize, usize)> = samples
                    .iter()
                    .enumerate()
                    .flat_map(|(i, s)| (1..s.tokens.len()).map(move |j| (i, j)))
                    .collect();
                if let Some(&(i, j)) = sites.choose(rng) {
                    let s = &mut samples[i];
                    s.labels.mlm_targets.as_mut().unwrap()[j] = s.tokens[j] as i64;
                    s.tokens[j] = MASK;
                }
            }
            samples
        }
        Task::Itm => {
            if batch_size < 2 {
                return contract("ITM batches need at least two samples");
            }
            let captions: Vec<Vec<usize>> = pairs.iter().map(|p| p.tokens.clone()).collect();
            pairs
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let (tokens, label) = if rng.gen_bool(ITM_NEGATIVE_PROB) {
                        let mut j = rng.gen_range(0..batch_size - 1);
                        if j >= i {
                            j += 1;
                        }
                        (captions[j].clone(), 0)
                    } else {
                        (p.tokens, 1)
                    };
                    Sample {
                        img_feats: p.img_feats,
                        boxes: p.boxes,
                        tokens,
                        labels: SampleLabels {
                            itm: Some(label),
                            ..Default::default()
                        },
                    }
                })
                .collect()
        }
        Task::Answer => return contract("use gen_downstream_batch for the answer task"),
    };
    collate(&samples, world.region_feat_dim)
}

/// Counting question `[CLS] Q <concept>` with label `min(count, 3)`.
///
/// The target class is drawn uniformly first; images whose regions show
/// the queried concept with probability 1/2 are then rejection-sampled
/// until their count lands in that class.
pub fn gen_downstream_sample(world: &WorldSpec, rng: &mut impl Rng) -> Sample {
    let class = rng.gen_range(0..COUNT_CLASSES);
    let concept = rng.gen_range(0..world.num_concepts);
    let (lo, hi) = world.region_count_range();
    let concepts = loop {
        let r = rng.gen_range(lo..=hi);
        let concepts: Vec<usize> = (0..r)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    concept
                } else {
                    let mut o = rng.gen_range(0..world.num_concepts - 1);
                    if o >= concept {
                        o += 1;
                    }
                    o
                }
            })
            .collect();
        if count_class(&concepts, concept) == class {
            break concepts;
        }
    };
    let (img_feats, boxes, _) = world.image(concepts, rng);
    Sample {
        img_feats,
        boxes,
        tokens: vec![CLS, world.question_token, world.concept_tokens[concept]],
        labels: SampleLabels {
            answer: Some(class),
            ..Default::default()
        },
    }
}

fn count_class(concepts: &[usize], query: usize) -> usize {
    concepts.iter().filter(|&&c| c == query).count().min(COUNT_CLASSES - 1)
}

pub fn gen_downstream_batch(world: &WorldSpec, batch_size: usize, rng: &mut impl Rng) -> Result<MultimodalBatch> {
    if batch_size == 0 {
        return contract("batch_size must be positive");
    }
    let samples: Vec<Sample> = (0..batch_size).map(|_| gen_downstream_sample(world, rng)).collect();
    collate(&samples, world.region_feat_dim)
}

/// `n` downstream samples, sample `i` drawn from its own stream so the
/// result does not depend on generation order.
pub fn gen_downstream_dataset(world: &WorldSpec, n: usize, seed: u64, stream: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| gen_downstream_sample(world, &mut derive(seed, stream, i as u64)))
        .collect()
}

/// Predicts the counting label from region features alone by assigning each
/// region to its nearest prototype.
pub fn nearest_prototype_answer(world: &WorldSpec, sample: &Sample) -> Option<usize> {
    let query = sample.tokens.iter().rev().find_map(|&t| world.concept_of_token(t))?;
    let concepts: Vec<usize> = sample.img_feats.iter().map(|f| world.nearest_concept(f)).collect();
    Some(count_class(&concepts, query))
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

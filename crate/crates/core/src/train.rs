//! Siamese training: alternating positive/negative pair sampling, contrastive
//! plus per-branch classification loss, SGD with momentum.
//!
//! Both branches run on one tape against the same parameter leaves, so weight
//! sharing is structural. The classification terms are differentiated through
//! the tape; the contrastive term is seeded directly on the two descriptor
//! nodes and composes additively in the same backward pass.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::autograd::{Phase, Tape, Tid};
use crate::error::{Error, Result};
use crate::model::{sequence_input, Model, ModelConfig, DESC_DIM};
use crate::preprocess::{augment, sample_subsequence, SequenceSample};
use crate::rng::RngStream;
use crate::tensor::{l2_distance, FeatureMap};

/// Dropout rate on the descriptor heads.
pub const DEFAULT_DROPOUT: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Consecutive frames presented per branch.
    pub seq_len: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Contrastive margin for negative pairs.
    pub margin: f64,
    /// Attentive filters K.
    pub filters: usize,
    /// Refinement steps T.
    pub refine_steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic ones).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1500,
            seq_len: 16,
            lr: 1e-3,
            momentum: 0.9,
            margin: 2.0,
            filters: 3,
            refine_steps: 10,
            seed: 0,
            checkpoint_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train", "epochs must be >= 1"));
        }
        if self.seq_len == 0 {
            return Err(Error::invalid("train", "seq_len must be >= 1"));
        }
        if self.margin <= 0.0 {
            return Err(Error::invalid("train", "margin must be positive"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::invalid("train", "lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train", "momentum must be in [0,1)"));
        }
        Ok(())
    }

    pub fn model_config(&self, identities: usize) -> ModelConfig {
        ModelConfig {
            filters: self.filters,
            refine_steps: self.refine_steps,
            identities,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

/// One identity of the training split: both camera sequences, prepared at
/// source resolution (augmentation crops them to network size per draw).
pub struct TrainIdentity {
    pub person_id: usize,
    /// Class index within the training split.
    pub label: usize,
    pub cam1: SequenceSample,
    pub cam2: SequenceSample,
}

pub struct TrainSet {
    pub identities: Vec<TrainIdentity>,
}

impl TrainSet {
    pub fn validate(&self) -> Result<()> {
        if self.identities.len() < 2 {
            return Err(Error::invalid("train", "need at least 2 training identities"));
        }
        for (i, id) in self.identities.iter().enumerate() {
            if id.label != i {
                return Err(Error::invalid(
                    "train",
                    format!("identity {} has label {}, expected {}", id.person_id, id.label, i),
                ));
            }
            if id.cam1.person_id != id.person_id || id.cam2.person_id != id.person_id {
                return Err(Error::invalid(
                    "train",
                    format!("identity {} has sequences with a different person_id", id.person_id),
                ));
            }
            if id.cam1.camera_id == id.cam2.camera_id {
                return Err(Error::invalid(
                    "train",
                    format!("identity {} has both sequences from camera {}", id.person_id, id.cam1.camera_id),
                ));
            }
            if id.cam1.is_empty() || id.cam2.is_empty() {
                return Err(Error::invalid("train", format!("identity {} has an empty sequence", id.person_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Parity {
    Positive,
    Negative,
}

/// Pair presentation order within an epoch: strictly alternating, positive
/// first, so positive and negative counts never differ by more than one.
pub fn epoch_parities(count: usize) -> impl Iterator<Item = Parity> {
    (0..count).map(|i| if i % 2 == 0 { Parity::Positive } else { Parity::Negative })
}

/// One training pair, already augmented and cut to the training length.
pub struct PairBatch {
    pub seq_a: SequenceSample,
    pub seq_b: SequenceSample,
    pub same_person: bool,
    pub label_a: usize,
    pub label_b: usize,
}

impl PairBatch {
    pub fn new(
        seq_a: SequenceSample,
        seq_b: SequenceSample,
        same_person: bool,
        label_a: usize,
        label_b: usize,
    ) -> Result<Self> {
        if same_person {
            if seq_a.person_id != seq_b.person_id {
                return Err(Error::invalid("pair", "positive pair with different person_id"));
            }
            if seq_a.camera_id == seq_b.camera_id {
                return Err(Error::invalid("pair", "positive pair from a single camera"));
            }
        } else if seq_a.person_id == seq_b.person_id {
            return Err(Error::invalid("pair", "negative pair with equal person_id"));
        }
        Ok(PairBatch { seq_a, seq_b, same_person, label_a, label_b })
    }
}

/// Draws one pair. Positive: a random identity's two camera sequences.
/// Negative: two distinct identities, one sequence each, opposite cameras.
/// Each side is then augmented (whole-sequence crop + mirror) and cut to
/// `seq_len` consecutive frames.
pub fn sample_pair(
    set: &TrainSet,
    parity: Parity,
    seq_len: usize,
    rng: &mut RngStream,
) -> Result<PairBatch> {
    let p = set.identities.len();
    if p < 2 {
        return Err(Error::invalid("sample_pair", "need at least 2 identities"));
    }
    let (full_a, full_b, same, label_a, label_b) = match parity {
        Parity::Positive => {
            let i = rng.below(p as u64) as usize;
            let id = &set.identities[i];
            (&id.cam1, &id.cam2, true, id.label, id.label)
        }
        Parity::Negative => {
            let i = rng.below(p as u64) as usize;
            let mut j = rng.below(p as u64 - 1) as usize;
            if j >= i {
                j += 1;
            }
            let (a, b) = (&set.identities[i], &set.identities[j]);
            if rng.bernoulli(0.5) {
                (&a.cam1, &b.cam2, false, a.label, b.label)
            } else {
                (&a.cam2, &b.cam1, false, a.label, b.label)
            }
        }
    };
    let side = |full: &SequenceSample, rng: &mut RngStream| -> Result<SequenceSample> {
        let aug = augment(full, rng)?;
        Ok(sample_subsequence(&aug, seq_len, rng))
    };
    let seq_a = side(full_a, rng)?;
    let seq_b = side(full_b, rng)?;
    PairBatch::new(seq_a, seq_b, same, label_a, label_b)
}

/// Squared-distance form: d^2 for a positive pair, hinge max(0, m-d)^2 for a
/// negative one.
pub fn contrastive_loss(d: f64, same: bool, margin: f64) -> f64 {
    debug_assert!(!(d < 0.0));
    if same {
        d * d
    } else {
        let gap = margin - d;
        if gap > 0.0 {
            gap * gap
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub class_a: f64,
    pub class_b: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, class_a: f64, class_b: f64) -> Self {
        LossBreakdown { contrastive, class_a, class_b, total: contrastive + class_a + class_b }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

pub struct TrainOutput {
    pub model: Model,
    pub trace: Vec<EpochLoss>,
}

struct PairGraph {
    tape: Tape,
    desc_a: Tid,
    desc_b: Tid,
    ce_a: Tid,
    ce_b: Tid,
}

fn build_pair_graph(
    model: &Model,
    pair: &PairBatch,
    phase: Phase,
    rng: &mut RngStream,
) -> Result<PairGraph> {
    let mut tape = Tape::new();
    let tp = model.tape_params(&mut tape);
    let input_a = sequence_input(&pair.seq_a)?;
    let input_b = sequence_input(&pair.seq_b)?;
    let branch_a = model.build_branch(&mut tape, &tp, &input_a, phase, rng)?;
    let branch_b = model.build_branch(&mut tape, &tp, &input_b, phase, rng)?;
    let ce_a = tape.softmax_cross_entropy(branch_a.logits, pair.label_a)?;
    let ce_b = tape.softmax_cross_entropy(branch_b.logits, pair.label_b)?;
    Ok(PairGraph { tape, desc_a: branch_a.descriptor, desc_b: branch_b.descriptor, ce_a, ce_b })
}

/// Total pair loss as a plain number (eval phase); the function the gradient
/// check differentiates.
pub fn pair_loss_value(model: &Model, pair: &PairBatch, margin: f64) -> Result<f64> {
    let mut rng = RngStream::new(0);
    let g = build_pair_graph(model, pair, Phase::Eval, &mut rng)?;
    let da = &g.tape.value(g.desc_a).data;
    let db = &g.tape.value(g.desc_b).data;
    let d = l2_distance(da, db);
    let lb = LossBreakdown::new(
        contrastive_loss(d, pair.same_person, margin),
        g.tape.value(g.ce_a).item(),
        g.tape.value(g.ce_b).item(),
    );
    Ok(lb.total)
}

pub struct Trainer {
    pub model: Model,
    cfg: TrainConfig,
    rng_pairs: RngStream,
    rng_dropout: RngStream,
    steps: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, identities: usize) -> Result<Trainer> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(identities), cfg.seed)?;
        let root = RngStream::new(cfg.seed);
        Ok(Trainer {
            model,
            rng_pairs: root.fork("pairs"),
            rng_dropout: root.fork("dropout"),
            cfg,
            steps: 0,
        })
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn sample_pair(&mut self, set: &TrainSet, parity: Parity) -> Result<PairBatch> {
        sample_pair(set, parity, self.cfg.seq_len, &mut self.rng_pairs)
    }

    /// Forward both branches, compute the breakdown, and add this pair's
    /// gradients onto the parameter accumulators (no optimizer step).
    pub fn accumulate_pair_gradients(&mut self, pair: &PairBatch, phase: Phase) -> Result<LossBreakdown> {
        let graph = build_pair_graph(&self.model, pair, phase, &mut self.rng_dropout)?;
        let da = graph.tape.value(graph.desc_a).data.clone();
        let db = graph.tape.value(graph.desc_b).data.clone();
        let d = l2_distance(&da, &db);
        let contrastive = contrastive_loss(d, pair.same_person, self.cfg.margin);

        let mut seed_a = vec![0.0; DESC_DIM];
        if pair.same_person {
            for (s, (x, y)) in seed_a.iter_mut().zip(da.iter().zip(&db)) {
                *s = 2.0 * (x - y);
            }
        } else if d < self.cfg.margin {
            let coef = -2.0 * (self.cfg.margin - d) / d.max(1e-12);
            for (s, (x, y)) in seed_a.iter_mut().zip(da.iter().zip(&db)) {
                *s = coef * (x - y);
            }
        }

        let one = FeatureMap::scalar(1.0);
        let mut seeds = vec![(graph.ce_a, one.clone()), (graph.ce_b, one)];
        if seed_a.iter().any(|v| *v != 0.0) {
            let seed_b: Vec<f64> = seed_a.iter().map(|v| -v).collect();
            seeds.push((graph.desc_a, FeatureMap::matrix(1, DESC_DIM, seed_a).unwrap()));
            seeds.push((graph.desc_b, FeatureMap::matrix(1, DESC_DIM, seed_b).unwrap()));
        }
        let grads = graph.tape.backward(&seeds)?;
        graph.tape.harvest_param_grads(&grads, &mut self.model.params);

        Ok(LossBreakdown::new(
            contrastive,
            graph.tape.value(graph.ce_a).item(),
            graph.tape.value(graph.ce_b).item(),
        ))
    }

    /// One SGD step on one pair; errors (without stepping) if the loss is not
    /// finite.
    pub fn train_step(&mut self, pair: &PairBatch, phase: Phase) -> Result<LossBreakdown> {
        self.model.params.zero_grads();
        let lb = self.accumulate_pair_gradients(pair, phase)?;
        self.steps += 1;
        if !lb.total.is_finite() {
            return Err(Error::NonFinite {
                context: "train_step".into(),
                detail: format!(
                    "loss {} at step {} (contrastive {}, class_a {}, class_b {})",
                    lb.total, self.steps, lb.contrastive, lb.class_a, lb.class_b
                ),
            });
        }
        self.model.params.sgd_step(self.cfg.lr, self.cfg.momentum)?;
        Ok(lb)
    }
}

/// Full training run: `epochs` epochs of 2P alternating pairs (P = training
/// identities). With an output directory, writes the model manifest, a
/// per-epoch `loss.csv`, periodic checkpoints, and `final.ckpt`.
pub fn train(set: &TrainSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    set.validate()?;
    let mut trainer = Trainer::new(cfg.clone(), set.identities.len())?;

    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            trainer.model.write_manifest(&dir.join("model.manifest"))?;
            let mut f = File::create(dir.join("loss.csv"))?;
            writeln!(f, "epoch,contrastive,class_a,class_b,total")?;
            Some(f)
        }
        None => None,
    };

    let pair_count = 2 * set.identities.len();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 3];
        let parities: Vec<Parity> = epoch_parities(pair_count).collect();
        for parity in parities {
            let pair = trainer.sample_pair(set, parity)?;
            let lb = trainer.train_step(&pair, Phase::Train)?;
            sums[0] += lb.contrastive;
            sums[1] += lb.class_a;
            sums[2] += lb.class_b;
        }
        let n = pair_count as f64;
        let mean = LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n);
        trace.push(EpochLoss { epoch, mean });
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{},{},{},{},{}", epoch, mean.contrastive, mean.class_a, mean.class_b, mean.total)?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                trainer.model.save_checkpoint(&dir.join(format!("epoch_{epoch:05}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.model.save_checkpoint(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutput { model: trainer.into_model(), trace })
}

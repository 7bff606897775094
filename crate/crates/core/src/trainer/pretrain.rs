//! Self-supervised pretraining with a fixed step budget.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Objective, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::corpus::{sample_triplets, DocumentRecord, StoryCluster, TripletOptions};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::{Component, Example, Model};
use crate::objectives::{captioning_loss_forward, info_nce_forward, triplet_loss_forward};
use crate::optim::AdamW;
use crate::params::Forward;

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Training units: example indices, or (anchor, positive, negative) triples.
enum Units {
    Single(Vec<usize>),
    Triple(Vec<[usize; 3]>),
}

impl Units {
    fn len(&self) -> usize {
        match self {
            Units::Single(v) => v.len(),
            Units::Triple(v) => v.len(),
        }
    }
}

fn prepare(model: &Model, records: &[DocumentRecord], examples: &[Example], cfg: &TrainConfig) -> Result<Units> {
    let objective = cfg.objective;
    if objective == Objective::Classify {
        return Err(Error::Config("classify is the fine-tuning objective, not a pretraining one".into()));
    }
    let used = model.config.classifier_components();
    if !objective.updates().iter().any(|c| used.contains(c) && cfg.trainable_components.contains(c)) {
        return Err(Error::Incompatible(format!(
            "{objective} pretraining updates none of the trainable components the {:?}/{:?} classifier reads",
            model.config.kind, model.config.fusion.method
        )));
    }
    match objective {
        Objective::Classify => unreachable!("rejected above"),
        Objective::Infonce | Objective::Captioning => {
            let with_caption: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].caption.is_some()).collect();
            let needed = if objective == Objective::Infonce { 2 } else { 1 };
            if with_caption.len() < needed {
                return Err(Error::Incompatible(format!(
                    "{objective} needs at least {needed} records with usable captions, found {}",
                    with_caption.len()
                )));
            }
            Ok(Units::Single(with_caption))
        }
        Objective::Triplet => {
            let clusters = StoryCluster::from_records(records);
            let options = TripletOptions { cross_cluster_negatives: cfg.cross_cluster_negatives };
            let index: HashMap<&str, usize> = examples.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
            let triples: Vec<[usize; 3]> = sample_triplets(&clusters, cfg.seed, options)
                .iter()
                .map(|t| [index[t.anchor.as_str()], index[t.positive.as_str()], index[t.negative.as_str()]])
                .collect();
            if triples.is_empty() {
                return Err(Error::Incompatible("no story cluster yields a triplet".into()));
            }
            Ok(Units::Triple(triples))
        }
    }
}

/// Prefixes of every component the objective must leave untouched.
fn frozen_prefixes(objective: Objective, trainable: &[Component]) -> Vec<String> {
    let updated: Vec<Component> =
        objective.updates().iter().copied().filter(|c| trainable.contains(c)).chain(objective.auxiliary()).collect();
    Component::ALL.into_iter().filter(|c| !updated.contains(c)).flat_map(|c| c.prefixes().iter().map(|p| p.to_string())).collect()
}

fn step_loss(model: &Model, f: &mut Forward, examples: &[Example], units: &Units, batch: &[usize], cfg: &TrainConfig) -> Result<Var> {
    match units {
        Units::Single(ids) => {
            let refs: Vec<&Example> = batch.iter().map(|&b| &examples[ids[b]]).collect();
            match cfg.objective {
                Objective::Infonce => {
                    let (t, i, log_tau) = model.contrastive_forward(f, &refs)?;
                    Ok(info_nce_forward(&mut f.g, t, i, log_tau))
                }
                Objective::Captioning => {
                    let memory = model.encode_images(f, &refs)?;
                    let captions = refs.iter().map(|e| model.caption_ids(e)).collect::<Result<Vec<_>>>()?;
                    captioning_loss_forward(f, &model.config.caption, memory.states, &memory.spans, &captions)
                }
                other => unreachable!("{other} does not use single-example units"),
            }
        }
        Units::Triple(triples) => {
            let n = batch.len();
            let refs: Vec<&Example> = (0..3).flat_map(|k| batch.iter().map(move |&b| &examples[triples[b][k]])).collect();
            let mut joint = model.joint_forward(f, &refs)?;
            if cfg.triplet.normalize {
                joint = f.g.l2_normalize_rows(joint);
            }
            let a = f.g.select_rows(joint, &(0..n).collect::<Vec<_>>());
            let p = f.g.select_rows(joint, &(n..2 * n).collect::<Vec<_>>());
            let ng = f.g.select_rows(joint, &(2 * n..3 * n).collect::<Vec<_>>());
            let total = triplet_loss_forward(&mut f.g, a, p, ng, cfg.triplet.margin);
            Ok(f.g.scale(total, 1.0 / n as f64))
        }
    }
}

/// Runs exactly `cfg.pretrain_steps` optimizer steps of `cfg.objective`.
/// Batches cycle through reshuffled passes over the training units.
pub fn pretrain(records: &[DocumentRecord], mut model: Model, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let examples = model.featurize(records)?;
    let units = prepare(&model, records, &examples, cfg)?;
    let frozen = frozen_prefixes(cfg.objective, &cfg.trainable_components);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer());
    let batch_size = cfg.batch_size.min(units.len());
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    for _ in 0..cfg.pretrain_steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let dropout_seed: u64 = rng.gen();
        let (loss, mut grads) = {
            let mut f = Forward::train(&model.params, dropout_seed).freeze(&frozen);
            let loss = step_loss(&model, &mut f, &examples, &units, batch, cfg)?;
            (f.value(loss).get(0, 0), f.gradients(loss))
        };
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("{} loss became {loss}", cfg.objective)));
        }
        opt.step(&mut model.params, &mut grads);
        losses.push(loss);
    }
    Ok(PretrainOutcome { checkpoint: Checkpoint { model, final_loss: losses.last().copied() }, losses })
}

/// Runs `stages` in order, each for `cfg.pretrain_steps` steps with its own
/// derived seed and a fresh optimizer.
pub fn pretrain_stages(records: &[DocumentRecord], model: Model, cfg: &TrainConfig, stages: &[Objective]) -> Result<PretrainOutcome> {
    let mut outcome = PretrainOutcome { checkpoint: Checkpoint { model, final_loss: None }, losses: Vec::new() };
    for (k, &objective) in stages.iter().enumerate() {
        let stage_cfg = TrainConfig { objective, seed: cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), ..cfg.clone() };
        let next = pretrain(records, outcome.checkpoint.model, &stage_cfg)?;
        outcome.losses.extend(next.losses);
        outcome.checkpoint = next.checkpoint;
    }
    Ok(outcome)
}

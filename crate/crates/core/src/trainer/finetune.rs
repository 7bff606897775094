//! Supervised fine-tuning with early stopping on validation accuracy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run_epochs, EpochRecord, MetricsReport, TrainConfig};
use crate::corpus::DocumentRecord;
use crate::error::{Error, Result};
use crate::model::{Component, Example, Model};
use crate::objectives::classification_loss_forward;
use crate::optim::AdamW;
use crate::params::{Forward, ParameterSet};

const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Featurizes `records`, requiring a non-empty set whose every label is a
/// class of the model.
fn labelled(model: &Model, records: &[DocumentRecord], what: &str) -> Result<(Vec<Example>, Vec<usize>)> {
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("{what} split is empty")));
    }
    let examples = model.featurize(records)?;
    let gold = records
        .iter()
        .zip(&examples)
        .map(|(r, e)| {
            e.label.ok_or_else(|| {
                Error::Incompatible(format!("label {} of record {} is not a class of the {}-class model", r.label, r.id, model.n_classes()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((examples, gold))
}

/// Trains the classifier on `train`, scoring `val` accuracy after every
/// epoch, and returns the best-scoring parameters.
pub fn finetune(train: &[DocumentRecord], val: &[DocumentRecord], model: Model, cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (train_ex, train_gold) = labelled(&model, train, "train")?;
    let (val_ex, val_gold) = labelled(&model, val, "validation")?;
    let frozen: Vec<String> = Component::ALL
        .into_iter()
        .filter(|c| !cfg.trainable_components.contains(c))
        .flat_map(|c| c.prefixes().iter().map(|p| p.to_string()))
        .collect();

    struct State {
        model: Model,
        opt: AdamW,
        rng: ChaCha8Rng,
    }
    let mut state = State { model, opt: AdamW::new(cfg.optimizer()), rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let epoch = |s: &mut State, _e: usize| -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut s.rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = batch.iter().map(|&i| &train_ex[i]).collect();
            let gold: Vec<usize> = batch.iter().map(|&i| train_gold[i]).collect();
            let dropout_seed: u64 = s.rng.gen();
            let (loss, mut grads) = {
                let mut f = Forward::train(&s.model.params, dropout_seed).freeze(&frozen);
                let logits = s.model.logits_forward(&mut f, &refs)?;
                let loss = classification_loss_forward(&mut f.g, logits, &gold);
                (f.value(loss).get(0, 0), f.gradients(loss))
            };
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("classification loss became {loss}")));
            }
            s.opt.step(&mut s.model.params, &mut grads);
            loss_sum += loss * batch.len() as f64;
        }
        let predicted = s.model.predict(&val_ex, EVAL_BATCH)?;
        let correct = predicted.iter().zip(&val_gold).filter(|(p, g)| p == g).count();
        Ok((loss_sum / train_ex.len() as f64, correct as f64 / val_gold.len() as f64))
    };
    let out = run_epochs(&mut state, cfg.max_epochs, cfg.patience, epoch, |s: &State| s.model.params.clone())?;
    let best: ParameterSet = out.best;
    Ok(FinetuneOutcome {
        model: Model { config: state.model.config, params: best },
        history: out.history,
        best_epoch: out.best_epoch,
        stopped_early: out.stopped_early,
    })
}

/// Scores the model on labelled records with dropout off.
pub fn evaluate(model: &Model, records: &[DocumentRecord]) -> Result<MetricsReport> {
    let (examples, gold) = labelled(model, records, "evaluation")?;
    evaluate_examples(model, &examples, &gold)
}

pub fn evaluate_examples(model: &Model, examples: &[Example], gold: &[usize]) -> Result<MetricsReport> {
    let predicted = model.predict(examples, EVAL_BATCH)?;
    MetricsReport::from_predictions(model.config.scheme()?.class_names(), gold, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, relabel, LabelScheme, SyntheticConfig};
    use crate::encoders::EncoderConfig;
    use crate::fusion::{FusionConfig, FusionMethod};
    use crate::model::{ModelConfig, ModelKind};

    fn tiny(n_classes: usize) -> ModelConfig {
        let text = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            vocab_size: 128,
            dropout_rate: 0.0,
            ..EncoderConfig::text_default()
        };
        let image = EncoderConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            resolution: 16,
            patch_size: 4,
            window_size: 2,
            n_stages: 2,
            dropout_rate: 0.0,
            ..EncoderConfig::image_default()
        };
        let fusion = FusionConfig { method: FusionMethod::Concat, n_cross_layers: 1, d_joint: 8, n_classes, max_joint_len: 64 };
        ModelConfig {
            kind: ModelKind::Text,
            text,
            image,
            caption: EncoderConfig::caption_default(),
            fusion,
            image_mode: Default::default(),
        }
    }

    fn corpus(n: usize) -> Vec<DocumentRecord> {
        let cfg = SyntheticConfig { n_records: n, resolution: 16, signal_strength_text: 1.0, vocab_size: 120, ..Default::default() };
        generate_synthetic(&cfg).unwrap().records
    }

    #[test]
    fn learns_a_clean_text_signal() {
        let records = corpus(40);
        let model = Model::init(tiny(5), 1).unwrap();
        let cfg = TrainConfig { max_epochs: 15, batch_size: 8, learning_rate: 3e-3, ..Default::default() };
        let out = finetune(&records, &records, model, &cfg).unwrap();
        assert!(out.history.len() <= 15);
        let m = evaluate(&out.model, &records).unwrap();
        let best = out.history[out.best_epoch - 1].val_accuracy;
        assert_eq!(m.overall_accuracy, best);
        assert!(best >= 0.9, "accuracy {best}");
    }

    #[test]
    fn evaluate_leaves_parameters_alone() {
        let model = Model::init(tiny(5), 2).unwrap();
        let before = model.params.digest();
        evaluate(&model, &corpus(10)).unwrap();
        assert_eq!(model.params.digest(), before);
    }

    #[test]
    fn class_mismatch_and_empty_splits() {
        let model = Model::init(tiny(3), 3).unwrap();
        let records = corpus(10);
        assert!(matches!(evaluate(&model, &records), Err(Error::Incompatible(_))));
        assert!(evaluate(&model, &relabel(&records, LabelScheme::Three)).is_ok());
        let cfg = TrainConfig { max_epochs: 1, patience: 1, ..Default::default() };
        assert!(matches!(finetune(&[], &records, model, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn deterministic_history() {
        let records = corpus(20);
        let cfg = TrainConfig { max_epochs: 3, patience: 2, batch_size: 4, seed: 9, ..Default::default() };
        let a = finetune(&records, &records, Model::init(tiny(5), 4).unwrap(), &cfg).unwrap();
        let b = finetune(&records, &records, Model::init(tiny(5), 4).unwrap(), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }
}

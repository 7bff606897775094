//! Pretraining and fine-tuning loops, early stopping and evaluation.

mod finetune;
pub mod metrics;
mod pretrain;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use finetune::{evaluate, evaluate_examples, finetune, FinetuneOutcome};
pub use metrics::{read_history_csv, write_history_csv, MetricsReport, RunMetrics};
pub use pretrain::{pretrain, pretrain_stages, PretrainOutcome};

use crate::error::{Error, Result};
use crate::model::Component;
use crate::objectives::TripletConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Infonce,
    Captioning,
    Triplet,
    Classify,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "infonce" => Ok(Self::Infonce),
            "captioning" => Ok(Self::Captioning),
            "triplet" => Ok(Self::Triplet),
            "classify" => Ok(Self::Classify),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }

    /// Comma-separated stages, run in order.
    pub fn parse_stages(s: &str) -> Result<Vec<Self>> {
        let stages = s.split(',').map(Self::parse).collect::<Result<Vec<_>>>()?;
        if stages.is_empty() {
            return Err(Error::Config("empty objective list".into()));
        }
        Ok(stages)
    }

    /// Classifier components this objective trains.
    pub fn updates(self) -> &'static [Component] {
        use Component::*;
        match self {
            Self::Infonce => &[TextEncoder, ImageEncoder],
            Self::Captioning => &[ImageEncoder],
            Self::Triplet => &[TextEncoder, ImageEncoder, Fusion],
            Self::Classify => &[TextEncoder, ImageEncoder, Fusion, Head],
        }
    }

    /// Objective-only heads trained alongside.
    pub fn auxiliary(self) -> Option<Component> {
        match self {
            Self::Infonce => Some(Component::Contrastive),
            Self::Captioning => Some(Component::CaptionDecoder),
            Self::Triplet | Self::Classify => None,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Infonce => "infonce",
            Self::Captioning => "captioning",
            Self::Triplet => "triplet",
            Self::Classify => "classify",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Pretraining objective.
    pub objective: Objective,
    pub trainable_components: Vec<Component>,
    pub triplet: TripletConfig,
    /// Draw triplet negatives from other stories when a story has no
    /// differently-labelled member.
    pub cross_cluster_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            patience: 4,
            pretrain_steps: 2500,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            objective: Objective::Triplet,
            trainable_components: vec![Component::TextEncoder, Component::ImageEncoder, Component::Fusion, Component::Head],
            triplet: TripletConfig::default(),
            cross_cluster_negatives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return fail("max_epochs, patience and batch_size must be positive");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return fail("weight_decay and grad_clip must be non-negative");
        }
        if !(self.triplet.margin >= 0.0 && self.triplet.margin.is_finite()) {
            return fail("triplet margin must be finite and non-negative");
        }
        let allowed = [Component::TextEncoder, Component::ImageEncoder, Component::Fusion, Component::Head];
        if let Some(c) = self.trainable_components.iter().find(|c| !allowed.contains(c)) {
            return Err(Error::Config(format!("{c:?} cannot be listed as trainable")));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, grad_clip: self.grad_clip, ..Default::default() }
    }
}

/// Per-epoch fine-tuning record; `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// True once the best score (earliest on ties) lies `patience` or more
/// epochs before the latest one.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    let Some(last) = history.len().checked_sub(1) else { return false };
    let best = history.iter().enumerate().fold(0, |b, (i, &v)| if v > history[b] { i } else { b });
    last - best >= patience
}

pub struct EpochOutcome<S> {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose snapshot is returned.
    pub best_epoch: usize,
    pub best: S,
    pub stopped_early: bool,
}

/// Runs `epoch` until `max_epochs` or early stopping. `epoch` returns the
/// training loss and validation score; `snapshot` is taken after every
/// epoch that improves strictly on the best score so far.
pub fn run_epochs<T, S>(
    state: &mut T,
    max_epochs: usize,
    patience: usize,
    mut epoch: impl FnMut(&mut T, usize) -> Result<(f64, f64)>,
    snapshot: impl Fn(&T) -> S,
) -> Result<EpochOutcome<S>> {
    let mut history = Vec::new();
    let mut scores = Vec::new();
    let mut best: Option<(usize, S)> = None;
    let mut stopped_early = false;
    for e in 1..=max_epochs {
        let (train_loss, val) = epoch(state, e)?;
        history.push(EpochRecord { epoch: e, train_loss, val_accuracy: val });
        let improved = scores.iter().all(|&s| val > s);
        scores.push(val);
        if improved {
            best = Some((e, snapshot(state)));
        }
        if early_stop_check(&scores, patience) {
            stopped_early = e < max_epochs;
            break;
        }
    }
    let (best_epoch, best) = best.ok_or_else(|| Error::Config("max_epochs must be positive".into()))?;
    Ok(EpochOutcome { history, best_epoch, best, stopped_early })
}

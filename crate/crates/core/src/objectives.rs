//! Pretraining and fine-tuning losses. Each has a graph form used for
//! training and a plain form over concrete values.

use serde::{Deserialize, Serialize};

use crate::encoders::caption::{caption_forward, CaptionDirection};
use crate::encoders::tokenizer::PAD;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Forward, ParameterSet};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    /// Margin α.
    pub margin: f64,
    /// Unit-normalise joint vectors before measuring distances.
    pub normalize: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 1.0, normalize: true }
    }
}

/// `Σ_rows max(‖a − p‖ − ‖a − n‖ + α, 0)` over matching rows.
pub fn triplet_loss_forward(g: &mut Graph, a: Var, p: Var, n: Var, margin: f64) -> Var {
    let ap = g.sub(a, p);
    let an = g.sub(a, n);
    let d_ap = g.row_norms(ap);
    let d_an = g.row_norms(an);
    let diff = g.sub(d_ap, d_an);
    let shifted = g.add_const(diff, margin);
    let hinge = g.relu(shifted);
    g.sum(hinge)
}

/// Symmetric InfoNCE over cosine similarities scaled by `exp(−log_tau)`;
/// row `i` of both inputs is a matched pair.
pub fn info_nce_forward(g: &mut Graph, text: Var, image: Var, log_tau: Var) -> Var {
    let n = g.value(text).rows();
    let t = g.l2_normalize_rows(text);
    let i = g.l2_normalize_rows(image);
    let cos = g.matmul_t(t, i);
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(cos, inv_tau);
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let rows = g.cross_entropy(logits, &targets);
    let logits_t = g.transpose(logits);
    let cols = g.cross_entropy(logits_t, &targets);
    let both = g.add(rows, cols);
    g.scale(both, 0.5)
}

/// Mean softmax cross-entropy of each logits row against its gold class.
pub fn classification_loss_forward(g: &mut Graph, logits: Var, gold: &[usize]) -> Var {
    let targets: Vec<Option<usize>> = gold.iter().map(|&c| Some(c)).collect();
    g.cross_entropy(logits, &targets)
}

/// Row `t` predicts token `t + 1`; the last row and padding targets are skipped.
pub fn next_token_targets(ids: &[usize]) -> Vec<Option<usize>> {
    (0..ids.len()).map(|t| ids.get(t + 1).copied().filter(|&id| id != PAD)).collect()
}

/// Forward plus backward captioning cross-entropy. Sample `b` reads rows
/// `memory_spans[b]` of `memory`.
pub fn captioning_loss_forward(
    f: &mut Forward,
    cfg: &EncoderConfig,
    memory: Var,
    memory_spans: &[std::ops::Range<usize>],
    captions: &[Vec<usize>],
) -> Result<Var> {
    if let Some(short) = captions.iter().find(|c| c.len() < 2) {
        return Err(Error::InvalidInput(format!("caption of length {} has nothing to predict", short.len())));
    }
    let mut terms = Vec::with_capacity(2);
    for dir in [CaptionDirection::Forward, CaptionDirection::Backward] {
        let oriented: Vec<Vec<usize>> = captions.iter().map(|c| dir.orient(c)).collect();
        let targets: Vec<Option<usize>> = oriented.iter().flat_map(|c| next_token_targets(c)).collect();
        let (logits, _) = caption_forward(f, dir.prefix(), cfg, memory, memory_spans, &oriented)?;
        terms.push(f.g.cross_entropy(logits, &targets));
    }
    Ok(f.g.add(terms[0], terms[1]))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("margin must be a finite non-negative number, got {alpha}")));
    }
    Ok(())
}

pub fn triplet_margin_loss(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Shape(format!("triplet widths {}, {}, {}", a.len(), p.len(), n.len())));
    }
    let mut g = Graph::new();
    let [va, vp, vn] = [a, p, n].map(|x| g.constant(Matrix::row_vector(x.to_vec())));
    let loss = triplet_loss_forward(&mut g, va, vp, vn, alpha);
    Ok(g.value(loss).item())
}

pub fn info_nce_loss(text: &Matrix, image: &Matrix, tau: f64) -> Result<f64> {
    if text.shape() != image.shape() || text.rows() == 0 {
        return Err(Error::Shape(format!("embedding batches {:?} and {:?}", text.shape(), image.shape())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    for (name, m) in [("text", text), ("image", image)] {
        if let Some(r) = (0..m.rows()).find(|&r| m.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::InvalidInput(format!("{name} embedding row {r} has zero norm")));
        }
    }
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let i = g.constant(image.clone());
    let lt = g.constant(Matrix::scalar(tau.ln()));
    let loss = info_nce_forward(&mut g, t, i, lt);
    Ok(g.value(loss).item())
}

pub fn classification_loss(logits: &[f64], gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::InvalidInput(format!("gold class {gold} outside {} classes", logits.len())));
    }
    let mut g = Graph::new();
    let l = g.constant(Matrix::row_vector(logits.to_vec()));
    let loss = classification_loss_forward(&mut g, l, &[gold]);
    Ok(g.value(loss).item())
}

/// Bidirectional captioning loss of one caption given fixed image states.
pub fn captioning_loss(image_states: &Matrix, caption_ids: &[usize], params: &ParameterSet, cfg: &EncoderConfig) -> Result<f64> {
    let mut f = Forward::eval(params);
    let memory = f.g.constant(image_states.clone());
    let loss = captioning_loss_forward(&mut f, cfg, memory, &[0..image_states.rows()], &[caption_ids.to_vec()])?;
    Ok(f.value(loss).item())
}

//! Joins text and image representations into one joint vector: pooled-vector
//! joiners, a cross-modal co-attention stack, and a single-stream encoder.
//! Parameters live under `fusion/`; the classifier head under `head/`.

pub mod coattention;
pub mod early;

use serde::{Deserialize, Serialize};

pub use coattention::{coattend, coattend_forward, init_coattention, CoattentionTrace};
pub use early::{early_forward, early_fuse, init_early};

use crate::encoders::layers;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Forward, Initializer, ParameterSet};
use crate::tensor::Matrix;

pub const FUSION_PREFIX: &str = "fusion";
pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Concat,
    Hadamard,
    Gated,
    Coattention,
    Early,
}

impl FusionMethod {
    pub fn is_pooled(self) -> bool {
        matches!(self, Self::Concat | Self::Hadamard | Self::Gated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Co-attention layers.
    pub n_cross_layers: usize,
    pub d_joint: usize,
    pub n_classes: usize,
    /// Longest `[cls] + text + patches` sequence the single-stream encoder accepts.
    pub max_joint_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { method: FusionMethod::Concat, n_cross_layers: 6, d_joint: 64, n_classes: 5, max_joint_len: 512 }
    }
}

impl FusionConfig {
    pub fn validate(&self, d_text: usize, d_image: usize) -> Result<()> {
        crate::corpus::LabelScheme::for_classes(self.n_classes)?;
        if self.n_cross_layers == 0 || self.d_joint == 0 {
            return Err(Error::Config("n_cross_layers and d_joint must be positive".into()));
        }
        if matches!(self.method, FusionMethod::Hadamard | FusionMethod::Gated) && d_text != d_image {
            return Err(Error::Config(format!(
                "{:?} fusion needs equal pooled widths, got text {d_text} and image {d_image}",
                self.method
            )));
        }
        Ok(())
    }
}

/// Parameters of a pooled-vector joiner.
pub fn init_pooled_fusion(init: &mut Initializer, method: FusionMethod, d_text: usize, d_image: usize, d_joint: usize) {
    let p = FUSION_PREFIX;
    match method {
        FusionMethod::Concat => init.linear(&format!("{p}/out"), d_text + d_image, d_joint, true),
        FusionMethod::Hadamard => init.linear(&format!("{p}/out"), d_text, d_joint, true),
        FusionMethod::Gated => {
            init.linear(&format!("{p}/gate"), d_text + d_image, d_image, true);
            init.linear(&format!("{p}/out"), d_text, d_joint, true);
        }
        FusionMethod::Coattention | FusionMethod::Early => panic!("{method:?} is not a pooled joiner"),
    }
}

/// Gate values `λ ∈ (0, 1)` for gated fusion, one per embedding dimension.
pub fn gate_forward(f: &mut Forward, h_text: Var, h_image: Var) -> Var {
    let both = f.g.concat_cols(&[h_text, h_image]);
    let pre = layers::linear(f, &format!("{FUSION_PREFIX}/gate"), both);
    f.g.sigmoid(pre)
}

/// Joins pooled rows (one per sample) and maps them to `d_joint`.
pub fn fuse_pooled_forward(f: &mut Forward, method: FusionMethod, h_text: Var, h_image: Var) -> Result<Var> {
    let (dt, di) = (f.value(h_text).cols(), f.value(h_image).cols());
    let joined = match method {
        FusionMethod::Concat => f.g.concat_cols(&[h_text, h_image]),
        FusionMethod::Hadamard | FusionMethod::Gated if dt != di => {
            return Err(Error::Shape(format!("{method:?} fusion needs equal widths, got {dt} and {di}")));
        }
        FusionMethod::Hadamard => f.g.mul(h_text, h_image),
        FusionMethod::Gated => {
            let lambda = gate_forward(f, h_text, h_image);
            let gated = f.g.mul(lambda, h_image);
            f.g.add(h_text, gated)
        }
        FusionMethod::Coattention | FusionMethod::Early => {
            return Err(Error::Config(format!("{method:?} does not join pooled vectors")));
        }
    };
    Ok(layers::linear(f, &format!("{FUSION_PREFIX}/out"), joined))
}

/// Joint vector of one pooled pair.
pub fn fuse_pooled(h_text: &[f64], h_image: &[f64], method: FusionMethod, params: &ParameterSet) -> Result<Vec<f64>> {
    let mut f = Forward::eval(params);
    let t = f.g.constant(Matrix::row_vector(h_text.to_vec()));
    let i = f.g.constant(Matrix::row_vector(h_image.to_vec()));
    let j = fuse_pooled_forward(&mut f, method, t, i)?;
    Ok(f.value(j).row(0).to_vec())
}

pub fn init_head(init: &mut Initializer, d_joint: usize, n_classes: usize) {
    init.linear(HEAD_PREFIX, d_joint, n_classes, true);
}

pub fn head_forward(f: &mut Forward, joint: Var) -> Var {
    layers::linear(f, HEAD_PREFIX, joint)
}

/// Class logits for one joint vector.
pub fn classify(joint: &[f64], params: &ParameterSet, n_classes: usize) -> Result<Vec<f64>> {
    if joint.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("joint representation is not finite".into()));
    }
    let mut f = Forward::eval(params);
    let j = f.g.constant(Matrix::row_vector(joint.to_vec()));
    let logits = head_forward(&mut f, j);
    let out = f.value(logits);
    if out.cols() != n_classes {
        return Err(Error::Shape(format!("head produces {} classes, expected {n_classes}", out.cols())));
    }
    Ok(out.row(0).to_vec())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

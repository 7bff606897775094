//! Cross-modal co-attention: in every layer text queries attend only to image
//! states and image queries only to text states, both computed from the
//! previous layer's states. Each sublayer is attention → residual → norm →
//! feed-forward → residual → norm.

use super::FUSION_PREFIX;
use crate::encoders::layers;
use crate::encoders::{EncodedBatch, EncoderOutput};
use crate::error::{Error, Result};
use crate::graph::{AttnMask, Var};
use crate::params::{Forward, Initializer, ParameterSet};

/// Instrumentation of one co-attention pass.
#[derive(Clone, Debug, Default)]
pub struct CoattentionTrace {
    pub layers_applied: usize,
    /// Text-side sublayer output after each layer.
    pub text_sublayers: Vec<Var>,
    pub image_sublayers: Vec<Var>,
}

/// Both streams are projected to the text width `d_text` before the stack.
pub fn init_coattention(init: &mut Initializer, n_layers: usize, d_text: usize, d_image: usize, d_joint: usize) {
    let p = FUSION_PREFIX;
    init.linear(&format!("{p}/text_in"), d_text, d_text, true);
    init.linear(&format!("{p}/image_in"), d_image, d_text, true);
    for l in 0..n_layers {
        for side in ["t2i", "i2t"] {
            let s = format!("{p}/cross{l}/{side}");
            layers::init_attention(init, &format!("{s}/attn"), d_text, d_text, d_text);
            init.layer_norm(&format!("{s}/ln1"), d_text);
            layers::init_feed_forward(init, &format!("{s}/ffn"), d_text);
            init.layer_norm(&format!("{s}/ln2"), d_text);
        }
    }
    init.linear(&format!("{p}/out"), 2 * d_text, d_joint, true);
}

fn sublayer(f: &mut Forward, name: &str, queries: Var, memory: Var, heads: usize, mask: &AttnMask, dropout: f64) -> Var {
    let a = layers::attention(f, &format!("{name}/attn"), queries, memory, heads, mask);
    let a = f.dropout(a, dropout);
    let h = f.g.add(queries, a);
    let h = layers::layer_norm(f, &format!("{name}/ln1"), h);
    let ff = layers::feed_forward(f, &format!("{name}/ffn"), h, dropout);
    let ff = f.dropout(ff, dropout);
    let h = f.g.add(h, ff);
    layers::layer_norm(f, &format!("{name}/ln2"), h)
}

/// Runs the stack over batched encoder outputs and returns the joint rows
/// (pooled text state at `bos` concatenated with the mean image state, mapped
/// to `d_joint`).
pub fn coattend_forward(
    f: &mut Forward,
    n_layers: usize,
    heads: usize,
    text: &EncodedBatch,
    image: &EncodedBatch,
    dropout: f64,
) -> Result<(Var, CoattentionTrace)> {
    if text.spans.len() != image.spans.len() {
        return Err(Error::Shape(format!("{} texts for {} images", text.spans.len(), image.spans.len())));
    }
    let t2i = layers::cross_span_keys(&text.spans, &image.spans);
    let mut i2t_keys = Vec::new();
    for (qs, ks) in image.spans.iter().zip(&text.spans) {
        let visible: Vec<usize> = ks.clone().filter(|&j| text.mask[j]).collect();
        i2t_keys.extend(std::iter::repeat_n(visible, qs.len()));
    }
    let i2t = AttnMask::Keys(i2t_keys);

    let p = FUSION_PREFIX;
    let mut t = layers::linear(f, &format!("{p}/text_in"), text.states);
    let mut i = layers::linear(f, &format!("{p}/image_in"), image.states);
    let mut trace = CoattentionTrace::default();
    for l in 0..n_layers {
        let t_next = sublayer(f, &format!("{p}/cross{l}/t2i"), t, i, heads, &t2i, dropout);
        let i_next = sublayer(f, &format!("{p}/cross{l}/i2t"), i, t, heads, &i2t, dropout);
        t = t_next;
        i = i_next;
        trace.layers_applied += 1;
        trace.text_sublayers.push(t);
        trace.image_sublayers.push(i);
    }
    let starts: Vec<usize> = text.spans.iter().map(|s| s.start).collect();
    let pooled_t = f.g.select_rows(t, &starts);
    let pooled_i = layers::span_mean(f, i, &image.spans, |j| image.mask[j]);
    let both = f.g.concat_cols(&[pooled_t, pooled_i]);
    Ok((layers::linear(f, &format!("{p}/out"), both), trace))
}

fn as_batch(f: &mut Forward, out: &EncoderOutput) -> EncodedBatch {
    let states = f.g.constant(out.states.clone());
    let pooled = f.g.constant(crate::tensor::Matrix::row_vector(out.pooled.clone()));
    EncodedBatch { states, pooled, spans: vec![0..out.states.rows()], mask: out.mask.clone() }
}

/// Joint vector for one encoded (text, image) pair, dropout off.
pub fn coattend(text: &EncoderOutput, image: &EncoderOutput, params: &ParameterSet, n_layers: usize, heads: usize) -> Result<Vec<f64>> {
    let mut f = Forward::eval(params);
    let t = as_batch(&mut f, text);
    let i = as_batch(&mut f, image);
    let (joint, _) = coattend_forward(&mut f, n_layers, heads, &t, &i, 0.0)?;
    Ok(f.value(joint).row(0).to_vec())
}

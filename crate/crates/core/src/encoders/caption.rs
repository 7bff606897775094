//! Caption decoder: causal self-attention over caption tokens, cross-attention
//! to image states, then a vocabulary projection. The backward direction is
//! the forward decoder run over the reversed caption with its own parameters.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::layers::{self, spans_of};
use super::text::{check_ids, embed_tokens};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Forward, Initializer, ParameterSet};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionDirection {
    Forward,
    Backward,
}

impl CaptionDirection {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Forward => "caption_fwd",
            Self::Backward => "caption_bwd",
        }
    }

    /// The sequence the decoder reads in this direction.
    pub fn orient(self, ids: &[usize]) -> Vec<usize> {
        match self {
            Self::Forward => ids.to_vec(),
            Self::Backward => ids.iter().rev().copied().collect(),
        }
    }
}

/// `d_memory` is the width of the image states the decoder attends to.
pub fn init_caption_decoder(init: &mut Initializer, prefix: &str, cfg: &EncoderConfig, d_memory: usize) {
    let d = cfg.d_model;
    init.normal(&format!("{prefix}/tok_emb"), vec![cfg.vocab_size, d], 0.02);
    init.normal(&format!("{prefix}/pos_emb"), vec![cfg.max_seq_len, d], 0.02);
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}/layer{l}");
        init.layer_norm(&format!("{p}/ln1"), d);
        layers::init_attention(init, &format!("{p}/self_attn"), d, d, d);
        init.layer_norm(&format!("{p}/ln2"), d);
        layers::init_attention(init, &format!("{p}/cross_attn"), d, d_memory, d);
        init.layer_norm(&format!("{p}/ln3"), d);
        layers::init_feed_forward(init, &format!("{p}/ffn"), d);
    }
    init.layer_norm(&format!("{prefix}/ln_final"), d);
    init.linear(&format!("{prefix}/lm_head"), d, cfg.vocab_size, true);
}

/// Next-token logits for already-oriented sequences; row `t` of each span
/// scores the token at position `t + 1`. Sample `b` attends to rows
/// `memory_spans[b]` of `memory`.
pub fn caption_forward(
    f: &mut Forward,
    prefix: &str,
    cfg: &EncoderConfig,
    memory: Var,
    memory_spans: &[Range<usize>],
    captions: &[Vec<usize>],
) -> Result<(Var, Vec<Range<usize>>)> {
    if captions.len() != memory_spans.len() {
        return Err(Error::Shape(format!("{} captions for {} images", captions.len(), memory_spans.len())));
    }
    for ids in captions {
        check_ids(ids, cfg)?;
    }
    let spans = spans_of(captions.iter().map(Vec::len));
    let self_mask = layers::causal_span_keys(&spans);
    let cross_mask = layers::cross_span_keys(&spans, memory_spans);
    let rate = cfg.dropout_rate;

    let x = embed_tokens(f, prefix, captions);
    let mut x = f.dropout(x, rate);
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}/layer{l}");
        let h = layers::layer_norm(f, &format!("{p}/ln1"), x);
        let h = layers::attention(f, &format!("{p}/self_attn"), h, h, cfg.n_heads, &self_mask);
        let h = f.dropout(h, rate);
        x = f.g.add(x, h);
        let h = layers::layer_norm(f, &format!("{p}/ln2"), x);
        let h = layers::attention(f, &format!("{p}/cross_attn"), h, memory, cfg.n_heads, &cross_mask);
        let h = f.dropout(h, rate);
        x = f.g.add(x, h);
        let h = layers::layer_norm(f, &format!("{p}/ln3"), x);
        let h = layers::feed_forward(f, &format!("{p}/ffn"), h, rate);
        let h = f.dropout(h, rate);
        x = f.g.add(x, h);
    }
    let x = layers::layer_norm(f, &format!("{prefix}/ln_final"), x);
    Ok((layers::linear(f, &format!("{prefix}/lm_head"), x), spans))
}

/// Deterministic logits `T × vocab_size` for one caption. For the backward
/// direction row `t` belongs to position `t` of the reversed caption.
pub fn decode_caption_logits(
    image_states: &Matrix,
    caption_ids: &[usize],
    direction: CaptionDirection,
    params: &ParameterSet,
    cfg: &EncoderConfig,
) -> Result<Matrix> {
    if caption_ids.is_empty() {
        return Err(Error::InvalidInput("empty caption".into()));
    }
    let mut f = Forward::eval(params);
    let memory = f.g.constant(image_states.clone());
    let oriented = direction.orient(caption_ids);
    let (logits, _) = caption_forward(&mut f, direction.prefix(), cfg, memory, &[0..image_states.rows()], &[oriented])?;
    Ok(f.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            vocab_size: 1000,
            dropout_rate: 0.0,
            ..EncoderConfig::caption_default()
        }
    }

    fn setup(seed: u64) -> (ParameterSet, Matrix) {
        let cfg = cfg();
        let mut ps = ParameterSet::new();
        let mut init = Initializer::new(&mut ps, seed);
        for dir in [CaptionDirection::Forward, CaptionDirection::Backward] {
            init_caption_decoder(&mut init, dir.prefix(), &cfg, 8);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mem = Matrix::from_vec(6, 8, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (ps, mem)
    }

    #[test]
    fn logits_shape() {
        let (ps, mem) = setup(1);
        let out = decode_caption_logits(&mem, &[1, 40, 41, 42, 2], CaptionDirection::Forward, &ps, &cfg()).unwrap();
        assert_eq!(out.shape(), (5, 1000));
    }

    #[test]
    fn causal_rows_ignore_later_tokens() {
        let (ps, mem) = setup(2);
        let a = decode_caption_logits(&mem, &[1, 40, 41, 42, 2], CaptionDirection::Forward, &ps, &cfg()).unwrap();
        let b = decode_caption_logits(&mem, &[1, 40, 41, 99, 2], CaptionDirection::Forward, &ps, &cfg()).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn backward_is_forward_decoding_of_reversed_caption() {
        let (ps, mem) = setup(3);
        let caption = [1, 40, 41, 42, 2];
        let back = decode_caption_logits(&mem, &caption, CaptionDirection::Backward, &ps, &cfg()).unwrap();
        let mut f = Forward::eval(&ps);
        let m = f.g.constant(mem.clone());
        let reversed: Vec<usize> = caption.iter().rev().copied().collect();
        let (logits, _) = caption_forward(&mut f, "caption_bwd", &cfg(), m, &[0..6], &[reversed]).unwrap();
        assert_eq!(&back, f.value(logits));
        let fwd = decode_caption_logits(&mem, &caption, CaptionDirection::Forward, &ps, &cfg()).unwrap();
        assert_ne!(back, fwd);
    }

    #[test]
    fn empty_caption_is_rejected() {
        let (ps, mem) = setup(4);
        assert!(decode_caption_logits(&mem, &[], CaptionDirection::Forward, &ps, &cfg()).is_err());
    }
}

//! Pre-norm transformer over token ids with learned positions; the pooled
//! vector is the final state at the `bos` position.

use super::layers::{self, spans_of};
use super::tokenizer::PAD;
use super::{EncodedBatch, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::params::{Forward, Initializer, ParameterSet};

pub const TEXT_PREFIX: &str = "text";

pub fn init_text_encoder(init: &mut Initializer, prefix: &str, cfg: &EncoderConfig) {
    let d = cfg.d_model;
    init.normal(&format!("{prefix}/tok_emb"), vec![cfg.vocab_size, d], 0.02);
    init.normal(&format!("{prefix}/pos_emb"), vec![cfg.max_seq_len, d], 0.02);
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}/layer{l}");
        init.layer_norm(&format!("{p}/ln1"), d);
        layers::init_attention(init, &format!("{p}/attn"), d, d, d);
        init.layer_norm(&format!("{p}/ln2"), d);
        layers::init_feed_forward(init, &format!("{p}/ffn"), d);
    }
    init.layer_norm(&format!("{prefix}/ln_final"), d);
}

pub fn check_ids(ids: &[usize], cfg: &EncoderConfig) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::InvalidInput(format!("sequence length {} exceeds max_seq_len {}", ids.len(), cfg.max_seq_len)));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
    }
    Ok(())
}

/// Token plus position embeddings of a stacked batch.
pub fn embed_tokens(f: &mut Forward, prefix: &str, batch: &[Vec<usize>]) -> crate::graph::Var {
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let positions: Vec<usize> = batch.iter().flat_map(|s| 0..s.len()).collect();
    let tok = f.param(&format!("{prefix}/tok_emb"));
    let pos = f.param(&format!("{prefix}/pos_emb"));
    let t = f.g.select_rows(tok, &ids);
    let p = f.g.select_rows(pos, &positions);
    f.g.add(t, p)
}

/// Encodes a batch of id sequences in one graph. Padding ids are never
/// attended to.
pub fn text_forward(f: &mut Forward, prefix: &str, cfg: &EncoderConfig, batch: &[Vec<usize>]) -> Result<EncodedBatch> {
    for ids in batch {
        check_ids(ids, cfg)?;
    }
    let spans = spans_of(batch.iter().map(Vec::len));
    let mask: Vec<bool> = batch.iter().flatten().map(|&id| id != PAD).collect();
    let attn_mask = layers::span_keys(&spans, |j| mask[j]);
    let rate = cfg.dropout_rate;

    let x = embed_tokens(f, prefix, batch);
    let mut x = f.dropout(x, rate);
    for l in 0..cfg.n_layers {
        let p = format!("{prefix}/layer{l}");
        let h = layers::layer_norm(f, &format!("{p}/ln1"), x);
        let h = layers::attention(f, &format!("{p}/attn"), h, h, cfg.n_heads, &attn_mask);
        let h = f.dropout(h, rate);
        x = f.g.add(x, h);
        let h = layers::layer_norm(f, &format!("{p}/ln2"), x);
        let h = layers::feed_forward(f, &format!("{p}/ffn"), h, rate);
        let h = f.dropout(h, rate);
        x = f.g.add(x, h);
    }
    let states = layers::layer_norm(f, &format!("{prefix}/ln_final"), x);
    let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
    let pooled = f.g.select_rows(states, &starts);
    Ok(EncodedBatch { states, pooled, spans, mask })
}

/// Deterministic (dropout off) encoding of one id sequence.
pub fn encode_text(ids: &[usize], params: &ParameterSet, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    let mut f = Forward::eval(params);
    let out = text_forward(&mut f, TEXT_PREFIX, cfg, &[ids.to_vec()])?;
    Ok(EncoderOutput { states: f.value(out.states).clone(), pooled: f.value(out.pooled).row(0).to_vec(), mask: out.mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokenizer::{BOS, EOS};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 16,
            vocab_size: 50,
            dropout_rate: 0.0,
            ..EncoderConfig::text_default()
        }
    }

    fn params(cfg: &EncoderConfig, seed: u64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        init_text_encoder(&mut Initializer::new(&mut ps, seed), TEXT_PREFIX, cfg);
        ps
    }

    #[test]
    fn output_shapes() {
        let cfg = tiny();
        let ps = params(&cfg, 1);
        let ids = vec![BOS, 5, 6, 7, 8, 9, 10, 11, 12, EOS];
        let out = encode_text(&ids, &ps, &cfg).unwrap();
        assert_eq!(out.states.shape(), (10, 32));
        assert_eq!(out.pooled.len(), 32);
        assert_eq!(out.pooled, out.states.row(0));
    }

    #[test]
    fn padding_leaves_pooled_unchanged() {
        let cfg = tiny();
        let ps = params(&cfg, 2);
        let ids = vec![BOS, 9, 14, 22, EOS];
        let base = encode_text(&ids, &ps, &cfg).unwrap();
        let mut padded = ids.clone();
        padded.extend([PAD; 4]);
        let out = encode_text(&padded, &ps, &cfg).unwrap();
        assert!(out.pooled.iter().zip(&base.pooled).all(|(a, b)| (a - b).abs() <= 1e-6));
        assert_eq!(out.mask, [true, true, true, true, true, false, false, false, false]);
    }

    #[test]
    fn perturbing_padded_embeddings_changes_no_real_state() {
        let cfg = tiny();
        let ps = params(&cfg, 3);
        let ids = vec![BOS, 9, 14, EOS, PAD, PAD];
        let base = encode_text(&ids, &ps, &cfg).unwrap();
        let mut perturbed = ps.clone();
        // the pad token row and the positions the pads occupy
        let t = perturbed.get_mut(&format!("{TEXT_PREFIX}/tok_emb")).unwrap();
        t.data_mut()[..32].iter_mut().for_each(|v| *v += 3.0);
        let t = perturbed.get_mut(&format!("{TEXT_PREFIX}/pos_emb")).unwrap();
        t.data_mut()[4 * 32..6 * 32].iter_mut().for_each(|v| *v -= 2.0);
        let out = encode_text(&ids, &perturbed, &cfg).unwrap();
        for r in 0..4 {
            let diff = out.states.row(r).iter().zip(base.states.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9, "row {r} moved by {diff}");
        }
    }

    #[test]
    fn positions_matter() {
        let cfg = tiny();
        let ps = params(&cfg, 4);
        let a = encode_text(&[BOS, 5, 6, 7, EOS], &ps, &cfg).unwrap();
        let b = encode_text(&[BOS, 6, 5, 7, EOS], &ps, &cfg).unwrap();
        assert_ne!(a.pooled, b.pooled);
    }

    #[test]
    fn batch_matches_single() {
        let cfg = tiny();
        let ps = params(&cfg, 5);
        let seqs = vec![vec![BOS, 5, EOS], vec![BOS, 8, 9, 10, EOS]];
        let mut f = Forward::eval(&ps);
        let out = text_forward(&mut f, TEXT_PREFIX, &cfg, &seqs).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let single = encode_text(s, &ps, &cfg).unwrap();
            let got = f.value(out.pooled).row(b);
            assert!(got.iter().zip(&single.pooled).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_ids() {
        let cfg = tiny();
        let ps = params(&cfg, 6);
        assert!(matches!(encode_text(&[BOS, 50, EOS], &ps, &cfg), Err(Error::TokenOutOfRange { id: 50, vocab: 50 })));
        assert!(encode_text(&[BOS; 17], &ps, &cfg).is_err());
    }
}

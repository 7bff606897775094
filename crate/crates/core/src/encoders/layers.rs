//! Building blocks shared by the encoders, decoders and fusion stacks.
//!
//! Batches are stacked along rows; each sample owns a contiguous row span and
//! attention is confined to spans through explicit key lists.

use std::ops::Range;

use crate::graph::{AttnMask, Var};
use crate::params::{Forward, Initializer};
use crate::tensor::Matrix;

pub fn linear(f: &mut Forward, name: &str, x: Var) -> Var {
    let w = f.param(&format!("{name}/weight"));
    let y = f.g.matmul(x, w);
    let bias = format!("{name}/bias");
    if f.has_param(&bias) {
        let b = f.param(&bias);
        f.g.add_row(y, b)
    } else {
        y
    }
}

pub fn layer_norm(f: &mut Forward, name: &str, x: Var) -> Var {
    let gain = f.param(&format!("{name}/gain"));
    let bias = f.param(&format!("{name}/bias"));
    f.g.layer_norm(x, gain, bias)
}

pub fn init_attention(init: &mut Initializer, name: &str, d_query: usize, d_memory: usize, d: usize) {
    init.linear(&format!("{name}/q"), d_query, d, true);
    init.linear(&format!("{name}/k"), d_memory, d, true);
    init.linear(&format!("{name}/v"), d_memory, d, true);
    init.linear(&format!("{name}/o"), d, d_query, true);
}

/// Multi-head attention from `queries` over `memory` (self-attention when they coincide).
pub fn attention(f: &mut Forward, name: &str, queries: Var, memory: Var, heads: usize, mask: &AttnMask) -> Var {
    let q = linear(f, &format!("{name}/q"), queries);
    let k = linear(f, &format!("{name}/k"), memory);
    let v = linear(f, &format!("{name}/v"), memory);
    let a = f.g.attention(q, k, v, heads, mask);
    linear(f, &format!("{name}/o"), a)
}

pub fn init_feed_forward(init: &mut Initializer, name: &str, d: usize) {
    init.linear(&format!("{name}/up"), d, 4 * d, true);
    init.linear(&format!("{name}/down"), 4 * d, d, true);
}

/// Position-wise `d → 4d → d` network with a GELU in between.
pub fn feed_forward(f: &mut Forward, name: &str, x: Var, dropout: f64) -> Var {
    let h = linear(f, &format!("{name}/up"), x);
    let h = f.g.gelu(h);
    let h = f.dropout(h, dropout);
    linear(f, &format!("{name}/down"), h)
}

/// Row spans for consecutive samples of the given lengths.
pub fn spans_of(lengths: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// Every query sees every key of its own span for which `visible` holds.
pub fn span_keys(spans: &[Range<usize>], visible: impl Fn(usize) -> bool) -> AttnMask {
    let mut keys = Vec::with_capacity(spans.last().map_or(0, |s| s.end));
    for span in spans {
        let ks: Vec<usize> = span.clone().filter(|&j| visible(j)).collect();
        keys.extend(std::iter::repeat_n(ks, span.len()));
    }
    AttnMask::Keys(keys)
}

/// Query `i` of span `s` sees keys `s.start..=i`.
pub fn causal_span_keys(spans: &[Range<usize>]) -> AttnMask {
    AttnMask::Keys(spans.iter().flat_map(|s| s.clone().map(move |i| (s.start..=i).collect())).collect())
}

/// Query rows of span `q[b]` see every key row of span `k[b]`.
pub fn cross_span_keys(query_spans: &[Range<usize>], key_spans: &[Range<usize>]) -> AttnMask {
    assert_eq!(query_spans.len(), key_spans.len(), "span count mismatch");
    let mut keys = Vec::new();
    for (q, k) in query_spans.iter().zip(key_spans) {
        let ks: Vec<usize> = k.clone().collect();
        keys.extend(std::iter::repeat_n(ks, q.len()));
    }
    AttnMask::Keys(keys)
}

/// `B × N` constant whose product with stacked states averages each span.
pub fn span_mean_matrix(spans: &[Range<usize>], keep: impl Fn(usize) -> bool) -> Matrix {
    let n = spans.last().map_or(0, |s| s.end);
    let mut m = Matrix::zeros(spans.len(), n);
    for (b, span) in spans.iter().enumerate() {
        let kept: Vec<usize> = span.clone().filter(|&j| keep(j)).collect();
        for &j in &kept {
            m.set(b, j, 1.0 / kept.len() as f64);
        }
    }
    m
}

/// Mean of each span's rows; rows failing `keep` are ignored.
pub fn span_mean(f: &mut Forward, x: Var, spans: &[Range<usize>], keep: impl Fn(usize) -> bool) -> Var {
    let avg = f.g.constant(span_mean_matrix(spans, keep));
    f.g.matmul(avg, x)
}

//! Hierarchical shifted-window image transformer.
//!
//! Patches are linearly embedded and get a learned absolute position
//! embedding. Each stage runs pairs of blocks: one over aligned windows, one
//! over windows shifted by half a window with the wrapped-around regions kept
//! apart. Stages are joined by 2×2 patch merging that doubles the width.

use std::collections::BTreeMap;

use super::layers::{self, spans_of};
use super::{EncodedBatch, EncoderConfig, EncoderOutput};
use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::graph::AttnMask;
use crate::params::{Forward, Initializer, ParameterSet};
use crate::tensor::Matrix;

pub const IMAGE_PREFIX: &str = "image";

/// Attention group of every patch (row-major) of a `grid × grid` map split
/// into `window × window` windows after a cyclic shift of `shift` patches
/// towards the origin. Patches attend to each other iff their ids match.
///
/// After the shift, rows (and columns) `grid − window .. grid` of the last
/// window hold patches from two different image regions; those are separated
/// so no patch attends across the wrap-around.
pub fn window_groups(grid: usize, window: usize, shift: usize) -> Vec<usize> {
    assert!(window > 0 && grid.is_multiple_of(window), "grid must be a multiple of the window");
    assert!(shift < window, "shift must be smaller than the window");
    let region = |r: usize| {
        if shift == 0 || r < grid - window {
            0
        } else if r < grid - shift {
            1
        } else {
            2
        }
    };
    let mut ids = BTreeMap::new();
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let (rs, cs) = ((r + grid - shift) % grid, (c + grid - shift) % grid);
            let key = (rs / window, cs / window, region(rs), region(cs));
            let next = ids.len();
            out.push(*ids.entry(key).or_insert(next));
        }
    }
    out
}

fn block_name(prefix: &str, stage: usize, block: usize) -> String {
    format!("{prefix}/stage{stage}/block{block}")
}

pub fn init_image_encoder(init: &mut Initializer, prefix: &str, cfg: &EncoderConfig) {
    let p = cfg.patch_size;
    let g = cfg.stage_grid(0);
    init.linear(&format!("{prefix}/patch_embed"), p * p * 3, cfg.d_model, true);
    init.normal(&format!("{prefix}/pos_emb"), vec![g * g, cfg.d_model], 0.02);
    for s in 0..cfg.n_stages {
        let d = cfg.stage_dim(s);
        for b in 0..2 * cfg.n_layers {
            let name = block_name(prefix, s, b);
            init.layer_norm(&format!("{name}/ln1"), d);
            layers::init_attention(init, &format!("{name}/attn"), d, d, d);
            init.layer_norm(&format!("{name}/ln2"), d);
            layers::init_feed_forward(init, &format!("{name}/ffn"), d);
        }
        if s + 1 < cfg.n_stages {
            init.layer_norm(&format!("{prefix}/stage{s}/merge/ln"), 4 * d);
            init.linear(&format!("{prefix}/stage{s}/merge/reduce"), 4 * d, 2 * d, false);
        }
    }
    init.layer_norm(&format!("{prefix}/ln_final"), cfg.image_output_dim());
}

/// One row per patch, images stacked; a patch row lists its pixels row by
/// row with the three channels interleaved.
pub(crate) fn patchify(images: &[&Image], patch: usize) -> Matrix {
    let g = images.first().map_or(0, |i| i.width() / patch);
    let mut out = Matrix::zeros(images.len() * g * g, patch * patch * 3);
    for (b, img) in images.iter().enumerate() {
        for pr in 0..g {
            for pc in 0..g {
                let row = out.row_mut(b * g * g + pr * g + pc);
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        for c in 0..3 {
                            row[k] = img.get(pr * patch + y, pc * patch + x, c) as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn stacked_groups(groups: &[usize], batch: usize) -> AttnMask {
    let per = groups.iter().copied().max().map_or(0, |m| m + 1);
    AttnMask::Groups((0..batch).flat_map(|b| groups.iter().map(move |&g| b * per + g)).collect())
}

/// Row indices of the 2×2 neighbourhoods merged into each patch of the next stage.
fn merge_indices(grid: usize, batch: usize) -> [Vec<usize>; 4] {
    let half = grid / 2;
    let mut idx: [Vec<usize>; 4] = Default::default();
    for b in 0..batch {
        let base = b * grid * grid;
        for i in 0..half {
            for j in 0..half {
                let at = |r: usize, c: usize| base + r * grid + c;
                idx[0].push(at(2 * i, 2 * j));
                idx[1].push(at(2 * i + 1, 2 * j));
                idx[2].push(at(2 * i, 2 * j + 1));
                idx[3].push(at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    idx
}

pub fn image_forward(f: &mut Forward, prefix: &str, cfg: &EncoderConfig, images: &[&Image]) -> Result<EncodedBatch> {
    let res = cfg.resolution;
    for img in images {
        if img.height() != res || img.width() != res {
            return Err(Error::Shape(format!("image is {}x{}, encoder expects {res}x{res}", img.height(), img.width())));
        }
    }
    let batch = images.len();
    let rate = cfg.dropout_rate;
    let g0 = cfg.stage_grid(0);

    let patches = f.g.constant(patchify(images, cfg.patch_size));
    let x = layers::linear(f, &format!("{prefix}/patch_embed"), patches);
    let pos = f.param(&format!("{prefix}/pos_emb"));
    let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..g0 * g0).collect();
    let pos = f.g.select_rows(pos, &pos_idx);
    let x = f.g.add(x, pos);
    let mut x = f.dropout(x, rate);

    for s in 0..cfg.n_stages {
        let grid = cfg.stage_grid(s);
        let heads = cfg.stage_heads(s);
        let window = cfg.window_size.min(grid);
        let shift = if grid > cfg.window_size { cfg.window_size / 2 } else { 0 };
        let masks = [stacked_groups(&window_groups(grid, window, 0), batch), stacked_groups(&window_groups(grid, window, shift), batch)];
        for b in 0..2 * cfg.n_layers {
            let name = block_name(prefix, s, b);
            let h = layers::layer_norm(f, &format!("{name}/ln1"), x);
            let h = layers::attention(f, &format!("{name}/attn"), h, h, heads, &masks[b % 2]);
            let h = f.dropout(h, rate);
            x = f.g.add(x, h);
            let h = layers::layer_norm(f, &format!("{name}/ln2"), x);
            let h = layers::feed_forward(f, &format!("{name}/ffn"), h, rate);
            let h = f.dropout(h, rate);
            x = f.g.add(x, h);
        }
        if s + 1 < cfg.n_stages {
            let parts: Vec<_> = merge_indices(grid, batch).iter().map(|idx| f.g.select_rows(x, idx)).collect();
            let merged = f.g.concat_cols(&parts);
            let merged = layers::layer_norm(f, &format!("{prefix}/stage{s}/merge/ln"), merged);
            x = layers::linear(f, &format!("{prefix}/stage{s}/merge/reduce"), merged);
        }
    }
    let states = layers::layer_norm(f, &format!("{prefix}/ln_final"), x);
    let g_last = cfg.stage_grid(cfg.n_stages - 1);
    let spans = spans_of(std::iter::repeat_n(g_last * g_last, batch));
    let pooled = layers::span_mean(f, states, &spans, |_| true);
    Ok(EncodedBatch { states, pooled, mask: vec![true; batch * g_last * g_last], spans })
}

/// Deterministic (dropout off) encoding of one image.
pub fn encode_image(image: &Image, params: &ParameterSet, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    let mut f = Forward::eval(params);
    let out = image_forward(&mut f, IMAGE_PREFIX, cfg, &[image])?;
    Ok(EncoderOutput { states: f.value(out.states).clone(), pooled: f.value(out.pooled).row(0).to_vec(), mask: out.mask })
}

//! Single-stream fusion: one transformer over `[cls] + text tokens + image
//! patches`. Every position carries a modality-type embedding and a position
//! embedding local to its modality; the joint vector is the `cls` state.
//! Face-crop inputs are obtained by feeding `only_face` preprocessed images.

use super::{FusionConfig, FUSION_PREFIX};
use crate::corpus::Image;
use crate::encoders::image::patchify;
use crate::encoders::layers::{self, spans_of};
use crate::encoders::text::check_ids;
use crate::encoders::tokenizer::PAD;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Forward, Initializer, ParameterSet};

const TEXT_TYPE: usize = 0;
const IMAGE_TYPE: usize = 1;

/// Width, depth and heads follow the text configuration; patching follows the
/// image configuration.
pub fn init_early(init: &mut Initializer, text: &EncoderConfig, image: &EncoderConfig, fusion: &FusionConfig) {
    let p = FUSION_PREFIX;
    let d = text.d_model;
    let g = image.stage_grid(0);
    init.normal(&format!("{p}/tok_emb"), vec![text.vocab_size, d], 0.02);
    init.normal(&format!("{p}/text_pos"), vec![text.max_seq_len, d], 0.02);
    init.linear(&format!("{p}/patch_embed"), image.patch_size * image.patch_size * 3, d, true);
    init.normal(&format!("{p}/image_pos"), vec![g * g, d], 0.02);
    init.normal(&format!("{p}/type_emb"), vec![2, d], 0.02);
    init.normal(&format!("{p}/cls"), vec![1, d], 0.02);
    for l in 0..text.n_layers {
        let name = format!("{p}/layer{l}");
        init.layer_norm(&format!("{name}/ln1"), d);
        layers::init_attention(init, &format!("{name}/attn"), d, d, d);
        init.layer_norm(&format!("{name}/ln2"), d);
        layers::init_feed_forward(init, &format!("{name}/ffn"), d);
    }
    init.layer_norm(&format!("{p}/ln_final"), d);
    init.linear(&format!("{p}/out"), d, fusion.d_joint, true);
}

/// Joint rows for a batch of (token ids, image) pairs.
pub fn early_forward(
    f: &mut Forward,
    text_cfg: &EncoderConfig,
    image_cfg: &EncoderConfig,
    fusion: &FusionConfig,
    texts: &[Vec<usize>],
    images: &[&Image],
) -> Result<Var> {
    if texts.len() != images.len() {
        return Err(Error::Shape(format!("{} texts for {} images", texts.len(), images.len())));
    }
    let res = image_cfg.resolution;
    let n_patches = image_cfg.stage_grid(0).pow(2);
    for (ids, img) in texts.iter().zip(images) {
        check_ids(ids, text_cfg)?;
        if img.height() != res || img.width() != res {
            return Err(Error::Shape(format!("image is {}x{}, expected {res}x{res}", img.height(), img.width())));
        }
        let len = 1 + ids.len() + n_patches;
        if len > fusion.max_joint_len {
            return Err(Error::InvalidInput(format!("joint sequence length {len} exceeds max_joint_len {}", fusion.max_joint_len)));
        }
    }
    let p = FUSION_PREFIX;
    let batch = texts.len();
    let rate = text_cfg.dropout_rate;

    // parts stacked as [all cls | all text | all patches], then gathered per sample
    let cls = f.param(&format!("{p}/cls"));
    let cls_rows = f.g.select_rows(cls, &vec![0; batch]);
    let ids: Vec<usize> = texts.iter().flatten().copied().collect();
    let text_pos: Vec<usize> = texts.iter().flat_map(|s| 0..s.len()).collect();
    let tok = f.param(&format!("{p}/tok_emb"));
    let tok = f.g.select_rows(tok, &ids);
    let tpos = f.param(&format!("{p}/text_pos"));
    let tpos = f.g.select_rows(tpos, &text_pos);
    let text_rows = f.g.add(tok, tpos);
    let patches = f.g.constant(patchify(images, image_cfg.patch_size));
    let patch_rows = layers::linear(f, &format!("{p}/patch_embed"), patches);
    let ipos = f.param(&format!("{p}/image_pos"));
    let ipos = f.g.select_rows(ipos, &(0..batch).flat_map(|_| 0..n_patches).collect::<Vec<_>>());
    let patch_rows = f.g.add(patch_rows, ipos);
    let stacked = f.g.concat_rows(&[cls_rows, text_rows, patch_rows]);

    let n_text = ids.len();
    let mut order = Vec::new();
    let mut types = Vec::new();
    let mut real = Vec::new();
    let mut text_off = 0;
    for (b, seq) in texts.iter().enumerate() {
        order.push(b);
        types.push(TEXT_TYPE);
        real.push(true);
        for (k, &id) in seq.iter().enumerate() {
            order.push(batch + text_off + k);
            types.push(TEXT_TYPE);
            real.push(id != PAD);
        }
        text_off += seq.len();
        for k in 0..n_patches {
            order.push(batch + n_text + b * n_patches + k);
            types.push(IMAGE_TYPE);
            real.push(true);
        }
    }
    let x = f.g.select_rows(stacked, &order);
    let type_emb = f.param(&format!("{p}/type_emb"));
    let type_rows = f.g.select_rows(type_emb, &types);
    let x = f.g.add(x, type_rows);
    let mut x = f.dropout(x, rate);

    let spans = spans_of(texts.iter().map(|s| 1 + s.len() + n_patches));
    let mask = layers::span_keys(&spans, |j| real[j]);
    for l in 0..text_cfg.n_layers {
        let name = format!("{p}/layer{l}");
        let h = layers::layer_norm(f, &format!("{name}/ln1"), x);
        let h = layers::attention(f, &format!("{name}/attn"), h, h, text_cfg.n_heads, &mask);
        let h = f.dropout(h, rate);
        x = f.g.add(x, h);
        let h = layers::layer_norm(f, &format!("{name}/ln2"), x);
        let h = layers::feed_forward(f, &format!("{name}/ffn"), h, rate);
        let h = f.dropout(h, rate);
        x = f.g.add(x, h);
    }
    let x = layers::layer_norm(f, &format!("{p}/ln_final"), x);
    let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
    let cls_states = f.g.select_rows(x, &starts);
    Ok(layers::linear(f, &format!("{p}/out"), cls_states))
}

/// Joint vector for one pair, dropout off.
pub fn early_fuse(
    text_ids: &[usize],
    image: &Image,
    params: &ParameterSet,
    text_cfg: &EncoderConfig,
    image_cfg: &EncoderConfig,
    fusion: &FusionConfig,
) -> Result<Vec<f64>> {
    let mut f = Forward::eval(params);
    let joint = early_forward(&mut f, text_cfg, image_cfg, fusion, &[text_ids.to_vec()], &[image])?;
    Ok(f.value(joint).row(0).to_vec())
}

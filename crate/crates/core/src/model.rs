//! A classifier assembled from the encoders, a fusion method and a head,
//! together with the auxiliary heads used only for pretraining.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{clean_caption, preprocess_image, resize_bilinear, DocumentRecord, Image, ImageMode, LabelScheme};
use crate::encoders::caption::init_caption_decoder;
use crate::encoders::image::{image_forward, init_image_encoder, IMAGE_PREFIX};
use crate::encoders::layers;
use crate::encoders::text::{init_text_encoder, text_forward, TEXT_PREFIX};
use crate::encoders::{tokenize, CaptionDirection, EncodedBatch, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig, FusionMethod};
use crate::graph::Var;
use crate::params::{Forward, Initializer, ParameterSet};

pub const CONTRASTIVE_PREFIX: &str = "contrastive";

/// Which inputs the classifier reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Text,
    Image,
    Multimodal,
}

/// Parameter groups, each owning one or more name prefixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TextEncoder,
    ImageEncoder,
    Fusion,
    Head,
    CaptionDecoder,
    Contrastive,
}

impl Component {
    pub const ALL: [Component; 6] =
        [Self::TextEncoder, Self::ImageEncoder, Self::Fusion, Self::Head, Self::CaptionDecoder, Self::Contrastive];

    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Self::TextEncoder => &["text/"],
            Self::ImageEncoder => &["image/"],
            Self::Fusion => &["fusion/"],
            Self::Head => &["head/"],
            Self::CaptionDecoder => &["caption_fwd/", "caption_bwd/"],
            Self::Contrastive => &["contrastive/"],
        }
    }

    pub fn of_param(name: &str) -> Option<Component> {
        Self::ALL.into_iter().find(|c| c.prefixes().iter().any(|p| name.starts_with(p)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub text: EncoderConfig,
    pub image: EncoderConfig,
    pub caption: EncoderConfig,
    pub fusion: FusionConfig,
    pub image_mode: ImageMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Multimodal,
            text: EncoderConfig::text_default(),
            image: EncoderConfig::image_default(),
            caption: EncoderConfig::caption_default(),
            fusion: FusionConfig::default(),
            image_mode: ImageMode::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate_text()?;
        self.image.validate_image()?;
        self.caption.validate_text()?;
        self.fusion.validate(self.d_text(), self.d_image())
    }

    pub fn d_text(&self) -> usize {
        self.text.d_model
    }

    pub fn d_image(&self) -> usize {
        self.image.image_output_dim()
    }

    pub fn scheme(&self) -> Result<LabelScheme> {
        LabelScheme::for_classes(self.fusion.n_classes)
    }

    /// Components the classifier's forward pass reads.
    pub fn classifier_components(&self) -> Vec<Component> {
        use Component::*;
        match (self.kind, self.fusion.method) {
            (ModelKind::Text, _) => vec![TextEncoder, Fusion, Head],
            (ModelKind::Image, _) => vec![ImageEncoder, Fusion, Head],
            (ModelKind::Multimodal, FusionMethod::Early) => vec![Fusion, Head],
            (ModelKind::Multimodal, _) => vec![TextEncoder, ImageEncoder, Fusion, Head],
        }
    }

    pub fn reads_text(&self) -> bool {
        self.kind != ModelKind::Image
    }

    pub fn reads_image(&self) -> bool {
        self.kind != ModelKind::Text
    }
}

/// One record prepared for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub text_ids: Vec<usize>,
    /// Cleaned caption, absent when missing or too short.
    pub caption: Option<String>,
    pub image: Image,
    /// Class index of the record's label; absent when the label is not one
    /// of the model's classes.
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    /// Fresh parameters for every component, drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut init = Initializer::new(&mut params, seed);
        let (dt, di, dj) = (config.d_text(), config.d_image(), config.fusion.d_joint);
        init_text_encoder(&mut init, TEXT_PREFIX, &config.text);
        init_image_encoder(&mut init, IMAGE_PREFIX, &config.image);
        for dir in [CaptionDirection::Forward, CaptionDirection::Backward] {
            init_caption_decoder(&mut init, dir.prefix(), &config.caption, di);
        }
        init.linear(&format!("{CONTRASTIVE_PREFIX}/text_proj"), dt, dj, false);
        init.linear(&format!("{CONTRASTIVE_PREFIX}/image_proj"), di, dj, false);
        init.constant(&format!("{CONTRASTIVE_PREFIX}/log_tau"), vec![1, 1], 0.07f32.ln());
        match (config.kind, config.fusion.method) {
            (ModelKind::Text, _) => init.linear("fusion/out", dt, dj, true),
            (ModelKind::Image, _) => init.linear("fusion/out", di, dj, true),
            (ModelKind::Multimodal, FusionMethod::Coattention) => {
                fusion::init_coattention(&mut init, config.fusion.n_cross_layers, dt, di, dj)
            }
            (ModelKind::Multimodal, FusionMethod::Early) => fusion::init_early(&mut init, &config.text, &config.image, &config.fusion),
            (ModelKind::Multimodal, m) => fusion::init_pooled_fusion(&mut init, m, dt, di, dj),
        }
        fusion::init_head(&mut init, dj, config.fusion.n_classes);
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking they match `config` name for
    /// name and shape for shape.
    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        let expected: BTreeMap<&String, &[usize]> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: BTreeMap<&String, &[usize]> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if let Some(n) = expected.keys().find(|n| !found.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("missing parameter {n}")));
        }
        if let Some(n) = found.keys().find(|n| !expected.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {n}")));
        }
        if let Some((n, s)) = expected.iter().find(|(n, s)| found[*n] != **s) {
            return Err(Error::Checkpoint(format!("parameter {n} has shape {:?}, expected {s:?}", found[*n])));
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self { config, params })
    }

    pub fn n_classes(&self) -> usize {
        self.config.fusion.n_classes
    }

    /// Tokenizes, preprocesses images (missing images become black) and looks
    /// up class indices. Labels are not coarsened here; see [`relabel`].
    ///
    /// [`relabel`]: crate::corpus::relabel
    pub fn featurize(&self, records: &[DocumentRecord]) -> Result<Vec<Example>> {
        let labels = self.config.scheme()?.labels();
        let res = self.config.image.resolution;
        let t = &self.config.text;
        records
            .iter()
            .map(|r| {
                let image = match &r.image {
                    None => Image::zeros(res, res),
                    Some(_) => {
                        let img = preprocess_image(r, self.config.image_mode, res)?;
                        if img.height() == res && img.width() == res {
                            img
                        } else {
                            resize_bilinear(&img, res, res)
                        }
                    }
                };
                Ok(Example {
                    id: r.id.clone(),
                    text_ids: tokenize(&r.text, t.vocab_size, t.max_seq_len),
                    caption: r.caption.as_deref().and_then(clean_caption),
                    image,
                    label: labels.iter().position(|&l| l == r.label),
                })
            })
            .collect()
    }

    pub fn encode_text(&self, f: &mut Forward, batch: &[&Example]) -> Result<EncodedBatch> {
        let ids: Vec<Vec<usize>> = batch.iter().map(|e| e.text_ids.clone()).collect();
        text_forward(f, TEXT_PREFIX, &self.config.text, &ids)
    }

    pub fn encode_images(&self, f: &mut Forward, batch: &[&Example]) -> Result<EncodedBatch> {
        let imgs: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
        image_forward(f, IMAGE_PREFIX, &self.config.image, &imgs)
    }

    /// Joint representation rows (`B × d_joint`).
    pub fn joint_forward(&self, f: &mut Forward, batch: &[&Example]) -> Result<Var> {
        let cfg = &self.config;
        let out = "fusion/out";
        match (cfg.kind, cfg.fusion.method) {
            (ModelKind::Text, _) => {
                let t = self.encode_text(f, batch)?;
                Ok(layers::linear(f, out, t.pooled))
            }
            (ModelKind::Image, _) => {
                let i = self.encode_images(f, batch)?;
                Ok(layers::linear(f, out, i.pooled))
            }
            (ModelKind::Multimodal, FusionMethod::Early) => {
                let ids: Vec<Vec<usize>> = batch.iter().map(|e| e.text_ids.clone()).collect();
                let imgs: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
                fusion::early_forward(f, &cfg.text, &cfg.image, &cfg.fusion, &ids, &imgs)
            }
            (ModelKind::Multimodal, FusionMethod::Coattention) => {
                let t = self.encode_text(f, batch)?;
                let i = self.encode_images(f, batch)?;
                let (joint, _) = fusion::coattend_forward(f, cfg.fusion.n_cross_layers, cfg.text.n_heads, &t, &i, cfg.text.dropout_rate)?;
                Ok(joint)
            }
            (ModelKind::Multimodal, method) => {
                let t = self.encode_text(f, batch)?;
                let i = self.encode_images(f, batch)?;
                fusion::fuse_pooled_forward(f, method, t.pooled, i.pooled)
            }
        }
    }

    pub fn logits_forward(&self, f: &mut Forward, batch: &[&Example]) -> Result<Var> {
        let joint = self.joint_forward(f, batch)?;
        Ok(fusion::head_forward(f, joint))
    }

    /// Class predictions with dropout off.
    pub fn predict(&self, examples: &[Example], batch_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let mut f = Forward::eval(&self.params);
            let refs: Vec<&Example> = chunk.iter().collect();
            let logits = self.logits_forward(&mut f, &refs)?;
            let m = f.value(logits);
            out.extend((0..m.rows()).map(|r| fusion::argmax(m.row(r))));
        }
        Ok(out)
    }

    /// Projected (text, image) embeddings for contrastive pretraining; the
    /// text side encodes each example's caption.
    pub fn contrastive_forward(&self, f: &mut Forward, batch: &[&Example]) -> Result<(Var, Var, Var)> {
        let t = &self.config.text;
        let ids = batch
            .iter()
            .map(|e| {
                let c = e.caption.as_deref().ok_or_else(|| Error::Incompatible(format!("record {} has no usable caption", e.id)))?;
                Ok(tokenize(c, t.vocab_size, t.max_seq_len))
            })
            .collect::<Result<Vec<_>>>()?;
        let text = text_forward(f, TEXT_PREFIX, t, &ids)?;
        let image = self.encode_images(f, batch)?;
        let te = layers::linear(f, &format!("{CONTRASTIVE_PREFIX}/text_proj"), text.pooled);
        let ie = layers::linear(f, &format!("{CONTRASTIVE_PREFIX}/image_proj"), image.pooled);
        let log_tau = f.param(&format!("{CONTRASTIVE_PREFIX}/log_tau"));
        Ok((te, ie, log_tau))
    }

    /// Caption token ids for the decoder vocabulary.
    pub fn caption_ids(&self, example: &Example) -> Result<Vec<usize>> {
        let c = &self.config.caption;
        let caption =
            example.caption.as_deref().ok_or_else(|| Error::Incompatible(format!("record {} has no usable caption", example.id)))?;
        Ok(tokenize(caption, c.vocab_size, c.max_seq_len))
    }
}

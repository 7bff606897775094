//! Corpus data model, label schemes and dataset-construction rules.

mod caption;
mod image;
mod io;
mod leakage;
mod sampling;
mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use caption::{clean_caption, MIN_CAPTION_CHARS};
pub use image::{preprocess_image, resize_bilinear, resize_region, Image, ImageMode};
pub use io::{load_blocklist, load_corpus, load_politicians, read_records, write_corpus, RecordLine};
pub use leakage::{filter_leakage, registrable_domain, LeakageReport};
pub use sampling::{balance_subsample, sample_triplets, split_by_cluster, TripletOptions};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticCorpus};

/// Five-point ideology scale, ordered from left to right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdeologyLabel {
    Left,
    LeanLeft,
    Center,
    LeanRight,
    Right,
}

impl IdeologyLabel {
    pub const ALL: [IdeologyLabel; 5] = [Self::Left, Self::LeanLeft, Self::Center, Self::LeanRight, Self::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::LeanLeft => "lean_left",
            Self::Center => "center",
            Self::LeanRight => "lean_right",
            Self::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| Error::InvalidInput(format!("unknown ideology label {s:?}")))
    }

    /// Column title used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Left => "Left",
            Self::LeanLeft => "Lean Left",
            Self::Center => "Center",
            Self::LeanRight => "Lean Right",
            Self::Right => "Right",
        }
    }

    pub fn coarse(self) -> CoarseLabel {
        match self {
            Self::Left | Self::LeanLeft => CoarseLabel::Left,
            Self::Center => CoarseLabel::Center,
            Self::LeanRight | Self::Right => CoarseLabel::Right,
        }
    }
}

impl fmt::Display for IdeologyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Three-way scale; the binary scheme is this with `Center` excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseLabel {
    Left,
    Center,
    Right,
}

impl From<CoarseLabel> for IdeologyLabel {
    fn from(c: CoarseLabel) -> Self {
        match c {
            CoarseLabel::Left => IdeologyLabel::Left,
            CoarseLabel::Center => IdeologyLabel::Center,
            CoarseLabel::Right => IdeologyLabel::Right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    Five,
    Three,
    Binary,
}

impl LabelScheme {
    pub fn n_classes(self) -> usize {
        match self {
            Self::Five => 5,
            Self::Three => 3,
            Self::Binary => 2,
        }
    }

    pub fn for_classes(n: usize) -> Result<Self> {
        match n {
            5 => Ok(Self::Five),
            3 => Ok(Self::Three),
            2 => Ok(Self::Binary),
            _ => Err(Error::Config(format!("n_classes must be 2, 3 or 5, got {n}"))),
        }
    }

    /// Labels of the scheme in class-index order.
    pub fn labels(self) -> Vec<IdeologyLabel> {
        match self {
            Self::Five => IdeologyLabel::ALL.to_vec(),
            Self::Three => vec![IdeologyLabel::Left, IdeologyLabel::Center, IdeologyLabel::Right],
            Self::Binary => vec![IdeologyLabel::Left, IdeologyLabel::Right],
        }
    }

    pub fn class_names(self) -> Vec<String> {
        self.labels().into_iter().map(|l| l.display_name().to_string()).collect()
    }

    /// Class index of a label after mapping it into this scheme.
    pub fn class_index(self, label: IdeologyLabel) -> Option<usize> {
        let mapped = map_label(label, self)?;
        self.labels().iter().position(|&l| l == mapped)
    }
}

/// Maps a five-point label into `scheme`. Coarse results are expressed as
/// their five-point counterparts (`Left`, `Center`, `Right`); `None` means the
/// label is excluded (center under the binary scheme).
pub fn map_label(label: IdeologyLabel, scheme: LabelScheme) -> Option<IdeologyLabel> {
    match scheme {
        LabelScheme::Five => Some(label),
        LabelScheme::Three => Some(label.coarse().into()),
        LabelScheme::Binary => match label.coarse() {
            CoarseLabel::Center => None,
            c => Some(c.into()),
        },
    }
}

/// Rewrites every label into `scheme`, dropping records it excludes.
pub fn relabel(records: &[DocumentRecord], scheme: LabelScheme) -> Vec<DocumentRecord> {
    records.iter().filter_map(|r| map_label(r.label, scheme).map(|label| DocumentRecord { label, ..r.clone() })).collect()
}

/// Relabels posts by their author's binned DW-NOMINATE score, matching
/// `source` against `handle` case-insensitively with any leading `@` dropped.
pub fn label_by_politician(records: &[DocumentRecord], politicians: &[PoliticianRecord]) -> Result<Vec<DocumentRecord>> {
    let norm = |h: &str| h.trim().trim_start_matches('@').to_lowercase();
    let mut by_handle = std::collections::HashMap::new();
    for p in politicians {
        by_handle.insert(norm(&p.handle), p.label()?);
    }
    records
        .iter()
        .map(|r| {
            let label = by_handle
                .get(&norm(&r.source))
                .ok_or_else(|| Error::InvalidInput(format!("record {}: source {:?} is not in the politician table", r.id, r.source)))?;
            Ok(DocumentRecord { label: (*label).into(), ..r.clone() })
        })
        .collect()
}

/// Bins a first-dimension DW-NOMINATE score: `< -0.2` left, `> 0.2` right,
/// center otherwise (both boundaries included in center).
pub fn bin_dw_nominate(score: f64) -> Result<CoarseLabel> {
    if !score.is_finite() {
        return Err(Error::InvalidInput(format!("DW-NOMINATE score must be finite, got {score}")));
    }
    Ok(if score < -0.2 {
        CoarseLabel::Left
    } else if score > 0.2 {
        CoarseLabel::Right
    } else {
        CoarseLabel::Center
    })
}

/// Face bounding box in pixel units with its saliency rank (1 = most salient).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, f64, f64, u32)", into = "(f64, f64, f64, f64, u32)")]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub saliency_rank: u32,
}

impl From<(f64, f64, f64, f64, u32)> for FaceBox {
    fn from((x, y, w, h, saliency_rank): (f64, f64, f64, f64, u32)) -> Self {
        Self { x, y, w, h, saliency_rank }
    }
}

impl From<FaceBox> for (f64, f64, f64, f64, u32) {
    fn from(b: FaceBox) -> Self {
        (b.x, b.y, b.w, b.h, b.saliency_rank)
    }
}

impl FaceBox {
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self { x: self.x * sx, y: self.y * sy, w: self.w * sx, h: self.h * sy, saliency_rank: self.saliency_rank }
    }
}

/// One corpus row: text, optional caption and image, label and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentRecord {
    pub id: String,
    pub text: String,
    pub caption: Option<String>,
    pub image: Option<Image>,
    pub image_path: Option<String>,
    pub source: String,
    pub label: IdeologyLabel,
    pub story_id: Option<String>,
    pub face_boxes: Vec<FaceBox>,
    pub url: Option<String>,
}

impl DocumentRecord {
    /// Checks the face-box invariants against the attached image.
    pub fn validate(&self) -> Result<()> {
        let mut ranks: Vec<u32> = self.face_boxes.iter().map(|b| b.saliency_rank).collect();
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(i, &r)| r as usize != i + 1) {
            return Err(Error::InvalidInput(format!(
                "record {}: face saliency ranks must be a permutation of 1..{}",
                self.id,
                ranks.len()
            )));
        }
        if let Some(img) = &self.image {
            const SLACK: f64 = 1e-6;
            for b in &self.face_boxes {
                let inside = b.x >= -SLACK
                    && b.y >= -SLACK
                    && b.w > 0.0
                    && b.h > 0.0
                    && b.x + b.w <= img.width() as f64 + SLACK
                    && b.y + b.h <= img.height() as f64 + SLACK;
                if !inside {
                    return Err(Error::InvalidInput(format!("record {}: face box {b:?} outside image", self.id)));
                }
            }
        }
        Ok(())
    }

    pub fn most_salient_face(&self) -> Option<&FaceBox> {
        self.face_boxes.iter().min_by_key(|b| b.saliency_rank)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub id: String,
    pub label: IdeologyLabel,
}

/// Documents covering one story across outlets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryCluster {
    pub story_id: String,
    pub members: Vec<ClusterMember>,
}

impl StoryCluster {
    /// Groups records by `story_id`, in order of first appearance. Records
    /// without a story are skipped.
    pub fn from_records(records: &[DocumentRecord]) -> Vec<StoryCluster> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: std::collections::HashMap<String, Vec<ClusterMember>> = Default::default();
        for r in records {
            let Some(story) = &r.story_id else { continue };
            let entry = groups.entry(story.clone()).or_insert_with(|| {
                order.push(story.clone());
                Vec::new()
            });
            entry.push(ClusterMember { id: r.id.clone(), label: r.label });
        }
        order
            .into_iter()
            .map(|story_id| {
                let members = groups.remove(&story_id).unwrap_or_default();
                StoryCluster { story_id, members }
            })
            .collect()
    }
}

/// Anchor/positive/negative document ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NewsTriplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoliticianRecord {
    pub handle: String,
    pub dw_nominate: f64,
}

impl PoliticianRecord {
    pub fn label(&self) -> Result<CoarseLabel> {
        bin_dw_nominate(self.dw_nominate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_ordered_and_named() {
        let all = IdeologyLabel::ALL;
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        let names: Vec<_> = all.iter().map(|l| serde_json::to_string(l).unwrap()).collect();
        assert_eq!(names, ["\"left\"", "\"lean_left\"", "\"center\"", "\"lean_right\"", "\"right\""]);
        for l in all {
            assert_eq!(IdeologyLabel::parse(l.as_str()).unwrap(), l);
        }
    }

    #[test]
    fn dw_nominate_binning() {
        assert_eq!(bin_dw_nominate(0.403).unwrap(), CoarseLabel::Right);
        assert_eq!(bin_dw_nominate(-0.343).unwrap(), CoarseLabel::Left);
        assert_eq!(bin_dw_nominate(-0.2).unwrap(), CoarseLabel::Center);
        assert_eq!(bin_dw_nominate(0.2).unwrap(), CoarseLabel::Center);
        assert_eq!(bin_dw_nominate(0.2000001).unwrap(), CoarseLabel::Right);
        assert!(bin_dw_nominate(f64::NAN).is_err());
        assert!(bin_dw_nominate(f64::INFINITY).is_err());
    }

    #[test]
    fn politician_labels() {
        let post = |id: &str, source: &str| DocumentRecord {
            id: id.into(),
            text: String::new(),
            caption: None,
            image: None,
            image_path: None,
            source: source.into(),
            label: IdeologyLabel::Center,
            story_id: None,
            face_boxes: vec![],
            url: None,
        };
        let table = [
            PoliticianRecord { handle: "@SenA".into(), dw_nominate: 0.403 },
            PoliticianRecord { handle: "repb".into(), dw_nominate: -0.343 },
        ];
        let out = label_by_politician(&[post("1", "sena"), post("2", "@RepB")], &table).unwrap();
        assert_eq!(out[0].label, IdeologyLabel::Right);
        assert_eq!(out[1].label, IdeologyLabel::Left);
        assert!(label_by_politician(&[post("3", "nobody")], &table).is_err());
    }

    #[test]
    fn label_mapping() {
        use IdeologyLabel::*;
        assert_eq!(map_label(LeanLeft, LabelScheme::Three), Some(Left));
        assert_eq!(map_label(Center, LabelScheme::Binary), None);
        assert_eq!(map_label(Right, LabelScheme::Five), Some(Right));
        assert_eq!(map_label(LeanRight, LabelScheme::Binary), Some(Right));
        assert_eq!(LabelScheme::Three.class_index(LeanRight), Some(2));
        assert_eq!(LabelScheme::Binary.class_index(Right), Some(1));
        assert_eq!(LabelScheme::Binary.class_index(Center), None);
        assert_eq!(LabelScheme::Five.class_index(Center), Some(2));
    }

    #[test]
    fn face_rank_permutation_is_enforced() {
        let mut rec = DocumentRecord {
            id: "d".into(),
            text: String::new(),
            caption: None,
            image: Some(Image::zeros(8, 8)),
            image_path: None,
            source: "s".into(),
            label: IdeologyLabel::Left,
            story_id: None,
            face_boxes: vec![FaceBox::from((0.0, 0.0, 4.0, 4.0, 2)), FaceBox::from((4.0, 4.0, 4.0, 4.0, 1))],
            url: None,
        };
        assert!(rec.validate().is_ok());
        rec.face_boxes[0].saliency_rank = 3;
        assert!(rec.validate().is_err());
        rec.face_boxes[0].saliency_rank = 2;
        rec.face_boxes[1].w = 5.0;
        assert!(rec.validate().is_err());
    }

    #[test]
    fn clusters_group_by_story() {
        let mk = |id: &str, story: Option<&str>| DocumentRecord {
            id: id.into(),
            text: String::new(),
            caption: None,
            image: None,
            image_path: None,
            source: "s".into(),
            label: IdeologyLabel::Left,
            story_id: story.map(str::to_string),
            face_boxes: vec![],
            url: None,
        };
        let recs = vec![mk("a", Some("s2")), mk("b", Some("s1")), mk("c", None), mk("d", Some("s2"))];
        let clusters = StoryCluster::from_records(&recs);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].story_id, "s2");
        assert_eq!(clusters[0].members.len(), 2);
    }
}

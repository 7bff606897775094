//! Seeded synthetic corpora with a planted, controllable label signal.
//!
//! Text: each class owns a small set of marker words; every body token is a
//! marker of the record's class with probability `signal_strength_text`,
//! otherwise a class-neutral filler word. Each story adds a few topic words
//! shared by all of its members.
//!
//! Image: a coloured square whose position and colour depend on the class,
//! over a grey background with Gaussian pixel noise of standard deviation
//! `0.6 · (1 − signal_strength_image)`. The square doubles as the record's
//! single face box.
//!
//! With `complementary` set, half of every class carries its label only in
//! the text (the image is an empty noisy frame) and the other half only in
//! the image (the text is filler), so neither modality alone can reach
//! perfect accuracy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{ClusterMember, DocumentRecord, FaceBox, IdeologyLabel, LabelScheme, StoryCluster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_records: usize,
    pub n_classes: usize,
    pub resolution: usize,
    /// Number of distinct synthetic words.
    pub vocab_size: usize,
    pub signal_strength_text: f64,
    pub signal_strength_image: f64,
    pub complementary: bool,
    pub seed: u64,
    /// Records of each class inside one story cluster.
    pub docs_per_class_per_cluster: usize,
    /// Body tokens per document (story words come on top).
    pub text_length: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_records: 100,
            n_classes: 5,
            resolution: 64,
            vocab_size: 400,
            signal_strength_text: 0.5,
            signal_strength_image: 0.5,
            complementary: false,
            seed: 0,
            docs_per_class_per_cluster: 1,
            text_length: 20,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        LabelScheme::for_classes(self.n_classes)?;
        if self.n_records == 0 || self.resolution < 4 || self.text_length == 0 || self.docs_per_class_per_cluster == 0 {
            return fail("n_records, text_length, docs_per_class_per_cluster must be positive and resolution >= 4".into());
        }
        let cluster_size = self.n_classes * self.docs_per_class_per_cluster;
        if !self.n_records.is_multiple_of(cluster_size) {
            return fail(format!(
                "n_records {} must be divisible by n_classes x docs_per_class_per_cluster = {cluster_size}",
                self.n_records
            ));
        }
        if self.vocab_size < 8 * self.n_classes {
            return fail(format!("vocab_size must be at least {}", 8 * self.n_classes));
        }
        for (name, s) in [("signal_strength_text", self.signal_strength_text), ("signal_strength_image", self.signal_strength_image)] {
            if !(0.0..=1.0).contains(&s) {
                return fail(format!("{name} must lie in [0, 1], got {s}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<DocumentRecord>,
    pub clusters: Vec<StoryCluster>,
}

const STORY_WORDS_PER_DOC: usize = 3;
const STORY_TOPIC_SIZE: usize = 4;

fn word(i: usize) -> String {
    format!("w{i:04}")
}

fn class_color(label: IdeologyLabel) -> [f32; 3] {
    match label {
        IdeologyLabel::Left => [0.10, 0.20, 0.90],
        IdeologyLabel::LeanLeft => [0.15, 0.80, 0.85],
        IdeologyLabel::Center => [0.95, 0.95, 0.95],
        IdeologyLabel::LeanRight => [0.95, 0.60, 0.10],
        IdeologyLabel::Right => [0.90, 0.10, 0.10],
    }
}

fn color_name(label: IdeologyLabel) -> &'static str {
    match label {
        IdeologyLabel::Left => "blue",
        IdeologyLabel::LeanLeft => "teal",
        IdeologyLabel::Center => "white",
        IdeologyLabel::LeanRight => "orange",
        IdeologyLabel::Right => "red",
    }
}

/// Top-left corner (row, col) of the class square and a position name.
fn block_position(label: IdeologyLabel, res: usize, block: usize) -> (usize, usize, &'static str) {
    let far = res - block;
    let mid = (res - block) / 2;
    match label {
        IdeologyLabel::Left => (0, 0, "top left corner"),
        IdeologyLabel::LeanLeft => (far, 0, "bottom left corner"),
        IdeologyLabel::Center => (mid, mid, "middle"),
        IdeologyLabel::LeanRight => (far, far, "bottom right corner"),
        IdeologyLabel::Right => (0, far, "top right corner"),
    }
}

struct Vocabulary {
    class_words: Vec<Vec<usize>>,
    story_pool: Vec<usize>,
    filler: Vec<usize>,
}

impl Vocabulary {
    fn new(vocab_size: usize, n_classes: usize) -> Self {
        let per_class = (vocab_size / (4 * n_classes)).max(2);
        let class_words: Vec<Vec<usize>> = (0..n_classes).map(|c| (c * per_class..(c + 1) * per_class).collect()).collect();
        let start = n_classes * per_class;
        let story_end = start + vocab_size / 4;
        Self { class_words, story_pool: (start..story_end).collect(), filler: (story_end..vocab_size).collect() }
    }
}

/// Generates a balanced synthetic corpus; identical configs give identical output.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels = LabelScheme::for_classes(config.n_classes)?.labels();
    let vocab = Vocabulary::new(config.vocab_size, config.n_classes);
    let res = config.resolution;
    let block = (res / 4).max(1);
    let noise = Normal::new(0.0, 0.6 * (1.0 - config.signal_strength_image)).expect("finite std");
    let per_cluster = config.n_classes * config.docs_per_class_per_cluster;
    let n_clusters = config.n_records / per_cluster;

    let mut records = Vec::with_capacity(config.n_records);
    let mut clusters = Vec::with_capacity(n_clusters);
    let mut seen_per_class = vec![0usize; config.n_classes];
    for ci in 0..n_clusters {
        let story_id = format!("story{ci:04}");
        let topic: Vec<usize> = vocab.story_pool.choose_multiple(&mut rng, STORY_TOPIC_SIZE).copied().collect();
        let mut members = Vec::with_capacity(per_cluster);
        for (class, &label) in labels.iter().enumerate() {
            for copy in 0..config.docs_per_class_per_cluster {
                let ordinal = seen_per_class[class];
                seen_per_class[class] += 1;
                let (text_signal, image_signal) = if config.complementary {
                    let text_carrier = (ordinal + class).is_multiple_of(2);
                    (text_carrier, !text_carrier)
                } else {
                    (true, true)
                };
                let id = format!("syn{:05}", records.len());

                let mut tokens: Vec<usize> = (0..STORY_WORDS_PER_DOC).map(|_| topic[rng.gen_range(0..topic.len())]).collect();
                for _ in 0..config.text_length {
                    let t = if text_signal && rng.gen::<f64>() < config.signal_strength_text {
                        *vocab.class_words[class].choose(&mut rng).expect("non-empty class words")
                    } else {
                        *vocab.filler.choose(&mut rng).expect("non-empty filler")
                    };
                    tokens.push(t);
                }
                tokens.shuffle(&mut rng);
                let text = tokens.into_iter().map(word).collect::<Vec<_>>().join(" ");

                let mut image = Image::zeros(res, res);
                for y in 0..res {
                    for x in 0..res {
                        for c in 0..3 {
                            image.set(y, x, c, 0.45 + noise.sample(&mut rng) as f32);
                        }
                    }
                }
                let (caption, face_boxes) = if image_signal {
                    let (by, bx, where_) = block_position(label, res, block);
                    let color = class_color(label);
                    for y in by..by + block {
                        for x in bx..bx + block {
                            for (c, &cv) in color.iter().enumerate() {
                                image.set(y, x, c, cv + noise.sample(&mut rng) as f32);
                            }
                        }
                    }
                    (
                        format!("A {} square sits near the {} of a grainy photo.", color_name(label), where_),
                        vec![FaceBox { x: bx as f64, y: by as f64, w: block as f64, h: block as f64, saliency_rank: 1 }],
                    )
                } else {
                    ("A grainy photo with no distinct shape anywhere in the frame.".to_string(), Vec::new())
                };

                let outlet = format!("{}news{copy}", label.as_str().replace('_', ""));
                members.push(ClusterMember { id: id.clone(), label });
                records.push(DocumentRecord {
                    url: Some(format!("https://www.{outlet}.com/{story_id}/{id}")),
                    id,
                    text,
                    caption: Some(caption),
                    image: Some(image),
                    image_path: None,
                    source: outlet,
                    label,
                    story_id: Some(story_id.clone()),
                    face_boxes,
                });
            }
        }
        clusters.push(StoryCluster { story_id, members });
    }
    Ok(SyntheticCorpus { records, clusters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn balanced_counts_and_clusters() {
        let cfg = SyntheticConfig { n_records: 100, n_classes: 5, resolution: 16, ..Default::default() };
        let c = generate_synthetic(&cfg).unwrap();
        assert_eq!(c.records.len(), 100);
        assert_eq!(c.clusters.len(), 20);
        let mut counts: BTreeMap<IdeologyLabel, usize> = BTreeMap::new();
        for r in &c.records {
            *counts.entry(r.label).or_default() += 1;
            r.validate().unwrap();
            assert!(r.caption.as_ref().unwrap().len() >= 30);
        }
        assert!(counts.values().all(|&n| n == 20));
        assert!(c.clusters.iter().all(|cl| cl.members.len() == 5));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SyntheticConfig { n_records: 20, resolution: 8, ..Default::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn config_violations_are_rejected() {
        let bad = |c: SyntheticConfig| generate_synthetic(&c).is_err();
        assert!(bad(SyntheticConfig { n_records: 101, ..Default::default() }));
        assert!(bad(SyntheticConfig { n_classes: 4, ..Default::default() }));
        assert!(bad(SyntheticConfig { signal_strength_text: 1.5, ..Default::default() }));
        assert!(bad(SyntheticConfig { vocab_size: 10, ..Default::default() }));
        assert!(bad(SyntheticConfig { n_records: 45, docs_per_class_per_cluster: 2, ..Default::default() }));
    }

    #[test]
    fn complementary_halves_carry_one_modality() {
        let cfg = SyntheticConfig { n_records: 40, n_classes: 2, resolution: 8, complementary: true, ..Default::default() };
        let c = generate_synthetic(&cfg).unwrap();
        let with_face = c.records.iter().filter(|r| !r.face_boxes.is_empty()).count();
        assert_eq!(with_face, 20);
        for label in [IdeologyLabel::Left, IdeologyLabel::Right] {
            let n = c.records.iter().filter(|r| r.label == label && !r.face_boxes.is_empty()).count();
            assert_eq!(n, 10);
        }
    }

    fn class_of(r: &DocumentRecord, labels: &[IdeologyLabel]) -> usize {
        labels.iter().position(|&l| l == r.label).unwrap()
    }

    /// Multinomial naive Bayes with add-one smoothing, fit on `train`.
    struct NaiveBayes {
        log_prob: Vec<BTreeMap<String, f64>>,
        unseen: Vec<f64>,
    }

    impl NaiveBayes {
        fn fit(train: &[DocumentRecord], labels: &[IdeologyLabel]) -> Self {
            let mut counts = vec![BTreeMap::<String, f64>::new(); labels.len()];
            let mut vocab = std::collections::BTreeSet::new();
            for r in train {
                for w in r.text.split(' ') {
                    *counts[class_of(r, labels)].entry(w.to_string()).or_default() += 1.0;
                    vocab.insert(w.to_string());
                }
            }
            let v = vocab.len() as f64;
            let mut log_prob = Vec::new();
            let mut unseen = Vec::new();
            for c in counts {
                let total: f64 = c.values().sum();
                unseen.push((1.0 / (total + v)).ln());
                log_prob.push(c.into_iter().map(|(w, n)| (w, ((n + 1.0) / (total + v)).ln())).collect());
            }
            Self { log_prob, unseen }
        }

        fn scores(&self, text: &str) -> Vec<f64> {
            (0..self.unseen.len()).map(|c| text.split(' ').map(|w| *self.log_prob[c].get(w).unwrap_or(&self.unseen[c])).sum()).collect()
        }
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best
    }

    fn centroids(train: &[DocumentRecord], n: usize, labels: &[IdeologyLabel]) -> Vec<Vec<f64>> {
        let dim = train[0].image.as_ref().unwrap().data().len();
        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0.0; n];
        for r in train {
            let c = class_of(r, labels);
            counts[c] += 1.0;
            for (s, &v) in sums[c].iter_mut().zip(r.image.as_ref().unwrap().data()) {
                *s += v as f64;
            }
        }
        sums.into_iter().zip(counts).map(|(s, k)| s.into_iter().map(|x| x / k).collect()).collect()
    }

    fn image_scores(r: &DocumentRecord, cents: &[Vec<f64>]) -> Vec<f64> {
        let x = r.image.as_ref().unwrap().data();
        cents.iter().map(|c| -c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>()).collect()
    }

    fn accuracy(test: &[DocumentRecord], labels: &[IdeologyLabel], predict: impl Fn(&DocumentRecord) -> usize) -> f64 {
        test.iter().filter(|r| predict(r) == class_of(r, labels)).count() as f64 / test.len() as f64
    }

    #[test]
    fn full_text_signal_is_separable_by_naive_bayes() {
        let cfg = SyntheticConfig { n_records: 200, resolution: 8, signal_strength_text: 1.0, seed: 4, ..Default::default() };
        let c = generate_synthetic(&cfg).unwrap();
        let labels = LabelScheme::Five.labels();
        let (train, test) = c.records.split_at(100);
        let nb = NaiveBayes::fit(train, &labels);
        assert!(accuracy(test, &labels, |r| argmax(&nb.scores(&r.text))) >= 0.95);
    }

    #[test]
    fn complementary_modalities_beat_either_alone() {
        let cfg = SyntheticConfig {
            n_records: 390,
            n_classes: 3,
            resolution: 8,
            complementary: true,
            signal_strength_text: 0.8,
            signal_strength_image: 0.8,
            seed: 2,
            ..Default::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        let labels = LabelScheme::Three.labels();
        let (train, test) = c.records.split_at(195);
        let nb = NaiveBayes::fit(train, &labels);
        let cents = centroids(train, 3, &labels);
        let text_acc = accuracy(test, &labels, |r| argmax(&nb.scores(&r.text)));
        let image_acc = accuracy(test, &labels, |r| argmax(&image_scores(r, &cents)));
        // Trust whichever modality is more decisive relative to its runner-up.
        let margin = |s: &[f64]| {
            let mut v = s.to_vec();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v[0] - v[1]
        };
        let joint_acc = accuracy(test, &labels, |r| {
            let t = nb.scores(&r.text);
            let i = image_scores(r, &cents);
            if margin(&t) > margin(&i) {
                argmax(&t)
            } else {
                argmax(&i)
            }
        });
        assert!(text_acc < 0.85 && image_acc < 0.85, "text {text_acc} image {image_acc}");
        assert!(joint_acc > text_acc.max(image_acc) + 0.1, "joint {joint_acc} text {text_acc} image {image_acc}");
    }
}

//! Descriptive statistics over image-annotation records and annotator
//! agreement.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::IdeologyLabel;
use crate::error::{Error, Result};
use crate::trainer::metrics::csv_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageClass {
    Regular,
    Removed,
    Banner,
    Cartoon,
    Collage,
    Composite,
}

impl ImageClass {
    pub const ALL: [ImageClass; 6] = [Self::Regular, Self::Removed, Self::Banner, Self::Cartoon, Self::Collage, Self::Composite];

    pub fn display_name(self) -> &'static str {
        match self {
            Self::Regular => "Regular",
            Self::Removed => "Removed",
            Self::Banner => "Banner",
            Self::Cartoon => "Cartoon",
            Self::Collage => "Collage",
            Self::Composite => "Composite",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Positive,
    Negative,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 3] = [Self::Positive, Self::Negative, Self::Neutral];

    pub fn display_name(self) -> &'static str {
        match self {
            Self::Positive => "Positive",
            Self::Negative => "Negative",
            Self::Neutral => "Neutral",
        }
    }
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub record_id: String,
    pub label: IdeologyLabel,
    pub face_count: u32,
    pub image_class: ImageClass,
    /// One entry per face whose emotion was recorded.
    #[serde(default)]
    pub emotions: Vec<Emotion>,
    /// Named figures visible in the image.
    #[serde(default)]
    pub figures: Vec<String>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.emotions.len() > self.face_count as usize {
            return Err(Error::InvalidInput(format!(
                "annotation {}: {} emotions for {} faces",
                self.record_id,
                self.emotions.len(),
                self.face_count
            )));
        }
        Ok(())
    }
}

pub fn read_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::InvalidInput(format!("annotation line {}: {e}", n + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_annotations(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Rows of values under one column per ideology present in the input, in
/// scale order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    /// Header of the row-name column.
    pub row_header: String,
    pub columns: Vec<IdeologyLabel>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub values: Vec<f64>,
}

impl Table {
    pub fn get(&self, row: &str, column: IdeologyLabel) -> Option<f64> {
        let c = self.columns.iter().position(|&l| l == column)?;
        self.rows.iter().find(|r| r.name == row).map(|r| r.values[c])
    }

    /// Values of one ideology column for the named rows.
    pub fn column(&self, column: IdeologyLabel, rows: &[&str]) -> Option<Vec<f64>> {
        rows.iter().map(|r| self.get(r, column)).collect()
    }

    /// CSV with a header row; values rounded to `decimals`.
    pub fn write_csv<W: Write>(&self, out: W, decimals: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header = std::iter::once(self.row_header.clone()).chain(self.columns.iter().map(|l| l.display_name().to_string()));
        w.write_record(header).map_err(csv_error)?;
        for row in &self.rows {
            let cells = std::iter::once(row.name.clone()).chain(row.values.iter().map(|v| format!("{v:.decimals$}")));
            w.write_record(cells).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn by_ideology(annotations: &[AnnotationRecord]) -> BTreeMap<IdeologyLabel, Vec<&AnnotationRecord>> {
    let mut groups: BTreeMap<IdeologyLabel, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in annotations {
        groups.entry(a.label).or_default().push(a);
    }
    groups
}

fn require_non_empty(annotations: &[AnnotationRecord]) -> Result<()> {
    if annotations.is_empty() {
        return Err(Error::InvalidInput("no annotation records".into()));
    }
    Ok(())
}

pub const FACE_BINS: [&str; 6] = ["No Face", "1 face", "2 faces", "3 faces", "4 faces", "5+ faces"];
pub const MEAN_FACES: &str = "Mean # faces";

/// Percentage of images per face-count bin, plus the exact mean count.
pub fn face_count_table(annotations: &[AnnotationRecord]) -> Result<Table> {
    require_non_empty(annotations)?;
    let groups = by_ideology(annotations);
    let mut rows: Vec<TableRow> = FACE_BINS.iter().map(|b| TableRow { name: b.to_string(), values: Vec::new() }).collect();
    let mut means = Vec::new();
    for docs in groups.values() {
        let mut counts = [0usize; 6];
        for a in docs {
            counts[(a.face_count as usize).min(5)] += 1;
        }
        for (row, &c) in rows.iter_mut().zip(&counts) {
            row.values.push(100.0 * c as f64 / docs.len() as f64);
        }
        means.push(docs.iter().map(|a| a.face_count as f64).sum::<f64>() / docs.len() as f64);
    }
    rows.push(TableRow { name: MEAN_FACES.into(), values: means });
    Ok(Table { row_header: "Faces".into(), columns: groups.keys().copied().collect(), rows })
}

/// Percentage of images per image class.
pub fn image_class_table(annotations: &[AnnotationRecord]) -> Result<Table> {
    require_non_empty(annotations)?;
    let groups = by_ideology(annotations);
    let rows = ImageClass::ALL
        .iter()
        .map(|&class| TableRow {
            name: class.display_name().into(),
            values: groups
                .values()
                .map(|docs| 100.0 * docs.iter().filter(|a| a.image_class == class).count() as f64 / docs.len() as f64)
                .collect(),
        })
        .collect();
    Ok(Table { row_header: "Image class".into(), columns: groups.keys().copied().collect(), rows })
}

/// Share of annotated faces showing each emotion. Ideologies without any
/// annotated face are omitted.
pub fn emotion_distribution(annotations: &[AnnotationRecord]) -> Result<Table> {
    require_non_empty(annotations)?;
    let mut counts: BTreeMap<IdeologyLabel, [usize; 3]> = BTreeMap::new();
    for a in annotations.iter().filter(|a| a.face_count > 0 && !a.emotions.is_empty()) {
        let c = counts.entry(a.label).or_default();
        for e in &a.emotions {
            c[Emotion::ALL.iter().position(|x| x == e).expect("all emotions listed")] += 1;
        }
    }
    let rows = Emotion::ALL
        .iter()
        .enumerate()
        .map(|(k, e)| TableRow {
            name: e.display_name().into(),
            values: counts.values().map(|c| c[k] as f64 / c.iter().sum::<usize>() as f64).collect(),
        })
        .collect();
    Ok(Table { row_header: "Emotion".into(), columns: counts.keys().copied().collect(), rows })
}

/// Percentage of images listing `figure`, and the mean number of other
/// people (`face_count − 1`) in those images (0 when there are none).
pub fn figure_cooccurrence(annotations: &[AnnotationRecord], figure: &str) -> Result<Table> {
    require_non_empty(annotations)?;
    let groups = by_ideology(annotations);
    let mut share = Vec::new();
    let mut co = Vec::new();
    for docs in groups.values() {
        let with: Vec<&&AnnotationRecord> = docs.iter().filter(|a| a.figures.iter().any(|f| f == figure)).collect();
        share.push(100.0 * with.len() as f64 / docs.len() as f64);
        co.push(if with.is_empty() { 0.0 } else { with.iter().map(|a| a.face_count as f64 - 1.0).sum::<f64>() / with.len() as f64 });
    }
    Ok(Table {
        row_header: "Figure".into(),
        columns: groups.keys().copied().collect(),
        rows: vec![TableRow { name: format!("Contains {figure}"), values: share }, TableRow { name: "Mean co-persons".into(), values: co }],
    })
}

/// Chance-corrected agreement `(p_o − p_e) / (1 − p_e)`. When `p_e = 1`
/// the result is 1 for perfect agreement and an error otherwise.
pub fn cohens_kappa<T: Eq + Hash>(labels_a: &[T], labels_b: &[T]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::InvalidInput(format!("label lists differ in length: {} vs {}", labels_a.len(), labels_b.len())));
    }
    if labels_a.is_empty() {
        return Err(Error::InvalidInput("label lists are empty".into()));
    }
    let n = labels_a.len() as f64;
    let agree = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count();
    let p_o = agree as f64 / n;
    let mut marginals: HashMap<&T, (usize, usize)> = HashMap::new();
    for (a, b) in labels_a.iter().zip(labels_b) {
        marginals.entry(a).or_default().0 += 1;
        marginals.entry(b).or_default().1 += 1;
    }
    // p_e = chance / total, compared in integers so p_e = 1 is detected exactly
    let chance: usize = marginals.values().map(|&(x, y)| x * y).sum();
    let total = labels_a.len() * labels_a.len();
    if chance == total {
        return if agree == labels_a.len() { Ok(1.0) } else { Err(Error::UndefinedKappa { observed: p_o }) };
    }
    let p_e = chance as f64 / total as f64;
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use IdeologyLabel::*;

    fn ann(label: IdeologyLabel, faces: u32) -> AnnotationRecord {
        AnnotationRecord {
            record_id: format!("{label}-{faces}"),
            label,
            face_count: faces,
            image_class: ImageClass::Regular,
            emotions: vec![],
            figures: vec![],
        }
    }

    #[test]
    fn face_table_hand_counts() {
        let t = face_count_table(&[ann(Left, 1), ann(Left, 1), ann(Left, 2), ann(Left, 6)]).unwrap();
        assert_eq!(t.columns, vec![Left]);
        assert_eq!(t.column(Left, &FACE_BINS).unwrap(), vec![0.0, 50.0, 25.0, 0.0, 0.0, 25.0]);
        assert_eq!(t.get(MEAN_FACES, Left), Some(2.5));
        let single = face_count_table(&[ann(Right, 0)]).unwrap();
        assert_eq!(single.get("No Face", Right), Some(100.0));
    }

    #[test]
    fn image_class_hand_counts() {
        let all = image_class_table(&[ann(Center, 0), ann(Center, 3)]).unwrap();
        assert_eq!(all.get("Regular", Center), Some(100.0));
        use ImageClass::*;
        let mix = [
            (Left, Regular),
            (Left, Regular),
            (Left, Banner),
            (Left, Cartoon),
            (Right, Regular),
            (Right, Collage),
            (Right, Collage),
            (Right, Composite),
            (Right, Removed),
            (Right, Regular),
        ];
        let records: Vec<AnnotationRecord> = mix.iter().map(|&(l, c)| AnnotationRecord { image_class: c, ..ann(l, 1) }).collect();
        let t = image_class_table(&records).unwrap();
        assert_eq!(t.columns, vec![Left, Right]);
        let names: Vec<&str> = ImageClass::ALL.iter().map(|c| c.display_name()).collect();
        assert_eq!(t.column(Left, &names).unwrap(), vec![50.0, 0.0, 25.0, 25.0, 0.0, 0.0]);
        let third = 100.0 / 6.0;
        let right = t.column(Right, &names).unwrap();
        let expected = [2.0 * third, third, 0.0, 0.0, 2.0 * third, third];
        assert!(right.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12));
        // LeanLeft, Center etc. have no records and no column
        assert!(t.get("Regular", Center).is_none());
    }

    #[test]
    fn emotion_hand_counts() {
        use Emotion::*;
        let neutral = [AnnotationRecord { emotions: vec![Neutral, Neutral], ..ann(Left, 2) }];
        assert_eq!(emotion_distribution(&neutral).unwrap().get("Neutral", Left), Some(1.0));
        let mix = [
            AnnotationRecord { emotions: vec![Positive, Negative, Neutral], ..ann(Left, 3) },
            AnnotationRecord { emotions: vec![Positive], ..ann(Left, 1) },
            AnnotationRecord { emotions: vec![Negative, Negative], ..ann(Right, 4) },
            ann(Center, 0),
        ];
        let t = emotion_distribution(&mix).unwrap();
        assert_eq!(t.columns, vec![Left, Right]);
        assert_eq!(t.column(Left, &["Positive", "Negative", "Neutral"]).unwrap(), vec![0.5, 0.25, 0.25]);
        assert_eq!(t.get("Negative", Right), Some(1.0));
    }

    #[test]
    fn figure_hand_counts() {
        let fig = |l, faces, has: bool| AnnotationRecord { figures: if has { vec!["Joe Biden".into()] } else { vec![] }, ..ann(l, faces) };
        let absent = figure_cooccurrence(&[fig(Left, 2, false)], "Joe Biden").unwrap();
        assert_eq!(absent.get("Contains Joe Biden", Left), Some(0.0));
        let one = figure_cooccurrence(&[fig(Right, 3, true)], "Joe Biden").unwrap();
        assert_eq!(one.get("Contains Joe Biden", Right), Some(100.0));
        assert_eq!(one.get("Mean co-persons", Right), Some(2.0));
        let six =
            [fig(Left, 1, true), fig(Left, 4, true), fig(Left, 2, false), fig(Right, 2, true), fig(Right, 0, false), fig(Right, 5, false)];
        let t = figure_cooccurrence(&six, "Joe Biden").unwrap();
        assert!((t.get("Contains Joe Biden", Left).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(t.get("Mean co-persons", Left), Some(1.5));
        assert!((t.get("Contains Joe Biden", Right).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(t.get("Mean co-persons", Right), Some(1.0));
    }

    #[test]
    fn kappa_fixtures() {
        assert_eq!(cohens_kappa(&["A", "B", "C", "A"], &["A", "B", "C", "A"]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&["A", "A", "B", "B"], &["A", "B", "A", "B"]).unwrap(), 0.0);
        assert_eq!(cohens_kappa(&["A", "A", "A"], &["A", "A", "A"]).unwrap(), 1.0);
        assert!(matches!(cohens_kappa(&["A"], &["A", "B"]), Err(Error::InvalidInput(_))));
        // p_o = 0.6, p_e = 0.6·0.6 + 0.4·0.4 = 0.52 → κ = 0.08 / 0.48
        let k = cohens_kappa(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
        assert!((k - 0.08 / 0.48).abs() < 1e-12);
    }

    #[test]
    fn annotations_parse_and_validate() {
        let good = r#"{"record_id":"a","label":"left","face_count":2,"image_class":"banner","emotions":["positive"],"figures":["X"]}"#;
        let recs = read_annotations(good.as_bytes()).unwrap();
        assert_eq!(recs[0].image_class, ImageClass::Banner);
        let bad = r#"{"record_id":"a","label":"left","face_count":0,"image_class":"banner","emotions":["positive"]}"#;
        assert!(read_annotations(bad.as_bytes()).is_err());
        let unknown = r#"{"record_id":"a","label":"left","face_count":0,"image_class":"banner","mood":1}"#;
        assert!(read_annotations(unknown.as_bytes()).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = face_count_table(&[ann(Left, 1), ann(LeanRight, 0)]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("Faces,Left,Lean Right"));
        assert_eq!(lines.next(), Some("No Face,0.0,100.0"));
        assert_eq!(text.lines().last(), Some("Mean # faces,1.0,0.0"));
    }

    fn arb_annotation() -> impl Strategy<Value = AnnotationRecord> {
        (0usize..5, 0u32..9, 0usize..6, prop::collection::vec(0usize..3, 0..4), any::<bool>()).prop_map(|(l, faces, c, emo, fig)| {
            let emotions: Vec<Emotion> = emo.into_iter().take(faces as usize).map(|e| Emotion::ALL[e]).collect();
            AnnotationRecord {
                record_id: String::new(),
                label: IdeologyLabel::ALL[l],
                face_count: faces,
                image_class: ImageClass::ALL[c],
                emotions,
                figures: if fig { vec!["F".into()] } else { vec![] },
            }
        })
    }

    proptest! {
        #[test]
        fn tables_match_recount(anns in prop::collection::vec(arb_annotation(), 1..50)) {
            let faces = face_count_table(&anns).unwrap();
            let classes = image_class_table(&anns).unwrap();
            let figures = figure_cooccurrence(&anns, "F").unwrap();
            for label in IdeologyLabel::ALL {
                let docs: Vec<&AnnotationRecord> = anns.iter().filter(|a| a.label == label).collect();
                if docs.is_empty() {
                    prop_assert!(!faces.columns.contains(&label));
                    continue;
                }
                let n = docs.len() as f64;
                let col = faces.column(label, &FACE_BINS).unwrap();
                prop_assert!((col.iter().sum::<f64>() - 100.0).abs() < 1e-9);
                for (bin, v) in col.iter().enumerate() {
                    let k = docs.iter().filter(|a| if bin == 5 { a.face_count >= 5 } else { a.face_count as usize == bin }).count();
                    prop_assert!((v - 100.0 * k as f64 / n).abs() < 1e-12);
                }
                let names: Vec<&str> = ImageClass::ALL.iter().map(|c| c.display_name()).collect();
                let ccol = classes.column(label, &names).unwrap();
                prop_assert!((ccol.iter().sum::<f64>() - 100.0).abs() < 1e-9);
                let with = docs.iter().filter(|a| !a.figures.is_empty()).count();
                prop_assert!((figures.get("Contains F", label).unwrap() - 100.0 * with as f64 / n).abs() < 1e-12);
            }
            if let Ok(emo) = emotion_distribution(&anns) {
                for &label in &emo.columns {
                    let col = emo.column(label, &["Positive", "Negative", "Neutral"]).unwrap();
                    prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn kappa_symmetric_and_relabel_invariant(
            pairs in prop::collection::vec((0u8..4, 0u8..4), 1..40),
            perm in Just([0u8, 1, 2, 3]).prop_shuffle(),
        ) {
            let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let relabel = |v: &[u8]| -> Vec<u8> { v.iter().map(|&x| perm[x as usize]).collect() };
            match (cohens_kappa(&a, &b), cohens_kappa(&b, &a), cohens_kappa(&relabel(&a), &relabel(&b))) {
                (Ok(x), Ok(y), Ok(z)) => {
                    prop_assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
                    prop_assert!((-1.0..=1.0 + 1e-12).contains(&x));
                }
                (Err(_), Err(_), Err(_)) => {}
                other => prop_assert!(false, "inconsistent results {:?}", other),
            }
        }
    }
}

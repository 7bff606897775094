use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{resize_bilinear, Image};
use super::{DocumentRecord, FaceBox, IdeologyLabel, PoliticianRecord};
use crate::error::{Error, Result};

/// One line of a corpus JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordLine {
    pub id: String,
    pub text: String,
    pub caption: Option<String>,
    pub image_path: Option<String>,
    pub source: String,
    pub label: IdeologyLabel,
    pub story_id: Option<String>,
    pub face_boxes: Vec<FaceBox>,
    pub url: Option<String>,
}

impl RecordLine {
    fn from_record(r: &DocumentRecord) -> Self {
        Self {
            id: r.id.clone(),
            text: r.text.clone(),
            caption: r.caption.clone(),
            image_path: r.image_path.clone(),
            source: r.source.clone(),
            label: r.label,
            story_id: r.story_id.clone(),
            face_boxes: r.face_boxes.clone(),
            url: r.url.clone(),
        }
    }
}

/// Parses JSONL record lines without touching images.
pub fn read_records(path: &Path) -> Result<Vec<RecordLine>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn load_png(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("image {} does not exist", path.display())));
    }
    let img = ::image::open(path)?.to_rgb8();
    Ok(Image::from_rgb8(&img))
}

/// Loads a JSONL corpus. Image paths are resolved relative to the JSONL file;
/// every image is resized to `resolution × resolution` and its face boxes are
/// rescaled with it.
pub fn load_corpus(path: &Path, resolution: usize) -> Result<Vec<DocumentRecord>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for line in read_records(path)? {
        if !ids.insert(line.id.clone()) {
            return Err(Error::InvalidInput(format!("duplicate record id {}", line.id)));
        }
        let mut face_boxes = line.face_boxes;
        let image = match &line.image_path {
            Some(p) => {
                let full = base.join(p);
                let raw = load_png(&full)?;
                let sx = resolution as f64 / raw.width() as f64;
                let sy = resolution as f64 / raw.height() as f64;
                face_boxes = face_boxes.iter().map(|b| b.scaled(sx, sy)).collect();
                Some(resize_bilinear(&raw, resolution, resolution))
            }
            None => None,
        };
        let rec = DocumentRecord {
            id: line.id,
            text: line.text,
            caption: line.caption,
            image,
            image_path: line.image_path,
            source: line.source,
            label: line.label,
            story_id: line.story_id,
            face_boxes,
            url: line.url,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

/// Writes `records` to `path` as JSONL; images go to `images/<id>.png` next
/// to it.
pub fn write_corpus(path: &Path, records: &[DocumentRecord]) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let image_dir: PathBuf = base.join("images");
    if records.iter().any(|r| r.image.is_some()) {
        fs::create_dir_all(&image_dir)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let mut line = RecordLine::from_record(r);
        if let Some(img) = &r.image {
            let rel = format!("images/{}.png", r.id);
            img.to_rgb8().save_with_format(base.join(&rel), ::image::ImageFormat::Png)?;
            line.image_path = Some(rel);
        }
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Newline-separated domains; blank lines and `#` comments are ignored.
pub fn load_blocklist(path: &Path) -> Result<BTreeSet<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_ascii_lowercase)
        .collect())
}

pub fn load_politicians(path: &Path) -> Result<Vec<PoliticianRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PoliticianRecord =
            serde_json::from_str(line).map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !p.dw_nominate.is_finite() {
            return Err(Error::InvalidInput(format!("{}: non-finite dw_nominate", p.handle)));
        }
        out.push(p);
    }
    Ok(out)
}

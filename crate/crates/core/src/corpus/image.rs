use serde::{Deserialize, Serialize};

use super::DocumentRecord;
use crate::error::{Error, Result};

/// `H × W × 3` image with values in `[0, 1]`, stored row-major (HWC).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!("{height}x{width}x3 image needs {} values, got {}", height * width * 3, data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self { height: h as usize, width: w as usize, data }
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized from dimensions")
    }
}

/// Bilinear resample of the region `(x, y, w, h)` (pixel units) to `out_h × out_w`.
///
/// Uses pixel-centre alignment, so a region equal to the full image resampled
/// at the same size reproduces the image exactly. Samples outside the image
/// are clamped to the border.
pub fn resize_region(img: &Image, x: f64, y: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::zeros(out_h, out_w);
    if img.height == 0 || img.width == 0 {
        return out;
    }
    let sy = h / out_h as f64;
    let sx = w / out_w as f64;
    let max_y = (img.height - 1) as f64;
    let max_x = (img.width - 1) as f64;
    for oy in 0..out_h {
        let fy = (y + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = (x + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let top = img.get(y0, x0, c) as f64 * (1.0 - tx) + img.get(y0, x1, c) as f64 * tx;
                let bottom = img.get(y1, x0, c) as f64 * (1.0 - tx) + img.get(y1, x1, c) as f64 * tx;
                out.set(oy, ox, c, (top * (1.0 - ty) + bottom * ty) as f32);
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    resize_region(img, 0.0, 0.0, img.width as f64, img.height as f64, out_h, out_w)
}

/// Face-aware image preprocessing variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// The image as is.
    #[default]
    Full,
    /// The image if any face was detected, else black.
    WithFace,
    /// The most salient face crop resized to the working resolution, else black.
    OnlyFace,
}

/// Applies `mode` to the record's image at `resolution × resolution`.
pub fn preprocess_image(record: &DocumentRecord, mode: ImageMode, resolution: usize) -> Result<Image> {
    let img = record.image.as_ref().ok_or_else(|| Error::MissingImage(record.id.clone()))?;
    match mode {
        ImageMode::Full => Ok(img.clone()),
        ImageMode::WithFace => {
            if record.face_boxes.is_empty() {
                Ok(Image::zeros(img.height, img.width))
            } else {
                Ok(img.clone())
            }
        }
        ImageMode::OnlyFace => match record.most_salient_face() {
            Some(b) => Ok(resize_region(img, b.x, b.y, b.w, b.h, resolution, resolution)),
            None => Ok(Image::zeros(resolution, resolution)),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FaceBox, IdeologyLabel};

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut img = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, 0, y as f32 / h as f32);
                img.set(y, x, 1, x as f32 / w as f32);
                img.set(y, x, 2, ((x + y) % 3) as f32 / 2.0);
            }
        }
        img
    }

    fn record(img: Image, faces: Vec<FaceBox>) -> DocumentRecord {
        DocumentRecord {
            id: "r".into(),
            text: String::new(),
            caption: None,
            image: Some(img),
            image_path: None,
            source: "s".into(),
            label: IdeologyLabel::Left,
            story_id: None,
            face_boxes: faces,
            url: None,
        }
    }

    #[test]
    fn full_mode_leaves_image_unchanged() {
        let img = gradient_image(8, 8);
        assert_eq!(preprocess_image(&record(img.clone(), vec![]), ImageMode::Full, 8).unwrap(), img);
    }

    #[test]
    fn faceless_images_become_black() {
        let img = gradient_image(8, 8);
        let rec = record(img, vec![]);
        assert!(preprocess_image(&rec, ImageMode::WithFace, 8).unwrap().is_all_zero());
        assert!(preprocess_image(&rec, ImageMode::OnlyFace, 8).unwrap().is_all_zero());
    }

    #[test]
    fn with_face_keeps_image_when_faces_exist() {
        let img = gradient_image(8, 8);
        let rec = record(img.clone(), vec![FaceBox::from((1.0, 1.0, 2.0, 2.0, 1))]);
        assert_eq!(preprocess_image(&rec, ImageMode::WithFace, 8).unwrap(), img);
    }

    #[test]
    fn whole_image_crop_is_identity_at_same_size() {
        let img = gradient_image(8, 8);
        let rec = record(img.clone(), vec![FaceBox::from((0.0, 0.0, 8.0, 8.0, 1))]);
        assert_eq!(preprocess_image(&rec, ImageMode::OnlyFace, 8).unwrap(), img);
        let up = preprocess_image(&rec, ImageMode::OnlyFace, 16).unwrap();
        assert_eq!((up.height(), up.width()), (16, 16));
    }

    #[test]
    fn only_face_uses_rank_one_box() {
        let mut img = Image::zeros(8, 8);
        for y in 4..8 {
            for x in 4..8 {
                img.set(y, x, 1, 1.0);
            }
        }
        let faces = vec![FaceBox::from((0.0, 0.0, 4.0, 4.0, 2)), FaceBox::from((4.0, 4.0, 4.0, 4.0, 1))];
        let crop = preprocess_image(&record(img, faces), ImageMode::OnlyFace, 4).unwrap();
        assert!(crop.data().chunks(3).all(|px| px == [0.0, 1.0, 0.0]));
    }

    #[test]
    fn missing_image_is_an_error() {
        let mut rec = record(Image::zeros(2, 2), vec![]);
        rec.image = None;
        assert!(matches!(preprocess_image(&rec, ImageMode::Full, 2), Err(Error::MissingImage(_))));
    }

    #[test]
    fn bilinear_downsample_averages_neighbours() {
        let mut img = Image::zeros(2, 2);
        img.set(0, 0, 0, 1.0);
        img.set(1, 1, 0, 1.0);
        let small = resize_bilinear(&img, 1, 1);
        assert!((small.get(0, 0, 0) - 0.5).abs() < 1e-6);
    }
}

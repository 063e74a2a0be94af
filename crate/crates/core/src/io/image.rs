//! Images, label maps and colorized predictions.

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageError, RgbImage};

use super::container::{keys, Metadata};
use crate::error::{Error, Result};
use crate::metrics::{LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Per-channel input normalization applied after scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

fn parse_triple(key: &str, text: &str) -> Result<[f32; 3]> {
    let vals: Vec<f32> = text
        .split(',')
        .map(|v| v.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("metadata '{key}' is not a number list: '{text}'")))?;
    vals.try_into()
        .map_err(|_| Error::Format(format!("metadata '{key}' needs three values")))
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Reads `norm_mean` / `norm_std`, falling back to the defaults for any
    /// key that is absent.
    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let mut n = Self::default();
        if let Some(v) = meta.get(keys::NORM_MEAN) {
            n.mean = parse_triple(keys::NORM_MEAN, v)?;
        }
        if let Some(v) = meta.get(keys::NORM_STD) {
            n.std = parse_triple(keys::NORM_STD, v)?;
            if n.std.iter().any(|&s| s <= 0.0) {
                return Err(Error::Format("norm_std must be positive".into()));
            }
        }
        Ok(n)
    }

    pub fn write_metadata(&self, meta: &mut Metadata) {
        let join = |v: [f32; 3]| v.map(|x| x.to_string()).join(",");
        meta.insert(keys::NORM_MEAN.into(), join(self.mean));
        meta.insert(keys::NORM_STD.into(), join(self.std));
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

fn save_err(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Loads an 8-bit PNG, PPM or PGM as a `(1, 3, H, W)` tensor. Grayscale is
/// replicated to three channels; alpha is dropped.
pub fn load_image(path: &Path, norm: &Normalization) -> Result<Tensor<f32>> {
    let img = open(path)?;
    if !matches!(
        img.color(),
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8
    ) {
        return Err(Error::Format(format!(
            "{}: unsupported pixel format {:?}, expected 8-bit",
            path.display(),
            img.color()
        )));
    }
    Ok(image_to_tensor(&img.to_rgb8(), norm))
}

pub fn image_to_tensor(img: &RgbImage, norm: &Normalization) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            data[c * h * w + y as usize * w + x as usize] = (v - norm.mean[c]) / norm.std[c];
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("sized from image")
}

/// Loads a single-channel 8-bit label map of train IDs.
pub fn load_label(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Format(format!(
            "{}: label maps must be 8-bit single channel, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let g = img.into_luma8();
    LabelMap::new(g.height() as usize, g.width() as usize, g.into_raw())
}

/// Writes an 8-bit grayscale PNG.
pub fn save_label(path: &Path, map: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(map.width as u32, map.height as u32, map.data.clone())
        .ok_or_else(|| Error::Shape("label map size does not match its data".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

/// Class index to RGB. Classes without an entry, and the ignore label,
/// render black.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<Option<[u8; 3]>>,
}

impl Palette {
    /// The usual Cityscapes train-ID colors.
    pub fn cityscapes() -> Self {
        const C: [[u8; 3]; 19] = [
            [128, 64, 128],
            [244, 35, 232],
            [70, 70, 70],
            [102, 102, 156],
            [190, 153, 153],
            [153, 153, 153],
            [250, 170, 30],
            [220, 220, 0],
            [107, 142, 35],
            [152, 251, 152],
            [70, 130, 180],
            [220, 20, 60],
            [255, 0, 0],
            [0, 0, 142],
            [0, 0, 70],
            [0, 60, 100],
            [0, 80, 100],
            [0, 0, 230],
            [119, 11, 32],
        ];
        Palette {
            colors: C.iter().map(|c| Some(*c)).collect(),
        }
    }

    /// Parses `class_id R G B` lines; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors: Vec<Option<[u8; 3]>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("palette line {}: expected 'class_id R G B'", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            let [id, r, g, b] = f[..] else {
                return Err(bad());
            };
            let id: u8 = id.parse().map_err(|_| bad())?;
            let rgb = [r, g, b].map(|v| v.parse::<u8>());
            let [Ok(r), Ok(g), Ok(b)] = rgb else {
                return Err(bad());
            };
            let id = id as usize;
            if colors.len() <= id {
                colors.resize(id + 1, None);
            }
            colors[id] = Some([r, g, b]);
        }
        Ok(Palette { colors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn color(&self, class: u8) -> [u8; 3] {
        if class == IGNORE_LABEL {
            return [0, 0, 0];
        }
        self.colors.get(class as usize).copied().flatten().unwrap_or([0, 0, 0])
    }

    pub fn colorize(&self, map: &LabelMap) -> RgbImage {
        let mut img = RgbImage::new(map.width as u32, map.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            px.0 = self.color(map.data[i]);
        }
        img
    }
}

pub fn save_color(path: &Path, map: &LabelMap, palette: &Palette) -> Result<()> {
    palette
        .colorize(map)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

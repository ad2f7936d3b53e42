use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use corrattack_core::image::{Image, Shape};
use corrattack_core::oracle::{argmax, LogitsModel};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::BenchError;

pub const LABELS_FILE: &str = "labels.txt";

/// One labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    pub target: Option<usize>,
}

/// How decoded images are brought to a block-divisible size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ingest {
    pub channels: usize,
    /// Resize to `size x size`; otherwise round each side to the nearest
    /// multiple of `block`.
    pub size: Option<usize>,
    pub block: usize,
    pub num_classes: Option<usize>,
}

/// Nearest positive multiple of `block`.
pub fn divisible_size(side: usize, block: usize) -> usize {
    (((side as f64) / block as f64).round() as usize).max(1) * block
}

/// Reads `filename label [target]` rows (comma or whitespace separated, `#`
/// comments) and the PNGs they name, sorted by filename.
pub fn load_dataset(dir: &Path, labels: &Path, ingest: &Ingest) -> Result<Vec<Sample>, BenchError> {
    if !labels.exists() {
        let empty = fs::read_dir(dir)
            .map_err(|e| BenchError::Dataset(format!("{}: {e}", dir.display())))?
            .next()
            .is_none();
        if empty {
            return Ok(Vec::new());
        }
        return Err(BenchError::Dataset(format!("missing labels file {}", labels.display())));
    }
    let text = fs::read_to_string(labels)
        .map_err(|e| BenchError::Dataset(format!("{}: {e}", labels.display())))?;
    let mut rows = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let bad = |what: &str| BenchError::Dataset(format!("{}:{}: {what}", labels.display(), n + 1));
        if fields.len() < 2 || fields.len() > 3 {
            return Err(bad("expected `filename label [target]`"));
        }
        let label: usize = fields[1].parse().map_err(|_| bad("label is not an integer"))?;
        let target: Option<usize> = match fields.get(2) {
            Some(t) => Some(t.parse().map_err(|_| bad("target is not an integer"))?),
            None => None,
        };
        if let Some(classes) = ingest.num_classes {
            if label >= classes || target.is_some_and(|t| t >= classes) {
                return Err(bad(&format!("class out of range for {classes} classes")));
            }
        }
        if rows.insert(fields[0].to_string(), (label, target)).is_some() {
            return Err(bad("duplicate filename"));
        }
    }

    rows.into_iter()
        .map(|(name, (label, target))| {
            let image = load_png(&dir.join(&name), ingest)?;
            let id = Path::new(&name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(name);
            Ok(Sample { id, image, label, target })
        })
        .collect()
}

/// Decodes one image file to `[0, 1]` pixels in (channel, row, column) order.
pub fn load_png(path: &Path, ingest: &Ingest) -> Result<Image, BenchError> {
    let decoded = image::open(path).map_err(|e| BenchError::Dataset(format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (tw, th) = match ingest.size {
        Some(s) => (s, s),
        None => (divisible_size(w, ingest.block), divisible_size(h, ingest.block)),
    };
    let decoded = if (tw, th) != (w, h) {
        decoded.resize_exact(tw as u32, th as u32, FilterType::Triangle)
    } else {
        decoded
    };
    Ok(to_image(&decoded, ingest.channels))
}

fn to_image(img: &DynamicImage, channels: usize) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let shape = Shape::new(channels, h, w);
    let mut pixels = vec![0.0; shape.len()];
    if channels == 1 {
        let gray = img.to_luma8();
        for (p, v) in gray.as_raw().iter().enumerate() {
            pixels[p] = *v as f64 / 255.0;
        }
    } else {
        let rgb = img.to_rgb8();
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                pixels[c * h * w + p] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Image { shape, pixels }
}

/// Writes PNGs and a labels file. Pixels are quantized to 8 bits.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    let mut labels = String::new();
    for s in samples {
        let name = format!("{}.png", s.id);
        save_png(&dir.join(&name), &s.image)?;
        match s.target {
            Some(t) => labels.push_str(&format!("{name} {} {t}\n", s.label)),
            None => labels.push_str(&format!("{name} {}\n", s.label)),
        }
    }
    fs::write(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

pub fn save_png(path: &Path, x: &Image) -> Result<(), BenchError> {
    let Shape { channels, height, width } = x.shape;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let plane = height * width;
    let result = match channels {
        1 => GrayImage::from_raw(width as u32, height as u32, x.pixels.iter().map(|&v| q(v)).collect())
            .map(DynamicImage::ImageLuma8),
        3 => {
            let raw = (0..plane)
                .flat_map(|p| (0..3).map(move |c| c * plane + p))
                .map(|i| q(x.pixels[i]))
                .collect();
            RgbImage::from_raw(width as u32, height as u32, raw).map(DynamicImage::ImageRgb8)
        }
        c => return Err(BenchError::Dataset(format!("cannot write {c}-channel PNG"))),
    };
    let img = result.ok_or_else(|| BenchError::Dataset("pixel buffer does not match shape".into()))?;
    img.save(path).map_err(|e| BenchError::Dataset(format!("{}: {e}", path.display())))
}

/// Seeded uniform-noise images on the 8-bit grid, so PNG round trips are exact.
pub fn synthetic_images(count: usize, seed: u64, shape: Shape) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Image {
            shape,
            pixels: (0..shape.len())
                .map(|_| rng.random_range(0..=255u32) as f64 / 255.0)
                .collect(),
        })
        .collect()
}

/// Noise images labelled with the model's own prediction.
pub fn synthetic_dataset<M: LogitsModel + ?Sized>(
    count: usize,
    seed: u64,
    shape: Shape,
    model: &mut M,
) -> Result<Vec<Sample>, BenchError> {
    synthetic_images(count, seed, shape)
        .into_iter()
        .enumerate()
        .map(|(n, image)| {
            let label = argmax(&model.logits(&image)?);
            Ok(Sample {
                id: format!("img_{n:04}"),
                image,
                label,
                target: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_sizes_round_to_nearest_multiple() {
        assert_eq!(divisible_size(224, 32), 224);
        assert_eq!(divisible_size(230, 32), 224);
        assert_eq!(divisible_size(250, 32), 256);
        assert_eq!(divisible_size(5, 32), 32);
    }

    #[test]
    fn synthetic_pixels_sit_on_the_8_bit_grid() {
        let imgs = synthetic_images(2, 9, Shape::new(3, 8, 8));
        assert_ne!(imgs[0], imgs[1]);
        for v in imgs.iter().flat_map(|i| &i.pixels) {
            assert_eq!((v * 255.0).round() / 255.0, *v);
        }
        assert_eq!(imgs, synthetic_images(2, 9, Shape::new(3, 8, 8)));
    }
}

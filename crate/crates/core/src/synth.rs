//! Synthetic detection corpus: rectangles and discs on noisy backgrounds,
//! with a controlled mix of which size intervals each image contains.

use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{read_annotations, write_annotations, Annotation, BoxAnnotation, ScaleEncoding, ScaleIntervals};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["rectangle", "disc"];

/// Sub-pixel samples per axis when rasterizing edges.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternWeight {
    /// One 0/1 entry per size interval.
    pub pattern: Vec<u8>,
    pub weight: f64,
}

impl PatternWeight {
    pub fn new(pattern: &[u8], weight: f64) -> Self {
        PatternWeight {
            pattern: pattern.to_vec(),
            weight,
        }
    }

    pub fn encoding(&self) -> ScaleEncoding {
        ScaleEncoding::from_bits(&self.pattern)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_images: usize,
    pub channels: usize,
    pub classes: usize,
    pub scale_mix: Vec<PatternWeight>,
    /// Standard deviation of additive pixel noise, intensities in `[0, 1]`.
    pub noise: f64,
    /// Smallest object side in pixels.
    pub min_object_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_images: 512,
            channels: 1,
            classes: 2,
            scale_mix: vec![
                PatternWeight::new(&[1, 0, 0, 0], 0.1),
                PatternWeight::new(&[0, 1, 0, 0], 0.1),
                PatternWeight::new(&[0, 0, 1, 0], 0.1),
                PatternWeight::new(&[0, 0, 0, 1], 0.1),
                PatternWeight::new(&[1, 1, 1, 1], 0.3),
                PatternWeight::new(&[1, 1, 0, 0], 0.1),
                PatternWeight::new(&[0, 0, 1, 1], 0.1),
                PatternWeight::new(&[1, 0, 1, 0], 0.1),
            ],
            noise: 0.05,
            min_object_size: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Inclusive integer range of the longer side for objects of interval `i`.
    pub fn side_range(&self, intervals: &ScaleIntervals, i: usize) -> Option<(usize, usize)> {
        let (lo, hi) = intervals.bounds(i);
        let fit = self.image_size * 7 / 8;
        let min = if i == 0 { self.min_object_size } else { (lo.floor() as usize + 1).max(self.min_object_size) };
        let max = hi.map_or(fit, |h| (h.floor() as usize).min(fit));
        (min <= max).then_some((min, max))
    }

    pub fn validate(&self, intervals: &ScaleIntervals) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("data: image_size {} too small", self.image_size)));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!("data: channels must be 1 or 3, got {}", self.channels)));
        }
        if !(1..=CLASS_NAMES.len()).contains(&self.classes) {
            return Err(Error::Config(format!("data: classes must be 1 or 2, got {}", self.classes)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("data: noise must be a nonnegative number".into()));
        }
        if self.min_object_size < 2 {
            return Err(Error::Config("data: min_object_size must be at least 2".into()));
        }
        if self.scale_mix.is_empty() {
            return Err(Error::Config("data: scale_mix is empty".into()));
        }
        let total: f64 = self.scale_mix.iter().map(|p| p.weight).sum();
        if self.scale_mix.iter().any(|p| !(p.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data: scale_mix weights must be nonnegative and sum to 1, got {total}")));
        }
        for p in &self.scale_mix {
            if p.pattern.len() != intervals.len() || p.pattern.iter().any(|&b| b > 1) {
                return Err(Error::Config(format!(
                    "data: pattern {:?} is not a {}-bit 0/1 vector",
                    p.pattern,
                    intervals.len()
                )));
            }
            for (i, _) in p.pattern.iter().enumerate().filter(|(_, &b)| b == 1) {
                if self.side_range(intervals, i).is_none() {
                    return Err(Error::Config(format!(
                        "data: pattern {:?} is unrealizable at image size {}: no object side fits interval {i}",
                        p.pattern, self.image_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// 8-bit image, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl SynthImage {
    /// `1×C×H×W` tensor with intensities `u8 / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; c * h * w];
        for (i, &p) in self.pixels.iter().enumerate() {
            let ch = i % c;
            let px = i / c;
            data[ch * h * w + px] = p as f64 / 255.0;
        }
        Tensor::new(vec![1, c, h, w], data)
    }

    /// Binary PGM for one channel, binary PPM for three.
    pub fn save(&self, path: &Path) -> Result<()> {
        let subtype = match self.channels {
            1 => PnmSubtype::Graymap(SampleEncoding::Binary),
            _ => PnmSubtype::Pixmap(SampleEncoding::Binary),
        };
        let color = if self.channels == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
        let file = fs::File::create(path)?;
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(subtype)
            .write_image(&self.pixels, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, pixels) = match img {
            image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
            other => (3, other.into_rgb8().into_raw()),
        };
        Ok(SynthImage {
            width,
            height,
            channels,
            pixels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Vec<SynthImage>,
    pub annotations: Vec<Annotation>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the selected images into one `B×C×H×W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let parts: Vec<Tensor> = indices.iter().map(|&i| self.images[i].to_tensor()).collect();
        Ok(Tensor::concat_batch(&parts))
    }

    pub fn scale_encodings(&self, intervals: &ScaleIntervals) -> Result<Vec<ScaleEncoding>> {
        self.annotations.iter().map(|a| a.scale_encoding(intervals)).collect()
    }

    fn image_path(dir: &Path, id: u64, channels: usize) -> std::path::PathBuf {
        let ext = if channels == 1 { "pgm" } else { "ppm" };
        dir.join("images").join(format!("{id:06}.{ext}"))
    }

    /// Writes `images/NNNNNN.pgm` and `annotations.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (img, ann) in self.images.iter().zip(&self.annotations) {
            img.save(&Self::image_path(dir, ann.image_id, img.channels))?;
        }
        let file = fs::File::create(dir.join("annotations.jsonl"))?;
        let mut out = std::io::BufWriter::new(file);
        write_annotations(&mut out, &self.annotations)?;
        std::io::Write::flush(&mut out)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("annotations.jsonl");
        let file = fs::File::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let annotations = read_annotations(std::io::BufReader::new(file))?;
        let images = annotations
            .iter()
            .map(|a| {
                let gray = Self::image_path(dir, a.image_id, 1);
                let path = if gray.exists() { gray } else { Self::image_path(dir, a.image_id, 3) };
                SynthImage::load(&path)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { images, annotations })
    }
}

struct Shape {
    b: BoxAnnotation,
    intensity: f64,
}

fn covered(shape: &Shape, px: f64, py: f64) -> bool {
    let b = &shape.b;
    match shape.b.class {
        0 => px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h,
        _ => {
            let dx = (px - (b.x + b.w / 2.0)) / (b.w / 2.0);
            let dy = (py - (b.y + b.h / 2.0)) / (b.h / 2.0);
            dx * dx + dy * dy <= 1.0
        }
    }
}

fn render(cfg: &SynthConfig, shapes: &[Shape], background: f64, rng: &mut ChaCha8Rng) -> SynthImage {
    let n = cfg.image_size;
    let mut canvas = vec![background; n * n];
    let step = 1.0 / SUPERSAMPLE as f64;
    // larger shapes first so small ones stay visible
    let mut order: Vec<&Shape> = shapes.iter().collect();
    order.sort_by(|a, b| (b.b.w * b.b.h).total_cmp(&(a.b.w * a.b.h)));
    for s in order {
        let x0 = s.b.x.floor() as usize;
        let y0 = s.b.y.floor() as usize;
        let x1 = ((s.b.x + s.b.w).ceil() as usize).min(n);
        let y1 = ((s.b.y + s.b.h).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += usize::from(covered(s, px, py));
                    }
                }
                let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let p = &mut canvas[y * n + x];
                *p = *p * (1.0 - cover) + s.intensity * cover;
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite noise level");
    let mut pixels = Vec::with_capacity(n * n * cfg.channels);
    for v in canvas {
        for _ in 0..cfg.channels {
            let noisy = if cfg.noise > 0.0 { v + noise.sample(rng) } else { v };
            pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    SynthImage {
        width: n,
        height: n,
        channels: cfg.channels,
        pixels,
    }
}

fn generate_image(cfg: &SynthConfig, intervals: &ScaleIntervals, patterns: &WeightedIndex<f64>, id: u64) -> (SynthImage, Annotation) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id);
    let pattern = &cfg.scale_mix[patterns.sample(&mut rng)].pattern;
    let n = cfg.image_size;
    let background = rng.random_range(0.05..0.35);
    let mut shapes = Vec::new();
    for (i, _) in pattern.iter().enumerate().filter(|(_, &b)| b == 1) {
        let (min, max) = cfg.side_range(intervals, i).expect("validated pattern");
        let long = rng.random_range(min..=max);
        let short = rng.random_range(long.div_ceil(2).max(2).min(long)..=long);
        let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
        let x = rng.random_range(0..=n - w);
        let y = rng.random_range(0..=n - h);
        let class = rng.random_range(0..cfg.classes);
        shapes.push(Shape {
            b: BoxAnnotation {
                x: x as f64,
                y: y as f64,
                w: w as f64,
                h: h as f64,
                class,
            },
            intensity: rng.random_range(0.55..1.0),
        });
    }
    let image = render(cfg, &shapes, background, &mut rng);
    let annotation = Annotation {
        image_id: id,
        boxes: shapes.into_iter().map(|s| s.b).collect(),
    };
    (image, annotation)
}

/// Draws the corpus. Every image has its own random stream derived from the
/// seed and its index, so output does not depend on thread scheduling.
pub fn generate_corpus(cfg: &SynthConfig, intervals: &ScaleIntervals) -> Result<Corpus> {
    cfg.validate(intervals)?;
    let weights = WeightedIndex::new(cfg.scale_mix.iter().map(|p| p.weight))
        .map_err(|e| Error::Config(format!("data: scale_mix weights: {e}")))?;
    let (images, annotations) = (0..cfg.num_images as u64)
        .into_par_iter()
        .map(|id| generate_image(cfg, intervals, &weights, id))
        .unzip();
    Ok(Corpus { images, annotations })
}

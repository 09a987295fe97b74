//! Dataset adapters: manifests, PNG IO, joint augmentation and the synthetic
//! two-domain corpus used for desk-scale experiments.
//!
//! On-disk layout: a TSV manifest lists `image<TAB>label<TAB>split` per line;
//! labels are 8-bit PNGs with 255 as the ignore index; a class-names file
//! maps contiguous ids to names, one `id<TAB>name` per line.

use crate::stats::LabelMap;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IGNORE_INDEX: u32 = 255;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("manifest line {line} malformed: expected image<TAB>label<TAB>split")]
    BadManifestLine { line: usize },
    #[error("class-names line {line} malformed: expected id<TAB>name")]
    BadClassLine { line: usize },
    #[error("class ids must be contiguous from 0; line {line} has id {id}")]
    NonContiguousClassId { line: usize, id: usize },
    #[error("no entries for split `{split}` in manifest")]
    EmptySplit { split: String },
    #[error("label {path} has value {value} outside {num_classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        value: u32,
        num_classes: u32,
    },
    #[error("image {path} is {w}x{h}, expected {expected_w}x{expected_h}")]
    SizeMismatch {
        path: PathBuf,
        w: usize,
        h: usize,
        expected_w: usize,
        expected_h: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: String,
}

/// Parses `image<TAB>label<TAB>split` lines; paths resolve relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (img, lbl, split) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => return Err(DataError::BadManifestLine { line: idx + 1 }),
        };
        entries.push(ManifestEntry {
            image: base.join(img),
            label: base.join(lbl),
            split: split.to_string(),
        });
    }
    Ok(entries)
}

/// Parses `id<TAB>name` lines; ids must run 0..K in order.
pub fn load_class_names(path: &Path) -> Result<Vec<String>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut names = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (id, name) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(DataError::BadClassLine { line: idx + 1 }),
        };
        let id: usize = id
            .parse()
            .map_err(|_| DataError::BadClassLine { line: idx + 1 })?;
        if id != names.len() {
            return Err(DataError::NonContiguousClassId { line: idx + 1, id });
        }
        names.push(name.to_string());
    }
    Ok(names)
}

pub fn save_class_names(names: &[String], path: &Path) -> Result<(), DataError> {
    let mut text = String::new();
    for (id, name) in names.iter().enumerate() {
        text.push_str(&format!("{id}\t{name}\n"));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// RGB image in [0, 1], shape h x w x 3.
pub fn load_image_png(path: &Path) -> Result<Array3<f64>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
    ))
}

pub fn save_image_png(img: &Array3<f64>, path: &Path) -> Result<(), DataError> {
    let (h, w, _) = img.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// 8-bit label map; 255 is the ignore index.
pub fn load_label_png(path: &Path, num_classes: u32) -> Result<LabelMap, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as u32
    });
    LabelMap::new(data, num_classes, IGNORE_INDEX).map_err(|_| {
        let bad = img
            .pixels()
            .map(|p| p.0[0] as u32)
            .find(|&v| v != IGNORE_INDEX && v >= num_classes)
            .unwrap_or(0);
        DataError::LabelOutOfRange {
            path: path.to_path_buf(),
            value: bad,
            num_classes,
        }
    })
}

pub fn save_label_png(label: &LabelMap, path: &Path) -> Result<(), DataError> {
    let (h, w) = (label.height(), label.width());
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([label.data()[[y, x]] as u8]));
        }
    }
    out.save(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// An in-memory split: aligned images and labels.
#[derive(Debug, Clone)]
pub struct SegDataset {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<LabelMap>,
    pub class_names: Vec<String>,
}

impl SegDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> u32 {
        self.class_names.len() as u32
    }
}

/// Loads every manifest entry of one split into memory.
pub fn load_split(
    manifest: &Path,
    split: &str,
    class_names: Vec<String>,
) -> Result<SegDataset, DataError> {
    let entries = load_manifest(manifest)?;
    let k = class_names.len() as u32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        let img = load_image_png(&e.image)?;
        let lbl = load_label_png(&e.label, k)?;
        if img.dim().0 != lbl.height() || img.dim().1 != lbl.width() {
            return Err(DataError::SizeMismatch {
                path: e.label.clone(),
                w: lbl.width(),
                h: lbl.height(),
                expected_w: img.dim().1,
                expected_h: img.dim().0,
            });
        }
        images.push(img);
        labels.push(lbl);
    }
    if images.is_empty() {
        return Err(DataError::EmptySplit {
            split: split.to_string(),
        });
    }
    Ok(SegDataset {
        images,
        labels,
        class_names,
    })
}

// -- joint augmentation --------------------------------------------------------

/// Data augmentation switches applied before the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub color_jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            color_jitter: true,
        }
    }
}

/// Horizontal flip of image and label together plus photometric jitter on the
/// image alone; the flip is the only transform that touches geometry, so
/// labels stay aligned by construction.
pub fn augment_sample(
    image: &Array3<f64>,
    label: &LabelMap,
    config: AugmentConfig,
    rng: &mut impl Rng,
) -> (Array3<f64>, LabelMap) {
    let mut img = image.clone();
    let mut lbl = label.clone();
    if config.hflip && rng.gen_bool(0.5) {
        img = hflip_image(&img);
        lbl = hflip_label(&lbl);
    }
    if config.color_jitter {
        let brightness = rng.gen_range(0.8..1.2);
        let contrast = rng.gen_range(0.8..1.2);
        let saturation = rng.gen_range(0.8..1.2);
        img = jitter(&img, brightness, contrast, saturation);
    }
    (img, lbl)
}

pub fn hflip_image(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| img[[y, w - 1 - x, ch]])
}

pub fn hflip_label(label: &LabelMap) -> LabelMap {
    let (h, w) = (label.height(), label.width());
    let data = Array2::from_shape_fn((h, w), |(y, x)| label.data()[[y, w - 1 - x]]);
    LabelMap::new(data, label.num_classes(), label.ignore_index()).expect("flip preserves values")
}

fn jitter(img: &Array3<f64>, brightness: f64, contrast: f64, saturation: f64) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let mean = img.sum() / (h * w * c) as f64;
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let gray = (img[[y, x, 0]] + img[[y, x, 1]] + img[[y, x, 2]]) / 3.0;
        let sat = (img[[y, x, ch]] - gray) * saturation + gray;
        let con = (sat - mean) * contrast + mean;
        (con * brightness).clamp(0.0, 1.0)
    })
}

// -- synthetic two-domain corpus -------------------------------------------------

/// Parameters of the synthetic corpus: textured class regions at 64x64 with
/// a recolored, contrast-shifted copy standing in for a domain gap.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub size: usize,
    pub num_train: usize,
    pub num_eval: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_train: 32,
            num_eval: 16,
            seed: 0,
        }
    }
}

pub const SYNTH_CLASS_NAMES: [&str; 4] = ["ground", "foliage", "sky", "structure"];

fn synth_class_names() -> Vec<String> {
    SYNTH_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Per-class base colors and stripe parameters for the source domain.
const BASE_COLORS: [[f64; 3]; 4] = [
    [0.38, 0.35, 0.33],
    [0.25, 0.55, 0.30],
    [0.52, 0.65, 0.80],
    [0.62, 0.30, 0.25],
];
const STRIPE_FREQ: [f64; 4] = [0.55, 0.9, 0.25, 1.3];

fn texture(class: usize, y: usize, x: usize, phase: f64, ch: usize, noise: f64) -> f64 {
    let base = BASE_COLORS[class][ch];
    let f = STRIPE_FREQ[class];
    let angle = match class {
        0 => y as f64 * f + phase,
        1 => (x + y) as f64 * f * 0.7 + phase,
        2 => x as f64 * f + phase,
        _ => (x as f64 - y as f64) * f * 0.6 + phase,
    };
    (base + 0.10 * angle.sin() + noise).clamp(0.0, 1.0)
}

fn synth_image(size: usize, rng: &mut ChaCha8Rng) -> (Array3<f64>, LabelMap) {
    // jittered quadrant layout with a random class permutation, so most
    // images carry all four classes
    let sy = rng.gen_range(size / 4..3 * size / 4);
    let sx = rng.gen_range(size / 4..3 * size / 4);
    let mut perm = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let phases: [f64; 4] = [
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    ];
    let mut label = Array2::zeros((size, size));
    let mut img = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let quad = match (y < sy, x < sx) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            let class = perm[quad];
            label[[y, x]] = class as u32;
            let noise = rng.gen_range(-0.03..0.03);
            for ch in 0..3 {
                img[[y, x, ch]] = texture(class, y, x, phases[class], ch, noise);
            }
        }
    }
    // one-pixel ignore border keeps the ignore path honest end to end
    for y in 0..size {
        label[[y, 0]] = IGNORE_INDEX;
        label[[y, size - 1]] = IGNORE_INDEX;
    }
    for x in 0..size {
        label[[0, x]] = IGNORE_INDEX;
        label[[size - 1, x]] = IGNORE_INDEX;
    }
    (
        img,
        LabelMap::new(label, 4, IGNORE_INDEX).expect("synthetic labels valid"),
    )
}

/// The fixed domain shift: a strong per-channel color cast plus contrast and
/// brightness changes, applied to copies of source images. Channel-wise
/// affine at the pixel level keeps the gap statistics-shaped while still
/// costing a frozen source-trained model a large fraction of its accuracy.
pub fn domain_shift(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let mean = img.sum() / (h * w * 3) as f64;
    const GAIN: [f64; 3] = [1.30, 0.72, 0.88];
    const OFFSET: [f64; 3] = [0.10, -0.06, 0.04];
    Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        let contrasted = (img[[y, x, ch]] - mean) * 1.25 + mean;
        (contrasted * GAIN[ch] + OFFSET[ch]).clamp(0.0, 1.0)
    })
}

/// Synthesizes the corpus: a source train split, a held-out source eval
/// split, and a shifted eval split made of recolored copies of the held-out
/// images (identical labels).
pub fn generate_two_domain_corpus(
    config: SynthConfig,
) -> (SegDataset, SegDataset, SegDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names = synth_class_names();
    let gen_split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (img, lbl) = synth_image(config.size, rng);
            images.push(img);
            labels.push(lbl);
        }
        (images, labels)
    };
    let (train_images, train_labels) = gen_split(config.num_train, &mut rng);
    let (eval_images, eval_labels) = gen_split(config.num_eval, &mut rng);
    let shifted_images: Vec<Array3<f64>> = eval_images.iter().map(domain_shift).collect();
    let train = SegDataset {
        images: train_images,
        labels: train_labels,
        class_names: names.clone(),
    };
    let eval_source = SegDataset {
        images: eval_images,
        labels: eval_labels.clone(),
        class_names: names.clone(),
    };
    let eval_shifted = SegDataset {
        images: shifted_images,
        labels: eval_labels,
        class_names: names,
    };
    (train, eval_source, eval_shifted)
}

/// Writes a generated corpus to disk with a manifest and class-names file.
pub fn write_corpus(dir: &Path, config: SynthConfig) -> Result<PathBuf, DataError> {
    let (train, eval_source, eval_shifted) = generate_two_domain_corpus(config);
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    let dump = |set: &SegDataset, split: &str, manifest: &mut String| -> Result<(), DataError> {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
        for (i, (img, lbl)) in set.images.iter().zip(&set.labels).enumerate() {
            let img_rel = format!("{split}/img_{i:03}.png");
            let lbl_rel = format!("{split}/lbl_{i:03}.png");
            save_image_png(img, &dir.join(&img_rel))?;
            save_label_png(lbl, &dir.join(&lbl_rel))?;
            manifest.push_str(&format!("{img_rel}\t{lbl_rel}\t{split}\n"));
        }
        Ok(())
    };
    dump(&train, "train", &mut manifest)?;
    dump(&eval_source, "eval_source", &mut manifest)?;
    dump(&eval_shifted, "eval_shifted", &mut manifest)?;
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    save_class_names(&train.class_names, &dir.join("classes.tsv"))?;
    Ok(manifest_path)
}

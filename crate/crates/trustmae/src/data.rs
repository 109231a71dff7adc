//! Synthetic defect datasets with ground-truth masks, MVTec-layout folder
//! I/O, preprocessing and augmentation.
//!
//! Generated images are quantized to the 8-bit grid up front so a dataset
//! written as PNG and loaded back is bit-identical to the in-memory one.

use std::path::{Path, PathBuf};

use image::GenericImageView;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_seed_indexed;
use crate::substrate::{ops, SubstrateError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("defective image {0} has no ground-truth mask")]
    MissingMask(PathBuf),
    #[error("mask {mask} size {mask_size:?} does not match image size {image_size:?}")]
    MaskSizeMismatch {
        mask: PathBuf,
        mask_size: (u32, u32),
        image_size: (u32, u32),
    },
    #[error("zero-size image {0}")]
    ZeroSizeImage(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}

/// One image with its label and (for test / diagnostic data) its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// (C,H,W) in [-1,1].
    pub image: Tensor,
    pub is_defective: bool,
    /// (H,W) of {0,1}; present on defective samples.
    pub mask: Option<Tensor>,
    pub source_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Stripes,
    Checker,
    BandlimitedNoise,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectShape {
    Blob,
    Scratch,
    Discoloration,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub texture_kind: TextureKind,
    pub image_size: (usize, usize),
    pub channels: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_defective: usize,
    /// Fraction of defective (unlabeled) images in the training split.
    pub noise_fraction: f64,
    /// Defect extent in pixels (min, max).
    pub defect_size: (usize, usize),
    /// Minimum and maximum contrast against the underlying texture.
    pub defect_contrast: (f64, f64),
    pub defect_shapes: Vec<DefectShape>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            texture_kind: TextureKind::Stripes,
            image_size: (64, 64),
            channels: 1,
            n_train: 48,
            n_test_normal: 24,
            n_test_defective: 24,
            noise_fraction: 0.0,
            defect_size: (3, 7),
            defect_contrast: (0.5, 0.9),
            defect_shapes: vec![DefectShape::Blob, DefectShape::Scratch, DefectShape::Discoloration],
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(DataError::InvalidSpec(format!(
                "noise_fraction {} outside [0, 1)",
                self.noise_fraction
            )));
        }
        if self.defect_size.0 == 0 || self.defect_size.0 > self.defect_size.1 {
            return Err(DataError::InvalidSpec("degenerate defect size range".into()));
        }
        if self.defect_contrast.0 <= 0.0 || self.defect_contrast.0 > self.defect_contrast.1 {
            return Err(DataError::InvalidSpec("degenerate defect contrast range".into()));
        }
        if self.defect_shapes.is_empty() {
            return Err(DataError::InvalidSpec("no defect shapes".into()));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(DataError::InvalidSpec("image size below 8x8".into()));
        }
        if self.channels == 0 || self.channels > 3 {
            return Err(DataError::InvalidSpec("channels must be 1..=3".into()));
        }
        Ok(())
    }
}

/// Quantize a [-1,1] value onto the 8-bit grid used by the PNG round trip.
fn quantize(v: f64) -> f64 {
    let k = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0);
    k / 127.5 - 1.0
}

fn u8_to_unit(k: u8) -> f64 {
    k as f64 / 127.5 - 1.0
}

fn unit_to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Sinusoidal stripe pattern; exactly periodic with the given period.
pub(crate) fn stripe_texture(
    h: usize,
    w: usize,
    period: usize,
    phase: f64,
    vertical: bool,
    amplitude: f64,
) -> Tensor {
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let t = if vertical { x as f64 } else { y as f64 };
        amplitude * (2.0 * std::f64::consts::PI * t / period as f64 + phase).sin()
    })
}

fn checker_texture(h: usize, w: usize, cell: usize, ox: usize, oy: usize, amplitude: f64) -> Tensor {
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
        if parity == 0 {
            amplitude
        } else {
            -amplitude
        }
    })
}

fn bandlimited_texture(h: usize, w: usize, rng: &mut impl Rng, amplitude: f64) -> Tensor {
    // White noise smoothed by two box-filter passes, then renormalized.
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut t = Tensor::new(&[1, h, w], noise).expect("shape");
    for _ in 0..2 {
        let mut tape = crate::substrate::Tape::new();
        let v = tape.leaf(t.clone().reshape(&[1, 1, h, w]).expect("shape"));
        let s = ops::box_mean(&mut tape, v, 5).expect("box");
        t = tape.value(s).clone().reshape(&[1, h, w]).expect("shape");
    }
    let peak = t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-9);
    t.map(|v| v / peak * amplitude)
}

fn blob_texture(h: usize, w: usize, rng: &mut impl Rng, amplitude: f64) -> Tensor {
    let count = rng.gen_range(6..12);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(3.0..8.0),
                if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            )
        })
        .collect();
    let t = Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        bumps
            .iter()
            .map(|&(cy, cx, sigma, sign)| {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                sign * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum::<f64>()
    });
    let peak = t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-9);
    t.map(|v| v / peak * amplitude)
}

fn normal_texture(spec: &DatasetSpec, rng: &mut impl Rng) -> Tensor {
    let (h, w) = spec.image_size;
    let amplitude = 0.7;
    let plane = match spec.texture_kind {
        TextureKind::Stripes => {
            let period = *[6usize, 8, 10].get(rng.gen_range(0..3)).unwrap();
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let vertical = rng.gen_bool(0.5);
            stripe_texture(h, w, period, phase, vertical, amplitude)
        }
        TextureKind::Checker => {
            let cell = *[4usize, 8].get(rng.gen_range(0..2)).unwrap();
            let ox = rng.gen_range(0..cell);
            let oy = rng.gen_range(0..cell);
            checker_texture(h, w, cell, ox, oy, 0.6)
        }
        TextureKind::BandlimitedNoise => bandlimited_texture(h, w, rng, amplitude),
        TextureKind::Blobs => blob_texture(h, w, rng, amplitude),
    };
    let quantized = plane.map(quantize);
    if spec.channels == 1 {
        quantized
    } else {
        // Replicate the plane across channels.
        let hw = h * w;
        Tensor::from_fn(&[spec.channels, h, w], |i| quantized.data()[i % hw])
    }
}

/// Defect region mask: 1 inside the injected region.
fn defect_region(spec: &DatasetSpec, rng: &mut impl Rng) -> (Tensor, DefectShape) {
    let (h, w) = spec.image_size;
    let shape = spec.defect_shapes[rng.gen_range(0..spec.defect_shapes.len())];
    let (lo, hi) = spec.defect_size;
    let size = rng.gen_range(lo..=hi) as f64;
    let mut mask = vec![0.0; h * w];
    match shape {
        DefectShape::Blob | DefectShape::Discoloration => {
            let grow = if shape == DefectShape::Discoloration { 1.6 } else { 1.0 };
            let ry = (size * grow).max(1.0);
            let rx = (size * grow * rng.gen_range(0.6..1.4)).max(1.0);
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 - cy) / ry;
                    let dx = (x as f64 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        mask[y * w + x] = 1.0;
                    }
                }
            }
        }
        DefectShape::Scratch => {
            let len = (size * 2.5).max(3.0);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let (dy, dx) = (angle.sin(), angle.cos());
            let thickness = 1.0_f64.max(size / 4.0);
            let steps = (len * 2.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64 - 0.5;
                let py = cy + t * len * dy;
                let px = cx + t * len * dx;
                let r = thickness.ceil() as isize;
                for oy in -r..=r {
                    for ox in -r..=r {
                        let yy = py.round() as isize + oy;
                        let xx = px.round() as isize + ox;
                        if yy >= 0
                            && yy < h as isize
                            && xx >= 0
                            && xx < w as isize
                            && (oy * oy + ox * ox) as f64 <= thickness * thickness
                        {
                            mask[yy as usize * w + xx as usize] = 1.0;
                        }
                    }
                }
            }
        }
    }
    // Guarantee at least one pixel: the region center may round off-canvas.
    if mask.iter().all(|&v| v == 0.0) {
        mask[(h / 2) * w + w / 2] = 1.0;
    }
    (Tensor::new(&[h, w], mask).expect("shape"), shape)
}

/// Replace pixels inside the region, guaranteeing at least the sampled
/// contrast against the quantized normal texture on the 8-bit grid.
fn inject_defect(image: &mut Tensor, mask: &Tensor, spec: &DatasetSpec, rng: &mut impl Rng) {
    let (h, w) = spec.image_size;
    let hw = h * w;
    // Keep a margin above the quantization step so contrast survives rounding.
    let c_lo = spec.defect_contrast.0 + 0.01;
    let c_hi = spec.defect_contrast.1.max(c_lo);
    let contrast = rng.gen_range(c_lo..=c_hi);
    let region_mean: f64 = {
        let mut sum = 0.0;
        let mut count = 0.0f64;
        for pos in 0..hw {
            if mask.data()[pos] > 0.0 {
                sum += image.data()[pos];
                count += 1.0;
            }
        }
        sum / count.max(1.0)
    };
    let direction = if region_mean > 0.0 { -1.0 } else { 1.0 };
    let data = image.data_mut();
    for ch in 0..spec.channels {
        for pos in 0..hw {
            if mask.data()[pos] == 0.0 {
                continue;
            }
            let v = data[ch * hw + pos];
            let forward = quantize((v + direction * contrast).clamp(-1.0, 1.0));
            let backward = quantize((v - direction * contrast).clamp(-1.0, 1.0));
            data[ch * hw + pos] = if (forward - v).abs() >= (backward - v).abs() {
                forward
            } else {
                backward
            };
        }
    }
}

fn generate_sample(spec: &DatasetSpec, tag: &str, index: u64, defective: bool) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, tag, index));
    let mut image = normal_texture(spec, &mut rng);
    let mask = if defective {
        let (mask, _) = defect_region(spec, &mut rng);
        inject_defect(&mut image, &mask, spec, &mut rng);
        Some(mask)
    } else {
        None
    };
    // Folder-relative ids so a written dataset loads back under the same ids.
    let source_id = match tag {
        "train" => format!("train/good/{index:04}.png"),
        "test_normal" => format!("test/good/{index:04}.png"),
        _ => format!("test/defect/{index:04}.png"),
    };
    Sample {
        image,
        is_defective: defective,
        mask,
        source_id,
    }
}

/// Deterministic synthetic dataset: the training split contains exactly
/// round(noise_fraction · n_train) defective samples (their masks stay on the
/// sample for diagnostics; the training loop only ever reads images).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    spec.validate()?;
    let n_defective = (spec.noise_fraction * spec.n_train as f64).round() as usize;
    // Seeded positions of the defective training samples.
    let mut order: Vec<usize> = (0..spec.n_train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "train-noise", 0));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let defective_at: std::collections::HashSet<usize> = order.into_iter().take(n_defective).collect();

    let train: Vec<Sample> = (0..spec.n_train)
        .map(|i| generate_sample(spec, "train", i as u64, defective_at.contains(&i)))
        .collect();
    let mut test: Vec<Sample> = (0..spec.n_test_normal)
        .map(|i| generate_sample(spec, "test_normal", i as u64, false))
        .collect();
    test.extend((0..spec.n_test_defective).map(|i| generate_sample(spec, "test_defect", i as u64, true)));
    Ok((train, test))
}

/// Regenerate the underlying normal texture of a training/test sample,
/// bypassing defect injection; diagnostic twin of [`generate_dataset`].
pub fn normal_twin(spec: &DatasetSpec, tag: &str, index: u64) -> Sample {
    generate_sample(spec, tag, index, false)
}

// ---------------------------------------------------------------------------
// Folder layout I/O
// ---------------------------------------------------------------------------

fn tensor_to_gray_image(t: &Tensor) -> image::DynamicImage {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    if c == 1 {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = image::Luma([unit_to_u8(t.data()[i])]);
        }
        image::DynamicImage::ImageLuma8(img)
    } else {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (i, p) in img.pixels_mut().enumerate() {
            let r = unit_to_u8(t.data()[i]);
            let g = unit_to_u8(t.data()[hw + i]);
            let b = unit_to_u8(t.data()[2 * hw + i]);
            *p = image::Rgb([r, g, b]);
        }
        image::DynamicImage::ImageRgb8(img)
    }
}

fn save_png(img: &image::DynamicImage, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    img.save(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Write a dataset in MVTec folder layout:
/// `root/<category>/train/good/*.png`, `root/<category>/test/{good,defect}/*.png`,
/// `root/<category>/ground_truth/defect/*_mask.png`, plus `manifest.csv`.
/// Masks of noisy training samples go to `ground_truth/train_defects/` so the
/// loader can round-trip them; they are diagnostics, not training inputs.
pub fn write_dataset(
    root: &Path,
    category: &str,
    train: &[Sample],
    test: &[Sample],
) -> Result<(), DataError> {
    let base = root.join(category);
    let mut manifest: Vec<(String, String, bool)> = Vec::new();
    // An empty test/good directory is valid; create the skeleton up front.
    for sub in ["train/good", "test/good", "test/defect", "ground_truth/defect"] {
        let dir = base.join(sub);
        std::fs::create_dir_all(&dir).map_err(|source| DataError::Io { path: dir.clone(), source })?;
    }
    for (i, s) in train.iter().enumerate() {
        let name = format!("{i:04}.png");
        save_png(&tensor_to_gray_image(&s.image), &base.join("train/good").join(&name))?;
        if let Some(mask) = &s.mask {
            let mask_img = mask_to_image(mask);
            save_png(&mask_img, &base.join("ground_truth/train_defects").join(format!("{i:04}_mask.png")))?;
        }
        manifest.push((format!("train/good/{name}"), "train".into(), s.is_defective));
    }
    let mut good_idx = 0usize;
    let mut defect_idx = 0usize;
    for s in test {
        if s.is_defective {
            let name = format!("{defect_idx:04}.png");
            save_png(&tensor_to_gray_image(&s.image), &base.join("test/defect").join(&name))?;
            let mask = s.mask.as_ref().expect("defective test sample has a mask");
            save_png(
                &mask_to_image(mask),
                &base.join("ground_truth/defect").join(format!("{defect_idx:04}_mask.png")),
            )?;
            manifest.push((format!("test/defect/{name}"), "test".into(), true));
            defect_idx += 1;
        } else {
            let name = format!("{good_idx:04}.png");
            save_png(&tensor_to_gray_image(&s.image), &base.join("test/good").join(&name))?;
            manifest.push((format!("test/good/{name}"), "test".into(), false));
            good_idx += 1;
        }
    }
    let manifest_path = base.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path).map_err(|e| DataError::Io {
        path: manifest_path.clone(),
        source: std::io::Error::other(e),
    })?;
    writer
        .write_record(["source_id", "split", "is_defective"])
        .and_then(|_| {
            for (id, split, defective) in &manifest {
                writer.write_record([id.as_str(), split.as_str(), if *defective { "1" } else { "0" }])?;
            }
            writer.flush().map_err(csv::Error::from)
        })
        .map_err(|e| DataError::Io {
            path: manifest_path.clone(),
            source: std::io::Error::other(e),
        })?;
    Ok(())
}

fn mask_to_image(mask: &Tensor) -> image::DynamicImage {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        *p = image::Luma([if mask.data()[i] > 0.0 { 255 } else { 0 }]);
    }
    image::DynamicImage::ImageLuma8(img)
}

/// Bilinear resize + affine [0,255] → [-1,1] of a decoded image.
pub fn preprocess(img: &image::DynamicImage, channels: usize, target: (usize, usize)) -> Result<Tensor, DataError> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(DataError::ZeroSizeImage(PathBuf::from("<decoded image>")));
    }
    let (th, tw) = target;
    let raw = if channels == 1 {
        let gray = img.to_luma8();
        Tensor::from_fn(&[1, h as usize, w as usize], |i| u8_to_unit(gray.as_raw()[i]))
    } else {
        let rgb = img.to_rgb8();
        let (hu, wu) = (h as usize, w as usize);
        Tensor::from_fn(&[3, hu, wu], |i| {
            let ch = i / (hu * wu);
            let pos = i % (hu * wu);
            u8_to_unit(rgb.as_raw()[pos * 3 + ch])
        })
    };
    if (h as usize, w as usize) == (th, tw) {
        Ok(raw)
    } else {
        Ok(ops::bilinear_resize(&raw, th, tw)?)
    }
}

/// Nearest-neighbor mask resize, re-binarized to {0,1}.
pub fn preprocess_mask(img: &image::DynamicImage, target: (usize, usize)) -> Result<Tensor, DataError> {
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(DataError::ZeroSizeImage(PathBuf::from("<decoded mask>")));
    }
    let (th, tw) = target;
    Ok(Tensor::from_fn(&[th, tw], |i| {
        let (oy, ox) = (i / tw, i % tw);
        let sy = (((oy as f64 + 0.5) * h as f64 / th as f64).floor() as u32).min(h - 1);
        let sx = (((ox as f64 + 0.5) * w as f64 / tw as f64).floor() as u32).min(w - 1);
        if gray.get_pixel(sx, sy).0[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn open_image(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_manifest(path: &Path) -> Option<std::collections::HashMap<String, bool>> {
    let mut reader = csv::Reader::from_path(path).ok()?;
    let mut map = std::collections::HashMap::new();
    for record in reader.records().flatten() {
        if record.len() >= 3 {
            map.insert(record[0].to_string(), &record[2] == "1");
        }
    }
    Some(map)
}

/// Load an MVTec-layout dataset. Test images under `test/good` are normal;
/// any other test subdirectory is defective and must have a matching
/// `ground_truth/<type>/<stem>_mask.png`. A `manifest.csv` written by
/// [`write_dataset`] restores the defect flags of noisy training samples.
pub fn load_folder_dataset(
    root: &Path,
    category: &str,
    channels: usize,
    target: (usize, usize),
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    let base = root.join(category);
    if !base.exists() {
        return Err(DataError::MissingDirectory(base));
    }
    let train_dir = base.join("train/good");
    if !train_dir.exists() {
        return Err(DataError::MissingDirectory(train_dir));
    }
    let manifest = read_manifest(&base.join("manifest.csv"));

    let mut train = Vec::new();
    for path in list_pngs(&train_dir)? {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let rel = format!("train/good/{}", path.file_name().unwrap_or_default().to_string_lossy());
        let img = open_image(&path)?;
        let image = preprocess(&img, channels, target)?;
        let is_defective = manifest
            .as_ref()
            .and_then(|m| m.get(&rel).copied())
            .unwrap_or(false);
        let mask_path = base.join("ground_truth/train_defects").join(format!("{stem}_mask.png"));
        let mask = if is_defective && mask_path.exists() {
            let mask_img = open_image(&mask_path)?;
            check_mask_size(&mask_img, &img, &mask_path)?;
            Some(preprocess_mask(&mask_img, target)?)
        } else {
            None
        };
        train.push(Sample {
            image,
            is_defective,
            mask,
            source_id: rel,
        });
    }

    let test_dir = base.join("test");
    if !test_dir.exists() {
        return Err(DataError::MissingDirectory(test_dir));
    }
    let mut test = Vec::new();
    let mut kinds: Vec<PathBuf> = std::fs::read_dir(&test_dir)
        .map_err(|source| DataError::Io { path: test_dir.clone(), source })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    kinds.sort();
    for kind_dir in kinds {
        let kind = kind_dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let defective = kind != "good";
        for path in list_pngs(&kind_dir)? {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let img = open_image(&path)?;
            let image = preprocess(&img, channels, target)?;
            let mask = if defective {
                let mask_path = base.join("ground_truth").join(&kind).join(format!("{stem}_mask.png"));
                if !mask_path.exists() {
                    return Err(DataError::MissingMask(path.clone()));
                }
                let mask_img = open_image(&mask_path)?;
                check_mask_size(&mask_img, &img, &mask_path)?;
                Some(preprocess_mask(&mask_img, target)?)
            } else {
                None
            };
            test.push(Sample {
                image,
                is_defective: defective,
                mask,
                source_id: format!("test/{kind}/{}", path.file_name().unwrap_or_default().to_string_lossy()),
            });
        }
    }
    Ok((train, test))
}

fn check_mask_size(
    mask: &image::DynamicImage,
    img: &image::DynamicImage,
    mask_path: &Path,
) -> Result<(), DataError> {
    if mask.dimensions() != img.dimensions() {
        return Err(DataError::MaskSizeMismatch {
            mask: mask_path.to_path_buf(),
            mask_size: mask.dimensions(),
            image_size: img.dimensions(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct AugmentPolicy {
    pub hflip: bool,
    pub vflip: bool,
    /// Random rotation by a multiple of 90°.
    pub rot90: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { hflip: false, vflip: false, rot90: false }
    }
}

impl AugmentPolicy {
    pub fn is_identity(&self) -> bool {
        !(self.hflip || self.vflip || self.rot90)
    }
}

fn flip_h(t: &Tensor) -> Tensor {
    let s = t.shape().to_vec();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Tensor::from_fn(&s, |i| {
        let (p, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        t.data()[p * h * w + y * w + (w - 1 - x)]
    })
}

fn flip_v(t: &Tensor) -> Tensor {
    let s = t.shape().to_vec();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Tensor::from_fn(&s, |i| {
        let (p, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        t.data()[p * h * w + (h - 1 - y) * w + x]
    })
}

/// Rotate 90° counterclockwise `turns` times; requires square spatial dims.
fn rot90(t: &Tensor, turns: usize) -> Tensor {
    let mut out = t.clone();
    let s = t.shape().to_vec();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    debug_assert_eq!(h, w, "rot90 requires square images");
    for _ in 0..turns % 4 {
        let prev = out.clone();
        out = Tensor::from_fn(&s, |i| {
            let (p, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            // (y, x) <- (x, w-1-y) rotates the image 90° CCW.
            prev.data()[p * h * w + x * w + (w - 1 - y)]
        });
    }
    out
}

/// Apply the policy's enabled transforms with seeded coin flips; image and
/// mask are transformed identically.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, rng: &mut impl Rng) -> Sample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if policy.hflip && rng.gen_bool(0.5) {
        image = flip_h(&image);
        mask = mask.map(|m| flip_h(&m));
    }
    if policy.vflip && rng.gen_bool(0.5) {
        image = flip_v(&image);
        mask = mask.map(|m| flip_v(&m));
    }
    if policy.rot90 {
        let turns = rng.gen_range(0..4usize);
        if turns > 0 {
            image = rot90(&image, turns);
            mask = mask.map(|m| rot90(&m, turns));
        }
    }
    Sample {
        image,
        is_defective: sample.is_defective,
        mask,
        source_id: sample.source_id.clone(),
    }
}

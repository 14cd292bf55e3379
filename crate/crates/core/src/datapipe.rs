//! Kvasir-SEG style loading, mask binarisation, polyp cropping, rotation and
//! zoom augmentation, resizing and seeded splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{domain_err, shape_err, Result, SegError};
use crate::kernels;
use crate::metrics::Mask;
use crate::tensor::Tensor;

pub const DEFAULT_MASK_THRESHOLD: i32 = 127;
pub const DEFAULT_BBOX_MARGIN: f64 = 0.1;

/// One RGB endoscopic image (`3 x H x W`, values in `[0, 1]`) with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Mask,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Mask) -> Result<Self> {
        let (c, h, w) = match image.shape() {
            &[c, h, w] => (c, h, w),
            s => return shape_err(format!("image must be 3 x H x W, got {s:?}")),
        };
        if c != 3 {
            return shape_err(format!("image must have 3 channels, got {c}"));
        }
        if (h, w) != (mask.height, mask.width) {
            return shape_err(format!(
                "image is {h}x{w} but mask is {}x{}",
                mask.height, mask.width
            ));
        }
        mask.check_binary()?;
        Ok(Self { id: id.into(), image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.image.data()[(c * self.height() + y) * self.width() + x]
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// `1` where `gray > threshold`, else `0`.
pub fn binarize_mask(gray: &[u8], height: usize, width: usize, threshold: i32) -> Result<Mask> {
    if !(0..=255).contains(&threshold) {
        return domain_err(format!("threshold must be in [0, 255], got {threshold}"));
    }
    if gray.len() != height * width {
        return shape_err(format!(
            "gray map of {} pixels does not match {height}x{width}",
            gray.len()
        ));
    }
    let data = gray.iter().map(|&v| (i32::from(v) > threshold) as u8).collect();
    Mask::new(height, width, data)
}

/// Tight box around the foreground, grown by `margin * max(width, height)`
/// on every side and clipped to the mask bounds.
pub fn mask_bbox(mask: &Mask, margin: f64) -> Result<BBox> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return domain_err(format!("margin must be a finite value >= 0, got {margin}"));
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) == 1 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 == usize::MAX {
        return domain_err("no foreground");
    }
    let pad = margin * (x1 - x0).max(y1 - y0) as f64;
    let lo = |v: usize| (v as f64 - pad).floor().max(0.0) as usize;
    let hi = |v: usize, bound: usize| ((v as f64 + pad).ceil() as usize).min(bound);
    let (bx0, by0) = (lo(x0), lo(y0));
    let (bx1, by1) = (hi(x1, mask.width), hi(y1, mask.height));
    Ok(BBox {
        x0: bx0,
        y0: by0,
        width: bx1 - bx0,
        height: by1 - by0,
    })
}

/// Crops image and mask to the same region; the id gains a `.crop` suffix.
pub fn crop_to_bbox(sample: &ImageSample, b: &BBox) -> Result<ImageSample> {
    if b.width == 0 || b.height == 0 || b.x0 + b.width > sample.width() || b.y0 + b.height > sample.height() {
        return shape_err(format!(
            "box {b:?} does not fit inside a {}x{} sample",
            sample.height(),
            sample.width()
        ));
    }
    let mut img = Vec::with_capacity(3 * b.width * b.height);
    for c in 0..3 {
        for y in b.y0..b.y0 + b.height {
            for x in b.x0..b.x0 + b.width {
                img.push(sample.pixel(c, y, x));
            }
        }
    }
    let mask = Mask::from_fn(b.height, b.width, |y, x| sample.mask.get(b.y0 + y, b.x0 + x) == 1);
    ImageSample::new(
        format!("{}.crop", sample.id),
        Tensor::new(vec![3, b.height, b.width], img)?,
        mask,
    )
}

/// Geometric augmentation applied identically to image and mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    /// Counter-clockwise rotation about the image centre, in degrees.
    Rotation(f64),
    /// Scale about the centre; values above 1 zoom in.
    Zoom(f64),
}

fn sin_cos_degrees(angle: f64) -> (f64, f64) {
    // Exact values at right angles keep nearest-neighbour rotations lossless.
    if angle.rem_euclid(90.0) == 0.0 {
        match (angle.rem_euclid(360.0) / 90.0) as i32 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle.to_radians().sin_cos()
    }
}

/// Applies `op` to image (bilinear) and mask (nearest neighbour), both with
/// zero padding; dimensions are unchanged.
pub fn augment(sample: &ImageSample, op: AugmentOp) -> Result<ImageSample> {
    let (h, w) = (sample.height(), sample.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Inverse map from output coordinates (dx, dy) relative to the centre.
    let (a, b, c, d) = match op {
        AugmentOp::Rotation(angle) => {
            if !(-180.0..=180.0).contains(&angle) {
                return domain_err(format!("rotation angle must be in [-180, 180], got {angle}"));
            }
            let (s, co) = sin_cos_degrees(angle);
            // y axis points down, so a visual counter-clockwise turn.
            (co, -s, s, co)
        }
        AugmentOp::Zoom(f) => {
            if !(0.5..=2.0).contains(&f) {
                return domain_err(format!("zoom factor must be in [0.5, 2.0], got {f}"));
            }
            (1.0 / f, 0.0, 0.0, 1.0 / f)
        }
    };
    let source = |y: usize, x: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (a * dx + b * dy + cx, c * dx + d * dy + cy)
    };

    let mut img = vec![0.0; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    let src = sample.image.data();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source(y, x);
            let (mx, my) = (sx.round(), sy.round());
            if mx >= 0.0 && my >= 0.0 && (mx as usize) < w && (my as usize) < h {
                mask[y * w + x] = sample.mask.get(my as usize, mx as usize);
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..3 {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let at = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize]
                    }
                };
                let mut v = at(y0, x0) * (1.0 - fx) * (1.0 - fy);
                if fx != 0.0 {
                    v += at(y0, x0 + 1.0) * fx * (1.0 - fy);
                }
                if fy != 0.0 {
                    v += at(y0 + 1.0, x0) * (1.0 - fx) * fy;
                    if fx != 0.0 {
                        v += at(y0 + 1.0, x0 + 1.0) * fx * fy;
                    }
                }
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
    ImageSample::new(sample.id.clone(), Tensor::new(vec![3, h, w], img)?, Mask::new(h, w, mask)?)
}

/// Random rotation/zoom policy. Each transform fires independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub rotation: bool,
    pub zoom: bool,
    pub max_rotation: f64,
    pub zoom_range: (f64, f64),
    pub probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation: true,
            zoom: true,
            max_rotation: 30.0,
            zoom_range: (0.8, 1.25),
            probability: 0.5,
        }
    }
}

/// Draws transforms from `policy` with a generator seeded by `seed` and
/// applies them in order (rotation, then zoom).
pub fn random_augment(sample: &ImageSample, policy: &AugmentPolicy, seed: u64) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    if policy.rotation && rng.gen_bool(policy.probability) {
        let angle = rng.gen_range(-policy.max_rotation..=policy.max_rotation);
        out = augment(&out, AugmentOp::Rotation(angle))?;
    }
    if policy.zoom && rng.gen_bool(policy.probability) {
        let f = rng.gen_range(policy.zoom_range.0..=policy.zoom_range.1);
        out = augment(&out, AugmentOp::Zoom(f))?;
    }
    Ok(out)
}

/// Image bilinear, mask nearest neighbour.
pub fn resize(sample: &ImageSample, height: usize, width: usize) -> Result<ImageSample> {
    if height < 8 || width < 8 {
        return domain_err(format!("resize target must be at least 8x8, got {height}x{width}"));
    }
    let (h, w) = (sample.height(), sample.width());
    let img = kernels::resize_bilinear(&sample.image.clone().reshape(vec![1, 3, h, w])?, height, width)?
        .reshape(vec![3, height, width])?;
    let near = |dst: usize, src: usize, out: usize| (((dst as f64 + 0.5) * src as f64 / out as f64) as usize).min(src - 1);
    let mask = Mask::from_fn(height, width, |y, x| sample.mask.get(near(y, h, height), near(x, w, width)) == 1);
    ImageSample::new(sample.id.clone(), img, mask)
}

/// Seeded shuffle, then the first `floor(n * train_fraction)` go to training.
pub fn split<T: Clone>(samples: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return domain_err(format!("train fraction must be in (0, 1), got {train_fraction}"));
    }
    if samples.is_empty() {
        return domain_err("cannot split an empty dataset");
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (samples.len() as f64 * train_fraction).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| SegError::Load {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem, path.clone()) {
            return Err(SegError::Load {
                path,
                msg: format!("duplicate stem, also present as {}", prev.display()),
            });
        }
    }
    Ok(out)
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[p * 3 + c]) / 255.0
    })
}

/// Loads one image/mask pair from disk.
pub fn load_pair(id: &str, image_path: &Path, mask_path: &Path) -> Result<ImageSample> {
    let load_err = |path: &Path, e: image::ImageError| SegError::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let rgb = image::open(image_path).map_err(|e| load_err(image_path, e))?.to_rgb8();
    let gray: GrayImage = image::open(mask_path).map_err(|e| load_err(mask_path, e))?.to_luma8();
    if rgb.dimensions() != gray.dimensions() {
        return Err(SegError::Load {
            path: mask_path.to_path_buf(),
            msg: format!(
                "mask is {}x{} but image is {}x{}",
                gray.height(),
                gray.width(),
                rgb.height(),
                rgb.width()
            ),
        });
    }
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mask = binarize_mask(gray.as_raw(), h, w, DEFAULT_MASK_THRESHOLD)?;
    ImageSample::new(id, rgb_to_tensor(&rgb), mask)
}

/// Loads every `images/<stem>` + `masks/<stem>` pair under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    let images = list_by_stem(&root.join("images"))?;
    let masks = list_by_stem(&root.join("masks"))?;
    for (stem, path) in &masks {
        if !images.contains_key(stem) {
            return Err(SegError::Load {
                path: path.clone(),
                msg: "mask has no matching image".into(),
            });
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let Some(mask_path) = masks.get(stem) else {
            return Err(SegError::Load {
                path: image_path.clone(),
                msg: "image has no matching mask".into(),
            });
        };
        samples.push(load_pair(stem, image_path, mask_path)?);
    }
    Ok(samples)
}

/// Writes samples in the same `images/` + `masks/` layout, both as PNG;
/// masks hold 0 and 255.
pub fn write_dataset(samples: &[ImageSample], root: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&mask_dir)?;
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let d = s.image.data();
        let mut raw = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for c in 0..3 {
                raw.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let rgb = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image");
        rgb.save(img_dir.join(format!("{}.png", s.id)))?;
        let gray = GrayImage::from_raw(w as u32, h as u32, s.mask.data.iter().map(|&v| v * 255).collect())
            .expect("buffer sized for mask");
        gray.save(mask_dir.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Options for [`prepare`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub crop: bool,
    pub margin: f64,
    pub augment: Option<AugmentPolicy>,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            crop: false,
            margin: DEFAULT_BBOX_MARGIN,
            augment: None,
            seed: 0,
        }
    }
}

/// Builds the prepared dataset: every original, plus a cropped copy of each
/// sample with foreground when `crop` is set, plus one augmented copy of
/// each of those when an augmentation policy is given. Sorted by id.
pub fn prepare(samples: &[ImageSample], opts: &PrepareOptions) -> Result<Vec<ImageSample>> {
    let mut out: Vec<ImageSample> = samples.to_vec();
    if opts.crop {
        for s in samples {
            if s.mask.foreground() == 0 {
                continue;
            }
            let b = mask_bbox(&s.mask, opts.margin)?;
            out.push(crop_to_bbox(s, &b)?);
        }
    }
    if let Some(policy) = &opts.augment {
        let base = out.len();
        for i in 0..base {
            let seed = opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut a = random_augment(&out[i], policy, seed)?;
            a.id = format!("{}.aug", a.id);
            out.push(a);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Deterministic synthetic samples: one to three elliptical "polyps" per
/// image, drawn reddish over a textured background with mild noise.
pub fn synthetic_samples(n: usize, size: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = size as f64;
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    (
                        rng.gen_range(0.2 * s..0.8 * s),
                        rng.gen_range(0.2 * s..0.8 * s),
                        rng.gen_range(0.08 * s..0.2 * s),
                        rng.gen_range(0.08 * s..0.2 * s),
                    )
                })
                .collect();
            let mask = Mask::from_fn(size, size, |y, x| {
                blobs.iter().any(|&(cy, cx, ry, rx)| {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                })
            });
            let phase: f64 = rng.gen_range(0.0..6.28);
            let mut img = vec![0.0; 3 * size * size];
            for y in 0..size {
                for x in 0..size {
                    let texture = 0.1 * ((x as f64 * 0.3 + phase).sin() * (y as f64 * 0.2).cos());
                    let fg = mask.get(y, x) == 1;
                    let base = if fg { [0.85, 0.35, 0.3] } else { [0.55, 0.4, 0.35] };
                    for c in 0..3 {
                        let noise: f64 = rng.gen_range(-0.05..0.05);
                        img[(c * size + y) * size + x] = (base[c] + texture + noise).clamp(0.0, 1.0);
                    }
                }
            }
            ImageSample::new(format!("synth{i:03}"), Tensor::new(vec![3, size, size], img).expect("sized"), mask)
                .expect("consistent sample")
        })
        .collect()
}

/// Stacks samples into an `N x 3 x H x W` image batch and `N x 1 x H x W` truth.
pub fn to_batch(samples: &[&ImageSample]) -> Result<(Tensor, Tensor)> {
    let Some(first) = samples.first() else {
        return shape_err("batch needs at least one sample");
    };
    let (h, w) = (first.height(), first.width());
    let mut imgs = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut truth = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return shape_err(format!(
                "sample {} is {}x{}, batch is {h}x{w}",
                s.id,
                s.height(),
                s.width()
            ));
        }
        imgs.extend_from_slice(s.image.data());
        truth.extend(s.mask.data.iter().map(|&v| f64::from(v)));
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, h, w], imgs)?,
        Tensor::new(vec![samples.len(), 1, h, w], truth)?,
    ))
}

//! Weak and strong augmentation views.
//!
//! The weak view is reflect-pad + random crop + optional horizontal flip. The
//! strong view applies the weak pipeline, then two transforms sampled from a
//! fixed pool (rotate, shear, contrast, brightness, optional invert), then a
//! square cutout, and clamps back into `[0, 1]`. All randomness comes from a
//! caller-supplied stream, so a view is a pure function of (image, config,
//! stream state).

use rand::Rng;

use crate::data::Image;

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Reflect padding (and maximum crop offset) for the weak view.
    pub pad: usize,
    /// Horizontal flips change digit semantics; off for digit datasets.
    pub flips_enabled: bool,
    pub rotate_max_deg: f64,
    pub shear_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub brightness_max: f64,
    pub invert_enabled: bool,
    /// Square cutout side; 0 disables cutout.
    pub cutout_size: usize,
    /// Number of pool transforms applied by the strong view.
    pub strong_ops: usize,
}

impl AugmentConfig {
    /// Defaults for 28x28 digit images.
    pub fn mnist() -> AugmentConfig {
        AugmentConfig {
            pad: 4,
            flips_enabled: false,
            rotate_max_deg: 30.0,
            shear_max: 0.3,
            contrast_min: 0.5,
            contrast_max: 1.5,
            brightness_max: 0.3,
            invert_enabled: true,
            cutout_size: 8,
            strong_ops: 2,
        }
    }

    /// Defaults for small synthetic blob images.
    pub fn blobs() -> AugmentConfig {
        AugmentConfig {
            pad: 1,
            flips_enabled: true,
            rotate_max_deg: 0.0,
            shear_max: 0.0,
            contrast_min: 0.7,
            contrast_max: 1.3,
            brightness_max: 0.2,
            invert_enabled: false,
            cutout_size: 2,
            strong_ops: 2,
        }
    }
}

/// The two views of one source image.
#[derive(Clone, Debug)]
pub struct AugPair {
    pub weak: Image,
    pub strong: Image,
    pub source_id: u64,
}

// ---- deterministic primitive transforms ----------------------------------------

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge.
fn reflect_index(j: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n as i64 - 2;
    let mut m = j % period;
    if m < 0 {
        m += period;
    }
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn reflect_pad(img: &Image, pad: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Image::zeros(hp, wp);
    for r in 0..hp {
        let sr = reflect_index(r as i64 - pad as i64, h);
        for c in 0..wp {
            let sc = reflect_index(c as i64 - pad as i64, w);
            out.data[r * wp + c] = img.data[sr * w + sc];
        }
    }
    out
}

pub fn crop(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    assert!(top + h <= img.height && left + w <= img.width);
    let mut out = Image::zeros(h, w);
    for r in 0..h {
        let src = (top + r) * img.width + left;
        out.data[r * w..(r + 1) * w].copy_from_slice(&img.data[src..src + w]);
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for r in 0..img.height {
        out.data[r * img.width..(r + 1) * img.width].reverse();
    }
    out
}

fn bilinear(img: &Image, y: f64, x: f64) -> f64 {
    // Zero fill outside the source.
    if y < -1.0 || x < -1.0 || y > img.height as f64 || x > img.width as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let sample = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= img.height as i64 || c >= img.width as i64 {
            0.0
        } else {
            img.data[r as usize * img.width + c as usize]
        }
    };
    let (r0, c0) = (y0 as i64, x0 as i64);
    sample(r0, c0) * (1.0 - fy) * (1.0 - fx)
        + sample(r0, c0 + 1) * (1.0 - fy) * fx
        + sample(r0 + 1, c0) * fy * (1.0 - fx)
        + sample(r0 + 1, c0 + 1) * fy * fx
}

/// Rotate about the image center, bilinear, zero fill.
pub fn rotate(img: &Image, angle_deg: f64) -> Image {
    let rad = angle_deg.to_radians();
    let (s, c) = rad.sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(img.height, img.width);
    for r in 0..img.height {
        for q in 0..img.width {
            let dy = r as f64 - cy;
            let dx = q as f64 - cx;
            // inverse rotation of the output grid
            let sy = c * dy + s * dx + cy;
            let sx = -s * dy + c * dx + cx;
            out.data[r * img.width + q] = bilinear(img, sy, sx);
        }
    }
    out
}

/// Horizontal shear about the image center, bilinear, zero fill.
pub fn shear(img: &Image, factor: f64) -> Image {
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(img.height, img.width);
    for r in 0..img.height {
        for q in 0..img.width {
            let dy = r as f64 - cy;
            let sx = q as f64 - cx - factor * dy + cx;
            out.data[r * img.width + q] = bilinear(img, r as f64, sx);
        }
    }
    out
}

/// Scale contrast about the image mean: `f*x + (1-f)*mean`.
pub fn contrast(img: &Image, factor: f64) -> Image {
    let mean = img.data.iter().sum::<f64>() / img.len() as f64;
    let mut out = img.clone();
    for v in &mut out.data {
        *v = factor * *v + (1.0 - factor) * mean;
    }
    out
}

pub fn brightness(img: &Image, delta: f64) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v += delta;
    }
    out
}

pub fn invert(img: &Image) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = 1.0 - *v;
    }
    out
}

/// Zero a patch with the given top-left corner; the patch is clipped to the
/// image when the image is smaller than the requested size.
pub fn cutout(img: &Image, top: usize, left: usize, size: usize) -> Image {
    let mut out = img.clone();
    let ph = size.min(img.height);
    let pw = size.min(img.width);
    for r in top..(top + ph).min(img.height) {
        for c in left..(left + pw).min(img.width) {
            out.data[r * img.width + c] = 0.0;
        }
    }
    out
}

fn clamp01(img: &mut Image) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

// ---- sampled pipelines -----------------------------------------------------------

/// Weak view at explicit crop offsets (used by the sampled path and by tests).
pub fn weak_augment_at(img: &Image, cfg: &AugmentConfig, top: usize, left: usize, flip: bool) -> Image {
    let padded = reflect_pad(img, cfg.pad);
    let cropped = crop(&padded, top, left, img.height, img.width);
    if flip {
        hflip(&cropped)
    } else {
        cropped
    }
}

pub fn weak_augment(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let top = rng.gen_range(0..=2 * cfg.pad);
    let left = rng.gen_range(0..=2 * cfg.pad);
    let flip = cfg.flips_enabled && rng.gen_range(0.0..1.0) < 0.5;
    weak_augment_at(img, cfg, top, left, flip)
}

#[derive(Clone, Copy, Debug)]
enum PoolOp {
    Rotate,
    Shear,
    Contrast,
    Brightness,
    Invert,
}

fn pool(cfg: &AugmentConfig) -> Vec<PoolOp> {
    let mut ops = vec![PoolOp::Rotate, PoolOp::Shear, PoolOp::Contrast, PoolOp::Brightness];
    if cfg.invert_enabled {
        ops.push(PoolOp::Invert);
    }
    ops
}

fn sym_range(rng: &mut impl Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..max)
    } else {
        0.0
    }
}

pub fn strong_augment(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let mut out = weak_augment(img, cfg, rng);
    let ops = pool(cfg);
    for _ in 0..cfg.strong_ops {
        let op = ops[rng.gen_range(0..ops.len())];
        out = match op {
            PoolOp::Rotate => rotate(&out, sym_range(rng, cfg.rotate_max_deg)),
            PoolOp::Shear => shear(&out, sym_range(rng, cfg.shear_max)),
            PoolOp::Contrast => {
                let f = if cfg.contrast_max > cfg.contrast_min {
                    rng.gen_range(cfg.contrast_min..cfg.contrast_max)
                } else {
                    cfg.contrast_min
                };
                contrast(&out, f)
            }
            PoolOp::Brightness => brightness(&out, sym_range(rng, cfg.brightness_max)),
            PoolOp::Invert => invert(&out),
        };
    }
    if cfg.cutout_size > 0 {
        let ph = cfg.cutout_size.min(out.height);
        let pw = cfg.cutout_size.min(out.width);
        let top = rng.gen_range(0..=out.height - ph);
        let left = rng.gen_range(0..=out.width - pw);
        out = cutout(&out, top, left, cfg.cutout_size);
    }
    clamp01(&mut out);
    out
}

pub fn augment_pair(
    img: &Image,
    source_id: u64,
    cfg: &AugmentConfig,
    weak_rng: &mut impl Rng,
    strong_rng: &mut impl Rng,
) -> AugPair {
    AugPair {
        weak: weak_augment(img, cfg, weak_rng),
        strong: strong_augment(img, cfg, strong_rng),
        source_id,
    }
}

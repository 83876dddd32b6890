//! Dataset loading and synthesis: IDX files, Gaussian blob images, long-tailed
//! resampling and label-noise injection.
//!
//! Every operation is a pure function of its inputs and a seed. Ground-truth
//! labels and the noise mask live in the bundle for evaluation only; the
//! trainer receives a [`TrainView`] that exposes given labels exclusively.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{self, stream};

/// Single-channel image with pixel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Image {
        assert_eq!(data.len(), height * width);
        Image { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Image {
        Image { height, width, data: vec![0.0; height * width] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub given_label: usize,
    pub true_label: usize,
    pub id: u64,
}

impl Sample {
    /// A sample is noisy exactly when its given label disagrees with the truth.
    pub fn is_noisy(&self) -> bool {
        self.given_label != self.true_label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    ClassIndependent,
    ClassDependent,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::ClassIndependent => "class_independent",
            NoiseKind::ClassDependent => "class_dependent",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub samples: Vec<Sample>,
    pub k: usize,
    /// Per-class sample counts by true label, after resampling, before noise.
    pub class_counts: Vec<usize>,
    pub rho: f64,
    pub eta: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

/// What the trainer is allowed to see: images and given labels only.
pub struct TrainView<'a> {
    pub k: usize,
    samples: &'a [Sample],
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, idx: usize) -> &Image {
        &self.samples[idx].image
    }

    pub fn given_label(&self, idx: usize) -> usize {
        self.samples[idx].given_label
    }

    pub fn sample_id(&self, idx: usize) -> u64 {
        self.samples[idx].id
    }

    /// Counts of given labels, used to initialize the prior distribution.
    pub fn given_label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for s in self.samples {
            counts[s.given_label] += 1;
        }
        counts
    }
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView { k: self.k, samples: &self.samples }
    }

    /// Noise mask indexed like `samples`; true marks a corrupted label.
    pub fn noise_mask(&self) -> Vec<bool> {
        self.samples.iter().map(Sample::is_noisy).collect()
    }

    pub fn noisy_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.is_noisy()).count() as f64 / self.samples.len() as f64
    }

    fn recount_by_true_label(&mut self) {
        let mut counts = vec![0usize; self.k];
        for s in &self.samples {
            counts[s.true_label] += 1;
        }
        self.class_counts = counts;
    }
}

// ---- IDX loading ------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(off..off + 4)
        .ok_or_else(|| Error::Parse(format!("truncated IDX file while reading {what}")))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Load an IDX image/label file pair into a clean bundle (labels trusted,
/// `eta = 0`). Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetBundle> {
    let img_buf = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab_buf = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let img_magic = read_be_u32(&img_buf, 0, "images magic")?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse(format!(
            "bad images magic {img_magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n_images = read_be_u32(&img_buf, 4, "image count")? as usize;
    let height = read_be_u32(&img_buf, 8, "image rows")? as usize;
    let width = read_be_u32(&img_buf, 12, "image cols")? as usize;
    let expected = 16 + n_images * height * width;
    if img_buf.len() != expected {
        return Err(Error::Parse(format!(
            "images payload is {} bytes, header implies {expected}",
            img_buf.len()
        )));
    }

    let lab_magic = read_be_u32(&lab_buf, 0, "labels magic")?;
    if lab_magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse(format!(
            "bad labels magic {lab_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = read_be_u32(&lab_buf, 4, "label count")? as usize;
    if lab_buf.len() != 8 + n_labels {
        return Err(Error::Parse(format!(
            "labels payload is {} bytes, header implies {}",
            lab_buf.len(),
            8 + n_labels
        )));
    }
    if n_images != n_labels {
        return Err(Error::Parse(format!(
            "count mismatch: {n_images} images vs {n_labels} labels"
        )));
    }

    let k = 10;
    let mut samples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let label = lab_buf[8 + i] as usize;
        if label >= k {
            return Err(Error::Parse(format!("label {label} out of range at index {i}")));
        }
        let start = 16 + i * height * width;
        let data: Vec<f64> =
            img_buf[start..start + height * width].iter().map(|&b| b as f64 / 255.0).collect();
        samples.push(Sample {
            image: Image::new(height, width, data),
            given_label: label,
            true_label: label,
            id: i as u64,
        });
    }

    let mut bundle = DatasetBundle {
        samples,
        k,
        class_counts: vec![0; k],
        rho: 1.0,
        eta: 0.0,
        noise_kind: NoiseKind::None,
        seed: 0,
    };
    bundle.recount_by_true_label();
    let max = *bundle.class_counts.iter().max().unwrap_or(&0);
    let min = *bundle.class_counts.iter().min().unwrap_or(&0);
    bundle.rho = if max > 0 { min as f64 / max as f64 } else { 1.0 };
    Ok(bundle)
}

// ---- blob synthesis ----------------------------------------------------------

/// Class center pattern for blob datasets.
///
/// When `dim` is a perfect square the pattern is a radial ring (radius grows
/// with the class index) on an s-by-s image, which keeps the class signal
/// invariant under flips and spread across the whole plane. Otherwise the
/// pattern is a 1-by-dim bump centered at a class-specific position.
fn blob_center(k_idx: usize, k_total: usize, dim: usize) -> Image {
    let side = (dim as f64).sqrt().round() as usize;
    if side >= 2 && side * side == dim {
        let c = (side as f64 - 1.0) / 2.0;
        let max_r = c * 2.0_f64.sqrt();
        let radius = (k_idx as f64 + 1.0) / (k_total as f64 + 1.0) * max_r;
        let ring_w = (max_r / (k_total as f64 + 1.0)).max(0.5);
        let mut data = vec![0.0; dim];
        for r in 0..side {
            for q in 0..side {
                let d = ((r as f64 - c).powi(2) + (q as f64 - c).powi(2)).sqrt();
                let z = (d - radius) / ring_w;
                data[r * side + q] = 0.15 + 0.7 * (-z * z).exp();
            }
        }
        Image::new(side, side, data)
    } else {
        let pos = (k_idx as f64 + 1.0) / (k_total as f64 + 1.0) * (dim as f64 - 1.0);
        let bump_w = (dim as f64 / (k_total as f64 + 1.0) / 2.0).max(0.5);
        let data = (0..dim)
            .map(|x| {
                let z = (x as f64 - pos) / bump_w;
                0.15 + 0.7 * (-z * z).exp()
            })
            .collect();
        Image::new(1, dim, data)
    }
}

/// Synthesize a balanced blob dataset: class `k` is an isotropic Gaussian of
/// the given spread around a distinct center pattern, squashed into `[0, 1]`.
pub fn make_blobs(
    k: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    make_blobs_tagged(k, n_per_class, dim, spread, seed, 0)
}

/// Blob synthesis on a tagged stream, so one seed can produce disjoint
/// train and test sets.
pub fn make_blobs_tagged(
    k: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    tag: u64,
) -> Result<DatasetBundle> {
    if k < 2 {
        return Err(Error::Config(format!("make_blobs: need at least 2 classes, got {k}")));
    }
    if n_per_class < 1 {
        return Err(Error::Config("make_blobs: n_per_class must be >= 1".into()));
    }
    if spread <= 0.0 {
        return Err(Error::Config(format!("make_blobs: spread must be > 0, got {spread}")));
    }
    let centers: Vec<Image> = (0..k).map(|c| blob_center(c, k, dim)).collect();
    let mut samples = Vec::with_capacity(k * n_per_class);
    let mut id = 0u64;
    for (cls, center) in centers.iter().enumerate() {
        let mut rng = stream(seed, stream::PURPOSE_BLOBS, cls as u64, tag);
        for _ in 0..n_per_class {
            let data: Vec<f64> = center
                .data
                .iter()
                .map(|&c| (c + spread * gaussian(&mut rng)).clamp(0.0, 1.0))
                .collect();
            samples.push(Sample {
                image: Image::new(center.height, center.width, data),
                given_label: cls,
                true_label: cls,
                id,
            });
            id += 1;
        }
    }
    let mut bundle = DatasetBundle {
        samples,
        k,
        class_counts: vec![0; k],
        rho: 1.0,
        eta: 0.0,
        noise_kind: NoiseKind::None,
        seed,
    };
    bundle.recount_by_true_label();
    Ok(bundle)
}

/// Box-Muller standard normal draw.
fn gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

// ---- long-tailed resampling ----------------------------------------------------

/// Per-class keep counts of the exponential long-tail profile:
/// class `k` keeps `round(base * rho^(k / (K-1)))`.
pub fn longtail_profile(base: usize, k: usize, rho: f64) -> Vec<usize> {
    (0..k)
        .map(|c| {
            let expo = if k > 1 { c as f64 / (k as f64 - 1.0) } else { 0.0 };
            (base as f64 * rho.powf(expo)).round() as usize
        })
        .collect()
}

/// Resample a (near-)balanced bundle into an exponential long-tailed one.
///
/// Class 0 is the head. The profile base is the smallest available class
/// count so every target is reachable without replacement. Kept samples are
/// drawn uniformly per class and the result is shuffled deterministically.
pub fn apply_longtail(d: &DatasetBundle, rho: f64, seed: u64) -> Result<DatasetBundle> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("imbalance ratio must be in (0, 1], got {rho}")));
    }
    let base = *d
        .class_counts
        .iter()
        .min()
        .ok_or_else(|| Error::Config("apply_longtail: empty bundle".into()))?;
    let targets = longtail_profile(base, d.k, rho);
    if let Some(cls) = targets.iter().position(|&t| t == 0) {
        return Err(Error::Config(format!(
            "rho={rho} would leave class {cls} with zero samples"
        )));
    }

    let mut kept: Vec<Sample> = Vec::new();
    for cls in 0..d.k {
        let mut members: Vec<usize> = (0..d.samples.len())
            .filter(|&i| d.samples[i].true_label == cls)
            .collect();
        let mut rng = stream(seed, stream::PURPOSE_LONGTAIL, cls as u64, 0);
        members.shuffle(&mut rng);
        members.truncate(targets[cls]);
        members.sort_unstable();
        kept.extend(members.into_iter().map(|i| d.samples[i].clone()));
    }
    let mut rng = stream(seed, stream::PURPOSE_LONGTAIL, d.k as u64, 1);
    kept.shuffle(&mut rng);

    let mut out = DatasetBundle {
        samples: kept,
        k: d.k,
        class_counts: vec![0; d.k],
        rho,
        eta: d.eta,
        noise_kind: d.noise_kind,
        seed,
    };
    out.recount_by_true_label();
    Ok(out)
}

// ---- label noise ------------------------------------------------------------------

/// Class-independent noise: each label is independently replaced, with
/// probability `eta`, by a uniform draw from the other `K - 1` classes.
pub fn inject_noise_ci(d: &DatasetBundle, eta: f64, seed: u64) -> Result<DatasetBundle> {
    inject_noise(d, eta, seed, NoiseKind::ClassIndependent)
}

/// Class-dependent noise: samples of true class `k` flip to `(k + 1) mod K`
/// with probability `eta`.
pub fn inject_noise_cd(d: &DatasetBundle, eta: f64, seed: u64) -> Result<DatasetBundle> {
    inject_noise(d, eta, seed, NoiseKind::ClassDependent)
}

fn inject_noise(d: &DatasetBundle, eta: f64, seed: u64, kind: NoiseKind) -> Result<DatasetBundle> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("noise rate must be in [0, 1], got {eta}")));
    }
    if d.samples.iter().any(|s| s.is_noisy()) {
        return Err(Error::Config("inject_noise: labels are already corrupted".into()));
    }
    let mut out = d.clone();
    let mut rng = stream(seed, stream::PURPOSE_NOISE, kind as u64, 0);
    for s in &mut out.samples {
        let corrupt = rng.gen_range(0.0..1.0) < eta;
        if !corrupt {
            continue;
        }
        s.given_label = match kind {
            NoiseKind::ClassIndependent => {
                // Uniform over the K-1 other classes.
                let mut lab = rng.gen_range(0..d.k - 1);
                if lab >= s.true_label {
                    lab += 1;
                }
                lab
            }
            NoiseKind::ClassDependent => (s.true_label + 1) % d.k,
            NoiseKind::None => s.true_label,
        };
    }
    out.eta = eta;
    out.noise_kind = kind;
    out.seed = seed;
    Ok(out)
}

// ---- subset / holdout helpers ----------------------------------------------------

/// Keep at most `per_class` samples of every class, drawn uniformly.
pub fn balanced_subset(d: &DatasetBundle, per_class: usize, seed: u64) -> Result<DatasetBundle> {
    if per_class == 0 {
        return Err(Error::Config("balanced_subset: per_class must be >= 1".into()));
    }
    let mut kept = Vec::new();
    for cls in 0..d.k {
        let mut members: Vec<usize> = (0..d.samples.len())
            .filter(|&i| d.samples[i].true_label == cls)
            .collect();
        let mut rng = stream(seed, stream::PURPOSE_SUBSET, cls as u64, 0);
        members.shuffle(&mut rng);
        members.truncate(per_class);
        members.sort_unstable();
        kept.extend(members.into_iter().map(|i| d.samples[i].clone()));
    }
    let mut out = DatasetBundle { samples: kept, class_counts: vec![0; d.k], ..d.clone() };
    out.recount_by_true_label();
    Ok(out)
}

/// Split off `per_class` samples of every class as a held-out set.
/// Returns `(remainder, holdout)`.
pub fn holdout_split(
    d: &DatasetBundle,
    per_class: usize,
    seed: u64,
) -> Result<(DatasetBundle, DatasetBundle)> {
    let mut hold_idx: Vec<usize> = Vec::new();
    for cls in 0..d.k {
        let mut members: Vec<usize> = (0..d.samples.len())
            .filter(|&i| d.samples[i].true_label == cls)
            .collect();
        if members.len() <= per_class {
            return Err(Error::Config(format!(
                "holdout_split: class {cls} has only {} samples, cannot hold out {per_class}",
                members.len()
            )));
        }
        let mut rng = stream(seed, stream::PURPOSE_SUBSET, cls as u64, 1);
        members.shuffle(&mut rng);
        hold_idx.extend(members.into_iter().take(per_class));
    }
    hold_idx.sort_unstable();
    let in_holdout: Vec<bool> = {
        let mut mask = vec![false; d.samples.len()];
        for &i in &hold_idx {
            mask[i] = true;
        }
        mask
    };
    let mut rest = DatasetBundle { samples: Vec::new(), class_counts: vec![0; d.k], ..d.clone() };
    let mut hold = DatasetBundle { samples: Vec::new(), class_counts: vec![0; d.k], ..d.clone() };
    for (i, s) in d.samples.iter().enumerate() {
        if in_holdout[i] {
            hold.samples.push(s.clone());
        } else {
            rest.samples.push(s.clone());
        }
    }
    rest.recount_by_true_label();
    hold.recount_by_true_label();
    Ok((rest, hold))
}

// ---- on-disk bundle format ---------------------------------------------------------
//
// Binary layout (all integers little-endian):
//   magic   "NTDB"            4 bytes
//   version u32               currently 1
//   k       u32
//   count   u64
//   per sample:
//     id          u64
//     given_label u16
//     true_label  u16
//     height      u32
//     width       u32
//     pixels      height*width f64
//
// A JSON sidecar `<path>.json` carries {k, class_counts, rho, eta, noise_kind,
// seed} for tooling that does not want to parse the binary.

const BUNDLE_MAGIC: &[u8; 4] = b"NTDB";
const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct BundleSidecar {
    pub k: usize,
    pub class_counts: Vec<usize>,
    pub rho: f64,
    pub eta: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
    pub n_samples: usize,
}

pub fn save_bundle(d: &DatasetBundle, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.k as u32).to_le_bytes());
    buf.extend_from_slice(&(d.samples.len() as u64).to_le_bytes());
    for s in &d.samples {
        buf.extend_from_slice(&s.id.to_le_bytes());
        buf.extend_from_slice(&(s.given_label as u16).to_le_bytes());
        buf.extend_from_slice(&(s.true_label as u16).to_le_bytes());
        buf.extend_from_slice(&(s.image.height as u32).to_le_bytes());
        buf.extend_from_slice(&(s.image.width as u32).to_le_bytes());
        for &p in &s.image.data {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;

    let sidecar = BundleSidecar {
        k: d.k,
        class_counts: d.class_counts.clone(),
        rho: d.rho,
        eta: d.eta,
        noise_kind: d.noise_kind,
        seed: d.seed,
        n_samples: d.samples.len(),
    };
    let side_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Parse(format!("sidecar serialization: {e}")))?;
    fs::write(&side_path, json).map_err(|e| Error::io(side_path, e))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let take = |off: usize, len: usize| -> Result<&[u8]> {
        buf.get(off..off + len)
            .ok_or_else(|| Error::Parse(format!("bundle truncated at byte {off}")))
    };
    if take(0, 4)? != BUNDLE_MAGIC {
        return Err(Error::Parse("bad bundle magic".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(Error::Parse(format!(
            "bundle version {version}, this build reads {BUNDLE_VERSION}"
        )));
    }
    let k = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(12, 8)?.try_into().unwrap()) as usize;
    let mut off = 20;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u64::from_le_bytes(take(off, 8)?.try_into().unwrap());
        let given = u16::from_le_bytes(take(off + 8, 2)?.try_into().unwrap()) as usize;
        let truth = u16::from_le_bytes(take(off + 10, 2)?.try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(take(off + 12, 4)?.try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(take(off + 16, 4)?.try_into().unwrap()) as usize;
        off += 20;
        let n_px = height * width;
        let raw = take(off, n_px * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += n_px * 8;
        samples.push(Sample { image: Image::new(height, width, data), given_label: given, true_label: truth, id });
    }
    if off != buf.len() {
        return Err(Error::Parse(format!(
            "bundle has {} trailing bytes",
            buf.len() - off
        )));
    }

    let side_path = sidecar_path(path);
    let side_raw = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: BundleSidecar = serde_json::from_str(&side_raw)
        .map_err(|e| Error::Parse(format!("sidecar parse: {e}")))?;
    if sidecar.k != k || sidecar.n_samples != count {
        return Err(Error::Parse("sidecar disagrees with binary bundle".into()));
    }
    let mut bundle = DatasetBundle {
        samples,
        k,
        class_counts: sidecar.class_counts,
        rho: sidecar.rho,
        eta: sidecar.eta,
        noise_kind: sidecar.noise_kind,
        seed: sidecar.seed,
    };
    if bundle.class_counts.len() != k {
        bundle.recount_by_true_label();
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_fixture(dir: &Path, pixels: &[u8], labels: &[u8], h: usize, w: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len();
        assert_eq!(pixels.len(), n * h * w);
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(h as u32).to_be_bytes());
        img.extend_from_slice(&(w as u32).to_be_bytes());
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        let ip = dir.join("imgs");
        let lp = dir.join("labs");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_scales_pixels() {
        let dir = std::env::temp_dir().join("nt_idx_fixture");
        fs::create_dir_all(&dir).unwrap();
        let (ip, lp) = write_idx_fixture(&dir, &[255, 0, 128, 64, 255, 0, 0, 32], &[3, 7], 2, 2);
        let b = load_idx(&ip, &lp).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.k, 10);
        assert_eq!(b.samples[0].image.data[0], 1.0);
        assert_eq!(b.samples[0].given_label, 3);
        assert!((b.samples[0].image.data[3] - 64.0 / 255.0).abs() < 1e-15);
        assert!((b.samples[1].image.data[3] - 32.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_truncated_labels_rejected() {
        let dir = std::env::temp_dir().join("nt_idx_trunc");
        fs::create_dir_all(&dir).unwrap();
        let (ip, lp) = write_idx_fixture(&dir, &[0; 8], &[1, 2], 2, 2);
        let mut raw = fs::read(&lp).unwrap();
        raw.pop();
        fs::write(&lp, raw).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Parse(msg)) => assert!(msg.contains("labels"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = std::env::temp_dir().join("nt_idx_magic");
        fs::create_dir_all(&dir).unwrap();
        let (ip, lp) = write_idx_fixture(&dir, &[0; 4], &[0], 2, 2);
        let mut raw = fs::read(&ip).unwrap();
        raw[3] = 0x05;
        fs::write(&ip, raw).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse(_))));
    }

    #[test]
    fn blobs_deterministic_and_degenerate_spread() {
        let a = make_blobs(3, 5, 16, 1e-12, 42).unwrap();
        let b = make_blobs(3, 5, 16, 1e-12, 42).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data, y.image.data);
        }
        // spread -> 0: all samples of a class nearly identical
        let first = &a.samples[0].image.data;
        for s in &a.samples[1..5] {
            for (p, q) in s.image.data.iter().zip(first) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blobs_linearly_separable_two_classes() {
        let b = make_blobs(2, 100, 10, 0.02, 7).unwrap();
        // Closed-form separating hyperplane: w = c1 - c0 through the midpoint.
        let c0 = blob_center(0, 2, 10);
        let c1 = blob_center(1, 2, 10);
        let w: Vec<f64> = c1.data.iter().zip(&c0.data).map(|(a, b)| a - b).collect();
        let bias: f64 = c0
            .data
            .iter()
            .zip(&c1.data)
            .zip(&w)
            .map(|((a, b), wi)| wi * (a + b) / 2.0)
            .sum();
        let mut correct = 0;
        for s in &b.samples {
            let score: f64 =
                s.image.data.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() - bias;
            let pred = usize::from(score > 0.0);
            if pred == s.true_label {
                correct += 1;
            }
        }
        assert_eq!(correct, 200);
    }

    #[test]
    fn longtail_profile_matches_formula() {
        let counts = longtail_profile(1000, 10, 0.01);
        assert_eq!(counts, vec![1000, 599, 359, 215, 129, 77, 46, 28, 17, 10]);
    }

    #[test]
    fn longtail_identity_at_rho_one() {
        let d = make_blobs(4, 50, 8, 0.05, 3).unwrap();
        let lt = apply_longtail(&d, 1.0, 9).unwrap();
        assert_eq!(lt.class_counts, vec![50, 50, 50, 50]);
        assert_eq!(lt.len(), d.len());
    }

    #[test]
    fn longtail_ratio_within_rounding() {
        let d = make_blobs(10, 200, 8, 0.05, 3).unwrap();
        let lt = apply_longtail(&d, 0.1, 9).unwrap();
        let max = *lt.class_counts.iter().max().unwrap() as f64;
        let min = *lt.class_counts.iter().min().unwrap() as f64;
        let ratio = min / max;
        assert!((0.095..=0.105).contains(&ratio), "ratio {ratio}");
        // counts follow the profile exactly
        assert_eq!(lt.class_counts, longtail_profile(200, 10, 0.1));
    }

    #[test]
    fn longtail_zero_class_rejected() {
        let d = make_blobs(10, 20, 8, 0.05, 3).unwrap();
        assert!(matches!(apply_longtail(&d, 0.001, 1), Err(Error::Config(_))));
    }

    #[test]
    fn noise_ci_bounds_and_mask() {
        let d = make_blobs(5, 200, 8, 0.05, 3).unwrap();
        let n0 = inject_noise_ci(&d, 0.0, 11).unwrap();
        assert_eq!(n0.noisy_fraction(), 0.0);
        let n1 = inject_noise_ci(&d, 1.0, 11).unwrap();
        assert_eq!(n1.noisy_fraction(), 1.0);
        for s in &n1.samples {
            assert_ne!(s.given_label, s.true_label);
        }
        // mask exactness by full scan
        let mask = n1.noise_mask();
        for (m, s) in mask.iter().zip(&n1.samples) {
            assert_eq!(*m, s.given_label != s.true_label);
        }
    }

    #[test]
    fn noise_ci_fraction_in_binomial_interval() {
        let d = make_blobs(10, 1000, 4, 0.05, 5).unwrap();
        let n = inject_noise_ci(&d, 0.2, 13).unwrap();
        let f = n.noisy_fraction();
        // binomial 99% interval around 0.2 for N = 10,000
        assert!((0.1897..=0.2103).contains(&f), "noisy fraction {f}");
    }

    #[test]
    fn noise_cd_wraps_around() {
        let d = make_blobs(10, 30, 4, 0.05, 5).unwrap();
        let n = inject_noise_cd(&d, 1.0, 13).unwrap();
        for s in &n.samples {
            assert_eq!(s.given_label, (s.true_label + 1) % 10);
        }
        let with9 = n.samples.iter().find(|s| s.true_label == 9).unwrap();
        assert_eq!(with9.given_label, 0);
    }

    #[test]
    fn noise_preserves_true_class_counts() {
        let d = make_blobs(6, 40, 4, 0.05, 5).unwrap();
        let lt = apply_longtail(&d, 0.2, 2).unwrap();
        let n = inject_noise_ci(&lt, 0.4, 3).unwrap();
        assert_eq!(n.class_counts, lt.class_counts);
    }

    #[test]
    fn bundle_roundtrip_bitexact() {
        let d = inject_noise_ci(&make_blobs(3, 10, 9, 0.05, 2).unwrap(), 0.3, 4).unwrap();
        let dir = std::env::temp_dir().join("nt_bundle_rt");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("d.bundle");
        save_bundle(&d, &p).unwrap();
        let back = load_bundle(&p).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.given_label, b.given_label);
            assert_eq!(a.true_label, b.true_label);
            assert_eq!(a.image.data, b.image.data);
        }
        // double save is byte-identical
        let bytes1 = fs::read(&p).unwrap();
        save_bundle(&d, &p).unwrap();
        assert_eq!(bytes1, fs::read(&p).unwrap());
    }

    #[test]
    fn holdout_disjoint_and_complete() {
        let d = make_blobs(4, 30, 8, 0.05, 1).unwrap();
        let (rest, hold) = holdout_split(&d, 5, 6).unwrap();
        assert_eq!(hold.len(), 20);
        assert_eq!(rest.len() + hold.len(), d.len());
        let hold_ids: std::collections::HashSet<u64> = hold.samples.iter().map(|s| s.id).collect();
        assert!(rest.samples.iter().all(|s| !hold_ids.contains(&s.id)));
    }
}

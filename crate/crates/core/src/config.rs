//! Run configuration: a flat key=value surface resolved from defaults, an
//! optional config file, and command-line overrides, in that precedence.
//! The resolved configuration is hashable and reproducible; its sha-256 hash
//! is stamped into every output artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::criteria::YPrimeMode;
use crate::data::{self, DatasetBundle, NoiseKind};
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::trainer::{MethodFlags, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Idx,
    Bundle,
}

/// The full resolved run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    // dataset
    pub dataset_kind: DatasetKind,
    pub images_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub test_images_path: Option<PathBuf>,
    pub test_labels_path: Option<PathBuf>,
    pub bundle_path: Option<PathBuf>,
    pub test_bundle_path: Option<PathBuf>,
    /// Balanced subset cap per class before the holdout split; 0 keeps all.
    pub subset_per_class: usize,
    /// Test samples held out per class when no test files are given.
    pub holdout_per_class: usize,
    pub blobs_k: usize,
    pub blobs_n_per_class: usize,
    pub blobs_test_per_class: usize,
    pub blobs_dim: usize,
    pub blobs_spread: f64,
    pub rho: f64,
    pub eta: f64,
    pub noise_kind: NoiseKind,
    // training
    pub train: TrainConfig,
    // output
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_kind: DatasetKind::Blobs,
            images_path: None,
            labels_path: None,
            test_images_path: None,
            test_labels_path: None,
            bundle_path: None,
            test_bundle_path: None,
            subset_per_class: 0,
            holdout_per_class: 150,
            blobs_k: 4,
            blobs_n_per_class: 250,
            blobs_test_per_class: 100,
            blobs_dim: 64,
            blobs_spread: 0.08,
            rho: 1.0,
            eta: 0.0,
            noise_kind: NoiseKind::None,
            train: TrainConfig { aug: AugmentConfig::blobs(), ..TrainConfig::default() },
            out_dir: PathBuf::from("runs/run"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<Vec<usize>>>()
        .and_then(|w| {
            if w.is_empty() {
                Err(Error::Config(format!("{key}: needs at least one width")))
            } else {
                Ok(w)
            }
        })
}

impl RunConfig {
    /// Apply one key=value pair. Every documented key routes through here, so
    /// file parsing and CLI overrides behave identically.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset.kind" => {
                self.dataset_kind = match v {
                    "blobs" => DatasetKind::Blobs,
                    "idx" => DatasetKind::Idx,
                    "bundle" => DatasetKind::Bundle,
                    _ => return Err(Error::Config(format!("dataset.kind: unknown '{v}'"))),
                };
                // dataset families carry different augmentation and
                // architecture defaults; explicit keys still override
                if self.dataset_kind == DatasetKind::Blobs {
                    self.train.aug = AugmentConfig::blobs();
                    self.train.arch = Arch::Mlp { widths: vec![256] };
                } else {
                    self.train.aug = AugmentConfig::mnist();
                    self.train.arch = Arch::Cnn { channels: vec![16, 32] };
                }
            }
            "dataset.images" => self.images_path = Some(PathBuf::from(v)),
            "dataset.labels" => self.labels_path = Some(PathBuf::from(v)),
            "dataset.test_images" => self.test_images_path = Some(PathBuf::from(v)),
            "dataset.test_labels" => self.test_labels_path = Some(PathBuf::from(v)),
            "dataset.bundle" => self.bundle_path = Some(PathBuf::from(v)),
            "dataset.test_bundle" => self.test_bundle_path = Some(PathBuf::from(v)),
            "dataset.subset_per_class" => self.subset_per_class = parse_num(key, v)?,
            "dataset.holdout_per_class" => self.holdout_per_class = parse_num(key, v)?,
            "dataset.k" => self.blobs_k = parse_num(key, v)?,
            "dataset.n_per_class" => self.blobs_n_per_class = parse_num(key, v)?,
            "dataset.test_per_class" => self.blobs_test_per_class = parse_num(key, v)?,
            "dataset.dim" => self.blobs_dim = parse_num(key, v)?,
            "dataset.spread" => self.blobs_spread = parse_num(key, v)?,
            "dataset.rho" => self.rho = parse_num(key, v)?,
            "dataset.eta" => self.eta = parse_num(key, v)?,
            "dataset.noise" => {
                self.noise_kind = match v {
                    "none" => NoiseKind::None,
                    "ci" => NoiseKind::ClassIndependent,
                    "cd" => NoiseKind::ClassDependent,
                    _ => return Err(Error::Config(format!("dataset.noise: unknown '{v}'"))),
                }
            }
            "train.epochs_warmup" => self.train.epochs_warmup = parse_num(key, v)?,
            "train.epochs_main" => self.train.epochs_main = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr0" => self.train.lr0 = parse_num(key, v)?,
            "train.momentum" => self.train.momentum = parse_num(key, v)?,
            "train.alpha" => self.train.weights.alpha = parse_num(key, v)?,
            "train.lambda" => self.train.weights.lambda = parse_num(key, v)?,
            "train.kappa" => self.train.weights.kappa = parse_num(key, v)?,
            "train.tau" => self.train.tau = parse_num(key, v)?,
            "train.bn_momentum" => self.train.bn_momentum = parse_num(key, v)?,
            "train.xi" => self.train.xi = parse_num(key, v)?,
            "train.otsu_bins" => self.train.otsu_bins = parse_num(key, v)?,
            "train.arch" => {
                self.train.arch = match v {
                    "mlp" => Arch::Mlp { widths: vec![256] },
                    "cnn" => Arch::Cnn { channels: vec![16, 32] },
                    _ => return Err(Error::Config(format!("train.arch: unknown '{v}'"))),
                }
            }
            "train.widths" => {
                let widths = parse_widths(key, v)?;
                self.train.arch = match self.train.arch {
                    Arch::Mlp { .. } => Arch::Mlp { widths },
                    Arch::Cnn { .. } => Arch::Cnn { channels: widths },
                }
            }
            "method" => self.train.method = MethodFlags::from_preset(v)?,
            "method.caug" => self.train.method.caug_matching = parse_bool(key, v)?,
            "method.lnor" => self.train.method.lnor = parse_bool(key, v)?,
            "method.opp" => self.train.method.opp = parse_bool(key, v)?,
            "flags.y_prime" => {
                self.train.y_prime_mode = match v {
                    "argmax" => YPrimeMode::ArgMax,
                    "argmin" => YPrimeMode::ArgMin,
                    _ => return Err(Error::Config(format!("flags.y_prime: unknown '{v}'"))),
                }
            }
            "flags.clean_loss_mean" => self.train.clean_loss_mean = parse_bool(key, v)?,
            "aug.pad" => self.train.aug.pad = parse_num(key, v)?,
            "aug.flips" => self.train.aug.flips_enabled = parse_bool(key, v)?,
            "aug.rotate_deg" => self.train.aug.rotate_max_deg = parse_num(key, v)?,
            "aug.shear" => self.train.aug.shear_max = parse_num(key, v)?,
            "aug.contrast_min" => self.train.aug.contrast_min = parse_num(key, v)?,
            "aug.contrast_max" => self.train.aug.contrast_max = parse_num(key, v)?,
            "aug.brightness" => self.train.aug.brightness_max = parse_num(key, v)?,
            "aug.invert" => self.train.aug.invert_enabled = parse_bool(key, v)?,
            "aug.cutout" => self.train.aug.cutout_size = parse_num(key, v)?,
            "aug.strong_ops" => self.train.aug.strong_ops = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a `#`-commented key=value file over the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every key with its resolved value, in sorted order.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let kind = match self.dataset_kind {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Idx => "idx",
            DatasetKind::Bundle => "bundle",
        };
        m.insert("dataset.kind".into(), kind.into());
        let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        m.insert("dataset.images".into(), path_str(&self.images_path));
        m.insert("dataset.labels".into(), path_str(&self.labels_path));
        m.insert("dataset.test_images".into(), path_str(&self.test_images_path));
        m.insert("dataset.test_labels".into(), path_str(&self.test_labels_path));
        m.insert("dataset.bundle".into(), path_str(&self.bundle_path));
        m.insert("dataset.test_bundle".into(), path_str(&self.test_bundle_path));
        m.insert("dataset.subset_per_class".into(), self.subset_per_class.to_string());
        m.insert("dataset.holdout_per_class".into(), self.holdout_per_class.to_string());
        m.insert("dataset.k".into(), self.blobs_k.to_string());
        m.insert("dataset.n_per_class".into(), self.blobs_n_per_class.to_string());
        m.insert("dataset.test_per_class".into(), self.blobs_test_per_class.to_string());
        m.insert("dataset.dim".into(), self.blobs_dim.to_string());
        m.insert("dataset.spread".into(), self.blobs_spread.to_string());
        m.insert("dataset.rho".into(), self.rho.to_string());
        m.insert("dataset.eta".into(), self.eta.to_string());
        m.insert("dataset.noise".into(), match self.noise_kind {
            NoiseKind::None => "none".into(),
            NoiseKind::ClassIndependent => "ci".to_string(),
            NoiseKind::ClassDependent => "cd".to_string(),
        });
        let t = &self.train;
        m.insert("train.epochs_warmup".into(), t.epochs_warmup.to_string());
        m.insert("train.epochs_main".into(), t.epochs_main.to_string());
        m.insert("train.batch_size".into(), t.batch_size.to_string());
        m.insert("train.lr0".into(), t.lr0.to_string());
        m.insert("train.momentum".into(), t.momentum.to_string());
        m.insert("train.alpha".into(), t.weights.alpha.to_string());
        m.insert("train.lambda".into(), t.weights.lambda.to_string());
        m.insert("train.kappa".into(), t.weights.kappa.to_string());
        m.insert("train.tau".into(), t.tau.to_string());
        m.insert("train.bn_momentum".into(), t.bn_momentum.to_string());
        m.insert("train.xi".into(), t.xi.to_string());
        m.insert("train.otsu_bins".into(), t.otsu_bins.to_string());
        m.insert("train.arch".into(), t.arch.to_string());
        m.insert("method.caug".into(), t.method.caug_matching.to_string());
        m.insert("method.lnor".into(), t.method.lnor.to_string());
        m.insert("method.opp".into(), t.method.opp.to_string());
        m.insert(
            "flags.y_prime".into(),
            match t.y_prime_mode {
                YPrimeMode::ArgMax => "argmax".into(),
                YPrimeMode::ArgMin => "argmin".to_string(),
            },
        );
        m.insert("flags.clean_loss_mean".into(), t.clean_loss_mean.to_string());
        m.insert("aug.pad".into(), t.aug.pad.to_string());
        m.insert("aug.flips".into(), t.aug.flips_enabled.to_string());
        m.insert("aug.rotate_deg".into(), t.aug.rotate_max_deg.to_string());
        m.insert("aug.shear".into(), t.aug.shear_max.to_string());
        m.insert("aug.contrast_min".into(), t.aug.contrast_min.to_string());
        m.insert("aug.contrast_max".into(), t.aug.contrast_max.to_string());
        m.insert("aug.brightness".into(), t.aug.brightness_max.to_string());
        m.insert("aug.invert".into(), t.aug.invert_enabled.to_string());
        m.insert("aug.cutout".into(), t.aug.cutout_size.to_string());
        m.insert("aug.strong_ops".into(), t.aug.strong_ops.to_string());
        m.insert("seed".into(), t.seed.to_string());
        m.insert("out.dir".into(), self.out_dir.display().to_string());
        m
    }

    /// sha-256 over the sorted resolved key=value lines (first 16 hex chars).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.to_kv() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("dataset.rho must be in (0, 1], got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("dataset.eta must be in [0, 1], got {}", self.eta)));
        }
        if self.eta > 0.0 && self.noise_kind == NoiseKind::None {
            return Err(Error::Config("dataset.eta > 0 requires dataset.noise = ci or cd".into()));
        }
        match self.dataset_kind {
            DatasetKind::Idx => {
                if self.images_path.is_none() || self.labels_path.is_none() {
                    return Err(Error::Config(
                        "dataset.kind = idx requires dataset.images and dataset.labels".into(),
                    ));
                }
                let has_test_files =
                    self.test_images_path.is_some() && self.test_labels_path.is_some();
                if !has_test_files && self.holdout_per_class == 0 {
                    return Err(Error::Config(
                        "idx datasets need test files or dataset.holdout_per_class > 0".into(),
                    ));
                }
            }
            DatasetKind::Bundle => {
                if self.bundle_path.is_none() || self.test_bundle_path.is_none() {
                    return Err(Error::Config(
                        "dataset.kind = bundle requires dataset.bundle and dataset.test_bundle"
                            .into(),
                    ));
                }
            }
            DatasetKind::Blobs => {
                if self.blobs_k < 2 || self.blobs_n_per_class == 0 || self.blobs_test_per_class == 0
                {
                    return Err(Error::Config("invalid blobs dataset parameters".into()));
                }
            }
        }
        self.train.validate()
    }

    /// Materialize the (train, test) bundle pair this configuration describes.
    ///
    /// The clean source is subset (optional), split into train pool and
    /// held-out test set, and the train pool is then resampled to the
    /// long-tailed profile and label-corrupted. The test set stays balanced
    /// and clean.
    pub fn synthesize(&self) -> Result<(DatasetBundle, DatasetBundle)> {
        self.validate()?;
        let seed = self.train.seed;
        let (clean_train, test) = match self.dataset_kind {
            DatasetKind::Blobs => {
                let train = data::make_blobs_tagged(
                    self.blobs_k,
                    self.blobs_n_per_class,
                    self.blobs_dim,
                    self.blobs_spread,
                    seed,
                    0,
                )?;
                let test = data::make_blobs_tagged(
                    self.blobs_k,
                    self.blobs_test_per_class,
                    self.blobs_dim,
                    self.blobs_spread,
                    seed,
                    1,
                )?;
                (train, test)
            }
            DatasetKind::Idx => {
                let mut train = data::load_idx(
                    self.images_path.as_ref().unwrap(),
                    self.labels_path.as_ref().unwrap(),
                )?;
                if self.subset_per_class > 0 {
                    train = data::balanced_subset(&train, self.subset_per_class, seed)?;
                }
                if let (Some(ti), Some(tl)) = (&self.test_images_path, &self.test_labels_path) {
                    (train, data::load_idx(ti, tl)?)
                } else {
                    let (rest, hold) = data::holdout_split(&train, self.holdout_per_class, seed)?;
                    (rest, hold)
                }
            }
            DatasetKind::Bundle => {
                let train = data::load_bundle(self.bundle_path.as_ref().unwrap())?;
                let test = data::load_bundle(self.test_bundle_path.as_ref().unwrap())?;
                // already synthesized; do not re-apply imbalance or noise
                return Ok((train, test));
            }
        };
        let tailed =
            if self.rho < 1.0 { data::apply_longtail(&clean_train, self.rho, seed)? } else { clean_train };
        let noised = match self.noise_kind {
            NoiseKind::None => tailed,
            NoiseKind::ClassIndependent => data::inject_noise_ci(&tailed, self.eta, seed)?,
            NoiseKind::ClassDependent => data::inject_noise_cd(&tailed, self.eta, seed)?,
        };
        Ok((noised, test))
    }
}

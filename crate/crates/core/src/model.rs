//! Classification network with dual-branch batch normalization.
//!
//! Each normalization layer keeps two complete sets of statistics and affine
//! parameters: one for weakly augmented inputs, one for strongly augmented
//! inputs. Training forwards pick a branch; evaluation always runs on the
//! weak branch with its running statistics, and the strong branch plays no
//! part in inference.

use std::cell::RefCell;
use std::fmt;

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::stream::{stream, PURPOSE_INIT};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Network architecture at desk scale.
#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    /// Flatten, then `linear(width) -> DualBN -> relu` per width, then `linear(K)`.
    Mlp { widths: Vec<usize> },
    /// `conv3x3(ch) -> DualBN -> relu` per channel width (stride 2 after the
    /// first block), then flatten and `linear(K)`. A global-average head
    /// starves the classifier at this depth: two 3x3 blocks only see local
    /// edges, and their spatial means carry almost no class signal.
    Cnn { channels: Vec<usize> },
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Mlp { widths } => write!(
                f,
                "mlp({})",
                widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
            ),
            Arch::Cnn { channels } => write!(
                f,
                "cnn({})",
                channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

/// Per-branch running statistics of one normalization layer.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl RunningStats {
    fn init(channels: usize) -> RunningStats {
        RunningStats { mu: vec![0.0; channels], sigma: vec![1.0; channels] }
    }
}

/// Dual-branch batch normalization layer.
pub struct DualBn {
    pub channels: usize,
    pub xi: f64,
    pub bn_momentum: f64,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub gamma_hat: Tensor,
    pub beta_hat: Tensor,
    running: RefCell<RunningStats>,
    running_hat: RefCell<RunningStats>,
}

impl DualBn {
    pub fn new(channels: usize, xi: f64, bn_momentum: f64) -> DualBn {
        DualBn {
            channels,
            xi,
            bn_momentum,
            gamma: Tensor::param(&[channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::param(&[channels], vec![0.0; channels]).unwrap(),
            gamma_hat: Tensor::param(&[channels], vec![1.0; channels]).unwrap(),
            beta_hat: Tensor::param(&[channels], vec![0.0; channels]).unwrap(),
            running: RefCell::new(RunningStats::init(channels)),
            running_hat: RefCell::new(RunningStats::init(channels)),
        }
    }

    pub fn running(&self, branch: Branch) -> RunningStats {
        match branch {
            Branch::Weak => self.running.borrow().clone(),
            Branch::Strong => self.running_hat.borrow().clone(),
        }
    }

    pub fn set_running(&self, branch: Branch, stats: RunningStats) {
        match branch {
            Branch::Weak => *self.running.borrow_mut() = stats,
            Branch::Strong => *self.running_hat.borrow_mut() = stats,
        }
    }

    /// Forward one branch. In train mode the branch normalizes with its own
    /// batch statistics and, when `update_running` is set, folds them into its
    /// running estimates by EMA. Eval mode uses the weak running statistics.
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        branch: Branch,
        mode: Mode,
        update_running: bool,
    ) -> Result<Tensor> {
        let (gamma, beta) = match branch {
            Branch::Weak => (&self.gamma, &self.beta),
            Branch::Strong => (&self.gamma_hat, &self.beta_hat),
        };
        match mode {
            Mode::Eval => {
                if branch == Branch::Strong {
                    return Err(Error::Usage(
                        "eval forward is defined for the weak branch only".into(),
                    ));
                }
                let stats = self.running.borrow();
                tape.bn_apply_stats(x, gamma, beta, &stats.mu, &stats.sigma)
            }
            Mode::Train => {
                let bn = tape.batch_norm(x, gamma, beta, self.xi)?;
                if update_running {
                    let cell = match branch {
                        Branch::Weak => &self.running,
                        Branch::Strong => &self.running_hat,
                    };
                    let mut stats = cell.borrow_mut();
                    let m = self.bn_momentum;
                    for ch in 0..self.channels {
                        stats.mu[ch] = (1.0 - m) * stats.mu[ch] + m * bn.mu[ch];
                        stats.sigma[ch] = (1.0 - m) * stats.sigma[ch] + m * bn.sigma[ch];
                    }
                }
                Ok(bn.out)
            }
        }
    }
}

struct Linear {
    w: Tensor, // [in, out]
    b: Option<Tensor>,
}

impl Linear {
    fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.w)?;
        match &self.b {
            Some(b) => tape.add_bias(&y, b),
            None => Ok(y),
        }
    }
}

struct ConvLayer {
    w: Tensor, // [out_c, in_c, 3, 3]
    stride: usize,
}

enum Layers {
    Mlp { blocks: Vec<(Linear, DualBn)>, head: Linear },
    Cnn { blocks: Vec<(ConvLayer, DualBn)>, head: Linear },
}

/// The classification model: architecture, parameters and BN state.
pub struct Network {
    pub arch: Arch,
    pub k: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub xi: f64,
    pub bn_momentum: f64,
    layers: Layers,
}

fn kaiming(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| gaussian(rng) * std).collect()
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

impl Network {
    pub fn new(
        arch: Arch,
        k: usize,
        in_h: usize,
        in_w: usize,
        xi: f64,
        bn_momentum: f64,
        seed: u64,
    ) -> Result<Network> {
        if k < 2 {
            return Err(Error::Config(format!("network needs at least 2 classes, got {k}")));
        }
        let layers = match &arch {
            Arch::Mlp { widths } => {
                if widths.is_empty() {
                    return Err(Error::Config("mlp needs at least one hidden width".into()));
                }
                let mut blocks = Vec::new();
                let mut fan_in = in_h * in_w;
                for (li, &width) in widths.iter().enumerate() {
                    let mut rng = stream(seed, PURPOSE_INIT, li as u64, 0);
                    let w = Tensor::param(&[fan_in, width], kaiming(&mut rng, fan_in, fan_in * width))?;
                    blocks.push((Linear { w, b: None }, DualBn::new(width, xi, bn_momentum)));
                    fan_in = width;
                }
                let mut rng = stream(seed, PURPOSE_INIT, widths.len() as u64, 0);
                let head = Linear {
                    w: Tensor::param(&[fan_in, k], kaiming(&mut rng, fan_in, fan_in * k))?,
                    b: Some(Tensor::param(&[k], vec![0.0; k])?),
                };
                Layers::Mlp { blocks, head }
            }
            Arch::Cnn { channels } => {
                if channels.is_empty() {
                    return Err(Error::Config("cnn needs at least one channel width".into()));
                }
                let mut blocks = Vec::new();
                let mut in_c = 1;
                let (mut h, mut w) = (in_h, in_w);
                for (li, &oc) in channels.iter().enumerate() {
                    let stride = if li == 0 { 1 } else { 2 };
                    let mut rng = stream(seed, PURPOSE_INIT, li as u64, 0);
                    let fan_in = in_c * 9;
                    let kw = Tensor::param(&[oc, in_c, 3, 3], kaiming(&mut rng, fan_in, oc * fan_in))?;
                    blocks.push((ConvLayer { w: kw, stride }, DualBn::new(oc, xi, bn_momentum)));
                    in_c = oc;
                    h = (h + 2 - 3) / stride + 1;
                    w = (w + 2 - 3) / stride + 1;
                    if h == 0 || w == 0 {
                        return Err(Error::Config("cnn downsamples the input away".into()));
                    }
                }
                let mut rng = stream(seed, PURPOSE_INIT, channels.len() as u64, 0);
                let head_in = in_c * h * w;
                let head = Linear {
                    w: Tensor::param(&[head_in, k], kaiming(&mut rng, head_in, head_in * k))?,
                    b: Some(Tensor::param(&[k], vec![0.0; k])?),
                };
                Layers::Cnn { blocks, head }
            }
        };
        Ok(Network { arch, k, in_h, in_w, xi, bn_momentum, layers })
    }

    /// Pack a batch of images into an input tensor. CNNs consume NCHW with a
    /// single channel; MLPs consume flattened rows.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let n = images.len();
        let px = self.in_h * self.in_w;
        let mut data = Vec::with_capacity(n * px);
        for img in images {
            if img.height != self.in_h || img.width != self.in_w {
                return Err(Error::Shape(format!(
                    "image is {}x{}, network expects {}x{}",
                    img.height, img.width, self.in_h, self.in_w
                )));
            }
            data.extend_from_slice(&img.data);
        }
        match self.arch {
            Arch::Mlp { .. } => Tensor::new(&[n, px], data),
            Arch::Cnn { .. } => Tensor::new(&[n, 1, self.in_h, self.in_w], data),
        }
    }

    /// Forward a batch to class probabilities (softmax rows).
    pub fn forward(&self, tape: &Tape, input: &Tensor, branch: Branch, mode: Mode) -> Result<Tensor> {
        self.forward_impl(tape, input, branch, mode, mode == Mode::Train)
    }

    /// Forward with train-mode batch statistics but without touching running
    /// estimates. Used for no-gradient scoring passes.
    pub fn forward_frozen_stats(
        &self,
        tape: &Tape,
        input: &Tensor,
        branch: Branch,
    ) -> Result<Tensor> {
        self.forward_impl(tape, input, branch, Mode::Train, false)
    }

    fn forward_impl(
        &self,
        tape: &Tape,
        input: &Tensor,
        branch: Branch,
        mode: Mode,
        update_running: bool,
    ) -> Result<Tensor> {
        if mode == Mode::Eval && branch == Branch::Strong {
            return Err(Error::Usage(
                "eval forward is defined for the weak branch only".into(),
            ));
        }
        if input.shape()[0] == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let logits = match &self.layers {
            Layers::Mlp { blocks, head } => {
                let mut x = input.clone();
                for (lin, bn) in blocks {
                    x = lin.forward(tape, &x)?;
                    x = bn.forward(tape, &x, branch, mode, update_running)?;
                    x = tape.relu(&x);
                }
                head.forward(tape, &x)?
            }
            Layers::Cnn { blocks, head } => {
                let mut x = input.clone();
                for (conv, bn) in blocks {
                    x = tape.conv2d(&x, &conv.w, conv.stride, 1)?;
                    x = bn.forward(tape, &x, branch, mode, update_running)?;
                    x = tape.relu(&x);
                }
                let shape = x.shape().to_vec();
                let flat = tape.reshape(&x, &[shape[0], shape[1] * shape[2] * shape[3]])?;
                head.forward(tape, &flat)?
            }
        };
        tape.softmax(&logits)
    }

    /// Learnable parameters in a fixed, documented order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.layers {
            Layers::Mlp { blocks, head } => {
                for (i, (lin, bn)) in blocks.iter().enumerate() {
                    out.push((format!("fc{i}.w"), lin.w.clone()));
                    push_bn_params(&mut out, &format!("bn{i}"), bn);
                }
                out.push(("head.w".into(), head.w.clone()));
                out.push(("head.b".into(), head.b.as_ref().unwrap().clone()));
            }
            Layers::Cnn { blocks, head } => {
                for (i, (conv, bn)) in blocks.iter().enumerate() {
                    out.push((format!("conv{i}.w"), conv.w.clone()));
                    push_bn_params(&mut out, &format!("bn{i}"), bn);
                }
                out.push(("head.w".into(), head.w.clone()));
                out.push(("head.b".into(), head.b.as_ref().unwrap().clone()));
            }
        }
        out
    }

    pub fn bn_layers(&self) -> Vec<&DualBn> {
        match &self.layers {
            Layers::Mlp { blocks, .. } => blocks.iter().map(|(_, bn)| bn).collect(),
            Layers::Cnn { blocks, .. } => blocks.iter().map(|(_, bn)| bn).collect(),
        }
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }
}

fn push_bn_params(out: &mut Vec<(String, Tensor)>, prefix: &str, bn: &DualBn) {
    out.push((format!("{prefix}.gamma"), bn.gamma.clone()));
    out.push((format!("{prefix}.beta"), bn.beta.clone()));
    out.push((format!("{prefix}.gamma_hat"), bn.gamma_hat.clone()));
    out.push((format!("{prefix}.beta_hat"), bn.beta_hat.clone()));
}

// ---- weight serialization ------------------------------------------------------
//
// Layout (little-endian):
//   magic "NTWT", version u32 = 1
//   arch tag u8 (0 = mlp, 1 = cnn), width count u32, widths u32...
//   k u32, in_h u32, in_w u32
//   xi f64, bn_momentum f64
//   entry count u32; per entry: name_len u32, name bytes, dim count u32,
//   dims u32..., values f64...
// Entries cover learnable parameters and every branch's running statistics,
// so an exported stream reproduces eval outputs bit-exactly.

const WEIGHTS_MAGIC: &[u8; 4] = b"NTWT";
const WEIGHTS_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.off..self.off + len)
            .ok_or_else(|| Error::Load(format!("weight stream truncated at byte {}", self.off)))?;
        self.off += len;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Network {
    fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.to_vec()))
            .collect();
        for (i, bn) in self.bn_layers().iter().enumerate() {
            let weak = bn.running(Branch::Weak);
            let strong = bn.running(Branch::Strong);
            entries.push((format!("bn{i}.run_mu"), vec![bn.channels], weak.mu));
            entries.push((format!("bn{i}.run_sigma"), vec![bn.channels], weak.sigma));
            entries.push((format!("bn{i}.run_mu_hat"), vec![bn.channels], strong.mu));
            entries.push((format!("bn{i}.run_sigma_hat"), vec![bn.channels], strong.sigma));
        }
        entries
    }

    pub fn export_weights(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let (tag, widths): (u8, &[usize]) = match &self.arch {
            Arch::Mlp { widths } => (0, widths),
            Arch::Cnn { channels } => (1, channels),
        };
        buf.push(tag);
        buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for &w in widths {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for v in [self.k, self.in_h, self.in_w] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.xi.to_le_bytes());
        buf.extend_from_slice(&self.bn_momentum.to_le_bytes());
        let entries = self.state_entries();
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Rebuild a network from an exported stream.
    pub fn import_weights(bytes: &[u8]) -> Result<Network> {
        let mut cur = Cursor { buf: bytes, off: 0 };
        if cur.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::Load("bad weight magic".into()));
        }
        let version = cur.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Load(format!(
                "weight stream version {version}, this build reads {WEIGHTS_VERSION}"
            )));
        }
        let tag = cur.u8()?;
        let n_widths = cur.u32()? as usize;
        let widths: Vec<usize> =
            (0..n_widths).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let arch = match tag {
            0 => Arch::Mlp { widths },
            1 => Arch::Cnn { channels: widths },
            t => return Err(Error::Load(format!("unknown arch tag {t}"))),
        };
        let k = cur.u32()? as usize;
        let in_h = cur.u32()? as usize;
        let in_w = cur.u32()? as usize;
        let xi = cur.f64()?;
        let bn_momentum = cur.f64()?;
        let net = Network::new(arch, k, in_h, in_w, xi, bn_momentum, 0)?;
        net.load_state_from(&mut cur)?;
        if cur.off != bytes.len() {
            return Err(Error::Load(format!(
                "weight stream has {} trailing bytes",
                bytes.len() - cur.off
            )));
        }
        Ok(net)
    }

    /// Load entry values into this network, validating names and shapes.
    pub fn load_state(&self, bytes: &[u8]) -> Result<()> {
        let mut cur = Cursor { buf: bytes, off: 0 };
        if cur.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::Load("bad weight magic".into()));
        }
        let version = cur.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Load(format!(
                "weight stream version {version}, this build reads {WEIGHTS_VERSION}"
            )));
        }
        let tag = cur.u8()?;
        let n_widths = cur.u32()? as usize;
        for _ in 0..n_widths {
            cur.u32()?;
        }
        let _ = tag;
        for _ in 0..3 {
            cur.u32()?;
        }
        cur.f64()?;
        cur.f64()?;
        self.load_state_from(&mut cur)
    }

    fn load_state_from(&self, cur: &mut Cursor<'_>) -> Result<()> {
        let n_entries = cur.u32()? as usize;
        let params = self.named_params();
        let mut loaded = std::collections::BTreeMap::new();
        for _ in 0..n_entries {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Load("entry name is not utf-8".into()))?;
            let n_dims = cur.u32()? as usize;
            let shape: Vec<usize> =
                (0..n_dims).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(cur.f64()?);
            }
            loaded.insert(name, (shape, data));
        }
        for (name, tensor) in &params {
            let (shape, data) = loaded
                .remove(name)
                .ok_or_else(|| Error::Load(format!("missing entry for layer {name}")))?;
            if shape != tensor.shape() {
                return Err(Error::Load(format!(
                    "layer {name}: stream shape {:?} does not match network shape {:?}",
                    shape,
                    tensor.shape()
                )));
            }
            tensor.update_data(|d| d.copy_from_slice(&data));
        }
        for (i, bn) in self.bn_layers().iter().enumerate() {
            let mut get = |suffix: &str| -> Result<Vec<f64>> {
                let name = format!("bn{i}.{suffix}");
                let (shape, data) = loaded
                    .remove(&name)
                    .ok_or_else(|| Error::Load(format!("missing entry for layer {name}")))?;
                if shape != [bn.channels] {
                    return Err(Error::Load(format!(
                        "layer {name}: stream shape {shape:?} does not match [{}]",
                        bn.channels
                    )));
                }
                Ok(data)
            };
            let mu = get("run_mu")?;
            let sigma = get("run_sigma")?;
            let mu_hat = get("run_mu_hat")?;
            let sigma_hat = get("run_sigma_hat")?;
            bn.set_running(Branch::Weak, RunningStats { mu, sigma });
            bn.set_running(Branch::Strong, RunningStats { mu: mu_hat, sigma: sigma_hat });
        }
        if let Some(name) = loaded.keys().next() {
            return Err(Error::Load(format!("unexpected extra entry {name}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Image> {
        use rand::Rng;
        let mut rng = stream(seed, 90, 0, 0);
        (0..n)
            .map(|_| Image::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect()
    }

    fn refs(v: &[Image]) -> Vec<&Image> {
        v.iter().collect()
    }

    fn bit_pattern(stats: &RunningStats) -> Vec<u64> {
        stats.mu.iter().chain(&stats.sigma).map(|v| v.to_bits()).collect()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let net = Network::new(Arch::Cnn { channels: vec![4, 8] }, 10, 12, 12, 1e-5, 0.1, 3).unwrap();
        let imgs = images(5, 12, 12, 1);
        let x = net.batch_tensor(&refs(&imgs)).unwrap();
        let tape = Tape::no_grad();
        let p = net.forward(&tape, &x, Branch::Weak, Mode::Train).unwrap();
        for row in p.to_vec().chunks(10) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_on_strong_branch_rejected() {
        let net = Network::new(Arch::Mlp { widths: vec![16] }, 3, 4, 4, 1e-5, 0.1, 3).unwrap();
        let imgs = images(2, 4, 4, 2);
        let x = net.batch_tensor(&refs(&imgs)).unwrap();
        let tape = Tape::no_grad();
        match net.forward(&tape, &x, Branch::Strong, Mode::Eval) {
            Err(Error::Usage(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn weak_traffic_leaves_strong_stats_bit_unchanged() {
        let net = Network::new(Arch::Cnn { channels: vec![4] }, 5, 8, 8, 1e-5, 0.1, 7).unwrap();
        let before: Vec<Vec<u64>> =
            net.bn_layers().iter().map(|bn| bit_pattern(&bn.running(Branch::Strong))).collect();
        let imgs = images(6, 8, 8, 3);
        let x = net.batch_tensor(&refs(&imgs)).unwrap();
        for _ in 0..4 {
            let tape = Tape::no_grad();
            net.forward(&tape, &x, Branch::Weak, Mode::Train).unwrap();
        }
        let after: Vec<Vec<u64>> =
            net.bn_layers().iter().map(|bn| bit_pattern(&bn.running(Branch::Strong))).collect();
        assert_eq!(before, after);
        // and the weak stats did move
        let weak_moved = net
            .bn_layers()
            .iter()
            .any(|bn| bit_pattern(&bn.running(Branch::Weak)) != bit_pattern(&RunningStats::init(bn.channels)));
        assert!(weak_moved);
    }

    #[test]
    fn eval_invariant_to_strong_state_perturbation() {
        let net = Network::new(Arch::Cnn { channels: vec![4] }, 5, 8, 8, 1e-5, 0.1, 7).unwrap();
        let imgs = images(6, 8, 8, 3);
        let x = net.batch_tensor(&refs(&imgs)).unwrap();
        // drive both branches a little
        for _ in 0..3 {
            let tape = Tape::no_grad();
            net.forward(&tape, &x, Branch::Weak, Mode::Train).unwrap();
            net.forward(&tape, &x, Branch::Strong, Mode::Train).unwrap();
        }
        let tape = Tape::no_grad();
        let before = net.forward(&tape, &x, Branch::Weak, Mode::Eval).unwrap().to_vec();
        // trash the strong branch
        for bn in net.bn_layers() {
            bn.set_running(
                Branch::Strong,
                RunningStats { mu: vec![123.456; bn.channels], sigma: vec![9.87; bn.channels] },
            );
            bn.gamma_hat.update_data(|d| d.iter_mut().for_each(|v| *v = -3.0));
            bn.beta_hat.update_data(|d| d.iter_mut().for_each(|v| *v = 11.0));
        }
        let tape = Tape::no_grad();
        let after = net.forward(&tape, &x, Branch::Weak, Mode::Eval).unwrap().to_vec();
        let same = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "eval output changed after perturbing strong-branch state");
    }

    #[test]
    fn branch_gradients_are_isolated() {
        let net = Network::new(Arch::Mlp { widths: vec![8] }, 4, 4, 4, 1e-5, 0.1, 11).unwrap();
        let imgs = images(5, 4, 4, 5);
        let x = net.batch_tensor(&refs(&imgs)).unwrap();
        let tape = Tape::new();
        let p = net.forward(&tape, &x, Branch::Strong, Mode::Train).unwrap();
        let loss = tape.mean(&p);
        tape.backward(&loss).unwrap();
        let bn = &net.bn_layers()[0];
        assert!(bn.gamma.grad().is_none(), "weak gamma must not receive strong-branch gradient");
        assert!(bn.beta.grad().is_none());
        assert!(bn.gamma_hat.grad().is_some());
        assert!(bn.beta_hat.grad().is_some());
    }

    #[test]
    fn export_import_roundtrip_preserves_eval() {
        let net = Network::new(Arch::Cnn { channels: vec![4, 8] }, 10, 12, 12, 1e-5, 0.1, 13).unwrap();
        let imgs = images(4, 12, 12, 9);
        let x = net.batch_tensor(&refs(&imgs)).unwrap();
        // move stats off the initial values
        for _ in 0..2 {
            let tape = Tape::no_grad();
            net.forward(&tape, &x, Branch::Weak, Mode::Train).unwrap();
        }
        let bytes = net.export_weights();
        let restored = Network::import_weights(&bytes).unwrap();
        let tape = Tape::no_grad();
        let a = net.forward(&tape, &x, Branch::Weak, Mode::Eval).unwrap().to_vec();
        let b = restored.forward(&tape, &x, Branch::Weak, Mode::Eval).unwrap().to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        // and the export re-serializes identically
        assert_eq!(bytes, restored.export_weights());
    }

    #[test]
    fn truncated_stream_rejected() {
        let net = Network::new(Arch::Mlp { widths: vec![8] }, 4, 4, 4, 1e-5, 0.1, 11).unwrap();
        let bytes = net.export_weights();
        match Network::import_weights(&bytes[..bytes.len() - 5]) {
            Err(Error::Load(_)) => {}
            Err(other) => panic!("expected load error, got {other:?}"),
            Ok(_) => panic!("expected load error, got a network"),
        }
    }

    #[test]
    fn cross_arch_load_names_layer() {
        let mlp = Network::new(Arch::Mlp { widths: vec![8] }, 4, 4, 4, 1e-5, 0.1, 11).unwrap();
        let cnn = Network::new(Arch::Cnn { channels: vec![8] }, 4, 4, 4, 1e-5, 0.1, 11).unwrap();
        let bytes = mlp.export_weights();
        match cnn.load_state(&bytes) {
            Err(Error::Load(msg)) => {
                assert!(msg.contains("conv0.w") || msg.contains("fc0.w"), "{msg}")
            }
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn constant_batch_bn_outputs_beta_through_network_layer() {
        let bn = DualBn::new(3, 1e-5, 0.1);
        bn.beta.update_data(|d| d.copy_from_slice(&[0.5, -0.25, 0.0]));
        let tape = Tape::no_grad();
        let x = Tensor::new(&[4, 3], vec![7.0, -2.0, 0.3].repeat(4)).unwrap();
        let y = bn.forward(&tape, &x, Branch::Weak, Mode::Train, false).unwrap();
        for row in y.to_vec().chunks(3) {
            assert!((row[0] - 0.5).abs() < 1e-12);
            assert!((row[1] + 0.25).abs() < 1e-12);
            assert!(row[2].abs() < 1e-12);
        }
    }
}

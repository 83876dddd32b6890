//! Two-stage training: warm-up on prior-penalized cross entropy, then
//! selection-driven training on the combined objective, with SGD momentum,
//! per-stage cosine annealing and online prior estimation.
//!
//! Every random decision derives from `(seed, purpose, epoch, sample id)`
//! streams, so a `(config, seed)` pair fully determines parameters, metrics
//! and selection outcomes, and checkpoints resume exactly. The update path
//! works through [`TrainView`], which exposes given labels only; true labels
//! and the noise mask are read exclusively by the metrics side.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment, AugmentConfig};
use crate::criteria::{self, matching_loss_value, LossWeights, TotalLossParts, YPrimeMode};
use crate::data::{DatasetBundle, Image, TrainView};
use crate::error::{Error, Result};
use crate::eval::{self, LossHistogram, MetricsRecord, SelectionQuality, SeparationReport, Summary};
use crate::model::{Arch, Branch, Mode, Network};
use crate::selection;
use crate::stream::{stream, PURPOSE_AUG_STRONG, PURPOSE_AUG_WEAK, PURPOSE_SHUFFLE};
use crate::tensor::{Tape, Tensor};

/// Epoch tag for the scoring passes, outside the range of training epochs.
const SCORING_EPOCH_TAG: u64 = u64::MAX - 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodFlags {
    /// Cross-augmentation matching selection and the clean-set objective.
    pub caug_matching: bool,
    /// Leave-noise-out regularization on the confident-noisy set.
    pub lnor: bool,
    /// Online prior penalization.
    pub opp: bool,
}

impl MethodFlags {
    pub fn full() -> Self {
        MethodFlags { caug_matching: true, lnor: true, opp: true }
    }

    /// Plain cross-entropy baseline.
    pub fn ce() -> Self {
        MethodFlags { caug_matching: false, lnor: false, opp: false }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "ce" => Ok(Self::ce()),
            "cam" => Ok(MethodFlags { caug_matching: true, lnor: false, opp: false }),
            "cam-lnor" => Ok(MethodFlags { caug_matching: true, lnor: true, opp: false }),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown method preset '{other}' (expected ce|cam|cam-lnor|full)"
            ))),
        }
    }

    pub fn preset_name(&self) -> String {
        match (self.caug_matching, self.lnor, self.opp) {
            (false, false, false) => "ce".into(),
            (true, false, false) => "cam".into(),
            (true, true, false) => "cam-lnor".into(),
            (true, true, true) => "full".into(),
            _ => format!("caug={},lnor={},opp={}", self.caug_matching, self.lnor, self.opp),
        }
    }
}

/// Online prior distributions for the weak and strong views.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorState {
    pub q: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum PriorKind {
    Weak,
    Strong,
}

impl PriorState {
    /// Initialize both priors from label counts: `q[k] = N_k / N`.
    pub fn from_counts(counts: &[usize], tau: f64) -> PriorState {
        let total: usize = counts.iter().sum();
        let q: Vec<f64> = counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
        PriorState { q_hat: q.clone(), q, tau }
    }

    /// EMA step toward the mean prediction: `q <- (1-tau) q + tau mean`.
    pub fn update(&mut self, which: PriorKind, mean_pred: &[f64]) {
        let target = match which {
            PriorKind::Weak => &mut self.q,
            PriorKind::Strong => &mut self.q_hat,
        };
        for (qk, &mk) in target.iter_mut().zip(mean_pred) {
            *qk = (1.0 - self.tau) * *qk + self.tau * mk;
        }
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        let ok =
            |v: &[f64]| v.iter().all(|&x| x >= -tol) && (v.iter().sum::<f64>() - 1.0).abs() <= tol;
        ok(&self.q) && ok(&self.q_hat)
    }
}

/// Cosine-annealed learning rate over one stage.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// SGD with classical momentum: `v <- m v + g; p <- p - lr v`.
pub struct SgdMomentum {
    pub momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &[(String, Tensor)], momentum: f64) -> SgdMomentum {
        SgdMomentum {
            momentum,
            velocities: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    /// Apply one update. Parameters without a gradient keep a decaying velocity.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) {
        for ((_, p), v) in params.iter().zip(self.velocities.iter_mut()) {
            let grad = p.grad();
            p.update_data(|data| {
                for i in 0..data.len() {
                    let gi = grad.as_ref().map_or(0.0, |g| g[i]);
                    v[i] = self.momentum * v[i] + gi;
                    data[i] -= lr * v[i];
                }
            });
        }
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    pub fn set_velocities(&mut self, v: Vec<Vec<f64>>) {
        self.velocities = v;
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_warmup: usize,
    pub epochs_main: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub tau: f64,
    pub bn_momentum: f64,
    pub xi: f64,
    pub otsu_bins: usize,
    pub seed: u64,
    pub arch: Arch,
    pub method: MethodFlags,
    pub y_prime_mode: YPrimeMode,
    /// When set, the clean-set and noisy-set terms are averaged over their own
    /// cardinality instead of the batch-sum-over-batch-size normalization.
    pub clean_loss_mean: bool,
    pub aug: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_warmup: 10,
            epochs_main: 10,
            batch_size: 128,
            lr0: 0.05,
            momentum: 0.9,
            weights: LossWeights::default(),
            tau: 0.5,
            bn_momentum: 0.1,
            xi: 1e-5,
            otsu_bins: selection::DEFAULT_OTSU_BINS,
            seed: 1,
            arch: Arch::Cnn { channels: vec![16, 32] },
            method: MethodFlags::full(),
            y_prime_mode: YPrimeMode::ArgMax,
            clean_loss_mean: false,
            aug: AugmentConfig::mnist(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must be in (0, 1]".into()));
        }
        self.weights.validate()?;
        if self.method.lnor && !self.method.caug_matching {
            return Err(Error::Config(
                "lnor requires caug_matching (no confident-noisy set without selection)".into(),
            ));
        }
        if self.otsu_bins < 2 {
            return Err(Error::Config("otsu_bins must be >= 2".into()));
        }
        Ok(())
    }

    fn lambda_eff(&self) -> f64 {
        if self.method.opp {
            self.weights.lambda
        } else {
            0.0
        }
    }
}

/// Everything a finished (or checkpointed) run reports besides the model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub warmup_separation: Option<SeparationReport>,
    pub final_separation: Option<SeparationReport>,
    pub final_selection_quality: Option<SelectionQuality>,
    pub skipped_batches: u64,
    pub histograms: Vec<(String, LossHistogram)>,
}

impl TrainOutcome {
    fn has_histogram(&self, name: &str) -> bool {
        self.histograms.iter().any(|(n, _)| n == name)
    }
}

struct MainEpochStats {
    clean_positions: Vec<usize>,
    /// (dataset position, matching loss, plain ce loss) from the selection pass.
    sel_losses: Vec<(usize, f64, f64)>,
    epsilons: Vec<f64>,
    clean_sizes: Vec<usize>,
    noisy_sizes: Vec<usize>,
    skipped: u64,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn column_mean(data: &[f64], rows: &[usize], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for &r in rows {
        for (o, &v) in out.iter_mut().zip(&data[r * k..(r + 1) * k]) {
            *o += v;
        }
    }
    let n = rows.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Run the configured training on a train/test bundle pair. When `run_dir` is
/// set, a checkpoint and the metric artifacts land there after every epoch and
/// an interrupted run resumes from the stored checkpoint.
pub fn train(
    cfg: &TrainConfig,
    train_data: &DatasetBundle,
    test_data: &DatasetBundle,
    run_dir: Option<&Path>,
    config_hash: &str,
) -> Result<(Network, TrainOutcome)> {
    train_with_limit(cfg, train_data, test_data, run_dir, config_hash, None)
}

/// [`train`] with an epoch ceiling, to exercise interruption and resume:
/// the run stops (checkpointed) once `stop_after_epochs` have completed.
pub fn train_with_limit(
    cfg: &TrainConfig,
    train_data: &DatasetBundle,
    test_data: &DatasetBundle,
    run_dir: Option<&Path>,
    config_hash: &str,
    stop_after_epochs: Option<usize>,
) -> Result<(Network, TrainOutcome)> {
    cfg.validate()?;
    let view = train_data.train_view();
    if view.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let k = view.k;
    let sample0 = view.image(0);
    let (in_h, in_w) = (sample0.height, sample0.width);

    let net = Network::new(cfg.arch.clone(), k, in_h, in_w, cfg.xi, cfg.bn_momentum, cfg.seed)?;
    let params = net.named_params();
    let mut opt = SgdMomentum::new(&params, cfg.momentum);
    let mut prior = PriorState::from_counts(&view.given_label_counts(), cfg.tau);
    let mut outcome = TrainOutcome::default();
    let mut completed_epochs = 0usize;

    // Resume if the run directory already holds a checkpoint.
    if let Some(dir) = run_dir {
        let ck = dir.join("checkpoint.bin");
        if ck.exists() {
            let state = load_checkpoint(&ck)?;
            if state.config_hash != config_hash {
                return Err(Error::Load(format!(
                    "checkpoint config hash {} does not match current config {config_hash}",
                    state.config_hash
                )));
            }
            net.load_state(&state.weights)?;
            opt.set_velocities(state.velocities);
            prior = state.prior;
            completed_epochs = state.completed_epochs;
            outcome = state.outcome;
        }
    }

    let total_epochs = cfg.epochs_warmup + cfg.epochs_main;
    let epoch_ceiling = stop_after_epochs.unwrap_or(total_epochs).min(total_epochs);

    while completed_epochs < epoch_ceiling {
        let epoch = completed_epochs + 1;
        let stage: u8 = if epoch <= cfg.epochs_warmup { 1 } else { 2 };

        // The warm-up separation scoring runs once, right after warm-up
        // finishes (immediately, when there is no warm-up stage).
        if stage == 2 && !outcome.has_histogram("warmup_matching") {
            let (rep, hists) = score_separation(&net, cfg, train_data, "warmup")?;
            outcome.warmup_separation = rep;
            outcome.histograms.extend(hists);
        }

        let t0 = Instant::now();
        let (lr_first, stats) = if stage == 1 {
            (run_warmup_epoch(&net, cfg, &view, &mut opt, &mut prior, epoch)?, None)
        } else {
            let (lr, s) = run_main_epoch(&net, cfg, &view, &mut opt, &mut prior, epoch)?;
            (lr, s)
        };
        if let Some(s) = &stats {
            outcome.skipped_batches += s.skipped;
            let mask = train_data.noise_mask();
            outcome.final_selection_quality =
                Some(eval::selection_quality(&s.clean_positions, &mask));
        }
        let record = build_record(
            &net,
            cfg,
            train_data,
            test_data,
            epoch,
            stage,
            lr_first,
            stats.as_ref(),
            outcome.skipped_batches,
            t0,
        )?;
        outcome.records.push(record);
        completed_epochs = epoch;

        if let Some(dir) = run_dir {
            save_run_state(dir, &net, &opt, &prior, completed_epochs, &outcome, cfg, config_hash, test_data)?;
        }
    }

    // Closing scoring passes only once the run is actually complete.
    if completed_epochs == total_epochs {
        if !outcome.has_histogram("warmup_matching") {
            // A run with epochs_main = 0 never crossed the stage boundary.
            let (rep, hists) = score_separation(&net, cfg, train_data, "warmup")?;
            outcome.warmup_separation = rep;
            outcome.histograms.extend(hists);
        }
        if !outcome.has_histogram("final_matching") {
            let (rep, hists) = score_separation(&net, cfg, train_data, "final")?;
            outcome.final_separation = rep;
            outcome.histograms.extend(hists);
        }
        if let Some(dir) = run_dir {
            save_run_state(dir, &net, &opt, &prior, completed_epochs, &outcome, cfg, config_hash, test_data)?;
        }
    }
    Ok((net, outcome))
}

fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, PURPOSE_SHUFFLE, epoch as u64, 0);
    order.shuffle(&mut rng);
    order
}

fn weak_views(view: &TrainView<'_>, batch: &[usize], cfg: &TrainConfig, epoch: u64) -> Vec<Image> {
    batch
        .iter()
        .map(|&i| {
            let mut rng = stream(cfg.seed, PURPOSE_AUG_WEAK, epoch, view.sample_id(i));
            weak_augment(view.image(i), &cfg.aug, &mut rng)
        })
        .collect()
}

fn strong_views(view: &TrainView<'_>, batch: &[usize], cfg: &TrainConfig, epoch: u64) -> Vec<Image> {
    batch
        .iter()
        .map(|&i| {
            let mut rng = stream(cfg.seed, PURPOSE_AUG_STRONG, epoch, view.sample_id(i));
            strong_augment(view.image(i), &cfg.aug, &mut rng)
        })
        .collect()
}

fn check_finite(loss: f64, lr: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr:.6}"
        )))
    }
}

/// One epoch of the warm-up objective (also the stage-2 baseline when
/// selection is disabled). Returns the learning rate of its first batch.
#[allow(clippy::too_many_arguments)]
fn run_plain_epoch(
    net: &Network,
    cfg: &TrainConfig,
    view: &TrainView<'_>,
    opt: &mut SgdMomentum,
    prior: &mut PriorState,
    epoch: usize,
    epoch_in_stage: usize,
    stage_epochs: usize,
) -> Result<f64> {
    let params = net.named_params();
    let order = shuffled_order(view.len(), cfg.seed, epoch);
    let bpe = view.len().div_ceil(cfg.batch_size);
    let total_steps = stage_epochs * bpe;
    let mut lr_first = None;
    for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
        let weak = weak_views(view, batch, cfg, epoch as u64);
        let refs: Vec<&Image> = weak.iter().collect();
        let x = net.batch_tensor(&refs)?;
        let labels: Vec<usize> = batch.iter().map(|&i| view.given_label(i)).collect();

        let tape = Tape::new();
        net.zero_grads();
        let p = net.forward(&tape, &x, Branch::Weak, Mode::Train)?;
        let loss = criteria::penalized_ce_mean(&tape, &p, &labels, &prior.q, cfg.lambda_eff())?;
        let step = (epoch_in_stage - 1) * bpe + bi;
        let lr = cosine_lr(step, total_steps, cfg.lr0);
        lr_first.get_or_insert(lr);
        check_finite(loss.item(), lr, epoch, bi)?;
        tape.backward(&loss)?;
        opt.step(&params, lr);

        let all_rows: Vec<usize> = (0..batch.len()).collect();
        let mean_pred = column_mean(&p.data(), &all_rows, net.k);
        prior.update(PriorKind::Weak, &mean_pred);
    }
    Ok(lr_first.unwrap_or(cfg.lr0))
}

fn run_warmup_epoch(
    net: &Network,
    cfg: &TrainConfig,
    view: &TrainView<'_>,
    opt: &mut SgdMomentum,
    prior: &mut PriorState,
    epoch: usize,
) -> Result<f64> {
    run_plain_epoch(net, cfg, view, opt, prior, epoch, epoch, cfg.epochs_warmup)
}

/// One selection-driven epoch; returns the first learning rate and, when the
/// method performs selection, the per-epoch selection statistics.
fn run_main_epoch(
    net: &Network,
    cfg: &TrainConfig,
    view: &TrainView<'_>,
    opt: &mut SgdMomentum,
    prior: &mut PriorState,
    epoch: usize,
) -> Result<(f64, Option<MainEpochStats>)> {
    let epoch_in_stage = epoch - cfg.epochs_warmup;
    if !cfg.method.caug_matching {
        let lr = run_plain_epoch(net, cfg, view, opt, prior, epoch, epoch_in_stage, cfg.epochs_main)?;
        return Ok((lr, None));
    }

    let params = net.named_params();
    let order = shuffled_order(view.len(), cfg.seed, epoch);
    let bpe = view.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs_main * bpe;
    let mut lr_first = None;

    let mut stats = MainEpochStats {
        clean_positions: Vec::new(),
        sel_losses: Vec::new(),
        epsilons: Vec::new(),
        clean_sizes: Vec::new(),
        noisy_sizes: Vec::new(),
        skipped: 0,
    };

    for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
        let weak = weak_views(view, batch, cfg, epoch as u64);
        let strong = strong_views(view, batch, cfg, epoch as u64);
        let weak_refs: Vec<&Image> = weak.iter().collect();
        let strong_refs: Vec<&Image> = strong.iter().collect();
        let xw = net.batch_tensor(&weak_refs)?;
        let xs = net.batch_tensor(&strong_refs)?;
        let labels: Vec<usize> = batch.iter().map(|&i| view.given_label(i)).collect();

        // Selection pass: no gradients, batch statistics, no EMA side effects.
        let (losses, ce_losses, y_prime) = {
            let tape0 = Tape::no_grad();
            let pw0 = net.forward_frozen_stats(&tape0, &xw, Branch::Weak)?;
            let ps0 = net.forward_frozen_stats(&tape0, &xs, Branch::Strong)?;
            let pw_data = pw0.data();
            let ps_data = ps0.data();
            let mut losses = Vec::with_capacity(batch.len());
            let mut ce_losses = Vec::with_capacity(batch.len());
            let mut y_prime = Vec::with_capacity(batch.len());
            for r in 0..batch.len() {
                let pw_row = &pw_data[r * net.k..(r + 1) * net.k];
                let ps_row = &ps_data[r * net.k..(r + 1) * net.k];
                losses.push(matching_loss_value(
                    pw_row,
                    ps_row,
                    labels[r],
                    cfg.weights.alpha,
                    cfg.y_prime_mode,
                ));
                ce_losses.push(criteria::cross_entropy_value(pw_row, labels[r]));
                y_prime.push(criteria::y_prime(pw_row, cfg.y_prime_mode));
            }
            (losses, ce_losses, y_prime)
        };

        let sel = selection::select(&losses, cfg.weights.kappa, cfg.otsu_bins)?;
        stats.epsilons.push(sel.threshold_epsilon);
        stats.clean_sizes.push(sel.clean_ids.len());
        stats.noisy_sizes.push(sel.noisy_ids.len());
        stats.clean_positions.extend(sel.clean_ids.iter().map(|&r| batch[r]));
        stats
            .sel_losses
            .extend((0..batch.len()).map(|r| (batch[r], losses[r], ce_losses[r])));

        let step = (epoch_in_stage - 1) * bpe + bi;
        let lr = cosine_lr(step, total_steps, cfg.lr0);
        lr_first.get_or_insert(lr);

        if sel.clean_ids.is_empty() {
            // The clean-set objective is undefined on an empty set.
            stats.skipped += 1;
            continue;
        }

        // Training pass with gradients; running statistics update here.
        let tape = Tape::new();
        net.zero_grads();
        let pw = net.forward(&tape, &xw, Branch::Weak, Mode::Train)?;
        let ps = net.forward(&tape, &xs, Branch::Strong, Mode::Train)?;
        let noisy_rows: &[usize] = if cfg.method.lnor { &sel.noisy_ids } else { &[] };
        let parts = TotalLossParts {
            p_weak: &pw,
            p_strong: &ps,
            labels: &labels,
            y_prime: &y_prime,
            clean_rows: &sel.clean_ids,
            noisy_rows,
            q: &prior.q,
            q_hat: &prior.q_hat,
        };
        let weights_eff = LossWeights { lambda: cfg.lambda_eff(), ..cfg.weights };
        let loss = if cfg.clean_loss_mean {
            total_loss_mean_normalized(&tape, &parts, &weights_eff, cfg.method.lnor)?
        } else {
            let sum = criteria::total_loss(&tape, &parts, &weights_eff, cfg.method.lnor)?;
            tape.affine(&sum, 1.0 / batch.len() as f64, 0.0)
        };
        check_finite(loss.item(), lr, epoch, bi)?;
        tape.backward(&loss)?;
        opt.step(&params, lr);

        // prior updates from the clean set of this batch
        let mean_w = column_mean(&pw.data(), &sel.clean_ids, net.k);
        let mean_s = column_mean(&ps.data(), &sel.clean_ids, net.k);
        prior.update(PriorKind::Weak, &mean_w);
        prior.update(PriorKind::Strong, &mean_s);
    }
    Ok((lr_first.unwrap_or(cfg.lr0), Some(stats)))
}

/// Mean-normalized variant: each term averaged over its own set.
fn total_loss_mean_normalized(
    tape: &Tape,
    parts: &TotalLossParts<'_>,
    weights: &LossWeights,
    use_lnor: bool,
) -> Result<Tensor> {
    let clean_y: Vec<usize> = parts.clean_rows.iter().map(|&r| parts.labels[r]).collect();
    let clean_yp: Vec<usize> = parts.clean_rows.iter().map(|&r| parts.y_prime[r]).collect();
    let nc = parts.clean_rows.len().max(1) as f64;
    let lc = criteria::clean_loss_sum(
        tape,
        parts.p_weak,
        parts.p_strong,
        parts.clean_rows,
        &clean_y,
        &clean_yp,
        weights.alpha,
    )?;
    let mut loss = tape.affine(&lc, 1.0 / nc, 0.0);
    if use_lnor && !parts.noisy_rows.is_empty() {
        let noisy_y: Vec<usize> = parts.noisy_rows.iter().map(|&r| parts.labels[r]).collect();
        let ln = criteria::lnor_sum(tape, parts.p_weak, parts.noisy_rows, &noisy_y)?;
        loss = tape.add(&loss, &tape.affine(&ln, 1.0 / parts.noisy_rows.len() as f64, 0.0))?;
    }
    if weights.lambda > 0.0 && !parts.clean_rows.is_empty() {
        let vw = criteria::prior_penalty_sum(tape, parts.p_weak, parts.clean_rows, parts.q)?;
        let vs = criteria::prior_penalty_sum(tape, parts.p_strong, parts.clean_rows, parts.q_hat)?;
        let pen = tape.add(&vw, &vs)?;
        loss = tape.add(&loss, &tape.affine(&pen, weights.lambda / nc, 0.0))?;
    }
    Ok(loss)
}

#[allow(clippy::too_many_arguments)]
fn build_record(
    net: &Network,
    cfg: &TrainConfig,
    train_data: &DatasetBundle,
    test_data: &DatasetBundle,
    epoch: usize,
    stage: u8,
    lr: f64,
    stats: Option<&MainEpochStats>,
    skipped_total: u64,
    t0: Instant,
) -> Result<MetricsRecord> {
    let per_class = eval::classwise_accuracy(net, test_data, cfg.batch_size)?;
    let test_accuracy = per_class
        .iter()
        .enumerate()
        .map(|(c, a)| a * test_data.class_counts[c] as f64)
        .sum::<f64>()
        / test_data.len() as f64;

    let mut rec = MetricsRecord {
        epoch,
        stage,
        lr,
        test_accuracy,
        per_class_accuracy: per_class,
        clean_precision: None,
        clean_recall: None,
        auroc_matching: None,
        auroc_ce: None,
        mean_clean: None,
        mean_noisy: None,
        epsilon_mean: None,
        skipped_batches: skipped_total,
        wall_time_s: 0.0,
    };
    if let Some(s) = stats {
        rec.mean_clean = mean(&s.clean_sizes.iter().map(|&v| v as f64).collect::<Vec<_>>());
        rec.mean_noisy = mean(&s.noisy_sizes.iter().map(|&v| v as f64).collect::<Vec<_>>());
        rec.epsilon_mean = mean(&s.epsilons);
        let mask = train_data.noise_mask();
        let q = eval::selection_quality(&s.clean_positions, &mask);
        rec.clean_precision = Some(q.precision);
        rec.clean_recall = Some(q.recall);
        // AUROC over this epoch's selection-time losses (each sample scored
        // once per epoch, at the parameters of its batch's step).
        if mask.iter().any(|&m| m) && mask.iter().any(|&m| !m) {
            let mut m_scores = vec![0.0; mask.len()];
            let mut c_scores = vec![0.0; mask.len()];
            for &(pos, ml, cl) in &s.sel_losses {
                m_scores[pos] = ml;
                c_scores[pos] = cl;
            }
            rec.auroc_matching = Some(eval::auroc(&m_scores, &mask)?);
            rec.auroc_ce = Some(eval::auroc(&c_scores, &mask)?);
        }
    }
    rec.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(rec)
}

/// Score every training sample with the matching loss and the plain
/// cross-entropy loss at the current parameters (no gradients, frozen
/// statistics), then summarize noisy-vs-clean separation.
fn score_separation(
    net: &Network,
    cfg: &TrainConfig,
    train_data: &DatasetBundle,
    tag: &str,
) -> Result<(Option<SeparationReport>, Vec<(String, LossHistogram)>)> {
    let view = train_data.train_view();
    let n = view.len();
    let mut matching = vec![0.0; n];
    let mut ce = vec![0.0; n];
    let positions: Vec<usize> = (0..n).collect();
    for batch in positions.chunks(cfg.batch_size) {
        let weak = {
            let mut v = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = stream(cfg.seed, PURPOSE_AUG_WEAK, SCORING_EPOCH_TAG, view.sample_id(i));
                v.push(weak_augment(view.image(i), &cfg.aug, &mut rng));
            }
            v
        };
        let strong = {
            let mut v = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng =
                    stream(cfg.seed, PURPOSE_AUG_STRONG, SCORING_EPOCH_TAG, view.sample_id(i));
                v.push(strong_augment(view.image(i), &cfg.aug, &mut rng));
            }
            v
        };
        let weak_refs: Vec<&Image> = weak.iter().collect();
        let strong_refs: Vec<&Image> = strong.iter().collect();
        let xw = net.batch_tensor(&weak_refs)?;
        let xs = net.batch_tensor(&strong_refs)?;
        let tape = Tape::no_grad();
        let pw = net.forward_frozen_stats(&tape, &xw, Branch::Weak)?;
        let ps = net.forward_frozen_stats(&tape, &xs, Branch::Strong)?;
        let pw_data = pw.data();
        let ps_data = ps.data();
        for (r, &pos) in batch.iter().enumerate() {
            let pw_row = &pw_data[r * net.k..(r + 1) * net.k];
            let ps_row = &ps_data[r * net.k..(r + 1) * net.k];
            let y = view.given_label(pos);
            matching[pos] =
                matching_loss_value(pw_row, ps_row, y, cfg.weights.alpha, cfg.y_prime_mode);
            ce[pos] = criteria::cross_entropy_value(pw_row, y);
        }
    }

    let mask = train_data.noise_mask();
    let true_labels: Vec<usize> = train_data.samples.iter().map(|s| s.true_label).collect();
    let hist_m =
        eval::loss_histogram(&matching, &mask, &true_labels, &train_data.class_counts, 50)?;
    let hist_c = eval::loss_histogram(&ce, &mask, &true_labels, &train_data.class_counts, 50)?;
    let histograms = vec![
        (format!("{tag}_matching"), hist_m.clone()),
        (format!("{tag}_ce"), hist_c.clone()),
    ];
    let has_both = mask.iter().any(|&m| m) && mask.iter().any(|&m| !m);
    let report = if has_both {
        Some(SeparationReport {
            auroc_matching: eval::auroc(&matching, &mask)?,
            auroc_ce: eval::auroc(&ce, &mask)?,
            overlap_matching: eval::overlap_coefficient(&hist_m.noisy, &hist_m.clean_tail),
            overlap_ce: eval::overlap_coefficient(&hist_c.noisy, &hist_c.clean_tail),
        })
    } else {
        None
    };
    Ok((report, histograms))
}

// ---- checkpointing -------------------------------------------------------------
//
// Layout (little-endian): magic "NTCK", version u32, then length-prefixed
// sections: config hash (utf-8), completed epoch count u64, prior (JSON),
// velocities (count, then len + f64 data each), network weights (the weight
// stream), and the outcome (JSON).

const CHECKPOINT_MAGIC: &[u8; 4] = b"NTCK";
const CHECKPOINT_VERSION: u32 = 1;

pub struct CheckpointState {
    pub config_hash: String,
    pub completed_epochs: usize,
    pub prior: PriorState,
    pub velocities: Vec<Vec<f64>>,
    pub weights: Vec<u8>,
    pub outcome: TrainOutcome,
}

fn push_blob(buf: &mut Vec<u8>, blob: &[u8]) {
    buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    buf.extend_from_slice(blob);
}

pub fn save_checkpoint(path: &Path, state: &CheckpointState) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_blob(&mut buf, state.config_hash.as_bytes());
    buf.extend_from_slice(&(state.completed_epochs as u64).to_le_bytes());
    let prior_json = serde_json::to_vec(&state.prior)
        .map_err(|e| Error::Parse(format!("prior serialization: {e}")))?;
    push_blob(&mut buf, &prior_json);
    buf.extend_from_slice(&(state.velocities.len() as u64).to_le_bytes());
    for v in &state.velocities {
        buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        for &x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    push_blob(&mut buf, &state.weights);
    let outcome_json = serde_json::to_vec(&state.outcome)
        .map_err(|e| Error::Parse(format!("outcome serialization: {e}")))?;
    push_blob(&mut buf, &outcome_json);

    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, len: usize| -> Result<&[u8]> {
        let s = buf
            .get(*off..*off + len)
            .ok_or_else(|| Error::Load(format!("checkpoint truncated at byte {}", *off)))?;
        *off += len;
        Ok(s)
    };
    if take(&mut off, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Load("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let blob = |off: &mut usize| -> Result<Vec<u8>> {
        let len = u64::from_le_bytes(take(off, 8)?.try_into().unwrap()) as usize;
        Ok(take(off, len)?.to_vec())
    };
    let config_hash = String::from_utf8(blob(&mut off)?)
        .map_err(|_| Error::Load("checkpoint config hash is not utf-8".into()))?;
    let completed_epochs = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let prior: PriorState = serde_json::from_slice(&blob(&mut off)?)
        .map_err(|e| Error::Load(format!("checkpoint prior: {e}")))?;
    let n_vel = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let mut velocities = Vec::with_capacity(n_vel);
    for _ in 0..n_vel {
        let len = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut off, len * 8)?;
        velocities.push(
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        );
    }
    let weights = blob(&mut off)?;
    let outcome: TrainOutcome = serde_json::from_slice(&blob(&mut off)?)
        .map_err(|e| Error::Load(format!("checkpoint outcome: {e}")))?;
    Ok(CheckpointState { config_hash, completed_epochs, prior, velocities, weights, outcome })
}

#[allow(clippy::too_many_arguments)]
fn save_run_state(
    dir: &Path,
    net: &Network,
    opt: &SgdMomentum,
    prior: &PriorState,
    completed_epochs: usize,
    outcome: &TrainOutcome,
    cfg: &TrainConfig,
    config_hash: &str,
    test_data: &DatasetBundle,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = CheckpointState {
        config_hash: config_hash.to_string(),
        completed_epochs,
        prior: prior.clone(),
        velocities: opt.velocities().to_vec(),
        weights: net.export_weights(),
        outcome: outcome.clone(),
    };
    save_checkpoint(&dir.join("checkpoint.bin"), &state)?;

    let summary = summarize(cfg, outcome, config_hash, test_data);
    eval::emit(dir, &outcome.records, net.k, &summary, &outcome.histograms)?;
    Ok(())
}

/// Build the summary.json payload for a (possibly partial) run.
pub fn summarize(
    cfg: &TrainConfig,
    outcome: &TrainOutcome,
    config_hash: &str,
    test_data: &DatasetBundle,
) -> Summary {
    let last = outcome.records.last();
    let per_class = last.map(|r| r.per_class_accuracy.clone()).unwrap_or_default();
    let tail = eval::tail_classes(&test_data.class_counts, 0.3);
    let tail_accuracy = if per_class.is_empty() {
        0.0
    } else {
        tail.iter().map(|&c| per_class[c]).sum::<f64>() / tail.len() as f64
    };
    Summary {
        schema_version: eval::METRICS_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        seed: cfg.seed,
        config: cfg_to_map(cfg),
        final_test_accuracy: last.map(|r| r.test_accuracy).unwrap_or(0.0),
        final_per_class_accuracy: per_class,
        tail_classes: tail,
        tail_accuracy,
        epochs_run: outcome.records.len(),
        skipped_batches: outcome.skipped_batches,
        warmup_separation: outcome.warmup_separation.clone(),
        final_separation: outcome.final_separation.clone(),
        selection_quality: outcome.final_selection_quality,
    }
}

fn cfg_to_map(cfg: &TrainConfig) -> std::collections::BTreeMap<String, String> {
    let mut m = std::collections::BTreeMap::new();
    m.insert("train.epochs_warmup".into(), cfg.epochs_warmup.to_string());
    m.insert("train.epochs_main".into(), cfg.epochs_main.to_string());
    m.insert("train.batch_size".into(), cfg.batch_size.to_string());
    m.insert("train.lr0".into(), cfg.lr0.to_string());
    m.insert("train.momentum".into(), cfg.momentum.to_string());
    m.insert("train.alpha".into(), cfg.weights.alpha.to_string());
    m.insert("train.lambda".into(), cfg.weights.lambda.to_string());
    m.insert("train.kappa".into(), cfg.weights.kappa.to_string());
    m.insert("train.tau".into(), cfg.tau.to_string());
    m.insert("train.bn_momentum".into(), cfg.bn_momentum.to_string());
    m.insert("train.arch".into(), cfg.arch.to_string());
    m.insert("method".into(), cfg.method.preset_name());
    m.insert("seed".into(), cfg.seed.to_string());
    m
}

/// The tail-class mean accuracy on the test set from a finished outcome,
/// using the training-set class counts to define the tail.
pub fn tail_accuracy(outcome: &TrainOutcome, train_counts: &[usize]) -> Option<f64> {
    let rec = outcome.records.last()?;
    let tail = eval::tail_classes(train_counts, 0.3);
    Some(tail.iter().map(|&c| rec.per_class_accuracy[c]).sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_boundaries() {
        assert_eq!(cosine_lr(0, 100, 0.05), 0.05);
        assert!((cosine_lr(100, 100, 0.05)).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.05) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_monotone_within_stage() {
        let mut prev = f64::INFINITY;
        for s in 0..=200 {
            let lr = cosine_lr(s, 200, 0.1);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn prior_update_convex_combination() {
        let mut p = PriorState { q: vec![0.5, 0.5], q_hat: vec![0.5, 0.5], tau: 0.5 };
        p.update(PriorKind::Weak, &[0.9, 0.1]);
        assert!((p.q[0] - 0.7).abs() < 1e-15);
        assert!((p.q[1] - 0.3).abs() < 1e-15);
        // tau = 0 leaves the prior unchanged
        let mut frozen = PriorState { q: vec![0.3, 0.7], q_hat: vec![0.3, 0.7], tau: 0.0 };
        frozen.update(PriorKind::Weak, &[1.0, 0.0]);
        assert_eq!(frozen.q, vec![0.3, 0.7]);
    }

    #[test]
    fn prior_simplex_preserved_many_updates() {
        use rand::Rng;
        let mut rng = crate::stream::stream(61, 88, 0, 0);
        let k = 7;
        let counts: Vec<usize> = (0..k).map(|_| rng.gen_range(1..100)).collect();
        let mut p = PriorState::from_counts(&counts, 0.5);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.001..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let mean: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let which =
                if rng.gen_range(0.0..1.0) < 0.5 { PriorKind::Weak } else { PriorKind::Strong };
            p.update(which, &mean);
        }
        assert!(p.is_simplex(1e-9));
    }

    fn set_grad(p: &Tensor, g: &[f64]) {
        // drive a gradient through a trivial graph: sum(mul(p, const))
        let tape = Tape::new();
        let c = Tensor::new(&[g.len()], g.to_vec()).unwrap();
        let prod = tape.mul(p, &c).unwrap();
        let s = tape.sum(&prod);
        tape.backward(&s).unwrap();
    }

    #[test]
    fn sgd_vanilla_step() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        set_grad(&p, &[0.5, -1.0]);
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = SgdMomentum::new(&params, 0.0);
        opt.step(&params, 1.0);
        assert_eq!(p.to_vec(), vec![0.5, 3.0]);
    }

    #[test]
    fn sgd_zero_grad_decays_velocity() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = SgdMomentum::new(&params, 0.9);
        set_grad(&p, &[1.0]);
        opt.step(&params, 0.1); // v = 1, p = 0.9
        p.zero_grad();
        opt.step(&params, 0.1); // v = 0.9, p -= 0.09
        assert!((p.to_vec()[0] - (0.9 - 0.09)).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic_bowl() {
        // f(w) = ||w||^2, grad = 2w
        let p = Tensor::param(&[3], vec![3.0, -2.0, 1.5]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = SgdMomentum::new(&params, 0.9);
        for _ in 0..200 {
            let g: Vec<f64> = p.to_vec().iter().map(|v| 2.0 * v).collect();
            p.zero_grad();
            set_grad(&p, &g);
            opt.step(&params, 0.1);
        }
        let norm: f64 = p.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn method_presets_roundtrip() {
        for name in ["ce", "cam", "cam-lnor", "full"] {
            let m = MethodFlags::from_preset(name).unwrap();
            assert_eq!(m.preset_name(), name);
        }
        assert!(MethodFlags::from_preset("bogus").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig { epochs_warmup: 1, epochs_main: 0, ..Default::default() };
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 16;
        cfg.method = MethodFlags { caug_matching: false, lnor: true, opp: false };
        assert!(cfg.validate().is_err());
        cfg.method = MethodFlags::full();
        assert!(cfg.validate().is_ok());
    }
}

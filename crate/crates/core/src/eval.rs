//! Evaluation: accuracy, noise-detection quality against the hidden mask,
//! loss histograms, and machine-readable run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::model::{Branch, Mode, Network};
use crate::tensor::Tape;

/// Fraction of test samples whose argmax prediction (ties to the smaller
/// index) matches the true label.
pub fn accuracy(net: &Network, test: &DatasetBundle, batch_size: usize) -> Result<f64> {
    let per_class = classwise_accuracy(net, test, batch_size)?;
    let mut correct = 0.0;
    for (cls, acc) in per_class.iter().enumerate() {
        correct += acc * test.class_counts[cls] as f64;
    }
    Ok(correct / test.len() as f64)
}

/// Accuracy restricted to each true class.
pub fn classwise_accuracy(net: &Network, test: &DatasetBundle, batch_size: usize) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::Usage("empty test set".into()));
    }
    let preds = predict_labels(net, test, batch_size)?;
    let mut correct = vec![0usize; net.k];
    let mut total = vec![0usize; net.k];
    for (s, &p) in test.samples.iter().zip(&preds) {
        total[s.true_label] += 1;
        if p == s.true_label {
            correct[s.true_label] += 1;
        }
    }
    Ok((0..net.k)
        .map(|c| if total[c] == 0 { 0.0 } else { correct[c] as f64 / total[c] as f64 })
        .collect())
}

/// Eval-mode weak-branch argmax predictions for every sample.
pub fn predict_labels(net: &Network, data: &DatasetBundle, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let imgs: Vec<&crate::data::Image> = chunk.iter().map(|&i| &data.samples[i].image).collect();
        let x = net.batch_tensor(&imgs)?;
        let tape = Tape::no_grad();
        let p = net.forward(&tape, &x, Branch::Weak, Mode::Eval)?;
        let pv = p.data();
        for r in 0..chunk.len() {
            out.push(crate::criteria::argmax_row(&pv[r * net.k..(r + 1) * net.k]));
        }
    }
    Ok(out)
}

/// Noise-detection quality of a score (higher score should mean noisier).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseDetection {
    pub auroc: f64,
}

/// AUROC by the rank statistic; tied scores contribute 0.5 per pair.
/// Positives are the masked (noisy) samples.
pub fn auroc(scores: &[f64], mask: &[bool]) -> Result<f64> {
    if scores.len() != mask.len() {
        return Err(Error::Usage("auroc: score/mask length mismatch".into()));
    }
    let n_pos = mask.iter().filter(|&&m| m).count();
    let n_neg = mask.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Usage("auroc undefined without both classes".into()));
    }
    // average ranks with midrank tie handling
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the midrank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if mask[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// Precision/recall of a proposed clean set against the hidden mask, plus the
/// fraction of samples whose clean/noisy assignment agrees with the mask.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SelectionQuality {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

pub fn selection_quality(clean_ids: &[usize], mask: &[bool]) -> SelectionQuality {
    let mut in_clean = vec![false; mask.len()];
    for &i in clean_ids {
        in_clean[i] = true;
    }
    let mut tp = 0usize; // selected clean, truly clean
    let mut fp = 0usize; // selected clean, actually noisy
    let mut agree = 0usize;
    let total_clean = mask.iter().filter(|&&m| !m).count();
    for i in 0..mask.len() {
        let truly_clean = !mask[i];
        if in_clean[i] {
            if truly_clean {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if in_clean[i] == truly_clean {
            agree += 1;
        }
    }
    SelectionQuality {
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: if total_clean == 0 { 0.0 } else { tp as f64 / total_clean as f64 },
        accuracy: agree as f64 / mask.len().max(1) as f64,
    }
}

/// Classes making up the bottom `frac` of classes by training count
/// (at least one). Ties prefer the larger class index.
pub fn tail_classes(class_counts: &[usize], frac: f64) -> Vec<usize> {
    let k = class_counts.len();
    let n_tail = ((k as f64 * frac).floor() as usize).max(1).min(k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| class_counts[a].cmp(&class_counts[b]).then(b.cmp(&a)));
    let mut tail: Vec<usize> = order.into_iter().take(n_tail).collect();
    tail.sort_unstable();
    tail
}

/// Binned loss distribution split into clean-head / clean-tail / noisy groups.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossHistogram {
    pub bin_edges: Vec<f64>, // length bins + 1
    pub clean_head: Vec<usize>,
    pub clean_tail: Vec<usize>,
    pub noisy: Vec<usize>,
}

pub fn loss_histogram(
    losses: &[f64],
    mask: &[bool],
    true_labels: &[usize],
    class_counts: &[usize],
    bins: usize,
) -> Result<LossHistogram> {
    if bins < 1 {
        return Err(Error::Config("histogram needs at least 1 bin".into()));
    }
    if losses.is_empty() {
        return Err(Error::Usage("histogram of no losses".into()));
    }
    let tail = tail_classes(class_counts, 0.3);
    let is_tail = |cls: usize| tail.binary_search(&cls).is_ok();
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let mut h = LossHistogram {
        bin_edges: (0..=bins).map(|b| min + b as f64 * width).collect(),
        clean_head: vec![0; bins],
        clean_tail: vec![0; bins],
        noisy: vec![0; bins],
    };
    for i in 0..losses.len() {
        let mut b = ((losses[i] - min) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        if mask[i] {
            h.noisy[b] += 1;
        } else if is_tail(true_labels[i]) {
            h.clean_tail[b] += 1;
        } else {
            h.clean_head[b] += 1;
        }
    }
    Ok(h)
}

/// Overlap coefficient of two histograms with identical binning:
/// `sum_b min(p_b, q_b)` of the normalized bin masses.
pub fn overlap_coefficient(a: &[usize], b: &[usize]) -> f64 {
    let sa: f64 = a.iter().sum::<usize>() as f64;
    let sb: f64 = b.iter().sum::<usize>() as f64;
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| (x as f64 / sa).min(y as f64 / sb)).sum()
}

// ---- per-epoch metrics and artifacts ------------------------------------------------

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One row of metrics.csv.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub test_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Selection quality against the hidden mask; None during warm-up or when
    /// no mask exists (real-data mode).
    pub clean_precision: Option<f64>,
    pub clean_recall: Option<f64>,
    pub auroc_matching: Option<f64>,
    pub auroc_ce: Option<f64>,
    pub mean_clean: Option<f64>,
    pub mean_noisy: Option<f64>,
    pub epsilon_mean: Option<f64>,
    pub skipped_batches: u64,
    pub wall_time_s: f64,
}

fn opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.17}"),
        None => "NA".into(),
    }
}

/// Render metrics.csv. The schema line carries the version and config hash;
/// the wall_time_s column is the only non-deterministic field.
pub fn render_metrics_csv(records: &[MetricsRecord], k: usize, config_hash: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# noisytail metrics schema v{METRICS_SCHEMA_VERSION} config_hash={config_hash}\n"
    ));
    let class_cols: Vec<String> = (0..k).map(|c| format!("acc_class_{c}")).collect();
    out.push_str(&format!(
        "epoch,stage,lr,test_accuracy,{},clean_precision,clean_recall,auroc_matching,auroc_ce,mean_clean,mean_noisy,epsilon_mean,skipped_batches,wall_time_s\n",
        class_cols.join(",")
    ));
    for r in records {
        let classes: Vec<String> = r.per_class_accuracy.iter().map(|v| format!("{v:.17}")).collect();
        out.push_str(&format!(
            "{},{},{:.17},{:.17},{},{},{},{},{},{},{},{},{},{:.6}\n",
            r.epoch,
            r.stage,
            r.lr,
            r.test_accuracy,
            classes.join(","),
            opt(&r.clean_precision),
            opt(&r.clean_recall),
            opt(&r.auroc_matching),
            opt(&r.auroc_ce),
            opt(&r.mean_clean),
            opt(&r.mean_noisy),
            opt(&r.epsilon_mean),
            r.skipped_batches,
            r.wall_time_s,
        ));
    }
    out
}

/// Loss-separation report produced by a scoring pass over the training set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparationReport {
    pub auroc_matching: f64,
    pub auroc_ce: f64,
    /// Overlap coefficient between the noisy and clean-tail loss histograms.
    pub overlap_matching: f64,
    pub overlap_ce: f64,
}

/// Everything summary.json carries.
#[derive(Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub final_test_accuracy: f64,
    pub final_per_class_accuracy: Vec<f64>,
    pub tail_classes: Vec<usize>,
    pub tail_accuracy: f64,
    pub epochs_run: usize,
    pub skipped_batches: u64,
    pub warmup_separation: Option<SeparationReport>,
    pub final_separation: Option<SeparationReport>,
    pub selection_quality: Option<SelectionQuality>,
}

fn hist_csv(h: &LossHistogram, config_hash: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# noisytail histogram schema v{METRICS_SCHEMA_VERSION} config_hash={config_hash}\n"
    ));
    out.push_str("bin_lo,bin_hi,clean_head,clean_tail,noisy\n");
    for b in 0..h.clean_head.len() {
        out.push_str(&format!(
            "{:.17},{:.17},{},{},{}\n",
            h.bin_edges[b],
            h.bin_edges[b + 1],
            h.clean_head[b],
            h.clean_tail[b],
            h.noisy[b]
        ));
    }
    out
}

/// Write `metrics.csv`, `summary.json` and any histograms into the run
/// directory. Overwrites idempotently; summary.json lands via write-then-rename
/// so a failed run never leaves a partially written summary.
pub fn emit(
    run_dir: &Path,
    records: &[MetricsRecord],
    k: usize,
    summary: &Summary,
    histograms: &[(String, LossHistogram)],
) -> Result<()> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let metrics_path = run_dir.join("metrics.csv");
    fs::write(&metrics_path, render_metrics_csv(records, k, &summary.config_hash))
        .map_err(|e| Error::io(&metrics_path, e))?;

    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Parse(format!("summary serialization: {e}")))?;
    let tmp = run_dir.join("summary.json.tmp");
    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    let final_path = run_dir.join("summary.json");
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;

    if !histograms.is_empty() {
        let hdir = run_dir.join("histograms");
        fs::create_dir_all(&hdir).map_err(|e| Error::io(&hdir, e))?;
        for (name, h) in histograms {
            let p = hdir.join(format!("{name}.csv"));
            fs::write(&p, hist_csv(h, &summary.config_hash)).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

//! Diagnostic probe: warm-up on the criterion-8 data, then measure weak- and
//! strong-view prediction quality and the noisy-vs-clean AUROC of the
//! matching and CE losses under different strong-augmentation settings.

use noisytail::augment::{strong_augment, weak_augment, AugmentConfig};
use noisytail::criteria::{cross_entropy_value, matching_loss_value, YPrimeMode};
use noisytail::data::{self, Image};
use noisytail::eval;
use noisytail::model::Branch;
use noisytail::stream::stream;
use noisytail::tensor::Tape;
use noisytail::trainer::{self, TrainConfig};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let invert = args.get(1).map(|s| s == "invert").unwrap_or(false);
    let rot: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30.0);
    let cutout: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);

    let base = data::load_idx(
        Path::new("data/mnist10k/mnist10k-images-idx3-ubyte"),
        Path::new("data/mnist10k/mnist10k-labels-idx1-ubyte"),
    )
    .unwrap();
    let (pool, test) = data::holdout_split(&base, 150, 1).unwrap();
    let tailed = data::apply_longtail(&pool, 0.1, 1).unwrap();
    let train = data::inject_noise_ci(&tailed, 0.2, 1).unwrap();
    println!("train {} (counts {:?})", train.len(), train.class_counts);

    let mut aug = AugmentConfig::mnist();
    aug.invert_enabled = invert;
    aug.rotate_max_deg = rot;
    aug.shear_max = rot / 100.0;
    aug.cutout_size = cutout;
    let cfg = TrainConfig {
        epochs_warmup: 10,
        epochs_main: 0,
        lr0: 0.02,
        seed: 1,
        aug: aug.clone(),
        ..TrainConfig::default()
    };
    let (net, _) = trainer::train(&cfg, &train, &test, None, "probe").unwrap();
    println!("eval acc after warmup: {:.4}", eval::accuracy(&net, &test, 128).unwrap());

    // scoring pass over the train set
    let n = train.len();
    let mask = train.noise_mask();
    let mut match_losses = vec![0.0; n];
    let mut ce_losses = vec![0.0; n];
    let (mut weak_ok, mut strong_ok) = (0usize, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(128) {
        let weak: Vec<Image> = chunk
            .iter()
            .map(|&i| {
                let mut r = stream(1, 3, 999, train.samples[i].id);
                weak_augment(&train.samples[i].image, &aug, &mut r)
            })
            .collect();
        let strong: Vec<Image> = chunk
            .iter()
            .map(|&i| {
                let mut r = stream(1, 4, 999, train.samples[i].id);
                strong_augment(&train.samples[i].image, &aug, &mut r)
            })
            .collect();
        let wr: Vec<&Image> = weak.iter().collect();
        let sr: Vec<&Image> = strong.iter().collect();
        let xw = net.batch_tensor(&wr).unwrap();
        let xs = net.batch_tensor(&sr).unwrap();
        let tape = Tape::no_grad();
        let pw = net.forward_frozen_stats(&tape, &xw, Branch::Weak).unwrap();
        let ps = net.forward_frozen_stats(&tape, &xs, Branch::Strong).unwrap();
        let pwd = pw.data();
        let psd = ps.data();
        for (r, &i) in chunk.iter().enumerate() {
            let pw_row = &pwd[r * 10..(r + 1) * 10];
            let ps_row = &psd[r * 10..(r + 1) * 10];
            let y = train.samples[i].given_label;
            let truth = train.samples[i].true_label;
            match_losses[i] = matching_loss_value(pw_row, ps_row, y, 2.0, YPrimeMode::ArgMax);
            ce_losses[i] = cross_entropy_value(pw_row, y);
            if noisytail::criteria::argmax_row(pw_row) == truth {
                weak_ok += 1;
            }
            if noisytail::criteria::argmax_row(ps_row) == truth {
                strong_ok += 1;
            }
        }
    }
    println!(
        "train-view accuracy: weak {:.4} strong {:.4}",
        weak_ok as f64 / n as f64,
        strong_ok as f64 / n as f64
    );
    println!(
        "AUROC: matching {:.4} ce {:.4}",
        eval::auroc(&match_losses, &mask).unwrap(),
        eval::auroc(&ce_losses, &mask).unwrap()
    );
}

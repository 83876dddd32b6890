//! Diagnostic probe: plain CE training on clean balanced MNIST, reporting
//! train-statistics vs running-statistics accuracy each epoch.

use noisytail::criteria;
use noisytail::data::{self, Image};
use noisytail::model::{Arch, Branch, Mode, Network};
use noisytail::stream::{stream, PURPOSE_SHUFFLE};
use noisytail::tensor::Tape;
use noisytail::trainer::{cosine_lr, SgdMomentum};
use rand::seq::SliceRandom;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arch = args.get(1).map(|s| s.as_str()).unwrap_or("cnn");
    let lr0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let aug: bool = args.get(4).map(|s| s == "aug").unwrap_or(false);

    let base = data::load_idx(
        Path::new("data/mnist10k/mnist10k-images-idx3-ubyte"),
        Path::new("data/mnist10k/mnist10k-labels-idx1-ubyte"),
    )
    .unwrap();
    let sub = data::balanced_subset(&base, 400, 7).unwrap();
    let (train, test) = data::holdout_split(&sub, 100, 7).unwrap();
    println!("train {} test {} arch {arch} lr {lr0} aug {aug}", train.len(), test.len());

    let arch = match arch {
        "mlp" => Arch::Mlp { widths: vec![256] },
        _ => Arch::Cnn { channels: vec![16, 32] },
    };
    let net = Network::new(arch, 10, 28, 28, 1e-5, 0.1, 1).unwrap();
    let params = net.named_params();
    let mut opt = SgdMomentum::new(&params, 0.9);
    let batch = 128;
    let bpe = train.len().div_ceil(batch);
    let acfg = noisytail::augment::AugmentConfig::mnist();

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(1, PURPOSE_SHUFFLE, epoch as u64, 0));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let views: Vec<Image> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    if aug {
                        let mut r = stream(1, 3, epoch as u64, (chunk[j]) as u64);
                        noisytail::augment::weak_augment(&train.samples[i].image, &acfg, &mut r)
                    } else {
                        train.samples[i].image.clone()
                    }
                })
                .collect();
            let refs: Vec<&Image> = views.iter().collect();
            let x = net.batch_tensor(&refs).unwrap();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].given_label).collect();
            let tape = Tape::new();
            net.zero_grads();
            let p = net.forward(&tape, &x, Branch::Weak, Mode::Train).unwrap();
            let rows: Vec<usize> = (0..chunk.len()).collect();
            let ce = criteria::ce_sum(&tape, &p, &rows, &labels).unwrap();
            let loss = tape.affine(&ce, 1.0 / chunk.len() as f64, 0.0);
            loss_sum += loss.item();
            tape.backward(&loss).unwrap();
            let lr = cosine_lr(epoch * bpe + bi, epochs * bpe, lr0);
            opt.step(&params, lr);
        }

        // eval with running stats
        let eval_acc = noisytail::eval::accuracy(&net, &test, batch).unwrap();
        // eval with batch stats (frozen running)
        let mut correct = 0;
        let idx: Vec<usize> = (0..test.len()).collect();
        for chunk in idx.chunks(batch) {
            let refs: Vec<&Image> = chunk.iter().map(|&i| &test.samples[i].image).collect();
            let x = net.batch_tensor(&refs).unwrap();
            let tape = Tape::no_grad();
            let p = net.forward_frozen_stats(&tape, &x, Branch::Weak).unwrap();
            let pd = p.data();
            for (r, &i) in chunk.iter().enumerate() {
                if criteria::argmax_row(&pd[r * 10..(r + 1) * 10]) == test.samples[i].true_label {
                    correct += 1;
                }
            }
        }
        println!(
            "epoch {epoch}: mean loss {:.4} eval(run-stats) {:.4} eval(batch-stats) {:.4}",
            loss_sum / bpe as f64,
            eval_acc,
            correct as f64 / test.len() as f64
        );
    }
}

//! Coarse timing of the training hot path on an MNIST-shaped batch.

use std::time::Instant;

use noisytail::augment::{strong_augment, weak_augment, AugmentConfig};
use noisytail::data::Image;
use noisytail::model::{Arch, Branch, Mode, Network};
use noisytail::stream::stream;
use noisytail::tensor::Tape;
use rand::Rng;

fn main() {
    let n = 128;
    let net = Network::new(Arch::Cnn { channels: vec![16, 32] }, 10, 28, 28, 1e-5, 0.1, 1).unwrap();
    let mut rng = stream(1, 50, 0, 0);
    let imgs: Vec<Image> = (0..n)
        .map(|_| Image::new(28, 28, (0..784).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect();
    let cfg = AugmentConfig::mnist();

    let t = Instant::now();
    let mut weak = Vec::new();
    let mut strong = Vec::new();
    for (i, img) in imgs.iter().enumerate() {
        let mut r1 = stream(1, 51, 0, i as u64);
        let mut r2 = stream(1, 52, 0, i as u64);
        weak.push(weak_augment(img, &cfg, &mut r1));
        strong.push(strong_augment(img, &cfg, &mut r2));
    }
    println!("augment batch: {:?}", t.elapsed());

    let refs: Vec<&Image> = weak.iter().collect();
    let x = net.batch_tensor(&refs).unwrap();

    let t = Instant::now();
    for _ in 0..5 {
        let tape = Tape::no_grad();
        net.forward(&tape, &x, Branch::Weak, Mode::Train).unwrap();
    }
    println!("forward (no grad) x5: {:?}", t.elapsed());

    let t = Instant::now();
    for _ in 0..5 {
        let tape = Tape::new();
        net.zero_grads();
        let p = net.forward(&tape, &x, Branch::Weak, Mode::Train).unwrap();
        let loss = tape.mean(&p);
        tape.backward(&loss).unwrap();
    }
    println!("forward+backward x5: {:?}", t.elapsed());

    let _ = strong;
}

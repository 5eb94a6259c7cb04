use relvox_core::phantom::{generate, PhantomConfig};
use relvox_core::train::*;
use relvox_core::net::NetworkSpec;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let noise: f32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let decay: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let pcfg = PhantomConfig::default();
    let t0 = Instant::now();
    let (ds, _gt) = generate(&pcfg).unwrap();
    println!("phantom: {} samples, {} test subjects, gen {:.1}s",
        ds.samples.len(), ds.test_subjects.len(), t0.elapsed().as_secs_f64());

    let spec = NetworkSpec::default();
    let mut aug = AugmentConfig::default();
    aug.noise_sigma = noise;
    let cfg = TrainConfig {
        epochs, folds: 3, batch_size: batch, learning_rate: lr, lr_decay: decay,
        weight_decay: 1e-2, augment: aug, seed: 2024, threads: 1,
    };
    let t1 = Instant::now();
    let r = train_cv(&ds, &spec, &cfg).unwrap();
    println!("train_cv took {:.1}s", t1.elapsed().as_secs_f64());
    println!("{}", r.metrics_csv());
    for f in &r.folds {
        println!("fold {} best_epoch {} best_auc {:.3} attn {:?}", f.fold, f.best_epoch, f.best_auc, f.mean_attention);
    }
}

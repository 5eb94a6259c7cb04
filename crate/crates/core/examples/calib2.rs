use relvox_core::eval::{run_scenarios, EvalOptions, ScenarioConfig};
use relvox_core::attribution::RuleConfig;
use relvox_core::net::NetworkSpec;
use relvox_core::phantom::{generate, PhantomConfig};
use relvox_core::train::*;
use std::time::Instant;

fn main() {
    let (ds, gt) = generate(&PhantomConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 8, folds: 3, batch_size: 8, learning_rate: 1e-3, lr_decay: 0.75,
        weight_decay: 1e-2,
        augment: AugmentConfig { noise_sigma: 0.05, ..AugmentConfig::default() },
        seed: 2024, threads: 1,
    };
    let t0 = Instant::now();
    let cv = train_cv(&ds, &NetworkSpec::default(), &cfg).unwrap();
    println!("train {:.0}s, fold AUCs {:?}", t0.elapsed().as_secs_f64(),
        cv.folds.iter().map(|f| f.best_auc).collect::<Vec<_>>());
    let best = cv.best_fold();
    let mut pool = cv.plan.fold_indices(&ds, best.fold);
    pool.extend(ds.test_indices());
    pool.sort_unstable(); pool.dedup();
    println!("pool {} samples, best fold {}", pool.len(), best.fold);
    let opts = EvalOptions {
        quantiles: vec![0.2, 0.4, 0.6], reference_quantile: 0.4, ig_steps: 16,
        rules: RuleConfig::default(), permutations: 20_000, seed: 2024, threads: 1,
    };
    let t1 = Instant::now();
    let report = run_scenarios(&ds, &pool, Some(&gt), &best.params, &ScenarioConfig::table(), &opts).unwrap();
    println!("scenarios took {:.0}s", t1.elapsed().as_secs_f64());
    println!("baseline AUC {:.3}", report.baseline_auc);
    println!("ranked {:?}", report.ranked_by_drop);
    println!("random control drop {:.4} dice {:?}", report.random_control_drop, report.random_control_dice);
    for r in &report.scenarios {
        println!("s{:02} drop {:.4} dice {:?} corr {:?}", r.config.id, r.drop_at_reference,
            r.mean_dice.map(|d| (d * 1000.0).round() / 1000.0),
            r.correlations.iter().map(|c| format!("c{} rho {:.3} p {:.4}", c.contrast, c.rho, c.p_value)).collect::<Vec<_>>());
    }
}

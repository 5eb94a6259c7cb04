//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads 1`
//! to see the per-criterion lines in order. The phantom end-to-end fixtures
//! (training runs, scenario grid) are shared across criteria 7-10.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use relvox_core::attribution::{
    canonize, integrated_gradients, lrp_backward, split_multiplicative, Anchor, LinRule,
    RuleConfig, SplitVariant,
};
use relvox_core::eval::{
    quantile_mask, random_mask, run_scenarios, EvalOptions, ScenarioConfig, ScenarioReport,
};
use relvox_core::graph::{finite_diff_check, Tape};
use relvox_core::net::{build, forward, forward_tape, BnMode, NetworkSpec};
use relvox_core::phantom::{generate, GroundTruth, PhantomConfig};
use relvox_core::stats::{auc, dice, permutation_test, spearman};
use relvox_core::train::{train_cv, AugmentConfig, CvResult, Dataset, TrainConfig};
use relvox_core::Tensor;
use std::sync::OnceLock;
use std::time::Instant;

fn pass(criterion: u32, name: &str, detail: String) {
    println!("acceptance criterion {:02} ({}): PASS - {}", criterion, name, detail);
}

fn random_volumes(spec: &NetworkSpec, rng: &mut ChaCha20Rng) -> Vec<Tensor<f32>> {
    let [d, h, w] = spec.input_extents;
    (0..spec.paths)
        .map(|_| Tensor::from_fn(vec![1, d, h, w], |_| rng.gen_range(0.0..1.0)))
        .collect()
}

/// Training configuration for the phantom acceptance runs. Deviations from
/// the plain defaults (higher learning rate with decay, smaller batches,
/// milder noise) buy convergence inside the single-core time budget.
fn acceptance_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        lr_decay: 0.75,
        weight_decay: 1e-2,
        batch_size: 8,
        epochs: 8,
        folds: 3,
        augment: AugmentConfig { noise_sigma: 0.05, ..AugmentConfig::default() },
        seed: 2024,
        threads: 1,
    }
}

fn eval_opts() -> EvalOptions {
    EvalOptions {
        quantiles: vec![0.2, 0.4, 0.6],
        reference_quantile: 0.4,
        ig_steps: 16,
        rules: RuleConfig::default(),
        permutations: 20_000,
        seed: 2024,
        threads: 1,
    }
}

struct TrainedFixture {
    dataset: Dataset,
    truth: GroundTruth,
    cv: CvResult,
    pool: Vec<usize>,
    train_seconds: f64,
}

fn trained() -> &'static TrainedFixture {
    static FIX: OnceLock<TrainedFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let pcfg = PhantomConfig::default();
        let (dataset, truth) = generate(&pcfg).expect("default phantom generates");
        let t0 = Instant::now();
        let cv = train_cv(&dataset, &NetworkSpec::default(), &acceptance_train_config())
            .expect("phantom training completes");
        let train_seconds = t0.elapsed().as_secs_f64();
        let best = cv.best_fold().fold;
        let mut pool = cv.plan.fold_indices(&dataset, best);
        pool.extend(dataset.test_indices());
        pool.sort_unstable();
        pool.dedup();
        TrainedFixture { dataset, truth, cv, pool, train_seconds }
    })
}

fn scenario_report() -> &'static ScenarioReport {
    static FIX: OnceLock<ScenarioReport> = OnceLock::new();
    FIX.get_or_init(|| {
        let fx = trained();
        let params = &fx.cv.best_fold().params;
        run_scenarios(
            &fx.dataset,
            &fx.pool,
            Some(&fx.truth),
            params,
            &ScenarioConfig::table(),
            &eval_opts(),
        )
        .expect("scenario grid completes")
    })
}

/// Criterion 1: autodiff vs central finite differences on the 3-path
/// micro-net (8^3 inputs) in 64-bit mode, max relative error <= 1e-4,
/// within one minute.
#[test]
fn criterion_01_gradient_suite() {
    let t0 = Instant::now();
    let spec = NetworkSpec::micro();
    assert_eq!(spec.paths, 3);
    assert_eq!(spec.input_extents, [8, 8, 8]);
    let params = build(&spec, 1217).unwrap().cast::<f64>();
    let mut rng = ChaCha20Rng::seed_from_u64(61);
    let [d, h, w] = spec.input_extents;
    let vols: Vec<Tensor<f64>> = (0..spec.paths)
        .map(|_| Tensor::from_fn(vec![1, d, h, w], |_| rng.gen_range(0.05..0.95)))
        .collect();
    let age = 47.0f64;

    let mut tape = Tape::<f64>::new();
    let refs = forward_tape(&mut tape, &params, &vols, age, BnMode::Train, true).unwrap();
    tape.backward(refs.logit).unwrap();

    // every coordinate of every input volume, through the training-mode graph
    let mut worst = 0.0f64;
    for path in 0..spec.paths {
        let grad = tape.grad(refs.inputs[path]).expect("input gradient").to_vec();
        let others: Vec<Tensor<f64>> = vols.clone();
        let f = |x: &Tensor<f64>| -> relvox_core::Result<f64> {
            let mut probe = others.clone();
            probe[path] = x.clone();
            let mut t = Tape::<f64>::new();
            let r = forward_tape(&mut t, &params, &probe, age, BnMode::Train, false)?;
            Ok(t.value(r.logit).data()[0])
        };
        let err = finite_diff_check(&f, &vols[path], &grad, 1e-5).unwrap();
        worst = worst.max(err);
    }

    // deterministic sample of parameter coordinates across all tensors
    let mut flat_params: Vec<Tensor<f64>> = Vec::new();
    params.for_each_trainable(&mut |t| flat_params.push(t.clone()));
    let grads: Vec<Vec<f64>> = refs
        .params
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
        .collect();
    let total: usize = flat_params.iter().map(|t| t.len()).sum();
    let step = 1e-5;
    let mut checked = 0usize;
    let mut cursor = 17usize;
    while checked < 2000 {
        let target = cursor % total;
        cursor = cursor.wrapping_mul(48271) % 0x7fff_ffff;
        // locate tensor holding the target coordinate
        let mut acc = 0usize;
        let mut which = 0usize;
        for (k, t) in flat_params.iter().enumerate() {
            if target < acc + t.len() {
                which = k;
                break;
            }
            acc += t.len();
        }
        let inner = target - acc;
        let eval = |delta: f64| -> f64 {
            let mut p2 = params.clone();
            let mut k = 0usize;
            p2.for_each_trainable_mut(&mut |t| {
                if k == which {
                    t.data_mut()[inner] += delta;
                }
                k += 1;
            });
            let mut t = Tape::<f64>::new();
            let r = forward_tape(&mut t, &p2, &vols, age, BnMode::Train, false).unwrap();
            t.value(r.logit).data()[0]
        };
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        let ad = grads[which][inner];
        worst = worst.max((ad - fd).abs() / fd.abs().max(1e-12));
        checked += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst <= 1e-4, "max relative gradient error {}", worst);
    assert!(secs < 60.0, "gradient suite took {:.1}s", secs);
    pass(1, "gradient suite", format!("max relative error {:.2e} in {:.1}s", worst, secs));
}

/// Criterion 2: split-rule conservation over 10^4 random triples for both
/// variants, elementwise to 1e-9.
#[test]
fn criterion_02_split_conservation() {
    let mut rng = ChaCha20Rng::seed_from_u64(62);
    let delta = 1e-12f64;
    let mut worst = 0.0f64;
    for variant in [SplitVariant::Proposed, SplitVariant::LrpAll] {
        for _ in 0..10_000 {
            let n = rng.gen_range(1..8);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (rs, rg) = split_multiplicative(&s, &g, &r, variant, delta).unwrap();
            for i in 0..n {
                worst = worst.max((rs[i] + rg[i] - r[i]).abs());
            }
        }
    }
    assert!(worst <= 1e-9, "worst split residual {}", worst);
    pass(2, "split-rule conservation", format!("worst residual {:.2e} over 2x10^4 triples", worst));
}

/// Criterion 3: global relevance conservation on a bias-free micro-net with
/// alpha=1/beta=0 everywhere and a positive logit anchor, 100 samples.
#[test]
fn criterion_03_global_conservation() {
    let spec = NetworkSpec::micro();
    let mut params = build(&spec, 63).unwrap();
    params.zero_biases();
    let canon = canonize(&params).unwrap();
    let rules = RuleConfig {
        fc_rule: LinRule::AlphaBeta,
        conv_rule: LinRule::AlphaBeta,
        input_rule: LinRule::AlphaBeta,
        ..RuleConfig::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(63);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut attempts = 0usize;
    while checked < 100 {
        attempts += 1;
        assert!(attempts < 1000, "could not find positive logits");
        let vols = random_volumes(&spec, &mut rng);
        let age = rng.gen_range(20.0..80.0);
        let out = forward(&canon, &vols, age).unwrap();
        if out.logit <= 0.0 {
            continue;
        }
        let bundle = lrp_backward(&out.trace, &canon, Anchor::Logit, &rules).unwrap();
        let rel = bundle.conservation_residual.abs() / out.logit as f64;
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(worst <= 1e-3, "worst relative conservation residual {}", worst);
    pass(3, "global conservation", format!("worst relative residual {:.2e} over 100 samples", worst));
}

/// Criterion 4: canonized (BN-folded) network forward agrees with the
/// original to 1e-5 max abs over 100 random inputs.
#[test]
fn criterion_04_canonization() {
    let spec = NetworkSpec::micro();
    let mut params = build(&spec, 64).unwrap();
    // non-trivial batch norms
    let mut rng = ChaCha20Rng::seed_from_u64(64);
    params.for_each_bn_mut(&mut |bn| {
        let c = bn.gamma.len();
        bn.gamma = Tensor::from_fn(vec![c], |_| rng.gen_range(-1.5..1.5f32));
        bn.beta = Tensor::from_fn(vec![c], |_| rng.gen_range(-0.5..0.5f32));
        bn.running_mean = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        bn.running_var = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
    });
    let canon = canonize(&params).unwrap();
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let vols = random_volumes(&spec, &mut rng);
        let age = rng.gen_range(20.0..80.0);
        let a = forward(&params, &vols, age).unwrap();
        let b = forward(&canon, &vols, age).unwrap();
        worst = worst.max((a.logit - b.logit).abs());
    }
    assert!(worst <= 1e-5, "worst forward difference {}", worst);
    pass(4, "canonization", format!("max abs forward difference {:.2e} over 100 inputs", worst));
}

/// Criterion 5: integrated-gradients completeness at 256 steps on the
/// micro-net, relative residual <= 1e-3.
#[test]
fn criterion_05_integrated_gradients_completeness() {
    let spec = NetworkSpec::micro();
    let params = build(&spec, 65).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(65);
    let vols = random_volumes(&spec, &mut rng);
    let age = 51.0;
    let zeros: Vec<Tensor<f32>> = vols.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
    let fx = forward(&params, &vols, age).unwrap().logit as f64;
    let f0 = forward(&params, &zeros, age).unwrap().logit as f64;
    let maps = integrated_gradients(&params, &vols, age, Anchor::Logit, 256, None).unwrap();
    let total: f64 = maps.iter().map(|m| m.data().iter().map(|&v| v as f64).sum::<f64>()).sum();
    let rel = (total - (fx - f0)).abs() / (fx - f0).abs().max(1e-12);
    assert!(rel <= 1e-3, "completeness residual {}", rel);
    pass(5, "integrated-gradients completeness", format!("relative residual {:.2e} at 256 steps", rel));
}

/// Criterion 6: statistics oracles — AUC vs brute force (exact), Spearman vs
/// independent ranking (1e-12), permutation p on perfect correlation.
#[test]
fn criterion_06_statistics_oracles() {
    let mut rng = ChaCha20Rng::seed_from_u64(66);
    // AUC: exact match with O(P*N) pair enumeration on 1000 instances
    for _ in 0..1000 {
        let n = rng.gen_range(4..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
        if !labels.iter().any(|&l| l) {
            labels[0] = true;
        }
        if labels.iter().all(|&l| l) {
            labels[0] = false;
        }
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
        let fast = auc(&scores, &labels).unwrap();
        let mut num = 0.0;
        let mut pairs = 0u64;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            for j in 0..n {
                if labels[j] {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        assert_eq!(fast, num / pairs as f64, "auc mismatch");
    }
    // Spearman vs independent O(n^2) rank computation + Pearson
    let mut worst = 0.0f64;
    let mut done = 0usize;
    while done < 100 {
        let n = rng.gen_range(5..50);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let ranks = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let below = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (ranks(&x), ranks(&y));
        let pearson = |a: &[f64], b: &[f64]| -> Option<f64> {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            for (&p, &q) in a.iter().zip(b) {
                sxy += (p - ma) * (q - mb);
                sxx += (p - ma) * (p - ma);
                syy += (q - mb) * (q - mb);
            }
            if sxx == 0.0 || syy == 0.0 {
                None
            } else {
                Some(sxy / (sxx * syy).sqrt())
            }
        };
        match (pearson(&rx, &ry), spearman(&x, &y)) {
            (Some(oracle), Ok(got)) => {
                worst = worst.max((oracle - got).abs());
                done += 1;
            }
            (None, Err(_)) => {} // degenerate draw rejected by both
            (a, b) => panic!("oracle and implementation disagree on validity: {:?} vs {:?}", a, b.is_ok()),
        }
    }
    assert!(worst <= 1e-12, "worst spearman deviation {}", worst);
    // permutation test on perfectly correlated length-12 data
    let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let p = permutation_test(&x, &x, 20_000, 66).unwrap();
    assert!(p <= 0.001, "perfect-correlation p {}", p);
    pass(
        6,
        "statistics oracles",
        format!("auc exact on 1000, spearman dev {:.1e}, perm p {:.5}", worst, p),
    );
}

/// Criterion 7: seeded phantom end-to-end, 3-fold CV AUC >= 0.90 per fold.
#[test]
fn criterion_07_phantom_end_to_end() {
    let fx = trained();
    for f in &fx.cv.folds {
        assert!(
            f.best_auc >= 0.90,
            "fold {} best validation AUC {:.3} below 0.90",
            f.fold,
            f.best_auc
        );
    }
    pass(
        7,
        "phantom end-to-end",
        format!(
            "fold AUCs [{}] in {:.0}s training",
            fx.cv.folds.iter().map(|f| format!("{:.3}", f.best_auc)).collect::<Vec<_>>().join(", "),
            fx.train_seconds
        ),
    );
}

/// Criterion 8: localization — scenario 3 beats the equal-volume random
/// control and every other scenario on AUC drop at q=0.4; its tract overlap
/// is at least 3x the random control's; and its curve is monotone between
/// q=0.2 and q=0.6.
#[test]
fn criterion_08_localization() {
    let report = scenario_report();
    let s3 = report.scenarios.iter().find(|r| r.config.id == 3).expect("scenario 3 present");
    assert!(
        s3.drop_at_reference > report.random_control_drop,
        "scenario 3 drop {:.4} vs random control {:.4}",
        s3.drop_at_reference,
        report.random_control_drop
    );
    assert_eq!(report.ranked_by_drop[0], 3, "ranking {:?}", report.ranked_by_drop);
    let d3 = s3.mean_dice.expect("dice computed");
    let dr = report.random_control_dice.expect("random dice computed");
    assert!(d3 >= 3.0 * dr, "dice {:.4} vs 3x random {:.4}", d3, 3.0 * dr);
    let auc_at = |q: f64| {
        s3.curve.iter().find(|(qq, _)| (qq - q).abs() < 1e-9).map(|&(_, a)| a).expect("quantile")
    };
    assert!(auc_at(0.6) <= auc_at(0.2), "curve not monotone: {:?}", s3.curve);
    pass(
        8,
        "localization",
        format!(
            "scenario 3 drop {:.3} (random {:.3}), dice {:.3} vs {:.3}, ranking {:?}",
            s3.drop_at_reference,
            report.random_control_drop,
            d3,
            dr,
            report.ranked_by_drop
        ),
    );
}

/// Criterion 9: masked-mean correlations under scenario-3 masks beat
/// scenario-4 masks in |rho| per contrast, match the configured effect signs,
/// and are significant at p < 0.01.
#[test]
fn criterion_09_severity_correlations() {
    let report = scenario_report();
    let effects = PhantomConfig::default().effect_sizes;
    let s3 = report.scenarios.iter().find(|r| r.config.id == 3).expect("scenario 3");
    let s4 = report.scenarios.iter().find(|r| r.config.id == 4).expect("scenario 4");
    let mut detail = Vec::new();
    for (c, &effect) in effects.iter().enumerate() {
        let c3 = s3.correlations.iter().find(|x| x.contrast == c).expect("s3 correlation");
        let c4 = s4.correlations.iter().find(|x| x.contrast == c).expect("s4 correlation");
        assert!(
            c3.rho.abs() > c4.rho.abs(),
            "contrast {}: |rho3| {:.3} <= |rho4| {:.3}",
            c,
            c3.rho.abs(),
            c4.rho.abs()
        );
        assert_eq!(
            c3.rho.signum() as i32,
            effect.signum() as i32,
            "contrast {}: rho sign {} vs effect sign {}",
            c,
            c3.rho,
            effect
        );
        assert!(c3.p_value < 0.01, "contrast {}: p {:.4}", c, c3.p_value);
        detail.push(format!("c{}: rho3 {:.3} (p {:.5}) vs rho4 {:.3}", c, c3.rho, c3.p_value, c4.rho));
    }
    pass(9, "severity correlations", detail.join("; "));
}

/// Two-sided sign-flip permutation test on paired differences.
fn sign_flip_p(diff: &[f64], n_perm: usize, seed: u64) -> f64 {
    let obs = diff.iter().sum::<f64>().abs();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        let s: f64 = diff.iter().map(|&d| if rng.gen_bool(0.5) { d } else { -d }).sum();
        if s.abs() >= obs {
            exceed += 1;
        }
    }
    (1 + exceed) as f64 / (n_perm + 1) as f64
}

/// Criterion 10: on the zero-effect-size phantom, the trained model scores at
/// chance (AUC in [0.4, 0.6] over the full sample pool) and scenario-3
/// localization is statistically indistinguishable from the random control.
#[test]
fn criterion_10_null_control() {
    let pcfg = PhantomConfig::default().null_effects();
    let (dataset, truth) = generate(&pcfg).expect("null phantom generates");
    let cfg = TrainConfig { epochs: 4, ..acceptance_train_config() };
    let cv = train_cv(&dataset, &NetworkSpec::default(), &cfg).expect("null training completes");
    let best = cv.best_fold();
    // chance-level discrimination over the full pool
    let all: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for &i in &all {
        let s = &dataset.samples[i];
        scores.push(forward(&best.params, &s.volumes, s.age).unwrap().probability as f64);
        labels.push(s.label);
    }
    let pooled = auc(&scores, &labels).unwrap();
    assert!(
        (0.4..=0.6).contains(&pooled),
        "null phantom pooled AUC {:.3} outside [0.4, 0.6]",
        pooled
    );

    // scenario-3 masks vs equal-count random masks against the planted tract
    let canon = canonize(&best.params).unwrap();
    let opts = eval_opts();
    let sc3 = ScenarioConfig::table()[2];
    let mut pool = cv.plan.fold_indices(&dataset, best.fold);
    pool.extend(dataset.test_indices());
    pool.sort_unstable();
    pool.dedup();
    let mut diffs = Vec::new();
    for &i in &pool {
        let s = &dataset.samples[i];
        let maps =
            relvox_core::eval::scenario_sample_maps(&canon, &s.volumes, s.age, &sc3, &opts).unwrap();
        let cm = relvox_core::attribution::combined_map(&maps.per_contrast, &s.volumes).unwrap();
        let mask = quantile_mask(&cm, &s.brain_mask, 0.4, 3).unwrap();
        if mask.voxel_count == 0 {
            continue;
        }
        let mut rng = relvox_core::util::rng_for(2024, &[i as u64, 0x0b5]);
        let rand = random_mask(&s.brain_mask, mask.voxel_count, 3, &mut rng);
        let tract = &truth.subjects[&s.subject_id].tract;
        diffs.push(dice(&mask.mask, tract).unwrap() - dice(&rand.mask, tract).unwrap());
    }
    assert!(diffs.len() >= 20, "too few usable null samples: {}", diffs.len());
    let p = sign_flip_p(&diffs, 2000, 1010);
    assert!(
        p > 0.01,
        "null-phantom dice differs from random control (p = {:.4}, mean diff {:.4})",
        p,
        diffs.iter().sum::<f64>() / diffs.len() as f64
    );
    pass(
        10,
        "null control",
        format!("pooled AUC {:.3}, dice-vs-random sign-flip p {:.3} over {} samples", pooled, p, diffs.len()),
    );
}

//! Cross-validated training loop.

use super::{augment, sample_weight, stratified_kfold, AdamConfig, AdamState};
use super::{Dataset, FoldPlan, TrainConfig, WeightedSampler};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::net::{build, forward, forward_tape, BnMode, NetworkParams, NetworkSpec};
use crate::stats::auc;
use crate::train::adamw_step;
use crate::util::{parallel_map, rng_for};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub val_sens: f64,
    pub val_spec: f64,
}

#[derive(Clone, Debug)]
pub struct FoldMetrics {
    pub fold: usize,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_auc: f64,
    /// Mean attention weights per contrast over correctly classified
    /// validation samples at the selected epoch.
    pub mean_attention: Vec<f64>,
    /// Parameters of the selected (best validation AUC) epoch.
    pub params: NetworkParams<f32>,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldMetrics>,
}

impl CvResult {
    pub fn mean_auc(&self) -> f64 {
        self.folds.iter().map(|f| f.best_auc).sum::<f64>() / self.folds.len() as f64
    }

    /// Fold with the highest validation AUC.
    pub fn best_fold(&self) -> &FoldMetrics {
        self.folds
            .iter()
            .max_by(|a, b| a.best_auc.partial_cmp(&b.best_auc).expect("finite AUC"))
            .expect("at least one fold")
    }

    /// CSV rows: fold,epoch,loss,auc,acc,sens,spec.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("fold,epoch,loss,auc,acc,sens,spec\n");
        for f in &self.folds {
            for r in &f.rows {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    r.fold, r.epoch, r.train_loss, r.val_auc, r.val_acc, r.val_sens, r.val_spec
                ));
            }
        }
        out
    }

    /// JSON summary including per-fold mean attention weights.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mean_cv_auc": self.mean_auc(),
            "folds": self.folds.iter().map(|f| serde_json::json!({
                "fold": f.fold,
                "best_epoch": f.best_epoch,
                "best_auc": f.best_auc,
                "mean_attention": f.mean_attention,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Accuracy, sensitivity, specificity at probability threshold 0.5.
pub fn threshold_metrics(scores: &[f64], labels: &[bool]) -> (f64, f64, f64) {
    let (mut tp, mut tn, mut fp, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= 0.5, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
        }
    }
    let acc = (tp + tn) as f64 / scores.len() as f64;
    let sens = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
    let spec = if tn + fp > 0 { tn as f64 / (tn + fp) as f64 } else { 0.0 };
    (acc, sens, spec)
}

fn evaluate(
    params: &NetworkParams<f32>,
    dataset: &Dataset,
    indices: &[usize],
    threads: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let outs = parallel_map(indices.to_vec(), threads, |i| {
        let s = &dataset.samples[i];
        forward(params, &s.volumes, s.age).map(|o| o.probability as f64)
    });
    let mut scores = Vec::with_capacity(indices.len());
    for o in outs {
        scores.push(o?);
    }
    let labels: Vec<bool> = indices.iter().map(|&i| dataset.samples[i].label).collect();
    Ok((scores, labels))
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Vec<f32>>,
    bn_stats: Vec<(Vec<f32>, Vec<f32>)>,
}

fn backward_one(
    params: &NetworkParams<f32>,
    dataset: &Dataset,
    idx: usize,
    aug_seed: u64,
    cfg: &TrainConfig,
) -> Result<SampleGrad> {
    let sample = &dataset.samples[idx];
    let mut rng = rng_for(aug_seed, &[]);
    let aug = augment(sample, &cfg.augment, &mut rng);
    let mut tape = Tape::<f32>::new();
    let refs = forward_tape(&mut tape, params, &aug.volumes, aug.age, BnMode::Train, true)?;
    let weight = sample_weight(aug.severity)?;
    let loss = tape.bce_logit(refs.logit, aug.label, weight)?;
    let loss_v = tape.value(loss).data()[0] as f64;
    if !loss_v.is_finite() {
        return Err(Error::numeric("train", format!("non-finite loss on sample {}", idx)));
    }
    tape.backward(loss)?;
    let grads: Vec<Vec<f32>> = refs
        .params
        .iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).len()],
        })
        .collect();
    let bn_stats: Vec<(Vec<f32>, Vec<f32>)> = refs
        .bn_nodes
        .iter()
        .map(|&id| {
            let (m, v) = tape.bn_batch_stats(id).expect("train-mode bn node");
            (m.to_vec(), v.to_vec())
        })
        .collect();
    Ok(SampleGrad { loss: loss_v, grads, bn_stats })
}

fn train_fold(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    fold: usize,
) -> Result<FoldMetrics> {
    let val_idx = plan.fold_indices(dataset, fold);
    let mut train_idx = Vec::new();
    for f in 0..plan.folds.len() {
        if f != fold {
            train_idx.extend(plan.fold_indices(dataset, f));
        }
    }
    if val_idx.is_empty() || train_idx.is_empty() {
        return Err(Error::Data(format!("fold {}: empty train or validation split", fold)));
    }
    let mut params = build(spec, crate::util::derive_seed(cfg.seed, &[fold as u64, 0x1217]))?;
    let mut adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = AdamState::default();
    let labels: Vec<bool> = train_idx.iter().map(|&i| dataset.samples[i].label).collect();
    let sampler = WeightedSampler::class_balanced(&labels)?;

    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let record = |epoch: usize,
                      loss: f64,
                      params: &NetworkParams<f32>,
                      rows: &mut Vec<EpochRow>,
                      best: &mut (usize, f64, NetworkParams<f32>)|
     -> Result<()> {
        let (scores, labels) = evaluate(params, dataset, &val_idx, cfg.threads)?;
        let val_auc = auc(&scores, &labels)?;
        let (acc, sens, spec_) = threshold_metrics(&scores, &labels);
        rows.push(EpochRow {
            fold,
            epoch,
            train_loss: loss,
            val_auc,
            val_acc: acc,
            val_sens: sens,
            val_spec: spec_,
        });
        if val_auc > best.1 {
            *best = (epoch, val_auc, params.clone());
        }
        Ok(())
    };

    let mut best = (0usize, f64::NEG_INFINITY, params.clone());
    record(0, f64::NAN, &params, &mut rows, &mut best)?;

    for epoch in 1..=cfg.epochs {
        adam.learning_rate = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1);
        let mut rng = rng_for(cfg.seed, &[fold as u64, epoch as u64, 0x5a3b]);
        let draws: Vec<usize> = (0..train_idx.len()).map(|_| train_idx[sampler.draw(&mut rng)]).collect();
        let mut epoch_loss = 0.0f64;
        for (batch_no, batch) in draws.chunks(cfg.batch_size).enumerate() {
            let jobs: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
            let results = parallel_map(jobs, cfg.threads, |(pos, idx)| {
                let aug_seed = crate::util::derive_seed(
                    cfg.seed,
                    &[fold as u64, epoch as u64, batch_no as u64, pos as u64, 0xa06],
                );
                backward_one(&params, dataset, idx, aug_seed, cfg)
            });
            let mut merged: Option<Vec<Vec<f32>>> = None;
            let mut bn_acc: Option<Vec<(Vec<f32>, Vec<f32>)>> = None;
            let mut n = 0f32;
            for r in results {
                let r = r.map_err(|e| {
                    Error::numeric("train", format!("fold {} epoch {} aborted: {}", fold, epoch, e))
                })?;
                epoch_loss += r.loss;
                n += 1.0;
                match &mut merged {
                    None => merged = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, &y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
                match &mut bn_acc {
                    None => bn_acc = Some(r.bn_stats),
                    Some(acc) => {
                        for (a, s) in acc.iter_mut().zip(&r.bn_stats) {
                            for (x, &y) in a.0.iter_mut().zip(&s.0) {
                                *x += y;
                            }
                            for (x, &y) in a.1.iter_mut().zip(&s.1) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = merged.expect("non-empty batch");
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v /= n;
                }
            }
            adamw_step(&mut params, &grads, &mut state, &adam)?;
            // running statistics: exponential update toward the batch average
            if let Some(stats) = bn_acc {
                let momentum = 0.1f32;
                let mut k = 0;
                params.for_each_bn_mut(&mut |bn| {
                    let (ms, vs) = &stats[k];
                    for (r, &m) in bn.running_mean.iter_mut().zip(ms) {
                        *r = (1.0 - momentum) * *r + momentum * (m / n);
                    }
                    for (r, &v) in bn.running_var.iter_mut().zip(vs) {
                        *r = (1.0 - momentum) * *r + momentum * (v / n);
                    }
                    k += 1;
                });
            }
        }
        record(epoch, epoch_loss / draws.len() as f64, &params, &mut rows, &mut best)?;
    }
    let (best_epoch, best_auc, best_params) = best;

    // mean attention weights over correctly classified validation samples
    let mut sums = vec![0.0f64; spec.paths];
    let mut count = 0usize;
    for &i in &val_idx {
        let s = &dataset.samples[i];
        let out = forward(&best_params, &s.volumes, s.age)?;
        if (out.probability >= 0.5) == s.label {
            for (a, &w) in sums.iter_mut().zip(&out.trace.attention.weights) {
                *a += w as f64;
            }
            count += 1;
        }
    }
    let mean_attention = if count > 0 {
        sums.into_iter().map(|s| s / count as f64).collect()
    } else {
        vec![f64::NAN; spec.paths]
    };

    Ok(FoldMetrics { fold, rows, best_epoch, best_auc, mean_attention, params: best_params })
}

/// Stratified k-fold training: per fold, train on the other folds with
/// class-balanced sampling and severity-weighted BCE, select the epoch with
/// the best validation AUC, and report metrics plus mean attention weights.
pub fn train_cv(dataset: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<CvResult> {
    cfg.validate()?;
    spec.validate()?;
    let plan = stratified_kfold(dataset, cfg.folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        folds.push(train_fold(dataset, spec, cfg, &plan, fold)?);
    }
    Ok(CvResult { plan, folds })
}

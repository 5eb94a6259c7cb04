//! Training: severity-weighted BCE, class-balanced sampling, augmentation,
//! AdamW, stratified k-fold cross-validation, and AUC-based evaluation.

mod augment;
mod cv;
mod optim;

pub use augment::{augment, AugmentConfig};
pub use cv::{train_cv, CvResult, EpochRow, FoldMetrics};
pub use optim::{adamw_step, adamw_update, AdamConfig, AdamState};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One subject acquisition: per-contrast volumes, brain mask, covariates.
#[derive(Clone, Debug)]
pub struct Sample {
    pub subject_id: u32,
    /// 0 = baseline, 1 = follow-up.
    pub timepoint: u8,
    /// One [1, D, H, W] volume per contrast, values in [0, 1].
    pub volumes: Vec<Tensor<f32>>,
    /// Brain voxels, flat over (D, H, W).
    pub brain_mask: Vec<bool>,
    pub age: f32,
    /// Severity score in [0, 10].
    pub severity: f32,
    /// Severe disability: severity >= 5.
    pub label: bool,
}

impl Sample {
    pub fn new(
        subject_id: u32,
        timepoint: u8,
        volumes: Vec<Tensor<f32>>,
        brain_mask: Vec<bool>,
        age: f32,
        severity: f32,
    ) -> Result<Self> {
        if !(0.0..=10.0).contains(&severity) {
            return Err(Error::Data(format!("severity {} outside [0, 10]", severity)));
        }
        for v in &volumes {
            if v.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Data("volume voxels must lie in [0, 1]".into()));
            }
        }
        if let Some(v) = volumes.first() {
            let n: usize = v.shape()[1..].iter().product();
            if brain_mask.len() != n {
                return Err(Error::shape(
                    "sample",
                    format!("mask length {} vs spatial size {}", brain_mask.len(), n),
                ));
            }
        }
        Ok(Sample {
            subject_id,
            timepoint,
            volumes,
            brain_mask,
            age,
            severity,
            label: severity >= 5.0,
        })
    }
}

/// A full dataset plus the held-out test subject ids.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub test_subjects: Vec<u32>,
}

impl Dataset {
    pub fn is_test_subject(&self, id: u32) -> bool {
        self.test_subjects.binary_search(&id).is_ok()
    }

    /// Sample indices belonging to the cross-validation pool.
    pub fn cv_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| !self.is_test_subject(self.samples[i].subject_id))
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.is_test_subject(self.samples[i].subject_id))
            .collect()
    }
}

/// Subject-level cross-validation plan: k folds plus the test split. Both
/// timepoints of one subject always share a fold and a split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<u32>>,
    pub test: Vec<u32>,
}

impl FoldPlan {
    /// Sample indices of one fold.
    pub fn fold_indices(&self, dataset: &Dataset, fold: usize) -> Vec<usize> {
        let ids = &self.folds[fold];
        (0..dataset.samples.len())
            .filter(|&i| ids.contains(&dataset.samples[i].subject_id))
            .collect()
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    /// Per-epoch multiplicative learning-rate decay; 1.0 keeps it constant.
    pub lr_decay: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Worker threads for batch fan-out.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            lr_decay: 1.0,
            weight_decay: 1e-2,
            batch_size: 16,
            epochs: 12,
            folds: 3,
            augment: AugmentConfig::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("train: learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::Config("train: lr_decay must lie in (0, 1]".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train: weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.folds < 2 {
            return Err(Error::Config("train: need batch_size >= 1 and folds >= 2".into()));
        }
        Ok(())
    }
}

/// Loss weight by closeness of the severity score to the decision boundary:
/// 2 - |severity - 5| / 5. Maximal (2) at severity 5, 1 at both endpoints.
pub fn sample_weight(severity: f32) -> Result<f32> {
    if !(0.0..=10.0).contains(&severity) {
        return Err(Error::Data(format!("sample_weight: severity {} outside [0, 10]", severity)));
    }
    Ok(2.0 - (severity - 5.0).abs() / 5.0)
}

/// Weighted binary cross-entropy. Probabilities exactly at 0 or 1 are clamped
/// to [1e-7, 1 - 1e-7]; the second return value flags that this happened.
pub fn weighted_bce(probability: f32, label: bool, weight: f32) -> (f32, bool) {
    let clamped = !(1e-7..=1.0 - 1e-7).contains(&probability);
    let p = probability.clamp(1e-7, 1.0 - 1e-7);
    let loss = if label { -p.ln() } else { -(1.0 - p).ln() };
    (weight * loss, clamped)
}

/// Stratified k-fold over the dataset's cross-validation subjects. Subjects
/// are stratified by their baseline label; per-fold class proportions stay
/// within one subject of the global proportions.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    use rand::seq::SliceRandom;
    if k < 2 {
        return Err(Error::Config("stratified_kfold: need k >= 2".into()));
    }
    // subject -> baseline label (first timepoint seen)
    let mut subject_label: BTreeMap<u32, bool> = BTreeMap::new();
    for s in &dataset.samples {
        if dataset.is_test_subject(s.subject_id) {
            continue;
        }
        subject_label
            .entry(s.subject_id)
            .and_modify(|l| {
                if s.timepoint == 0 {
                    *l = s.label;
                }
            })
            .or_insert(s.label);
    }
    let mut severe: Vec<u32> = Vec::new();
    let mut mild: Vec<u32> = Vec::new();
    for (&id, &l) in &subject_label {
        if l {
            severe.push(id);
        } else {
            mild.push(id);
        }
    }
    if severe.len() < k || mild.len() < k {
        return Err(Error::Data(format!(
            "stratified_kfold: need >= {} subjects per class, have {} severe / {} mild",
            k,
            severe.len(),
            mild.len()
        )));
    }
    let mut rng = crate::util::rng_for(seed, &[0xf01d]);
    severe.shuffle(&mut rng);
    mild.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in severe.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for (i, id) in mild.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds, test: dataset.test_subjects.clone() })
}

/// Draws sample indices with class-balanced probabilities: each class carries
/// total probability 1/2 regardless of its size.
pub struct WeightedSampler {
    cumulative: Vec<f64>,
}

impl WeightedSampler {
    pub fn class_balanced(labels: &[bool]) -> Result<Self> {
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Data("weighted sampler: both classes must be present".into()));
        }
        let wp = 0.5 / pos as f64;
        let wn = 0.5 / neg as f64;
        let mut cumulative = Vec::with_capacity(labels.len());
        let mut acc = 0.0;
        for &l in labels {
            acc += if l { wp } else { wn };
            cumulative.push(acc);
        }
        Ok(WeightedSampler { cumulative })
    }

    pub fn draw(&self, rng: &mut impl rand::Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u: f64 = rng.gen_range(0.0..total);
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sample_weight_formula() {
        assert_eq!(sample_weight(5.0).unwrap(), 2.0);
        assert_eq!(sample_weight(0.0).unwrap(), 1.0);
        assert_eq!(sample_weight(10.0).unwrap(), 1.0);
        assert_eq!(sample_weight(7.5).unwrap(), 1.5);
        assert!(sample_weight(-0.1).is_err());
        assert!(sample_weight(10.1).is_err());
        // symmetric about 5 and maximal there
        for d in [0.5f32, 1.0, 3.3] {
            assert!((sample_weight(5.0 - d).unwrap() - sample_weight(5.0 + d).unwrap()).abs() < 1e-6);
            assert!(sample_weight(5.0 + d).unwrap() < 2.0);
        }
    }

    #[test]
    fn bce_values() {
        let (l, c) = weighted_bce(0.5, true, 1.0);
        assert!((l - 0.6931472).abs() < 1e-6);
        assert!(!c);
        let (l, _) = weighted_bce(0.5, false, 1.0);
        assert!((l - 0.6931472).abs() < 1e-6);
        let (l, _) = weighted_bce(0.9, true, 2.0);
        assert!((l - 2.0 * -(0.9f32.ln())).abs() < 1e-6);
        assert!((l - 0.21072).abs() < 1e-4);
        // p -> y drives the loss to 0
        let (l, _) = weighted_bce(0.9999, true, 1.0);
        assert!(l < 1e-3);
        // exact 0/1 clamps and flags
        let (l, c) = weighted_bce(1.0, false, 1.0);
        assert!(c);
        assert!(l.is_finite());
    }

    fn toy_dataset(severe: usize, mild: usize, follow_up: &[u32]) -> Dataset {
        let mut samples = Vec::new();
        let mut id = 0u32;
        for i in 0..severe + mild {
            let sev = if i < severe { 7.0 } else { 2.0 };
            samples.push(
                Sample::new(
                    id,
                    0,
                    vec![Tensor::full(vec![1, 2, 2, 2], 0.5)],
                    vec![true; 8],
                    50.0,
                    sev,
                )
                .unwrap(),
            );
            if follow_up.contains(&id) {
                samples.push(
                    Sample::new(
                        id,
                        1,
                        vec![Tensor::full(vec![1, 2, 2, 2], 0.5)],
                        vec![true; 8],
                        52.0,
                        sev,
                    )
                    .unwrap(),
                );
            }
            id += 1;
        }
        Dataset { samples, test_subjects: vec![] }
    }

    #[test]
    fn kfold_exact_divisibility_and_pairing() {
        let ds = toy_dataset(12, 24, &[3, 20]);
        let plan = stratified_kfold(&ds, 3, 1).unwrap();
        // each fold: 4 severe, 8 mild
        for fold in &plan.folds {
            let severe = fold.iter().filter(|&&id| (id as usize) < 12).count();
            assert_eq!(severe, 4);
            assert_eq!(fold.len(), 12);
        }
        // partition: union == all subjects, pairwise disjoint
        let mut all: Vec<u32> = plan.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        let expect: Vec<u32> = (0..36).collect();
        assert_eq!(all, expect);
        // paired timepoints share a fold by construction: subject ids drive folds
        for id in [3u32, 20] {
            let hits: Vec<usize> =
                (0..3).filter(|&f| plan.folds[f].contains(&id)).collect();
            assert_eq!(hits.len(), 1);
        }
    }

    #[test]
    fn kfold_rejects_small_class() {
        let ds = toy_dataset(2, 24, &[]);
        assert!(stratified_kfold(&ds, 3, 1).is_err());
    }

    #[test]
    fn sampler_balances_classes() {
        // 10 positive, 90 negative; expect ~50/50 over many draws
        let labels: Vec<bool> = (0..100).map(|i| i < 10).collect();
        let sampler = WeightedSampler::class_balanced(&labels).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let n = 100_000;
        let mut pos = 0usize;
        for _ in 0..n {
            if labels[sampler.draw(&mut rng)] {
                pos += 1;
            }
        }
        let frac = pos as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "positive fraction {}", frac);
    }

    #[test]
    fn sample_rejects_out_of_range() {
        assert!(Sample::new(0, 0, vec![Tensor::full(vec![1, 2, 2, 2], 1.5)], vec![true; 8], 50.0, 3.0)
            .is_err());
        assert!(Sample::new(0, 0, vec![], vec![], 50.0, 11.0).is_err());
        let s = Sample::new(0, 0, vec![Tensor::full(vec![1, 2, 2, 2], 0.5)], vec![true; 8], 50.0, 5.0)
            .unwrap();
        assert!(s.label);
    }
}

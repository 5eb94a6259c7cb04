//! Scenario orchestration: map generation per method, inversion curves,
//! correlations with severity, ground-truth overlap, and the ranked report.

use super::{
    invert_voxels, masked_mean, quantile_mask, random_mask, AnchorKind, MapMode, Method,
    QuantileMask, ScenarioConfig,
};
use crate::attribution::{
    attention_diagonal_gradients, canonize, combined_map, integrated_gradients,
    integrated_gradients_attention, lrp_backward, saliency, Anchor, RuleConfig, SplitVariant,
};
use crate::error::{Error, Result};
use crate::net::{forward, NetworkParams};
use crate::phantom::GroundTruth;
use crate::stats::{auc, dice, permutation_test, spearman};
use crate::tensor::Tensor;
use crate::train::Dataset;
use crate::util::{parallel_map, rng_for};
use serde::Serialize;

/// Options for a scenario run.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Quantiles for the inversion curves.
    pub quantiles: Vec<f64>,
    /// Quantile at which drops, correlations and overlap are compared.
    pub reference_quantile: f64,
    /// Steps for the integrated-gradients baselines.
    pub ig_steps: usize,
    /// Base rule configuration; the split variant is set per scenario.
    pub rules: RuleConfig,
    /// Permutations for the correlation test.
    pub permutations: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            quantiles: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            reference_quantile: 0.4,
            ig_steps: 64,
            rules: RuleConfig::default(),
            permutations: 20_000,
            seed: 0,
            threads: 1,
        }
    }
}

/// Attribution maps for one sample under one (anchor, method) pair.
#[derive(Clone, Debug)]
pub struct SampleMaps {
    pub per_contrast: Vec<Tensor<f32>>,
}

/// Maps for every pool sample of one scenario, aligned with the pool order.
pub struct ScenarioMaps {
    pub scenario: ScenarioConfig,
    pub maps: Vec<SampleMaps>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ContrastCorrelation {
    pub contrast: usize,
    pub rho: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    /// (quantile, pooled AUC after inversion).
    pub curve: Vec<(f64, f64)>,
    pub auc_at_reference: f64,
    pub drop_at_reference: f64,
    /// Masked-mean correlation with severity per contrast at the reference
    /// quantile; empty masks yield no entry.
    pub correlations: Vec<ContrastCorrelation>,
    /// Mean Dice between reference-quantile masks and the planted tract.
    pub mean_dice: Option<f64>,
    /// Mid-axial slice of the first pool sample's reference mask (row-major,
    /// 0/255), for report montages.
    #[serde(skip)]
    pub example_slice: (usize, usize, Vec<u8>),
}

#[derive(Serialize)]
pub struct ScenarioReport {
    pub baseline_auc: f64,
    pub scenarios: Vec<ScenarioResult>,
    /// Scenario ids ranked by AUC drop at the reference quantile, largest first.
    pub ranked_by_drop: Vec<u8>,
    /// Equal-volume random-mask control matched to the top-ranked scenario.
    pub random_control_auc: f64,
    pub random_control_drop: f64,
    pub random_control_dice: Option<f64>,
}

/// Compute per-contrast attribution maps for one sample under a scenario's
/// (anchor, method). LRP scenarios use the canonized parameters; gradient
/// baselines run on the same canonized network (forward-equivalent).
pub fn scenario_sample_maps(
    canon: &NetworkParams<f32>,
    volumes: &[Tensor<f32>],
    age: f32,
    scenario: &ScenarioConfig,
    opts: &EvalOptions,
) -> Result<SampleMaps> {
    scenario.validate()?;
    let per_contrast = match scenario.method {
        Method::LrpProposed | Method::LrpAll => {
            let mut rules = opts.rules;
            rules.variant = if scenario.method == Method::LrpProposed {
                SplitVariant::Proposed
            } else {
                SplitVariant::LrpAll
            };
            let out = forward(canon, volumes, age)?;
            match scenario.anchor {
                AnchorKind::Logit => {
                    let bundle = lrp_backward(&out.trace, canon, Anchor::Logit, &rules)?;
                    bundle.maps
                }
                AnchorKind::AttentionWeight => {
                    let mut maps = Vec::with_capacity(volumes.len());
                    for l in 0..volumes.len() {
                        let bundle =
                            lrp_backward(&out.trace, canon, Anchor::AttentionWeight(l), &rules)?;
                        maps.push(bundle.maps[l].clone());
                    }
                    maps
                }
            }
        }
        Method::Saliency => match scenario.anchor {
            AnchorKind::Logit => saliency(canon, volumes, age, Anchor::Logit)?,
            AnchorKind::AttentionWeight => attention_diagonal_gradients(canon, volumes, age)?
                .into_iter()
                .map(|g| g.map(|v| v.abs()))
                .collect(),
        },
        Method::IntegratedGradients => match scenario.anchor {
            AnchorKind::Logit => {
                integrated_gradients(canon, volumes, age, Anchor::Logit, opts.ig_steps, None)?
            }
            AnchorKind::AttentionWeight => {
                integrated_gradients_attention(canon, volumes, age, opts.ig_steps, None)?
            }
        },
    };
    Ok(SampleMaps { per_contrast })
}

/// Masks used to invert one sample under a scenario at quantile q.
fn masks_for_sample(
    scenario: &ScenarioConfig,
    maps: &SampleMaps,
    volumes: &[Tensor<f32>],
    brain: &[bool],
    q: f64,
) -> Result<Vec<QuantileMask>> {
    match scenario.map_mode {
        MapMode::Individual => maps
            .per_contrast
            .iter()
            .map(|m| quantile_mask(m, brain, q, scenario.id))
            .collect(),
        MapMode::Combined => {
            let cm = combined_map(&maps.per_contrast, volumes)?;
            Ok(vec![quantile_mask(&cm, brain, q, scenario.id)?])
        }
    }
}

fn pooled_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    auc(scores, labels)
}

/// Inversion curve for one scenario: per quantile, invert every pool sample
/// under its own mask, re-score with the frozen model, and report pooled AUC.
pub fn inversion_curve(
    dataset: &Dataset,
    pool: &[usize],
    canon: &NetworkParams<f32>,
    scenario: &ScenarioConfig,
    maps: &ScenarioMaps,
    quantiles: &[f64],
    baseline_scores: &[f64],
    threads: usize,
) -> Result<Vec<(f64, f64)>> {
    if maps.maps.len() != pool.len() {
        return Err(Error::Data(format!(
            "scenario {}: {} map sets for {} pool samples",
            scenario.id,
            maps.maps.len(),
            pool.len()
        )));
    }
    let labels: Vec<bool> = pool.iter().map(|&i| dataset.samples[i].label).collect();
    let mut curve = Vec::with_capacity(quantiles.len());
    for &q in quantiles {
        let jobs: Vec<usize> = (0..pool.len()).collect();
        let scores = parallel_map(jobs, threads, |k| -> Result<f64> {
            let s = &dataset.samples[pool[k]];
            let masks = masks_for_sample(scenario, &maps.maps[k], &s.volumes, &s.brain_mask, q)?;
            if masks.iter().all(|m| m.voxel_count == 0) {
                return Ok(baseline_scores[k]);
            }
            let mask_refs: Vec<&QuantileMask> = masks.iter().collect();
            let inverted = invert_voxels(s, &mask_refs)?;
            Ok(forward(canon, &inverted.volumes, inverted.age)?.probability as f64)
        });
        let mut vals = Vec::with_capacity(scores.len());
        for s in scores {
            vals.push(s?);
        }
        curve.push((q, pooled_auc(&vals, &labels)?));
    }
    Ok(curve)
}

fn mid_axial_slice(mask: &[bool], extents: &[usize]) -> (usize, usize, Vec<u8>) {
    let (d, h, w) = (extents[0], extents[1], extents[2]);
    let mid = d / 2;
    let mut px = Vec::with_capacity(h * w);
    for hi in 0..h {
        for wi in 0..w {
            px.push(if mask[(mid * h + hi) * w + wi] { 255 } else { 0 });
        }
    }
    (w, h, px)
}

/// Run the full scenario grid: inversion curves, masked-mean correlations
/// with severity, ground-truth overlap, the equal-volume random control, and
/// the ranking by AUC drop.
pub fn run_scenarios(
    dataset: &Dataset,
    pool: &[usize],
    truth: Option<&GroundTruth>,
    params: &NetworkParams<f32>,
    scenarios: &[ScenarioConfig],
    opts: &EvalOptions,
) -> Result<ScenarioReport> {
    if pool.is_empty() {
        return Err(Error::Data("run_scenarios: empty evaluation pool".into()));
    }
    let canon = if params.canonized { params.clone() } else { canonize(params)? };
    let labels: Vec<bool> = pool.iter().map(|&i| dataset.samples[i].label).collect();

    // frozen-model baseline scores, shared by every scenario
    let baseline_scores: Vec<f64> = {
        let jobs: Vec<usize> = pool.to_vec();
        let outs = parallel_map(jobs, opts.threads, |i| {
            let s = &dataset.samples[i];
            forward(&canon, &s.volumes, s.age).map(|o| o.probability as f64)
        });
        let mut v = Vec::with_capacity(outs.len());
        for o in outs {
            v.push(o?);
        }
        v
    };
    let baseline_auc = pooled_auc(&baseline_scores, &labels)?;

    // map computation, shared across scenarios with the same (anchor, method)
    let mut map_cache: Vec<((AnchorKind, Method), Vec<SampleMaps>)> = Vec::new();
    for sc in scenarios {
        let key = (sc.anchor, sc.method);
        if map_cache.iter().any(|(k, _)| *k == key) {
            continue;
        }
        let jobs: Vec<usize> = pool.to_vec();
        let sc_copy = *sc;
        let maps = parallel_map(jobs, opts.threads, |i| {
            let s = &dataset.samples[i];
            scenario_sample_maps(&canon, &s.volumes, s.age, &sc_copy, opts)
        });
        let mut out = Vec::with_capacity(maps.len());
        for m in maps {
            out.push(m?);
        }
        map_cache.push((key, out));
    }
    let maps_for = |sc: &ScenarioConfig| -> &Vec<SampleMaps> {
        &map_cache.iter().find(|(k, _)| *k == (sc.anchor, sc.method)).expect("cached above").1
    };

    let mut quantiles = opts.quantiles.clone();
    if !quantiles.iter().any(|&q| (q - opts.reference_quantile).abs() < 1e-12) {
        quantiles.push(opts.reference_quantile);
    }
    quantiles.sort_by(|a, b| a.partial_cmp(b).expect("finite quantiles"));

    let mut results = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        sc.validate()?;
        let smaps = ScenarioMaps { scenario: *sc, maps: maps_for(sc).clone() };
        let curve = inversion_curve(
            dataset,
            pool,
            &canon,
            sc,
            &smaps,
            &quantiles,
            &baseline_scores,
            opts.threads,
        )?;
        let auc_at_reference = curve
            .iter()
            .find(|(q, _)| (q - opts.reference_quantile).abs() < 1e-12)
            .map(|&(_, a)| a)
            .expect("reference quantile included above");

        // reference-quantile masks for correlations, overlap and the montage
        let mut ref_masks: Vec<Vec<QuantileMask>> = Vec::with_capacity(pool.len());
        for (k, &i) in pool.iter().enumerate() {
            let s = &dataset.samples[i];
            ref_masks.push(masks_for_sample(
                sc,
                &smaps.maps[k],
                &s.volumes,
                &s.brain_mask,
                opts.reference_quantile,
            )?);
        }

        // masked means on the unperturbed volumes, correlated with severity
        let contrasts = dataset.samples[pool[0]].volumes.len();
        let mut correlations = Vec::new();
        for c in 0..contrasts {
            let mut means = Vec::new();
            let mut sevs = Vec::new();
            for (k, &i) in pool.iter().enumerate() {
                let s = &dataset.samples[i];
                let mask = if ref_masks[k].len() == 1 { &ref_masks[k][0] } else { &ref_masks[k][c] };
                if mask.voxel_count == 0 {
                    continue;
                }
                means.push(masked_mean(s, mask)?[c]);
                sevs.push(s.severity as f64);
            }
            if means.len() >= 3 {
                if let Ok(rho) = spearman(&means, &sevs) {
                    let p = permutation_test(
                        &means,
                        &sevs,
                        opts.permutations,
                        crate::util::derive_seed(opts.seed, &[sc.id as u64, c as u64, 0x9e21]),
                    )?;
                    correlations.push(ContrastCorrelation { contrast: c, rho, p_value: p });
                }
            }
        }

        // overlap with the planted tract
        let mean_dice = match truth {
            None => None,
            Some(gt) => {
                let mut vals = Vec::new();
                for (k, &i) in pool.iter().enumerate() {
                    let s = &dataset.samples[i];
                    if let Some(t) = gt.subjects.get(&s.subject_id) {
                        for m in &ref_masks[k] {
                            vals.push(dice(&m.mask, &t.tract)?);
                        }
                    }
                }
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            }
        };

        let extents = {
            let s = dataset.samples[pool[0]].volumes[0].shape();
            [s[1], s[2], s[3]]
        };
        let example_slice = mid_axial_slice(&ref_masks[0][0].mask, &extents);
        results.push(ScenarioResult {
            config: *sc,
            curve,
            auc_at_reference,
            drop_at_reference: baseline_auc - auc_at_reference,
            correlations,
            mean_dice,
            example_slice,
        });
    }

    let mut ranked: Vec<usize> = (0..results.len()).collect();
    ranked.sort_by(|&a, &b| {
        results[b]
            .drop_at_reference
            .partial_cmp(&results[a].drop_at_reference)
            .expect("finite drops")
    });
    let ranked_by_drop: Vec<u8> = ranked.iter().map(|&i| results[i].config.id).collect();

    // equal-volume random control, matched to the top-ranked scenario's masks
    let top = &results[ranked[0]];
    let top_cfg = top.config;
    let top_maps = maps_for(&top_cfg);
    let mut control_scores = Vec::with_capacity(pool.len());
    let mut control_dice = Vec::new();
    for (k, &i) in pool.iter().enumerate() {
        let s = &dataset.samples[i];
        let masks = masks_for_sample(
            &top_cfg,
            &top_maps[k],
            &s.volumes,
            &s.brain_mask,
            opts.reference_quantile,
        )?;
        let mut rng = rng_for(opts.seed, &[i as u64, 0xc0de]);
        let rand_masks: Vec<QuantileMask> = masks
            .iter()
            .map(|m| random_mask(&s.brain_mask, m.voxel_count, top_cfg.id, &mut rng))
            .collect();
        let mask_refs: Vec<&QuantileMask> = rand_masks.iter().collect();
        let inverted = invert_voxels(s, &mask_refs)?;
        control_scores.push(forward(&canon, &inverted.volumes, inverted.age)?.probability as f64);
        if let Some(gt) = truth {
            if let Some(t) = gt.subjects.get(&s.subject_id) {
                for m in &rand_masks {
                    control_dice.push(dice(&m.mask, &t.tract)?);
                }
            }
        }
    }
    let random_control_auc = pooled_auc(&control_scores, &labels)?;
    let random_control_dice = if control_dice.is_empty() {
        None
    } else {
        Some(control_dice.iter().sum::<f64>() / control_dice.len() as f64)
    };

    Ok(ScenarioReport {
        baseline_auc,
        scenarios: results,
        ranked_by_drop,
        random_control_auc,
        random_control_drop: baseline_auc - random_control_auc,
        random_control_dice,
    })
}

impl ScenarioReport {
    /// CSV rows: scenario,quantile,auc.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("scenario,quantile,auc\n");
        for r in &self.scenarios {
            for (q, a) in &r.curve {
                out.push_str(&format!("{},{:.3},{:.6}\n", r.config.id, q, a));
            }
        }
        out
    }

    /// JSON with correlations, p-values, overlap and the ranking.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "baseline_auc": self.baseline_auc,
            "ranked_by_drop": self.ranked_by_drop,
            "random_control": {
                "auc": self.random_control_auc,
                "drop": self.random_control_drop,
                "dice": self.random_control_dice,
            },
            "scenarios": self.scenarios.iter().map(|r| serde_json::json!({
                "id": r.config.id,
                "anchor": r.config.anchor,
                "method": r.config.method,
                "map_mode": r.config.map_mode,
                "auc_at_reference": r.auc_at_reference,
                "drop_at_reference": r.drop_at_reference,
                "correlations": r.correlations,
                "mean_dice": r.mean_dice,
            })).collect::<Vec<_>>(),
        })
    }
}

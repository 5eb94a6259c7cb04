//! Perturbation-based evaluation: quantile masks over positive relevance,
//! the voxel-inversion experiment, masked-mean severity correlations, and
//! ground-truth overlap scoring.

mod scenarios;

pub use scenarios::{
    inversion_curve, run_scenarios, scenario_sample_maps, ContrastCorrelation, EvalOptions,
    SampleMaps, ScenarioMaps, ScenarioReport, ScenarioResult,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Sample;
use serde::{Deserialize, Serialize};

/// Where a scenario's backward pass starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    /// One map per contrast, each anchored at that path's attention weight.
    AttentionWeight,
    Logit,
}

/// Attribution method of a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LrpProposed,
    LrpAll,
    Saliency,
    IntegratedGradients,
}

/// Whether masks come from per-contrast maps or from the combined map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    Individual,
    Combined,
}

/// One cell of the twelve-scenario comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: u8,
    pub anchor: AnchorKind,
    pub method: Method,
    pub map_mode: MapMode,
}

impl ScenarioConfig {
    /// The full comparison grid: scenarios 1-8 are the LRP 2x2x2 block
    /// (anchor x rule x map mode), 9-12 the gradient baselines with
    /// individual maps only.
    pub fn table() -> Vec<ScenarioConfig> {
        use AnchorKind::*;
        use MapMode::*;
        use Method::*;
        vec![
            ScenarioConfig { id: 1, anchor: AttentionWeight, method: LrpProposed, map_mode: Individual },
            ScenarioConfig { id: 2, anchor: AttentionWeight, method: LrpAll, map_mode: Individual },
            ScenarioConfig { id: 3, anchor: AttentionWeight, method: LrpProposed, map_mode: Combined },
            ScenarioConfig { id: 4, anchor: AttentionWeight, method: LrpAll, map_mode: Combined },
            ScenarioConfig { id: 5, anchor: Logit, method: LrpProposed, map_mode: Individual },
            ScenarioConfig { id: 6, anchor: Logit, method: LrpAll, map_mode: Individual },
            ScenarioConfig { id: 7, anchor: Logit, method: LrpProposed, map_mode: Combined },
            ScenarioConfig { id: 8, anchor: Logit, method: LrpAll, map_mode: Combined },
            ScenarioConfig { id: 9, anchor: AttentionWeight, method: Saliency, map_mode: Individual },
            ScenarioConfig { id: 10, anchor: AttentionWeight, method: IntegratedGradients, map_mode: Individual },
            ScenarioConfig { id: 11, anchor: Logit, method: Saliency, map_mode: Individual },
            ScenarioConfig { id: 12, anchor: Logit, method: IntegratedGradients, map_mode: Individual },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let lrp = matches!(self.method, Method::LrpProposed | Method::LrpAll);
        match (self.id, lrp) {
            (1..=8, true) => Ok(()),
            (9..=12, false) => {
                if self.map_mode == MapMode::Combined {
                    Err(Error::Config(format!(
                        "scenario {}: gradient baselines use individual maps only",
                        self.id
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::Config(format!(
                "scenario {}: id 1-8 must be LRP, 9-12 a gradient baseline",
                self.id
            ))),
        }
    }
}

/// Binary mask of the top fraction of positive-relevance voxels in the brain.
#[derive(Clone, Debug)]
pub struct QuantileMask {
    pub mask: Vec<bool>,
    pub quantile: f64,
    pub scenario_id: u8,
    pub voxel_count: usize,
    /// Set when the map had no positive relevance inside the brain.
    pub empty_flagged: bool,
}

/// Select the top `q` fraction of strictly positive relevance voxels inside
/// the brain mask. Threshold ties break on voxel index, so the selection is
/// a deterministic total order.
pub fn quantile_mask(
    map: &Tensor<f32>,
    brain: &[bool],
    q: f64,
    scenario_id: u8,
) -> Result<QuantileMask> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile_mask: q {} outside [0, 1]", q)));
    }
    let spatial: usize = map.shape()[1..].iter().product();
    if spatial != brain.len() || map.shape()[0] != 1 {
        return Err(Error::shape(
            "quantile_mask",
            format!("map {:?} vs brain mask of {} voxels", map.shape(), brain.len()),
        ));
    }
    let mut positive: Vec<u32> = (0..spatial as u32)
        .filter(|&i| brain[i as usize] && map.data()[i as usize] > 0.0)
        .collect();
    let mut out = vec![false; spatial];
    if positive.is_empty() {
        return Ok(QuantileMask {
            mask: out,
            quantile: q,
            scenario_id,
            voxel_count: 0,
            empty_flagged: true,
        });
    }
    let take = ((q * positive.len() as f64).round() as usize).min(positive.len());
    positive.sort_by(|&a, &b| {
        map.data()[b as usize]
            .partial_cmp(&map.data()[a as usize])
            .expect("finite relevance")
            .then(a.cmp(&b))
    });
    for &i in &positive[..take] {
        out[i as usize] = true;
    }
    Ok(QuantileMask { mask: out, quantile: q, scenario_id, voxel_count: take, empty_flagged: false })
}

/// Uniformly random brain mask of a given voxel count; the control against
/// which localization claims are tested.
pub fn random_mask(
    brain: &[bool],
    count: usize,
    scenario_id: u8,
    rng: &mut impl rand::Rng,
) -> QuantileMask {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..brain.len()).filter(|&i| brain[i]).collect();
    idx.shuffle(rng);
    let take = count.min(idx.len());
    let mut mask = vec![false; brain.len()];
    for &i in &idx[..take] {
        mask[i] = true;
    }
    QuantileMask { mask, quantile: 0.0, scenario_id, voxel_count: take, empty_flagged: false }
}

/// Invert voxel values (v -> 1 - v) under the given masks. One mask applies
/// to every contrast; with one mask per contrast, each contrast inverts under
/// its own.
pub fn invert_voxels(sample: &Sample, masks: &[&QuantileMask]) -> Result<Sample> {
    let l = sample.volumes.len();
    if masks.len() != 1 && masks.len() != l {
        return Err(Error::Data(format!(
            "invert_voxels: {} masks for {} contrasts (need 1 or {})",
            masks.len(),
            l,
            l
        )));
    }
    let spatial: usize = sample.volumes[0].shape()[1..].iter().product();
    for m in masks {
        if m.mask.len() != spatial {
            return Err(Error::shape(
                "invert_voxels",
                format!("mask of {} voxels vs volume of {}", m.mask.len(), spatial),
            ));
        }
    }
    let mut out = sample.clone();
    for (c, v) in out.volumes.iter_mut().enumerate() {
        let m = if masks.len() == 1 { masks[0] } else { masks[c] };
        for (i, &inside) in m.mask.iter().enumerate() {
            if inside {
                v.data_mut()[i] = 1.0 - v.data()[i];
            }
        }
    }
    Ok(out)
}

/// Arithmetic mean of each contrast's voxels under the mask.
pub fn masked_mean(sample: &Sample, mask: &QuantileMask) -> Result<Vec<f64>> {
    if mask.voxel_count == 0 {
        return Err(Error::Data("masked_mean: empty mask".into()));
    }
    Ok(sample
        .volumes
        .iter()
        .map(|v| {
            let mut s = 0.0f64;
            for (i, &inside) in mask.mask.iter().enumerate() {
                if inside {
                    s += v.data()[i] as f64;
                }
            }
            s / mask.voxel_count as f64
        })
        .collect())
}

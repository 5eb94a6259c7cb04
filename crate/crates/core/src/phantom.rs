//! Synthetic multi-contrast phantom volumes with a planted curved tract whose
//! intensity encodes a latent severity score, plus severity-independent
//! distractor lesions and ground-truth masks for localization scoring.

use crate::error::{Error, Result};
use crate::io::{read_vol1, write_vol1};
use crate::tensor::Tensor;
use crate::train::{Dataset, Sample};
use crate::util::rng_for;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub subjects: usize,
    pub extents: [usize; 3],
    pub contrasts: usize,
    /// Tube radius of the planted tract, voxels.
    pub tract_radius: f32,
    /// Signed per-contrast intensity shift at severity 10. Positive mirrors a
    /// measure that increases with damage, negative one that decreases.
    pub effect_sizes: Vec<f32>,
    pub lesion_count: usize,
    pub lesion_radius: f32,
    /// Absolute intensity shift of distractor lesions (sign drawn per lesion
    /// per contrast, independent of severity).
    pub lesion_intensity: f32,
    pub noise_sigma: f32,
    /// Fraction of subjects with severity >= 5.
    pub severe_fraction: f64,
    /// Severities avoid (5 - gap, 5 + gap) so labels are well defined.
    pub severity_gap: f32,
    /// Fraction of subjects with a second acquisition.
    pub follow_up_fraction: f64,
    /// Fraction of subjects held out as the test split (stratified).
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            subjects: 120,
            extents: [32, 32, 32],
            contrasts: 3,
            tract_radius: 2.6,
            effect_sizes: vec![0.45, -0.4, 0.3],
            lesion_count: 3,
            lesion_radius: 2.0,
            lesion_intensity: 0.3,
            noise_sigma: 0.03,
            severe_fraction: 40.0 / 166.0,
            severity_gap: 1.0,
            follow_up_fraction: 66.0 / 166.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Same anatomy and noise, but severity carries no signal at all.
    pub fn null_effects(mut self) -> Self {
        self.effect_sizes = vec![0.0; self.contrasts];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.contrasts == 0 {
            return Err(Error::Config("phantom: need subjects >= 1 and contrasts >= 1".into()));
        }
        if self.extents.iter().any(|&e| e < 16) {
            return Err(Error::Config(format!(
                "phantom: extents {:?} below the minimum 16 per axis",
                self.extents
            )));
        }
        if self.effect_sizes.len() != self.contrasts {
            return Err(Error::Config(format!(
                "phantom: {} effect sizes for {} contrasts",
                self.effect_sizes.len(),
                self.contrasts
            )));
        }
        if self.effect_sizes.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("phantom: effect sizes must be finite".into()));
        }
        if self.tract_radius <= 0.0
            || self.tract_radius >= self.extents.iter().copied().min().unwrap_or(0) as f32 / 4.0
        {
            return Err(Error::Config(format!(
                "phantom: tract radius {} does not fit extents {:?}",
                self.tract_radius, self.extents
            )));
        }
        if !(0.0..=1.0).contains(&self.severe_fraction)
            || !(0.0..=1.0).contains(&self.follow_up_fraction)
            || !(0.0..=1.0).contains(&self.test_fraction)
        {
            return Err(Error::Config("phantom: fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-subject ground truth.
#[derive(Clone, Debug)]
pub struct SubjectTruth {
    pub tract: Vec<bool>,
    pub lesions: Vec<bool>,
    pub severity: f32,
}

#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub subjects: BTreeMap<u32, SubjectTruth>,
}

struct SubjectAnatomy {
    brain: Vec<bool>,
    tract: Vec<bool>,
    lesions: Vec<bool>,
    /// Per-lesion, per-contrast signed shifts, flattened.
    lesion_shift: Vec<Vec<f32>>,
    lesion_centers: Vec<[f32; 3]>,
    background: Vec<Vec<f32>>,
}

fn flat(extents: &[usize; 3], d: usize, h: usize, w: usize) -> usize {
    (d * extents[1] + h) * extents[2] + w
}

/// Quadratic Bezier point.
fn bezier(p0: [f32; 3], p1: [f32; 3], p2: [f32; 3], t: f32) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for a in 0..3 {
        let u = 1.0 - t;
        out[a] = u * u * p0[a] + 2.0 * u * t * p1[a] + t * t * p2[a];
    }
    out
}

fn subject_anatomy(cfg: &PhantomConfig, subject: u32) -> SubjectAnatomy {
    let [nd, nh, nw] = cfg.extents;
    let n = nd * nh * nw;
    let mut rng = rng_for(cfg.seed, &[subject as u64, 0xa7a7]);

    // ellipsoidal brain with mild per-subject axis jitter
    let radii = [
        0.44 * nd as f32 * rng.gen_range(0.95..1.05),
        0.44 * nh as f32 * rng.gen_range(0.95..1.05),
        0.44 * nw as f32 * rng.gen_range(0.95..1.05),
    ];
    let center = [(nd as f32 - 1.0) / 2.0, (nh as f32 - 1.0) / 2.0, (nw as f32 - 1.0) / 2.0];
    let mut brain = vec![false; n];
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let q = [(d as f32 - center[0]) / radii[0], (h as f32 - center[1]) / radii[1], (w as f32 - center[2]) / radii[2]];
                brain[flat(&cfg.extents, d, h, w)] = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0;
            }
        }
    }

    // curved tract: quadratic Bezier from near-bottom to near-top with a bow
    let jit = |rng: &mut rand_chacha::ChaCha20Rng| rng.gen_range(-1.5..1.5f32);
    let margin = 1.5 * cfg.tract_radius;
    let p0 = [margin, center[1] + jit(&mut rng), center[2] + jit(&mut rng)];
    let p2 = [nd as f32 - 1.0 - margin, center[1] + jit(&mut rng), center[2] + jit(&mut rng)];
    let bow = 0.22 * nh as f32;
    let p1 = [
        center[0],
        center[1] + bow * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } + jit(&mut rng),
        center[2] + jit(&mut rng),
    ];
    let mut tract = vec![false; n];
    let r2 = cfg.tract_radius * cfg.tract_radius;
    let steps = 4 * nd;
    let curve: Vec<[f32; 3]> =
        (0..=steps).map(|k| bezier(p0, p1, p2, k as f32 / steps as f32)).collect();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let i = flat(&cfg.extents, d, h, w);
                if !brain[i] {
                    continue;
                }
                let p = [d as f32, h as f32, w as f32];
                for c in &curve {
                    let dist2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    if dist2 <= r2 {
                        tract[i] = true;
                        break;
                    }
                }
            }
        }
    }

    // distractor lesions: spheres placed off-tract, intensity independent of severity
    let mut lesions = vec![false; n];
    let mut lesion_shift = Vec::new();
    let mut lesion_centers = Vec::new();
    let clearance = cfg.tract_radius + cfg.lesion_radius + 1.0;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.lesion_count && attempts < 200 {
        attempts += 1;
        let cd = rng.gen_range(0..nd);
        let ch = rng.gen_range(0..nh);
        let cw = rng.gen_range(0..nw);
        if !brain[flat(&cfg.extents, cd, ch, cw)] {
            continue;
        }
        let p = [cd as f32, ch as f32, cw as f32];
        let clear = curve.iter().all(|c| {
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)
                > clearance * clearance
        });
        if !clear {
            continue;
        }
        let lr = cfg.lesion_radius * rng.gen_range(0.8..1.2);
        let lr2 = lr * lr;
        for d in 0..nd {
            for h in 0..nh {
                for w in 0..nw {
                    let i = flat(&cfg.extents, d, h, w);
                    if !brain[i] || tract[i] {
                        continue;
                    }
                    let dist2 =
                        (d as f32 - p[0]).powi(2) + (h as f32 - p[1]).powi(2) + (w as f32 - p[2]).powi(2);
                    if dist2 <= lr2 {
                        lesions[i] = true;
                    }
                }
            }
        }
        let shifts: Vec<f32> = (0..cfg.contrasts)
            .map(|_| cfg.lesion_intensity * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        lesion_shift.push(shifts);
        lesion_centers.push(p);
        placed += 1;
    }

    // smooth background per contrast: a base level plus low-frequency waves
    let mut background = Vec::with_capacity(cfg.contrasts);
    for _ in 0..cfg.contrasts {
        let base: f32 = rng.gen_range(0.45..0.55);
        let waves: Vec<(f32, [f32; 3], f32)> = (0..4)
            .map(|_| {
                let amp = rng.gen_range(0.02..0.06f32);
                let kv = [
                    rng.gen_range(0.5..2.0f32) / nd as f32,
                    rng.gen_range(0.5..2.0f32) / nh as f32,
                    rng.gen_range(0.5..2.0f32) / nw as f32,
                ];
                let phase = rng.gen_range(0.0..std::f32::consts::TAU);
                (amp, kv, phase)
            })
            .collect();
        let mut field = vec![0.0f32; n];
        for d in 0..nd {
            for h in 0..nh {
                for w in 0..nw {
                    let i = flat(&cfg.extents, d, h, w);
                    if !brain[i] {
                        continue;
                    }
                    let mut v = base;
                    for &(amp, kv, phase) in &waves {
                        v += amp
                            * (std::f32::consts::TAU
                                * (kv[0] * d as f32 + kv[1] * h as f32 + kv[2] * w as f32)
                                + phase)
                                .cos();
                    }
                    field[i] = v;
                }
            }
        }
        background.push(field);
    }

    SubjectAnatomy { brain, tract, lesions, lesion_shift, lesion_centers, background }
}

/// Render one acquisition of a subject at the given severity.
fn render(
    cfg: &PhantomConfig,
    anatomy: &SubjectAnatomy,
    severity: f32,
    noise_seed: u64,
) -> Vec<Tensor<f32>> {
    let [nd, nh, nw] = cfg.extents;
    let n = nd * nh * nw;
    let mut rng = rng_for(cfg.seed, &[noise_seed, 0x401e]);
    let normal = Normal::new(0.0f32, cfg.noise_sigma.max(1e-12)).expect("positive sigma");
    let mut vols = Vec::with_capacity(cfg.contrasts);
    for c in 0..cfg.contrasts {
        let mut data = vec![0.0f32; n];
        for i in 0..n {
            if !anatomy.brain[i] {
                continue;
            }
            let mut v = anatomy.background[c][i];
            if anatomy.tract[i] {
                v += cfg.effect_sizes[c] * severity / 10.0;
            }
            data[i] = v;
        }
        // lesions, one sphere at a time so overlapping spheres accumulate
        for (li, center) in anatomy.lesion_centers.iter().enumerate() {
            let lr2 = (cfg.lesion_radius * 1.2).powi(2);
            for d in 0..nd {
                for h in 0..nh {
                    for w in 0..nw {
                        let i = flat(&cfg.extents, d, h, w);
                        if !anatomy.lesions[i] {
                            continue;
                        }
                        let dist2 = (d as f32 - center[0]).powi(2)
                            + (h as f32 - center[1]).powi(2)
                            + (w as f32 - center[2]).powi(2);
                        if dist2 <= lr2 {
                            data[i] += anatomy.lesion_shift[li][c];
                        }
                    }
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            for i in 0..n {
                if anatomy.brain[i] {
                    data[i] += normal.sample(&mut rng);
                }
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        vols.push(Tensor::new(vec![1, nd, nh, nw], data).expect("shape matches"));
    }
    vols
}

fn draw_severity(cfg: &PhantomConfig, rng: &mut rand_chacha::ChaCha20Rng) -> f32 {
    if rng.gen_bool(cfg.severe_fraction) {
        rng.gen_range(5.0 + cfg.severity_gap..=10.0)
    } else {
        rng.gen_range(0.0..5.0 - cfg.severity_gap)
    }
}

/// Generate the full dataset and its ground truth. The seed stream is split
/// per subject, so the result is identical regardless of generation order.
pub fn generate(cfg: &PhantomConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut truth = GroundTruth::default();
    let mut severe_subjects = Vec::new();
    let mut mild_subjects = Vec::new();
    for subject in 0..cfg.subjects as u32 {
        let mut rng = rng_for(cfg.seed, &[subject as u64, 0x5e1f]);
        let severity = draw_severity(cfg, &mut rng);
        let age = (35.0 + 2.0 * severity + rng.gen_range(-12.0..12.0f32)).clamp(18.0, 90.0);
        let anatomy = subject_anatomy(cfg, subject);
        let vols = render(cfg, &anatomy, severity, (subject as u64) << 8);
        samples.push(Sample::new(subject, 0, vols, anatomy.brain.clone(), age, severity)?);
        if (rng.gen_bool(cfg.follow_up_fraction)) && cfg.follow_up_fraction > 0.0 {
            // follow-up: same anatomy, perturbed severity within its band
            let delta: f32 = rng.gen_range(-0.8..0.8);
            let s2 = if severity >= 5.0 {
                (severity + delta).clamp(5.0 + cfg.severity_gap, 10.0)
            } else {
                (severity + delta).clamp(0.0, 5.0 - cfg.severity_gap)
            };
            let vols2 = render(cfg, &anatomy, s2, ((subject as u64) << 8) | 1);
            samples.push(Sample::new(subject, 1, vols2, anatomy.brain.clone(), age + 2.0, s2)?);
        }
        if severity >= 5.0 {
            severe_subjects.push(subject);
        } else {
            mild_subjects.push(subject);
        }
        truth.subjects.insert(
            subject,
            SubjectTruth { tract: anatomy.tract, lesions: anatomy.lesions, severity },
        );
    }
    // stratified test split
    use rand::seq::SliceRandom;
    let mut rng = rng_for(cfg.seed, &[0x7e57]);
    severe_subjects.shuffle(&mut rng);
    mild_subjects.shuffle(&mut rng);
    let mut test: Vec<u32> = Vec::new();
    test.extend(&severe_subjects[..(severe_subjects.len() as f64 * cfg.test_fraction).round() as usize]);
    test.extend(&mild_subjects[..(mild_subjects.len() as f64 * cfg.test_fraction).round() as usize]);
    test.sort_unstable();
    Ok((Dataset { samples, test_subjects: test }, truth))
}

/// Render one subject at a forced severity with no noise; used by tests to
/// verify the planted effect sizes exactly.
pub fn render_subject_noiseless(
    cfg: &PhantomConfig,
    subject: u32,
    severity: f32,
) -> (Vec<Tensor<f32>>, Vec<bool>) {
    let mut quiet = cfg.clone();
    quiet.noise_sigma = 0.0;
    let anatomy = subject_anatomy(&quiet, subject);
    let vols = render(&quiet, &anatomy, severity, (subject as u64) << 8);
    (vols, anatomy.tract)
}

/// Descriptive statistics used by reports and sanity checks.
#[derive(Clone, Debug, Serialize)]
pub struct DatasetSummary {
    pub subjects: usize,
    pub samples: usize,
    pub severe_subject_fraction: f64,
    /// Baseline severity histogram over [0,10] in 10 unit bins.
    pub severity_histogram: [usize; 10],
    pub per_contrast_mean: Vec<f64>,
    pub per_contrast_min: Vec<f32>,
    pub per_contrast_max: Vec<f32>,
}

pub fn summarize(dataset: &Dataset) -> Result<DatasetSummary> {
    if dataset.samples.is_empty() {
        return Err(Error::Data("summarize: empty dataset".into()));
    }
    let contrasts = dataset.samples[0].volumes.len();
    let mut subjects = std::collections::BTreeSet::new();
    let mut severe = std::collections::BTreeSet::new();
    let mut hist = [0usize; 10];
    let mut mean = vec![0.0f64; contrasts];
    let mut min = vec![f32::INFINITY; contrasts];
    let mut max = vec![f32::NEG_INFINITY; contrasts];
    let mut voxels = 0usize;
    for s in &dataset.samples {
        let new_subject = subjects.insert(s.subject_id);
        if new_subject && s.timepoint == 0 {
            let bin = (s.severity as usize).min(9);
            hist[bin] += 1;
            if s.label {
                severe.insert(s.subject_id);
            }
        }
        for (c, v) in s.volumes.iter().enumerate() {
            for &x in v.data() {
                mean[c] += x as f64;
                min[c] = min[c].min(x);
                max[c] = max[c].max(x);
            }
        }
        voxels += dataset.samples[0].volumes[0].len();
    }
    for m in &mut mean {
        *m /= voxels as f64;
    }
    Ok(DatasetSummary {
        subjects: subjects.len(),
        samples: dataset.samples.len(),
        severe_subject_fraction: severe.len() as f64 / subjects.len() as f64,
        severity_histogram: hist,
        per_contrast_mean: mean,
        per_contrast_min: min,
        per_contrast_max: max,
    })
}

fn mask_to_tensor(mask: &[bool], extents: &[usize; 3]) -> Tensor<f32> {
    Tensor::from_fn(vec![1, extents[0], extents[1], extents[2]], |i| if mask[i] { 1.0 } else { 0.0 })
}

fn tensor_to_mask(t: &Tensor<f32>) -> Vec<bool> {
    t.data().iter().map(|&v| v > 0.5).collect()
}

/// Write a dataset directory: one VOL1 per subject per contrast, 0/1 VOL1
/// masks, and a JSON manifest with ids, ages, severities, labels and splits.
pub fn save_dataset(dir: &Path, dataset: &Dataset, truth: &GroundTruth, cfg: &PhantomConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in &dataset.samples {
        let mut files = Vec::new();
        for (c, v) in s.volumes.iter().enumerate() {
            let name = format!("sub{:03}_tp{}_c{}.vol", s.subject_id, s.timepoint, c);
            write_vol1(&dir.join(&name), v)?;
            files.push(name);
        }
        let brain_name = format!("sub{:03}_tp{}_brain.vol", s.subject_id, s.timepoint);
        write_vol1(&dir.join(&brain_name), &mask_to_tensor(&s.brain_mask, &cfg.extents))?;
        entries.push(serde_json::json!({
            "subject_id": s.subject_id,
            "timepoint": s.timepoint,
            "age": s.age,
            "severity": s.severity,
            "label": s.label,
            "volumes": files,
            "brain_mask": brain_name,
        }));
    }
    let mut gt = serde_json::Map::new();
    for (&id, t) in &truth.subjects {
        let tract_name = format!("sub{:03}_tract.vol", id);
        let lesion_name = format!("sub{:03}_lesions.vol", id);
        write_vol1(&dir.join(&tract_name), &mask_to_tensor(&t.tract, &cfg.extents))?;
        write_vol1(&dir.join(&lesion_name), &mask_to_tensor(&t.lesions, &cfg.extents))?;
        gt.insert(
            id.to_string(),
            serde_json::json!({"tract": tract_name, "lesions": lesion_name, "severity": t.severity}),
        );
    }
    let manifest = serde_json::json!({
        "format": "relvox-dataset-v1",
        "config": cfg,
        "samples": entries,
        "test_subjects": dataset.test_subjects,
        "ground_truth": gt,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, GroundTruth, PhantomConfig)> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest["format"] != "relvox-dataset-v1" {
        return Err(Error::Format {
            path: dir.display().to_string(),
            detail: "not a dataset directory".into(),
        });
    }
    let cfg: PhantomConfig = serde_json::from_value(manifest["config"].clone())?;
    let mut samples = Vec::new();
    for e in manifest["samples"].as_array().ok_or_else(|| Error::Data("manifest: samples".into()))? {
        let mut volumes = Vec::new();
        for f in e["volumes"].as_array().ok_or_else(|| Error::Data("manifest: volumes".into()))? {
            volumes.push(read_vol1(&dir.join(f.as_str().expect("file name")))?);
        }
        let brain = tensor_to_mask(&read_vol1(
            &dir.join(e["brain_mask"].as_str().ok_or_else(|| Error::Data("manifest: brain_mask".into()))?),
        )?);
        samples.push(Sample::new(
            e["subject_id"].as_u64().unwrap_or(0) as u32,
            e["timepoint"].as_u64().unwrap_or(0) as u8,
            volumes,
            brain,
            e["age"].as_f64().unwrap_or(0.0) as f32,
            e["severity"].as_f64().unwrap_or(0.0) as f32,
        )?);
    }
    let test_subjects: Vec<u32> = serde_json::from_value(manifest["test_subjects"].clone())?;
    let mut truth = GroundTruth::default();
    if let Some(gt) = manifest["ground_truth"].as_object() {
        for (id, entry) in gt {
            let tract = tensor_to_mask(&read_vol1(&dir.join(entry["tract"].as_str().expect("tract file")))?);
            let lesions =
                tensor_to_mask(&read_vol1(&dir.join(entry["lesions"].as_str().expect("lesion file")))?);
            truth.subjects.insert(
                id.parse().map_err(|_| Error::Data(format!("manifest: bad subject id {}", id)))?,
                SubjectTruth {
                    tract,
                    lesions,
                    severity: entry["severity"].as_f64().unwrap_or(0.0) as f32,
                },
            );
        }
    }
    Ok((Dataset { samples, test_subjects }, truth, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PhantomConfig {
        PhantomConfig {
            subjects: 10,
            extents: [16, 16, 16],
            tract_radius: 2.0,
            lesion_count: 2,
            lesion_radius: 1.5,
            follow_up_fraction: 0.5,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let (a, _) = generate(&cfg).unwrap();
        let (b, _) = generate(&cfg).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            for (vx, vy) in x.volumes.iter().zip(&y.volumes) {
                assert_eq!(vx, vy);
            }
            assert_eq!(x.severity, y.severity);
        }
        assert_eq!(a.test_subjects, b.test_subjects);
    }

    #[test]
    fn masks_are_disjoint_and_voxels_in_range() {
        let cfg = small_config();
        let (ds, gt) = generate(&cfg).unwrap();
        for (_, t) in &gt.subjects {
            assert!(t.tract.iter().any(|&v| v), "tract must be nonempty");
            assert!(!t.tract.iter().zip(&t.lesions).any(|(&a, &b)| a && b), "tract and lesions overlap");
        }
        for s in &ds.samples {
            for v in &s.volumes {
                assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    /// Noiseless severity-10 vs severity-0 renders of the same subject differ
    /// on the tract by exactly the configured effect size per contrast.
    #[test]
    fn noiseless_tract_shift_is_exact() {
        let cfg = small_config();
        let (hi, tract) = render_subject_noiseless(&cfg, 3, 10.0);
        let (lo, _) = render_subject_noiseless(&cfg, 3, 0.0);
        for (c, &effect) in cfg.effect_sizes.iter().enumerate() {
            let mut diff_sum = 0.0f64;
            let mut count = 0usize;
            for (i, &in_tract) in tract.iter().enumerate() {
                if in_tract {
                    diff_sum += (hi[c].data()[i] - lo[c].data()[i]) as f64;
                    count += 1;
                }
            }
            let mean_diff = diff_sum / count as f64;
            assert!(
                (mean_diff - effect as f64).abs() <= 1e-6,
                "contrast {}: mean shift {} vs effect {}",
                c,
                mean_diff,
                effect
            );
        }
    }

    /// Noiseless masked tract mean is strictly monotone in severity for every
    /// contrast with a nonzero effect.
    #[test]
    fn monotone_signal_in_severity() {
        let cfg = small_config();
        let mut last: Option<Vec<f64>> = None;
        for sev in [0.0f32, 2.5, 5.0, 7.5, 10.0] {
            let (vols, tract) = render_subject_noiseless(&cfg, 1, sev);
            let means: Vec<f64> = vols
                .iter()
                .map(|v| {
                    let (mut s, mut n) = (0.0f64, 0usize);
                    for (i, &t) in tract.iter().enumerate() {
                        if t {
                            s += v.data()[i] as f64;
                            n += 1;
                        }
                    }
                    s / n as f64
                })
                .collect();
            if let Some(prev) = last {
                for (c, &effect) in cfg.effect_sizes.iter().enumerate() {
                    if effect > 0.0 {
                        assert!(means[c] > prev[c], "contrast {} not increasing", c);
                    } else if effect < 0.0 {
                        assert!(means[c] < prev[c], "contrast {} not decreasing", c);
                    }
                }
            }
            last = Some(means);
        }
    }

    #[test]
    fn summary_counts_and_fraction() {
        let mut cfg = PhantomConfig { subjects: 80, ..small_config() };
        cfg.extents = [16, 16, 16];
        let (ds, _) = generate(&cfg).unwrap();
        let sum = summarize(&ds).unwrap();
        assert_eq!(sum.subjects, 80);
        assert_eq!(sum.severity_histogram.iter().sum::<usize>(), 80);
        // default severe fraction mirrors 40/166 = 0.241; allow sampling noise
        assert!(
            (sum.severe_subject_fraction - 0.241).abs() <= 0.12,
            "severe fraction {}",
            sum.severe_subject_fraction
        );
        assert!(summarize(&Dataset::default()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig { subjects: 4, follow_up_fraction: 0.5, ..small_config() };
        let (ds, gt) = generate(&cfg).unwrap();
        save_dataset(dir.path(), &ds, &gt, &cfg).unwrap();
        let (ds2, gt2, cfg2) = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), ds2.samples.len());
        assert_eq!(cfg2.subjects, cfg.subjects);
        for (a, b) in ds.samples.iter().zip(&ds2.samples) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.volumes, b.volumes);
            assert_eq!(a.brain_mask, b.brain_mask);
        }
        assert_eq!(gt.subjects.len(), gt2.subjects.len());
        for (id, t) in &gt.subjects {
            assert_eq!(t.tract, gt2.subjects[id].tract);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small_config();
        cfg.extents = [8, 16, 16];
        assert!(generate(&cfg).is_err());
        let mut cfg = small_config();
        cfg.tract_radius = 10.0; // tube does not fit
        assert!(generate(&cfg).is_err());
        let mut cfg = small_config();
        cfg.effect_sizes = vec![f32::NAN, 0.0, 0.0];
        assert!(generate(&cfg).is_err());
    }
}

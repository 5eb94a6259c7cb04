//! Subcommand implementations.

use crate::config::{PoolKind, RunConfig};
use relvox_core::attribution::{canonize, combined_map, lrp_backward, Anchor};
use relvox_core::error::{Error, Result};
use relvox_core::eval::{run_scenarios, scenario_sample_maps, EvalOptions, MapMode, Method};
use relvox_core::graph::Tape;
use relvox_core::io::{write_pgm, write_vol1};
use relvox_core::net::{
    forward, forward_tape, read_checkpoint, write_checkpoint, BnMode, NetworkParams,
};
use relvox_core::phantom::{generate, load_dataset, save_dataset, summarize, GroundTruth};
use relvox_core::train::{train_cv, Dataset};
use relvox_core::Tensor;
use std::path::Path;

pub fn gen_phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_echo(out, "gen-phantom")?;
    let (dataset, truth) = generate(&cfg.phantom)?;
    save_dataset(out, &dataset, &truth, &cfg.phantom)?;
    let summary = summarize(&dataset)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "generated {} samples from {} subjects into {}",
        summary.samples,
        summary.subjects,
        out.display()
    );
    Ok(())
}

/// Spot-check recorded gradients against 64-bit central differences on a few
/// input coordinates of the first sample.
fn f64_gradient_check(params: &NetworkParams<f32>, dataset: &Dataset) -> Result<f64> {
    let s = &dataset.samples[0];
    let p64 = params.cast::<f64>();
    let vols64: Vec<Tensor<f64>> = s.volumes.iter().map(|v| v.cast()).collect();
    let age = s.age as f64;
    let eval = |vs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let refs = forward_tape(&mut tape, &p64, vs, age, BnMode::Eval, false)?;
        Ok(tape.value(refs.logit).data()[0])
    };
    let mut tape = Tape::<f64>::new();
    let refs = forward_tape(&mut tape, &p64, &vols64, age, BnMode::Eval, false)?;
    tape.backward(refs.logit)?;
    let grad = tape.grad(refs.inputs[0]).expect("input gradient tracked").to_vec();
    let n = vols64[0].len();
    let mut worst = 0.0f64;
    let h = 1e-5;
    for k in 0..20 {
        let i = (k * 2_654_435_761usize) % n;
        let mut up = vols64.clone();
        up[0].data_mut()[i] += h;
        let mut dn = vols64.clone();
        dn[0].data_mut()[i] -= h;
        let fd = (eval(&up)? - eval(&dn)?) / (2.0 * h);
        let err = (grad[i] - fd).abs() / fd.abs().max(1e-6);
        worst = worst.max(err);
    }
    if worst > 1e-3 {
        return Err(Error::numeric("f64-checks", format!("gradient spot check failed: {}", worst)));
    }
    Ok(worst)
}

/// Cross-check the 32-bit forward logit against a 64-bit recompute.
fn f64_forward_check(params: &NetworkParams<f32>, dataset: &Dataset) -> Result<f64> {
    let s = &dataset.samples[0];
    let out32 = forward(params, &s.volumes, s.age)?;
    let p64 = params.cast::<f64>();
    let vols64: Vec<Tensor<f64>> = s.volumes.iter().map(|v| v.cast()).collect();
    let mut tape = Tape::<f64>::new();
    let refs = forward_tape(&mut tape, &p64, &vols64, s.age as f64, BnMode::Eval, false)?;
    let l64 = tape.value(refs.logit).data()[0];
    let rel = (out32.logit as f64 - l64).abs() / l64.abs().max(1e-6);
    if rel > 1e-3 {
        return Err(Error::numeric("f64-checks", format!("forward precision drift: {}", rel)));
    }
    Ok(rel)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, f64_checks: bool) -> Result<()> {
    cfg.write_echo(out, "train")?;
    let (dataset, _truth, _) = load_dataset(data)?;
    if f64_checks {
        let params = relvox_core::net::build(&cfg.network, cfg.train.seed)?;
        let worst = f64_gradient_check(&params, &dataset)?;
        println!("f64 gradient spot check: max relative error {:.2e}", worst);
    }
    let result = train_cv(&dataset, &cfg.network, &cfg.train)?;
    std::fs::write(out.join("metrics.csv"), result.metrics_csv())?;
    let mut checkpoints = Vec::new();
    for f in &result.folds {
        let name = format!("fold_{}.ckpt", f.fold);
        write_checkpoint(&out.join(&name), &f.params, cfg.train.seed)?;
        checkpoints.push(name);
    }
    let best = result.best_fold().fold;
    let mut summary = result.summary_json();
    summary["checkpoints"] = serde_json::json!(checkpoints);
    summary["best_fold"] = serde_json::json!(best);
    summary["fold_plan"] = serde_json::to_value(&result.plan)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} folds; mean AUC {:.3}; best fold {} -> {}",
        result.folds.len(),
        result.mean_auc(),
        best,
        out.display()
    );
    Ok(())
}

/// Resolve the evaluation pool from a training summary.
fn resolve_pool(
    dataset: &Dataset,
    summary: &serde_json::Value,
    pool: PoolKind,
) -> Result<Vec<usize>> {
    let plan: relvox_core::train::FoldPlan = serde_json::from_value(summary["fold_plan"].clone())
        .map_err(|_| Error::Data("training summary lacks a fold plan".into()))?;
    let best = summary["best_fold"]
        .as_u64()
        .ok_or_else(|| Error::Data("training summary lacks best_fold".into()))? as usize;
    let mut idx = match pool {
        PoolKind::ValTest => {
            let mut v = plan.fold_indices(dataset, best);
            v.extend(dataset.test_indices());
            v
        }
        PoolKind::Cv => dataset.cv_indices(),
        PoolKind::Test => dataset.test_indices(),
        PoolKind::All => (0..dataset.samples.len()).collect(),
    };
    idx.sort_unstable();
    idx.dedup();
    if idx.is_empty() {
        return Err(Error::Data("evaluation pool is empty".into()));
    }
    Ok(idx)
}

fn load_trained(train_dir: &Path) -> Result<(NetworkParams<f32>, serde_json::Value)> {
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_dir.join("summary.json"))?)?;
    let best = summary["best_fold"]
        .as_u64()
        .ok_or_else(|| Error::Data("training summary lacks best_fold".into()))?;
    let (params, _) = read_checkpoint(&train_dir.join(format!("fold_{}.ckpt", best)))?;
    Ok((params, summary))
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        quantiles: cfg.eval.quantiles.clone(),
        reference_quantile: cfg.eval.reference_quantile,
        ig_steps: cfg.eval.ig_steps,
        rules: cfg.rules,
        permutations: cfg.eval.permutations,
        seed: cfg.eval.seed,
        threads: cfg.train.threads,
    }
}

pub fn explain(
    cfg: &RunConfig,
    data: &Path,
    train_dir: &Path,
    out: &Path,
    scenario_filter: Option<u8>,
    subject_filter: Option<u32>,
    f64_checks: bool,
) -> Result<()> {
    cfg.write_echo(out, "explain")?;
    let (dataset, _truth, pcfg) = load_dataset(data)?;
    if pcfg.contrasts != cfg.network.paths {
        return Err(Error::Config(format!(
            "checkpoint/spec mismatch: dataset has {} contrasts, network expects {} paths",
            pcfg.contrasts, cfg.network.paths
        )));
    }
    let (params, summary) = load_trained(train_dir)?;
    if params.spec != cfg.network {
        return Err(Error::Config(
            "checkpoint/spec mismatch: checkpoint architecture differs from the configured network"
                .into(),
        ));
    }
    if f64_checks {
        let rel = f64_forward_check(&params, &dataset)?;
        println!("f64 forward cross-check: relative drift {:.2e}", rel);
    }
    let canon = canonize(&params)?;
    let pool = resolve_pool(&dataset, &summary, cfg.eval.pool)?;
    let opts = eval_options(cfg);
    let scenarios = cfg.eval.scenario_configs()?;
    let scenarios: Vec<_> = scenarios
        .into_iter()
        .filter(|s| scenario_filter.map_or(true, |id| s.id == id))
        .collect();
    if scenarios.is_empty() {
        return Err(Error::Config("explain: no scenarios selected".into()));
    }
    let mut written = 0usize;
    for &i in &pool {
        let s = &dataset.samples[i];
        if subject_filter.map_or(false, |id| s.subject_id != id) {
            continue;
        }
        for sc in &scenarios {
            let maps = scenario_sample_maps(&canon, &s.volumes, s.age, sc, &opts)?;
            let stem = format!("sub{:03}_tp{}_s{:02}", s.subject_id, s.timepoint, sc.id);
            for (c, m) in maps.per_contrast.iter().enumerate() {
                write_vol1(&out.join(format!("{}_c{}.vol", stem, c)), m)?;
            }
            let mut sidecar = serde_json::json!({
                "subject_id": s.subject_id,
                "timepoint": s.timepoint,
                "scenario": sc,
                "rules": opts.rules,
            });
            if sc.map_mode == MapMode::Combined {
                let cm = combined_map(&maps.per_contrast, &s.volumes)?;
                write_vol1(&out.join(format!("{}_combined.vol", stem)), &cm)?;
            }
            if matches!(sc.method, Method::LrpProposed | Method::LrpAll) {
                // one logit-anchored pass records the conservation ledger
                let fwd = forward(&canon, &s.volumes, s.age)?;
                let mut rules = opts.rules;
                rules.variant = match sc.method {
                    Method::LrpAll => relvox_core::attribution::SplitVariant::LrpAll,
                    _ => relvox_core::attribution::SplitVariant::Proposed,
                };
                let bundle = lrp_backward(&fwd.trace, &canon, Anchor::Logit, &rules)?;
                sidecar["anchor_value"] = serde_json::json!(bundle.anchor_value);
                sidecar["age_relevance"] = serde_json::json!(bundle.age_relevance);
                sidecar["conservation_residual"] = serde_json::json!(bundle.conservation_residual);
            }
            std::fs::write(
                out.join(format!("{}.json", stem)),
                serde_json::to_string_pretty(&sidecar)?,
            )?;
            written += 1;
        }
    }
    if written == 0 {
        return Err(Error::Data("explain: no samples matched the filters".into()));
    }
    println!("wrote {} relevance bundles to {}", written, out.display());
    Ok(())
}

pub fn scenarios_cmd(
    cfg: &RunConfig,
    data: &Path,
    train_dir: &Path,
    out: &Path,
    f64_checks: bool,
) -> Result<()> {
    cfg.write_echo(out, "scenarios")?;
    let (dataset, truth, _) = load_dataset(data)?;
    let (params, summary) = load_trained(train_dir)?;
    if params.spec != cfg.network {
        return Err(Error::Config(
            "checkpoint/spec mismatch: checkpoint architecture differs from the configured network"
                .into(),
        ));
    }
    if f64_checks {
        let rel = f64_forward_check(&params, &dataset)?;
        println!("f64 forward cross-check: relative drift {:.2e}", rel);
    }
    let pool = resolve_pool(&dataset, &summary, cfg.eval.pool)?;
    let opts = eval_options(cfg);
    let scenarios = cfg.eval.scenario_configs()?;
    let truth_ref: Option<&GroundTruth> =
        if truth.subjects.is_empty() { None } else { Some(&truth) };
    let report = run_scenarios(&dataset, &pool, truth_ref, &params, &scenarios, &opts)?;
    std::fs::write(out.join("curves.csv"), report.curves_csv())?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report.summary_json())?,
    )?;
    let mask_dir = out.join("masks");
    std::fs::create_dir_all(&mask_dir)?;
    for r in &report.scenarios {
        let (w, h, px) = &r.example_slice;
        write_pgm(&mask_dir.join(format!("scenario_{:02}.pgm", r.config.id)), *w, *h, px)?;
    }
    println!(
        "baseline AUC {:.3}; largest drop: scenario {} ({:.3}); report in {}",
        report.baseline_auc,
        report.ranked_by_drop[0],
        report.scenarios.iter().map(|r| r.drop_at_reference).fold(f64::MIN, f64::max),
        out.display()
    );
    Ok(())
}

pub fn report_cmd(run: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json"))?)?;
    let mut md = String::new();
    md.push_str("# Scenario evaluation report\n\n");
    md.push_str(&format!(
        "Baseline pooled AUC: {:.4}\n\nRanking by AUC drop at the reference quantile: {}\n\n",
        report["baseline_auc"].as_f64().unwrap_or(f64::NAN),
        report["ranked_by_drop"]
            .as_array()
            .map(|a| a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" > "))
            .unwrap_or_default()
    ));
    md.push_str("| scenario | anchor | method | maps | AUC@ref | drop | dice |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    if let Some(rows) = report["scenarios"].as_array() {
        for r in rows {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {:.4} | {:.4} | {} |\n",
                r["id"],
                r["anchor"].as_str().unwrap_or("?"),
                r["method"].as_str().unwrap_or("?"),
                r["map_mode"].as_str().unwrap_or("?"),
                r["auc_at_reference"].as_f64().unwrap_or(f64::NAN),
                r["drop_at_reference"].as_f64().unwrap_or(f64::NAN),
                r["mean_dice"].as_f64().map(|d| format!("{:.4}", d)).unwrap_or_else(|| "-".into()),
            ));
        }
        md.push_str("\n## Severity correlations at the reference quantile\n\n");
        md.push_str("| scenario | contrast | rho | p |\n|---|---|---|---|\n");
        for r in rows {
            if let Some(corrs) = r["correlations"].as_array() {
                for c in corrs {
                    md.push_str(&format!(
                        "| {} | {} | {:.4} | {:.5} |\n",
                        r["id"], c["contrast"],
                        c["rho"].as_f64().unwrap_or(f64::NAN),
                        c["p_value"].as_f64().unwrap_or(f64::NAN),
                    ));
                }
            }
        }
    }
    md.push_str(&format!(
        "\nRandom control: AUC {:.4}, drop {:.4}, dice {}\n",
        report["random_control"]["auc"].as_f64().unwrap_or(f64::NAN),
        report["random_control"]["drop"].as_f64().unwrap_or(f64::NAN),
        report["random_control"]["dice"]
            .as_f64()
            .map(|d| format!("{:.4}", d))
            .unwrap_or_else(|| "-".into()),
    ));
    // stitch per-scenario mask slices into one montage strip
    let mask_dir = run.join("masks");
    let mut tiles: Vec<(usize, usize, Vec<u8>)> = Vec::new();
    if mask_dir.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(&mask_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |x| x == "pgm"))
            .collect();
        names.sort();
        for p in &names {
            if let Ok(t) = read_pgm(p) {
                tiles.push(t);
            }
            md.push_str(&format!("\n![mask]({})\n", p.display()));
        }
    }
    if !tiles.is_empty() {
        let (tw, th) = (tiles[0].0, tiles[0].1);
        if tiles.iter().all(|t| t.0 == tw && t.1 == th) {
            let cols = tiles.len();
            let mut strip = vec![0u8; tw * cols * th];
            for (k, (_, _, px)) in tiles.iter().enumerate() {
                for row in 0..th {
                    let dst = row * tw * cols + k * tw;
                    strip[dst..dst + tw].copy_from_slice(&px[row * tw..(row + 1) * tw]);
                }
            }
            write_pgm(&out.join("montage.pgm"), tw * cols, th, &strip)?;
        }
    }
    std::fs::write(out.join("summary.md"), md)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut parts = text.split_ascii_whitespace();
    let magic = parts.next().unwrap_or("");
    if magic != "P5" {
        return Err(Error::Format { path: path.display().to_string(), detail: "not P5".into() });
    }
    let w: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    let h: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    let _max = parts.next();
    if w * h == 0 || bytes.len() < w * h {
        return Err(Error::Format { path: path.display().to_string(), detail: "bad extents".into() });
    }
    Ok((w, h, bytes[bytes.len() - w * h..].to_vec()))
}

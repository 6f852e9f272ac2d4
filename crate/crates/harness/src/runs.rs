//! Experiment runners. Each crafts adversarial images over a grid of
//! combinations, writes data CSVs under the configured output directory and
//! returns a [`RunRecord`].
//!
//! Combinations run in parallel on the current rayon pool; results are
//! gathered and reduced in combination order, so the data files do not
//! depend on scheduling. Per-combination failures are logged, recorded and
//! skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use markpaint::imaging::random_rect_mask;
use markpaint::metrics::patch_loss;
use markpaint::{
    defense_sweep, inpaint, markpaint, markpaint_eot, AttackConfig, EoTConfig, Image, InpainterModel,
    Mask, MetricRow, Reference, RngSeed,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Prepared};
use crate::error::{HarnessError, Result};
use crate::table::{fmt_f64, mean_std, Table};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A combination that could not be run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub combination: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<R> {
    pub config_hash: String,
    pub toolkit_version: String,
    /// The only non-deterministic field; kept out of the CSV files.
    pub wall_clock_seconds: f64,
    pub rows: Vec<R>,
    pub failures: Vec<Failure>,
    pub files: Vec<PathBuf>,
}

impl<R> RunRecord<R> {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// One markpainted patch compared against one reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub image: String,
    pub coverage: f64,
    pub mask_index: usize,
    pub target: String,
    pub epsilon: f64,
    pub model: String,
    pub reference: Reference,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

/// Loss to target of an image crafted on `source`, inpainted by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRow {
    pub image: String,
    pub coverage: f64,
    pub mask_index: usize,
    pub target: String,
    pub epsilon: f64,
    pub source: String,
    pub eval: String,
    pub loss_to_target: f64,
}

/// Mask-agnostic attack scored on one held-out mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EotRow {
    pub image: String,
    pub target: String,
    pub epsilon: f64,
    pub model: String,
    pub coverage: f64,
    pub mask_index: usize,
    pub loss_to_target: f64,
    /// The same mask on the unperturbed image.
    pub baseline_loss_to_target: f64,
}

/// One defense applied to one adversarial image; `defense` is `none` for
/// the undefended row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseRecord {
    pub image: String,
    pub coverage: f64,
    pub mask_index: usize,
    pub target: String,
    pub epsilon: f64,
    pub model: String,
    pub defense: String,
    pub loss_to_target: f64,
    pub loss_to_benign: f64,
}

pub const UNDEFENDED: &str = "none";

/// (image, coverage, mask) cell of the grid with its realised mask.
struct MaskCell {
    image: usize,
    coverage: usize,
    index: usize,
    mask: Mask,
}

fn grid_masks(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<MaskCell>> {
    let size = cfg.image_size;
    let per = cfg.masks_per_coverage;
    let mut cells = Vec::new();
    for image in 0..prep.images.len() {
        for (coverage, &c) in cfg.coverages.iter().enumerate() {
            for index in 0..per {
                let stream = ((image * cfg.coverages.len() + coverage) * per + index) as u64;
                let mask = random_rect_mask(size, size, c, RngSeed(cfg.seed).derive("grid-mask", stream))
                    .map_err(|e| HarnessError::config(format!("coverages[{coverage}]"), e.to_string()))?;
                cells.push(MaskCell { image, coverage, index, mask });
            }
        }
    }
    Ok(cells)
}

/// A single-mask attack combination, in nesting order
/// image, coverage, mask, target, ε, model.
#[derive(Clone, Copy)]
struct Combo<'a> {
    cell: &'a MaskCell,
    target: usize,
    epsilon: usize,
    model: usize,
}

fn combos<'a>(cells: &'a [MaskCell], cfg: &ExperimentConfig, prep: &Prepared, n_models: usize) -> Vec<Combo<'a>> {
    let mut out = Vec::new();
    for cell in cells {
        for target in 0..prep.targets.len() {
            for epsilon in 0..cfg.epsilons.len() {
                for model in 0..n_models {
                    out.push(Combo { cell, target, epsilon, model });
                }
            }
        }
    }
    out
}

impl Combo<'_> {
    fn describe(&self, cfg: &ExperimentConfig, prep: &Prepared, model: &str) -> String {
        format!(
            "image={} coverage={} mask={} target={} epsilon={} model={model}",
            prep.image_names[self.cell.image],
            cfg.coverages[self.cell.coverage],
            self.cell.index,
            prep.targets[self.target].0,
            cfg.epsilons[self.epsilon],
        )
    }

    fn attack_config(&self, cfg: &ExperimentConfig, prep: &Prepared) -> AttackConfig {
        let eps = cfg.epsilons[self.epsilon];
        AttackConfig {
            epsilon: eps,
            step: cfg.attack.step.resolve(eps),
            iterations: cfg.attack.iterations,
            loss: prep.loss.clone(),
            seed: RngSeed(cfg.seed),
        }
    }

    fn craft(&self, cfg: &ExperimentConfig, prep: &Prepared, model: &Arc<dyn InpainterModel>) -> markpaint::Result<Image> {
        let img = &prep.images[self.cell.image];
        let target = &prep.targets[self.target].1;
        let attack = self.attack_config(cfg, prep);
        Ok(markpaint(img, &self.cell.mask, target, std::slice::from_ref(model), &attack)?.adversarial)
    }
}

/// Runs `f` over `items` in parallel and splits successes from failures,
/// both in item order.
fn run_all<T: Sync, R: Send>(
    items: &[T],
    describe: impl Fn(&T) -> String + Sync,
    f: impl Fn(&T) -> markpaint::Result<R> + Sync,
) -> (Vec<R>, Vec<Failure>) {
    let results: Vec<_> = items.par_iter().map(|it| f(it).map_err(|e| (describe(it), e))).collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err((combination, e)) => {
                tracing::warn!("skipping {combination}: {e}");
                failures.push(Failure {
                    combination,
                    error: e.to_string(),
                });
            }
        }
    }
    (ok, failures)
}

fn output_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| HarnessError::io(&cfg.output, e))?;
    Ok(&cfg.output)
}

fn failures_table(failures: &[Failure]) -> Table {
    let mut t = Table::new(["combination", "error"]);
    for f in failures {
        t.push(vec![f.combination.clone(), f.error.clone()]);
    }
    t
}

fn finish<R: Serialize>(
    cfg: &ExperimentConfig,
    stem: &str,
    start: Instant,
    rows: Vec<R>,
    failures: Vec<Failure>,
    mut files: Vec<PathBuf>,
) -> Result<RunRecord<R>> {
    let out = output_dir(cfg)?;
    files.push(failures_table(&failures).write(&out.join(format!("{stem}_failures.csv")))?);
    let record = RunRecord {
        config_hash: cfg.hash(),
        toolkit_version: TOOLKIT_VERSION.to_string(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        rows,
        failures,
        files,
    };
    let path = out.join(format!("{stem}_run.json"));
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))?;
    Ok(record)
}

/// Groups `rows` by `key` (first-seen order) and summarises `value`.
fn summarise<R, K: Ord + Clone>(
    rows: &[R],
    key: impl Fn(&R) -> K,
    values: &[&dyn Fn(&R) -> f64],
) -> Vec<(K, Vec<(f64, f64)>, usize)> {
    let mut order: Vec<K> = Vec::new();
    let mut groups: BTreeMap<K, Vec<&R>> = BTreeMap::new();
    for r in rows {
        let k = key(r);
        groups
            .entry(k.clone())
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let members = &groups[&k];
            let stats = values
                .iter()
                .map(|v| mean_std(&members.iter().map(|r| v(r)).collect::<Vec<_>>()))
                .collect();
            (k, stats, members.len())
        })
        .collect()
}

pub const GRID_ROW_HEADER: [&str; 11] = [
    "image", "coverage", "mask_index", "target", "epsilon", "model", "reference", "loss", "l2", "psnr", "ssim",
];

pub const GRID_AGGREGATE_HEADER: [&str; 11] = [
    "epsilon", "model", "reference", "loss_mean", "loss_std", "l2_mean", "l2_std", "psnr_mean", "psnr_std",
    "ssim_mean", "ssim_std",
];

/// Aggregate rows ordered by ε (config order), model, reference.
pub fn grid_aggregate(cfg: &ExperimentConfig, rows: &[GridRow]) -> Table {
    let mut t = Table::new(GRID_AGGREGATE_HEADER);
    let eps_rank = |e: f64| cfg.epsilons.iter().position(|&x| x == e).unwrap_or(usize::MAX);
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let model_rank = |m: &str| models.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    let loss = |r: &GridRow| r.metrics.loss;
    let l2 = |r: &GridRow| r.metrics.l2;
    let psnr = |r: &GridRow| r.metrics.psnr;
    let ssim = |r: &GridRow| r.metrics.ssim;
    let mut groups = summarise(
        rows,
        |r| (eps_rank(r.epsilon), model_rank(&r.model), r.reference),
        &[&loss, &l2, &psnr, &ssim],
    );
    groups.sort_by_key(|g| g.0);
    for ((e, m, reference), stats, _) in groups {
        let mut row = vec![fmt_f64(cfg.epsilons[e]), models[m].to_string(), reference.as_str().to_string()];
        for (mean, std) in stats {
            row.push(fmt_f64(mean));
            row.push(fmt_f64(std));
        }
        t.push(row);
    }
    t
}

/// Crafts with `markpaint` for every (image, mask, target, ε, model) and
/// compares the inpainted hole against the original, target and benign fill.
///
/// Writes `grid_rows.csv`, `grid_aggregate.csv`, `grid_failures.csv` and
/// `grid_run.json`.
pub fn run_attack_grid(cfg: &ExperimentConfig) -> Result<RunRecord<GridRow>> {
    let start = Instant::now();
    let prep = cfg.prepare()?;
    let cells = grid_masks(cfg, &prep)?;
    let combos = combos(&cells, cfg, &prep, prep.models.len());
    let (results, failures) = run_all(
        &combos,
        |c| c.describe(cfg, &prep, prep.models[c.model].identifier()),
        |c| {
            let model = &prep.models[c.model];
            let img = &prep.images[c.cell.image];
            let target = &prep.targets[c.target].1;
            let adv = c.craft(cfg, &prep, model)?;
            let report = markpaint::evaluate(img, &c.cell.mask, target, model.as_ref(), &adv, &prep.loss)?;
            Ok(Reference::ALL
                .iter()
                .map(|&reference| GridRow {
                    image: prep.image_names[c.cell.image].clone(),
                    coverage: cfg.coverages[c.cell.coverage],
                    mask_index: c.cell.index,
                    target: prep.targets[c.target].0.clone(),
                    epsilon: cfg.epsilons[c.epsilon],
                    model: model.identifier().to_string(),
                    reference,
                    metrics: *report.row(reference),
                })
                .collect::<Vec<_>>())
        },
    );
    let rows: Vec<GridRow> = results.into_iter().flatten().collect();

    let out = output_dir(cfg)?;
    let mut table = Table::new(GRID_ROW_HEADER);
    for r in &rows {
        table.push(vec![
            r.image.clone(),
            fmt_f64(r.coverage),
            r.mask_index.to_string(),
            r.target.clone(),
            fmt_f64(r.epsilon),
            r.model.clone(),
            r.reference.as_str().to_string(),
            fmt_f64(r.metrics.loss),
            fmt_f64(r.metrics.l2),
            fmt_f64(r.metrics.psnr),
            fmt_f64(r.metrics.ssim),
        ]);
    }
    let files = vec![
        table.write(&out.join("grid_rows.csv"))?,
        grid_aggregate(cfg, &rows).write(&out.join("grid_aggregate.csv"))?,
    ];
    finish(cfg, "grid", start, rows, failures, files)
}

/// Crafts on each attack model and scores the loss to target on every
/// evaluation model.
///
/// Writes `transfer_rows.csv`, `transfer_curves.csv` (mean ± σ per ε,
/// source and evaluation model) and `transfer_matrix.csv` (one row per ε
/// and source model, one column per evaluation model).
pub fn run_transfer_matrix(cfg: &ExperimentConfig) -> Result<RunRecord<TransferRow>> {
    let start = Instant::now();
    let prep = cfg.prepare()?;
    let cells = grid_masks(cfg, &prep)?;
    let combos = combos(&cells, cfg, &prep, prep.models.len());
    let (results, failures) = run_all(
        &combos,
        |c| c.describe(cfg, &prep, prep.models[c.model].identifier()),
        |c| {
            let source = &prep.models[c.model];
            let target = &prep.targets[c.target].1;
            let adv = c.craft(cfg, &prep, source)?;
            prep.eval_models
                .iter()
                .map(|eval| {
                    let out = inpaint(eval.as_ref(), &adv, &c.cell.mask)?;
                    Ok(TransferRow {
                        image: prep.image_names[c.cell.image].clone(),
                        coverage: cfg.coverages[c.cell.coverage],
                        mask_index: c.cell.index,
                        target: prep.targets[c.target].0.clone(),
                        epsilon: cfg.epsilons[c.epsilon],
                        source: source.identifier().to_string(),
                        eval: eval.identifier().to_string(),
                        loss_to_target: patch_loss(&out, target, &c.cell.mask, &prep.loss)?,
                    })
                })
                .collect::<markpaint::Result<Vec<_>>>()
        },
    );
    let rows: Vec<TransferRow> = results.into_iter().flatten().collect();

    let out = output_dir(cfg)?;
    let mut row_table = Table::new([
        "image", "coverage", "mask_index", "target", "epsilon", "source", "eval", "loss_to_target",
    ]);
    for r in &rows {
        row_table.push(vec![
            r.image.clone(),
            fmt_f64(r.coverage),
            r.mask_index.to_string(),
            r.target.clone(),
            fmt_f64(r.epsilon),
            r.source.clone(),
            r.eval.clone(),
            fmt_f64(r.loss_to_target),
        ]);
    }

    let ids = |ms: &[Arc<dyn InpainterModel>]| ms.iter().map(|m| m.identifier().to_string()).collect::<Vec<_>>();
    let (sources, evals) = (ids(&prep.models), ids(&prep.eval_models));
    let rank = |list: &[String], s: &str| list.iter().position(|x| x == s).unwrap_or(usize::MAX);
    let eps_rank = |e: f64| cfg.epsilons.iter().position(|&x| x == e).unwrap_or(usize::MAX);
    let loss = |r: &TransferRow| r.loss_to_target;
    let mut groups = summarise(
        &rows,
        |r| (eps_rank(r.epsilon), rank(&sources, &r.source), rank(&evals, &r.eval)),
        &[&loss],
    );
    groups.sort_by_key(|g| g.0);

    let mut curves = Table::new(["epsilon", "source", "eval", "loss_mean", "loss_std", "n"]);
    let mut matrix = Table::new(
        ["epsilon".to_string(), "source".to_string()]
            .into_iter()
            .chain(evals.iter().cloned()),
    );
    let mut cells_by_key: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for ((e, s, v), stats, n) in &groups {
        let (mean, std) = stats[0];
        curves.push(vec![
            fmt_f64(cfg.epsilons[*e]),
            sources[*s].clone(),
            evals[*v].clone(),
            fmt_f64(mean),
            fmt_f64(std),
            n.to_string(),
        ]);
        let row = cells_by_key
            .entry((*e, *s))
            .or_insert_with(|| vec![String::new(); evals.len()]);
        row[*v] = fmt_f64(mean);
    }
    for ((e, s), values) in cells_by_key {
        let mut row = vec![fmt_f64(cfg.epsilons[e]), sources[s].clone()];
        row.extend(values);
        matrix.push(row);
    }

    let files = vec![
        row_table.write(&out.join("transfer_rows.csv"))?,
        curves.write(&out.join("transfer_curves.csv"))?,
        matrix.write(&out.join("transfer_matrix.csv"))?,
    ];
    finish(cfg, "transfer", start, rows, failures, files)
}

/// Held-out evaluation masks for the mask-agnostic attack, drawn from a
/// stream separate from the attack's own masks.
pub fn eot_eval_masks(cfg: &ExperimentConfig, image: usize) -> markpaint::Result<Vec<(usize, usize, Mask)>> {
    let size = cfg.image_size;
    let per = cfg.eot.eval_masks;
    let n_cov = cfg.eot.eval_coverages.len();
    let mut out = Vec::new();
    for (c, &coverage) in cfg.eot.eval_coverages.iter().enumerate() {
        for k in 0..per {
            let stream = ((image * n_cov + c) * per + k) as u64;
            let seed = RngSeed(cfg.seed).derive("eot-eval", stream);
            out.push((c, k, random_rect_mask(size, size, coverage, seed)?));
        }
    }
    Ok(out)
}

/// Crafts with `markpaint_eot` for every (image, target, ε, model) and
/// scores it on held-out masks at each evaluation coverage, next to the
/// unperturbed baseline.
///
/// Writes `eot_rows.csv` and `eot_summary.csv` (mean ± σ per ε, model and
/// coverage).
pub fn run_eot_experiment(cfg: &ExperimentConfig) -> Result<RunRecord<EotRow>> {
    let start = Instant::now();
    let prep = cfg.prepare()?;
    let mut combos = Vec::new();
    for image in 0..prep.images.len() {
        for target in 0..prep.targets.len() {
            for epsilon in 0..cfg.epsilons.len() {
                for model in 0..prep.models.len() {
                    combos.push((image, target, epsilon, model));
                }
            }
        }
    }
    let (results, failures) = run_all(
        &combos,
        |&(i, t, e, m)| {
            format!(
                "image={} target={} epsilon={} model={}",
                prep.image_names[i],
                prep.targets[t].0,
                cfg.epsilons[e],
                prep.models[m].identifier()
            )
        },
        |&(i, t, e, m)| {
            let img = &prep.images[i];
            let (label, target) = &prep.targets[t];
            let model = &prep.models[m];
            let eps = cfg.epsilons[e];
            let stream = combos_index(i, t, e, m, prep.targets.len(), cfg.epsilons.len(), prep.models.len());
            let eot = EoTConfig {
                attack: AttackConfig {
                    epsilon: eps,
                    step: cfg.eot.step.resolve(eps),
                    iterations: cfg.eot.iterations,
                    loss: prep.loss.clone(),
                    seed: RngSeed(cfg.seed).derive("eot-attack", stream),
                },
                n_masks: cfg.eot.n_masks,
                m_min: cfg.eot.m_min,
                m_max: cfg.eot.m_max,
            };
            let adv = markpaint_eot(img, target, std::slice::from_ref(model), &eot)?.adversarial;
            eot_eval_masks(cfg, i)?
                .into_iter()
                .map(|(c, k, mask)| {
                    let mark = inpaint(model.as_ref(), &adv, &mask)?;
                    let benign = inpaint(model.as_ref(), img, &mask)?;
                    Ok(EotRow {
                        image: prep.image_names[i].clone(),
                        target: label.clone(),
                        epsilon: eps,
                        model: model.identifier().to_string(),
                        coverage: cfg.eot.eval_coverages[c],
                        mask_index: k,
                        loss_to_target: patch_loss(&mark, target, &mask, &prep.loss)?,
                        baseline_loss_to_target: patch_loss(&benign, target, &mask, &prep.loss)?,
                    })
                })
                .collect::<markpaint::Result<Vec<_>>>()
        },
    );
    let rows: Vec<EotRow> = results.into_iter().flatten().collect();

    let out = output_dir(cfg)?;
    let mut row_table = Table::new([
        "image", "target", "epsilon", "model", "coverage", "mask_index", "loss_to_target", "baseline_loss_to_target",
    ]);
    for r in &rows {
        row_table.push(vec![
            r.image.clone(),
            r.target.clone(),
            fmt_f64(r.epsilon),
            r.model.clone(),
            fmt_f64(r.coverage),
            r.mask_index.to_string(),
            fmt_f64(r.loss_to_target),
            fmt_f64(r.baseline_loss_to_target),
        ]);
    }
    let models: Vec<String> = prep.models.iter().map(|m| m.identifier().to_string()).collect();
    let rank_eps = |e: f64| cfg.epsilons.iter().position(|&x| x == e).unwrap_or(usize::MAX);
    let rank_model = |s: &str| models.iter().position(|x| x == s).unwrap_or(usize::MAX);
    let rank_cov = |c: f64| cfg.eot.eval_coverages.iter().position(|&x| x == c).unwrap_or(usize::MAX);
    let loss = |r: &EotRow| r.loss_to_target;
    let base = |r: &EotRow| r.baseline_loss_to_target;
    let mut groups = summarise(
        &rows,
        |r| (rank_eps(r.epsilon), rank_model(&r.model), rank_cov(r.coverage)),
        &[&loss, &base],
    );
    groups.sort_by_key(|g| g.0);
    let mut summary = Table::new([
        "epsilon", "model", "coverage", "loss_mean", "loss_std", "baseline_mean", "baseline_std", "n",
    ]);
    for ((e, m, c), stats, n) in groups {
        summary.push(vec![
            fmt_f64(cfg.epsilons[e]),
            models[m].clone(),
            fmt_f64(cfg.eot.eval_coverages[c]),
            fmt_f64(stats[0].0),
            fmt_f64(stats[0].1),
            fmt_f64(stats[1].0),
            fmt_f64(stats[1].1),
            n.to_string(),
        ]);
    }
    let files = vec![
        row_table.write(&out.join("eot_rows.csv"))?,
        summary.write(&out.join("eot_summary.csv"))?,
    ];
    finish(cfg, "eot", start, rows, failures, files)
}

fn combos_index(i: usize, t: usize, e: usize, m: usize, nt: usize, ne: usize, nm: usize) -> u64 {
    (((i * nt + t) * ne + e) * nm + m) as u64
}

/// Attacks every combination once, then applies each defense in the
/// configured grid to the adversarial image.
///
/// Writes `defense_rows.csv` (an undefended `none` row precedes each
/// combination's defended rows) and `defense_summary.csv`. An empty
/// defense grid gives header-only files without running any attack.
pub fn run_defense_sweep(cfg: &ExperimentConfig) -> Result<RunRecord<DefenseRecord>> {
    let start = Instant::now();
    let prep = cfg.prepare()?;
    let cells = grid_masks(cfg, &prep)?;
    let combos = if prep.defenses.is_empty() {
        Vec::new()
    } else {
        combos(&cells, cfg, &prep, prep.models.len())
    };
    let (results, failures) = run_all(
        &combos,
        |c| c.describe(cfg, &prep, prep.models[c.model].identifier()),
        |c| {
            let model = &prep.models[c.model];
            let img = &prep.images[c.cell.image];
            let target = &prep.targets[c.target].1;
            let mask = &c.cell.mask;
            let adv = c.craft(cfg, &prep, model)?;
            let benign = inpaint(model.as_ref(), img, mask)?;
            let mark = inpaint(model.as_ref(), &adv, mask)?;
            let record = |defense: String, loss_to_target, loss_to_benign| DefenseRecord {
                image: prep.image_names[c.cell.image].clone(),
                coverage: cfg.coverages[c.cell.coverage],
                mask_index: c.cell.index,
                target: prep.targets[c.target].0.clone(),
                epsilon: cfg.epsilons[c.epsilon],
                model: model.identifier().to_string(),
                defense,
                loss_to_target,
                loss_to_benign,
            };
            let mut out = vec![record(
                UNDEFENDED.to_string(),
                patch_loss(&mark, target, mask, &prep.loss)?,
                patch_loss(&mark, &benign, mask, &prep.loss)?,
            )];
            for row in defense_sweep(img, &adv, mask, target, model.as_ref(), &prep.defenses, &prep.loss)? {
                out.push(record(row.spec.to_string(), row.loss_to_target, row.loss_to_benign));
            }
            Ok(out)
        },
    );
    let rows: Vec<DefenseRecord> = results.into_iter().flatten().collect();

    let out = output_dir(cfg)?;
    let mut row_table = Table::new([
        "image", "coverage", "mask_index", "target", "epsilon", "model", "defense", "loss_to_target", "loss_to_benign",
    ]);
    for r in &rows {
        row_table.push(vec![
            r.image.clone(),
            fmt_f64(r.coverage),
            r.mask_index.to_string(),
            r.target.clone(),
            fmt_f64(r.epsilon),
            r.model.clone(),
            r.defense.clone(),
            fmt_f64(r.loss_to_target),
            fmt_f64(r.loss_to_benign),
        ]);
    }
    let defenses: Vec<String> = std::iter::once(UNDEFENDED.to_string())
        .chain(prep.defenses.iter().map(|d| d.to_string()))
        .collect();
    let models: Vec<String> = prep.models.iter().map(|m| m.identifier().to_string()).collect();
    let rank_eps = |e: f64| cfg.epsilons.iter().position(|&x| x == e).unwrap_or(usize::MAX);
    let rank = |list: &[String], s: &str| list.iter().position(|x| x == s).unwrap_or(usize::MAX);
    let to_target = |r: &DefenseRecord| r.loss_to_target;
    let to_benign = |r: &DefenseRecord| r.loss_to_benign;
    let mut groups = summarise(
        &rows,
        |r| (rank_eps(r.epsilon), rank(&models, &r.model), rank(&defenses, &r.defense)),
        &[&to_target, &to_benign],
    );
    groups.sort_by_key(|g| g.0);
    let mut summary = Table::new([
        "epsilon",
        "model",
        "defense",
        "kind",
        "parameter",
        "loss_to_target_mean",
        "loss_to_target_std",
        "loss_to_benign_mean",
        "loss_to_benign_std",
        "n",
    ]);
    for ((e, m, d), stats, n) in groups {
        let (kind, parameter) = match d {
            0 => (UNDEFENDED.to_string(), String::new()),
            _ => {
                let spec = &prep.defenses[d - 1];
                (spec.kind.as_str().to_string(), fmt_f64(spec.parameter))
            }
        };
        summary.push(vec![
            fmt_f64(cfg.epsilons[e]),
            models[m].clone(),
            defenses[d].clone(),
            kind,
            parameter,
            fmt_f64(stats[0].0),
            fmt_f64(stats[0].1),
            fmt_f64(stats[1].0),
            fmt_f64(stats[1].1),
            n.to_string(),
        ]);
    }
    let files = vec![
        row_table.write(&out.join("defense_rows.csv"))?,
        summary.write(&out.join("defense_summary.csv"))?,
    ];
    finish(cfg, "defense", start, rows, failures, files)
}

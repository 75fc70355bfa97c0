//! Output files for one experiment directory: per-run records, flat
//! metrics tables, the layout-by-phase-count comparison table, and a
//! schema card. Every write goes through a temp file and a rename, and
//! every float is printed with the shortest round-trip form so reruns are
//! byte-identical. Wall-clock timing lives in its own sidecar, excluded
//! from that guarantee.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_layout, serialize_config, ExperimentConfig, JobResult, Plan, PlannedJob};
use crate::error::{Error, Result};
use crate::protocol::{aggregate_runs, RunSummary};
use crate::trainer::AlphaRecord;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("no file name in {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Data(format!("json: {e}"))
}

fn csv_bytes(
    build: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> std::result::Result<(), csv::Error>,
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    build(&mut w).map_err(|e| Error::Data(format!("table: {e}")))?;
    w.into_inner().map_err(|e| Error::Data(format!("table: {e}")))
}

/// One line of `summaries.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredRun {
    pub layout: String,
    pub n_phases: usize,
    pub seed: u64,
    pub summary: RunSummary,
}

/// One run's α trajectory plus enough context to demand its presence.
pub struct TrajectoryEntry<'a> {
    pub layout: &'a str,
    pub n_phases: usize,
    pub seed: u64,
    /// Dual layouts that trained for at least one epoch must have logged.
    pub expects_records: bool,
    pub records: &'a [AlphaRecord],
}

/// Writes the raw aggregation-weight trajectory, one row per
/// (layout, phase count, seed, phase, epoch, level). No smoothing is
/// applied; plotting tools can do their own.
pub fn emit_alpha_table(path: &Path, entries: &[TrajectoryEntry<'_>]) -> Result<()> {
    for e in entries {
        if e.expects_records && e.records.is_empty() {
            return Err(Error::Data(format!(
                "run {} n{} seed {} produced no aggregation-weight trajectory",
                e.layout, e.n_phases, e.seed
            )));
        }
    }
    let bytes = csv_bytes(|w| {
        w.write_record([
            "layout",
            "n_phases",
            "seed",
            "phase",
            "epoch",
            "level",
            "alpha_stable",
            "alpha_plastic",
        ])?;
        for e in entries {
            for rec in e.records {
                w.write_record([
                    e.layout.to_string(),
                    e.n_phases.to_string(),
                    e.seed.to_string(),
                    rec.phase.to_string(),
                    rec.epoch.to_string(),
                    rec.level.to_string(),
                    rec.alpha_stable.to_string(),
                    rec.alpha_plastic.to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// "mean ± half-width" over the group's average incremental accuracies;
/// a bare value for a single run, empty for none.
fn comparison_cell(summaries: &[RunSummary]) -> Result<String> {
    match summaries.len() {
        0 => Ok(String::new()),
        1 => Ok(summaries[0].average_incremental_accuracy.to_string()),
        _ => {
            let agg = aggregate_runs(summaries)?;
            Ok(format!(
                "{} \u{b1} {}",
                agg.average_incremental_accuracy.mean, agg.average_incremental_accuracy.half_width
            ))
        }
    }
}

fn comparison_bytes(
    layouts: &[String],
    phase_counts: &[usize],
    groups: &BTreeMap<(String, usize), Vec<RunSummary>>,
) -> Result<Vec<u8>> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["layout".to_string()];
    header.extend(phase_counts.iter().map(|n| format!("n={n}")));
    rows.push(header);
    for layout in layouts {
        let mut row = vec![layout.clone()];
        for &n in phase_counts {
            let cell = match groups.get(&(layout.clone(), n)) {
                Some(s) => comparison_cell(s)?,
                None => String::new(),
            };
            row.push(cell);
        }
        rows.push(row);
    }
    csv_bytes(|w| {
        for row in &rows {
            w.write_record(row)?;
        }
        Ok(())
    })
}

/// Writes every output file for a finished experiment.
pub fn write_all(cfg: &ExperimentConfig, plan: &Plan, results: &[JobResult]) -> Result<()> {
    let dir = &cfg.output_dir;
    write_atomic(
        &dir.join("config.resolved.toml"),
        serialize_config(cfg)?.as_bytes(),
    )?;

    let mut summary_lines = String::new();
    let mut error_lines = String::new();
    for r in results {
        match &r.outcome {
            Ok(out) => {
                let run_dir = dir.join("runs").join(&r.job.layout);
                fs::create_dir_all(&run_dir)?;
                let path = run_dir.join(format!("n{}_seed_{}.json", r.job.n_phases, r.job.seed));
                let mut text =
                    serde_json::to_string_pretty(&out.summary).map_err(json_err)?;
                text.push('\n');
                write_atomic(&path, text.as_bytes())?;

                let line = StoredRun {
                    layout: r.job.layout.clone(),
                    n_phases: r.job.n_phases,
                    seed: r.job.seed,
                    summary: out.summary.clone(),
                };
                summary_lines.push_str(&serde_json::to_string(&line).map_err(json_err)?);
                summary_lines.push('\n');
            }
            Err(record) => {
                error_lines.push_str(&serde_json::to_string(record).map_err(json_err)?);
                error_lines.push('\n');
            }
        }
    }
    write_atomic(&dir.join("summaries.jsonl"), summary_lines.as_bytes())?;
    if !error_lines.is_empty() {
        write_atomic(&dir.join("errors.jsonl"), error_lines.as_bytes())?;
    }

    let metrics = csv_bytes(|w| {
        w.write_record([
            "layout",
            "n_phases",
            "seed",
            "phase",
            "seen_classes",
            "test_accuracy",
            "param_count",
            "memory_bytes",
        ])?;
        for r in results {
            let Ok(out) = &r.outcome else { continue };
            for p in &out.summary.per_phase {
                w.write_record([
                    r.job.layout.clone(),
                    r.job.n_phases.to_string(),
                    r.job.seed.to_string(),
                    p.phase_index.to_string(),
                    p.seen_classes.to_string(),
                    p.test_accuracy.to_string(),
                    p.param_count.to_string(),
                    p.memory_bytes.to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    write_atomic(&dir.join("metrics.csv"), &metrics)?;

    let groups_csv = csv_bytes(|w| {
        w.write_record([
            "layout",
            "n_phases",
            "seed",
            "phase",
            "group",
            "accuracy",
        ])?;
        for r in results {
            let Ok(out) = &r.outcome else { continue };
            for p in &out.summary.per_phase {
                for (&group, &acc) in &p.per_group_accuracy {
                    w.write_record([
                        r.job.layout.clone(),
                        r.job.n_phases.to_string(),
                        r.job.seed.to_string(),
                        p.phase_index.to_string(),
                        group.to_string(),
                        acc.to_string(),
                    ])?;
                }
            }
        }
        Ok(())
    })?;
    write_atomic(&dir.join("group_metrics.csv"), &groups_csv)?;

    let entries: Vec<TrajectoryEntry<'_>> = results
        .iter()
        .filter_map(|r| {
            let out = r.outcome.as_ref().ok()?;
            Some(TrajectoryEntry {
                layout: &r.job.layout,
                n_phases: r.job.n_phases,
                seed: r.job.seed,
                expects_records: expects_trajectory(cfg, &r.job),
                records: &out.alpha_trajectory,
            })
        })
        .collect();
    emit_alpha_table(&dir.join("alpha_table.csv"), &entries)?;

    let mut layouts = Vec::new();
    for job in &plan.jobs {
        if !layouts.contains(&job.layout) {
            layouts.push(job.layout.clone());
        }
    }
    let mut grouped: BTreeMap<(String, usize), Vec<RunSummary>> = BTreeMap::new();
    for r in results {
        if let Ok(out) = &r.outcome {
            grouped
                .entry((r.job.layout.clone(), r.job.n_phases))
                .or_default()
                .push(out.summary.clone());
        }
    }
    let comparison = comparison_bytes(&layouts, &plan.phase_counts, &grouped)?;
    write_atomic(&dir.join("comparison.csv"), &comparison)?;

    let timing = csv_bytes(|w| {
        w.write_record(["layout", "n_phases", "seed", "phase", "wall_time_s"])?;
        for r in results {
            let Ok(out) = &r.outcome else { continue };
            for p in &out.summary.per_phase {
                w.write_record([
                    r.job.layout.clone(),
                    r.job.n_phases.to_string(),
                    r.job.seed.to_string(),
                    p.phase_index.to_string(),
                    p.wall_time_s.to_string(),
                ])?;
            }
        }
        Ok(())
    })?;
    write_atomic(&dir.join("timing.csv"), &timing)?;

    let schema = serde_json::json!({
        "schema_version": super::SCHEMA_VERSION,
        "files": {
            "config.resolved.toml": "configuration the runs used, command-line overrides folded in",
            "runs/<layout>/n<N>_seed_<S>.json": "one run summary per completed job",
            "summaries.jsonl": "one line per completed job: layout, n_phases, seed, summary",
            "errors.jsonl": "one line per failed job; absent when everything succeeded",
            "metrics.csv": "one row per phase of each run: accuracy and bookkeeping",
            "group_metrics.csv": "per-phase accuracy split by the phase each class group arrived in",
            "alpha_table.csv": "raw aggregation-weight trajectory per (phase, epoch, level)",
            "comparison.csv": "layouts by phase counts; cells are mean \u{b1} half-width of average incremental accuracy",
            "timing.csv": "measured wall-clock seconds per phase; excluded from determinism guarantees",
            "checkpoints/": "end-of-phase model archives, one directory per run"
        }
    });
    let mut schema_text = serde_json::to_string_pretty(&schema).map_err(json_err)?;
    schema_text.push('\n');
    write_atomic(&dir.join("schema.json"), schema_text.as_bytes())?;
    Ok(())
}

/// Whether a job of this shape must have produced trajectory records.
fn expects_trajectory(cfg: &ExperimentConfig, job: &PlannedJob) -> bool {
    let dual = parse_layout(&job.layout).map(|v| v.is_dual()).unwrap_or(false);
    dual && cfg.trainer.epochs > 0 && job.n_phases >= 1 && cfg.arch.levels > 0
}

/// Parses `summaries.jsonl` back into structured records.
pub fn read_summaries(dir: &Path) -> Result<Vec<StoredRun>> {
    let path = dir.join("summaries.jsonl");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let run = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(run);
    }
    Ok(out)
}

/// Rebuilds `comparison.csv` from the stored summaries and returns its
/// text. Row and column order follow first appearance in the store, which
/// preserves the original plan order.
pub fn report(dir: &Path) -> Result<String> {
    let stored = read_summaries(dir)?;
    if stored.is_empty() {
        return Err(Error::Data("no stored summaries to report on".into()));
    }
    let mut layouts: Vec<String> = Vec::new();
    let mut phase_counts: Vec<usize> = Vec::new();
    let mut grouped: BTreeMap<(String, usize), Vec<RunSummary>> = BTreeMap::new();
    for s in &stored {
        if !layouts.contains(&s.layout) {
            layouts.push(s.layout.clone());
        }
        if !phase_counts.contains(&s.n_phases) {
            phase_counts.push(s.n_phases);
        }
        grouped
            .entry((s.layout.clone(), s.n_phases))
            .or_default()
            .push(s.summary.clone());
    }
    let bytes = comparison_bytes(&layouts, &phase_counts, &grouped)?;
    write_atomic(&dir.join("comparison.csv"), &bytes)?;
    Ok(String::from_utf8(bytes).expect("tables are utf-8"))
}

//! Report emission: per-round CSV, run summary JSON, and the trace
//! archive the `report` subcommand replays.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrate::{RunTrace, StageTimings};
use crate::select::EvalReport;
use crate::sparse::UpdateStrategy;

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TRACE_JSON: &str = "trace.json";

/// One parsed row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub selected: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub omega: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub rounds: usize,
    pub selected_strategies: Vec<String>,
    pub final_report: EvalReport,
    pub final_mask_digest: String,
    pub stage_totals_ms: StageTimings,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Csv(format!("bad float `{cell}`: {e}")))
}

fn strategy_label(report: &EvalReport, selected: bool) -> String {
    let base = report
        .strategy
        .map(|s| s.label())
        .unwrap_or_else(|| "baseline".to_string());
    if selected {
        format!("selected:{base}")
    } else {
        base
    }
}

fn row_fields(round: usize, report: &EvalReport, selected: bool) -> Vec<String> {
    vec![
        round.to_string(),
        strategy_label(report, selected),
        report.task_acc_pct.to_string(),
        fmt_opt(report.mia_acc_b_pct),
        fmt_opt(report.mia_acc_w_pct),
        fmt_opt(report.tm_b),
        fmt_opt(report.tm_w),
        report.tm_combined.to_string(),
        report.sparsity.to_string(),
    ]
}

/// Write `rounds.csv` for a trace: four candidate rows per round followed
/// by one selected-marker row; baseline traces emit their single final
/// report.
pub fn write_rounds_csv(trace: &RunTrace, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    writer
        .write_record([
            "round",
            "strategy",
            "task_acc_pct",
            "mia_acc_b_pct",
            "mia_acc_w_pct",
            "tm_b",
            "tm_w",
            "tm_m",
            "sparsity",
        ])
        .map_err(|e| Error::Csv(e.to_string()))?;
    if trace.rounds.is_empty() {
        writer
            .write_record(row_fields(0, &trace.final_report, false))
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    for round in &trace.rounds {
        for report in &round.candidates {
            writer
                .write_record(row_fields(round.round, report, false))
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        writer
            .write_record(row_fields(
                round.round,
                &round.candidates[round.selected],
                true,
            ))
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Parse `rounds.csv` back into reports; float formatting round-trips
/// exactly.
pub fn parse_rounds_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let round: usize = record[0]
            .parse()
            .map_err(|e| Error::Csv(format!("bad round `{}`: {e}", &record[0])))?;
        let (selected, label) = match record[1].strip_prefix("selected:") {
            Some(rest) => (true, rest),
            None => (false, &record[1]),
        };
        let strategy = UpdateStrategy::from_label(label);
        if strategy.is_none() && label != "baseline" {
            return Err(Error::Csv(format!("unknown strategy `{label}`")));
        }
        let candidate = strategy
            .map(|s| {
                UpdateStrategy::all()
                    .iter()
                    .position(|&x| x == s)
                    .expect("strategy from the fixed grid")
            })
            .unwrap_or(0);
        rows.push(CsvRow {
            round,
            selected,
            report: EvalReport {
                candidate,
                strategy,
                task_acc_pct: record[2]
                    .parse()
                    .map_err(|e| Error::Csv(format!("bad float `{}`: {e}", &record[2])))?,
                mia_acc_b_pct: parse_opt(&record[3])?,
                mia_acc_w_pct: parse_opt(&record[4])?,
                tm_b: parse_opt(&record[5])?,
                tm_w: parse_opt(&record[6])?,
                tm_combined: record[7]
                    .parse()
                    .map_err(|e| Error::Csv(format!("bad float `{}`: {e}", &record[7])))?,
                sparsity: record[8]
                    .parse()
                    .map_err(|e| Error::Csv(format!("bad float `{}`: {e}", &record[8])))?,
            },
        });
    }
    Ok(rows)
}

pub fn summarize(trace: &RunTrace) -> Summary {
    let mut totals = StageTimings::default();
    for round in &trace.rounds {
        totals.train_ms += round.timings.train_ms;
        totals.update_ms += round.timings.update_ms;
        totals.attack_ms += round.timings.attack_ms;
        totals.eval_ms += round.timings.eval_ms;
    }
    Summary {
        mode: trace.mode.to_string(),
        omega: trace.omega,
        lambda: trace.lambda,
        alpha: trace.alpha,
        seed: trace.seed,
        rounds: trace.rounds.len(),
        selected_strategies: trace.selected_strategies(),
        final_report: trace.final_report.clone(),
        final_mask_digest: trace.final_mask_digest.clone(),
        stage_totals_ms: totals,
    }
}

/// Write the report files into `dir`, returning the paths created.
pub fn emit_report(trace: &RunTrace, dir: &Path) -> Result<Vec<PathBuf>> {
    if trace.rounds.is_empty() && trace.final_report.task_acc_pct.is_nan() {
        return Err(Error::Report("empty trace".to_string()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join(ROUNDS_CSV);
    write_rounds_csv(trace, &csv_path)?;
    written.push(csv_path);
    let summary_path = dir.join(SUMMARY_JSON);
    let summary = summarize(trace);
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("serializes"),
    )?;
    written.push(summary_path);
    Ok(written)
}

pub fn save_trace(trace: &RunTrace, path: &Path) -> Result<()> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(trace).expect("serializes"),
    )?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<RunTrace> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Report(format!("bad trace file: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrate::{Mode, RoundTrace};

    fn fake_report(
        candidate: usize,
        task: f64,
        mia_b: Option<f64>,
        mia_w: Option<f64>,
    ) -> EvalReport {
        EvalReport::score(
            candidate,
            Some(UpdateStrategy::all()[candidate]),
            task,
            mia_b,
            mia_w,
            1.0,
            0.5,
            0.0973,
        )
        .unwrap()
    }

    fn fake_trace() -> RunTrace {
        let candidates: Vec<EvalReport> = (0..4)
            .map(|i| {
                fake_report(
                    i,
                    70.25 + i as f64 * 0.125,
                    Some(55.5 - i as f64),
                    if i % 2 == 0 { Some(58.25) } else { None },
                )
            })
            .collect();
        RunTrace {
            mode: Mode::Bmia,
            omega: 0.1,
            lambda: 1.0,
            alpha: 0.5,
            seed: 9,
            rounds: vec![RoundTrace {
                round: 0,
                prune_fraction: 0.3,
                candidates: candidates.clone(),
                selected: 2,
                active_before: 537,
                active_after: 537,
                sparsity_after: 0.0973,
                sparsity_ok: true,
                timings: StageTimings {
                    train_ms: 10,
                    update_ms: 20,
                    attack_ms: 30,
                    eval_ms: 40,
                },
            }],
            final_report: candidates[2].clone(),
            final_mask_digest: "00ff00ff00ff00ff".to_string(),
        }
    }

    #[test]
    fn one_round_trace_writes_five_rows() {
        let dir = tempfile::tempdir().unwrap();
        let trace = fake_trace();
        emit_report(&trace, dir.path()).unwrap();
        let rows = parse_rounds_csv(&dir.path().join(ROUNDS_CSV)).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows.iter().filter(|r| r.selected).count(), 1);
        assert_eq!(rows[4].report.strategy, Some(UpdateStrategy::all()[2]));
    }

    #[test]
    fn csv_reparse_reproduces_reports_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let trace = fake_trace();
        emit_report(&trace, dir.path()).unwrap();
        let rows = parse_rounds_csv(&dir.path().join(ROUNDS_CSV)).unwrap();
        for (i, row) in rows.iter().take(4).enumerate() {
            assert_eq!(row.report, trace.rounds[0].candidates[i]);
        }
        assert_eq!(rows[4].report, trace.rounds[0].candidates[2]);
    }

    #[test]
    fn tm_columns_recompute_from_accuracy_columns() {
        let dir = tempfile::tempdir().unwrap();
        let trace = fake_trace();
        emit_report(&trace, dir.path()).unwrap();
        for row in parse_rounds_csv(&dir.path().join(ROUNDS_CSV)).unwrap() {
            assert!(row.report.consistent(1.0, 0.5, 1e-9));
        }
    }

    #[test]
    fn summary_totals_and_fields() {
        let trace = fake_trace();
        let summary = summarize(&trace);
        assert_eq!(summary.rounds, 1);
        assert_eq!(summary.stage_totals_ms.train_ms, 10);
        assert_eq!(summary.selected_strategies, vec!["threshold+gradient"]);
    }

    #[test]
    fn trace_archive_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let trace = fake_trace();
        let path = dir.path().join(TRACE_JSON);
        save_trace(&trace, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded, trace);
    }

    #[test]
    fn baseline_trace_emits_single_row() {
        let mut trace = fake_trace();
        trace.rounds.clear();
        trace.final_report =
            EvalReport::score(0, None, 68.5, Some(61.0), None, 1.0, 0.5, 0.0999).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&trace, dir.path()).unwrap();
        let rows = parse_rounds_csv(&dir.path().join(ROUNDS_CSV)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].report, trace.final_report);
    }
}

//! Summaries of finished runs: loss curves and evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use biembed_core::eval::MetricReport;
use biembed_core::training::MetricRecord;

use crate::commands::{Command, EVAL_REPORT, METRICS_FILE};
use crate::CliError;

const STAGES: [Command; 3] = [Command::Pretrain, Command::TrainPairs, Command::TrainMultitask];

/// Everything `report` found in one run directory. Series are keyed
/// `stage/dataset/loss_kind`; evaluation metrics `eval/task/metric`.
#[derive(Clone, Debug, Default)]
pub struct RunData {
    pub name: String,
    pub series: BTreeMap<String, Vec<(usize, f64)>>,
    pub warnings: Vec<String>,
}

impl RunData {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Parses a metrics log, skipping malformed lines with a warning.
pub fn read_metrics(path: &Path, run: &mut RunData, stage: &str) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                run.warn(format!("{} line {}: skipped malformed record ({e})", path.display(), i + 1));
                continue;
            }
        };
        let key = format!("{stage}/{}/{}", rec.dataset, rec.loss_kind);
        if let Some(loss) = rec.loss {
            run.series.entry(key.clone()).or_default().push((rec.step, loss));
        }
        if let Some(acc) = rec.accuracy {
            run.series
                .entry(format!("{key}/accuracy"))
                .or_default()
                .push((rec.step, acc));
        }
    }
    Ok(())
}

/// Collects the metrics log(s) and evaluation report of a run directory.
/// A directory holding `metrics.jsonl` itself is read as a single stage.
pub fn collect_run(dir: &Path) -> Result<RunData, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("{}: not a run directory", dir.display())));
    }
    let mut run = RunData {
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        ..Default::default()
    };
    let direct = dir.join(METRICS_FILE);
    if direct.is_file() {
        read_metrics(&direct, &mut run, "run")?;
    }
    for s in STAGES {
        let p = dir.join(s.name()).join(METRICS_FILE);
        if p.is_file() {
            read_metrics(&p, &mut run, s.name())?;
        }
    }
    for p in [dir.join(Command::Eval.name()).join(EVAL_REPORT), dir.join(EVAL_REPORT)] {
        if !p.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        match serde_json::from_str::<Vec<MetricReport>>(&text) {
            Ok(reports) => {
                for r in reports {
                    for (m, v) in r.metrics {
                        run.series.insert(format!("eval/{}/{m}", r.task), vec![(0, v)]);
                    }
                }
            }
            Err(e) => run.warn(format!("{}: unreadable evaluation report ({e})", p.display())),
        }
    }
    if run.series.is_empty() {
        run.warn(format!("{}: empty report, no metrics found", dir.display()));
    }
    Ok(run)
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// One run: a row per series with count, first and last value. Several
/// runs: a row per series, a column per run holding the last value.
pub fn render_report(runs: &[RunData]) -> String {
    if let [run] = runs {
        let header = ["series", "n", "first", "last"].map(String::from);
        let rows: Vec<Vec<String>> = run
            .series
            .iter()
            .map(|(k, v)| {
                vec![
                    k.clone(),
                    v.len().to_string(),
                    fmt(v.first().map_or(f64::NAN, |p| p.1)),
                    fmt(v.last().map_or(f64::NAN, |p| p.1)),
                ]
            })
            .collect();
        return table(&header, &rows);
    }
    let mut keys: Vec<&String> = runs.iter().flat_map(|r| r.series.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut header = vec!["series".to_string()];
    header.extend(runs.iter().map(|r| r.name.clone()));
    let rows: Vec<Vec<String>> = keys
        .into_iter()
        .map(|k| {
            let mut row = vec![k.clone()];
            row.extend(runs.iter().map(|r| {
                r.series
                    .get(k)
                    .and_then(|v| v.last())
                    .map_or_else(|| "-".to_string(), |p| fmt(p.1))
            }));
            row
        })
        .collect();
    table(&header, &rows)
}

/// Long-format CSV (`run,series,step,value`) for external plotting.
pub fn loss_curves_csv(runs: &[RunData]) -> String {
    let mut out = String::from("run,series,step,value\n");
    for r in runs {
        for (k, v) in &r.series {
            for (step, val) in v {
                let _ = writeln!(out, "{},{},{step},{val}", csv_field(&r.name), csv_field(k));
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads every run, writes the CSV to `csv_path` and returns the table.
pub fn cmd_report(dirs: &[PathBuf], csv_path: &Path) -> Result<(String, Vec<RunData>), CliError> {
    let runs: Vec<RunData> = dirs.iter().map(|d| collect_run(d)).collect::<Result<_, _>>()?;
    std::fs::write(csv_path, loss_curves_csv(&runs))
        .map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
    Ok((render_report(&runs), runs))
}

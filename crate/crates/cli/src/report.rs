//! Merges evaluation CSVs of several runs into one summary plus one
//! series file per metric for external plotting.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::eval::{write_csv, COLUMNS};

/// Metric columns, everything after `scene` and `frame`.
const METRICS: std::ops::Range<usize> = 2..12;

#[derive(Clone, Debug, PartialEq)]
pub struct RunTable {
    pub source: PathBuf,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportOutcome {
    pub runs: usize,
    /// Inputs skipped as partial or unreadable, with the reason.
    pub flagged: Vec<String>,
}

/// `dir/report.csv` for a run directory, or the path itself for a file.
pub fn eval_csv_of(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("report.csv")
    } else {
        path.to_path_buf()
    }
}

pub fn read_run(path: &Path) -> Result<RunTable> {
    let file = eval_csv_of(path);
    let mut r = csv::Reader::from_path(&file).map_err(|e| CliError::io(&file, e))?;
    let header: Vec<String> = r.headers().map_err(|e| CliError::io(&file, e))?.iter().map(String::from).collect();
    if header != COLUMNS {
        return Err(CliError::io(&file, format!("unexpected columns {header:?}")));
    }
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect::<Vec<_>>()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::io(&file, e))?;
    if rows.is_empty() {
        return Err(CliError::io(&file, "no rows"));
    }
    Ok(RunTable { source: file, rows })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Writes `summary.csv` and `series/<metric>.csv` under `out`. One run
/// reproduces its table unchanged; several runs give `<metric>_mean` and
/// `<metric>_std` (sample deviation over the runs that define the value).
/// Runs whose rows do not line up with the first run are flagged and left
/// out.
pub fn build_report(inputs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    if inputs.is_empty() {
        return Err(CliError::usage("report needs at least one run directory or CSV"));
    }
    let mut outcome = ReportOutcome::default();
    let mut runs: Vec<RunTable> = Vec::new();
    for p in inputs {
        match read_run(p) {
            Ok(t) => {
                let keys = |t: &RunTable| t.rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect::<Vec<_>>();
                if let Some(first) = runs.first() {
                    if keys(first) != keys(&t) {
                        outcome.flagged.push(format!("{}: rows differ from {}", t.source.display(), first.source.display()));
                        continue;
                    }
                }
                runs.push(t);
            }
            Err(e) => outcome.flagged.push(e.to_string()),
        }
    }
    for f in &outcome.flagged {
        log::warn!("skipping {f}");
    }
    if runs.is_empty() {
        return Err(CliError::usage(format!("no complete runs among {} inputs", inputs.len())));
    }
    outcome.runs = runs.len();
    fs::create_dir_all(out.join("series")).map_err(|e| CliError::io(out, e))?;

    if runs.len() == 1 {
        write_csv(&out.join("summary.csv"), &COLUMNS, runs[0].rows.clone())?;
    } else {
        let mut header = vec!["scene".to_string(), "frame".to_string()];
        for c in &COLUMNS[METRICS] {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        header.push("runs".into());
        let rows = (0..runs[0].rows.len()).map(|i| {
            let mut row = runs[0].rows[i][..2].to_vec();
            for c in METRICS {
                let xs: Vec<f64> = runs.iter().filter_map(|r| r.rows[i][c].parse().ok()).collect();
                if xs.is_empty() {
                    row.extend(["n/a".to_string(), "n/a".to_string()]);
                } else {
                    let (m, s) = mean_std(&xs);
                    row.extend([format!("{m:.2}"), format!("{s:.2}")]);
                }
            }
            row.push(runs.len().to_string());
            row
        });
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&out.join("summary.csv"), &header, rows)?;
    }

    let mut header = vec!["scene".to_string(), "frame".to_string()];
    header.extend((0..runs.len()).map(|k| format!("run_{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for c in METRICS {
        let rows = (0..runs[0].rows.len()).map(|i| {
            let mut row = runs[0].rows[i][..2].to_vec();
            row.extend(runs.iter().map(|r| r.rows[i][c].clone()));
            row
        });
        write_csv(&out.join("series").join(format!("{}.csv", COLUMNS[c])), &header, rows)?;
    }
    let sources: Vec<String> = runs.iter().map(|r| r.source.display().to_string()).collect();
    fs::write(out.join("sources.txt"), sources.join("\n") + "\n").map_err(|e| CliError::io(out, e))?;
    if !outcome.flagged.is_empty() {
        fs::write(out.join("flags.txt"), outcome.flagged.join("\n") + "\n").map_err(|e| CliError::io(out, e))?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(dir: &Path, name: &str, iou: &str) -> PathBuf {
        let d = dir.join(name);
        fs::create_dir_all(&d).unwrap();
        let body = format!(
            "{}\na,0,{iou},50.00,n/a,50.00,n/a,n/a,n/a,n/a,n/a,n/a\nmean,all,{iou},50.00,n/a,50.00,1.00,0.00,4,3,90.00,99.00\n",
            COLUMNS.join(",")
        );
        fs::write(d.join("report.csv"), body).unwrap();
        d
    }

    #[test]
    fn single_run_is_copied() {
        let dir = tempfile::tempdir().unwrap();
        let run = table(dir.path(), "r0", "80.00");
        let out = dir.path().join("out");
        build_report(&[run.clone()], &out).unwrap();
        assert_eq!(fs::read(out.join("summary.csv")).unwrap(), fs::read(run.join("report.csv")).unwrap());
    }

    #[test]
    fn two_runs_give_mean_and_std() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![table(dir.path(), "r0", "80.00"), table(dir.path(), "r1", "90.00"), dir.path().join("missing")];
        let out = dir.path().join("out");
        let o = build_report(&runs, &out).unwrap();
        assert_eq!((o.runs, o.flagged.len()), (2, 1));
        let text = fs::read_to_string(out.join("summary.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("scene,frame,IoU_mean,IoU_std,mIoU_all_mean"));
        assert!(lines[1].starts_with("a,0,85.00,7.07,50.00,0.00,n/a,n/a"), "{}", lines[1]);
        let series = fs::read_to_string(out.join("series/IoU.csv")).unwrap();
        assert_eq!(series.lines().nth(1), Some("a,0,80.00,90.00"));
        assert!(out.join("flags.txt").exists());
    }

    #[test]
    fn empty_input_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_report(&[], dir.path()), Err(CliError::Usage(_))));
        assert!(matches!(build_report(&[dir.path().join("nope")], dir.path()), Err(CliError::Usage(_))));
    }
}

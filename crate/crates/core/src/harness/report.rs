use super::commands::RESULT_FILE;
use super::plot::{line_chart, unit_bar_chart};
use super::{write_file, HarnessError};
use crate::trainer::{RunResult, TrainMode};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

/// One row of the comparison table: seed means plus their std.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run_id: String,
    pub method: String,
    pub labeled: usize,
    pub unlabeled: usize,
    pub seeds: usize,
    pub dice: f64,
    pub dice_std: f64,
    pub jaccard: f64,
    pub jaccard_std: f64,
    pub hd: f64,
    pub hd_std: f64,
    pub asd: f64,
    pub asd_std: f64,
}

impl ReportRow {
    fn from_result(r: &RunResult) -> Self {
        let method = match r.mode {
            TrainMode::Supervised => r.method.clone(),
            TrainMode::FpSemisup => format!("{} (fp)", r.method),
        };
        Self {
            run_id: r.run_id.clone(),
            method,
            labeled: r.labeled_count,
            // supervised runs never see the unlabeled pool
            unlabeled: r.unlabeled_count,
            seeds: r.per_seed.len(),
            dice: r.mean.dice,
            dice_std: r.std.dice,
            jaccard: r.mean.jaccard,
            jaccard_std: r.std.jaccard,
            hd: r.mean.hausdorff_mm,
            hd_std: r.std.hausdorff_mm,
            asd: r.mean.asd_mm,
            asd_std: r.std.asd_mm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Result files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub files: Vec<PathBuf>,
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(HarnessError::io(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(HarnessError::io(dir))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_results(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RESULT_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_result(path: &Path) -> Result<RunResult, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let r: RunResult = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if r.per_seed.is_empty() {
        return Err("result has no finished seeds".into());
    }
    Ok(r)
}

fn markdown(rows: &[ReportRow]) -> String {
    let mut table = String::from("| Run | Method | La | Un | Dice | Jaccard | HD (mm) | ASD (mm) |\n");
    table += "|---|---|---:|---:|---:|---:|---:|---:|\n";
    let mut notes = String::new();
    for (i, r) in rows.iter().enumerate() {
        let mark = if r.seeds > 1 {
            format!("[^{}]", i + 1)
        } else {
            String::new()
        };
        table += &format!(
            "| {} | {} | {} | {} | {:.4}{mark} | {:.4} | {:.2} | {:.2} |\n",
            r.run_id, r.method, r.labeled, r.unlabeled, r.dice, r.jaccard, r.hd, r.asd
        );
        if r.seeds > 1 {
            notes += &format!(
                "[^{}]: std over {} seeds: Dice {:.4}, Jaccard {:.4}, HD {:.2}, ASD {:.2}.\n",
                i + 1,
                r.seeds,
                r.dice_std,
                r.jaccard_std,
                r.hd_std,
                r.asd_std
            );
        }
    }
    let mut out = format!("# Results\n\nCells are means over seeds.\n\n{table}");
    if !notes.is_empty() {
        out += "\n";
        out += &notes;
    }
    out
}

/// Collect every `result.json` under `dir` into `report.md`, `report.csv`
/// and per-run `<run-id>_loss.png` / `<run-id>_dice.png`, written to `out`
/// (default: `dir`). Unreadable result files are skipped with a warning.
pub fn cmd_report(dir: &Path, out: Option<&Path>) -> Result<Report, HarnessError> {
    if !dir.is_dir() {
        return Err(HarnessError::NoResults(dir.to_path_buf()));
    }
    let out = out.unwrap_or(dir);
    let mut paths = Vec::new();
    find_results(dir, &mut paths)?;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match read_result(&p) {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("{}: {e}", p.display());
                skipped.push((p, e));
            }
        }
    }
    if results.is_empty() {
        return Err(HarnessError::NoResults(dir.to_path_buf()));
    }
    std::fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    let rows: Vec<ReportRow> = results.iter().map(ReportRow::from_result).collect();
    let mut files = vec![out.join(REPORT_MD), out.join(REPORT_CSV)];
    write_file(&files[0], markdown(&rows))?;
    let mut w = csv::Writer::from_path(&files[1]).map_err(|e| HarnessError::Io {
        path: files[1].clone(),
        source: std::io::Error::other(e),
    })?;
    for r in &rows {
        w.serialize(r).map_err(|e| HarnessError::Io {
            path: files[1].clone(),
            source: std::io::Error::other(e),
        })?;
    }
    w.flush().map_err(HarnessError::io(&files[1]))?;

    for r in &results {
        let curves: Vec<Vec<(f64, f64)>> = r
            .per_seed
            .iter()
            .map(|s| s.loss_curve.iter().map(|l| (l.iter as f64, l.loss_total)).collect())
            .collect();
        let loss = out.join(format!("{}_loss.png", r.run_id));
        line_chart(&curves, &loss)?;
        let dice: Vec<f64> = r.per_seed.iter().map(|s| s.test.mean.dice).collect();
        let bars = out.join(format!("{}_dice.png", r.run_id));
        unit_bar_chart(&dice, &bars)?;
        files.extend([loss, bars]);
    }
    Ok(Report { rows, skipped, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::commands::tests::{tiny_experiment, tiny_spec};
    use crate::harness::commands::{cmd_gen_data, cmd_train, MANIFEST_HDF5};
    use crate::trainer::Method;

    #[test]
    fn empty_directory_has_no_results() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_report(dir.path(), None).unwrap_err();
        assert_eq!((err.code(), err.exit_code()), ("no_results", 2));
        assert!(err.to_string().contains("no results"));
        std::fs::create_dir(dir.path().join("bad")).unwrap();
        std::fs::write(dir.path().join("bad").join(RESULT_FILE), "{").unwrap();
        assert_eq!(cmd_report(dir.path(), None).unwrap_err().code(), "no_results");
    }

    #[test]
    fn two_runs_make_a_two_row_table_with_std_footnotes() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_gen_data(&tiny_spec(5), &data).unwrap();
        let runs = dir.path().join("runs");
        let mut cfg = tiny_experiment(data.join(MANIFEST_HDF5), runs.join("a"));
        cfg.seeds = vec![0, 1, 2];
        let a = cmd_train(&cfg, false).unwrap();
        cfg.out_dir = runs.join("b");
        cfg.train = crate::trainer::tests::tiny_config(Method::LowerBound);
        cfg.train.iterations = 2;
        let b = cmd_train(&cfg, false).unwrap();
        std::fs::create_dir(runs.join("broken")).unwrap();
        std::fs::write(runs.join("broken").join(RESULT_FILE), "not json").unwrap();

        let report = cmd_report(&runs, Some(&dir.path().join("report"))).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.rows[0].method, "boundaryseg");
        assert_eq!(report.rows[1].method, "lower_bound");
        assert_eq!(report.rows[0].dice, a.mean.dice);
        assert_eq!(report.rows[1].hd_std, b.std.hausdorff_mm);

        let md = std::fs::read_to_string(dir.path().join("report").join(REPORT_MD)).unwrap();
        let table: Vec<&str> = md.lines().filter(|l| l.starts_with("| ")).collect();
        assert_eq!(table.len(), 3);
        assert!(table[1].contains(&format!("{:.4}[^1]", a.mean.dice)));
        assert!(md.contains(&format!("[^1]: std over 3 seeds: Dice {:.4}", a.std.dice)));
        for f in [format!("{}_loss.png", a.run_id), format!("{}_dice.png", b.run_id)] {
            assert!(dir.path().join("report").join(f).exists());
        }
        let csv = std::fs::read_to_string(dir.path().join("report").join(REPORT_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}

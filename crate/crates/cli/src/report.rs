//! `report`: collects finished runs below a directory into a summary table
//! and averaged progressive-accuracy plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dkvb::harness::{bwt, from_jsonl, parse_curve_table, MetricRecord, ResultMatrix, TimingRecord};

use crate::commands::{MeanStd, CURVE_FILE, METRICS_FILE, R_FILE, TIMINGS_FILE};

/// One finished seed as read back from disk.
#[derive(Clone, Debug)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub summary: MetricRecord,
    pub r: ResultMatrix,
    pub epoch_time: Option<f64>,
    pub curve: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub scenario: String,
    pub runs: usize,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub bwt: Option<MeanStd>,
    pub epoch_time: Option<MeanStd>,
    /// Mean progressive accuracy over the runs, single-head CIL only.
    pub curve: Option<Vec<f64>>,
}

fn find_run_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut children: Vec<PathBuf> = entries.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    children.sort();
    if children.iter().any(|p| p.file_name().is_some_and(|n| n == METRICS_FILE)) {
        out.push(dir.to_path_buf());
    }
    for c in children.into_iter().filter(|p| p.is_dir()) {
        find_run_dirs(&c, out)?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Reads one run directory. The stored BWT must equal the one recomputed
/// from the stored R matrix.
pub fn load_run(dir: &Path) -> Result<StoredRun> {
    let records: Vec<MetricRecord> = from_jsonl(&read(&dir.join(METRICS_FILE))?)?;
    let summary = records
        .into_iter()
        .find(|r| r.task_id.is_none())
        .with_context(|| format!("{}: no summary record", dir.display()))?;
    let r = ResultMatrix::from_text(&read(&dir.join(R_FILE))?)?;
    let recomputed = bwt(&r).ok();
    if recomputed != summary.bwt {
        bail!(
            "{}: stored BWT {:?} differs from R matrix value {:?}",
            dir.display(),
            summary.bwt,
            recomputed
        );
    }
    let timings = dir.join(TIMINGS_FILE);
    let epoch_time = if timings.exists() {
        let t: Vec<TimingRecord> = from_jsonl(&read(&timings)?)?;
        t.into_iter().find(|t| t.task_id.is_none()).map(|t| t.epoch_time_mean)
    } else {
        None
    };
    let curve_path = dir.join(CURVE_FILE);
    let curve = if curve_path.exists() {
        Some(parse_curve_table(&read(&curve_path)?)?.into_iter().map(|(_, a)| a).collect())
    } else {
        None
    };
    Ok(StoredRun {
        dir: dir.to_path_buf(),
        summary,
        r,
        epoch_time,
        curve,
    })
}

/// Rows sorted by method, then scenario.
pub fn collect(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut dirs = Vec::new();
    find_run_dirs(dir, &mut dirs)?;
    if dirs.is_empty() {
        bail!("{}: no metric records found", dir.display());
    }
    let mut groups: BTreeMap<(String, String), Vec<StoredRun>> = BTreeMap::new();
    for d in dirs {
        let run = load_run(&d)?;
        let key = (run.summary.method.clone(), run.summary.scenario.clone());
        groups.entry(key).or_default().push(run);
    }
    Ok(groups
        .into_iter()
        .map(|((method, scenario), runs)| {
            let col = |f: &dyn Fn(&StoredRun) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
            let bwt: Option<Vec<f64>> = runs.iter().map(|r| r.summary.bwt).collect();
            let times: Option<Vec<f64>> = runs.iter().map(|r| r.epoch_time).collect();
            let curves: Option<Vec<&Vec<f64>>> = runs.iter().map(|r| r.curve.as_ref()).collect();
            let curve = curves.filter(|c| c.iter().all(|x| x.len() == c[0].len())).map(|c| {
                (0..c[0].len())
                    .map(|i| c.iter().map(|x| x[i]).sum::<f64>() / c.len() as f64)
                    .collect()
            });
            ReportRow {
                method,
                scenario,
                runs: runs.len(),
                accuracy: MeanStd::of(&col(&|r| r.summary.accuracy)),
                macro_f1: MeanStd::of(&col(&|r| r.summary.macro_f1)),
                bwt: bwt.map(|b| MeanStd::of(&b)),
                epoch_time: times.map(|t| MeanStd::of(&t)),
                curve,
            }
        })
        .collect())
}

pub fn format_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<16} {:>4}  {:<17} {:<17} {:<18} epoch-s",
        "method", "scenario", "runs", "acc", "macro-f1", "bwt"
    );
    let na = || "-".to_string();
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:<16} {:>4}  {:<17} {:<17} {:<18} {}",
            r.method,
            r.scenario,
            r.runs,
            r.accuracy.to_string(),
            r.macro_f1.to_string(),
            r.bwt.map_or_else(na, |b| b.to_string()),
            r.epoch_time.map_or_else(na, |t| format!("{:.3} ± {:.3}", t.mean, t.std)),
        );
    }
    out
}

/// Prints nothing itself: returns the table and writes `summary.txt` plus
/// one `progressive_<method>_<scenario>.dat` per row with a curve.
pub fn report(dir: &Path) -> Result<(Vec<ReportRow>, String)> {
    let rows = collect(dir)?;
    let table = format_table(&rows);
    fs::write(dir.join("summary.txt"), &table)?;
    for r in rows.iter().filter(|r| r.curve.is_some()) {
        let path = dir.join(format!("progressive_{}_{}.dat", r.method, r.scenario));
        fs::write(path, dkvb::harness::curve_table(r.curve.as_ref().unwrap()))?;
    }
    Ok((rows, table))
}

//! Cross-run comparison tables: accuracy and TLT against reasoning
//! steps with per-seed rows and aggregated mean/CI rows, TLT step
//! growth, and relative TLT by question type. Everything is derived
//! from the per-run summary.json files, which are themselves
//! recomputable from checkpoints and dumps.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::HarnessError;
use crate::metrics;

use super::eval::RunSummary;

#[derive(Debug)]
pub struct ReportOut {
    pub runs: Vec<RunSummary>,
    /// Run directories skipped because no summary was found.
    pub incomplete: Vec<(PathBuf, String)>,
}

pub fn read_run_summaries(run_dirs: &[PathBuf]) -> ReportOut {
    let mut runs = Vec::new();
    let mut incomplete = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.json");
        match std::fs::read_to_string(&path) {
            Err(e) => incomplete.push((dir.clone(), e.to_string())),
            Ok(text) => match serde_json::from_str::<RunSummary>(&text) {
                Err(e) => incomplete.push((dir.clone(), e.to_string())),
                Ok(summary) => runs.push(summary),
            },
        }
    }
    ReportOut { runs, incomplete }
}

type Cell = (String, usize); // (model, steps)

fn group_by_cell<'a>(
    runs: &'a [RunSummary],
    value: impl Fn(&RunSummary) -> f64,
) -> BTreeMap<Cell, Vec<(&'a RunSummary, f64)>> {
    let mut map: BTreeMap<Cell, Vec<(&RunSummary, f64)>> = BTreeMap::new();
    for r in runs {
        map.entry((r.model.clone(), r.steps))
            .or_default()
            .push((r, value(r)));
    }
    map
}

fn write_metric_csv(
    path: &Path,
    runs: &[RunSummary],
    metric: impl Fn(&RunSummary) -> f64,
) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "kind,model,steps,seed,value,ci95")?;
    let grouped = group_by_cell(runs, metric);
    for ((model, steps), entries) in &grouped {
        for (run, v) in entries {
            writeln!(f, "run,{model},{steps},{},{:.6},", run.seed, v)?;
        }
        let values: Vec<f64> = entries.iter().map(|(_, v)| *v).collect();
        if values.len() >= 2 {
            let (mean, hw) = metrics::summarize(&values)?;
            writeln!(f, "aggregate,{model},{steps},,{mean:.6},{hw:.6}")?;
        } else {
            writeln!(f, "aggregate,{model},{steps},,{:.6},", values[0])?;
        }
    }
    Ok(())
}

/// (TLT_T - TLT_2) / (T - 2) per model from aggregated means; the
/// growth of a constant series is zero.
fn write_growth_csv(path: &Path, runs: &[RunSummary]) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "model,steps,tlt_growth_from_2")?;
    let grouped = group_by_cell(runs, |r| r.mean_tlt);
    let mut means: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for ((model, steps), entries) in &grouped {
        let m = entries.iter().map(|(_, v)| v).sum::<f64>() / entries.len() as f64;
        means.insert((model.clone(), *steps), m);
    }
    let models: Vec<String> = {
        let mut v: Vec<String> = means.keys().map(|(m, _)| m.clone()).collect();
        v.dedup();
        v
    };
    for model in models {
        let base = match means.get(&(model.clone(), 2)) {
            Some(b) => *b,
            None => continue,
        };
        for ((m, steps), value) in &means {
            if *m == model && *steps > 2 {
                let growth = (value - base) / (*steps as f64 - 2.0);
                writeln!(f, "{model},{steps},{growth:.6}")?;
            }
        }
    }
    Ok(())
}

/// Relative TLT by question type: each run contributes its per-type
/// mean divided by its own overall mean; runs aggregate per model.
fn write_relative_tlt_csv(path: &Path, runs: &[RunSummary]) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "model,question_type,relative_tlt,ci95,n_runs")?;
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in runs {
        if r.mean_tlt == 0.0 {
            continue;
        }
        for (qt, v) in &r.per_type_tlt {
            groups
                .entry((r.model.clone(), qt.clone()))
                .or_default()
                .push(v / r.mean_tlt);
        }
    }
    for ((model, qt), values) in &groups {
        if values.len() >= 2 {
            let (mean, hw) = metrics::summarize(values)?;
            writeln!(f, "{model},{qt},{mean:.6},{hw:.6},{}", values.len())?;
        } else {
            writeln!(f, "{model},{qt},{:.6},,1", values[0])?;
        }
    }
    Ok(())
}

/// Write accuracy.csv, tlt.csv, growth.csv, and relative_tlt.csv under
/// `out_dir`. Incomplete run directories are reported, not fatal.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportOut, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let out = read_run_summaries(run_dirs);
    write_metric_csv(&out_dir.join("accuracy.csv"), &out.runs, |r| r.accuracy)?;
    write_metric_csv(&out_dir.join("tlt.csv"), &out.runs, |r| r.mean_tlt)?;
    write_growth_csv(&out_dir.join("growth.csv"), &out.runs)?;
    write_relative_tlt_csv(&out_dir.join("relative_tlt.csv"), &out.runs)?;
    if !out.incomplete.is_empty() {
        let mut f = std::fs::File::create(out_dir.join("incomplete.csv"))?;
        writeln!(f, "run_dir,reason")?;
        for (dir, reason) in &out.incomplete {
            writeln!(f, "{},{}", dir.display(), reason.replace(',', ";"))?;
        }
    }
    Ok(out)
}

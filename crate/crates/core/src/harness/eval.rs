//! Checkpoint evaluation: accuracy, transition-length statistics with
//! a 95% confidence interval across examples, per-question-type
//! breakdown, solver-evaluation accounting, and an optional wall-time
//! probe. Timing never enters the written artifacts, which keeps every
//! output file byte-reproducible.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::metrics;
use crate::model::Model;
use crate::ode::SolverConfig;
use crate::tape::Tape;
use crate::taskgen::{EncodedExample, QuestionType};

use super::config::{RunConfig, SolverSpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeBreakdown {
    pub question_type: String,
    pub n: usize,
    pub accuracy: f64,
    pub mean_tlt: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_tlt: f64,
    pub tlt_ci95: Option<f64>,
    pub per_type: Vec<TypeBreakdown>,
    pub mean_nfe: Option<f64>,
    pub max_nfe: Option<usize>,
    pub solver: String,
    pub warning: Option<String>,
    pub predictions: Vec<usize>,
    pub per_example_tlt: Vec<f64>,
}

/// Per-run digest written as summary.json and consumed by `report`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub steps: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub accuracy: f64,
    pub mean_tlt: f64,
    pub tlt_ci95: Option<f64>,
    pub per_type_tlt: BTreeMap<String, f64>,
    pub per_type_accuracy: BTreeMap<String, f64>,
    pub mean_nfe: Option<f64>,
    pub max_nfe: Option<usize>,
    pub n_val: usize,
}

struct ExampleEval {
    correct: bool,
    prediction: usize,
    tlt: Option<f64>,
    nfe: Vec<usize>,
    question_type: QuestionType,
}

/// Evaluate a model over a split. `requested_solver` overrides the
/// config's evaluation solver; the baseline cell has no solver, so an
/// override there is ignored with a warning in the report.
pub fn evaluate(
    model: &Model,
    cfg: &RunConfig,
    data: &[EncodedExample],
    requested_solver: Option<SolverSpec>,
) -> Result<EvalReport, HarnessError> {
    let mut warning = None;
    let spec = if model.daft_cell().is_some() {
        requested_solver.unwrap_or(cfg.eval_solver)
    } else {
        if requested_solver.is_some() {
            warning = Some(
                "eval solver flag ignored: the baseline cell involves no dynamics".to_string(),
            );
        }
        cfg.eval_solver
    };
    let solver = spec.to_solver_config(cfg.max_nfe);

    let rows: Vec<Result<ExampleEval, HarnessError>> = data
        .par_iter()
        .map(|ex| eval_example(model, ex, &solver))
        .collect();

    let mut evals = Vec::with_capacity(rows.len());
    for r in rows {
        evals.push(r?);
    }

    let n = evals.len();
    let hits = evals.iter().filter(|e| e.correct).count();
    let per_example_tlt: Vec<f64> = evals.iter().filter_map(|e| e.tlt).collect();
    let (mean_tlt, tlt_ci95) = match per_example_tlt.len() {
        0 => (0.0, None),
        1 => (per_example_tlt[0], None),
        _ => {
            let (m, hw) = metrics::summarize(&per_example_tlt)?;
            (m, Some(hw))
        }
    };

    let mut type_stats: BTreeMap<&'static str, (usize, usize, f64, usize)> = BTreeMap::new();
    for e in &evals {
        let entry = type_stats.entry(e.question_type.as_str()).or_default();
        entry.0 += 1;
        entry.1 += usize::from(e.correct);
        if let Some(t) = e.tlt {
            entry.2 += t;
            entry.3 += 1;
        }
    }
    let per_type = type_stats
        .into_iter()
        .map(|(qt, (cnt, hit, tlt_sum, tlt_cnt))| TypeBreakdown {
            question_type: qt.to_string(),
            n: cnt,
            accuracy: hit as f64 / cnt as f64,
            mean_tlt: if tlt_cnt > 0 {
                tlt_sum / tlt_cnt as f64
            } else {
                0.0
            },
        })
        .collect();

    let all_nfe: Vec<usize> = evals.iter().flat_map(|e| e.nfe.iter().copied()).collect();
    let (mean_nfe, max_nfe) = if all_nfe.is_empty() {
        (None, None)
    } else {
        (
            Some(all_nfe.iter().sum::<usize>() as f64 / all_nfe.len() as f64),
            Some(*all_nfe.iter().max().expect("non-empty")),
        )
    };

    Ok(EvalReport {
        n,
        accuracy: if n > 0 { hits as f64 / n as f64 } else { 0.0 },
        mean_tlt,
        tlt_ci95,
        per_type,
        mean_nfe,
        max_nfe,
        solver: spec.method.name().to_string(),
        warning,
        predictions: evals.iter().map(|e| e.prediction).collect(),
        per_example_tlt,
    })
}

fn eval_example(
    model: &Model,
    ex: &EncodedExample,
    solver: &SolverConfig,
) -> Result<ExampleEval, HarnessError> {
    let mut tape = Tape::eval();
    let out = model.forward(&mut tape, &ex.token_ids, &ex.kb, solver)?;
    let tlt = if out.text_logits.len() >= 2 {
        let traj = metrics::AttentionTrajectory::new(out.attention_rows())?;
        Some(metrics::tlt(&traj)?.tlt)
    } else {
        None
    };
    Ok(ExampleEval {
        correct: out.prediction() == ex.answer_id,
        prediction: out.prediction(),
        tlt,
        nfe: out.solves.iter().map(|s| s.nfe).collect(),
        question_type: ex.question_type,
    })
}

/// Median wall-time per batch in milliseconds: 3 warm-up batches, then
/// 20 timed batches, single-threaded, cycling the split as needed.
pub fn measure_batch_time(
    model: &Model,
    cfg: &RunConfig,
    data: &[EncodedExample],
    requested_solver: Option<SolverSpec>,
) -> Result<f64, HarnessError> {
    let spec = requested_solver.unwrap_or(cfg.eval_solver);
    let solver = spec.to_solver_config(cfg.max_nfe);
    let batch = cfg.batch_size.max(1);
    let warmup = 3;
    let timed = 20;

    let mut times = Vec::with_capacity(timed);
    let mut cursor = 0usize;
    for round in 0..warmup + timed {
        let start = Instant::now();
        for _ in 0..batch {
            let ex = &data[cursor % data.len()];
            cursor += 1;
            let mut tape = Tape::eval();
            model.forward(&mut tape, &ex.token_ids, &ex.kb, &solver)?;
        }
        if round >= warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    Ok(times[times.len() / 2])
}

/// Deterministic metrics table: an overall row plus one row per
/// question type. Timing is deliberately excluded.
pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "scope,n,accuracy,mean_tlt,tlt_ci95,mean_nfe,max_nfe,solver")?;
    writeln!(
        f,
        "overall,{},{:.6},{:.6},{},{},{},{}",
        report.n,
        report.accuracy,
        report.mean_tlt,
        report
            .tlt_ci95
            .map(|x| format!("{x:.6}"))
            .unwrap_or_default(),
        report
            .mean_nfe
            .map(|x| format!("{x:.3}"))
            .unwrap_or_default(),
        report
            .max_nfe
            .map(|x| x.to_string())
            .unwrap_or_default(),
        report.solver,
    )?;
    for t in &report.per_type {
        writeln!(
            f,
            "{},{},{:.6},{:.6},,,,",
            t.question_type, t.n, t.accuracy, t.mean_tlt
        )?;
    }
    Ok(())
}

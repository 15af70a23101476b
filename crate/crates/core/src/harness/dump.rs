//! Attention dumps: per-example JSONL records with the step-by-token
//! probability matrix, per-interval transition lengths, and optional
//! fine-grained interpolation samples, plus CSV/SVG heatmap export.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::metrics;
use crate::model::Model;
use crate::ode::SolveStats;
use crate::tape::Tape;
use crate::taskgen::{EncodedExample, ANSWERS};

use super::config::{RunConfig, SolverSpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FineSample {
    pub time: f64,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpRecord {
    pub tokens: Vec<String>,
    #[serde(rename = "type")]
    pub question_type: String,
    pub answer: String,
    pub prediction: String,
    /// T rows of softmaxed textual attention over question tokens.
    pub text_attention: Vec<Vec<f64>>,
    /// T rows of softmaxed attention over knowledge-base facts.
    pub kb_attention: Vec<Vec<f64>>,
    pub lt: Vec<f64>,
    pub tlt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nfe: Option<Vec<SolveStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine: Option<Vec<FineSample>>,
}

/// Dump the first `limit` examples. `samples_per_interval > 1` adds the
/// fine-grained interpolation samples and is only meaningful for the
/// continuous cell; the baseline has no dynamics to interpolate.
pub fn dump_attention(
    model: &Model,
    cfg: &RunConfig,
    data: &[EncodedExample],
    limit: usize,
    samples_per_interval: usize,
    solver_override: Option<SolverSpec>,
) -> Result<Vec<DumpRecord>, HarnessError> {
    if samples_per_interval > 1 && model.daft_cell().is_none() {
        return Err(HarnessError::NoDynamics);
    }
    let spec = solver_override.unwrap_or(cfg.eval_solver);
    let solver = spec.to_solver_config(cfg.max_nfe);

    let mut out = Vec::new();
    for ex in data.iter().take(limit) {
        let mut tape = Tape::eval();
        let fwd = model.forward(&mut tape, &ex.token_ids, &ex.kb, &solver)?;
        let text_attention = fwd.attention_rows();
        let kb_attention = fwd.read_attention_rows();
        let (lt, tlt) = if text_attention.len() >= 2 {
            let traj = metrics::AttentionTrajectory::new(text_attention.clone())?;
            let report = metrics::tlt(&traj)?;
            (report.lt, report.tlt)
        } else {
            (Vec::new(), 0.0)
        };
        let fine = if samples_per_interval > 1 {
            let samples = model.interpolate(&ex.token_ids, &ex.kb, &solver, samples_per_interval)?;
            Some(
                samples
                    .into_iter()
                    .map(|(time, probs)| FineSample { time, probs })
                    .collect(),
            )
        } else {
            None
        };
        out.push(DumpRecord {
            tokens: ex.tokens.clone(),
            question_type: ex.question_type.as_str().to_string(),
            answer: ex.answer.clone(),
            prediction: ANSWERS[fwd.prediction()].to_string(),
            text_attention,
            kb_attention,
            lt,
            tlt,
            nfe: if fwd.solves.is_empty() {
                None
            } else {
                Some(fwd.solves.clone())
            },
            fine,
        });
    }
    Ok(out)
}

pub fn write_dump_jsonl(records: &[DumpRecord], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dump_jsonl(path: &Path) -> Result<Vec<DumpRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// One CSV matrix and one SVG heatmap per record.
pub fn write_heatmaps(records: &[DumpRecord], dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    for (i, r) in records.iter().enumerate() {
        let csv_path = dir.join(format!("example_{i:04}.csv"));
        let mut f = std::fs::File::create(csv_path)?;
        writeln!(f, "step,{}", r.tokens.join(","))?;
        for (step, row) in r.text_attention.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(f, "{},{}", step + 1, cells.join(","))?;
        }
        let svg_path = dir.join(format!("example_{i:04}.svg"));
        std::fs::write(svg_path, heatmap_svg(r))?;
    }
    Ok(())
}

fn heatmap_svg(r: &DumpRecord) -> String {
    let cell = 22usize;
    let label_h = 70usize;
    let label_w = 34usize;
    let cols = r.tokens.len();
    let rows = r.text_attention.len();
    let width = label_w + cols * cell;
    let height = label_h + rows * cell;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"9\">\n"
    ));
    for (j, tok) in r.tokens.iter().enumerate() {
        let x = label_w + j * cell + cell / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" transform=\"rotate(-60 {x} {y})\">{tok}</text>\n",
            y = label_h - 6
        ));
    }
    for (i, row) in r.text_attention.iter().enumerate() {
        let y = label_h + i * cell;
        svg.push_str(&format!(
            "<text x=\"2\" y=\"{}\">t={}</text>\n",
            y + cell / 2 + 3,
            i + 1
        ));
        for (j, &p) in row.iter().enumerate() {
            let x = label_w + j * cell;
            // Dark violet for high attention on a white base.
            let shade = (255.0 * (1.0 - p)).round() as u8;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterpolationRecord {
    pub tokens: Vec<String>,
    #[serde(rename = "type")]
    pub question_type: String,
    pub times: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
    pub max_adjacent_jsd: f64,
}

/// Fine-grained interpolation for the first `limit` examples at the
/// given sampling rate per interval.
pub fn interpolate_dump(
    model: &Model,
    cfg: &RunConfig,
    data: &[EncodedExample],
    limit: usize,
    rate: usize,
    solver_override: Option<SolverSpec>,
) -> Result<Vec<InterpolationRecord>, HarnessError> {
    if model.daft_cell().is_none() {
        return Err(HarnessError::NoDynamics);
    }
    let spec = solver_override.unwrap_or(cfg.eval_solver);
    let solver = spec.to_solver_config(cfg.max_nfe);
    let mut out = Vec::new();
    for ex in data.iter().take(limit) {
        let samples = model.interpolate(&ex.token_ids, &ex.kb, &solver, rate)?;
        let max_adjacent_jsd = max_adjacent_jsd(&samples)?;
        out.push(InterpolationRecord {
            tokens: ex.tokens.clone(),
            question_type: ex.question_type.as_str().to_string(),
            times: samples.iter().map(|(t, _)| *t).collect(),
            probs: samples.into_iter().map(|(_, p)| p).collect(),
            max_adjacent_jsd,
        });
    }
    Ok(out)
}

pub fn max_adjacent_jsd(samples: &[(f64, Vec<f64>)]) -> Result<f64, HarnessError> {
    let mut max = 0.0f64;
    for w in samples.windows(2) {
        max = max.max(metrics::jsd(&w[0].1, &w[1].1)?);
    }
    Ok(max)
}

pub fn write_interpolation_jsonl(
    records: &[InterpolationRecord],
    path: &Path,
) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

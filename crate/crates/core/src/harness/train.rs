//! The training loop: seeded init, shuffled batches, per-example tapes
//! with gradients averaged in example order (bit-deterministic under
//! the parallel map), Adam with the plateau-halving schedule, per-epoch
//! logging, and a checkpoint at the best validation accuracy.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{HarnessError, ModelError, SolveError};
use crate::metrics;
use crate::model::{Model, ModelKind};
use crate::nn::{collect_grads, AdamState, LrDecision, ParamContainer, PlateauSchedule};
use crate::ode::{SolveStats, SolverConfig};
use crate::tape::Tape;
use crate::taskgen::{self, EncodedExample};
use crate::tensor::Tensor;

use super::checkpoint::{checkpoint_bytes, load_checkpoint_bytes};
use super::config::RunConfig;
use super::eval::{evaluate, RunSummary};

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub mean_nfe: Option<f64>,
    pub max_nfe: Option<usize>,
    pub mean_tlt: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochStats>,
    pub stop_reason: String,
    pub summary: RunSummary,
}

struct ExampleGrad {
    loss: f64,
    grads: Vec<Tensor>,
    solves: Vec<SolveStats>,
}

fn run_example(
    model: &Model,
    ex: &EncodedExample,
    solver: &SolverConfig,
    kind: ModelKind,
    lambda: f64,
) -> Result<ExampleGrad, ModelError> {
    let mut tape = Tape::recording();
    let bound = model.bind(&mut tape);
    let out = bound.forward(&mut tape, &ex.token_ids, &ex.kb, solver)?;
    let mut loss = tape.cross_entropy(&out.answer_logits, ex.answer_id)?;

    if kind == ModelKind::MacTltPenalty && lambda > 0.0 && out.text_logits.len() >= 2 {
        let probs = out
            .text_logits
            .iter()
            .map(|a| tape.softmax(a))
            .collect::<Result<Vec<_>, _>>()?;
        let mut penalty: Option<Tensor> = None;
        for pair in probs.windows(2) {
            let term = tape.jsd(&pair[0], &pair[1])?;
            penalty = Some(match penalty {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        if let Some(p) = penalty {
            let weighted = tape.scale(&p, lambda)?;
            loss = tape.add(&loss, &weighted)?;
        }
    }

    let grads = tape.backward(&loss)?;
    Ok(ExampleGrad {
        loss: loss.item(),
        grads: collect_grads(&bound, &grads)?,
        solves: out.solves,
    })
}

/// Accuracy over a split with frozen weights; examples fan out in
/// parallel and reduce in index order.
pub fn split_accuracy(model: &Model, data: &[EncodedExample], solver: &SolverConfig) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits: usize = data
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::eval();
            match model.forward(&mut tape, &ex.token_ids, &ex.kb, solver) {
                Ok(out) => usize::from(out.prediction() == ex.answer_id),
                Err(_) => 0,
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    hits as f64 / data.len() as f64
}

fn subset_mean_tlt(
    model: &Model,
    data: &[EncodedExample],
    solver: &SolverConfig,
    limit: usize,
) -> Result<f64, HarnessError> {
    let k = limit.min(data.len());
    if k == 0 || model.t_steps < 2 {
        return Ok(0.0);
    }
    let values: Vec<Result<f64, HarnessError>> = data[..k]
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::eval();
            let out = model.forward(&mut tape, &ex.token_ids, &ex.kb, solver)?;
            let traj = metrics::AttentionTrajectory::new(out.attention_rows())?;
            Ok(metrics::tlt(&traj)?.tlt)
        })
        .collect();
    let mut sum = 0.0;
    for v in values {
        sum += v?;
    }
    Ok(sum / k as f64)
}

pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainResult, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let train_data = load_split(&cfg.data_train)?;
    let val_data = load_split(&cfg.data_val)?;
    let solver = cfg.train_solver_config();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(&cfg.model_config(), &mut rng)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut sched = PlateauSchedule::new(cfg.lr);

    let mut log: Vec<EpochStats> = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_bytes: Option<Vec<u8>> = None;
    let mut stop_reason = "max_epochs".to_string();

    let mut indices: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..cfg.max_epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut nfe_sum = 0u64;
        let mut nfe_n = 0u64;
        let mut nfe_max = 0usize;

        for (batch_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<ExampleGrad, ModelError>> = batch
                .par_iter()
                .map(|&i| run_example(&model, &train_data[i], &solver, cfg.model, cfg.lambda))
                .collect();

            let mut acc: Option<Vec<Tensor>> = None;
            for r in results {
                let eg = r.map_err(|e| match e {
                    ModelError::Solve(s @ SolveError::NfeCapExceeded { .. }) => {
                        HarnessError::NfeCap { epoch, source: s }
                    }
                    other => HarnessError::Model(other),
                })?;
                if !eg.loss.is_finite() {
                    return Err(HarnessError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += eg.loss;
                loss_n += 1;
                for s in &eg.solves {
                    nfe_sum += s.nfe as u64;
                    nfe_n += 1;
                    nfe_max = nfe_max.max(s.nfe);
                }
                acc = Some(match acc {
                    None => eg.grads,
                    Some(mut sum) => {
                        for (a, g) in sum.iter_mut().zip(eg.grads.iter()) {
                            let ad = a.data_mut();
                            for (x, y) in ad.iter_mut().zip(g.data().iter()) {
                                *x += y;
                            }
                        }
                        sum
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.data_mut().iter_mut() {
                    *x *= scale;
                }
            }
            adam.step(&mut model, &grads)?;
        }

        let val_acc = split_accuracy(&model, &val_data, &solver);
        let mean_tlt = subset_mean_tlt(&model, &val_data, &solver, cfg.tlt_subset)?;
        let uses_solver = cfg.model.uses_dynamics();
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_acc,
            lr: adam.lr,
            mean_nfe: uses_solver.then(|| nfe_sum as f64 / nfe_n.max(1) as f64),
            max_nfe: uses_solver.then_some(nfe_max),
            mean_tlt,
        };
        println!(
            "epoch {:>3}  loss {:.6}  val_acc {:.4}  lr {}  tlt {:.4}{}",
            stats.epoch,
            stats.train_loss,
            stats.val_acc,
            stats.lr,
            stats.mean_tlt,
            match stats.mean_nfe {
                Some(m) => format!("  nfe {m:.1}"),
                None => String::new(),
            }
        );
        log.push(stats);

        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            best_bytes = Some(checkpoint_bytes(cfg, &model));
        }

        match sched.observe(val_acc) {
            LrDecision::Keep(_) => {}
            LrDecision::Halve(new_lr) => adam.lr = new_lr,
            LrDecision::Stop => {
                stop_reason = "lr_floor".to_string();
                break;
            }
        }
    }

    let best_bytes = best_bytes.expect("at least one epoch ran");
    std::fs::write(out_dir.join("checkpoint.json"), &best_bytes)?;
    write_log_csv(&log, &out_dir.join("train_log.csv"))?;

    // Summarize the best checkpoint on the full validation split with
    // the configured evaluation solver.
    let (_, best_model) = load_checkpoint_bytes(&best_bytes)?;
    let report = evaluate(&best_model, cfg, &val_data, None)?;
    let summary = RunSummary {
        model: cfg.model.name().to_string(),
        steps: cfg.steps,
        seed: cfg.seed,
        best_epoch,
        best_val_acc: best_acc,
        accuracy: report.accuracy,
        mean_tlt: report.mean_tlt,
        tlt_ci95: report.tlt_ci95,
        per_type_tlt: report
            .per_type
            .iter()
            .map(|t| (t.question_type.clone(), t.mean_tlt))
            .collect(),
        per_type_accuracy: report
            .per_type
            .iter()
            .map(|t| (t.question_type.clone(), t.accuracy))
            .collect(),
        mean_nfe: report.mean_nfe,
        max_nfe: report.max_nfe,
        n_val: val_data.len(),
    };
    let summary_json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out_dir.join("summary.json"), summary_json)?;

    Ok(TrainResult {
        best_val_acc: best_acc,
        best_epoch,
        log,
        stop_reason,
        summary,
    })
}

fn load_split(path: &str) -> Result<Vec<EncodedExample>, HarnessError> {
    let p = std::path::Path::new(path);
    if !p.exists() {
        return Err(HarnessError::DatasetMissing {
            path: path.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(taskgen::load_encoded(p)?)
}

fn write_log_csv(log: &[EpochStats], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_acc,lr,mean_nfe,max_nfe,mean_tlt")?;
    for s in log {
        writeln!(
            f,
            "{},{:.6},{:.6},{},{},{},{:.6}",
            s.epoch,
            s.train_loss,
            s.val_acc,
            s.lr,
            s.mean_nfe.map(|x| format!("{x:.3}")).unwrap_or_default(),
            s.max_nfe.map(|x| x.to_string()).unwrap_or_default(),
            s.mean_tlt,
        )?;
    }
    Ok(())
}

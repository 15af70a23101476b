//! Full trainable models: question encoder, knowledge-base input
//! projection, and one reasoning cell, behind a single forward call.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::daft::{daft_forward, DaftCellParams, SharingMode};
use crate::error::ModelError;
use crate::mac::{mac_forward, MacCellParams};
use crate::nn::{xavier_init, AffineLayer, Nonlinearity, ParamContainer, QuestionEncoder};
use crate::ode::{SolveStats, SolverConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::taskgen;

/// Which cell drives the reasoning loop. The residual variant is the
/// continuous cell trained with a single-step Euler solver; the
/// penalty variant is the baseline cell with the transition-length
/// term added to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mac,
    Daft,
    DaftResidual,
    MacTltPenalty,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mac" => Some(ModelKind::Mac),
            "daft" => Some(ModelKind::Daft),
            "daft_residual" => Some(ModelKind::DaftResidual),
            "mac_tlt_penalty" => Some(ModelKind::MacTltPenalty),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Mac => "mac",
            ModelKind::Daft => "daft",
            ModelKind::DaftResidual => "daft_residual",
            ModelKind::MacTltPenalty => "mac_tlt_penalty",
        }
    }

    pub fn uses_dynamics(&self) -> bool {
        matches!(self, ModelKind::Daft | ModelKind::DaftResidual)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub t_steps: usize,
    pub d: usize,
    pub e: usize,
    pub nonlinearity: Nonlinearity,
    pub sharing: SharingMode,
}

enum Cell {
    Mac(MacCellParams),
    Daft(DaftCellParams),
}

pub struct Model {
    pub kind: ModelKind,
    pub t_steps: usize,
    pub d: usize,
    pub e: usize,
    pub nonlinearity: Nonlinearity,
    pub encoder: QuestionEncoder,
    /// Raw object features to model width.
    pub kb_proj: AffineLayer,
    cell: Cell,
}

/// Unified per-example forward output for both cells.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub answer_logits: Tensor,
    /// Textual attention logits per reasoning step (T entries).
    pub text_logits: Vec<Tensor>,
    /// The zero initial logit, present for the continuous cell.
    pub initial_logit: Option<Tensor>,
    pub read_logits: Vec<Tensor>,
    pub solves: Vec<SolveStats>,
}

impl ForwardOut {
    pub fn prediction(&self) -> usize {
        argmax(self.answer_logits.data())
    }

    /// Softmaxed textual attention rows, one per reasoning step.
    pub fn attention_rows(&self) -> Vec<Vec<f64>> {
        self.text_logits
            .iter()
            .map(|a| crate::tape::softmax_kernel(a.data()))
            .collect()
    }

    /// Softmaxed knowledge-base attention rows, one per reasoning step.
    pub fn read_attention_rows(&self) -> Vec<Vec<f64>> {
        self.read_logits
            .iter()
            .map(|a| crate::tape::softmax_kernel(a.data()))
            .collect()
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let encoder = QuestionEncoder::init(
            taskgen::vocab_size(),
            cfg.e,
            cfg.d,
            taskgen::MAX_QUESTION_LEN,
            rng,
        )?;
        let kb_proj = xavier_init(cfg.d, taskgen::FEAT_DIM, rng);
        let cell = match cfg.kind {
            ModelKind::Mac | ModelKind::MacTltPenalty => Cell::Mac(MacCellParams::init(
                cfg.d,
                cfg.t_steps,
                taskgen::n_answers(),
                rng,
            )),
            ModelKind::Daft | ModelKind::DaftResidual => Cell::Daft(DaftCellParams::init(
                cfg.d,
                cfg.t_steps,
                taskgen::n_answers(),
                cfg.sharing,
                rng,
            )),
        };
        Ok(Model {
            kind: cfg.kind,
            t_steps: cfg.t_steps,
            d: cfg.d,
            e: cfg.e,
            nonlinearity: cfg.nonlinearity,
            encoder,
            kb_proj,
            cell,
        })
    }

    pub fn mac_cell(&self) -> Option<&MacCellParams> {
        match &self.cell {
            Cell::Mac(c) => Some(c),
            Cell::Daft(_) => None,
        }
    }

    pub fn daft_cell(&self) -> Option<&DaftCellParams> {
        match &self.cell {
            Cell::Daft(c) => Some(c),
            Cell::Mac(_) => None,
        }
    }

    /// Encode the question and knowledge base, run the reasoning cell,
    /// classify. `solver` only matters for the continuous cell.
    pub fn forward(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        kb_raw: &Tensor,
        solver: &SolverConfig,
    ) -> Result<ForwardOut, ModelError> {
        let (cw, q) = self.encoder.encode(tape, token_ids)?;
        let kb = self.kb_proj.apply_rows(tape, kb_raw)?;
        match &self.cell {
            Cell::Mac(cell) => {
                let out = mac_forward(tape, cell, self.nonlinearity, &cw, &q, &kb, self.t_steps)?;
                Ok(ForwardOut {
                    answer_logits: out.answer_logits,
                    text_logits: out.text_logits,
                    initial_logit: None,
                    read_logits: out.read_logits,
                    solves: Vec::new(),
                })
            }
            Cell::Daft(cell) => {
                let out = daft_forward(
                    tape,
                    cell,
                    self.nonlinearity,
                    &cw,
                    &q,
                    &kb,
                    self.t_steps,
                    solver,
                )?;
                let mut trajectory = out.trajectory;
                let initial = trajectory.remove(0);
                Ok(ForwardOut {
                    answer_logits: out.answer_logits,
                    text_logits: trajectory,
                    initial_logit: Some(initial),
                    read_logits: out.read_logits,
                    solves: out.solves,
                })
            }
        }
    }

    /// Fine-grained attention interpolation; only the continuous cell
    /// has dynamics to interpolate.
    pub fn interpolate(
        &self,
        token_ids: &[usize],
        kb_raw: &Tensor,
        solver: &SolverConfig,
        samples_per_interval: usize,
    ) -> Result<Vec<(f64, Vec<f64>)>, ModelError> {
        let cell = match &self.cell {
            Cell::Daft(c) => c,
            Cell::Mac(_) => return Err(ModelError::NoDynamics),
        };
        let mut tape = Tape::eval();
        let (cw, q) = self.encoder.encode(&mut tape, token_ids)?;
        let _ = kb_raw; // interpolation only involves the textual side
        crate::daft::interpolate_attention(
            cell,
            self.nonlinearity,
            &cw,
            &q,
            self.t_steps,
            solver,
            samples_per_interval,
        )
    }
}

impl ParamContainer for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&format!("{prefix}encoder"), f);
        self.kb_proj.visit(&format!("{prefix}kb_proj"), f);
        match &self.cell {
            Cell::Mac(c) => c.visit(&format!("{prefix}cell"), f),
            Cell::Daft(c) => c.visit(&format!("{prefix}cell"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&format!("{prefix}encoder"), f);
        self.kb_proj.visit_mut(&format!("{prefix}kb_proj"), f);
        match &mut self.cell {
            Cell::Mac(c) => c.visit_mut(&format!("{prefix}cell"), f),
            Cell::Daft(c) => c.visit_mut(&format!("{prefix}cell"), f),
        }
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        Model {
            kind: self.kind,
            t_steps: self.t_steps,
            d: self.d,
            e: self.e,
            nonlinearity: self.nonlinearity,
            encoder: self.encoder.map_params(f),
            kb_proj: self.kb_proj.map_params(f),
            cell: match &self.cell {
                Cell::Mac(c) => Cell::Mac(c.map_params(f)),
                Cell::Daft(c) => Cell::Daft(c.map_params(f)),
            },
        }
    }
}

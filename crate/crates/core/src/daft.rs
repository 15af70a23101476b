//! The continuous-attention cell: textual attention logits evolve
//! under a learned dynamics field, solved as an initial value problem
//! between reasoning steps. Read, write, and classification reuse the
//! baseline cell's code path; only the control stage differs.

use crate::error::ModelError;
use crate::mac::{read_step, write_step, ClassifierParams, ReadWriteParams};
use crate::nn::{xavier_init, AffineLayer, Nonlinearity, ParamContainer};
use crate::ode::{solve, SolveResult, SolverConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Whether one dynamics field is shared by every interval or each
/// interval gets its own copy. The field receives t explicitly, so the
/// shared mode can still express time variation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    Shared,
    PerInterval,
}

impl SharingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(SharingMode::Shared),
            "per_interval" => Some(SharingMode::PerInterval),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SharingMode::Shared => "shared",
            SharingMode::PerInterval => "per_interval",
        }
    }
}

/// One dynamics field: g = inner([t, q]) conditions each token, and
/// per token i the rate is outer([g * cw_i, a_i]).
#[derive(Clone, Debug)]
pub struct DynamicsParams {
    pub inner: AffineLayer, // (d+1) -> d over [t, q]
    pub outer: AffineLayer, // (d+1) -> 1 over [g * cw_i, a_i]
}

impl DynamicsParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        DynamicsParams {
            inner: xavier_init(d, d + 1, rng),
            outer: xavier_init(1, d + 1, rng),
        }
    }
}

impl ParamContainer for DynamicsParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.inner.visit(&format!("{prefix}.inner"), f);
        self.outer.visit(&format!("{prefix}.outer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inner.visit_mut(&format!("{prefix}.inner"), f);
        self.outer.visit_mut(&format!("{prefix}.outer"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        DynamicsParams {
            inner: self.inner.map_params(f),
            outer: self.outer.map_params(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DaftCellParams {
    /// One entry in shared mode, T entries per interval otherwise.
    pub dynamics: Vec<DynamicsParams>,
    pub sharing: SharingMode,
    pub rw: ReadWriteParams,
    pub classifier: ClassifierParams,
    pub m0: Tensor,
    pub t_steps: usize,
}

impl DaftCellParams {
    pub fn init<R: Rng>(
        d: usize,
        t_steps: usize,
        n_answers: usize,
        sharing: SharingMode,
        rng: &mut R,
    ) -> Self {
        let copies = match sharing {
            SharingMode::Shared => 1,
            SharingMode::PerInterval => t_steps,
        };
        DaftCellParams {
            dynamics: (0..copies).map(|_| DynamicsParams::init(d, rng)).collect(),
            sharing,
            rw: ReadWriteParams::init(d, rng),
            classifier: ClassifierParams::init(d, n_answers, rng),
            m0: Tensor::zeros(&[d]),
            t_steps,
        }
    }

    pub fn dynamics_for(&self, interval: usize) -> &DynamicsParams {
        match self.sharing {
            SharingMode::Shared => &self.dynamics[0],
            SharingMode::PerInterval => &self.dynamics[interval],
        }
    }
}

impl ParamContainer for DaftCellParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, dp) in self.dynamics.iter().enumerate() {
            dp.visit(&format!("{prefix}.dynamics.{i}"), f);
        }
        self.rw.visit(&format!("{prefix}.rw"), f);
        self.classifier.visit(&format!("{prefix}.classifier"), f);
        f(&format!("{prefix}.m0"), &self.m0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, dp) in self.dynamics.iter_mut().enumerate() {
            dp.visit_mut(&format!("{prefix}.dynamics.{i}"), f);
        }
        self.rw.visit_mut(&format!("{prefix}.rw"), f);
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
        f(&format!("{prefix}.m0"), &mut self.m0);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        DaftCellParams {
            dynamics: self.dynamics.iter().map(|d| d.map_params(f)).collect(),
            sharing: self.sharing,
            rw: self.rw.map_params(f),
            classifier: self.classifier.map_params(f),
            m0: f(&self.m0),
            t_steps: self.t_steps,
        }
    }
}

/// da/dt at (a, t): g = nl(inner([t, q])), then per token i
/// outer([g * cw_i, a_i]).
pub fn dynamics_f(
    tape: &mut Tape,
    dynamics: &DynamicsParams,
    nl: Nonlinearity,
    cw: &Tensor,
    q: &Tensor,
    a: &Tensor,
    t: f64,
) -> Result<Tensor, crate::error::TensorError> {
    let t_tensor = Tensor::vector(&[t]);
    let tq = tape.concat1d(&t_tensor, q)?;
    let pre = dynamics.inner.apply_vec(tape, &tq)?;
    let g = nl.apply(tape, &pre)?;
    let conditioned = tape.mul_row(cw, &g)?;
    let a_col = tape.reshape(a, &[a.len(), 1])?;
    let joint = tape.concat_cols(&conditioned, &a_col)?;
    let rates2d = dynamics.outer.apply_rows(tape, &joint)?;
    tape.reshape(&rates2d, &[a.len()])
}

/// Advance the attention logits from t0 to t1 through the configured
/// solver. Differentiable w.r.t. the start logits and the dynamics
/// parameters when tracked.
pub fn daft_attention_step(
    tape: &mut Tape,
    dynamics: &DynamicsParams,
    nl: Nonlinearity,
    cw: &Tensor,
    q: &Tensor,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    output_times: Option<&[f64]>,
) -> Result<SolveResult, ModelError> {
    let mut f =
        |tape: &mut Tape, a: &Tensor, t: f64| dynamics_f(tape, dynamics, nl, cw, q, a, t);
    Ok(solve(tape, &mut f, a0, t0, t1, cfg, output_times)?)
}

#[derive(Clone, Debug)]
pub struct DaftForwardOut {
    pub answer_logits: Tensor,
    /// Integer-step attention logits a_0..a_T; a_0 is the zero vector.
    pub trajectory: Vec<Tensor>,
    pub read_logits: Vec<Tensor>,
    pub solves: Vec<crate::ode::SolveStats>,
    pub final_memory: Tensor,
}

/// Full memory-update pass: solve one attention IVP per interval, then
/// read and write exactly as the baseline cell, then classify.
pub fn daft_forward(
    tape: &mut Tape,
    cell: &DaftCellParams,
    nl: Nonlinearity,
    cw: &Tensor,
    q: &Tensor,
    kb: &Tensor,
    t_steps: usize,
    cfg: &SolverConfig,
) -> Result<DaftForwardOut, ModelError> {
    if t_steps != cell.t_steps {
        return Err(ModelError::StepMismatch {
            expected: cell.t_steps,
            got: t_steps,
        });
    }
    let l = cw.rows();
    // Zero initial logit: softmax of it is exactly uniform.
    let mut a = Tensor::zeros(&[l]);
    let mut m = cell.m0.clone();
    let mut trajectory = Vec::with_capacity(t_steps + 1);
    let mut read_logits = Vec::with_capacity(t_steps);
    let mut solves = Vec::with_capacity(t_steps);
    trajectory.push(a.clone());

    for step in 0..t_steps {
        let (t0, t1) = (step as f64, step as f64 + 1.0);
        let result = daft_attention_step(
            tape,
            cell.dynamics_for(step),
            nl,
            cw,
            q,
            &a,
            t0,
            t1,
            cfg,
            None,
        )?;
        solves.push(result.stats());
        a = result.end_state;
        trajectory.push(a.clone());

        let p = tape.softmax(&a)?;
        let c = tape.vecmat(&p, cw)?;
        let (rq, r) = read_step(tape, &cell.rw, nl, kb, &m, &c)?;
        m = write_step(tape, &cell.rw, &r, &m)?;
        read_logits.push(rq);
    }

    let answer_logits = cell.classifier.apply(tape, nl, q, &m)?;
    Ok(DaftForwardOut {
        answer_logits,
        trajectory,
        read_logits,
        solves,
        final_memory: m,
    })
}

/// Softmaxed attention at a uniform fine grid of times: the sample at
/// time 0 is the exact uniform start, and each interval's final sample
/// is bit-identical to the integer-step trajectory because dense
/// output re-solves from the interval start.
pub fn interpolate_attention(
    cell: &DaftCellParams,
    nl: Nonlinearity,
    cw: &Tensor,
    q: &Tensor,
    t_steps: usize,
    cfg: &SolverConfig,
    samples_per_interval: usize,
) -> Result<Vec<(f64, Vec<f64>)>, ModelError> {
    assert!(samples_per_interval >= 1, "need at least one sample");
    let mut tape = Tape::eval();
    let l = cw.rows();
    let mut a = Tensor::zeros(&[l]);
    let mut out = Vec::with_capacity(t_steps * samples_per_interval + 1);
    out.push((0.0, softmax_values(&mut tape, &a)?));

    for step in 0..t_steps {
        let (t0, t1) = (step as f64, step as f64 + 1.0);
        let times: Vec<f64> = (1..=samples_per_interval)
            .map(|k| t0 + k as f64 / samples_per_interval as f64)
            .map(|t| if t > t1 { t1 } else { t })
            .collect();
        let result = daft_attention_step(
            &mut tape,
            cell.dynamics_for(step),
            nl,
            cw,
            q,
            &a,
            t0,
            t1,
            cfg,
            Some(&times),
        )?;
        for (t, state) in result.samples.as_ref().expect("samples requested") {
            out.push((*t, softmax_values(&mut tape, state)?));
        }
        a = result.end_state;
    }
    Ok(out)
}

fn softmax_values(tape: &mut Tape, a: &Tensor) -> Result<Vec<f64>, ModelError> {
    Ok(tape.softmax(a)?.data().to_vec())
}

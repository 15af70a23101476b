//! Initial value problem solvers over tensor states.
//!
//! Three methods: fixed-step Euler, the fixed-step fourth-order
//! Runge-Kutta 3/8 rule, and adaptive Dormand-Prince 5(4) with FSAL.
//! State arithmetic runs through the tape, so a solve is differentiable
//! with respect to the initial state and the dynamics' parameters
//! whenever they are tracked (step-size control reads plain values and
//! is not differentiated). Function evaluations are counted exactly:
//! for Dormand-Prince, `nfe == 1 + 6 * (accepted + rejected)` on every
//! solve.

use serde::{Deserialize, Serialize};

use crate::error::{SolveError, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4_38,
    Dopri5,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4_38 => "rk4_38",
            Method::Dopri5 => "dopri5",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "euler" => Some(Method::Euler),
            "rk4_38" => Some(Method::Rk4_38),
            "dopri5" => Some(Method::Dopri5),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Step count per unit interval for the fixed-step methods.
    pub fixed_steps_per_interval: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_nfe_per_solve: usize,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            fixed_steps_per_interval: 1,
            rtol: 1e-3,
            atol: 1e-3,
            max_nfe_per_solve: 500,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        SolverConfig {
            method: Method::Euler,
            fixed_steps_per_interval: steps,
            ..SolverConfig::default()
        }
    }

    pub fn rk4_38(steps: usize) -> Self {
        SolverConfig {
            method: Method::Rk4_38,
            fixed_steps_per_interval: steps,
            ..SolverConfig::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol,
            atol,
            ..SolverConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(SolveError::BadConfig(format!(
                "rtol and atol must be positive, got {} / {}",
                self.rtol, self.atol
            )));
        }
        if self.fixed_steps_per_interval < 1 {
            return Err(SolveError::BadConfig(
                "fixed_steps_per_interval must be >= 1".into(),
            ));
        }
        if self.max_nfe_per_solve < 7 {
            return Err(SolveError::BadConfig(
                "max_nfe_per_solve must be >= 7".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub end_state: Tensor,
    /// Function evaluations spent on the t0 -> t1 solve. Sample
    /// generation runs separate sub-solves not included here.
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub samples: Option<Vec<(f64, Tensor)>>,
}

/// Counters only, for logging.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl SolveResult {
    pub fn stats(&self) -> SolveStats {
        SolveStats {
            nfe: self.nfe,
            accepted_steps: self.accepted_steps,
            rejected_steps: self.rejected_steps,
        }
    }
}

pub type DynFn<'a> = dyn FnMut(&mut Tape, &Tensor, f64) -> Result<Tensor, TensorError> + 'a;

/// Integrate da/dt = f(a, t) from `a0` at `t0` to `t1`.
///
/// `output_times` asks for dense output: each requested time is
/// produced by an independent sub-solve from (t0, a0) with the same
/// configuration, so the sample at exactly `t1` is bit-identical to
/// `end_state` and intermediate samples do not perturb the main solve.
pub fn solve(
    tape: &mut Tape,
    f: &mut DynFn<'_>,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    output_times: Option<&[f64]>,
) -> Result<SolveResult, SolveError> {
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(SolveError::BadSpan { t0, t1 });
    }
    if !a0.all_finite() {
        return Err(SolveError::BadInitialState);
    }
    if let Some(times) = output_times {
        let sorted = times.windows(2).all(|w| w[0] <= w[1]);
        let in_range = times.iter().all(|&t| t >= t0 && t <= t1);
        if !sorted || !in_range {
            return Err(SolveError::BadOutputTimes);
        }
    }

    let mut result = solve_core(tape, f, a0, t0, t1, cfg)?;

    if let Some(times) = output_times {
        let mut samples = Vec::with_capacity(times.len());
        for &t in times {
            let state = if t == t0 {
                a0.clone()
            } else if t == t1 {
                result.end_state.clone()
            } else {
                solve_core(tape, f, a0, t0, t, cfg)?.end_state
            };
            samples.push((t, state));
        }
        result.samples = Some(samples);
    }
    Ok(result)
}

fn solve_core(
    tape: &mut Tape,
    f: &mut DynFn<'_>,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    match cfg.method {
        Method::Euler => euler(tape, f, a0, t0, t1, cfg),
        Method::Rk4_38 => rk4_38(tape, f, a0, t0, t1, cfg),
        Method::Dopri5 => dopri5(tape, f, a0, t0, t1, cfg),
    }
}

fn euler(
    tape: &mut Tape,
    f: &mut DynFn<'_>,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    let n = cfg.fixed_steps_per_interval;
    let h = (t1 - t0) / n as f64;
    let mut a = a0.clone();
    let mut nfe = 0;
    for i in 0..n {
        let t = t0 + i as f64 * h;
        if nfe + 1 > cfg.max_nfe_per_solve {
            return Err(SolveError::NfeCapExceeded {
                cap: cfg.max_nfe_per_solve,
                nfe,
                t,
            });
        }
        let k = f(tape, &a, t)?;
        nfe += 1;
        let step = tape.scale(&k, h)?;
        a = tape.add(&a, &step)?;
        if !a.all_finite() {
            return Err(SolveError::NonFiniteState { t: t + h });
        }
    }
    Ok(SolveResult {
        end_state: a,
        nfe,
        accepted_steps: n,
        rejected_steps: 0,
        samples: None,
    })
}

/// Classical 3/8-rule tableau: c = [0, 1/3, 2/3, 1],
/// b = [1/8, 3/8, 3/8, 1/8].
fn rk4_38(
    tape: &mut Tape,
    f: &mut DynFn<'_>,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    let n = cfg.fixed_steps_per_interval;
    let h = (t1 - t0) / n as f64;
    let mut a = a0.clone();
    let mut nfe = 0;
    for i in 0..n {
        let t = t0 + i as f64 * h;
        if nfe + 4 > cfg.max_nfe_per_solve {
            return Err(SolveError::NfeCapExceeded {
                cap: cfg.max_nfe_per_solve,
                nfe,
                t,
            });
        }
        let k1 = f(tape, &a, t)?;
        let y2 = lincomb(tape, &a, h, &[(1.0 / 3.0, &k1)])?;
        let k2 = f(tape, &y2, t + h / 3.0)?;
        let y3 = lincomb(tape, &a, h, &[(-1.0 / 3.0, &k1), (1.0, &k2)])?;
        let k3 = f(tape, &y3, t + 2.0 * h / 3.0)?;
        let y4 = lincomb(tape, &a, h, &[(1.0, &k1), (-1.0, &k2), (1.0, &k3)])?;
        let k4 = f(tape, &y4, t + h)?;
        nfe += 4;
        a = lincomb(
            tape,
            &a,
            h,
            &[
                (1.0 / 8.0, &k1),
                (3.0 / 8.0, &k2),
                (3.0 / 8.0, &k3),
                (1.0 / 8.0, &k4),
            ],
        )?;
        if !a.all_finite() {
            return Err(SolveError::NonFiniteState { t: t + h });
        }
    }
    Ok(SolveResult {
        end_state: a,
        nfe,
        accepted_steps: n,
        rejected_steps: 0,
        samples: None,
    })
}

// Dormand-Prince 5(4) coefficients.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th-order weights equal the last A row (FSAL); these are the
// differences b_i - bhat_i used for the embedded error estimate.
const DP_ERR: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

fn dopri5(
    tape: &mut Tape,
    f: &mut DynFn<'_>,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    let mut t = t0;
    let mut y = a0.clone();
    let mut k1 = f(tape, &y, t)?;
    let mut nfe = 1usize;
    let mut h = initial_step(y.data(), k1.data(), t1 - t0, cfg);
    let mut accepted = 0usize;
    let mut rejected = 0usize;

    while t < t1 {
        let clipped = h >= t1 - t;
        if clipped {
            h = t1 - t;
        }
        if nfe + 6 > cfg.max_nfe_per_solve {
            return Err(SolveError::NfeCapExceeded {
                cap: cfg.max_nfe_per_solve,
                nfe,
                t,
            });
        }

        let mut ks: Vec<Tensor> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for stage in 0..6 {
            let coefs: Vec<(f64, &Tensor)> = DP_A[stage]
                .iter()
                .take(stage + 1)
                .zip(ks.iter())
                .map(|(&c, k)| (c, k))
                .collect();
            let y_stage = lincomb(tape, &y, h, &coefs)?;
            let k = f(tape, &y_stage, t + DP_C[stage + 1] * h)?;
            ks.push(k);
        }
        nfe += 6;
        // Stage 7 input is the 5th-order solution (FSAL).
        let y1 = {
            let coefs: Vec<(f64, &Tensor)> = DP_A[5]
                .iter()
                .zip(ks.iter())
                .map(|(&c, k)| (c, k))
                .collect();
            lincomb(tape, &y, h, &coefs)?
        };

        let err = error_norm(&ks, h, y.data(), y1.data(), cfg);
        // A non-finite estimate (overflowing dynamics) shrinks the step
        // as hard as allowed; the NFE cap bounds the retries.
        let factor = if err.is_finite() {
            (cfg.safety * err.powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor)
        } else {
            cfg.min_factor
        };

        if err <= 1.0 {
            accepted += 1;
            t = if clipped { t1 } else { t + h };
            y = y1;
            k1 = ks.pop().expect("stage 7 present");
            if !y.all_finite() {
                return Err(SolveError::NonFiniteState { t });
            }
        } else {
            rejected += 1;
        }
        h *= factor;
    }

    Ok(SolveResult {
        end_state: y,
        nfe,
        accepted_steps: accepted,
        rejected_steps: rejected,
        samples: None,
    })
}

/// First step size from the scaled norms of y0 and f(y0) alone, so no
/// extra function evaluation is spent and the FSAL count identity
/// holds exactly. Solve spans here are unit reasoning intervals, so
/// the guess is biased toward the whole span; a mis-sized guess only
/// costs rejected steps, which the embedded error control corrects.
fn initial_step(y: &[f64], f0: &[f64], span: f64, cfg: &SolverConfig) -> f64 {
    let d0 = scaled_rms_single(y, y, cfg);
    let d1 = scaled_rms_single(f0, y, cfg);
    if d0 < 1e-5 || d1 < 1e-5 {
        return span;
    }
    (0.01 * d0 / d1).clamp(span * 0.1, span)
}

fn scaled_rms_single(v: &[f64], y: &[f64], cfg: &SolverConfig) -> f64 {
    let n = v.len().max(1);
    let mut acc = 0.0;
    for (&vi, &yi) in v.iter().zip(y.iter()) {
        let sc = cfg.atol + cfg.rtol * yi.abs();
        let r = vi / sc;
        acc += r * r;
    }
    (acc / n as f64).sqrt()
}

/// RMS of the embedded error estimate, componentwise scaled by
/// atol + rtol * max(|y0_i|, |y1_i|). A step is accepted when <= 1.
fn error_norm(ks: &[Tensor], h: f64, y0: &[f64], y1: &[f64], cfg: &SolverConfig) -> f64 {
    let n = y0.len().max(1);
    let mut acc = 0.0;
    for i in 0..y0.len() {
        let mut e = 0.0;
        for (k, &c) in ks.iter().zip(DP_ERR.iter()) {
            e += c * k.data()[i];
        }
        e *= h;
        let sc = cfg.atol + cfg.rtol * y0[i].abs().max(y1[i].abs());
        let r = e / sc;
        acc += r * r;
    }
    (acc / n as f64).sqrt()
}

/// y + h * sum(c_i * k_i), skipping zero coefficients.
fn lincomb(
    tape: &mut Tape,
    y: &Tensor,
    h: f64,
    coefs: &[(f64, &Tensor)],
) -> Result<Tensor, TensorError> {
    let mut acc = y.clone();
    for &(c, k) in coefs {
        if c != 0.0 {
            let scaled = tape.scale(k, h * c)?;
            acc = tape.add(&acc, &scaled)?;
        }
    }
    Ok(acc)
}

// ── convergence-order measurement ───────────────────────────────────

/// Max-abs errors of a fixed-step method at each step size in `hs`.
/// Step sizes must evenly divide the span.
pub fn fixed_step_errors(
    method: Method,
    f: &mut DynFn<'_>,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    exact_end: &[f64],
    hs: &[f64],
) -> Result<Vec<f64>, SolveError> {
    let mut errors = Vec::with_capacity(hs.len());
    for &h in hs {
        let steps = ((t1 - t0) / h).round() as usize;
        let cfg = SolverConfig {
            method,
            fixed_steps_per_interval: steps.max(1),
            max_nfe_per_solve: usize::MAX / 2,
            ..SolverConfig::default()
        };
        let mut tape = Tape::eval();
        let r = solve_core(&mut tape, f, a0, t0, t1, &cfg)?;
        let err = r
            .end_state
            .data()
            .iter()
            .zip(exact_end.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        errors.push(err);
    }
    Ok(errors)
}

/// Least-squares slope of log(error) against log(h), i.e. the measured
/// convergence order. Zero-error points are skipped; returns NaN when
/// fewer than two usable points remain.
pub fn empirical_order(
    method: Method,
    f: &mut DynFn<'_>,
    a0: &Tensor,
    t0: f64,
    t1: f64,
    exact_end: &[f64],
    hs: &[f64],
) -> Result<f64, SolveError> {
    let errors = fixed_step_errors(method, f, a0, t0, t1, exact_end, hs)?;
    Ok(log_log_slope(hs, &errors))
}

pub fn log_log_slope(hs: &[f64], errors: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .zip(errors.iter())
        .filter(|(_, &e)| e > 0.0)
        .map(|(&h, &e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

//! Layers and the optimizer: affine maps with Xavier initialization,
//! the bidirectional LSTM question encoder, Adam, and the
//! plateau-halving learning-rate schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Nonlinearity applied after inner affine maps. Final scorers and the
/// classifier output stay linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Elu,
}

impl Nonlinearity {
    pub fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        match self {
            Nonlinearity::Identity => Ok(x.clone()),
            Nonlinearity::Tanh => tape.tanh(x),
            Nonlinearity::Elu => tape.elu(x),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Nonlinearity::Identity),
            "tanh" => Some(Nonlinearity::Tanh),
            "elu" => Some(Nonlinearity::Elu),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::Identity => "identity",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Elu => "elu",
        }
    }
}

/// Walk over a parameter tree in a fixed, documented order. The same
/// order is used for gradient collection, optimizer state, and
/// checkpoints, so the three never disagree.
pub trait ParamContainer: Sized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self;

    /// Copy of the container with every parameter registered as a
    /// tracked leaf on `tape`.
    fn bind(&self, tape: &mut Tape) -> Self {
        self.map_params(&mut |t| tape.leaf(t))
    }

    fn flatten(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

/// Collect loss gradients for every parameter of a bound container, in
/// visit order.
pub fn collect_grads<P: ParamContainer>(
    bound: &P,
    grads: &crate::tape::Gradients,
) -> Result<Vec<Tensor>, ModelError> {
    let mut out = Vec::new();
    let mut err = None;
    bound.visit("", &mut |_, t| {
        if err.is_some() {
            return;
        }
        match grads.get(t) {
            Ok(g) => out.push(g),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

// ── affine ──────────────────────────────────────────────────────────

/// y = W x + b with W stored [out, in].
#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        AffineLayer {
            w: Tensor::zeros(&[out_dim, in_dim]),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn apply_vec(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let wx = tape.matvec(&self.w, x)?;
        tape.add(&wx, &self.b)
    }

    /// Apply to every row of an [L, in] matrix, giving [L, out].
    pub fn apply_rows(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let xw = tape.matmul_bt(x, &self.w)?;
        tape.add_row(&xw, &self.b)
    }
}

impl ParamContainer for AffineLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        AffineLayer {
            w: f(&self.w),
            b: f(&self.b),
        }
    }
}

/// W entries uniform in +-sqrt(6 / (in + out)), bias zero.
pub fn xavier_init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> AffineLayer {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data: Vec<f64> = (0..out_dim * in_dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    AffineLayer {
        w: Tensor::raw(vec![out_dim, in_dim], data),
        b: Tensor::zeros(&[out_dim]),
    }
}

pub fn xavier_bound(out_dim: usize, in_dim: usize) -> f64 {
    (6.0 / (in_dim + out_dim) as f64).sqrt()
}

// ── LSTM ────────────────────────────────────────────────────────────

/// One LSTM direction: a single fused gate affine [4H, in + H] sliced
/// into input, forget, cell, and output gates.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub gates: AffineLayer,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init<R: Rng>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        LstmCell {
            gates: xavier_init(4 * hidden, in_dim + hidden, rng),
            hidden,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        h: &Tensor,
        c: &Tensor,
    ) -> Result<(Tensor, Tensor), ModelError> {
        let hsz = self.hidden;
        let input = tape.concat1d(x, h)?;
        let z = self.gates.apply_vec(tape, &input)?;
        let zi = tape.slice(&z, 0, hsz)?;
        let zf = tape.slice(&z, hsz, hsz)?;
        let zg = tape.slice(&z, 2 * hsz, hsz)?;
        let zo = tape.slice(&z, 3 * hsz, hsz)?;
        let i_g = tape.sigmoid(&zi)?;
        let f_g = tape.sigmoid(&zf)?;
        let g_g = tape.tanh(&zg)?;
        let o_g = tape.sigmoid(&zo)?;
        let keep = tape.mul(&f_g, c)?;
        let fresh = tape.mul(&i_g, &g_g)?;
        let c_new = tape.add(&keep, &fresh)?;
        let c_act = tape.tanh(&c_new)?;
        let h_new = tape.mul(&o_g, &c_act)?;
        Ok((h_new, c_new))
    }
}

impl ParamContainer for LstmCell {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gates.visit(&format!("{prefix}.gates"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gates.visit_mut(&format!("{prefix}.gates"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        LstmCell {
            gates: self.gates.map_params(f),
            hidden: self.hidden,
        }
    }
}

// ── question encoder ────────────────────────────────────────────────

/// Embedding table plus a bidirectional LSTM with hidden size d/2 per
/// direction. Row i of the contextual matrix is [backward_i,
/// forward_i]; the atomic question vector is [backward at token 1,
/// forward at token L], so for a single token q equals the only row.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub embed: Tensor,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub d: usize,
    pub max_len: usize,
}

impl QuestionEncoder {
    pub fn init<R: Rng>(
        vocab: usize,
        embed_dim: usize,
        d: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if d % 2 != 0 {
            return Err(ModelError::OddHidden(d));
        }
        let table: Vec<f64> = (0..vocab * embed_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let half = d / 2;
        Ok(QuestionEncoder {
            embed: Tensor::raw(vec![vocab, embed_dim], table),
            fwd: LstmCell::init(embed_dim, half, rng),
            bwd: LstmCell::init(embed_dim, half, rng),
            d,
            max_len,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    /// Contextualized tokens cw of shape [L, d] and the atomic question
    /// vector q of shape [d].
    pub fn encode(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
    ) -> Result<(Tensor, Tensor), ModelError> {
        let l = token_ids.len();
        if l == 0 {
            return Err(ModelError::EmptyQuestion);
        }
        if l > self.max_len {
            return Err(ModelError::TooManyTokens {
                len: l,
                max: self.max_len,
            });
        }
        for &id in token_ids {
            if id >= self.vocab_size() {
                return Err(ModelError::UnknownToken {
                    id,
                    vocab: self.vocab_size(),
                });
            }
        }
        let xs = tape.gather_rows(&self.embed, token_ids)?;
        let half = self.d / 2;
        let zero = Tensor::zeros(&[half]);

        let mut fwd_h = Vec::with_capacity(l);
        let (mut h, mut c) = (zero.clone(), zero.clone());
        for i in 0..l {
            let x = tape.row(&xs, i)?;
            let (h2, c2) = self.fwd.step(tape, &x, &h, &c)?;
            h = h2;
            c = c2;
            fwd_h.push(h.clone());
        }

        let mut bwd_h = vec![zero.clone(); l];
        let (mut h, mut c) = (zero.clone(), zero);
        for i in (0..l).rev() {
            let x = tape.row(&xs, i)?;
            let (h2, c2) = self.bwd.step(tape, &x, &h, &c)?;
            h = h2;
            c = c2;
            bwd_h[i] = h.clone();
        }

        let mut rows = Vec::with_capacity(l);
        for i in 0..l {
            rows.push(tape.concat1d(&bwd_h[i], &fwd_h[i])?);
        }
        let cw = tape.stack_rows(&rows)?;
        let q = tape.concat1d(&bwd_h[0], &fwd_h[l - 1])?;
        Ok((cw, q))
    }
}

impl ParamContainer for QuestionEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.embed"), &self.embed);
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.bwd.visit(&format!("{prefix}.bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.embed"), &mut self.embed);
        self.fwd.visit_mut(&format!("{prefix}.fwd"), f);
        self.bwd.visit_mut(&format!("{prefix}.bwd"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        QuestionEncoder {
            embed: f(&self.embed),
            fwd: self.fwd.map_params(f),
            bwd: self.bwd.map_params(f),
            d: self.d,
            max_len: self.max_len,
        }
    }
}

// ── Adam ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Bias-corrected Adam update, in place, one gradient tensor per
    /// parameter in visit order.
    pub fn step<P: ParamContainer>(
        &mut self,
        params: &mut P,
        grads: &[Tensor],
    ) -> Result<(), ModelError> {
        if self.m.is_empty() {
            params.visit("", &mut |_, t| {
                self.m.push(vec![0.0; t.len()]);
                self.v.push(vec![0.0; t.len()]);
            });
        }
        let expected = self.m.len();
        if grads.len() != expected {
            return Err(ModelError::GradCountMismatch {
                expected,
                got: grads.len(),
            });
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);

        let mut idx = 0;
        let mut err = None;
        let m = &mut self.m;
        let v = &mut self.v;
        params.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let g = &grads[idx];
            if g.shape() != p.shape() {
                err = Some(ModelError::GradShapeMismatch {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
                return;
            }
            let pm = &mut m[idx];
            let pv = &mut v[idx];
            let pd = p.data_mut();
            for ((pi, &gi), (mi, vi)) in pd
                .iter_mut()
                .zip(g.data().iter())
                .zip(pm.iter_mut().zip(pv.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ── plateau schedule ────────────────────────────────────────────────

pub const MIN_LR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrDecision {
    Keep(f64),
    Halve(f64),
    Stop,
}

/// Halve the learning rate once validation accuracy has not improved
/// for more than one epoch; stop when the rate falls under 1e-7.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub lr: f64,
    best: f64,
    since_best: usize,
    pub patience: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        PlateauSchedule {
            lr,
            best: f64::NEG_INFINITY,
            since_best: 0,
            patience: 1,
        }
    }

    pub fn observe(&mut self, val_acc: f64) -> LrDecision {
        if self.lr < MIN_LR {
            return LrDecision::Stop;
        }
        if val_acc > self.best {
            self.best = val_acc;
            self.since_best = 0;
            return LrDecision::Keep(self.lr);
        }
        self.since_best += 1;
        if self.since_best > self.patience {
            self.lr /= 2.0;
            self.since_best = 0;
            if self.lr < MIN_LR {
                return LrDecision::Stop;
            }
            return LrDecision::Halve(self.lr);
        }
        LrDecision::Keep(self.lr)
    }
}

/// Stateless form: replay the whole accuracy history starting from
/// `initial_lr` and return the decision after the last epoch.
pub fn plateau_schedule(history: &[f64], initial_lr: f64) -> Result<LrDecision, ModelError> {
    if history.is_empty() {
        return Err(ModelError::EmptyHistory);
    }
    let mut sched = PlateauSchedule::new(initial_lr);
    let mut last = LrDecision::Keep(initial_lr);
    for &acc in history {
        last = sched.observe(acc);
        if last == LrDecision::Stop {
            break;
        }
    }
    Ok(last)
}

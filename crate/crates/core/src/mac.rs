//! The baseline memory-attention-composition reasoning cell.
//!
//! Each of T steps: a per-step control projection scores the question
//! tokens (control), the scored control vector drives attention over
//! the knowledge base (read), and an affine over [retrieved, memory]
//! updates the memory (write). A 2-layer classifier over [q, m_T]
//! produces answer logits. Only the inner control projection is a
//! per-step parameter; read, write, scorers, and the classifier are
//! shared across steps.

use crate::error::ModelError;
use crate::nn::{xavier_init, AffineLayer, Nonlinearity, ParamContainer};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;

/// Read and write parameters shared verbatim between the baseline cell
/// and the continuous-attention cell, so both run the same code path.
#[derive(Clone, Debug)]
pub struct ReadWriteParams {
    pub kproj: AffineLayer,   // d -> d, applied to knowledge-base rows
    pub mproj: AffineLayer,   // d -> d, applied to the memory
    pub combine: AffineLayer, // 2d -> d
    pub scorer: AffineLayer,  // d -> 1
    pub write: AffineLayer,   // 2d -> d
}

impl ReadWriteParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        ReadWriteParams {
            kproj: xavier_init(d, d, rng),
            mproj: xavier_init(d, d, rng),
            combine: xavier_init(d, 2 * d, rng),
            scorer: xavier_init(1, d, rng),
            write: xavier_init(d, 2 * d, rng),
        }
    }
}

impl ParamContainer for ReadWriteParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.kproj.visit(&format!("{prefix}.kproj"), f);
        self.mproj.visit(&format!("{prefix}.mproj"), f);
        self.combine.visit(&format!("{prefix}.combine"), f);
        self.scorer.visit(&format!("{prefix}.scorer"), f);
        self.write.visit(&format!("{prefix}.write"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.kproj.visit_mut(&format!("{prefix}.kproj"), f);
        self.mproj.visit_mut(&format!("{prefix}.mproj"), f);
        self.combine.visit_mut(&format!("{prefix}.combine"), f);
        self.scorer.visit_mut(&format!("{prefix}.scorer"), f);
        self.write.visit_mut(&format!("{prefix}.write"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        ReadWriteParams {
            kproj: self.kproj.map_params(f),
            mproj: self.mproj.map_params(f),
            combine: self.combine.map_params(f),
            scorer: self.scorer.map_params(f),
            write: self.write.map_params(f),
        }
    }
}

/// Classifier over [q, m_T]: hidden 2d -> d with the configured
/// nonlinearity, then a linear d -> |A| output.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub hidden: AffineLayer,
    pub out: AffineLayer,
}

impl ClassifierParams {
    pub fn init<R: Rng>(d: usize, n_answers: usize, rng: &mut R) -> Self {
        ClassifierParams {
            hidden: xavier_init(d, 2 * d, rng),
            out: xavier_init(n_answers, d, rng),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        nl: Nonlinearity,
        q: &Tensor,
        m: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let joint = tape.concat1d(q, m)?;
        let pre = self.hidden.apply_vec(tape, &joint)?;
        let h = nl.apply(tape, &pre)?;
        Ok(self.out.apply_vec(tape, &h)?)
    }
}

impl ParamContainer for ClassifierParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        ClassifierParams {
            hidden: self.hidden.map_params(f),
            out: self.out.map_params(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MacCellParams {
    /// Per-step inner control projections, one d -> d affine per step.
    pub control: Vec<AffineLayer>,
    /// Shared control scorer d -> 1.
    pub cscore: AffineLayer,
    pub rw: ReadWriteParams,
    pub classifier: ClassifierParams,
    /// Learned initial memory, zero-initialized.
    pub m0: Tensor,
}

impl MacCellParams {
    pub fn init<R: Rng>(d: usize, t_steps: usize, n_answers: usize, rng: &mut R) -> Self {
        MacCellParams {
            control: (0..t_steps).map(|_| xavier_init(d, d, rng)).collect(),
            cscore: xavier_init(1, d, rng),
            rw: ReadWriteParams::init(d, rng),
            classifier: ClassifierParams::init(d, n_answers, rng),
            m0: Tensor::zeros(&[d]),
        }
    }

    pub fn t_steps(&self) -> usize {
        self.control.len()
    }
}

impl ParamContainer for MacCellParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.control.iter().enumerate() {
            c.visit(&format!("{prefix}.control.{i}"), f);
        }
        self.cscore.visit(&format!("{prefix}.cscore"), f);
        self.rw.visit(&format!("{prefix}.rw"), f);
        self.classifier.visit(&format!("{prefix}.classifier"), f);
        f(&format!("{prefix}.m0"), &self.m0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.control.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.control.{i}"), f);
        }
        self.cscore.visit_mut(&format!("{prefix}.cscore"), f);
        self.rw.visit_mut(&format!("{prefix}.rw"), f);
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
        f(&format!("{prefix}.m0"), &mut self.m0);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        MacCellParams {
            control: self.control.iter().map(|c| c.map_params(f)).collect(),
            cscore: self.cscore.map_params(f),
            rw: self.rw.map_params(f),
            classifier: self.classifier.map_params(f),
            m0: f(&self.m0),
        }
    }
}

/// Attention logits over question tokens and the resulting control
/// vector: a = scorer(proj_t(q) * cw) rowwise, c = softmax(a) . cw.
pub fn control_step(
    tape: &mut Tape,
    proj: &AffineLayer,
    scorer: &AffineLayer,
    nl: Nonlinearity,
    cw: &Tensor,
    q: &Tensor,
) -> Result<(Tensor, Tensor), ModelError> {
    let proj_q = proj.apply_vec(tape, q)?;
    let pq = nl.apply(tape, &proj_q)?;
    let scored = tape.mul_row(cw, &pq)?;
    let logits2d = scorer.apply_rows(tape, &scored)?;
    let a = tape.reshape(&logits2d, &[cw.rows()])?;
    let p = tape.softmax(&a)?;
    let c = tape.vecmat(&p, cw)?;
    Ok((a, c))
}

/// Attention logits over knowledge-base rows and the retrieved
/// information vector. Uses the memory from before this step.
pub fn read_step(
    tape: &mut Tape,
    rw: &ReadWriteParams,
    nl: Nonlinearity,
    kb: &Tensor,
    m_prev: &Tensor,
    c: &Tensor,
) -> Result<(Tensor, Tensor), ModelError> {
    let kp = rw.kproj.apply_rows(tape, kb)?;
    let mp = rw.mproj.apply_vec(tape, m_prev)?;
    let interact = tape.mul_row(&kp, &mp)?;
    let joint = tape.concat_cols(&interact, kb)?;
    let pre = rw.combine.apply_rows(tape, &joint)?;
    let combined = nl.apply(tape, &pre)?;
    let scored = tape.mul_row(&combined, c)?;
    let logits2d = rw.scorer.apply_rows(tape, &scored)?;
    let rq = tape.reshape(&logits2d, &[kb.rows()])?;
    let p = tape.softmax(&rq)?;
    let r = tape.vecmat(&p, kb)?;
    Ok((rq, r))
}

/// m_t = write([r_t, m_prev]).
pub fn write_step(
    tape: &mut Tape,
    rw: &ReadWriteParams,
    r: &Tensor,
    m_prev: &Tensor,
) -> Result<Tensor, ModelError> {
    let joint = tape.concat1d(r, m_prev)?;
    Ok(rw.write.apply_vec(tape, &joint)?)
}

#[derive(Clone, Debug)]
pub struct MacForwardOut {
    pub answer_logits: Tensor,
    /// Textual attention logits a_t, one per step.
    pub text_logits: Vec<Tensor>,
    /// Knowledge-base attention logits rq_t, one per step.
    pub read_logits: Vec<Tensor>,
    pub final_memory: Tensor,
}

/// Run T control/read/write rounds and classify from [q, m_T].
pub fn mac_forward(
    tape: &mut Tape,
    cell: &MacCellParams,
    nl: Nonlinearity,
    cw: &Tensor,
    q: &Tensor,
    kb: &Tensor,
    t_steps: usize,
) -> Result<MacForwardOut, ModelError> {
    if t_steps != cell.t_steps() {
        return Err(ModelError::StepMismatch {
            expected: cell.t_steps(),
            got: t_steps,
        });
    }
    let mut m = cell.m0.clone();
    let mut text_logits = Vec::with_capacity(t_steps);
    let mut read_logits = Vec::with_capacity(t_steps);
    for step in 0..t_steps {
        let (a, c) = control_step(tape, &cell.control[step], &cell.cscore, nl, cw, q)?;
        let (rq, r) = read_step(tape, &cell.rw, nl, kb, &m, &c)?;
        m = write_step(tape, &cell.rw, &r, &m)?;
        text_logits.push(a);
        read_logits.push(rq);
    }
    let answer_logits = cell.classifier.apply(tape, nl, q, &m)?;
    Ok(MacForwardOut {
        answer_logits,
        text_logits,
        read_logits,
        final_memory: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check_params;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Scalar helpers, written loop-by-loop as an arithmetic oracle
    // independent of the tape kernels.
    fn affine_s(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(b.iter())
            .map(|(row, &bi)| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + bi)
            .collect()
    }

    fn softmax_s(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    fn layer(w: Vec<Vec<f64>>, b: Vec<f64>) -> AffineLayer {
        let out = w.len();
        let inp = w[0].len();
        let flat: Vec<f64> = w.iter().flatten().copied().collect();
        AffineLayer {
            w: Tensor::matrix(out, inp, flat).unwrap(),
            b: Tensor::vector(&b),
        }
    }

    #[test]
    fn identical_rows_give_uniform_attention_and_that_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 4;
        let proj = crate::nn::xavier_init(d, d, &mut rng);
        let scorer = crate::nn::xavier_init(1, d, &mut rng);
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cw = Tensor::matrix(3, d, [row.clone(), row.clone(), row.clone()].concat()).unwrap();
        let q = Tensor::vector(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let mut tape = Tape::eval();
        let (a, c) =
            control_step(&mut tape, &proj, &scorer, Nonlinearity::Elu, &cw, &q).unwrap();
        let p = crate::tape::softmax_kernel(a.data());
        for &pi in &p {
            assert_eq!(pi, 1.0 / 3.0);
        }
        for (ci, ri) in c.data().iter().zip(row.iter()) {
            assert!((ci - ri).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scorer_gives_uniform_attention_for_any_question() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let proj = crate::nn::xavier_init(d, d, &mut rng);
        let scorer = AffineLayer::zeros(1, d);
        let cw = Tensor::matrix(
            5,
            d,
            (0..5 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        for _ in 0..3 {
            let q =
                Tensor::vector(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let mut tape = Tape::eval();
            let (a, _c) =
                control_step(&mut tape, &proj, &scorer, Nonlinearity::Elu, &cw, &q).unwrap();
            let p = crate::tape::softmax_kernel(a.data());
            for &pi in &p {
                assert_eq!(pi, 0.2);
            }
        }
    }

    #[test]
    fn control_step_matches_scalar_oracle() {
        // d = 2, L = 2, identity nonlinearity, hand-set weights.
        let proj_w = vec![vec![0.5, -0.25], vec![1.0, 0.75]];
        let proj_b = vec![0.1, -0.2];
        let scorer_w = vec![vec![0.3, -0.4]];
        let scorer_b = vec![0.05];
        let cw_rows = [vec![1.0, 2.0], vec![-1.0, 0.5]];
        let q = vec![0.4, -0.6];

        let pq = affine_s(&proj_w, &proj_b, &q);
        let mut logits = Vec::new();
        for row in &cw_rows {
            let scored: Vec<f64> = row.iter().zip(pq.iter()).map(|(a, b)| a * b).collect();
            logits.push(affine_s(&scorer_w, &scorer_b, &scored)[0]);
        }
        let probs = softmax_s(&logits);
        let mut c_expect = vec![0.0; 2];
        for (p, row) in probs.iter().zip(cw_rows.iter()) {
            for (ci, ri) in c_expect.iter_mut().zip(row.iter()) {
                *ci += p * ri;
            }
        }

        let mut tape = Tape::eval();
        let cw = Tensor::matrix(2, 2, cw_rows.concat()).unwrap();
        let (a, c) = control_step(
            &mut tape,
            &layer(proj_w, proj_b),
            &layer(scorer_w, scorer_b),
            Nonlinearity::Identity,
            &cw,
            &Tensor::vector(&q),
        )
        .unwrap();
        for (got, want) in a.data().iter().zip(logits.iter()) {
            assert!((got - want).abs() < 1e-12, "logits {got} vs {want}");
        }
        for (got, want) in c.data().iter().zip(c_expect.iter()) {
            assert!((got - want).abs() < 1e-12, "control {got} vs {want}");
        }
    }

    #[test]
    fn single_fact_read_is_that_fact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let rw = ReadWriteParams::init(d, &mut rng);
        let kb_row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kb = Tensor::matrix(1, d, kb_row.clone()).unwrap();
        let m = Tensor::zeros(&[d]);
        let c = Tensor::vector(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let mut tape = Tape::eval();
        let (rq, r) = read_step(&mut tape, &rw, Nonlinearity::Elu, &kb, &m, &c).unwrap();
        assert_eq!(crate::tape::softmax_kernel(rq.data()), vec![1.0]);
        assert_eq!(r.data(), &kb_row[..]);
    }

    #[test]
    fn identical_facts_read_back_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let rw = ReadWriteParams::init(d, &mut rng);
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kb = Tensor::matrix(4, d, row.repeat(4)).unwrap();
        let m = Tensor::vector(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let c = Tensor::vector(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let mut tape = Tape::eval();
        let (_rq, r) = read_step(&mut tape, &rw, Nonlinearity::Elu, &kb, &m, &c).unwrap();
        for (got, want) in r.data().iter().zip(row.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn read_step_matches_scalar_oracle() {
        // d = 2, S = 2, identity nonlinearity, hand-set weights.
        let kproj_w = vec![vec![0.2, -0.1], vec![0.3, 0.4]];
        let kproj_b = vec![0.0, 0.1];
        let mproj_w = vec![vec![-0.5, 0.6], vec![0.7, 0.2]];
        let mproj_b = vec![0.05, -0.05];
        let combine_w = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.4, -0.3, -0.2, -0.1]];
        let combine_b = vec![0.02, -0.03];
        let scorer_w = vec![vec![0.6, -0.7]];
        let scorer_b = vec![0.01];
        let write_w = vec![vec![0.0; 4]; 2];
        let write_b = vec![0.0; 2];

        let kb_rows = [vec![0.9, -0.8], vec![-0.2, 0.3]];
        let m = vec![0.25, -0.5];
        let c = vec![0.85, 0.15];

        let mp = affine_s(&mproj_w, &mproj_b, &m);
        let mut logits = Vec::new();
        for row in &kb_rows {
            let kp = affine_s(&kproj_w, &kproj_b, row);
            let interact: Vec<f64> = kp.iter().zip(mp.iter()).map(|(a, b)| a * b).collect();
            let joint: Vec<f64> = interact.iter().chain(row.iter()).copied().collect();
            let combined = affine_s(&combine_w, &combine_b, &joint);
            let scored: Vec<f64> = combined.iter().zip(c.iter()).map(|(a, b)| a * b).collect();
            logits.push(affine_s(&scorer_w, &scorer_b, &scored)[0]);
        }
        let probs = softmax_s(&logits);
        let mut r_expect = vec![0.0; 2];
        for (p, row) in probs.iter().zip(kb_rows.iter()) {
            for (ri, ki) in r_expect.iter_mut().zip(row.iter()) {
                *ri += p * ki;
            }
        }

        let rw = ReadWriteParams {
            kproj: layer(kproj_w, kproj_b),
            mproj: layer(mproj_w, mproj_b),
            combine: layer(combine_w, combine_b),
            scorer: layer(scorer_w, scorer_b),
            write: layer(write_w, write_b),
        };
        let mut tape = Tape::eval();
        let (rq, r) = read_step(
            &mut tape,
            &rw,
            Nonlinearity::Identity,
            &Tensor::matrix(2, 2, kb_rows.concat()).unwrap(),
            &Tensor::vector(&m),
            &Tensor::vector(&c),
        )
        .unwrap();
        for (got, want) in rq.data().iter().zip(logits.iter()) {
            assert!((got - want).abs() < 1e-12, "read logits {got} vs {want}");
        }
        for (got, want) in r.data().iter().zip(r_expect.iter()) {
            assert!((got - want).abs() < 1e-12, "read vector {got} vs {want}");
        }
    }

    #[test]
    fn write_step_selectors_and_random_weights() {
        let d = 3;
        // [I | 0] keeps the retrieved vector.
        let mut sel_r = vec![vec![0.0; 2 * d]; d];
        for (i, row) in sel_r.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        // [0 | I] keeps the previous memory.
        let mut sel_m = vec![vec![0.0; 2 * d]; d];
        for (i, row) in sel_m.iter_mut().enumerate() {
            row[d + i] = 1.0;
        }
        let r = Tensor::vector(&[0.1, -0.2, 0.3]);
        let m = Tensor::vector(&[2.0, 3.0, -4.0]);

        let mut rw_r = ReadWriteParams::init(d, &mut ChaCha8Rng::seed_from_u64(5));
        rw_r.write = layer(sel_r, vec![0.0; d]);
        let mut tape = Tape::eval();
        assert_eq!(
            write_step(&mut tape, &rw_r, &r, &m).unwrap().data(),
            r.data()
        );

        let mut rw_m = ReadWriteParams::init(d, &mut ChaCha8Rng::seed_from_u64(6));
        rw_m.write = layer(sel_m, vec![0.0; d]);
        assert_eq!(
            write_step(&mut tape, &rw_m, &r, &m).unwrap().data(),
            m.data()
        );

        // Random weights against a direct matrix product.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rw = ReadWriteParams::init(d, &mut rng);
        let got = write_step(&mut tape, &rw, &r, &m).unwrap();
        let joint: Vec<f64> = r.data().iter().chain(m.data().iter()).copied().collect();
        for i in 0..d {
            let row = &rw.write.w.data()[i * 2 * d..(i + 1) * 2 * d];
            let want: f64 =
                row.iter().zip(joint.iter()).map(|(a, b)| a * b).sum::<f64>() + rw.write.b.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    fn tiny_inputs(
        d: usize,
        l: usize,
        s: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, Tensor, Tensor) {
        let cw = Tensor::matrix(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let q = Tensor::vector(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let kb = Tensor::matrix(s, d, (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        (cw, q, kb)
    }

    #[test]
    fn forward_shapes_and_trajectory_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, l, s, n_answers) = (4, 3, 2, 6);
        let cell = MacCellParams::init(d, 1, n_answers, &mut rng);
        let (cw, q, kb) = tiny_inputs(d, l, s, &mut rng);
        let mut tape = Tape::eval();
        let out = mac_forward(&mut tape, &cell, Nonlinearity::Elu, &cw, &q, &kb, 1).unwrap();
        assert_eq!(out.answer_logits.shape(), &[n_answers]);
        assert_eq!(out.text_logits.len(), 1);
        assert_eq!(out.read_logits.len(), 1);
        assert!(matches!(
            mac_forward(&mut tape, &cell, Nonlinearity::Elu, &cw, &q, &kb, 2),
            Err(ModelError::StepMismatch { .. })
        ));
    }

    #[test]
    fn zero_weights_give_uniform_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, l, s, n_answers) = (4, 3, 2, 6);
        let mut cell = MacCellParams::init(d, 2, n_answers, &mut rng);
        cell = cell.map_params(&mut |t| Tensor::zeros(t.shape()));
        let (cw, q, kb) = tiny_inputs(d, l, s, &mut rng);
        let mut tape = Tape::eval();
        let out = mac_forward(&mut tape, &cell, Nonlinearity::Elu, &cw, &q, &kb, 2).unwrap();
        let p = crate::tape::softmax_kernel(out.answer_logits.data());
        for &pi in &p {
            assert_eq!(pi, 1.0 / n_answers as f64);
        }
    }

    #[test]
    fn permuting_facts_permutes_read_attention_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (d, l, s) = (4, 3, 4);
        let cell = MacCellParams::init(d, 2, 6, &mut rng);
        let (cw, q, kb) = tiny_inputs(d, l, s, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut kb_perm = Vec::with_capacity(s * d);
        for &i in &perm {
            kb_perm.extend_from_slice(&kb.data()[i * d..(i + 1) * d]);
        }
        let kb_perm = Tensor::matrix(s, d, kb_perm).unwrap();

        let mut tape = Tape::eval();
        let base = mac_forward(&mut tape, &cell, Nonlinearity::Elu, &cw, &q, &kb, 2).unwrap();
        let permuted =
            mac_forward(&mut tape, &cell, Nonlinearity::Elu, &cw, &q, &kb_perm, 2).unwrap();

        for (b, p) in base.read_logits.iter().zip(permuted.read_logits.iter()) {
            let pb = crate::tape::softmax_kernel(b.data());
            let pp = crate::tape::softmax_kernel(p.data());
            for (j, &src) in perm.iter().enumerate() {
                assert!((pb[src] - pp[j]).abs() < 1e-12);
            }
        }
        for (b, p) in base
            .answer_logits
            .data()
            .iter()
            .zip(permuted.answer_logits.data().iter())
        {
            assert!((b - p).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = MacCellParams::init(4, 3, 6, &mut rng);
        let (cw, q, kb) = tiny_inputs(4, 3, 2, &mut rng);
        let run = || {
            let mut tape = Tape::eval();
            mac_forward(&mut tape, &cell, Nonlinearity::Elu, &cw, &q, &kb, 3)
                .unwrap()
                .answer_logits
        };
        assert!(run().bits_eq(&run()));
    }

    #[test]
    fn cell_gradients_match_finite_differences_end_to_end() {
        // Tiny instance: d=4, L=3, S=2, T=2, cross-entropy loss.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (d, l, s) = (4, 3, 2);
        let cell = MacCellParams::init(d, 2, 5, &mut rng);
        let (cw, q, kb) = tiny_inputs(d, l, s, &mut rng);
        let errors = finite_difference_check_params(
            &cell,
            |tape, cell: &MacCellParams| {
                let out = mac_forward(tape, cell, Nonlinearity::Elu, &cw, &q, &kb, 2)?;
                Ok(tape.cross_entropy(&out.answer_logits, 3)?)
            },
            1e-5,
        )
        .unwrap();
        for (name, err) in errors {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

//! Attention-trajectory metrics: Jensen-Shannon divergence, the
//! per-transition length LT, its sum TLT, relative TLT by question
//! type, and mean/confidence-interval summaries.
//!
//! All functions here are evaluation-only and validate their inputs;
//! the differentiable JSD used by the penalty training mode is the
//! separate tape primitive.

use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::MetricError;

pub const ROW_SUM_TOL: f64 = 1e-9;

/// A T x L row-stochastic matrix of attention probabilities.
#[derive(Clone, Debug)]
pub struct AttentionTrajectory {
    rows: Vec<Vec<f64>>,
    pub include_lt0: bool,
    pub question_type: Option<String>,
    pub token_labels: Option<Vec<String>>,
}

impl AttentionTrajectory {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        for (i, row) in rows.iter().enumerate() {
            validate_distribution(row).map_err(|reason| MetricError::NotADistribution {
                row: i,
                reason,
            })?;
        }
        Ok(AttentionTrajectory {
            rows,
            include_lt0: false,
            question_type: None,
            token_labels: None,
        })
    }

    pub fn with_lt0(mut self, include: bool) -> Self {
        self.include_lt0 = include;
        self
    }

    pub fn with_question_type(mut self, qt: impl Into<String>) -> Self {
        self.question_type = Some(qt.into());
        self
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

#[derive(Clone, Debug)]
pub struct TltReport {
    pub lt: Vec<f64>,
    pub tlt: f64,
    pub question_type: Option<String>,
}

fn validate_distribution(p: &[f64]) -> Result<(), String> {
    if p.is_empty() {
        return Err("empty".into());
    }
    for &x in p {
        if !(x >= 0.0) {
            return Err(format!("negative entry {x}"));
        }
        if x > 1.0 + ROW_SUM_TOL {
            return Err(format!("entry {x} above 1"));
        }
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Base-2 Jensen-Shannon divergence between two categorical
/// distributions, in [0, 1]. 0 * log(0/x) terms are 0; a positive mass
/// against a zero mass contributes finitely (p * log2(2) = p).
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::LengthMismatch(p.len(), q.len()));
    }
    validate_distribution(p)
        .map_err(|reason| MetricError::NotADistribution { row: 0, reason })?;
    validate_distribution(q)
        .map_err(|reason| MetricError::NotADistribution { row: 1, reason })?;
    Ok(crate::tape::jsd_kernel(p, q).clamp(0.0, 1.0))
}

/// Length of transition at step t (1-based): the JSD between row t and
/// row t+1 of the trajectory.
pub fn lt(traj: &AttentionTrajectory, t: usize) -> Result<f64, MetricError> {
    let max = traj.steps().saturating_sub(1);
    if t < 1 || t > max {
        return Err(MetricError::LtIndex { t, max });
    }
    jsd(traj.row(t - 1), traj.row(t))
}

/// Total length of transition: the sum of LT over consecutive rows.
/// With `include_lt0` a uniform row is prepended first, so the bound
/// becomes T instead of T - 1.
pub fn tlt(traj: &AttentionTrajectory) -> Result<TltReport, MetricError> {
    let min = if traj.include_lt0 { 1 } else { 2 };
    if traj.steps() < min {
        return Err(MetricError::TooShort {
            rows: traj.steps(),
            min,
        });
    }
    let mut rows: Vec<&[f64]> = Vec::with_capacity(traj.steps() + 1);
    let uniform;
    if traj.include_lt0 {
        let l = traj.row(0).len();
        uniform = vec![1.0 / l as f64; l];
        rows.push(&uniform);
    }
    rows.extend(traj.rows().iter().map(|r| r.as_slice()));

    let mut lts = Vec::with_capacity(rows.len() - 1);
    for w in rows.windows(2) {
        lts.push(jsd(w[0], w[1])?);
    }
    let total = lts.iter().sum();
    Ok(TltReport {
        lt: lts,
        tlt: total,
        question_type: traj.question_type.clone(),
    })
}

/// Per-type mean TLT divided by the overall mean TLT.
pub fn relative_tlt(reports: &[TltReport]) -> Result<BTreeMap<String, f64>, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::Empty);
    }
    let overall: f64 = reports.iter().map(|r| r.tlt).sum::<f64>() / reports.len() as f64;
    if overall == 0.0 {
        return Err(MetricError::ZeroOverallTlt);
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        let qt = r
            .question_type
            .as_ref()
            .ok_or(MetricError::MissingQuestionType)?;
        let e = sums.entry(qt.clone()).or_insert((0.0, 0));
        e.0 += r.tlt;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(qt, (s, n))| (qt, (s / n as f64) / overall))
        .collect())
}

/// Mean and 95% confidence half-width using the t distribution with
/// N - 1 degrees of freedom.
pub fn summarize(values: &[f64]) -> Result<(f64, f64), MetricError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = t_critical_975(n - 1);
    Ok((mean, t * sd / (n as f64).sqrt()))
}

/// Two-sided 95% critical value of Student's t with `df` degrees of
/// freedom.
pub fn t_critical_975(df: usize) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("valid dof");
    dist.inverse_cdf(0.975)
}

/// How many times the argmax token changes along the trajectory. Debug
/// statistic only; TLT is the contractual measure.
pub fn argmax_shifts(traj: &AttentionTrajectory) -> usize {
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    };
    traj.rows()
        .windows(2)
        .filter(|w| argmax(&w[0]) != argmax(&w[1]))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent oracle 1: direct evaluation of the defining double
    // sum, written without the shared term helper.
    fn jsd_def_oracle(p: &[f64], q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for s in 0..p.len() {
            if p[s] > 0.0 {
                acc += p[s] * (2.0 * p[s] / (p[s] + q[s])).ln() / std::f64::consts::LN_2;
            }
            if q[s] > 0.0 {
                acc += q[s] * (2.0 * q[s] / (p[s] + q[s])).ln() / std::f64::consts::LN_2;
            }
        }
        0.5 * acc
    }

    // Independent oracle 2: 0.5 KL(P||M) + 0.5 KL(Q||M), M = (P+Q)/2.
    fn jsd_kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b.iter())
                .map(|(&x, &y)| if x > 0.0 { x * (x / y).log2() } else { 0.0 })
                .sum()
        };
        let m: Vec<f64> = p.iter().zip(q.iter()).map(|(&a, &b)| 0.5 * (a + b)).collect();
        0.5 * kl(p, &m) + 0.5 * kl(q, &m)
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0f64..1.0).max(1e-12)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn jsd_of_identical_distributions_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 5, 9] {
            let p = random_dist(&mut rng, n);
            assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn jsd_of_disjoint_masses_is_one() {
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(
            jsd(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.25, 0.75]).unwrap(),
            1.0
        );
    }

    #[test]
    fn jsd_two_formula_cross_check() {
        // The spec's worked pair first, then random pairs.
        let v = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        let o1 = jsd_def_oracle(&[1.0, 0.0], &[0.5, 0.5]);
        let o2 = jsd_kl_oracle(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((v - o1).abs() < 1e-12);
        assert!((o1 - o2).abs() < 1e-12);
        assert!((v - 0.3112781244591328).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = random_dist(&mut rng, 7);
            let q = random_dist(&mut rng, 7);
            let v = jsd(&p, &q).unwrap();
            let o1 = jsd_def_oracle(&p, &q);
            let o2 = jsd_kl_oracle(&p, &q);
            assert!((v - o1).abs() < 1e-12);
            assert!((v - o2).abs() < 1e-12);
        }
    }

    #[test]
    fn jsd_symmetry_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let n = rng.gen_range(2..10);
            let p = random_dist(&mut rng, n);
            let q = random_dist(&mut rng, n);
            let ab = jsd(&p, &q).unwrap();
            let ba = jsd(&q, &p).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn jsd_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let p = random_dist(&mut rng, 6);
            let mut q = p.clone();
            // A definite perturbation keeps the divergence positive.
            q[0] = (q[0] + 0.1).min(1.0);
            let s: f64 = q.iter().sum();
            for x in &mut q {
                *x /= s;
            }
            assert!(jsd(&p, &q).unwrap() > 0.0);
        }
    }

    #[test]
    fn jsd_validates_inputs() {
        assert!(matches!(
            jsd(&[0.5, 0.5], &[0.5, 0.25, 0.25]),
            Err(MetricError::LengthMismatch(2, 3))
        ));
        assert!(matches!(
            jsd(&[-0.1, 1.1], &[0.5, 0.5]),
            Err(MetricError::NotADistribution { .. })
        ));
        assert!(matches!(
            jsd(&[0.7, 0.7], &[0.5, 0.5]),
            Err(MetricError::NotADistribution { .. })
        ));
    }

    #[test]
    fn lt_is_jsd_of_consecutive_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| random_dist(&mut rng, 5)).collect();
        let traj = AttentionTrajectory::new(rows.clone()).unwrap();
        for t in 1..=3 {
            let direct = jsd(&rows[t - 1], &rows[t]).unwrap();
            assert_eq!(lt(&traj, t).unwrap(), direct);
        }
        assert!(matches!(lt(&traj, 0), Err(MetricError::LtIndex { .. })));
        assert!(matches!(lt(&traj, 4), Err(MetricError::LtIndex { .. })));
    }

    #[test]
    fn constant_trajectory_has_zero_lt_and_tlt() {
        let row = vec![0.25, 0.25, 0.5];
        let traj = AttentionTrajectory::new(vec![row.clone(); 5]).unwrap();
        let report = tlt(&traj).unwrap();
        assert!(report.lt.iter().all(|&x| x == 0.0));
        assert_eq!(report.tlt, 0.0);
    }

    #[test]
    fn alternating_disjoint_rows_attain_the_bound() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|t| {
                if t % 2 == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            })
            .collect();
        let traj = AttentionTrajectory::new(rows).unwrap();
        let report = tlt(&traj).unwrap();
        assert!(report.lt.iter().all(|&x| x == 1.0));
        assert_eq!(report.tlt, 4.0); // T - 1 with T = 5
    }

    #[test]
    fn lt0_prepends_a_uniform_row() {
        let rows = vec![vec![0.5, 0.5], vec![0.9, 0.1]];
        let without = tlt(&AttentionTrajectory::new(rows.clone()).unwrap()).unwrap();
        let with = tlt(&AttentionTrajectory::new(rows).unwrap().with_lt0(true)).unwrap();
        // First row is already uniform, so LT(0) = 0.
        assert_eq!(with.lt.len(), without.lt.len() + 1);
        assert_eq!(with.lt[0], 0.0);
        assert_eq!(with.tlt, without.tlt);

        let peaked = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let with = tlt(&AttentionTrajectory::new(peaked).unwrap().with_lt0(true)).unwrap();
        assert!(with.lt[0] > 0.0);
    }

    #[test]
    fn tlt_needs_enough_rows() {
        let one = AttentionTrajectory::new(vec![vec![1.0]]).unwrap();
        assert!(matches!(tlt(&one), Err(MetricError::TooShort { .. })));
        let one_lt0 = AttentionTrajectory::new(vec![vec![1.0]]).unwrap().with_lt0(true);
        assert!(tlt(&one_lt0).is_ok());
    }

    #[test]
    fn tlt_bounded_by_t_minus_one_over_10k_random_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let t = rng.gen_range(2..8);
            let l = rng.gen_range(2..7);
            let rows: Vec<Vec<f64>> = (0..t).map(|_| random_dist(&mut rng, l)).collect();
            let traj = AttentionTrajectory::new(rows).unwrap();
            let report = tlt(&traj).unwrap();
            assert!(report.tlt <= (t - 1) as f64 + 1e-12);
            assert!(report.lt.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn relative_tlt_single_type_is_one() {
        let reports = vec![
            TltReport { lt: vec![], tlt: 0.5, question_type: Some("count".into()) },
            TltReport { lt: vec![], tlt: 1.5, question_type: Some("count".into()) },
        ];
        let rel = relative_tlt(&reports).unwrap();
        assert_eq!(rel["count"], 1.0);
    }

    #[test]
    fn relative_tlt_two_types_equal_counts() {
        // Per-type means 2.0 and 1.0 -> 4/3 and 2/3.
        let reports = vec![
            TltReport { lt: vec![], tlt: 2.0, question_type: Some("compare_numbers".into()) },
            TltReport { lt: vec![], tlt: 2.0, question_type: Some("compare_numbers".into()) },
            TltReport { lt: vec![], tlt: 1.0, question_type: Some("query_attribute".into()) },
            TltReport { lt: vec![], tlt: 1.0, question_type: Some("query_attribute".into()) },
        ];
        let rel = relative_tlt(&reports).unwrap();
        assert!((rel["compare_numbers"] - 4.0 / 3.0).abs() < 1e-15);
        assert!((rel["query_attribute"] - 2.0 / 3.0).abs() < 1e-15);
        // The comparative type sits above the query type, the ordering
        // reported for the full-scale experiments.
        assert!(rel["compare_numbers"] > rel["query_attribute"]);
    }

    #[test]
    fn relative_tlt_rejects_zero_overall_and_missing_types() {
        let zero = vec![TltReport { lt: vec![], tlt: 0.0, question_type: Some("count".into()) }];
        assert!(matches!(relative_tlt(&zero), Err(MetricError::ZeroOverallTlt)));
        let untyped = vec![TltReport { lt: vec![], tlt: 1.0, question_type: None }];
        assert!(matches!(
            relative_tlt(&untyped),
            Err(MetricError::MissingQuestionType)
        ));
        assert!(matches!(relative_tlt(&[]), Err(MetricError::Empty)));
    }

    #[test]
    fn summarize_identical_values_has_zero_width() {
        let (mean, hw) = summarize(&[2.5, 2.5, 2.5]).unwrap();
        assert_eq!(mean, 2.5);
        assert_eq!(hw, 0.0);
    }

    #[test]
    fn summarize_matches_t_table() {
        // 1..5: mean 3, s = sqrt(2.5); t_{0.975,4} = 2.776445105198
        // from a published critical-value table.
        let (mean, hw) = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(mean, 3.0);
        let t_table = 2.776445105198;
        let expect = t_table * (2.5f64).sqrt() / (5.0f64).sqrt();
        assert!((hw - expect).abs() < 1e-6, "hw {hw} vs {expect}");
        assert!((t_critical_975(4) - t_table).abs() < 1e-6);
        // A couple more table rows.
        assert!((t_critical_975(1) - 12.706204736).abs() < 1e-4);
        assert!((t_critical_975(10) - 2.2281388520).abs() < 1e-6);
    }

    #[test]
    fn summarize_needs_two_values() {
        assert!(matches!(summarize(&[1.0]), Err(MetricError::TooFewSamples(1))));
        assert!(matches!(summarize(&[]), Err(MetricError::TooFewSamples(0))));
    }

    #[test]
    fn argmax_shift_count() {
        let traj = AttentionTrajectory::new(vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
            vec![0.1, 0.9],
        ])
        .unwrap();
        assert_eq!(argmax_shifts(&traj), 1);
    }
}

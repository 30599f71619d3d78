//! How attention scores react when the magnitude of a query grows.
//!
//! For two keys `K_m`, `K_n` the score ratio `p = score_m / score_n` is the
//! quantity of interest:
//!
//! * softmax: scaling `Q_i` by `a` raises the ratio to `p^a`;
//! * linear attention: scaling `φ(Q_i)` by `a` leaves every score unchanged;
//! * MALA: scaling `φ(Q_i)` by `a` gives `β_new = (β + a − 1)/a`,
//!   `γ_new = aγ`, and the ratio becomes `f(c)` with
//!   `f(x) = (A_m − γx)/(A_n − γx)`, `A_j = β φ(Q_i)φ(K_j)ᵀ` and
//!   `c = aβ/(a + β − 1) > 1`. While the scores involved stay positive `f`
//!   is increasing, so the ratio grows, but only towards the finite limit
//!   `f(β)`.
//!
//! The MALA routines take φ-features, never raw queries, so that `a` scales
//! `‖φ(Q_i)‖` exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    linear_scores_features, mala_scores_features, softmax_attention, AttentionOutput, Mechanism,
};
use crate::error::{Error, Result};
use crate::kernels::{kernel_apply, KernelKind};
use crate::numerics::{dot, norm, row_entropy, Matrix};
use crate::sampling::{instance_rng, log_uniform, matrix_with_row_norms, normal_matrix};

/// Splits a feature row into its Euclidean norm and unit direction.
pub fn decompose_magnitude(row: &[f64]) -> Result<(f64, Vec<f64>)> {
    let magnitude = norm(row);
    if !(magnitude > 0.0) {
        return Err(Error::ZeroVector { row: 0 });
    }
    Ok((magnitude, row.iter().map(|x| x / magnitude).collect()))
}

/// Softmax ratio `p` of a query's attention on `k_m` over `k_n`, and the
/// same ratio `p_s` after scaling the query by `a`, computed from the scaled
/// query rather than as `p^a`.
pub fn softmax_ratio(
    q_row: &[f64],
    k_m: &[f64],
    k_n: &[f64],
    d: usize,
    a: f64,
) -> Result<(f64, f64)> {
    if q_row.len() != k_m.len() || q_row.len() != k_n.len() || d == 0 {
        return Err(Error::Shape {
            op: "softmax_ratio",
            lhs: (1, q_row.len()),
            rhs: (k_m.len(), k_n.len()),
        });
    }
    if !(a >= 1.0) || !a.is_finite() {
        return Err(Error::Domain(format!("scale factor must be >= 1, got {a}")));
    }
    let sqrt_d = (d as f64).sqrt();
    let logit = (dot(q_row, k_m) - dot(q_row, k_n)) / sqrt_d;
    let scaled: Vec<f64> = q_row.iter().map(|x| a * x).collect();
    let scaled_logit = (dot(&scaled, k_m) - dot(&scaled, k_n)) / sqrt_d;
    Ok((checked_exp(logit)?, checked_exp(scaled_logit)?))
}

fn checked_exp(x: f64) -> Result<f64> {
    let y = x.exp();
    if !y.is_finite() {
        return Err(Error::Overflow {
            value: x,
            limit: crate::kernels::EXP_INPUT_LIMIT,
        });
    }
    Ok(y)
}

/// Score of one query row under MALA, with the row's β and γ.
fn mala_row(phi_q_row: &[f64], phi_k: &Matrix) -> Result<(Vec<f64>, f64, f64)> {
    let q = Matrix::new(1, phi_q_row.len(), phi_q_row.to_vec())?;
    let s = mala_scores_features(&q, phi_k)?;
    Ok((s.scores.into_data(), s.beta[0], s.gamma[0]))
}

fn check_pair(phi_k: &Matrix, m: usize, n: usize) -> Result<()> {
    if m >= phi_k.rows() || n >= phi_k.rows() || m == n {
        return Err(Error::Domain(format!(
            "key indices must be distinct and below {}, got m={m} n={n}",
            phi_k.rows()
        )));
    }
    Ok(())
}

/// One query against two keys, before and after scaling `φ(Q_i)` by `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub a: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Recomputed from the scaled features, not from the closed form.
    pub beta_new: f64,
    pub gamma_new: f64,
    /// `score_m / score_n` before scaling; present when both are positive.
    pub p: Option<f64>,
    /// `score_m / score_n` after scaling; present when both are positive.
    pub p_m: Option<f64>,
    /// Softmax ratio after scaling the raw query; filled in by callers that
    /// have raw queries and keys.
    pub p_s: Option<f64>,
    /// Every score of the query row is positive, before and after scaling.
    pub all_scores_positive: bool,
}

impl ScalingReport {
    /// Absolute errors of the closed-form relations
    /// `β_new = (β + a − 1)/a` and `γ_new = aγ`.
    pub fn relation_errors(&self) -> (f64, f64) {
        (
            (self.beta_new - (self.beta + self.a - 1.0) / self.a).abs(),
            (self.gamma_new - self.a * self.gamma).abs(),
        )
    }

    /// Both ratios present, i.e. the two scores in question stayed positive.
    pub fn pair_positive(&self) -> bool {
        self.p.is_some() && self.p_m.is_some()
    }
}

pub fn mala_scaling_report(
    phi_q_row: &[f64],
    phi_k: &Matrix,
    m: usize,
    n: usize,
    a: f64,
) -> Result<ScalingReport> {
    check_pair(phi_k, m, n)?;
    if !(a > 1.0) || !a.is_finite() {
        return Err(Error::Domain(format!("scale factor must be > 1, got {a}")));
    }
    let (scores, beta, gamma) = mala_row(phi_q_row, phi_k)?;
    let scaled_q: Vec<f64> = phi_q_row.iter().map(|x| a * x).collect();
    let (scaled, beta_new, gamma_new) = mala_row(&scaled_q, phi_k)?;
    let ratio = |s: &[f64]| (s[m] > 0.0 && s[n] > 0.0).then(|| s[m] / s[n]);
    Ok(ScalingReport {
        a,
        beta,
        gamma,
        beta_new,
        gamma_new,
        p: ratio(&scores),
        p_m: ratio(&scaled),
        p_s: None,
        all_scores_positive: scores.iter().chain(&scaled).all(|&x| x > 0.0),
    })
}

/// Ratio `score_m / score_n` after scaling by `a`, whatever the signs.
pub fn scaled_pair_ratio(
    phi_q_row: &[f64],
    phi_k: &Matrix,
    m: usize,
    n: usize,
    a: f64,
) -> Result<f64> {
    check_pair(phi_k, m, n)?;
    let scaled_q: Vec<f64> = phi_q_row.iter().map(|x| a * x).collect();
    let (scores, _, _) = mala_row(&scaled_q, phi_k)?;
    if scores[n] == 0.0 {
        return Err(Error::Domain("scaled score of key n is zero".into()));
    }
    Ok(scores[m] / scores[n])
}

/// `lim_{a→∞} p_m = (A_m − βγ)/(A_n − βγ)`.
pub fn mala_ratio_limit(phi_q_row: &[f64], phi_k: &Matrix, m: usize, n: usize) -> Result<f64> {
    check_pair(phi_k, m, n)?;
    let (limit, _) = ratio_limit_parts(phi_q_row, phi_k, m, n)?;
    limit
}

/// The limit together with its denominator `A_n − βγ`.
fn ratio_limit_parts(
    phi_q_row: &[f64],
    phi_k: &Matrix,
    m: usize,
    n: usize,
) -> Result<(Result<f64>, f64)> {
    let (scores, beta, gamma) = mala_row(phi_q_row, phi_k)?;
    // Recover s_j from score_j = β s_j − γ.
    let a_m = scores[m] + gamma;
    let a_n = scores[n] + gamma;
    let denom = a_n - beta * gamma;
    let limit = if denom > 0.0 {
        Ok((a_m - beta * gamma) / denom)
    } else {
        Err(Error::Domain(format!(
            "limit denominator {denom} is not positive"
        )))
    };
    Ok((limit, denom))
}

/// `c = aβ/(a + β − 1)`, which exceeds 1 whenever `a, β > 1`.
pub fn lemma_c_gt_one(a: f64, beta: f64) -> Result<f64> {
    if !(a > 1.0 && beta > 1.0) || !a.is_finite() || !beta.is_finite() {
        return Err(Error::Domain(format!(
            "need a > 1 and beta > 1, got a={a} beta={beta}"
        )));
    }
    Ok(a * beta / (a + beta - 1.0))
}

const MONOTONE_GRID: usize = 64;

/// Whether `f(x) = (A_m − γx)/(A_n − γx)` is strictly increasing on a grid
/// over `[x_lo, x_hi]`. The denominator must stay positive on the interval.
pub fn monotone_f_check(a_m: f64, a_n: f64, gamma: f64, x_lo: f64, x_hi: f64) -> Result<bool> {
    let finite = [a_m, a_n, gamma, x_lo, x_hi].iter().all(|x| x.is_finite());
    if !finite || !(x_lo < x_hi) || gamma < 0.0 {
        return Err(Error::Domain(format!(
            "invalid monotonicity query: A_m={a_m} A_n={a_n} gamma={gamma} interval=[{x_lo}, {x_hi}]"
        )));
    }
    // The denominator is affine in x, so checking both ends covers the interval.
    if !(a_n - gamma * x_lo > 0.0 && a_n - gamma * x_hi > 0.0) {
        return Err(Error::Domain(format!(
            "denominator A_n - gamma*x vanishes on [{x_lo}, {x_hi}]"
        )));
    }
    let f = |x: f64| (a_m - gamma * x) / (a_n - gamma * x);
    let step = (x_hi - x_lo) / MONOTONE_GRID as f64;
    let values: Vec<f64> = (0..=MONOTONE_GRID)
        .map(|i| {
            f(if i == MONOTONE_GRID {
                x_hi
            } else {
                x_lo + step * i as f64
            })
        })
        .collect();
    Ok(values.windows(2).all(|w| w[1] > w[0]))
}

/// Divides every row by its Euclidean norm, discarding query magnitude.
pub fn normalize_query_mode(q: &Matrix) -> Result<Matrix> {
    let mut out = q.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if !(n > 0.0) {
            return Err(Error::ZeroVector { row: i });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// How concentrated a score matrix is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikinessSummary {
    pub mechanism: String,
    /// Mean entropy (nats) over rows with no negative entries; `None` when
    /// every row has one.
    pub entropy: Option<f64>,
    /// Number of rows that entered the entropy mean.
    pub entropy_rows: usize,
    pub max_score: f64,
    pub score_variance: f64,
    /// Entries `≤ 0`.
    pub negative_count: usize,
}

pub fn spikiness(out: &AttentionOutput, mechanism: &str) -> Result<SpikinessSummary> {
    let scores = out.scores.as_ref().ok_or(Error::MissingScores)?;
    spikiness_of_scores(scores, mechanism)
}

pub fn spikiness_of_scores(scores: &Matrix, mechanism: &str) -> Result<SpikinessSummary> {
    let data = scores.data();
    if data.is_empty() {
        return Err(Error::MissingScores);
    }
    let clean: Vec<&[f64]> = scores
        .row_iter()
        .filter(|r| r.iter().all(|&x| x >= 0.0))
        .collect();
    let entropy = if clean.is_empty() {
        None
    } else {
        let h = row_entropy(&Matrix::from_rows(&clean)?)?;
        Some(h.iter().sum::<f64>() / h.len() as f64)
    };
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let score_variance = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64;
    Ok(SpikinessSummary {
        mechanism: mechanism.to_string(),
        entropy,
        entropy_rows: clean.len(),
        max_score: data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        score_variance,
        negative_count: data.iter().filter(|&&x| x <= 0.0).count(),
    })
}

/// Score matrix of `mechanism` with the query magnitude scaled by `a`.
/// Softmax scales the raw queries; linear attention and MALA scale φ(Q).
pub fn scaled_scores(
    mechanism: Mechanism,
    q: &Matrix,
    k: &Matrix,
    kernel: KernelKind,
    a: f64,
) -> Result<Matrix> {
    match mechanism {
        Mechanism::Softmax => {
            let v = Matrix::zeros(k.rows(), 1);
            softmax_attention(&q.scale(a)?, k, &v, true)?
                .scores
                .ok_or(Error::MissingScores)
        }
        Mechanism::Linear => {
            let pq = kernel_apply(kernel, q)?.scale(a)?;
            linear_scores_features(&pq, &kernel_apply(kernel, k)?)
        }
        Mechanism::Mala => {
            let pq = kernel_apply(kernel, q)?.scale(a)?;
            Ok(mala_scores_features(&pq, &kernel_apply(kernel, k)?)?.scores)
        }
    }
}

/// Mean softmax-score entropy before and after dropping query magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTrend {
    pub instances: usize,
    pub mean_entropy_before: f64,
    pub mean_entropy_after: f64,
}

/// Queries with row norms uniform in `[0.1, 10]`, standard normal keys.
pub fn query_normalization_trend(
    seed: u64,
    instances: usize,
    n: usize,
    d: usize,
) -> Result<NormalizationTrend> {
    let mut before = 0.0;
    let mut after = 0.0;
    for i in 0..instances {
        let mut rng = instance_rng(seed, i as u64);
        let q = matrix_with_row_norms(&mut rng, n, d, 0.1, 10.0);
        let k = normal_matrix(&mut rng, n, d);
        let v = Matrix::zeros(n, 1);
        let mean_h = |q: &Matrix| -> Result<f64> {
            let s = softmax_attention(q, &k, &v, true)?
                .scores
                .ok_or(Error::MissingScores)?;
            let h = row_entropy(&s)?;
            Ok(h.iter().sum::<f64>() / h.len() as f64)
        };
        before += mean_h(&q)?;
        after += mean_h(&normalize_query_mode(&q)?)?;
    }
    let count = instances.max(1) as f64;
    Ok(NormalizationTrend {
        instances,
        mean_entropy_before: before / count,
        mean_entropy_after: after / count,
    })
}

/// Settings for [`ratio_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSweepConfig {
    pub seed: u64,
    pub samples: usize,
    /// Token counts are drawn from `2..=max_n`.
    pub max_n: usize,
    /// Feature widths are drawn from `1..=max_d`.
    pub max_d: usize,
    pub kernel: KernelKind,
    /// Fixed scale factors, each applied to every instance. When `None`,
    /// one `a` per instance is drawn log-uniformly from `(1, 100]`.
    pub scales: Option<Vec<f64>>,
    /// Number of random `(a, β)` pairs for the `c > 1` sweep.
    pub lemma_samples: usize,
}

impl Default for RatioSweepConfig {
    fn default() -> Self {
        RatioSweepConfig {
            seed: 0,
            samples: 10_000,
            max_n: 16,
            max_d: 8,
            kernel: KernelKind::EluPlusOne,
            scales: None,
            lemma_samples: 10_000,
        }
    }
}

/// One row of the sweep output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub instance: usize,
    pub tokens: usize,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub a: f64,
    pub beta: f64,
    pub gamma: f64,
    pub beta_new: f64,
    pub gamma_new: f64,
    pub p: Option<f64>,
    pub p_m: Option<f64>,
    pub p_s: Option<f64>,
    pub all_scores_positive: bool,
    pub counterexample: bool,
}

/// Aggregate results of a ratio sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioCensus {
    pub evaluated: usize,
    /// Instances dropped because a normaliser was not positive.
    pub degenerate: usize,
    pub all_positive: usize,
    /// Instances where both scores of the pair stayed positive and `p > 1`;
    /// the `p_m > p` claim is checked on all of these.
    pub pair_positive: usize,
    pub counterexamples: usize,
    pub max_beta_relation_error: f64,
    pub max_gamma_relation_error: f64,
    pub softmax_checked: usize,
    pub softmax_overflow: usize,
    pub max_softmax_power_rel_error: f64,
    pub limit_checked: usize,
    pub max_limit_rel_error: f64,
    pub lemma_checked: usize,
    pub lemma_failures: usize,
    pub monotone_checked: usize,
    pub monotone_failures: usize,
}

impl RatioCensus {
    /// Fraction of evaluated pairs that were not all-positive.
    pub fn filtered_fraction(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            1.0 - self.all_positive as f64 / self.evaluated as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.counterexamples == 0 && self.lemma_failures == 0 && self.monotone_failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSweep {
    pub records: Vec<RatioRecord>,
    pub census: RatioCensus,
}

/// Scale used for the large-`a` limit comparison.
pub const LIMIT_SCALE: f64 = 1e6;
/// Limit comparisons only run when `A_n − βγ` exceeds this.
pub const LIMIT_MIN_DENOMINATOR: f64 = 0.1;

/// `|far − limit| / max(|limit|, 1)`. At finite `a` the gap to the limit is
/// `O(1/a)` in absolute terms, so a plain relative error blows up for limits
/// near zero.
pub fn limit_error(far: f64, limit: f64) -> f64 {
    (far - limit).abs() / limit.abs().max(1.0)
}

/// Samples random instances, builds a [`ScalingReport`] for each
/// `(instance, a)` pair and checks the scaling relations, the ratio law,
/// the softmax power law, the large-`a` limit and the two lemmas behind the
/// ratio law.
pub fn ratio_sweep(cfg: &RatioSweepConfig) -> Result<RatioSweep> {
    if cfg.max_n < 2 || cfg.max_d < 1 {
        return Err(Error::Domain("ratio sweep needs n >= 2 and d >= 1".into()));
    }
    if let Some(scales) = &cfg.scales {
        if scales.is_empty() || scales.iter().any(|&a| !(a > 1.0) || !a.is_finite()) {
            return Err(Error::Domain("ratio sweep scales must all be > 1".into()));
        }
    }
    let mut census = RatioCensus::default();
    let mut records = Vec::new();
    for instance in 0..cfg.samples {
        let mut rng = instance_rng(cfg.seed, instance as u64);
        let tokens = rng.random_range(2..=cfg.max_n);
        let d = rng.random_range(1..=cfg.max_d);
        let q = normal_matrix(&mut rng, 1, d);
        let k = normal_matrix(&mut rng, tokens, d);
        let m = rng.random_range(0..tokens);
        let n = (m + rng.random_range(1..tokens)) % tokens;
        let drawn = log_uniform(&mut rng, 1.0, 100.0);
        let scales = cfg.scales.clone().unwrap_or_else(|| vec![drawn]);

        let phi_q = kernel_apply(cfg.kernel, &q)?;
        let phi_k = kernel_apply(cfg.kernel, &k)?;
        for &a in &scales {
            census.evaluated += 1;
            let first = match mala_scaling_report(phi_q.row(0), &phi_k, m, n, a) {
                Ok(r) => r,
                Err(Error::DegenerateRow { .. }) => {
                    census.degenerate += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            // Orient the pair so that key m is the one preferred before scaling.
            let (m, n, mut report) = match first.p {
                Some(p) if p < 1.0 => (n, m, mala_scaling_report(phi_q.row(0), &phi_k, n, m, a)?),
                _ => (m, n, first),
            };

            let (eb, eg) = report.relation_errors();
            census.max_beta_relation_error = census.max_beta_relation_error.max(eb);
            census.max_gamma_relation_error = census.max_gamma_relation_error.max(eg);
            census.all_positive += report.all_scores_positive as usize;

            match softmax_ratio(q.row(0), k.row(m), k.row(n), d, a) {
                Ok((p, p_s)) => {
                    report.p_s = Some(p_s);
                    let expected = p.powf(a);
                    if expected.is_finite() {
                        census.softmax_checked += 1;
                        let rel = (p_s - expected).abs() / expected.abs().max(p_s.abs());
                        census.max_softmax_power_rel_error =
                            census.max_softmax_power_rel_error.max(rel);
                    } else {
                        census.softmax_overflow += 1;
                    }
                }
                Err(Error::Overflow { .. }) => census.softmax_overflow += 1,
                Err(e) => return Err(e),
            }

            let mut counterexample = false;
            if let (Some(p), Some(p_m)) = (report.p, report.p_m) {
                if p > 1.0 {
                    census.pair_positive += 1;
                    counterexample = p_m <= p;
                    census.counterexamples += counterexample as usize;

                    let c = lemma_c_gt_one(a, report.beta)?;
                    let a_m = report.beta * dot(phi_q.row(0), phi_k.row(m));
                    let a_n = report.beta * dot(phi_q.row(0), phi_k.row(n));
                    census.monotone_checked += 1;
                    match monotone_f_check(a_m, a_n, report.gamma, 1.0, c) {
                        Ok(true) => {}
                        _ => census.monotone_failures += 1,
                    }
                }
            }

            if let (Ok(limit), denom) = ratio_limit_parts(phi_q.row(0), &phi_k, m, n)? {
                if denom > LIMIT_MIN_DENOMINATOR {
                    let far = scaled_pair_ratio(phi_q.row(0), &phi_k, m, n, LIMIT_SCALE)?;
                    census.limit_checked += 1;
                    census.max_limit_rel_error =
                        census.max_limit_rel_error.max(limit_error(far, limit));
                }
            }

            records.push(RatioRecord {
                instance,
                tokens,
                d,
                m,
                n,
                a,
                beta: report.beta,
                gamma: report.gamma,
                beta_new: report.beta_new,
                gamma_new: report.gamma_new,
                p: report.p,
                p_m: report.p_m,
                p_s: report.p_s,
                all_scores_positive: report.all_scores_positive,
                counterexample,
            });
        }
    }

    let mut rng = instance_rng(cfg.seed ^ 0x1e33a, u64::MAX);
    for _ in 0..cfg.lemma_samples {
        let a = 1.0 + rng.random_range(f64::EPSILON..=99.0);
        let beta = 1.0 + rng.random_range(f64::EPSILON..=99.0);
        census.lemma_checked += 1;
        if !(lemma_c_gt_one(a, beta)? > 1.0) {
            census.lemma_failures += 1;
        }
    }
    Ok(RatioSweep { records, census })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(values: &[f64]) -> Matrix {
        Matrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn decompose_three_four_five() {
        let (m, dir) = decompose_magnitude(&[3.0, 4.0]).unwrap();
        assert_eq!(m, 5.0);
        assert!((dir[0] - 0.6).abs() < 1e-15 && (dir[1] - 0.8).abs() < 1e-15);
        let (m, dir) = decompose_magnitude(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!((m, dir), (1.0, vec![0.0, 1.0, 0.0]));
        assert!(matches!(
            decompose_magnitude(&[0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn decompose_reconstructs_random_rows() {
        let mut rng = instance_rng(20, 0);
        let row = normal_matrix(&mut rng, 1, 16).into_data();
        let (m, dir) = decompose_magnitude(&row).unwrap();
        assert!((norm(&dir) - 1.0).abs() < 1e-12);
        for (x, u) in row.iter().zip(&dir) {
            assert!((m * u - x).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ratio_examples() {
        // q·k_m = 1, q·k_n = 0, d = 1.
        let (p, ps) = softmax_ratio(&[1.0], &[1.0], &[0.0], 1, 1.0).unwrap();
        assert!((p - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(p, ps);
        let (p, ps) = softmax_ratio(&[1.0], &[1.0], &[0.0], 1, 2.0).unwrap();
        assert!((ps - 7.389_056_098_930_65).abs() < 1e-12);
        assert!((ps - p * p).abs() / ps < 1e-9);
        for a in [1.0, 3.0, 50.0] {
            assert_eq!(
                softmax_ratio(&[0.3, -2.0], &[1.0, 1.0], &[1.0, 1.0], 2, a).unwrap(),
                (1.0, 1.0)
            );
        }
        assert!(matches!(
            softmax_ratio(&[1.0], &[800.0], &[0.0], 1, 1.0),
            Err(Error::Overflow { .. })
        ));
        assert!(softmax_ratio(&[1.0], &[1.0], &[0.0], 1, 0.5).is_err());
    }

    #[test]
    fn scaling_report_hand_example() {
        // β = 19/9, γ = 9/20; after a = 2: β_new = 14/9, γ_new = 9/10,
        // p = 109/71, p_m = 59/31 (exact rational arithmetic).
        let r = mala_scaling_report(&[1.0], &keys(&[0.4, 0.5]), 1, 0, 2.0).unwrap();
        assert!((r.beta - 19.0 / 9.0).abs() < 1e-14);
        assert!((r.gamma - 0.45).abs() < 1e-15);
        assert!((r.beta_new - 14.0 / 9.0).abs() < 1e-14);
        assert!((r.gamma_new - 0.9).abs() < 1e-15);
        assert!((r.p.unwrap() - 109.0 / 71.0).abs() < 1e-12);
        assert!((r.p_m.unwrap() - 59.0 / 31.0).abs() < 1e-12);
        assert!(r.p_m.unwrap() > r.p.unwrap());
        assert!(r.all_scores_positive);
        let (eb, eg) = r.relation_errors();
        assert!(eb < 1e-12 && eg < 1e-12);
    }

    #[test]
    fn scaling_report_equal_keys() {
        let r = mala_scaling_report(
            &[0.7, 1.3],
            &Matrix::from_rows(&[[0.5, 2.0], [0.5, 2.0], [1.0, 0.1]]).unwrap(),
            0,
            1,
            5.0,
        )
        .unwrap();
        assert_eq!(r.p, Some(1.0));
        assert_eq!(r.p_m, Some(1.0));
    }

    #[test]
    fn scaling_report_is_continuous_at_one() {
        let r = mala_scaling_report(&[1.0], &keys(&[0.4, 0.5]), 1, 0, 1.0 + 1e-8).unwrap();
        assert!((r.p_m.unwrap() - r.p.unwrap()).abs() < 1e-6);
        assert!(mala_scaling_report(&[1.0], &keys(&[0.4, 0.5]), 1, 0, 1.0).is_err());
        assert!(mala_scaling_report(&[1.0], &keys(&[0.4, 0.5]), 1, 1, 2.0).is_err());
    }

    #[test]
    fn scaling_report_signed_scores() {
        let r = mala_scaling_report(&[1.0], &keys(&[1.0, 3.0]), 1, 0, 2.0).unwrap();
        assert!(!r.all_scores_positive);
        assert_eq!(r.p, None);
        assert_eq!(r.p_m, None);
    }

    #[test]
    fn ratio_limit_matches_large_scale() {
        let phi_k = keys(&[0.2, 0.3, 2.5]);
        let q = [1.0];
        // s = [0.2, 0.3, 2.5], S = 3, β = 4/3, γ = 1: A_n − βγ = β·2.5 − β > 0 for n = 2.
        let limit = mala_ratio_limit(&q, &phi_k, 1, 2).unwrap();
        let far = scaled_pair_ratio(&q, &phi_k, 1, 2, 1e6).unwrap();
        assert!((far - limit).abs() / limit.abs() < 1e-4, "{far} vs {limit}");
        assert!(mala_ratio_limit(&q, &phi_k, 0, 1).is_err());
        assert_eq!(
            mala_ratio_limit(&[1.0], &keys(&[2.0, 2.0, 0.1]), 0, 1).unwrap(),
            1.0
        );
    }

    #[test]
    fn exponential_growth_beats_the_limit() {
        // s = [0.1, 2, 3], γ = 1.7: keys 1 and 2 both sit above the mean.
        let phi_k = keys(&[0.1, 2.0, 3.0]);
        let limit = mala_ratio_limit(&[1.0], &phi_k, 2, 1).unwrap();
        assert!((limit - 1.3 / 0.3).abs() < 1e-12);
        let p = mala_scaling_report(&[1.0], &phi_k, 2, 1, 20.0)
            .unwrap()
            .p
            .unwrap();
        assert!(p > 1.0);
        assert!(p.powf(20.0) > limit);
    }

    #[test]
    fn lemma_examples() {
        assert!((lemma_c_gt_one(2.0, 2.0).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let c = lemma_c_gt_one(1.001, 2.0).unwrap();
        assert!(c > 1.0 && (c - 1.000_499_750_124_937_5).abs() < 1e-12);
        assert!(lemma_c_gt_one(1.0, 2.0).is_err());
        assert!(lemma_c_gt_one(2.0, 0.5).is_err());
        let mut rng = instance_rng(21, 0);
        for _ in 0..10_000 {
            let a = 1.0 + rng.random_range(1e-9..=99.0);
            let b = 1.0 + rng.random_range(1e-9..=99.0);
            assert!(lemma_c_gt_one(a, b).unwrap() > 1.0);
        }
    }

    #[test]
    fn monotone_examples() {
        let f = |x: f64| (2.0 - 0.5 * x) / (1.0 - 0.5 * x);
        assert_eq!((f(0.0), f(1.0), f(1.5)), (2.0, 3.0, 5.0));
        assert!(monotone_f_check(2.0, 1.0, 0.5, 0.0, 1.5).unwrap());
        assert!(!monotone_f_check(2.0, 1.0, 0.0, 0.0, 1.5).unwrap());
        assert!(!monotone_f_check(1.0, 1.0, 0.5, 0.0, 1.5).unwrap());
        assert!(monotone_f_check(2.0, 1.0, 0.5, 0.0, 2.0).is_err());
        assert!(monotone_f_check(2.0, 1.0, 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn normalize_rows() {
        let q = Matrix::from_rows(&[[3.0, 4.0], [0.6, 0.8]]).unwrap();
        let n = normalize_query_mode(&q).unwrap();
        assert!(
            n.max_abs_diff(&Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8]]).unwrap())
                .unwrap()
                < 1e-12
        );
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            normalize_query_mode(&z),
            Err(Error::ZeroVector { row: 1 })
        ));
    }

    #[test]
    fn spikiness_extremes() {
        let one_hot = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let s = spikiness_of_scores(&one_hot, "x").unwrap();
        assert_eq!(s.entropy, Some(0.0));
        assert_eq!(s.max_score, 1.0);
        let uniform = Matrix::from_rows(&vec![[1.0 / 16.0; 16]; 4]).unwrap();
        let s = spikiness_of_scores(&uniform, "x").unwrap();
        assert!((s.entropy.unwrap() - 2.772_588_722_239_781).abs() < 1e-12);
        assert_eq!(s.max_score, 1.0 / 16.0);
        assert_eq!(s.score_variance, 0.0);
    }

    #[test]
    fn spikiness_signed_rows() {
        let signed = Matrix::from_rows(&[[-0.75, 1.75], [0.25, 0.75]]).unwrap();
        let s = spikiness_of_scores(&signed, "mala").unwrap();
        assert_eq!(s.negative_count, 1);
        assert_eq!(s.entropy_rows, 1);
        assert!((s.entropy.unwrap() - 0.562_335_144_618_808_4).abs() < 1e-12);
        let all_signed = Matrix::from_rows(&[[-0.75, 1.75]]).unwrap();
        assert_eq!(
            spikiness_of_scores(&all_signed, "mala").unwrap().entropy,
            None
        );

        let out = crate::attention::mala_streamed(
            &Matrix::identity(2),
            &Matrix::identity(2),
            &Matrix::identity(2),
            KernelKind::EluPlusOne,
        )
        .unwrap();
        assert_eq!(spikiness(&out, "mala"), Err(Error::MissingScores));
    }

    #[test]
    fn scaled_scores_at_unit_scale_match_plain_mechanisms() {
        let mut rng = instance_rng(22, 0);
        let q = normal_matrix(&mut rng, 5, 3);
        let k = normal_matrix(&mut rng, 5, 3);
        let v = Matrix::zeros(5, 1);
        let soft = scaled_scores(Mechanism::Softmax, &q, &k, KernelKind::EluPlusOne, 1.0).unwrap();
        assert_eq!(
            soft,
            softmax_attention(&q, &k, &v, true).unwrap().scores.unwrap()
        );
        let mala = scaled_scores(Mechanism::Mala, &q, &k, KernelKind::EluPlusOne, 1.0).unwrap();
        let direct =
            crate::attention::mala_quadratic(&q, &k, &v, KernelKind::EluPlusOne, true).unwrap();
        assert_eq!(mala, direct.scores.unwrap());
    }

    #[test]
    fn small_sweep_is_clean() {
        let cfg = RatioSweepConfig {
            samples: 300,
            lemma_samples: 100,
            ..RatioSweepConfig::default()
        };
        let sweep = ratio_sweep(&cfg).unwrap();
        assert!(sweep.census.passed(), "{:?}", sweep.census);
        assert_eq!(sweep.records.len() + sweep.census.degenerate, 300);
        assert!(sweep.census.pair_positive > 0);
    }

    #[test]
    fn sweep_rejects_unit_scale() {
        let cfg = RatioSweepConfig {
            scales: Some(vec![1.0]),
            ..RatioSweepConfig::default()
        };
        assert!(ratio_sweep(&cfg).is_err());
    }
}

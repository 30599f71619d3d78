//! Softmax, linear and magnitude-aware linear (MALA) self-attention.
//!
//! Linear and MALA come in two forms that compute the same function:
//!
//! * *quadratic*: materialise the `N×N` score matrix, then multiply by `V`;
//! * *streamed*: fold keys and values into a [`KvAccumulator`] once and read
//!   every output row from it, so memory beyond inputs and output is
//!   `O(d·d_v)`.
//!
//! MALA replaces the division-based normalisation of linear attention with an
//! additive one. With `s_ij = φ(Q_i)·φ(K_j)` and `S_i = Σ_j s_ij`,
//!
//! ```text
//! score_ij = β_i s_ij − γ_i,   β_i = 1 + 1/S_i,   γ_i = S_i / N
//! ```
//!
//! so every row sums to one while the scores keep the magnitude of `φ(Q_i)`.
//! Scores can go negative; they are passed through unclipped.
//!
//! The `*_features` entry points take φ(Q) and φ(K) directly. They exist so
//! callers can scale the query features themselves (the analysis code does)
//! without the kernel's nonlinearity getting in the way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{kernel_apply, KernelKind};
use crate::numerics::{axpy, dot, matmul, matmul_transb, row_softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Softmax,
    Linear,
    Mala,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Softmax, Mechanism::Linear, Mechanism::Mala];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Softmax => "softmax",
            Mechanism::Linear => "linear",
            Mechanism::Mala => "mala",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Quadratic,
    Streamed,
}

impl Form {
    pub fn name(self) -> &'static str {
        match self {
            Form::Quadratic => "quadratic",
            Form::Streamed => "streamed",
        }
    }
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of one attention call plus per-row diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `N×d_v` output.
    pub output: Matrix,
    /// `N×N` scores, when requested and the form materialises them.
    pub scores: Option<Matrix>,
    /// `Σ_j score_ij` for every row. Streamed forms evaluate this from the
    /// accumulators rather than from explicit scores.
    pub row_sums: Vec<f64>,
    /// Number of score entries `≤ 0`. `None` when no score matrix was formed.
    pub negative_count: Option<usize>,
    /// Per-row β (MALA only).
    pub beta: Option<Vec<f64>>,
    /// Per-row γ (MALA only).
    pub gamma: Option<Vec<f64>>,
}

fn count_non_positive(m: &Matrix) -> usize {
    m.data().iter().filter(|&&x| x <= 0.0).count()
}

fn check_qk(q: &Matrix, k: &Matrix) -> Result<()> {
    if q.shape() != k.shape() || q.cols() == 0 || q.rows() == 0 {
        return Err(Error::Shape {
            op: "attention q/k",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    Ok(())
}

/// Score-level helpers accept any number of query rows against `N` keys.
fn check_feature_cols(phi_q: &Matrix, phi_k: &Matrix) -> Result<()> {
    if phi_q.cols() != phi_k.cols() || phi_q.cols() == 0 || phi_k.rows() == 0 {
        return Err(Error::Shape {
            op: "attention features",
            lhs: phi_q.shape(),
            rhs: phi_k.shape(),
        });
    }
    Ok(())
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    check_qk(q, k)?;
    if v.rows() != k.rows() {
        return Err(Error::Shape {
            op: "attention k/v",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    Ok(())
}

/// `softmax(QKᵀ/√d)·V` with `d = q.cols()`.
pub fn softmax_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    want_scores: bool,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v)?;
    let mut scores = matmul_transb(q, k)?;
    let inv_sqrt_d = 1.0 / (q.cols() as f64).sqrt();
    for i in 0..scores.rows() {
        scores.row_mut(i).iter_mut().for_each(|x| *x *= inv_sqrt_d);
    }
    row_softmax_in_place(&mut scores)?;
    let row_sums = scores.row_iter().map(|r| r.iter().sum()).collect();
    let negative_count = Some(count_non_positive(&scores));
    let output = matmul(&scores, v)?;
    Ok(AttentionOutput {
        output,
        scores: want_scores.then_some(scores),
        row_sums,
        negative_count,
        beta: None,
        gamma: None,
    })
}

/// Linear-attention scores `φ(Q_i)φ(K_j)ᵀ / Σ_m φ(Q_i)φ(K_m)ᵀ` from features.
pub fn linear_scores_features(phi_q: &Matrix, phi_k: &Matrix) -> Result<Matrix> {
    check_feature_cols(phi_q, phi_k)?;
    let mut raw = matmul_transb(phi_q, phi_k)?;
    for i in 0..raw.rows() {
        let row = raw.row_mut(i);
        let denom: f64 = row.iter().sum();
        if !(denom > 0.0) {
            return Err(Error::DegenerateRow {
                row: i,
                normalizer: denom,
            });
        }
        row.iter_mut().for_each(|x| *x /= denom);
    }
    raw.check_finite("linear_scores")?;
    Ok(raw)
}

/// Per-row `(β, γ)` from the normaliser `S = φ(Q_i)·Σ_m φ(K_m)` and the
/// token count.
pub(crate) fn beta_gamma(normalizer: f64, n: usize, row: usize) -> Result<(f64, f64)> {
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return Err(Error::DegenerateRow { row, normalizer });
    }
    let beta = 1.0 + 1.0 / normalizer;
    let gamma = normalizer / n as f64;
    if !beta.is_finite() {
        return Err(Error::DegenerateRow { row, normalizer });
    }
    Ok((beta, gamma))
}

/// β and γ of one query row against a set of key features.
pub fn mala_beta_gamma(phi_q_row: &[f64], phi_k: &Matrix) -> Result<(f64, f64)> {
    if phi_q_row.len() != phi_k.cols() || phi_k.rows() == 0 {
        return Err(Error::Shape {
            op: "mala_beta_gamma",
            lhs: (1, phi_q_row.len()),
            rhs: phi_k.shape(),
        });
    }
    let mut k_sum = vec![0.0; phi_k.cols()];
    for r in phi_k.row_iter() {
        axpy(1.0, r, &mut k_sum);
    }
    beta_gamma(dot(phi_q_row, &k_sum), phi_k.rows(), 0)
}

/// MALA score matrix with the per-row β and γ used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct MalaScores {
    pub scores: Matrix,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// MALA scores `β_i φ(Q_i)φ(K_j)ᵀ − γ_i` from features.
pub fn mala_scores_features(phi_q: &Matrix, phi_k: &Matrix) -> Result<MalaScores> {
    check_feature_cols(phi_q, phi_k)?;
    let n = phi_k.rows();
    let mut scores = matmul_transb(phi_q, phi_k)?;
    let mut beta = Vec::with_capacity(n);
    let mut gamma = Vec::with_capacity(n);
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        // Summing the row itself keeps the sum-to-one identity tight.
        let s: f64 = row.iter().sum();
        let (b, g) = beta_gamma(s, n, i)?;
        row.iter_mut().for_each(|x| *x = b * *x - g);
        beta.push(b);
        gamma.push(g);
    }
    scores.check_finite("mala_scores")?;
    Ok(MalaScores {
        scores,
        beta,
        gamma,
    })
}

fn from_scores(scores: Matrix, v: &Matrix, want_scores: bool) -> Result<AttentionOutput> {
    let row_sums = scores.row_iter().map(|r| r.iter().sum()).collect();
    let negative_count = Some(count_non_positive(&scores));
    let output = matmul(&scores, v)?;
    Ok(AttentionOutput {
        output,
        scores: want_scores.then_some(scores),
        row_sums,
        negative_count,
        beta: None,
        gamma: None,
    })
}

pub fn linear_quadratic_features(
    phi_q: &Matrix,
    phi_k: &Matrix,
    v: &Matrix,
) -> Result<AttentionOutput> {
    check_qkv(phi_q, phi_k, v)?;
    from_scores(linear_scores_features(phi_q, phi_k)?, v, true)
}

pub fn mala_quadratic_features(
    phi_q: &Matrix,
    phi_k: &Matrix,
    v: &Matrix,
    want_scores: bool,
) -> Result<AttentionOutput> {
    check_qkv(phi_q, phi_k, v)?;
    let MalaScores {
        scores,
        beta,
        gamma,
    } = mala_scores_features(phi_q, phi_k)?;
    let mut out = from_scores(scores, v, want_scores)?;
    out.beta = Some(beta);
    out.gamma = Some(gamma);
    Ok(out)
}

/// Running sums over keys and values: `Σ_j φ(K_j)ᵀV_j` (`d×d_v`),
/// `Σ_j φ(K_j)` (`d`) and `Σ_j V_j` (`d_v`). Keys are folded in the order
/// they are pushed.
#[derive(Debug, Clone, PartialEq)]
pub struct KvAccumulator {
    kv: Matrix,
    k_sum: Vec<f64>,
    v_sum: Vec<f64>,
    count: usize,
}

impl KvAccumulator {
    pub fn new(d: usize, d_v: usize) -> Self {
        KvAccumulator {
            kv: Matrix::zeros(d, d_v),
            k_sum: vec![0.0; d],
            v_sum: vec![0.0; d_v],
            count: 0,
        }
    }

    /// Folds every row of `phi_k` and `v` in order.
    pub fn from_rows(phi_k: &Matrix, v: &Matrix) -> Result<Self> {
        if phi_k.rows() != v.rows() {
            return Err(Error::Shape {
                op: "KvAccumulator::from_rows",
                lhs: phi_k.shape(),
                rhs: v.shape(),
            });
        }
        let mut acc = KvAccumulator::new(phi_k.cols(), v.cols());
        for (k_row, v_row) in phi_k.row_iter().zip(v.row_iter()) {
            acc.push(k_row, v_row)?;
        }
        Ok(acc)
    }

    pub fn push(&mut self, phi_k_row: &[f64], v_row: &[f64]) -> Result<()> {
        if phi_k_row.len() != self.kv.rows() || v_row.len() != self.kv.cols() {
            return Err(Error::Shape {
                op: "KvAccumulator::push",
                lhs: self.kv.shape(),
                rhs: (phi_k_row.len(), v_row.len()),
            });
        }
        for (c, &kc) in phi_k_row.iter().enumerate() {
            axpy(kc, v_row, self.kv.row_mut(c));
        }
        axpy(1.0, phi_k_row, &mut self.k_sum);
        axpy(1.0, v_row, &mut self.v_sum);
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn kv(&self) -> &Matrix {
        &self.kv
    }

    pub fn k_sum(&self) -> &[f64] {
        &self.k_sum
    }

    pub fn v_sum(&self) -> &[f64] {
        &self.v_sum
    }

    /// Shapes of the three accumulators: `(d, d_v)`, `d`, `d_v`.
    pub fn shapes(&self) -> ((usize, usize), usize, usize) {
        (self.kv.shape(), self.k_sum.len(), self.v_sum.len())
    }

    /// `φ(Q_i) · Σ_j φ(K_j)ᵀV_j`, written into `out`.
    fn project(&self, phi_q_row: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (c, &qc) in phi_q_row.iter().enumerate() {
            axpy(qc, self.kv.row(c), out);
        }
    }

    /// `φ(Q_i) · Σ_m φ(K_m)`.
    pub fn normalizer(&self, phi_q_row: &[f64]) -> f64 {
        dot(phi_q_row, &self.k_sum)
    }
}

pub fn linear_streamed_features(
    phi_q: &Matrix,
    phi_k: &Matrix,
    v: &Matrix,
) -> Result<AttentionOutput> {
    check_qkv(phi_q, phi_k, v)?;
    let acc = KvAccumulator::from_rows(phi_k, v)?;
    let d_v = v.cols();
    let mut out = vec![0.0; phi_q.rows() * d_v];
    let mut row_sums = Vec::with_capacity(phi_q.rows());
    for (i, q_row) in phi_q.row_iter().enumerate() {
        let denom = acc.normalizer(q_row);
        if !(denom > 0.0) {
            return Err(Error::DegenerateRow {
                row: i,
                normalizer: denom,
            });
        }
        let o = &mut out[i * d_v..(i + 1) * d_v];
        acc.project(q_row, o);
        o.iter_mut().for_each(|x| *x /= denom);
        // Every score in the row is divided by the same normaliser it sums to.
        row_sums.push(1.0);
    }
    let output = Matrix::from_parts(phi_q.rows(), d_v, out);
    output.check_finite("linear_streamed")?;
    Ok(AttentionOutput {
        output,
        scores: None,
        row_sums,
        negative_count: None,
        beta: None,
        gamma: None,
    })
}

pub fn mala_streamed_features(
    phi_q: &Matrix,
    phi_k: &Matrix,
    v: &Matrix,
) -> Result<AttentionOutput> {
    check_qkv(phi_q, phi_k, v)?;
    let acc = KvAccumulator::from_rows(phi_k, v)?;
    let n = phi_k.rows();
    let d_v = v.cols();
    let mut out = vec![0.0; phi_q.rows() * d_v];
    let mut row_sums = Vec::with_capacity(phi_q.rows());
    let mut betas = Vec::with_capacity(phi_q.rows());
    let mut gammas = Vec::with_capacity(phi_q.rows());
    for (i, q_row) in phi_q.row_iter().enumerate() {
        let s = acc.normalizer(q_row);
        let (beta, gamma) = beta_gamma(s, n, i)?;
        let o = &mut out[i * d_v..(i + 1) * d_v];
        acc.project(q_row, o);
        for (x, vs) in o.iter_mut().zip(acc.v_sum()) {
            *x = beta * *x - gamma * vs;
        }
        row_sums.push(beta * s - n as f64 * gamma);
        betas.push(beta);
        gammas.push(gamma);
    }
    let output = Matrix::from_parts(phi_q.rows(), d_v, out);
    output.check_finite("mala_streamed")?;
    Ok(AttentionOutput {
        output,
        scores: None,
        row_sums,
        negative_count: None,
        beta: Some(betas),
        gamma: Some(gammas),
    })
}

fn features(q: &Matrix, k: &Matrix, kernel: KernelKind) -> Result<(Matrix, Matrix)> {
    check_qk(q, k)?;
    Ok((kernel_apply(kernel, q)?, kernel_apply(kernel, k)?))
}

pub fn linear_attention_quadratic(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
) -> Result<AttentionOutput> {
    let (pq, pk) = features(q, k, kernel)?;
    linear_quadratic_features(&pq, &pk, v)
}

pub fn linear_attention_streamed(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
) -> Result<AttentionOutput> {
    let (pq, pk) = features(q, k, kernel)?;
    linear_streamed_features(&pq, &pk, v)
}

pub fn mala_quadratic(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
    want_scores: bool,
) -> Result<AttentionOutput> {
    let (pq, pk) = features(q, k, kernel)?;
    mala_quadratic_features(&pq, &pk, v, want_scores)
}

pub fn mala_streamed(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
) -> Result<AttentionOutput> {
    let (pq, pk) = features(q, k, kernel)?;
    mala_streamed_features(&pq, &pk, v)
}

/// Dispatches on mechanism and form. Softmax only has a quadratic form.
pub fn attend(
    mechanism: Mechanism,
    form: Form,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
) -> Result<AttentionOutput> {
    match (mechanism, form) {
        (Mechanism::Softmax, Form::Quadratic) => softmax_attention(q, k, v, false),
        (Mechanism::Softmax, Form::Streamed) => Err(Error::Domain(
            "softmax attention has no streamed form".into(),
        )),
        (Mechanism::Linear, Form::Quadratic) => linear_attention_quadratic(q, k, v, kernel),
        (Mechanism::Linear, Form::Streamed) => linear_attention_streamed(q, k, v, kernel),
        (Mechanism::Mala, Form::Quadratic) => mala_quadratic(q, k, v, kernel, false),
        (Mechanism::Mala, Form::Streamed) => mala_streamed(q, k, v, kernel),
    }
}

/// Projection weights and head layout for [`multihead_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadConfig {
    num_heads: usize,
    d_model: usize,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    pub kernel: KernelKind,
    pub mechanism: Mechanism,
}

impl MultiHeadConfig {
    pub fn new(
        num_heads: usize,
        d_model: usize,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        kernel: KernelKind,
        mechanism: Mechanism,
    ) -> Result<Self> {
        if num_heads == 0 || d_model == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Domain(format!(
                "d_model {d_model} is not divisible into {num_heads} heads"
            )));
        }
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != (d_model, d_model) {
                return Err(Error::Shape {
                    op: "MultiHeadConfig::new",
                    lhs: (d_model, d_model),
                    rhs: w.shape(),
                });
            }
        }
        Ok(MultiHeadConfig {
            num_heads,
            d_model,
            w_q,
            w_k,
            w_v,
            kernel,
            mechanism,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Projects `x` to Q, K, V, runs the configured mechanism on each column
/// group of width `d_model / num_heads` and concatenates the head outputs.
/// Linear and MALA heads use the streamed form.
pub fn multihead_forward(cfg: &MultiHeadConfig, x: &Matrix) -> Result<Matrix> {
    if x.cols() != cfg.d_model {
        return Err(Error::Shape {
            op: "multihead_forward",
            lhs: x.shape(),
            rhs: cfg.w_q.shape(),
        });
    }
    let q = matmul(x, &cfg.w_q)?;
    let k = matmul(x, &cfg.w_k)?;
    let v = matmul(x, &cfg.w_v)?;
    let dh = cfg.head_dim();
    let heads = (0..cfg.num_heads)
        .map(|h| {
            let qh = q.column_block(h * dh, dh)?;
            let kh = k.column_block(h * dh, dh)?;
            let vh = v.column_block(h * dh, dh)?;
            let form = match cfg.mechanism {
                Mechanism::Softmax => Form::Quadratic,
                _ => Form::Streamed,
            };
            Ok(attend(cfg.mechanism, form, &qh, &kh, &vh, cfg.kernel)?.output)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::hstack(&heads)
}

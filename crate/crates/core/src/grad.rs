//! Analytic gradients of the streamed MALA forward pass, and the
//! central-difference machinery that checks them.
//!
//! For a loss `L = Σ_ij G_ij Y_ij` with upstream gradient `G`, write
//! `u_i = φ(Q_i)·Kv`, `S_i = φ(Q_i)·k_sum`. Then `Y_i = β_i u_i − γ_i v_sum`
//! and, because β and γ both depend on `S_i`,
//!
//! ```text
//! ∂L/∂S_i    = −(G_i·u_i)/S_i² − (G_i·v_sum)/N
//! ∂L/∂φ(Q_i) = β_i Kv G_iᵀ + ∂L/∂S_i · k_sum
//! ∂L/∂Kv     = Σ_i β_i φ(Q_i)ᵀ G_i
//! ∂L/∂k_sum  = Σ_i ∂L/∂S_i · φ(Q_i)
//! ∂L/∂v_sum  = −Σ_i γ_i G_i
//! ∂L/∂φ(K_j) = ∂L/∂Kv · V_jᵀ + ∂L/∂k_sum
//! ∂L/∂V_j    = φ(K_j) · ∂L/∂Kv + ∂L/∂v_sum
//! ```
//!
//! followed by the elementwise kernel derivative for Q and K.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{beta_gamma, mala_quadratic, mala_streamed, KvAccumulator};
use crate::error::{Error, Result};
use crate::kernels::{kernel_apply, kernel_derivative, KernelKind};
use crate::numerics::{axpy, dot, Matrix};
use crate::sampling::{instance_rng, normal_matrix};

/// Gradients with respect to the three forward inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

pub fn mala_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
    upstream: &Matrix,
) -> Result<GradBundle> {
    if q.shape() != k.shape() || q.rows() != v.rows() || q.rows() == 0 || q.cols() == 0 {
        return Err(Error::Shape {
            op: "mala_backward",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if upstream.shape() != v.shape() {
        return Err(Error::Shape {
            op: "mala_backward upstream",
            lhs: v.shape(),
            rhs: upstream.shape(),
        });
    }
    let (n, d, d_v) = (q.rows(), q.cols(), v.cols());
    let phi_q = kernel_apply(kernel, q)?;
    let phi_k = kernel_apply(kernel, k)?;
    let acc = KvAccumulator::from_rows(&phi_k, v)?;

    let mut d_phi_q = Matrix::zeros(n, d);
    let mut d_kv = Matrix::zeros(d, d_v);
    let mut d_k_sum = vec![0.0; d];
    let mut d_v_sum = vec![0.0; d_v];
    let mut u = vec![0.0; d_v];

    for i in 0..n {
        let pq = phi_q.row(i);
        let g = upstream.row(i);
        let s = acc.normalizer(pq);
        let (beta, gamma) = beta_gamma(s, n, i)?;
        u.iter_mut().for_each(|x| *x = 0.0);
        for (c, &qc) in pq.iter().enumerate() {
            axpy(qc, acc.kv().row(c), &mut u);
        }
        let d_s = -dot(g, &u) / (s * s) - dot(g, acc.v_sum()) / n as f64;

        let row = d_phi_q.row_mut(i);
        for (c, out) in row.iter_mut().enumerate() {
            *out = beta * dot(acc.kv().row(c), g) + d_s * acc.k_sum()[c];
        }
        for (c, &qc) in pq.iter().enumerate() {
            axpy(beta * qc, g, d_kv.row_mut(c));
        }
        axpy(d_s, pq, &mut d_k_sum);
        axpy(-gamma, g, &mut d_v_sum);
    }

    let mut d_phi_k = Matrix::zeros(n, d);
    let mut d_v_out = Matrix::zeros(n, d_v);
    for j in 0..n {
        let vj = v.row(j);
        let row = d_phi_k.row_mut(j);
        for (c, out) in row.iter_mut().enumerate() {
            *out = dot(d_kv.row(c), vj) + d_k_sum[c];
        }
        let out = d_v_out.row_mut(j);
        out.copy_from_slice(&d_v_sum);
        for (c, &kc) in phi_k.row(j).iter().enumerate() {
            axpy(kc, d_kv.row(c), out);
        }
    }

    let dq_kernel = kernel_derivative(kernel, q)?;
    let dk_kernel = kernel_derivative(kernel, k)?;
    let hadamard = |a: &Matrix, b: &Matrix| -> Result<Matrix> {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let m = Matrix::from_parts(a.rows(), a.cols(), data);
        m.check_finite("mala_backward")?;
        Ok(m)
    };
    d_v_out.check_finite("mala_backward")?;
    Ok(GradBundle {
        d_q: hadamard(&d_phi_q, &dq_kernel)?,
        d_k: hadamard(&d_phi_k, &dk_kernel)?,
        d_v: d_v_out,
    })
}

/// Central differences `(f(x + h e) − f(x − h e)) / 2h` for every entry.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = x.get(r, c);
            probe.set(r, c, orig + h);
            let plus = f(&probe)?;
            probe.set(r, c, orig - h);
            let minus = f(&probe)?;
            probe.set(r, c, orig);
            let g = (plus - minus) / (2.0 * h);
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: "finite_diff_grad",
                    row: r,
                    col: c,
                    value: g,
                });
            }
            grad.set(r, c, g);
        }
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `L = Σ G ⊙ Y` for the streamed MALA output.
pub fn mala_loss(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
    upstream: &Matrix,
) -> Result<f64> {
    let y = mala_streamed(q, k, v, kernel)?.output;
    Ok(dot(y.data(), upstream.data()))
}

/// The same loss evaluated through the quadratic score matrix. Forming each
/// score before contracting with V cancels less than the streamed form, so
/// this is what [`gradcheck`] differentiates numerically.
pub fn mala_loss_quadratic(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: KernelKind,
    upstream: &Matrix,
) -> Result<f64> {
    let y = mala_quadratic(q, k, v, kernel, false)?.output;
    Ok(dot(y.data(), upstream.data()))
}

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Relu inputs closer than this to 0 are left out of the comparison.
pub const RELU_KINK_EXCLUSION: f64 = 1e-4;
/// Inputs are clamped to `[-INPUT_CLAMP, INPUT_CLAMP]`.
pub const INPUT_CLAMP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub n: usize,
    pub d: usize,
    pub d_v: usize,
    pub kernel: KernelKind,
    pub max_rel_err_q: f64,
    pub max_rel_err_k: f64,
    pub max_rel_err_v: f64,
    /// Entries skipped next to the Relu kink.
    pub excluded: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: Vec<TrialRecord>,
    pub max_rel_err_q: f64,
    pub max_rel_err_k: f64,
    pub max_rel_err_v: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn max_rel_err(analytic: &Matrix, numeric: &Matrix, include: impl Fn(usize) -> bool) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .filter(|(idx, _)| include(*idx))
        .map(|(_, (a, b))| relative_error(*a, *b))
        .fold(0.0, f64::max)
}

fn sample_trial(seed: u64, trial: usize, kernel: KernelKind) -> (Matrix, Matrix, Matrix, Matrix) {
    // Relu can produce an all-zero feature row; redraw until every normaliser is positive.
    for attempt in 0u64.. {
        let mut rng = instance_rng(seed, (trial as u64) << 16 | attempt);
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=6);
        let d_v = rng.random_range(1..=4);
        let clamp = |m: Matrix| {
            m.map(|x| x.clamp(-INPUT_CLAMP, INPUT_CLAMP))
                .expect("clamped values are finite")
        };
        let q = clamp(normal_matrix(&mut rng, n, d));
        let k = clamp(normal_matrix(&mut rng, n, d));
        let v = normal_matrix(&mut rng, n, d_v);
        let g = normal_matrix(&mut rng, n, d_v);
        if mala_streamed(&q, &k, &v, kernel).is_ok() {
            return (q, k, v, g);
        }
    }
    unreachable!()
}

/// Compares [`mala_backward`] against central differences on `trials`
/// seeded instances with `N ∈ [2, 8]`, `d ∈ [2, 6]`, `d_v ∈ [1, 4]`.
pub fn gradcheck(seed: u64, trials: usize, kernel: KernelKind) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::Domain("gradcheck needs at least one trial".into()));
    }
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let (q, k, v, g) = sample_trial(seed, trial, kernel);
        let analytic = mala_backward(&q, &k, &v, kernel, &g)?;
        let num_q = finite_diff_grad(
            |x| mala_loss_quadratic(x, &k, &v, kernel, &g),
            &q,
            GRADCHECK_STEP,
        )?;
        let num_k = finite_diff_grad(
            |x| mala_loss_quadratic(&q, x, &v, kernel, &g),
            &k,
            GRADCHECK_STEP,
        )?;
        let num_v = finite_diff_grad(
            |x| mala_loss_quadratic(&q, &k, x, kernel, &g),
            &v,
            GRADCHECK_STEP,
        )?;

        let near_kink = |m: &Matrix, idx: usize| {
            kernel == KernelKind::Relu && m.data()[idx].abs() < RELU_KINK_EXCLUSION
        };
        let excluded = (0..q.data().len()).filter(|&i| near_kink(&q, i)).count()
            + (0..k.data().len()).filter(|&i| near_kink(&k, i)).count();
        let eq = max_rel_err(&analytic.d_q, &num_q, |i| !near_kink(&q, i));
        let ek = max_rel_err(&analytic.d_k, &num_k, |i| !near_kink(&k, i));
        let ev = max_rel_err(&analytic.d_v, &num_v, |_| true);
        records.push(TrialRecord {
            trial,
            n: q.rows(),
            d: q.cols(),
            d_v: v.cols(),
            kernel,
            max_rel_err_q: eq,
            max_rel_err_k: ek,
            max_rel_err_v: ev,
            excluded,
            pass: eq.max(ek).max(ev) < GRADCHECK_TOLERANCE,
        });
    }
    let worst = |f: fn(&TrialRecord) -> f64| records.iter().map(f).fold(0.0, f64::max);
    let (eq, ek, ev) = (
        worst(|r| r.max_rel_err_q),
        worst(|r| r.max_rel_err_k),
        worst(|r| r.max_rel_err_v),
    );
    Ok(GradcheckReport {
        passed: records.iter().all(|r| r.pass),
        trials: records,
        max_rel_err_q: eq,
        max_rel_err_k: ek,
        max_rel_err_v: ev,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_gradients() {
        let q = Matrix::from_rows(&[[0.3, -0.7]]).unwrap();
        let k = Matrix::from_rows(&[[-1.1, 0.4]]).unwrap();
        let v = Matrix::from_rows(&[[2.0, -1.0]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let grads = mala_backward(&q, &k, &v, KernelKind::EluPlusOne, &g).unwrap();
        assert!(grads.d_v.max_abs_diff(&g).unwrap() < 1e-14);
        assert!(grads.d_q.max_abs() < 1e-12, "{:?}", grads.d_q);
        assert!(grads.d_k.max_abs() < 1e-12, "{:?}", grads.d_k);
    }

    #[test]
    fn value_gradient_is_scores_transposed_times_upstream() {
        let mut rng = instance_rng(30, 0);
        let q = normal_matrix(&mut rng, 5, 3);
        let k = normal_matrix(&mut rng, 5, 3);
        let v = normal_matrix(&mut rng, 5, 2);
        let g = Matrix::from_rows(&[[1.0, 1.0]; 5]).unwrap();
        let grads = mala_backward(&q, &k, &v, KernelKind::EluPlusOne, &g).unwrap();
        let scores = mala_quadratic(&q, &k, &v, KernelKind::EluPlusOne, true)
            .unwrap()
            .scores
            .unwrap();
        let expected = crate::numerics::matmul(&scores.transpose(), &g).unwrap();
        assert!(grads.d_v.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn matches_central_differences() {
        let mut rng = instance_rng(31, 0);
        let q = normal_matrix(&mut rng, 5, 3);
        let k = normal_matrix(&mut rng, 5, 3);
        let v = normal_matrix(&mut rng, 5, 2);
        let g = normal_matrix(&mut rng, 5, 2);
        let kernel = KernelKind::EluPlusOne;
        let grads = mala_backward(&q, &k, &v, kernel, &g).unwrap();
        let nq = finite_diff_grad(|x| mala_loss(x, &k, &v, kernel, &g), &q, 1e-6).unwrap();
        let nk = finite_diff_grad(|x| mala_loss(&q, x, &v, kernel, &g), &k, 1e-6).unwrap();
        let nv = finite_diff_grad(|x| mala_loss(&q, &k, x, kernel, &g), &v, 1e-6).unwrap();
        assert!(max_rel_err(&grads.d_q, &nq, |_| true) < 1e-5);
        assert!(max_rel_err(&grads.d_k, &nk, |_| true) < 1e-5);
        assert!(max_rel_err(&grads.d_v, &nv, |_| true) < 1e-5);
    }

    #[test]
    fn twin_keys_get_equal_gradients() {
        let mut rng = instance_rng(32, 0);
        let q = normal_matrix(&mut rng, 4, 3);
        let mut k = normal_matrix(&mut rng, 4, 3);
        let twin = k.row(1).to_vec();
        k.row_mut(2).copy_from_slice(&twin);
        let mut v = normal_matrix(&mut rng, 4, 2);
        let v_twin = v.row(1).to_vec();
        v.row_mut(2).copy_from_slice(&v_twin);
        let g = normal_matrix(&mut rng, 4, 2);
        let grads = mala_backward(&q, &k, &v, KernelKind::EluPlusOne, &g).unwrap();
        for c in 0..3 {
            assert!((grads.d_k.get(1, c) - grads.d_k.get(2, c)).abs() < 1e-12);
        }
        for c in 0..2 {
            assert!((grads.d_v.get(1, c) - grads.d_v.get(2, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn value_gradient_ignores_values() {
        let mut rng = instance_rng(33, 0);
        let q = normal_matrix(&mut rng, 6, 3);
        let k = normal_matrix(&mut rng, 6, 3);
        let v1 = normal_matrix(&mut rng, 6, 2);
        let v2 = normal_matrix(&mut rng, 6, 2);
        let g = normal_matrix(&mut rng, 6, 2);
        let a = mala_backward(&q, &k, &v1, KernelKind::EluPlusOne, &g).unwrap();
        let b = mala_backward(&q, &k, &v2, KernelKind::EluPlusOne, &g).unwrap();
        assert!(a.d_v.max_abs_diff(&b.d_v).unwrap() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = instance_rng(34, 0);
        let q = normal_matrix(&mut rng, 4, 2);
        let k = normal_matrix(&mut rng, 4, 2);
        let v = normal_matrix(&mut rng, 4, 3);
        let grads = mala_backward(&q, &k, &v, KernelKind::Exp, &Matrix::zeros(4, 3)).unwrap();
        for m in [&grads.d_q, &grads.d_k, &grads.d_v] {
            assert!(m.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn finite_diff_basics() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let sq = finite_diff_grad(|m| Ok(m.data().iter().map(|v| v * v).sum()), &x, 1e-6).unwrap();
        assert!((sq.get(0, 0) - 2.0).abs() < 1e-8 && (sq.get(0, 1) - 4.0).abs() < 1e-8);
        let c = finite_diff_grad(|_| Ok(3.5), &x, 1e-6).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-6).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn gradcheck_runs() {
        assert!(gradcheck(0, 0, KernelKind::EluPlusOne).is_err());
        let r = gradcheck(0, 20, KernelKind::EluPlusOne).unwrap();
        assert!(r.passed, "{r:?}");
        let r = gradcheck(0, 20, KernelKind::Exp).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(
            gradcheck(5, 3, KernelKind::Relu).unwrap(),
            gradcheck(5, 3, KernelKind::Relu).unwrap()
        );
    }
}

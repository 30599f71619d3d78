//! Wall-clock scaling of the attention forms.
//!
//! Every timing runs on the calling thread, one after another. Running
//! timings concurrently would share cores and caches and bend the log-log
//! slope, so nothing here spawns threads.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, Form, Mechanism};
use crate::error::{Error, Result};
use crate::kernels::KernelKind;
use crate::sampling::{instance_rng, normal_matrix};

pub const MIN_REPEATS: usize = 3;
/// Default ceiling for a materialised `N×N` score matrix.
pub const DEFAULT_MEM_CAP_BYTES: u64 = 3 << 30;
/// The hard assertion: quadratic slope minus streamed slope.
pub const MIN_SLOPE_SEPARATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub form: Form,
    pub n: usize,
    pub d: usize,
    /// Median over `repeats` timed runs.
    pub wall_time_s: f64,
    pub repeats: usize,
}

/// Bytes of the score matrix a quadratic form would allocate.
pub fn quadratic_bytes(n: usize) -> u128 {
    (n as u128) * (n as u128) * std::mem::size_of::<f64>() as u128
}

/// Median wall time of one forward pass on fixed seeded inputs. One
/// untimed warm-up run precedes the `repeats` timed ones.
#[allow(clippy::too_many_arguments)]
pub fn time_forward(
    mechanism: Mechanism,
    form: Form,
    n: usize,
    d: usize,
    d_v: usize,
    repeats: usize,
    seed: u64,
    mem_cap_bytes: u64,
) -> Result<BenchRecord> {
    if n == 0 || d == 0 || d_v == 0 {
        return Err(Error::Domain(format!(
            "bench sizes must be positive, got n={n} d={d} d_v={d_v}"
        )));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::Domain(format!(
            "need at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    if form == Form::Quadratic && quadratic_bytes(n) > mem_cap_bytes as u128 {
        return Err(Error::MemoryCap {
            required: quadratic_bytes(n),
            cap: mem_cap_bytes as u128,
        });
    }
    let mut rng = instance_rng(seed, n as u64);
    let q = normal_matrix(&mut rng, n, d);
    let k = normal_matrix(&mut rng, n, d);
    let v = normal_matrix(&mut rng, n, d_v);
    let kernel = KernelKind::EluPlusOne;

    black_box(attend(mechanism, form, &q, &k, &v, kernel)?);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = attend(
            mechanism,
            form,
            black_box(&q),
            black_box(&k),
            black_box(&v),
            kernel,
        )?;
        times.push(start.elapsed().as_secs_f64());
        black_box(out);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok(BenchRecord {
        mechanism,
        form,
        n,
        d,
        // A timer with coarse resolution can report zero for tiny inputs.
        wall_time_s: median.max(1e-9),
        repeats,
    })
}

/// Least-squares slope of `ln(wall_time)` against `ln(n)`.
pub fn slope_fit(records: &[BenchRecord]) -> Result<f64> {
    if records.len() < 4 {
        return Err(Error::Domain(format!(
            "slope fit needs at least 4 records, got {}",
            records.len()
        )));
    }
    let first = &records[0];
    if records
        .iter()
        .any(|r| r.mechanism != first.mechanism || r.form != first.form)
    {
        return Err(Error::Domain(
            "slope fit records must share mechanism and form".into(),
        ));
    }
    if records
        .iter()
        .any(|r| r.n == 0 || !(r.wall_time_s > 0.0) || !r.wall_time_s.is_finite())
    {
        return Err(Error::Domain(
            "slope fit needs positive n and wall times".into(),
        ));
    }
    let lo = records.iter().map(|r| r.n).min().unwrap_or(0);
    let hi = records.iter().map(|r| r.n).max().unwrap_or(0);
    if hi < 8 * lo {
        return Err(Error::Domain(format!(
            "n must span at least 8x, got {lo}..{hi}"
        )));
    }
    let xs: Vec<f64> = records.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.wall_time_s.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub records: Vec<BenchRecord>,
    pub slope_quadratic: f64,
    pub slope_streamed: f64,
}

impl BenchSummary {
    pub fn separation(&self) -> f64 {
        self.slope_quadratic - self.slope_streamed
    }

    pub fn passed(&self) -> bool {
        self.separation() > MIN_SLOPE_SEPARATION
    }
}

/// Times quadratic softmax and streamed MALA over `ns` and fits both slopes.
pub fn compare_scaling(
    ns: &[usize],
    d: usize,
    d_v: usize,
    repeats: usize,
    seed: u64,
    mem_cap_bytes: u64,
) -> Result<BenchSummary> {
    let mut quadratic = Vec::with_capacity(ns.len());
    let mut streamed = Vec::with_capacity(ns.len());
    for &n in ns {
        quadratic.push(time_forward(
            Mechanism::Softmax,
            Form::Quadratic,
            n,
            d,
            d_v,
            repeats,
            seed,
            mem_cap_bytes,
        )?);
        streamed.push(time_forward(
            Mechanism::Mala,
            Form::Streamed,
            n,
            d,
            d_v,
            repeats,
            seed,
            mem_cap_bytes,
        )?);
    }
    let slope_quadratic = slope_fit(&quadratic)?;
    let slope_streamed = slope_fit(&streamed)?;
    quadratic.extend(streamed);
    Ok(BenchSummary {
        records: quadratic,
        slope_quadratic,
        slope_streamed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(power: f64) -> Vec<BenchRecord> {
        [128usize, 256, 512, 1024, 2048]
            .iter()
            .map(|&n| BenchRecord {
                mechanism: Mechanism::Mala,
                form: Form::Streamed,
                n,
                d: 64,
                wall_time_s: 3e-7 * (n as f64).powf(power),
                repeats: 3,
            })
            .collect()
    }

    #[test]
    fn exact_power_laws() {
        assert!((slope_fit(&synthetic(1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((slope_fit(&synthetic(2.0)).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn slope_preconditions() {
        let recs = synthetic(1.0);
        assert!(slope_fit(&recs[..3]).is_err());
        // 256..2048 is exactly 8x.
        assert!(slope_fit(&recs[1..]).is_ok());
        let mut narrow = recs[1..].to_vec();
        narrow[3].n = 1024;
        assert!(slope_fit(&narrow).is_err());
        let mut mixed = recs.clone();
        mixed[0].form = Form::Quadratic;
        assert!(slope_fit(&mixed).is_err());
    }

    #[test]
    fn memory_cap_rejects_quadratic_only() {
        let cap = 64 << 20;
        let err =
            time_forward(Mechanism::Mala, Form::Quadratic, 4096, 8, 8, 3, 0, cap).unwrap_err();
        assert_eq!(
            err,
            Error::MemoryCap {
                required: 128 << 20,
                cap: 64 << 20
            }
        );
        let rec = time_forward(Mechanism::Mala, Form::Streamed, 4096, 8, 8, 3, 0, cap).unwrap();
        assert!(rec.wall_time_s > 0.0);
        assert_eq!(rec.repeats, 3);
    }

    #[test]
    fn repeats_minimum() {
        assert!(time_forward(
            Mechanism::Linear,
            Form::Streamed,
            16,
            4,
            4,
            2,
            0,
            DEFAULT_MEM_CAP_BYTES
        )
        .is_err());
        assert!(time_forward(
            Mechanism::Linear,
            Form::Streamed,
            16,
            4,
            4,
            3,
            0,
            DEFAULT_MEM_CAP_BYTES
        )
        .is_ok());
    }

    #[test]
    fn softmax_streamed_is_rejected() {
        assert!(time_forward(
            Mechanism::Softmax,
            Form::Streamed,
            16,
            4,
            4,
            3,
            0,
            DEFAULT_MEM_CAP_BYTES
        )
        .is_err());
    }
}

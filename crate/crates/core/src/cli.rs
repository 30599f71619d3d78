//! The `mala` command line.
//!
//! Exit codes: 0 on success, 1 when a run completes but its check fails
//! (a ratio counterexample, a gradcheck miss, a weak slope separation, an
//! ablation that does not behave as expected), 2 for bad arguments and any
//! error that stops a run, including an unwritable output path.
//!
//! Records go to `--out` when given, otherwise to stdout. Summary lines go to
//! stdout when `--out` is given, otherwise to stderr, so stdout never mixes
//! the two.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::ablation::{ablated_scores, row_stats, AblationMode};
use crate::analysis::{ratio_sweep, scaled_scores, spikiness_of_scores, RatioSweepConfig};
use crate::attention::Mechanism;
use crate::bench::{compare_scaling, MIN_SLOPE_SEPARATION};
use crate::grad::gradcheck;
use crate::kernels::{kernel_apply, KernelKind};
use crate::numerics::Matrix;
use crate::sampling::{instance_rng, normal_matrix};

const DISTRIBUTION_COLUMNS: &str = "\
CSV columns (one file, `kind` tells the row type):
  kind            score | summary
  mechanism       softmax | linear | mala
  scale           query magnitude factor a
  query_row       score rows only
  key_index       score rows only
  score           score rows only
  entropy         summary only; mean over rows with no negative score, empty if none
  entropy_rows    summary only; rows that entered the entropy mean
  max_score       summary only
  score_variance  summary only
  negative_count  summary only; scores <= 0";

const RATIOS_COLUMNS: &str = "\
CSV columns:
  instance, tokens, d       sampled instance and its size
  m, n                      key pair, oriented so that p >= 1
  a                         query feature scale
  beta, gamma               MALA terms before scaling
  beta_new, gamma_new       MALA terms after scaling
  p, p_m                    pair ratio before/after scaling; empty unless both pair scores stay positive
  p_s                       softmax ratio after scaling; empty on overflow
  all_scores_positive       every score of the query row positive, scaled and unscaled
  counterexample            p > 1 and p_m <= p on a pair-positive instance
Summary lines carry the census and the lemma sweep.";

const ABLATE_COLUMNS: &str = "\
CSV columns:
  mode            full | no_beta | no_gamma | fixed
  scale           query feature scale a
  row             query row
  row_sum         sum of the row's scores
  deviation       |row_sum - 1|
  max_abs_score
  mean_abs_score
Checks: full keeps every deviation below 1e-10; no_beta and no_gamma
must show a mean deviation above 0.1. fixed is reported only.";

const BENCH_COLUMNS: &str = "\
CSV columns:
  mechanism, form   softmax/quadratic and mala/streamed
  n, d              token count and head width
  wall_time_s       median seconds over the timed repeats
  repeats
Summary lines: `slope=<value> mechanism=.. form=..` per series, then the
separation, which must exceed 0.5.";

const GRADCHECK_COLUMNS: &str = "\
CSV columns:
  trial, n, d, d_v, kernel
  max_rel_err_q, max_rel_err_k, max_rel_err_v   |a-b| / max(|a|,|b|,1e-8)
  excluded        relu inputs within 1e-4 of the kink, left out
  pass            every error below 1e-5";

#[derive(Debug, Parser)]
#[command(
    name = "mala",
    version,
    about = "Magnitude-aware linear attention experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score distributions of softmax, linear and MALA attention as the query magnitude grows.
    #[command(after_help = DISTRIBUTION_COLUMNS)]
    Distribution(DistributionArgs),
    /// Sweep the pair-ratio laws and the scaling lemmas over random instances.
    #[command(after_help = RATIOS_COLUMNS)]
    Ratios(RatiosArgs),
    /// MALA scores with beta and/or gamma removed or fixed.
    #[command(after_help = ABLATE_COLUMNS)]
    Ablate(AblateArgs),
    /// Time quadratic softmax against streamed MALA and fit log-log slopes.
    #[command(after_help = BENCH_COLUMNS)]
    Bench(BenchArgs),
    /// Check the analytic MALA gradients against central differences.
    #[command(after_help = GRADCHECK_COLUMNS)]
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct Output {
    /// Write records here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct DistributionArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tokens.
    #[arg(long, default_value_t = 16, value_parser = positive)]
    n: usize,
    /// Feature width.
    #[arg(long, default_value_t = 8, value_parser = positive)]
    d: usize,
    #[arg(long, value_enum, default_value_t = KernelKind::EluPlusOne)]
    kernel: KernelKind,
    /// Query magnitude factors, each >= 1.
    #[arg(long, value_delimiter = ',', value_parser = scale_factor, default_value = "1,2,4,8")]
    scales: Vec<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct RatiosArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest token count drawn per instance.
    #[arg(long, default_value_t = 16, value_parser = at_least_two)]
    n: usize,
    /// Largest feature width drawn per instance.
    #[arg(long, default_value_t = 8, value_parser = positive)]
    d: usize,
    #[arg(long, value_enum, default_value_t = KernelKind::EluPlusOne)]
    kernel: KernelKind,
    /// Cycle through these scales (each > 1) instead of drawing a log-uniform on (1, 100].
    #[arg(long, value_delimiter = ',', value_parser = strict_scale_factor)]
    scales: Option<Vec<f64>>,
    /// Sampled (instance, a) pairs.
    #[arg(long, default_value_t = 10_000, value_parser = positive)]
    samples: usize,
    /// Random (a, beta) draws for the c > 1 lemma.
    #[arg(long, default_value_t = 10_000)]
    lemma_samples: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Full,
    #[value(name = "no_beta")]
    NoBeta,
    #[value(name = "no_gamma")]
    NoGamma,
    Fixed,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Constant beta for `--mode fixed`.
    #[arg(long, required_if_eq("mode", "fixed"))]
    beta: Option<f64>,
    /// Constant gamma for `--mode fixed`.
    #[arg(long, required_if_eq("mode", "fixed"))]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    n: usize,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    d: usize,
    #[arg(long, value_enum, default_value_t = KernelKind::EluPlusOne)]
    kernel: KernelKind,
    /// Query feature scales, each >= 1.
    #[arg(long, value_delimiter = ',', value_parser = scale_factor, default_value = "1,2,4,8")]
    scales: Vec<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token counts to time; at least 4 spanning 8x.
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "1024,2048,4096,8192,16384")]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    d: usize,
    /// Value width; defaults to --d.
    #[arg(long, value_parser = positive)]
    d_v: Option<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Largest score matrix the quadratic form may allocate, in MiB.
    #[arg(long, default_value_t = 3072)]
    mem_cap_mb: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = KernelKind::EluPlusOne)]
    kernel: KernelKind,
    #[command(flatten)]
    output: Output,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    match positive(s)? {
        1 => Err("must be at least 2 to pick a key pair".into()),
        v => Ok(v),
    }
}

fn scale_factor(s: &str) -> Result<f64, String> {
    let a: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if !a.is_finite() || a < 1.0 {
        return Err(format!("scale factors must be finite and >= 1, got {s}"));
    }
    Ok(a)
}

fn strict_scale_factor(s: &str) -> Result<f64, String> {
    let a = scale_factor(s)?;
    if a == 1.0 {
        return Err("ratio scales must exceed 1".into());
    }
    Ok(a)
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Mala(#[from] crate::error::Error),
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What a subcommand hands back for printing.
struct Report {
    body: Vec<u8>,
    summary: Vec<String>,
    passed: bool,
}

fn csv_body<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

fn json_body<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    Ok(body)
}

fn emit(output: &Output, report: &Report) -> Result<(), CliError> {
    match &output.out {
        Some(path) => {
            fs::write(path, &report.body).map_err(|source| CliError::Write {
                path: path.display().to_string(),
                source,
            })?;
            let mut stdout = io::stdout().lock();
            for line in &report.summary {
                writeln!(stdout, "{line}")?;
            }
        }
        None => {
            io::stdout().lock().write_all(&report.body)?;
            let mut stderr = io::stderr().lock();
            for line in &report.summary {
                writeln!(stderr, "{line}")?;
            }
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), |v| format!("{v}"))
}

#[derive(Debug, Serialize)]
struct DistributionRow {
    kind: &'static str,
    mechanism: &'static str,
    scale: f64,
    query_row: Option<usize>,
    key_index: Option<usize>,
    score: Option<f64>,
    entropy: Option<f64>,
    entropy_rows: Option<usize>,
    max_score: Option<f64>,
    score_variance: Option<f64>,
    negative_count: Option<usize>,
}

fn distribution(args: &DistributionArgs) -> Result<Report, CliError> {
    let mut rng = instance_rng(args.seed, 0);
    let q = normal_matrix(&mut rng, args.n, args.d);
    let k = normal_matrix(&mut rng, args.n, args.d);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut summary = Vec::new();
    for mechanism in Mechanism::ALL {
        for &a in &args.scales {
            let scores = scaled_scores(mechanism, &q, &k, args.kernel, a)?;
            for (i, r) in scores.row_iter().enumerate() {
                for (j, &s) in r.iter().enumerate() {
                    rows.push(DistributionRow {
                        kind: "score",
                        mechanism: mechanism.name(),
                        scale: a,
                        query_row: Some(i),
                        key_index: Some(j),
                        score: Some(s),
                        entropy: None,
                        entropy_rows: None,
                        max_score: None,
                        score_variance: None,
                        negative_count: None,
                    });
                }
            }
            let s = spikiness_of_scores(&scores, mechanism.name())?;
            summary.push(format!(
                "mechanism={} scale={a} entropy={} max_score={} score_variance={} negative_count={}",
                mechanism,
                fmt_opt(s.entropy),
                s.max_score,
                s.score_variance,
                s.negative_count
            ));
            summaries.push(DistributionRow {
                kind: "summary",
                mechanism: mechanism.name(),
                scale: a,
                query_row: None,
                key_index: None,
                score: None,
                entropy: s.entropy,
                entropy_rows: Some(s.entropy_rows),
                max_score: Some(s.max_score),
                score_variance: Some(s.score_variance),
                negative_count: Some(s.negative_count),
            });
        }
    }
    rows.extend(summaries);
    let body = match args.output.format {
        Format::Csv => csv_body(&rows)?,
        Format::Json => json_body(&rows)?,
    };
    Ok(Report {
        body,
        summary,
        passed: true,
    })
}

fn ratios(args: &RatiosArgs) -> Result<Report, CliError> {
    let cfg = RatioSweepConfig {
        seed: args.seed,
        samples: args.samples,
        max_n: args.n,
        max_d: args.d,
        kernel: args.kernel,
        scales: args.scales.clone(),
        lemma_samples: args.lemma_samples,
    };
    let sweep = ratio_sweep(&cfg)?;
    let c = &sweep.census;
    let summary = vec![
        format!(
            "census evaluated={} degenerate={} pair_positive={} all_positive={} filtered_fraction={}",
            c.evaluated,
            c.degenerate,
            c.pair_positive,
            c.all_positive,
            c.filtered_fraction()
        ),
        format!("counterexamples={}", c.counterexamples),
        format!(
            "scaling_lemmas max_beta_error={:e} max_gamma_error={:e}",
            c.max_beta_relation_error, c.max_gamma_relation_error
        ),
        format!(
            "softmax_power_law checked={} overflow={} max_rel_error={:e}",
            c.softmax_checked, c.softmax_overflow, c.max_softmax_power_rel_error
        ),
        format!("ratio_limit checked={} max_rel_error={:e}", c.limit_checked, c.max_limit_rel_error),
        format!("lemma_c_gt_one checked={} failures={}", c.lemma_checked, c.lemma_failures),
        format!("monotone_f checked={} failures={}", c.monotone_checked, c.monotone_failures),
        format!("pass={}", c.passed()),
    ];
    let body = match args.output.format {
        Format::Csv => csv_body(&sweep.records)?,
        Format::Json => json_body(&sweep)?,
    };
    Ok(Report {
        body,
        summary,
        passed: c.passed(),
    })
}

#[derive(Debug, Serialize)]
struct AblationRow {
    mode: &'static str,
    scale: f64,
    row: usize,
    row_sum: f64,
    deviation: f64,
    max_abs_score: f64,
    mean_abs_score: f64,
}

/// Largest deviation full MALA may show.
const FULL_DEVIATION_TOL: f64 = 1e-10;
/// Smallest mean deviation counted as a broken normalisation.
const COLLAPSE_MIN_DEVIATION: f64 = 0.1;

fn ablate(args: &AblateArgs) -> Result<Report, CliError> {
    let mode = match args.mode {
        ModeArg::Full => AblationMode::Full,
        ModeArg::NoBeta => AblationMode::NoBeta,
        ModeArg::NoGamma => AblationMode::NoGamma,
        // clap enforces both flags for this mode.
        ModeArg::Fixed => AblationMode::Fixed {
            beta: args.beta.unwrap_or_default(),
            gamma: args.gamma.unwrap_or_default(),
        },
    };
    let mut rng = instance_rng(args.seed, 0);
    let phi_q = kernel_apply(args.kernel, &normal_matrix(&mut rng, args.n, args.d))?;
    let phi_k = kernel_apply(args.kernel, &normal_matrix(&mut rng, args.n, args.d))?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut passed = true;
    for &a in &args.scales {
        let scores: Matrix = ablated_scores(&phi_q.scale(a)?, &phi_k, mode)?;
        let stats = row_stats(&scores);
        let mean_dev = stats.iter().map(|s| s.deviation).sum::<f64>() / stats.len() as f64;
        let max_dev = stats.iter().map(|s| s.deviation).fold(0.0, f64::max);
        let mean_sum = stats.iter().map(|s| s.row_sum).sum::<f64>() / stats.len() as f64;
        passed &= match mode {
            AblationMode::Full => max_dev < FULL_DEVIATION_TOL,
            AblationMode::NoBeta | AblationMode::NoGamma => mean_dev > COLLAPSE_MIN_DEVIATION,
            AblationMode::Fixed { .. } => true,
        };
        summary.push(format!(
            "mode={} scale={a} mean_row_sum={mean_sum} mean_deviation={mean_dev:e} max_deviation={max_dev:e}",
            mode.name()
        ));
        rows.extend(stats.iter().enumerate().map(|(row, s)| AblationRow {
            mode: mode.name(),
            scale: a,
            row,
            row_sum: s.row_sum,
            deviation: s.deviation,
            max_abs_score: s.max_abs_score,
            mean_abs_score: s.mean_abs_score,
        }));
    }
    summary.push(format!("pass={passed}"));
    let body = match args.output.format {
        Format::Csv => csv_body(&rows)?,
        Format::Json => json_body(&rows)?,
    };
    Ok(Report {
        body,
        summary,
        passed,
    })
}

fn bench(args: &BenchArgs) -> Result<Report, CliError> {
    let cap = args.mem_cap_mb.saturating_mul(1 << 20);
    let s = compare_scaling(
        &args.ns,
        args.d,
        args.d_v.unwrap_or(args.d),
        args.repeats,
        args.seed,
        cap,
    )?;
    let summary = vec![
        format!(
            "slope={} mechanism=softmax form=quadratic",
            s.slope_quadratic
        ),
        format!("slope={} mechanism=mala form=streamed", s.slope_streamed),
        format!(
            "separation={} threshold={MIN_SLOPE_SEPARATION} pass={}",
            s.separation(),
            s.passed()
        ),
    ];
    let body = match args.output.format {
        Format::Csv => csv_body(&s.records)?,
        Format::Json => json_body(&s)?,
    };
    Ok(Report {
        body,
        summary,
        passed: s.passed(),
    })
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<Report, CliError> {
    let r = gradcheck(args.seed, args.trials, args.kernel)?;
    let summary = vec![format!(
        "gradcheck kernel={} trials={} max_rel_err_q={:e} max_rel_err_k={:e} max_rel_err_v={:e} tolerance={:e} pass={}",
        args.kernel,
        r.trials.len(),
        r.max_rel_err_q,
        r.max_rel_err_k,
        r.max_rel_err_v,
        r.tolerance,
        r.passed
    )];
    let body = match args.output.format {
        Format::Csv => csv_body(&r.trials)?,
        Format::Json => json_body(&r)?,
    };
    Ok(Report {
        body,
        summary,
        passed: r.passed,
    })
}

fn execute(cli: &Cli) -> Result<bool, CliError> {
    let (report, output) = match &cli.command {
        Command::Distribution(a) => (distribution(a)?, &a.output),
        Command::Ratios(a) => (ratios(a)?, &a.output),
        Command::Ablate(a) => (ablate(a)?, &a.output),
        Command::Bench(a) => (bench(a)?, &a.output),
        Command::Gradcheck(a) => (gradcheck_cmd(a)?, &a.output),
    };
    emit(output, &report)?;
    Ok(report.passed)
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

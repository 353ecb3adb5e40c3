//! Command implementations behind the `airvote` binary. Each returns a
//! process exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bounds::{run_bound_suite, BoundFormulas, BoundRow};
use crate::config::{ConfigEcho, ConfigFile};
use crate::error::{Error, Result};
use crate::server::{operation_counts, run_experiment, OperationCounts, RoundMetrics, RunResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BOUND_FAILURE: i32 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "run.json";
pub const BOUNDS_FILE: &str = "bounds.csv";

pub const METRICS_HEADER: &str = "round,train_loss,test_accuracy,sign_error_rate,rho,min_channel_gain,wall_time_s";
pub const BOUNDS_HEADER: &str = "bound_name,params,empirical,ci_low,ci_high,bound,valid,pass";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn report(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => String::new(),
    }
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.round,
            m.train_loss,
            m.test_accuracy,
            opt(Some(m.sign_error_rate)),
            opt(m.rho),
            opt(m.min_channel_gain),
            opt(m.wall_time_s)
        );
    }
    s
}

pub fn bounds_csv(rows: &[BoundRow]) -> String {
    let mut s = String::from(BOUNDS_HEADER);
    s.push('\n');
    for r in rows {
        let pass = match r.pass {
            Some(true) => "true",
            Some(false) => "false",
            None => "skipped",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.bound_name,
            r.params,
            opt(r.empirical),
            opt(r.ci_low),
            opt(r.ci_high),
            r.bound,
            r.valid,
            pass
        );
    }
    s
}

#[derive(Debug, Serialize)]
pub struct RunSummary<'a> {
    pub run_id: String,
    pub config: ConfigEcho<'a>,
    pub byzantine_workers: &'a [usize],
    pub operation_counts: &'a OperationCounts,
    pub gradient_evals_total: usize,
    pub power_violations: usize,
    pub rejected_rounds: usize,
    pub weiszfeld_unconverged: usize,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
}

pub fn summary_json(cfg: &ConfigFile, result: &RunResult) -> String {
    let echo = ConfigEcho::new(cfg, &result.config);
    let summary = RunSummary {
        run_id: echo.run_id(),
        config: echo,
        byzantine_workers: &result.byzantine_workers,
        operation_counts: &result.counts,
        gradient_evals_total: result.gradient_evals_total,
        power_violations: result.power_violations,
        rejected_rounds: result.rejected_rounds,
        weiszfeld_unconverged: result.weiszfeld_unconverged,
        final_accuracy: result.final_accuracy(),
        final_train_loss: result.metrics.last().map_or(f64::NAN, |m| m.train_loss),
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Run the configured experiment and write the metrics pair into `out`.
pub fn train(cfg: &ConfigFile, out: &Path) -> Result<RunResult> {
    let exp = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| Error::Config("config has no experiment section".into()))?;
    let (train, test) = exp.dataset.load(exp.seed)?;
    let result = run_experiment(exp, &train, &test, cfg.run_options())?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(METRICS_FILE), metrics_csv(&result.metrics))?;
    std::fs::write(out.join(SUMMARY_FILE), summary_json(cfg, &result))?;
    Ok(result)
}

pub fn cmd_train(config_path: &Path, out: Option<&Path>) -> i32 {
    let cfg = match ConfigFile::load(config_path) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    if cfg.experiment.is_none() {
        return report(&Error::Config("config has no experiment section".into()));
    }
    let dir = cfg.resolve_output_dir(out);
    match train(&cfg, &dir) {
        Ok(r) => {
            println!(
                "wrote {} rows to {} (final accuracy {})",
                r.metrics.len(),
                dir.join(METRICS_FILE).display(),
                r.final_accuracy()
            );
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

/// Bound suite outcome written to `out`.
pub struct BoundsOutcome {
    pub rows: Vec<BoundRow>,
    pub path: PathBuf,
}

impl BoundsOutcome {
    pub fn failures(&self) -> Vec<&BoundRow> {
        self.rows.iter().filter(|r| r.failed()).collect()
    }
}

pub fn validate_bounds(cfg: &ConfigFile, out: &Path, formulas: &BoundFormulas) -> Result<BoundsOutcome> {
    let suite = cfg
        .bounds
        .as_ref()
        .ok_or_else(|| Error::Config("config has no bounds section".into()))?;
    suite.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| run_bound_suite(suite, formulas))?;
    std::fs::create_dir_all(out)?;
    let path = out.join(BOUNDS_FILE);
    std::fs::write(&path, bounds_csv(&rows))?;
    Ok(BoundsOutcome { rows, path })
}

pub fn cmd_validate_bounds(config_path: &Path, out: Option<&Path>) -> i32 {
    cmd_validate_bounds_with(config_path, out, &BoundFormulas::default())
}

pub fn cmd_validate_bounds_with(config_path: &Path, out: Option<&Path>, formulas: &BoundFormulas) -> i32 {
    let cfg = match ConfigFile::load(config_path) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let dir = cfg.resolve_output_dir(out);
    match validate_bounds(&cfg, &dir, formulas) {
        Ok(outcome) => {
            let failures = outcome.failures();
            let skipped = outcome.rows.iter().filter(|r| !r.valid).count();
            println!(
                "{} points, {} skipped as invalid, {} failed; report at {}",
                outcome.rows.len(),
                skipped,
                failures.len(),
                outcome.path.display()
            );
            if failures.is_empty() {
                EXIT_OK
            } else {
                for r in failures {
                    eprintln!(
                        "bound violated: {} {} empirical={} bound={}",
                        r.bound_name,
                        r.params,
                        opt(r.empirical),
                        r.bound
                    );
                }
                EXIT_BOUND_FAILURE
            }
        }
        Err(e) => report(&e),
    }
}

fn num(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{}", (x * 1e9).round() / 1e9)
    }
}

/// One-line rendering of an operation-count record.
pub fn counts_line(c: &OperationCounts) -> String {
    let mut s = format!(
        "scheme={} local_sgd={} local_sgd_cell={}x{} gm={} aircomp={} digital={}",
        c.scheme,
        num(c.local_sgd),
        num(c.local_sgd_per_worker),
        c.workers,
        c.gm,
        c.aircomp,
        c.digital
    );
    if let Some(e) = c.expected_local_sgd {
        let _ = write!(s, " expected_local_sgd={}", num(e));
    }
    s
}

pub fn cmd_counts(scheme: &str, k: usize, p: f64, clusters: usize, iters: usize) -> i32 {
    match operation_counts(scheme, k, p, clusters, iters) {
        Ok(c) => {
            println!("{}", counts_line(&c));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

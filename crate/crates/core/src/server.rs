//! Round orchestration for the hierarchical vote scheme and its baselines.
//!
//! A round runs in fixed phases: broadcast of ω, honest local updates,
//! Byzantine updates (which may read every honest message and the true
//! gradient), fading draw and power design, over-the-air aggregation and
//! sign decode, then the sign-descent step.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{aggregate_scaled, draw_channel, global_vote, precode, snr_to_noise, transmit_energy, ChannelRound, POWER_TOLERANCE};
use crate::data::{
    allocation_from_stream, assigned_sets, generate_synthetic, load_mnist_idx, partition_indices, sample_minibatch,
    Dataset, Partition,
};
use crate::error::{arg, Error, Result};
use crate::learn::{
    accuracy, full_gradient, full_loss, gradient, sgd_step, sign_quantize, GradientVector, ModelKind, ModelParams,
    ModelShape, SignVector,
};
use crate::rng::StreamKey;
use crate::worker::{
    assign_roles, byzantine_count, directional_update, honest_update, label_flip_view, mimic_update,
    omniscient_update, oracle_sign_flip_update, resolve_mimic_target, AttackSpec, LocalUpdate, WorkerRole,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Hierarchical,
    NaiveSignsgd,
    HierarchicalNoiseFree,
    DigitalGm,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Hierarchical => "hierarchical",
            Scheme::NaiveSignsgd => "naive_signsgd",
            Scheme::HierarchicalNoiseFree => "hierarchical_noise_free",
            Scheme::DigitalGm => "digital_gm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs; the test split is drawn from the same class means
    /// with an independent stream.
    Synthetic {
        classes: usize,
        per_class: usize,
        features: usize,
        separation: f64,
        test_per_class: usize,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only these digits, relabeled to `0..len`.
        #[serde(default)]
        classes: Option<Vec<u32>>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl DatasetSpec {
    /// Returns `(train, test)`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic { classes, per_class, features, separation, test_per_class } => {
                let root = StreamKey::new(seed);
                let train = generate_synthetic(*classes, *per_class, *features, *separation, root.derive("train-data", &[]).raw())?;
                let test = generate_synthetic(*classes, *test_per_class, *features, *separation, root.derive("test-data", &[]).raw())?;
                Ok((train, test))
            }
            DatasetSpec::Mnist { train_images, train_labels, test_images, test_labels, classes, train_limit, test_limit } => {
                let train = load_mnist_idx(train_images, train_labels)?;
                let test = load_mnist_idx(test_images, test_labels)?;
                let keep: Vec<u32> = classes.clone().unwrap_or_else(|| (0..10).collect());
                Ok((train.select_classes(&keep, *train_limit)?, test.select_classes(&keep, *test_limit)?))
            }
        }
    }
}

/// Smoothed Weiszfeld settings for the digital geometric-median baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeiszfeldConfig {
    pub max_iters: usize,
    pub smoothing: f64,
    pub tolerance: f64,
}

impl Default for WeiszfeldConfig {
    fn default() -> Self {
        WeiszfeldConfig { max_iters: 200, smoothing: 1e-8, tolerance: 1e-10 }
    }
}

fn default_scheme() -> Scheme {
    Scheme::Hierarchical
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of edge workers K.
    pub k: usize,
    /// Corruption level c = B/K.
    #[serde(default)]
    pub c: f64,
    /// Off-diagonal allocation probability.
    #[serde(default)]
    pub p: f64,
    pub batch_size: usize,
    pub eta: f64,
    pub rounds: usize,
    /// Transmit SNR in dB; `null` is a noiseless channel.
    #[serde(default)]
    pub snr_db: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelKind,
    pub dataset: DatasetSpec,
    /// `null` means every worker is honest regardless of `c`.
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Workers with `|h_k|` below this skip the round.
    #[serde(default)]
    pub h_min: Option<f64>,
    /// Amplitude multiplier on Byzantine transmissions (1 = compliant).
    #[serde(default = "one")]
    pub byzantine_power_scale: f64,
    #[serde(default)]
    pub weiszfeld: WeiszfeldConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(0.0..1.0).contains(&self.c) {
            return bad("c must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad("p must lie in [0, 1]");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad("eta must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return bad("snr_db must be finite or null");
        }
        if self.h_min.is_some_and(|h| !(h >= 0.0)) {
            return bad("h_min must be non-negative");
        }
        if !(self.byzantine_power_scale >= 0.0) || !self.byzantine_power_scale.is_finite() {
            return bad("byzantine_power_scale must be non-negative");
        }
        let w = &self.weiszfeld;
        if w.max_iters == 0 || !(w.smoothing > 0.0) || !(w.tolerance >= 0.0) {
            return bad("weiszfeld needs max_iters >= 1, smoothing > 0, tolerance >= 0");
        }
        if let DatasetSpec::Synthetic { classes, per_class, features, separation, test_per_class } = &self.dataset {
            if *classes < 2 || *per_class == 0 || *features == 0 || *test_per_class == 0 || !(*separation > 0.0) {
                return bad("synthetic dataset needs classes >= 2, positive sizes and separation > 0");
            }
        }
        Ok(())
    }

    /// Noise power for this run with `P0/d = 1`.
    pub fn noise_power(&self, dim: usize) -> f64 {
        match (self.scheme, self.snr_db) {
            (Scheme::HierarchicalNoiseFree, _) | (_, None) => 0.0,
            (_, Some(snr)) => snr_to_noise(snr, dim as f64, dim),
        }
    }

    fn effective_p(&self) -> f64 {
        match self.scheme {
            Scheme::NaiveSignsgd | Scheme::DigitalGm => 0.0,
            _ => self.p,
        }
    }
}

/// Execution knobs that never change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Evaluate metrics every `eval_stride` rounds (and always on the last).
    pub eval_stride: usize,
    pub threads: usize,
    /// Record elapsed wall time per evaluated round. Off by default because it
    /// makes outputs non-reproducible.
    pub wall_clock: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { eval_stride: 1, threads: 1, wall_clock: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Full-batch training loss after this round's update.
    pub train_loss: f64,
    /// Test accuracy after this round's update.
    pub test_accuracy: f64,
    /// Fraction of coordinates where the decoded direction disagrees with
    /// `sign(∇F(ω_t))`.
    pub sign_error_rate: f64,
    /// `None` for the digital baseline or a rejected round.
    pub rho: Option<f64>,
    pub min_channel_gain: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub gradient_evals: usize,
}

/// Per-round computation accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperationCounts {
    pub scheme: String,
    /// Local SGD steps per worker as tabulated (`Kp` for hierarchical vote).
    pub local_sgd_per_worker: f64,
    pub workers: usize,
    /// `local_sgd_per_worker × workers`.
    pub local_sgd: f64,
    pub gm: usize,
    pub aircomp: usize,
    pub digital: usize,
    /// Exact expectation `K(1 + (K-1)p)` of mini-batch gradients per round,
    /// counting the always-assigned diagonal subset.
    pub expected_local_sgd: Option<f64>,
}

/// Operation counts per learning round for `scheme` in
/// `{hierarchical, digital_gm, rotaf, aircomp_gm}`.
pub fn operation_counts(scheme: &str, k: usize, p: f64, clusters: usize, iters: usize) -> Result<OperationCounts> {
    let base = |per: f64, gm, aircomp, digital, expected| OperationCounts {
        scheme: scheme.to_string(),
        local_sgd_per_worker: per,
        workers: k,
        local_sgd: per * k as f64,
        gm,
        aircomp,
        digital,
        expected_local_sgd: expected,
    };
    Ok(match scheme {
        "hierarchical" => base(
            k as f64 * p,
            0,
            1,
            0,
            Some(k as f64 * (1.0 + (k as f64 - 1.0) * p)),
        ),
        "digital_gm" => base(1.0, 1, 0, k, None),
        "rotaf" => base(1.0, 1, clusters, 0, None),
        "aircomp_gm" => base(1.0, 0, iters, 0, None),
        other => return arg(format!("unknown scheme '{other}'")),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeiszfeldResult {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Smoothed Weiszfeld iterations from the coordinate-wise mean; weights are
/// `1 / max(ε, ‖z − p_i‖)`.
pub fn geometric_median(points: &[Vec<f64>], cfg: &WeiszfeldConfig) -> Result<WeiszfeldResult> {
    let Some(first) = points.first() else {
        return arg("geometric median of an empty set");
    };
    let d = first.len();
    if points.iter().any(|p| p.len() != d) {
        return arg("points differ in dimension");
    }
    let n = points.len() as f64;
    let mut z = vec![0.0; d];
    for p in points {
        for (zj, pj) in z.iter_mut().zip(p) {
            *zj += pj / n;
        }
    }
    let mut next = vec![0.0; d];
    for it in 1..=cfg.max_iters {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut wsum = 0.0;
        for p in points {
            let dist = p.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let w = 1.0 / dist.max(cfg.smoothing);
            wsum += w;
            for (nj, pj) in next.iter_mut().zip(p) {
                *nj += w * pj;
            }
        }
        next.iter_mut().for_each(|v| *v /= wsum);
        let moved = next.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        std::mem::swap(&mut z, &mut next);
        if moved <= cfg.tolerance {
            return Ok(WeiszfeldResult { point: z, iterations: it, converged: true });
        }
    }
    Ok(WeiszfeldResult { point: z, iterations: cfg.max_iters, converged: false })
}

/// Enforces that no Byzantine message is produced before every honest
/// message of the round exists.
#[derive(Debug, Default)]
pub struct PhaseGate {
    expected_honest: usize,
    honest_done: Option<usize>,
}

impl PhaseGate {
    pub fn new(expected_honest: usize) -> Self {
        PhaseGate { expected_honest, honest_done: None }
    }

    pub fn finish_honest(&mut self, produced: usize) {
        self.honest_done = Some(produced);
    }

    pub fn open_byzantine(&self) -> Result<()> {
        match self.honest_done {
            Some(n) if n == self.expected_honest => Ok(()),
            Some(n) => Err(Error::Consistency(format!(
                "Byzantine phase opened after {n} of {} honest updates",
                self.expected_honest
            ))),
            None => Err(Error::Consistency("Byzantine phase opened before the honest phase".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub metrics: Vec<RoundMetrics>,
    #[serde(skip)]
    pub final_params: ModelParams,
    pub byzantine_workers: Vec<usize>,
    pub counts: OperationCounts,
    pub gradient_evals_total: usize,
    pub power_violations: usize,
    pub rejected_rounds: usize,
    pub weiszfeld_unconverged: usize,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.test_accuracy)
    }
}

struct Setup<'a> {
    cfg: &'a ExperimentConfig,
    train: &'a Dataset,
    flipped: Option<Dataset>,
    partition: Partition,
    sets: Vec<Vec<usize>>,
    roles: Vec<WorkerRole>,
    mimic_target: Option<usize>,
    root: StreamKey,
}

impl Setup<'_> {
    fn honest_ids(&self) -> Vec<usize> {
        (0..self.roles.len()).filter(|&k| self.roles[k].is_honest()).collect()
    }
}

/// Outcome of one round's aggregation.
struct Decoded {
    direction: SignVector,
    rho: Option<f64>,
    min_gain: Option<f64>,
    gradient_evals: usize,
}

pub fn run_hierarchical(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, opts: RunOptions) -> Result<RunResult> {
    let cfg = ExperimentConfig { scheme: Scheme::Hierarchical, ..cfg.clone() };
    run_experiment(&cfg, train, test, opts)
}

pub fn run_naive_signsgd(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, opts: RunOptions) -> Result<RunResult> {
    let cfg = ExperimentConfig { scheme: Scheme::NaiveSignsgd, ..cfg.clone() };
    run_experiment(&cfg, train, test, opts)
}

pub fn run_noise_free(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, opts: RunOptions) -> Result<RunResult> {
    let cfg = ExperimentConfig { scheme: Scheme::HierarchicalNoiseFree, ..cfg.clone() };
    run_experiment(&cfg, train, test, opts)
}

pub fn run_digital_gm(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, opts: RunOptions) -> Result<RunResult> {
    let cfg = ExperimentConfig { scheme: Scheme::DigitalGm, ..cfg.clone() };
    run_experiment(&cfg, train, test, opts)
}

/// Run `cfg.scheme` for `cfg.rounds` rounds.
pub fn run_experiment(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, opts: RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    if opts.eval_stride == 0 {
        return Err(Error::Config("eval stride must be at least 1".into()));
    }
    if opts.threads <= 1 {
        return run_inner(cfg, train, test, opts);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(cfg, train, test, opts))
}

fn run_inner(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, opts: RunOptions) -> Result<RunResult> {
    if train.dim() != test.dim() || train.classes() != test.classes() {
        return Err(Error::Consistency("train and test sets differ in shape".into()));
    }
    let root = StreamKey::new(cfg.seed);
    let shape = ModelShape::new(cfg.model, train.dim(), train.classes())?;
    let mut params = ModelParams::init(shape, root.derive("init", &[]));
    let dim = params.dim();
    let partition = partition_indices(train.len(), cfg.k, root.derive("partition", &[]))?;
    if cfg.batch_size > partition.subset_size() {
        return Err(Error::Config(format!(
            "batch size {} exceeds subset size {}",
            cfg.batch_size,
            partition.subset_size()
        )));
    }
    let alloc = allocation_from_stream(cfg.k, cfg.effective_p(), root.derive("allocation", &[]))?;
    let roles = assign_roles(cfg.k, cfg.c, cfg.attack, root.derive("roles", &[]));
    let mimic_target = match cfg.attack {
        Some(AttackSpec::Mimic { target }) if byzantine_count(cfg.k, cfg.c) > 0 => Some(resolve_mimic_target(&roles, target)?),
        _ => None,
    };
    let flipped = matches!(cfg.attack, Some(AttackSpec::LabelFlip)).then(|| label_flip_view(train));
    let setup = Setup {
        cfg,
        train,
        flipped,
        partition,
        sets: assigned_sets(&alloc),
        roles,
        mimic_target,
        root,
    };
    let noise_power = cfg.noise_power(dim);
    let max_power = dim as f64;
    let counts = match cfg.scheme {
        Scheme::DigitalGm => operation_counts("digital_gm", cfg.k, 0.0, 0, cfg.weiszfeld.max_iters)?,
        _ => operation_counts("hierarchical", cfg.k, cfg.effective_p(), 0, 0)?,
    };

    let started = Instant::now();
    let mut metrics = Vec::new();
    let (mut evals_total, mut violations, mut rejected, mut unconverged) = (0usize, 0usize, 0usize, 0usize);
    for t in 0..cfg.rounds {
        let evaluate = t % opts.eval_stride == 0 || t + 1 == cfg.rounds;
        let needs_truth = evaluate || matches!(cfg.attack, Some(AttackSpec::OracleSignFlip));
        let truth = if needs_truth { Some(full_gradient(&params, train)?) } else { None };

        let decoded = match cfg.scheme {
            Scheme::DigitalGm => {
                let (dir, evals, converged) = digital_gm_round(&setup, &params, t, truth.as_ref())?;
                unconverged += usize::from(!converged);
                Some(Decoded { direction: dir, rho: None, min_gain: None, gradient_evals: evals })
            }
            _ => {
                let (messages, evals) = vote_messages(&setup, &params, t, truth.as_ref())?;
                let h = draw_channel(cfg.k, &mut root.derive("fading", &[t as u64]).rng());
                match ChannelRound::design(h, max_power, dim, noise_power, cfg.h_min) {
                    Ok(round) => {
                        let amplitude: Vec<f64> = setup
                            .roles
                            .iter()
                            .map(|r| if r.is_honest() { 1.0 } else { cfg.byzantine_power_scale })
                            .collect();
                        violations += count_power_violations(&messages, &amplitude, &round)?;
                        let mut noise = root.derive("noise", &[t as u64]).rng();
                        let r = aggregate_scaled(&messages, &amplitude, &round, &mut noise)?;
                        Some(Decoded {
                            direction: global_vote(&r),
                            rho: Some(round.rho),
                            min_gain: Some(round.min_gain()),
                            gradient_evals: evals,
                        })
                    }
                    Err(Error::DegenerateChannel(_)) => {
                        rejected += 1;
                        evals_total += evals;
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        let (sign_error_rate, rho, min_gain, evals) = match decoded {
            Some(d) => {
                let err = truth.as_ref().map_or(f64::NAN, |g| d.direction.mismatch_rate(&sign_quantize(g)));
                params = sgd_step(&params, &d.direction, cfg.eta)?;
                evals_total += d.gradient_evals;
                (err, d.rho, d.min_gain, d.gradient_evals)
            }
            // rejected round: model unchanged, nothing decoded
            None => (f64::NAN, None, None, 0),
        };
        if evaluate {
            metrics.push(RoundMetrics {
                round: t,
                train_loss: full_loss(&params, train)?,
                test_accuracy: accuracy(&params, test),
                sign_error_rate,
                rho,
                min_channel_gain: min_gain,
                wall_time_s: opts.wall_clock.then(|| started.elapsed().as_secs_f64()),
                gradient_evals: evals,
            });
        }
    }
    Ok(RunResult {
        config: cfg.clone(),
        metrics,
        final_params: params,
        byzantine_workers: (0..cfg.k).filter(|&k| !setup.roles[k].is_honest()).collect(),
        counts,
        gradient_evals_total: evals_total,
        power_violations: violations,
        rejected_rounds: rejected,
        weiszfeld_unconverged: unconverged,
    })
}

fn count_power_violations(messages: &[SignVector], amplitude: &[f64], round: &ChannelRound) -> Result<usize> {
    let mut n = 0;
    for (k, m) in messages.iter().enumerate() {
        if !round.participating[k] {
            continue;
        }
        let x = precode(m, round.h[k], round.rho * amplitude[k])?;
        if transmit_energy(&x) > round.max_power * (1.0 + POWER_TOLERANCE) {
            n += 1;
        }
    }
    Ok(n)
}

/// Honest phase then Byzantine phase; returns all K messages in worker order
/// and the number of mini-batch gradients evaluated.
fn vote_messages(
    s: &Setup<'_>,
    params: &ModelParams,
    t: usize,
    truth: Option<&GradientVector>,
) -> Result<(Vec<SignVector>, usize)> {
    let cfg = s.cfg;
    let honest_ids = s.honest_ids();
    let mut gate = PhaseGate::new(honest_ids.len());
    let honest: Vec<LocalUpdate> = honest_ids
        .par_iter()
        .map(|&k| honest_update(params, s.train, &s.partition, &s.sets[k], cfg.batch_size, k, t, s.root))
        .collect::<Result<_>>()?;
    gate.finish_honest(honest.len());
    gate.open_byzantine()?;

    let mut slots: Vec<Option<LocalUpdate>> = vec![None; cfg.k];
    for up in honest {
        let k = up.worker;
        slots[k] = Some(up);
    }
    let honest_refs: Vec<&SignVector> = slots.iter().flatten().map(|u| &u.message).collect();
    let byz_ids: Vec<usize> = (0..cfg.k).filter(|&k| !s.roles[k].is_honest()).collect();
    let byz: Vec<LocalUpdate> = byz_ids
        .par_iter()
        .map(|&k| {
            let WorkerRole::Byzantine(attack) = s.roles[k] else { unreachable!() };
            match attack {
                AttackSpec::LabelFlip => {
                    let flipped = s.flipped.as_ref().expect("flipped view prepared for label_flip");
                    honest_update(params, flipped, &s.partition, &s.sets[k], cfg.batch_size, k, t, s.root)
                }
                AttackSpec::Mimic { .. } => {
                    let target = s.mimic_target.expect("mimic target resolved");
                    let src = slots[target].as_ref().expect("mimic target is honest");
                    Ok(mimic_update(src, k))
                }
                AttackSpec::Directional => Ok(directional_update(params.dim(), k, t)),
                AttackSpec::Omniscient => omniscient_update(&honest_refs, k, t),
                AttackSpec::OracleSignFlip => {
                    let g = truth.expect("true gradient computed for oracle_sign_flip");
                    Ok(oracle_sign_flip_update(g, k, t))
                }
            }
        })
        .collect::<Result<_>>()?;
    for up in byz {
        let k = up.worker;
        slots[k] = Some(up);
    }
    let evals = slots.iter().flatten().map(|u| u.gradient_evals).sum();
    let messages = slots.into_iter().map(|u| u.expect("every worker produced a message").message).collect();
    Ok((messages, evals))
}

/// Real-valued message of worker `k` for the digital baseline: one mini-batch
/// gradient on its own subset.
fn worker_gradient(s: &Setup<'_>, ds: &Dataset, params: &ModelParams, k: usize, t: usize) -> Result<Vec<f64>> {
    let mut rng = s.root.derive("minibatch", &[k as u64, t as u64, k as u64]).rng();
    let mb = sample_minibatch(&s.partition, k, s.cfg.batch_size, &mut rng)?;
    Ok(gradient(params, ds, &mb.indices)?.0)
}

fn signs_as_reals(v: &[f64]) -> Vec<f64> {
    SignVector::from_reals(v).to_reals()
}

/// Digital GM round: honest real gradients over ideal links, Byzantine
/// vectors per attack, server takes sign of the geometric median.
fn digital_gm_round(
    s: &Setup<'_>,
    params: &ModelParams,
    t: usize,
    truth: Option<&GradientVector>,
) -> Result<(SignVector, usize, bool)> {
    let cfg = s.cfg;
    let honest_ids = s.honest_ids();
    let mut gate = PhaseGate::new(honest_ids.len());
    let honest: Vec<(usize, Vec<f64>)> = honest_ids
        .par_iter()
        .map(|&k| Ok((k, worker_gradient(s, s.train, params, k, t)?)))
        .collect::<Result<_>>()?;
    gate.finish_honest(honest.len());
    gate.open_byzantine()?;

    let d = params.dim();
    let mut honest_sum = vec![0.0; d];
    for (_, g) in &honest {
        for (a, b) in honest_sum.iter_mut().zip(g) {
            *a += b;
        }
    }
    let mut vectors: Vec<Option<Vec<f64>>> = vec![None; cfg.k];
    let mut evals = honest.len();
    for (k, g) in honest {
        vectors[k] = Some(g);
    }
    for k in 0..cfg.k {
        let WorkerRole::Byzantine(attack) = s.roles[k] else { continue };
        let v = match attack {
            AttackSpec::LabelFlip => {
                evals += 1;
                worker_gradient(s, s.flipped.as_ref().expect("flipped view"), params, k, t)?
            }
            AttackSpec::Mimic { .. } => vectors[s.mimic_target.expect("mimic target")].clone().expect("honest target"),
            AttackSpec::Directional => vec![1.0; d],
            AttackSpec::Omniscient => signs_as_reals(&honest_sum).iter().map(|v| -v).collect(),
            AttackSpec::OracleSignFlip => {
                let g = truth.expect("true gradient");
                signs_as_reals(&g.0).iter().map(|v| -v).collect()
            }
        };
        vectors[k] = Some(v);
    }
    let points: Vec<Vec<f64>> = vectors.into_iter().map(|v| v.expect("every worker sent a vector")).collect();
    let gm = geometric_median(&points, &cfg.weiszfeld)?;
    Ok((SignVector::from_reals(&gm.point), evals, gm.converged))
}

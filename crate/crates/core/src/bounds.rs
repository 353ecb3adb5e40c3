//! Closed-form error and convergence bounds, a Gaussian gradient oracle, and
//! Monte Carlo harnesses that check each bound empirically.
//!
//! All bounds are per coordinate, so the harnesses simulate scalar (d = 1)
//! trials.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial as BinomialPmf, Discrete};
use statrs::function::erf::erfc;

use crate::channel::{draw_channel, snr_to_noise};
use crate::data::Dataset;
use crate::error::{arg, Error, Result};
use crate::learn::{full_gradient, sample_gradient, sign_of, ModelParams};
use crate::rng::{StreamKey, StreamRng};
use crate::worker::byzantine_count;

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;
/// Acceptance margin in Monte Carlo standard errors.
pub const SE_MARGIN: f64 = 3.0;
/// Default number of independent shards a Monte Carlo run is split into.
pub const DEFAULT_SHARDS: usize = 16;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Outcome of evaluating one closed-form bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: &'static str,
    pub value: f64,
    /// Preconditions of the bound hold.
    pub valid: bool,
    /// The value exceeds 1 and says nothing.
    pub vacuous: bool,
    pub diagnostic: Option<String>,
    pub inputs: Vec<(&'static str, f64)>,
}

impl BoundReport {
    fn new(name: &'static str, value: f64, valid: bool, inputs: Vec<(&'static str, f64)>) -> Self {
        BoundReport { name, value, valid, vacuous: !(value <= 1.0), diagnostic: None, inputs }
    }

    /// Whether this report certifies an error of at most `eps`.
    pub fn within(&self, eps: f64) -> bool {
        self.valid && self.value <= eps
    }
}

/// `J = √A·|g|/σ`.
pub fn gsnr(g: f64, sigma: f64, batch: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return arg(format!("sigma must be positive, got {sigma}"));
    }
    if batch == 0 {
        return arg("batch size must be at least 1");
    }
    Ok((batch as f64).sqrt() * g.abs() / sigma)
}

/// Error probability of one sign-quantized stochastic gradient.
pub fn lemma1_bound(j: f64) -> f64 {
    let knee = 2.0 / 3f64.sqrt();
    if j >= knee {
        2.0 / (9.0 * j * j)
    } else {
        0.5 - j / (2.0 * 3f64.sqrt())
    }
}

/// Local vote error over `s` ballots, `1/(J√s)`. Infinite when `J = 0`.
pub fn prop1_bound(j: f64, s: usize) -> BoundReport {
    let value = if j > 0.0 { 1.0 / (j * (s as f64).sqrt()) } else { f64::INFINITY };
    BoundReport::new("prop1", value, j >= 0.0 && s >= 1, vec![("J", j), ("s", s as f64)])
}

/// Honest worker error under random allocation, `1/(J√(Kp))`, valid for
/// `p ∈ (4/(J²K), 1]`.
pub fn thm1_bound(j: f64, k: usize, p: f64) -> Result<BoundReport> {
    if !(p > 0.0 && p <= 1.0) {
        return arg(format!("p must lie in (0, 1], got {p}"));
    }
    if k == 0 {
        return arg("K must be at least 1");
    }
    let kp = k as f64 * p;
    let value = if j > 0.0 { 1.0 / (j * kp.sqrt()) } else { f64::INFINITY };
    let threshold = 4.0 / (j * j * k as f64);
    let valid = p > threshold;
    let mut r = BoundReport::new("thm1", value, valid, vec![("J", j), ("K", k as f64), ("p", p)]);
    if !valid {
        r.diagnostic = Some(format!("p = {p} is not above 4/(J²K) = {threshold}"));
    }
    Ok(r)
}

/// Global decoding error `½√((1−c)/K) + (1/(Kρ))√(N0/2)`; valid when
/// `(1−c)(1−q) > 1/2` for the honest error `q`.
pub fn thm2_bound(c: f64, k: usize, noise_power: f64, rho: f64, q: f64) -> Result<BoundReport> {
    if !(rho > 0.0) {
        return arg(format!("rho must be positive, got {rho}"));
    }
    if !(0.0..1.0).contains(&c) || k == 0 || !(noise_power >= 0.0) {
        return arg("need 0 <= c < 1, K >= 1, N0 >= 0");
    }
    let value = thm2_value(c, k, noise_power, rho);
    let margin = (1.0 - c) * (1.0 - q);
    let valid = margin > 0.5;
    let mut r = BoundReport::new(
        "thm2",
        value,
        valid,
        vec![("c", c), ("K", k as f64), ("N0", noise_power), ("rho", rho), ("q", q)],
    );
    if !valid {
        r.diagnostic = Some(format!("(1-c)(1-q) = {margin} is not above 1/2"));
    }
    Ok(r)
}

fn thm2_value(c: f64, k: usize, noise_power: f64, rho: f64) -> f64 {
    let k = k as f64;
    0.5 * ((1.0 - c) / k).sqrt() + (noise_power / 2.0).sqrt() / (k * rho)
}

/// Inputs to the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInputs {
    pub rounds: usize,
    /// ‖L‖₁, the summed per-coordinate smoothness constants.
    pub l1: f64,
    pub f0: f64,
    pub f_star: f64,
    pub c: f64,
    pub k: usize,
    pub noise_power: f64,
    pub rho_min: f64,
}

/// Averaged expected gradient norm after T rounds,
/// `(1/√T)(√L1/Δ)(F0 − F* + 1/(2T))` with
/// `Δ = 1 − √((1−c)/K) − √2·√N0/(K ρ_min)`; valid iff `Δ > 0`.
pub fn thm3_bound(x: &ConvergenceInputs) -> Result<BoundReport> {
    if x.rounds == 0 || !(x.l1 > 0.0) || !(x.f0 >= x.f_star) || !(x.rho_min > 0.0) || x.k == 0 {
        return arg("need T >= 1, L1 > 0, F0 >= F*, rho_min > 0, K >= 1");
    }
    let k = x.k as f64;
    let t = x.rounds as f64;
    let delta = 1.0 - ((1.0 - x.c) / k).sqrt() - std::f64::consts::SQRT_2 * x.noise_power.sqrt() / (k * x.rho_min);
    let valid = delta > 0.0;
    let value = if valid {
        (1.0 / t.sqrt()) * (x.l1.sqrt() / delta) * (x.f0 - x.f_star + 1.0 / (2.0 * t))
    } else {
        f64::INFINITY
    };
    let mut r = BoundReport {
        name: "thm3",
        value,
        valid,
        // a gradient-norm bound, not a probability
        vacuous: false,
        diagnostic: None,
        inputs: vec![
            ("T", t),
            ("L1", x.l1),
            ("F0", x.f0),
            ("Fstar", x.f_star),
            ("c", x.c),
            ("K", k),
            ("N0", x.noise_power),
            ("rho_min", x.rho_min),
            ("delta", delta),
        ],
    };
    if !valid {
        let needed = (2.0 * x.noise_power).sqrt() / (k * (1.0 - ((1.0 - x.c) / k).sqrt()));
        r.diagnostic = Some(format!(
            "straggler-dominated: delta = {delta}, rho_min = {} but needs at least {needed}",
            x.rho_min
        ));
    }
    Ok(r)
}

/// Scalar stochastic gradient `N(g, σ²/A)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianGradOracle {
    pub g: f64,
    pub sigma: f64,
    pub batch: usize,
}

impl GaussianGradOracle {
    pub fn new(g: f64, sigma: f64, batch: usize) -> Result<Self> {
        if !(sigma > 0.0) || batch == 0 || !g.is_finite() {
            return arg("oracle needs finite g, sigma > 0, A >= 1");
        }
        Ok(GaussianGradOracle { g, sigma, batch })
    }

    /// Oracle with GSNR `j`, `σ = A = 1`. The gradient is negative so that a
    /// tied vote (decoded as +1) counts as an error.
    pub fn with_gsnr(j: f64) -> Result<Self> {
        Self::new(-j, 1.0, 1)
    }

    pub fn gsnr(&self) -> f64 {
        (self.batch as f64).sqrt() * self.g.abs() / self.sigma
    }

    pub fn std_dev(&self) -> f64 {
        self.sigma / (self.batch as f64).sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.g + self.std_dev() * z
    }

    pub fn true_sign(&self) -> i8 {
        sign_of(self.g)
    }

    /// One local vote over `s` fresh ballots (tie → +1).
    pub fn vote<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> i8 {
        let tally: i64 = (0..s).map(|_| sign_of(self.sample(rng)) as i64).sum();
        if tally >= 0 {
            1
        } else {
            -1
        }
    }

    /// Exact probability a single ballot has the wrong sign.
    pub fn ballot_error(&self) -> f64 {
        phi(-self.gsnr())
    }

    /// Exact local vote error over `s` ballots, including the tie rule.
    pub fn exact_local_error(&self, s: usize) -> f64 {
        let e = self.ballot_error();
        let b = BinomialPmf::new(e, s as u64).expect("valid binomial");
        // wrong ballots w; the vote errs when the wrong side wins or ties
        // against a negative gradient.
        (0..=s as u64)
            .filter(|&w| {
                let w = w as i64;
                let right = s as i64 - w;
                if self.g < 0.0 {
                    w >= right
                } else {
                    w > right
                }
            })
            .map(|w| b.pmf(w))
            .sum()
    }

    /// Exact honest-worker error with `s = 1 + Binomial(K−1, p)` ballots.
    pub fn exact_theorem1_error(&self, k: usize, p: f64) -> f64 {
        if k <= 1 || p == 0.0 {
            return self.exact_local_error(1);
        }
        let n = BinomialPmf::new(p, (k - 1) as u64).expect("valid binomial");
        (0..k as u64).map(|m| n.pmf(m) * self.exact_local_error(1 + m as usize)).sum()
    }
}

/// Error frequency with a Wilson 99% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub errors: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Binomial standard error `√(r(1−r)/n)`.
    pub se: f64,
}

impl McEstimate {
    pub fn from_counts(errors: u64, trials: u64) -> Self {
        let n = trials as f64;
        let r = errors as f64 / n;
        let z2 = Z99 * Z99;
        let denom = 1.0 + z2 / n;
        let center = (r + z2 / (2.0 * n)) / denom;
        let half = Z99 / denom * (r * (1.0 - r) / n + z2 / (4.0 * n * n)).sqrt();
        McEstimate {
            errors,
            trials,
            rate: r,
            ci_low: (center - half).max(0.0),
            ci_high: (center + half).min(1.0),
            se: (r * (1.0 - r) / n).sqrt(),
        }
    }

    /// `rate ≤ bound + 3·SE`.
    pub fn passes(&self, bound: f64) -> bool {
        self.rate <= bound + SE_MARGIN * self.se
    }
}

/// Monte Carlo execution parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McPlan {
    pub trials: u64,
    pub shards: usize,
    pub key: StreamKey,
}

impl McPlan {
    pub const MIN_TRIALS: u64 = 10_000;

    pub fn new(trials: u64, key: StreamKey) -> Result<Self> {
        if trials < Self::MIN_TRIALS {
            return arg(format!("at least {} trials required, got {trials}", Self::MIN_TRIALS));
        }
        Ok(McPlan { trials, shards: DEFAULT_SHARDS, key })
    }

    /// Run `trial` over all trials, sharded; returns `(errors, Σ extra)` where
    /// each trial reports `(is_error, extra)`.
    fn run<F>(&self, tag: &str, trial: F) -> (u64, f64)
    where
        F: Fn(&mut StreamRng) -> (bool, f64) + Sync,
    {
        let shards = self.shards.max(1) as u64;
        let (base, rem) = (self.trials / shards, self.trials % shards);
        let parts: Vec<(u64, f64)> = (0..shards)
            .into_par_iter()
            .map(|sh| {
                let n = base + u64::from(sh < rem);
                let mut rng = self.key.derive(tag, &[sh]).rng();
                let (mut errs, mut extra) = (0u64, 0.0);
                for _ in 0..n {
                    let (e, x) = trial(&mut rng);
                    errs += u64::from(e);
                    extra += x;
                }
                (errs, extra)
            })
            .collect();
        // merged in shard order so the float sum is fixed
        parts.into_iter().fold((0, 0.0), |(a, b), (e, x)| (a + e, b + x))
    }
}

/// Empirical local vote error over `s` ballots.
pub fn mc_local_error(oracle: &GaussianGradOracle, s: usize, plan: &McPlan) -> Result<McEstimate> {
    if s == 0 {
        return arg("a vote needs at least one ballot");
    }
    let truth = oracle.true_sign();
    let (errs, _) = plan.run("mc-local", |rng| (oracle.vote(s, rng) != truth, 0.0));
    Ok(McEstimate::from_counts(errs, plan.trials))
}

/// Empirical honest-worker error with `s = 1 + n`, `n ~ Binomial(K−1, p)`
/// drawn per trial.
pub fn mc_theorem1_error(oracle: &GaussianGradOracle, k: usize, p: f64, plan: &McPlan) -> Result<McEstimate> {
    if k == 0 || !(0.0..=1.0).contains(&p) {
        return arg("need K >= 1 and p in [0, 1]");
    }
    let binom = Binomial::new((k - 1) as u64, p).map_err(|e| Error::Argument(e.to_string()))?;
    let truth = oracle.true_sign();
    let (errs, _) = plan.run("mc-theorem1", |rng| {
        let s = 1 + binom.sample(rng) as usize;
        (oracle.vote(s, rng) != truth, 0.0)
    });
    Ok(McEstimate::from_counts(errs, plan.trials))
}

/// How ρ is set in each global-vote trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoMode {
    /// Fresh CN(0,1) fading per trial; `ρ = √(P0/d)·min_k |h_k|` with `P0/d = 1`.
    Fading,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalSetup {
    pub k: usize,
    pub c: f64,
    pub p: f64,
    /// `None` is a noiseless channel.
    pub snr_db: Option<f64>,
    pub rho: RhoMode,
}

impl GlobalSetup {
    pub fn noise_power(&self) -> f64 {
        self.snr_db.map_or(0.0, |s| snr_to_noise(s, 1.0, 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GlobalEstimate {
    pub estimate: McEstimate,
    /// Trial average of the closed-form bound at each trial's ρ.
    pub mean_bound: f64,
    /// Exact honest-worker error `q` used for the validity check.
    pub q: f64,
}

/// Empirical global decoding error under the worst-case collusion attack
/// (every Byzantine worker sends `−sign(g)`), with the trial-averaged bound.
/// Fails with [`Error::InvalidRegime`] when `(1−c)(1−q) ≤ 1/2`.
pub fn mc_global_error(oracle: &GaussianGradOracle, setup: &GlobalSetup, plan: &McPlan) -> Result<GlobalEstimate> {
    let q = oracle.exact_theorem1_error(setup.k, setup.p);
    if (1.0 - setup.c) * (1.0 - q) <= 0.5 {
        return Err(Error::InvalidRegime(format!(
            "(1-c)(1-q) = {} with c = {}, q = {q}",
            (1.0 - setup.c) * (1.0 - q),
            setup.c
        )));
    }
    mc_global_error_with(oracle, setup, plan, |rho| thm2_value(setup.c, setup.k, setup.noise_power(), rho))
}

/// As [`mc_global_error`] without the regime check and with a caller-supplied
/// bound as a function of ρ.
pub fn mc_global_error_with<B>(
    oracle: &GaussianGradOracle,
    setup: &GlobalSetup,
    plan: &McPlan,
    bound: B,
) -> Result<GlobalEstimate>
where
    B: Fn(f64) -> f64 + Sync,
{
    let GlobalSetup { k, c, p, .. } = *setup;
    if k == 0 || !(0.0..1.0).contains(&c) || !(0.0..=1.0).contains(&p) {
        return arg("need K >= 1, 0 <= c < 1, p in [0, 1]");
    }
    if let RhoMode::Fixed(r) = setup.rho {
        if !(r > 0.0) {
            return arg("fixed rho must be positive");
        }
    }
    let byz = byzantine_count(k, c);
    let honest = k - byz;
    let binom = Binomial::new((k - 1) as u64, p).map_err(|e| Error::Argument(e.to_string()))?;
    let truth = oracle.true_sign();
    let sigma = (setup.noise_power() / 2.0).sqrt();
    let (errs, bound_sum) = plan.run("mc-global", |rng| {
        let mut sum: i64 = -(truth as i64) * byz as i64;
        for _ in 0..honest {
            let s = 1 + binom.sample(rng) as usize;
            sum += oracle.vote(s, rng) as i64;
        }
        let rho = match setup.rho {
            RhoMode::Fixed(r) => r,
            RhoMode::Fading => draw_channel(k, rng).iter().map(|h| h.norm()).fold(f64::INFINITY, f64::min),
        };
        let mut r = rho * sum as f64;
        if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            r += sigma * z;
        }
        (sign_of(r) != truth, bound(rho))
    });
    Ok(GlobalEstimate {
        estimate: McEstimate::from_counts(errs, plan.trials),
        mean_bound: bound_sum / plan.trials as f64,
        q: oracle.exact_theorem1_error(k, p),
    })
}

/// Bound formulas used by the validation suite; replaceable so the harness
/// can be checked against a deliberately wrong formula.
#[derive(Clone, Copy)]
pub struct BoundFormulas {
    pub prop1: fn(f64, usize) -> f64,
    pub thm1: fn(f64, usize, f64) -> f64,
    /// `(c, K, N0, ρ)`.
    pub thm2: fn(f64, usize, f64, f64) -> f64,
}

impl Default for BoundFormulas {
    fn default() -> Self {
        BoundFormulas {
            prop1: |j, s| prop1_bound(j, s).value,
            thm1: |j, k, p| 1.0 / (j * (k as f64 * p).sqrt()),
            thm2: thm2_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Grid {
    pub j: Vec<f64>,
    pub s: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thm1Grid {
    pub k: Vec<usize>,
    pub p: Vec<f64>,
    pub j: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thm2Grid {
    pub k: Vec<usize>,
    pub c: Vec<f64>,
    pub p: Vec<f64>,
    pub j: Vec<f64>,
    /// `null` entries are noiseless points.
    pub snr_db: Vec<Option<f64>>,
}

fn default_trials() -> u64 {
    100_000
}

fn default_shards() -> usize {
    DEFAULT_SHARDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSuiteConfig {
    #[serde(default = "default_trials")]
    pub trials: u64,
    pub seed: u64,
    #[serde(default = "default_shards")]
    pub shards: usize,
    #[serde(default)]
    pub prop1: Option<Prop1Grid>,
    #[serde(default)]
    pub thm1: Option<Thm1Grid>,
    #[serde(default)]
    pub thm2: Option<Thm2Grid>,
}

impl BoundSuiteConfig {
    /// Grids used by acceptance: J ∈ {0.5, 1, 2, 4} × s ∈ {1, 3, 5, 9};
    /// K = 50, p ∈ {0.05, 0.1, 0.3}, J ∈ {1, 2}; K = 50, c ∈ {0, 0.2, 0.4},
    /// p = 0.1, J = 2, SNR ∈ {0, 10, 20} dB and noiseless.
    pub fn standard(seed: u64) -> Self {
        BoundSuiteConfig {
            trials: default_trials(),
            seed,
            shards: DEFAULT_SHARDS,
            prop1: Some(Prop1Grid { j: vec![0.5, 1.0, 2.0, 4.0], s: vec![1, 3, 5, 9] }),
            thm1: Some(Thm1Grid { k: vec![50], p: vec![0.05, 0.1, 0.3], j: vec![1.0, 2.0] }),
            thm2: Some(Thm2Grid {
                k: vec![50],
                c: vec![0.0, 0.2, 0.4],
                p: vec![0.1],
                j: vec![2.0],
                snr_db: vec![Some(0.0), Some(10.0), Some(20.0), None],
            }),
        }
    }

    pub fn point_count(&self) -> usize {
        let a = self.prop1.as_ref().map_or(0, |g| g.j.len() * g.s.len());
        let b = self.thm1.as_ref().map_or(0, |g| g.k.len() * g.p.len() * g.j.len());
        let c = self
            .thm2
            .as_ref()
            .map_or(0, |g| g.k.len() * g.c.len() * g.p.len() * g.j.len() * g.snr_db.len());
        a + b + c
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_count() == 0 {
            return Err(Error::Config("bound suite grid is empty".into()));
        }
        if self.trials < McPlan::MIN_TRIALS {
            return Err(Error::Config(format!("trials must be at least {}", McPlan::MIN_TRIALS)));
        }
        if self.shards == 0 {
            return Err(Error::Config("shards must be at least 1".into()));
        }
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if let Some(g) = &self.prop1 {
            if !positive(&g.j) || g.s.contains(&0) {
                return Err(Error::Config("prop1 grid needs J > 0 and s >= 1".into()));
            }
        }
        if let Some(g) = &self.thm1 {
            if !positive(&g.j) || g.k.contains(&0) || g.p.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::Config("thm1 grid needs J > 0, K >= 1, p in (0, 1]".into()));
            }
        }
        if let Some(g) = &self.thm2 {
            if !positive(&g.j)
                || g.k.contains(&0)
                || g.p.iter().any(|&p| !(0.0..=1.0).contains(&p))
                || g.c.iter().any(|&c| !(0.0..1.0).contains(&c))
                || g.snr_db.iter().flatten().any(|s| !s.is_finite())
            {
                return Err(Error::Config("thm2 grid needs J > 0, K >= 1, p in [0, 1], c in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// One line of the bound-validation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub bound_name: String,
    pub params: String,
    pub empirical: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub bound: f64,
    pub valid: bool,
    /// `None` when the point was skipped as invalid.
    pub pass: Option<bool>,
}

impl BoundRow {
    fn measured(name: &str, params: String, est: &McEstimate, bound: f64) -> Self {
        BoundRow {
            bound_name: name.to_string(),
            params,
            empirical: Some(est.rate),
            ci_low: Some(est.ci_low),
            ci_high: Some(est.ci_high),
            bound,
            valid: true,
            pass: Some(est.passes(bound)),
        }
    }

    fn skipped(name: &str, params: String, bound: f64) -> Self {
        BoundRow {
            bound_name: name.to_string(),
            params,
            empirical: None,
            ci_low: None,
            ci_high: None,
            bound,
            valid: false,
            pass: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.pass == Some(false)
    }
}

fn snr_label(s: Option<f64>) -> String {
    s.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

/// A global-error grid point is checked only inside the honest-worker
/// analysis range `p > 4/(J²K)` and when `(1−c)(1−q) > 1/2` for the exact
/// honest error `q`.
pub fn thm2_point_valid(j: f64, k: usize, c: f64, p: f64, q: f64) -> bool {
    p > 4.0 / (j * j * k as f64) && (1.0 - c) * (1.0 - q) > 0.5
}

/// Run every grid point; the result is independent of the thread count.
pub fn run_bound_suite(cfg: &BoundSuiteConfig, formulas: &BoundFormulas) -> Result<Vec<BoundRow>> {
    cfg.validate()?;
    let root = StreamKey::new(cfg.seed);
    let plan = |tag: &str, ids: &[u64]| McPlan { trials: cfg.trials, shards: cfg.shards, key: root.derive(tag, ids) };
    let mut rows = Vec::new();
    if let Some(g) = &cfg.prop1 {
        for (a, &j) in g.j.iter().enumerate() {
            for (b, &s) in g.s.iter().enumerate() {
                let oracle = GaussianGradOracle::with_gsnr(j)?;
                let est = mc_local_error(&oracle, s, &plan("prop1", &[a as u64, b as u64]))?;
                rows.push(BoundRow::measured("prop1", format!("J={j};s={s}"), &est, (formulas.prop1)(j, s)));
            }
        }
    }
    if let Some(g) = &cfg.thm1 {
        for (a, &k) in g.k.iter().enumerate() {
            for (b, &p) in g.p.iter().enumerate() {
                for (e, &j) in g.j.iter().enumerate() {
                    let params = format!("K={k};p={p};J={j}");
                    let report = thm1_bound(j, k, p)?;
                    let bound = (formulas.thm1)(j, k, p);
                    if !report.valid {
                        rows.push(BoundRow::skipped("thm1", params, bound));
                        continue;
                    }
                    let oracle = GaussianGradOracle::with_gsnr(j)?;
                    let est = mc_theorem1_error(&oracle, k, p, &plan("thm1", &[a as u64, b as u64, e as u64]))?;
                    rows.push(BoundRow::measured("thm1", params, &est, bound));
                }
            }
        }
    }
    if let Some(g) = &cfg.thm2 {
        for (a, &k) in g.k.iter().enumerate() {
            for (b, &c) in g.c.iter().enumerate() {
                for (e, &p) in g.p.iter().enumerate() {
                    for (f, &j) in g.j.iter().enumerate() {
                        for (h, &snr) in g.snr_db.iter().enumerate() {
                            let params = format!("K={k};c={c};p={p};J={j};snr_db={}", snr_label(snr));
                            let oracle = GaussianGradOracle::with_gsnr(j)?;
                            let setup = GlobalSetup { k, c, p, snr_db: snr, rho: RhoMode::Fading };
                            let n0 = setup.noise_power();
                            let q = oracle.exact_theorem1_error(k, p);
                            if !thm2_point_valid(j, k, c, p, q) {
                                rows.push(BoundRow::skipped("thm2", params, (formulas.thm2)(c, k, n0, 1.0)));
                                continue;
                            }
                            let ids = [a as u64, b as u64, e as u64, f as u64, h as u64];
                            let thm2 = formulas.thm2;
                            let est = mc_global_error_with(&oracle, &setup, &plan("thm2", &ids), |rho| thm2(c, k, n0, rho))?;
                            rows.push(BoundRow::measured("thm2", params, &est.estimate, est.mean_bound));
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Per-coordinate GSNR of a model on `indices`: `√A·|ḡ_j|/σ_j`, with `σ_j` the
/// per-sample gradient standard deviation. Coordinates with zero spread
/// report infinity. Diagnostic only.
pub fn estimate_gsnr(params: &ModelParams, dataset: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<f64>> {
    if indices.len() < 2 {
        return arg("need at least two samples to estimate a spread");
    }
    let d = params.dim();
    let (mut mean, mut m2) = (vec![0.0; d], vec![0.0; d]);
    for (n, &i) in indices.iter().enumerate() {
        let g = sample_gradient(params, dataset, i)?;
        let n1 = (n + 1) as f64;
        for j in 0..d {
            let delta = g.0[j] - mean[j];
            mean[j] += delta / n1;
            m2[j] += delta * (g.0[j] - mean[j]);
        }
    }
    let n = indices.len() as f64;
    Ok((0..d)
        .map(|j| {
            let sd = (m2[j] / (n - 1.0)).sqrt();
            if sd > 0.0 {
                (batch as f64).sqrt() * mean[j].abs() / sd
            } else {
                f64::INFINITY
            }
        })
        .collect())
}

/// Approximate largest Hessian eigenvalue magnitude of the training loss by
/// power iteration on finite-difference Hessian-vector products. `d·λ` is a
/// crude, approximate stand-in for ‖L‖₁.
pub fn estimate_smoothness(params: &ModelParams, dataset: &Dataset, iters: usize, key: StreamKey) -> Result<f64> {
    let d = params.dim();
    let mut rng = key.derive("power-iteration", &[]).rng();
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps = 1e-5;
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let shifted = |sgn: f64| -> Result<Vec<f64>> {
            let vals = params.values.iter().zip(&v).map(|(w, vi)| w + sgn * eps * vi).collect();
            Ok(full_gradient(&ModelParams::from_values(params.shape, vals)?, dataset)?.0)
        };
        let (gp, gm) = (shifted(1.0)?, shifted(-1.0)?);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        lambda = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = hv;
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn gsnr_examples() {
        assert_eq!(gsnr(1.0, 1.0, 1).unwrap(), 1.0);
        assert_eq!(gsnr(1.0, 1.0, 4).unwrap(), 2.0);
        assert_eq!(gsnr(0.0, 1.0, 4).unwrap(), 0.0);
        assert!(gsnr(1.0, 0.0, 1).is_err());
        assert!(gsnr(1.0, -1.0, 1).is_err());
    }

    #[test]
    fn lemma1_examples() {
        let knee = 2.0 / 3f64.sqrt();
        assert!(close(lemma1_bound(knee), 1.0 / 6.0, 1e-15));
        assert!(close(0.5 - knee / (2.0 * 3f64.sqrt()), 1.0 / 6.0, 1e-15));
        assert_eq!(lemma1_bound(0.0), 0.5);
        assert!(close(lemma1_bound(3.0), 2.0 / 81.0, 1e-15));
        let mut prev = f64::INFINITY;
        for i in 0..=100_000 {
            let v = lemma1_bound(i as f64 * 1e-4);
            assert!(v <= prev + 1e-15 && v <= 0.5);
            prev = v;
        }
    }

    #[test]
    fn prop1_examples() {
        assert!(close(prop1_bound(2.0, 4).value, 0.25, 1e-15));
        assert!(close(prop1_bound(3.0, 1).value, 1.0 / 3.0, 1e-15));
        assert!(close(prop1_bound(1.5, 3).value / prop1_bound(1.5, 6).value, 2f64.sqrt(), 1e-12));
        assert!(prop1_bound(0.0, 3).value.is_infinite());
        assert!(prop1_bound(0.0, 3).vacuous);
        assert!(prop1_bound(0.5, 1).vacuous);
        assert!(!prop1_bound(2.0, 1).vacuous);
    }

    #[test]
    fn thm1_examples() {
        let r = thm1_bound(2.0, 50, 0.1).unwrap();
        assert!(close(r.value, 1.0 / (2.0 * 5f64.sqrt()), 1e-15));
        assert!(close(r.value, 0.223_606_797_749_979, 1e-12));
        assert!(r.valid);
        assert!(!thm1_bound(2.0, 50, 4.0 / (4.0 * 50.0)).unwrap().valid);
        assert!(close(thm1_bound(1.7, 10, 0.1).unwrap().value, prop1_bound(1.7, 1).value, 1e-15));
        assert!(thm1_bound(2.0, 50, 0.0).is_err());
        assert!(thm1_bound(2.0, 50, 1.5).is_err());
    }

    #[test]
    fn thm2_examples() {
        let r = thm2_bound(0.4, 50, 0.0, 1.0, 0.0).unwrap();
        assert!(close(r.value, 0.5 * (0.6f64 / 50.0).sqrt(), 1e-15));
        assert!(close(r.value, 0.054_772_255_750_516_6, 1e-12));
        let noisy = thm2_bound(0.0, 50, 0.1, 0.5, 0.0).unwrap().value - thm2_bound(0.0, 50, 0.0, 0.5, 0.0).unwrap().value;
        assert!(close(noisy, 0.05f64.sqrt() / 25.0, 1e-15));
        assert!(close(noisy, 0.008_944, 1e-6));
        assert!(!thm2_bound(0.5, 50, 0.0, 1.0, 0.0).unwrap().valid);
        assert!(thm2_bound(0.4, 50, 0.0, 1.0, 0.01).unwrap().valid);
        assert!(thm2_bound(0.4, 50, 0.1, 0.0, 0.0).is_err());
        assert!(thm2_bound(0.4, 50, 0.0, 1.0, 0.0).unwrap().within(0.06));
        assert!(!thm2_bound(0.4, 50, 0.0, 1.0, 0.0).unwrap().within(0.05));
    }

    fn conv(rounds: usize, k: usize, c: f64, n0: f64) -> ConvergenceInputs {
        ConvergenceInputs { rounds, l1: 4.0, f0: 2.0, f_star: 0.5, c, k, noise_power: n0, rho_min: 0.3 }
    }

    #[test]
    fn thm3_examples() {
        let r = thm3_bound(&conv(100, 50, 0.4, 0.0)).unwrap();
        let delta = r.inputs.iter().find(|(n, _)| *n == "delta").unwrap().1;
        assert!(close(delta, 1.0 - 0.012f64.sqrt(), 1e-15));
        assert!(close(delta, 0.8905, 1e-4));
        // K → ∞ limit
        let big = thm3_bound(&conv(100, 1usize << 40, 0.0, 0.0)).unwrap();
        assert!(close(big.value, (4.0f64 / 100.0).sqrt() * (1.5 + 1.0 / 200.0), 1e-5));
        // leading term halves when T quadruples
        let lead = |t: usize| {
            let x = conv(t, 50, 0.0, 0.0);
            let r = thm3_bound(&x).unwrap();
            r.value / (x.f0 - x.f_star + 1.0 / (2.0 * t as f64))
        };
        assert!(close(lead(400) / lead(100), 0.5, 1e-12));
        let bad = thm3_bound(&ConvergenceInputs { rho_min: 1e-4, ..conv(100, 50, 0.0, 1.0) }).unwrap();
        assert!(!bad.valid);
        assert!(bad.diagnostic.unwrap().contains("straggler"));
        assert!(thm3_bound(&ConvergenceInputs { f0: 0.0, ..conv(100, 50, 0.0, 0.0) }).is_err());
    }

    #[test]
    fn wilson_interval_contains_rate() {
        let e = McEstimate::from_counts(1587, 10_000);
        assert!(e.ci_low < 0.1587 && 0.1587 < e.ci_high);
        let z = McEstimate::from_counts(0, 10_000);
        assert_eq!(z.rate, 0.0);
        assert_eq!(z.ci_low, 0.0);
        assert!(z.ci_high > 0.0 && z.ci_high < 1e-3);
        assert!(z.passes(0.0));
    }

    #[test]
    fn exact_local_error_small_cases() {
        let o = GaussianGradOracle::with_gsnr(1.0).unwrap();
        let e = phi(-1.0);
        assert!(close(o.exact_local_error(1), e, 1e-15));
        // s = 2, g < 0: error unless both ballots are right
        assert!(close(o.exact_local_error(2), 1.0 - (1.0 - e) * (1.0 - e), 1e-15));
        let pos = GaussianGradOracle::new(1.0, 1.0, 1).unwrap();
        assert!(close(pos.exact_local_error(2), e * e, 1e-15));
        assert!(close(o.exact_theorem1_error(50, 0.0), e, 1e-15));
        assert!(close(o.exact_theorem1_error(50, 1.0), o.exact_local_error(50), 1e-12));
    }

    #[test]
    fn plan_requires_trials() {
        assert!(McPlan::new(9_999, StreamKey::new(1)).is_err());
        assert!(McPlan::new(10_000, StreamKey::new(1)).is_ok());
    }

    #[test]
    fn suite_rejects_empty_grid() {
        let mut cfg = BoundSuiteConfig::standard(1);
        cfg.prop1 = None;
        cfg.thm1 = None;
        cfg.thm2 = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.prop1 = Some(Prop1Grid { j: vec![], s: vec![1] });
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

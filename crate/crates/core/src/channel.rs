//! Over-the-air aggregation: block Rayleigh fading, uniform-forcing
//! precoding under a per-worker power budget, superposition with AWGN, and
//! the sign decode at the server.
//!
//! Perfect CSI at the transmitters and a noise-free downlink are assumed.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg, Error, Result};
use crate::learn::SignVector;

/// Relative slack allowed when checking the power budget, for float rounding.
pub const POWER_TOLERANCE: f64 = 1e-12;

/// One round's channel state.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRound {
    /// Fading coefficient per worker.
    pub h: Vec<Complex64>,
    /// Common received amplitude ρ.
    pub rho: f64,
    /// Noise power N0 of the complex AWGN.
    pub noise_power: f64,
    /// Per-worker maximum transmit power P0.
    pub max_power: f64,
    /// Message length d.
    pub dim: usize,
    /// Workers whose signal enters the sum; false when truncated by `h_min`.
    pub participating: Vec<bool>,
}

impl ChannelRound {
    /// Design ρ for the fading `h`. Workers with `|h_k| < h_min` sit the round
    /// out; ρ is the largest value every remaining worker can afford.
    pub fn design(
        h: Vec<Complex64>,
        max_power: f64,
        dim: usize,
        noise_power: f64,
        h_min: Option<f64>,
    ) -> Result<Self> {
        if noise_power < 0.0 || !noise_power.is_finite() {
            return arg("noise power must be finite and non-negative");
        }
        let participating: Vec<bool> = h
            .iter()
            .map(|hk| h_min.is_none_or(|t| hk.norm() >= t))
            .collect();
        let active: Vec<Complex64> = h
            .iter()
            .zip(&participating)
            .filter_map(|(hk, &on)| on.then_some(*hk))
            .collect();
        if active.is_empty() {
            return Err(Error::DegenerateChannel("no worker above the gain threshold".into()));
        }
        let rho = power_scaling(&active, max_power, dim)?;
        Ok(ChannelRound { h, rho, noise_power, max_power, dim, participating })
    }

    pub fn min_gain(&self) -> f64 {
        self.h
            .iter()
            .zip(&self.participating)
            .filter(|(_, &on)| on)
            .map(|(hk, _)| hk.norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Count of participating workers whose budget `ρ² ≤ (P0/d)|h_k|²` fails.
    pub fn power_violations(&self) -> usize {
        let per_symbol = self.max_power / self.dim as f64;
        self.h
            .iter()
            .zip(&self.participating)
            .filter(|(hk, &on)| on && self.rho * self.rho > per_symbol * hk.norm_sqr() * (1.0 + POWER_TOLERANCE))
            .count()
    }
}

/// Received, real-projected aggregate `r̂ = Re{y}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedVector(pub Vec<f64>);

/// i.i.d. CN(0, 1) coefficients: real and imaginary parts N(0, 1/2).
pub fn draw_channel<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<Complex64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..k)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(s * re, s * im)
        })
        .collect()
}

/// Largest feasible ρ: `sqrt(P0/d) · min_k |h_k|`.
pub fn power_scaling(h: &[Complex64], max_power: f64, dim: usize) -> Result<f64> {
    if h.is_empty() {
        return arg("need at least one channel coefficient");
    }
    if dim == 0 || !(max_power > 0.0) {
        return arg("power scaling needs d >= 1 and P0 > 0");
    }
    let weakest = h.iter().map(|hk| hk.norm()).fold(f64::INFINITY, f64::min);
    if weakest == 0.0 {
        return Err(Error::DegenerateChannel("zero channel gain".into()));
    }
    Ok((max_power / dim as f64).sqrt() * weakest)
}

/// Uniform-forcing transmit signal `x_k = ρ · conj(h_k)/|h_k|² · m_k`.
pub fn precode(message: &SignVector, h_k: Complex64, rho: f64) -> Result<Vec<Complex64>> {
    let gain = h_k.norm_sqr();
    if gain == 0.0 {
        return Err(Error::DegenerateChannel("cannot invert a zero channel".into()));
    }
    let scale = h_k.conj() * (rho / gain);
    Ok(message.as_slice().iter().map(|&s| scale * s as f64).collect())
}

pub fn transmit_energy(x: &[Complex64]) -> f64 {
    x.iter().map(Complex64::norm_sqr).sum()
}

/// Physical noiseless superposition `Σ_k h_k x_k`.
pub fn superpose(h: &[Complex64], signals: &[Vec<Complex64>]) -> Result<Vec<Complex64>> {
    if h.len() != signals.len() || signals.is_empty() {
        return arg("need one signal per channel coefficient");
    }
    let d = signals[0].len();
    let mut y = vec![Complex64::new(0.0, 0.0); d];
    for (hk, x) in h.iter().zip(signals) {
        if x.len() != d {
            return arg("signals differ in length");
        }
        for (acc, xj) in y.iter_mut().zip(x) {
            *acc += hk * xj;
        }
    }
    Ok(y)
}

/// `r̂(j) = ρ·Σ_k m_k(j) + η_j`, `η_j ~ N(0, N0/2)` drawn from `rng` in
/// coordinate order. Channel inversion makes every participating worker
/// arrive with amplitude exactly ρ.
pub fn aggregate<R: Rng + ?Sized>(
    messages: &[SignVector],
    round: &ChannelRound,
    rng: &mut R,
) -> Result<ReceivedVector> {
    let ones = vec![1.0; messages.len()];
    aggregate_scaled(messages, &ones, round, rng)
}

/// As [`aggregate`], with worker `k` transmitting at `amplitude[k]` times its
/// compliant signal. Non-participating workers contribute nothing.
pub fn aggregate_scaled<R: Rng + ?Sized>(
    messages: &[SignVector],
    amplitude: &[f64],
    round: &ChannelRound,
    rng: &mut R,
) -> Result<ReceivedVector> {
    if messages.len() != round.h.len() || amplitude.len() != messages.len() {
        return arg(format!(
            "{} messages for {} channel coefficients",
            messages.len(),
            round.h.len()
        ));
    }
    if let Some(m) = messages.iter().find(|m| m.len() != round.dim) {
        return arg(format!("message of length {} on a d={} channel", m.len(), round.dim));
    }
    let mut sum = vec![0.0f64; round.dim];
    for ((m, &a), &on) in messages.iter().zip(amplitude).zip(&round.participating) {
        if !on {
            continue;
        }
        for (acc, &s) in sum.iter_mut().zip(m.as_slice()) {
            *acc += a * s as f64;
        }
    }
    let sigma = (round.noise_power / 2.0).sqrt();
    let r = sum
        .into_iter()
        .map(|s| {
            let signal = round.rho * s;
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                signal + sigma * z
            } else {
                signal
            }
        })
        .collect();
    Ok(ReceivedVector(r))
}

/// Element-wise sign with `sign(0) = +1`.
pub fn global_vote(r: &ReceivedVector) -> SignVector {
    SignVector::from_reals(&r.0)
}

/// Noise power from a transmit SNR in dB, `SNR = P0/(d·N0)`.
pub fn snr_to_noise(snr_db: f64, max_power: f64, dim: usize) -> f64 {
    (max_power / dim as f64) / 10f64.powf(snr_db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sv(v: &[i8]) -> SignVector {
        SignVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn power_scaling_min_rule() {
        assert_eq!(power_scaling(&[c(2.0, 0.0)], 1.0, 1).unwrap(), 2.0);
        let rho = power_scaling(&[c(3.0, 0.0), c(0.0, 0.5), c(0.6, 0.8)], 4.0, 1).unwrap();
        assert!((rho - 1.0).abs() < 1e-15);
        assert!(matches!(
            power_scaling(&[c(1.0, 0.0), c(0.0, 0.0)], 1.0, 1),
            Err(Error::DegenerateChannel(_))
        ));
    }

    #[test]
    fn precode_identity_channel() {
        let m = sv(&[1, -1, 1]);
        let x = precode(&m, c(1.0, 0.0), 1.0).unwrap();
        assert_eq!(x, vec![c(1.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0)]);
        assert!(precode(&m, c(0.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn precode_inverts_and_respects_budget() {
        let mut rng = StreamKey::new(3).rng();
        for _ in 0..2000 {
            let h = draw_channel(4, &mut rng);
            let d = 7;
            let rho = power_scaling(&h, 2.5, d).unwrap();
            let m = SignVector::from_reals(&(0..d).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>());
            for &hk in &h {
                let x = precode(&m, hk, rho).unwrap();
                for (xj, &mj) in x.iter().zip(m.as_slice()) {
                    assert!((hk * xj - c(rho * mj as f64, 0.0)).norm() <= 1e-12);
                }
                assert!(transmit_energy(&x) <= 2.5 * (1.0 + POWER_TOLERANCE));
            }
        }
    }

    #[test]
    fn noiseless_aggregate_examples() {
        let h = vec![c(1.0, 0.0); 3];
        let mut round = ChannelRound::design(h, 1.0, 1, 0.0, None).unwrap();
        round.rho = 0.7;
        let mut rng = StreamKey::new(0).rng();
        let r = aggregate(&[sv(&[1]), sv(&[1]), sv(&[-1])], &round, &mut rng).unwrap();
        assert!((r.0[0] - 0.7).abs() < 1e-15);
        let r = aggregate(&[sv(&[1]), sv(&[-1]), sv(&[1])], &round, &mut rng).unwrap();
        assert!((r.0[0] - 0.7).abs() < 1e-15);
        let two = ChannelRound::design(vec![c(1.0, 0.0); 2], 1.0, 1, 0.0, None).unwrap();
        let r = aggregate(&[sv(&[1]), sv(&[-1])], &two, &mut rng).unwrap();
        assert_eq!(r.0[0], 0.0);
        assert_eq!(global_vote(&r).as_slice(), &[1]);
        assert!(aggregate(&[sv(&[1, 1]), sv(&[1, 1])], &two, &mut rng).is_err());
        assert!(aggregate(&[sv(&[1])], &two, &mut rng).is_err());
    }

    #[test]
    fn global_vote_tie_and_scale() {
        let r = ReceivedVector(vec![0.3, -0.1, 0.0]);
        assert_eq!(global_vote(&r).as_slice(), &[1, -1, 1]);
        let scaled = ReceivedVector(r.0.iter().map(|v| v * 17.5).collect());
        assert_eq!(global_vote(&scaled), global_vote(&r));
    }

    #[test]
    fn snr_conversion() {
        assert!((snr_to_noise(0.0, 1.0, 1) - 1.0).abs() < 1e-15);
        assert!((snr_to_noise(10.0, 1.0, 1) - 0.1).abs() < 1e-15);
        assert!((snr_to_noise(5.0, 1.0, 1) - 0.316_227_766_016_837_94).abs() < 1e-12);
        assert!((snr_to_noise(10.0, 42.0, 42) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn truncation_excludes_weak_workers() {
        let h = vec![c(0.1, 0.0), c(1.0, 0.0), c(2.0, 0.0)];
        let round = ChannelRound::design(h.clone(), 1.0, 1, 0.0, Some(0.5)).unwrap();
        assert_eq!(round.participating, vec![false, true, true]);
        assert!((round.rho - 1.0).abs() < 1e-15);
        assert_eq!(round.min_gain(), 1.0);
        let mut rng = StreamKey::new(0).rng();
        let r = aggregate(&[sv(&[-1]), sv(&[1]), sv(&[1])], &round, &mut rng).unwrap();
        assert_eq!(r.0[0], 2.0);
        assert!(ChannelRound::design(h, 1.0, 1, 0.0, Some(5.0)).is_err());
    }

    #[test]
    fn design_meets_budget_with_equality_at_straggler() {
        let mut rng = StreamKey::new(12).rng();
        let h = draw_channel(10, &mut rng);
        let round = ChannelRound::design(h, 1.0, 1, 0.1, None).unwrap();
        assert_eq!(round.power_violations(), 0);
        assert!((round.rho - round.min_gain()).abs() < 1e-15);
    }
}

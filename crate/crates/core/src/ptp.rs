//! Two-way time-stamp exchange and the per-link statistics built from it.
//!
//! One round on a link: the initiator transmits at reference time t and
//! stamps c1 on its own clock; the responder receives after the one-way
//! delay d + T_k and stamps c2, waits a fixed turnaround, stamps c3 on
//! reply; the initiator receives after d + R_k and stamps c4. T_k and R_k
//! are independent Gaussian stack delays, redrawn per round (T before R,
//! so draw sequences are reproducible for a seeded RNG).
//!
//! Everything downstream reduces quads to three quantities per link:
//! the rate ratio between the two clocks, the two-way noise variance
//! sigma^2 = Var(T) + Var(R), and a K-round average `delta_hat` whose
//! expectation is `theta_init - alpha * theta_resp` with variance
//! `alpha^2 sigma^2 / (4K)`. The symmetric-delay assumption makes the
//! deterministic d and the turnaround cancel exactly.

use crate::error::{Error, Result};
use crate::model::{TrialRng, WorldInstance};
use rand_distr::{Distribution, Normal};

/// The four clock readings of one exchange round.
///
/// For positive delays causality gives c3 >= c2 and c4 > c1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestampQuad {
    /// Initiator clock at transmit.
    pub c1: f64,
    /// Responder clock at arrival.
    pub c2: f64,
    /// Responder clock at reply transmit.
    pub c3: f64,
    /// Initiator clock at reply arrival.
    pub c4: f64,
    /// Round number within its exchange set.
    pub round_index: usize,
}

/// Per-link summary of one synchronization set of K rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    /// Stamp-scaling rate ratio (initiator rate over responder rate)
    /// applied to the responder stamps.
    pub alpha_hat: f64,
    /// Two-way noise variance estimate, ns^2.
    pub sigma2_hat: f64,
    /// Estimate of `theta_init - alpha_hat * theta_resp`, ns.
    pub delta_hat: f64,
    /// Rounds that produced `delta_hat`.
    pub k_used: usize,
    /// Variance of `delta_hat`: alpha_hat^2 * sigma2_hat / (4 k_used), ns^2.
    pub factor_var: f64,
}

/// Output of the link bring-up phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingResult {
    /// Stamp-scaling ratio for this link (initiator rate over responder
    /// rate), derived as the reciprocal of the drift-based rate estimate;
    /// the reciprocal is what cancels the shared time ramp when it
    /// multiplies raw responder stamps.
    pub alpha_hat: f64,
    /// Sample variance of the round-trip statistic, targeting
    /// Var(T) + Var(R), ns^2.
    pub sigma2_hat: f64,
}

/// Simulate one exchange round on `edge = (initiator, responder)`
/// starting at reference time `t_send_ref_ns`.
pub fn exchange_round(
    world: &WorldInstance,
    edge: (usize, usize),
    round_index: usize,
    t_send_ref_ns: f64,
    turnaround_ns: f64,
    rng: &mut TrialRng,
) -> TimestampQuad {
    let (j, i) = edge;
    let link = world.link(j, i);
    let t_noise = Normal::new(link.t_mean_ns, link.t_std_ns).expect("validated std");
    let r_noise = Normal::new(link.r_mean_ns, link.r_std_ns).expect("validated std");
    let t_k = t_noise.sample(rng);
    let r_k = r_noise.sample(rng);

    let t1 = t_send_ref_ns;
    let t2 = t1 + link.prop_delay_ns + t_k;
    let t3 = t2 + turnaround_ns;
    let t4 = t3 + link.prop_delay_ns + r_k;
    TimestampQuad {
        c1: world.clock(j).read(t1),
        c2: world.clock(i).read(t2),
        c3: world.clock(i).read(t3),
        c4: world.clock(j).read(t4),
        round_index,
    }
}

/// Run `k_rounds` consecutive rounds spaced `delta_t_ns` apart.
pub fn run_exchange_set(
    world: &WorldInstance,
    edge: (usize, usize),
    t_start_ns: f64,
    k_rounds: usize,
    delta_t_ns: f64,
    turnaround_ns: f64,
    rng: &mut TrialRng,
) -> Vec<TimestampQuad> {
    (0..k_rounds)
        .map(|k| {
            exchange_round(world, edge, k, t_start_ns + k as f64 * delta_t_ns, turnaround_ns, rng)
        })
        .collect()
}

/// Single-round offset reading: `((c2 + c3) - (c1 + c4)) / 2`, an
/// unbiased estimate of `theta_resp - theta_init` for equal-rate clocks,
/// with error variance sigma^2 / 4.
pub fn measured_offset(q: &TimestampQuad) -> f64 {
    0.5 * ((q.c2 + q.c3) - (q.c1 + q.c4))
}

/// Per-interval rate difference between the two clocks, from the receive
/// and send stamps of two consecutive rounds. Noiseless value:
/// `gamma_resp / gamma_init - 1`.
pub fn measured_drift(q_k: &TimestampQuad, q_prev: &TimestampQuad) -> Result<f64> {
    let init_span = q_k.c1 - q_prev.c1;
    if init_span == 0.0 {
        return Err(Error::ZeroStampInterval);
    }
    let resp_span = q_k.c2 - q_prev.c2;
    Ok((resp_span - init_span) / init_span)
}

/// Relative rate of the responder clock against the initiator clock:
/// one plus the mean drift over consecutive rounds. Exact for affine
/// clocks without link noise.
pub fn estimate_rel_skew(rounds: &[TimestampQuad]) -> Result<f64> {
    if rounds.len() < 2 {
        return Err(Error::NotEnoughRounds { need: 2, got: rounds.len() });
    }
    let mut sum = 0.0;
    for pair in rounds.windows(2) {
        sum += measured_drift(&pair[1], &pair[0])?;
    }
    Ok(1.0 + sum / (rounds.len() - 1) as f64)
}

/// Link bring-up: run `n_rounds` exchanges, estimate the stamp-scaling
/// ratio, then take the sample variance of the round-trip statistic
/// `alpha_hat * (c2 - c3) - (c1 - c4)`, an observation of
/// `2 d + T_k + R_k` whose variance is Var(T) + Var(R).
pub fn run_training(
    world: &WorldInstance,
    edge: (usize, usize),
    t_start_ns: f64,
    n_rounds: usize,
    delta_t_ns: f64,
    turnaround_ns: f64,
    rng: &mut TrialRng,
) -> Result<TrainingResult> {
    if n_rounds < 30 {
        return Err(Error::NotEnoughRounds { need: 30, got: n_rounds });
    }
    let quads = run_exchange_set(world, edge, t_start_ns, n_rounds, delta_t_ns, turnaround_ns, rng);
    let alpha_hat = 1.0 / estimate_rel_skew(&quads)?;
    let samples: Vec<f64> =
        quads.iter().map(|q| alpha_hat * (q.c2 - q.c3) - (q.c1 - q.c4)).collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let sigma2_hat = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
        / (samples.len() - 1) as f64;
    Ok(TrainingResult { alpha_hat, sigma2_hat })
}

/// Reduce one synchronization set to its sufficient statistic.
///
/// Per round `C_k = (c1 + c4) - alpha_hat (c2 + c3)`; averaging,
/// `delta_hat = sum(C_k) / 2K` estimates `theta_init - alpha_hat *
/// theta_resp` (the shared time ramp cancels when `alpha_hat` matches the
/// true rate ratio), and `factor_var = alpha_hat^2 sigma2_hat / (4K)` is
/// its variance.
pub fn pair_statistic(
    rounds: &[TimestampQuad],
    alpha_hat: f64,
    sigma2_hat: f64,
) -> Result<PairStats> {
    if rounds.is_empty() {
        return Err(Error::NotEnoughRounds { need: 1, got: 0 });
    }
    if !(alpha_hat > 0.0) {
        return Err(Error::NonPositiveAlpha(alpha_hat));
    }
    if !(sigma2_hat > 0.0) {
        return Err(Error::NonPositiveSigma2(sigma2_hat));
    }
    let k = rounds.len();
    let sum: f64 =
        rounds.iter().map(|q| (q.c1 + q.c4) - alpha_hat * (q.c2 + q.c3)).sum();
    let delta_hat = sum / (2.0 * k as f64);
    let factor_var = alpha_hat * alpha_hat * sigma2_hat / (4.0 * k as f64);
    Ok(PairStats { alpha_hat, sigma2_hat, delta_hat, k_used: k, factor_var })
}

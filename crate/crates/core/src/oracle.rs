//! Ground-truth inference used to validate the estimators: exact joint
//! Gaussian marginals by dense linear algebra, and a brute-force grid
//! integration of the pairwise posterior. Both deliberately avoid the
//! message-passing code paths they are meant to check.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gbp::{FactorGraph, GaussianMsg};
use crate::ptp::PairStats;

/// Exact per-node posterior moments, keyed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMarginals {
    pub mean_ns: BTreeMap<usize, f64>,
    pub var_ns2: BTreeMap<usize, f64>,
}

/// Solve the full joint Gaussian once instead of passing messages: build
/// the precision matrix over non-anchored variables from the pairwise
/// constraints `theta_init - alpha * theta_resp ~ N(delta, var)` with
/// anchored variables substituted as constants, then invert. Anchored
/// nodes report variance 0. Dense and O(n^3), which is fine at validation
/// scale.
pub fn exact_network_marginals(graph: &FactorGraph) -> Result<ExactMarginals> {
    let nodes = graph.node_ids();
    let priors = graph.priors();
    // dense var index -> position among the free (non-anchored) variables
    let mut free_index = vec![usize::MAX; nodes.len()];
    let mut free_vars = Vec::new();
    for (var, prior) in priors.iter().enumerate() {
        if !prior.is_anchored() {
            free_index[var] = free_vars.len();
            free_vars.push(var);
        }
    }

    let n = free_vars.len();
    let mut precision = DMatrix::<f64>::zeros(n, n);
    let mut shift = DVector::<f64>::zeros(n);
    for (pos, &var) in free_vars.iter().enumerate() {
        let p = &priors[var];
        if p.is_informative() {
            precision[(pos, pos)] += p.precision;
            shift[pos] += p.precision * p.mean;
        }
    }
    for f in graph.factors() {
        if !(f.factor_var > 0.0) {
            return Err(Error::NonPositiveFactorVar(f.factor_var));
        }
        let w = 1.0 / f.factor_var;
        let a = f.alpha_hat;
        let ai = free_index[f.initiator];
        let ar = free_index[f.responder];
        match (ai == usize::MAX, ar == usize::MAX) {
            (false, false) => {
                precision[(ai, ai)] += w;
                precision[(ar, ar)] += a * a * w;
                precision[(ai, ar)] -= a * w;
                precision[(ar, ai)] -= a * w;
                shift[ai] += w * f.delta_hat;
                shift[ar] -= a * w * f.delta_hat;
            }
            // initiator pinned at value A: residual A - alpha x - delta
            (true, false) => {
                let anchor = priors[f.initiator].mean;
                precision[(ar, ar)] += a * a * w;
                shift[ar] += a * w * (anchor - f.delta_hat);
            }
            // responder pinned at value B: residual x - (delta + alpha B)
            (false, true) => {
                let anchor = priors[f.responder].mean;
                precision[(ai, ai)] += w;
                shift[ai] += w * (f.delta_hat + a * anchor);
            }
            (true, true) => {}
        }
    }

    let mut mean_ns = BTreeMap::new();
    let mut var_ns2 = BTreeMap::new();
    if n > 0 {
        let chol = Cholesky::new(precision).ok_or(Error::DisconnectedFromAnchor)?;
        let mean = chol.solve(&shift);
        let cov = chol.inverse();
        for (pos, &var) in free_vars.iter().enumerate() {
            let (m, v) = (mean[pos], cov[(pos, pos)]);
            // a zero pivot can slip through the factorization as inf/nan
            if !(m.is_finite() && v.is_finite()) {
                return Err(Error::DisconnectedFromAnchor);
            }
            mean_ns.insert(nodes[var], m);
            var_ns2.insert(nodes[var], v);
        }
    }
    for (var, prior) in priors.iter().enumerate() {
        if prior.is_anchored() {
            mean_ns.insert(nodes[var], prior.mean);
            var_ns2.insert(nodes[var], 0.0);
        }
    }
    Ok(ExactMarginals { mean_ns, var_ns2 })
}

/// Grid used by [`grid_pair_posterior`]: each axis spans the relevant
/// mass plus/minus `span_stds` standard deviations, sampled at
/// `points_per_axis` Simpson nodes (odd count).
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub points_per_axis: usize,
    pub span_stds: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { points_per_axis: 4001, span_stds: 6.0 }
    }
}

/// Fraction of the peak density tolerated at a grid edge before the grid
/// is declared too narrow; a correctly spanned 6-sigma grid sits around
/// exp(-18) ~ 1.5e-8.
const EDGE_MASS_LIMIT: f64 = 1e-6;

struct Axis {
    lo: f64,
    step: f64,
    points: usize,
}

impl Axis {
    fn new(lo: f64, hi: f64, points: usize) -> Axis {
        Axis { lo, step: (hi - lo) / (points - 1) as f64, points }
    }

    fn at(&self, idx: usize) -> f64 {
        self.lo + idx as f64 * self.step
    }

    fn mid(&self) -> f64 {
        self.lo + self.step * (self.points - 1) as f64 / 2.0
    }

    /// Composite-Simpson weight with the step/3 factor folded in.
    fn weight(&self, idx: usize) -> f64 {
        let w = if idx == 0 || idx == self.points - 1 {
            1.0
        } else if idx % 2 == 1 {
            4.0
        } else {
            2.0
        };
        w * self.step / 3.0
    }
}

fn check_edges(densities: &[f64]) -> Result<()> {
    let peak = densities.iter().cloned().fold(0.0f64, f64::max);
    if peak == 0.0 {
        return Err(Error::GridTooNarrow { edge: 1.0, limit: EDGE_MASS_LIMIT });
    }
    let edge = densities[0].max(*densities.last().expect("non-empty grid")) / peak;
    if edge > EDGE_MASS_LIMIT {
        return Err(Error::GridTooNarrow { edge, limit: EDGE_MASS_LIMIT });
    }
    Ok(())
}

/// Mean and variance of an unnormalized density sampled on `axis`,
/// accumulated around the axis midpoint to keep the second moment well
/// conditioned.
fn moments(axis: &Axis, densities: &[f64]) -> (f64, f64) {
    let mid = axis.mid();
    let mut mass = 0.0;
    let mut first = 0.0;
    let mut second = 0.0;
    for (idx, &d) in densities.iter().enumerate() {
        let w = axis.weight(idx) * d;
        let x = axis.at(idx) - mid;
        mass += w;
        first += w * x;
        second += w * x * x;
    }
    let mean = first / mass;
    (mid + mean, second / mass - mean * mean)
}

/// Posterior mean and variance of the responder offset given one
/// synchronization set's statistics and Gaussian priors on both offsets,
/// by numeric integration of
///
/// ```text
/// p(theta_r | set)  ~  prior_resp(theta_r)
///     * Integral N(theta_i - alpha theta_r; delta, factor_var)
///           * prior_init(theta_i)  d theta_i
/// ```
///
/// Priors may be anchored (zero variance) or non-informative, but at
/// least one of the two must be informative or the posterior is improper.
/// The responder axis is centered on the closed-form posterior and the
/// initiator axis covers both its prior mass and the factor image of the
/// responder grid; residual truncation is caught by an edge-mass check on
/// each axis. Densities are evaluated relative to the joint mode, so
/// strongly disagreeing priors merely scale the posterior instead of
/// underflowing the whole grid.
pub fn grid_pair_posterior(
    stats: &PairStats,
    prior_init: &GaussianMsg,
    prior_resp: &GaussianMsg,
    grid: &GridSpec,
) -> Result<(f64, f64)> {
    if grid.points_per_axis < 3 || grid.points_per_axis % 2 == 0 {
        return Err(Error::Parameter("grid points_per_axis must be odd and >= 3".into()));
    }
    if !(grid.span_stds > 0.0) {
        return Err(Error::Parameter("grid span_stds must be > 0".into()));
    }
    if !(stats.factor_var > 0.0) {
        return Err(Error::NonPositiveFactorVar(stats.factor_var));
    }
    if !prior_init.is_informative() && !prior_resp.is_informative() {
        return Err(Error::Parameter(
            "pair posterior needs an informative prior on at least one offset".into(),
        ));
    }
    if prior_resp.is_anchored() {
        return Ok((prior_resp.mean, 0.0));
    }

    let alpha = stats.alpha_hat;
    if !(alpha > 0.0) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    let delta = stats.delta_hat;
    let fv = stats.factor_var;

    // closed-form moments steer only the grid placement; the returned
    // numbers come from the quadrature below
    let from_init = if prior_init.is_informative() {
        Some(GaussianMsg::from_mean_var(
            (prior_init.mean - delta) / alpha,
            (prior_init.variance() + fv) / (alpha * alpha),
        ))
    } else {
        None
    };
    let combined = GaussianMsg::product(from_init.iter().chain([prior_resp]))?;
    let (center, spread) = (combined.mean, combined.variance().sqrt());
    let resp_axis = Axis::new(
        center - grid.span_stds * spread,
        center + grid.span_stds * spread,
        grid.points_per_axis,
    );

    let log_resp_at = |x: f64| -> f64 {
        if prior_resp.is_informative() {
            -(x - prior_resp.mean).powi(2) * prior_resp.precision / 2.0
        } else {
            0.0
        }
    };
    // terms this far below the mode cannot shift the moments or the edge
    // ratios at the tolerances involved
    const LOG_CUTOFF: f64 = -40.0;

    let densities: Vec<f64> = if prior_init.is_anchored() {
        // the inner integral collapses onto the anchor value; `center` is
        // the posterior mode, so shifted logs stay non-positive
        let resid0 = prior_init.mean - alpha * center - delta;
        let log_peak = -resid0 * resid0 / (2.0 * fv) + log_resp_at(center);
        (0..resp_axis.points)
            .map(|ix| {
                let x = resp_axis.at(ix);
                let resid = prior_init.mean - alpha * x - delta;
                let l = -resid * resid / (2.0 * fv) + log_resp_at(x) - log_peak;
                if l > LOG_CUTOFF {
                    l.exp()
                } else {
                    0.0
                }
            })
            .collect()
    } else if prior_init.is_informative() {
        // proper initiator prior: integrate it out on its own axis, wide
        // enough for both the prior mass and the factor image of the
        // responder grid
        let vi = prior_init.variance();
        let si = vi.sqrt();
        let (img_a, img_b) = (
            alpha * resp_axis.lo + delta,
            alpha * resp_axis.at(resp_axis.points - 1) + delta,
        );
        let lo = (prior_init.mean - grid.span_stds * si)
            .min(img_a.min(img_b) - grid.span_stds * fv.sqrt());
        let hi = (prior_init.mean + grid.span_stds * si)
            .max(img_a.max(img_b) + grid.span_stds * fv.sqrt());
        // disagreeing priors stretch the axis far beyond the conditional
        // peak; add points so the peak stays resolved, within reason
        let var_y = 1.0 / (1.0 / vi + 1.0 / fv);
        let mut n_init = ((hi - lo) / (var_y.sqrt() / 16.0)).ceil() as usize + 1;
        n_init = n_init.clamp(grid.points_per_axis, 64_001);
        if n_init % 2 == 0 {
            n_init += 1;
        }
        let init_axis = Axis::new(lo, hi, n_init);

        // log density at the joint mode: the posterior mean paired with
        // the conditional initiator peak
        let y_mode = (prior_init.mean / vi + (alpha * center + delta) / fv) * var_y;
        let log_peak = -(y_mode - prior_init.mean).powi(2) / (2.0 * vi)
            - (y_mode - alpha * center - delta).powi(2) / (2.0 * fv)
            + log_resp_at(center);

        let init_log_prior: Vec<f64> = (0..init_axis.points)
            .map(|jx| -(init_axis.at(jx) - prior_init.mean).powi(2) / (2.0 * vi))
            .collect();
        // joint mass collapsed onto the initiator axis, for its edge check
        let mut init_marginal = vec![0.0; init_axis.points];
        let densities: Vec<f64> = (0..resp_axis.points)
            .map(|ix| {
                let x = resp_axis.at(ix);
                let lr = log_resp_at(x) - log_peak;
                let shifted = alpha * x + delta;
                let mut inner = 0.0;
                for (jx, lp) in init_log_prior.iter().enumerate() {
                    let resid = init_axis.at(jx) - shifted;
                    let l = lp - resid * resid / (2.0 * fv) + lr;
                    if l > LOG_CUTOFF {
                        let joint = l.exp();
                        inner += init_axis.weight(jx) * joint;
                        init_marginal[jx] += joint;
                    }
                }
                inner
            })
            .collect();
        check_edges(&init_marginal)?;
        densities
    } else {
        // non-informative initiator: the factor integrates to a constant,
        // leaving the responder prior as the posterior
        (0..resp_axis.points)
            .map(|ix| {
                let l = log_resp_at(resp_axis.at(ix));
                if l > LOG_CUTOFF {
                    l.exp()
                } else {
                    0.0
                }
            })
            .collect()
    };

    check_edges(&densities)?;
    Ok(moments(&resp_axis, &densities))
}

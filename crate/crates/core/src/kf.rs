//! Pairwise Kalman filter tracking the state [offset; drift] of one clock
//! against a reference neighbor from two-way exchange rounds.
//!
//! State transition per round of spacing dt: offset grows by drift * dt,
//! drift stays constant (process noise defaults to zero). The measurement
//! is z = [measured_offset; measured_drift] with identity observation and
//! noise covariance
//!
//! ```text
//! R = sigma2 * [ 1       1/dt     ]
//!              [ 1/dt    2/dt^2   ]
//! ```
//!
//! where sigma2 is the two-way link noise variance from training. The
//! drift reading needs two consecutive rounds, so the very first round
//! performs an offset-only update using the offset row/column of R.
//!
//! All 2x2 algebra is closed-form; no matrix library involved.

use crate::error::{Error, Result};
use crate::ptp::{measured_drift, measured_offset, TimestampQuad};

/// Row-major symmetric-friendly 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2 {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2 { a11: 0.0, a12: 0.0, a21: 0.0, a22: 0.0 };
    pub const IDENTITY: Mat2 = Mat2 { a11: 1.0, a12: 0.0, a21: 0.0, a22: 1.0 };

    pub fn diag(d1: f64, d2: f64) -> Mat2 {
        Mat2 { a11: d1, a12: 0.0, a21: 0.0, a22: d2 }
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        Mat2 {
            a11: self.a11 + o.a11,
            a12: self.a12 + o.a12,
            a21: self.a21 + o.a21,
            a22: self.a22 + o.a22,
        }
    }

    pub fn sub(&self, o: &Mat2) -> Mat2 {
        Mat2 {
            a11: self.a11 - o.a11,
            a12: self.a12 - o.a12,
            a21: self.a21 - o.a21,
            a22: self.a22 - o.a22,
        }
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        Mat2 {
            a11: self.a11 * o.a11 + self.a12 * o.a21,
            a12: self.a11 * o.a12 + self.a12 * o.a22,
            a21: self.a21 * o.a11 + self.a22 * o.a21,
            a22: self.a21 * o.a12 + self.a22 * o.a22,
        }
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2 { a11: self.a11, a12: self.a21, a21: self.a12, a22: self.a22 }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn trace(&self) -> f64 {
        self.a11 + self.a22
    }

    pub fn mul_vec(&self, v: (f64, f64)) -> (f64, f64) {
        (self.a11 * v.0 + self.a12 * v.1, self.a21 * v.0 + self.a22 * v.1)
    }

    /// Force exact symmetry; covariance updates drift off symmetric by
    /// rounding otherwise.
    pub fn symmetrize(&self) -> Mat2 {
        let m = 0.5 * (self.a12 + self.a21);
        Mat2 { a11: self.a11, a12: m, a21: m, a22: self.a22 }
    }

    /// Smallest eigenvalue, valid for symmetric matrices.
    pub fn eig_min_symmetric(&self) -> f64 {
        let half_tr = 0.5 * (self.a11 + self.a22);
        let half_diff = 0.5 * (self.a11 - self.a22);
        half_tr - (half_diff * half_diff + self.a12 * self.a21).max(0.0).sqrt()
    }
}

/// Filter parameters for one tracked pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfConfig {
    /// Round spacing, ns.
    pub delta_t_ns: f64,
    /// Two-way link noise variance, ns^2.
    pub sigma2: f64,
    /// Process noise added at each prediction; zero models fixed
    /// offset/drift, a small value keeps the filter adaptive when the
    /// truth wanders.
    pub q: Mat2,
    /// Initial covariance; diffuse by default so the first update is
    /// dominated by the first measurement.
    pub p0: Mat2,
}

impl KfConfig {
    pub fn new(delta_t_ns: f64, sigma2: f64) -> Result<Self> {
        if !(delta_t_ns > 0.0) {
            return Err(Error::Parameter("KF delta_t_ns must be > 0".into()));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::NonPositiveSigma2(sigma2));
        }
        Ok(KfConfig { delta_t_ns, sigma2, q: Mat2::ZERO, p0: Mat2::diag(1e6, 1e-6) })
    }

    pub fn with_q(mut self, q: Mat2) -> Result<Self> {
        let q = q.symmetrize();
        if q.eig_min_symmetric() < 0.0 {
            return Err(Error::Parameter("process noise q must be PSD".into()));
        }
        self.q = q;
        Ok(self)
    }
}

/// Filter state after `round` processed rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfState {
    /// Estimated clock offset of the tracked node minus its reference, ns.
    pub offset_ns: f64,
    /// Estimated relative drift (dimensionless rate difference).
    pub drift: f64,
    /// Symmetric PSD state covariance.
    pub p: Mat2,
    pub round: usize,
}

impl KfState {
    pub fn init(cfg: &KfConfig) -> KfState {
        KfState { offset_ns: 0.0, drift: 0.0, p: cfg.p0, round: 0 }
    }
}

/// Measurement noise covariance for a full [offset; drift] observation.
pub fn kf_measurement_cov(cfg: &KfConfig) -> Mat2 {
    let dt = cfg.delta_t_ns;
    Mat2 {
        a11: cfg.sigma2,
        a12: cfg.sigma2 / dt,
        a21: cfg.sigma2 / dt,
        a22: 2.0 * cfg.sigma2 / (dt * dt),
    }
}

/// Time update: propagate state one round ahead.
pub fn kf_predict(s: &KfState, cfg: &KfConfig) -> KfState {
    let a = Mat2 { a11: 1.0, a12: cfg.delta_t_ns, a21: 0.0, a22: 1.0 };
    let (offset_ns, drift) = a.mul_vec((s.offset_ns, s.drift));
    let p = a.mul(&s.p).mul(&a.transpose()).add(&cfg.q).symmetrize();
    KfState { offset_ns, drift, p, round: s.round }
}

/// Measurement update with a full [offset; drift] observation.
pub fn kf_update(s: &KfState, z: (f64, f64), cfg: &KfConfig) -> Result<KfState> {
    let r = kf_measurement_cov(cfg);
    let innovation_cov = s.p.add(&r);
    // P + R is PSD + PD, so a non-positive determinant only happens for
    // degenerate configs; badly conditioned but positive dets are normal
    // during the diffuse-prior transient and invert fine in closed form.
    let det = innovation_cov.det();
    if !det.is_finite() || det <= 0.0 {
        return Err(Error::SingularInnovation(det));
    }
    let inv = Mat2 {
        a11: innovation_cov.a22 / det,
        a12: -innovation_cov.a12 / det,
        a21: -innovation_cov.a21 / det,
        a22: innovation_cov.a11 / det,
    };
    let gain = s.p.mul(&inv);
    let residual = (z.0 - s.offset_ns, z.1 - s.drift);
    let corr = gain.mul_vec(residual);
    // Joseph form: PSD under rounding even when the diffuse prior makes
    // the plain (I - K)P subtraction cancel catastrophically
    let m = Mat2::IDENTITY.sub(&gain);
    let p = m
        .mul(&s.p)
        .mul(&m.transpose())
        .add(&gain.mul(&r).mul(&gain.transpose()))
        .symmetrize();
    Ok(KfState {
        offset_ns: s.offset_ns + corr.0,
        drift: s.drift + corr.1,
        p,
        round: s.round,
    })
}

/// Measurement update with only an offset observation (first round, when
/// no drift reading exists yet). Uses the offset entry of R as the scalar
/// noise variance.
pub fn kf_update_offset_only(s: &KfState, z_offset: f64, cfg: &KfConfig) -> Result<KfState> {
    let r = cfg.sigma2;
    let denom = s.p.a11 + r;
    if !denom.is_finite() || denom <= 0.0 {
        return Err(Error::SingularInnovation(denom));
    }
    let gain = (s.p.a11 / denom, s.p.a21 / denom);
    let residual = z_offset - s.offset_ns;
    // Joseph form with H = [1 0]: (I - KH) P (I - KH)' + K r K'
    let m = Mat2 { a11: 1.0 - gain.0, a12: 0.0, a21: -gain.1, a22: 1.0 };
    let krk = Mat2 {
        a11: r * gain.0 * gain.0,
        a12: r * gain.0 * gain.1,
        a21: r * gain.0 * gain.1,
        a22: r * gain.1 * gain.1,
    };
    let p = m.mul(&s.p).mul(&m.transpose()).add(&krk).symmetrize();
    Ok(KfState {
        offset_ns: s.offset_ns + gain.0 * residual,
        drift: s.drift + gain.1 * residual,
        p,
        round: s.round,
    })
}

/// One full filter round: predict, then update from the round's quad
/// (offset-only when `quad_prev` is absent).
pub fn kf_step(
    s: &KfState,
    quad_k: &TimestampQuad,
    quad_prev: Option<&TimestampQuad>,
    cfg: &KfConfig,
) -> Result<KfState> {
    let predicted = kf_predict(s, cfg);
    let z_offset = measured_offset(quad_k);
    let mut next = match quad_prev {
        Some(prev) => {
            let z_drift = measured_drift(quad_k, prev)?;
            kf_update(&predicted, (z_offset, z_drift), cfg)?
        }
        None => kf_update_offset_only(&predicted, z_offset, cfg)?,
    };
    next.round = s.round + 1;
    Ok(next)
}

/// Run the filter over a batch of consecutive quads, threading the last
/// quad of the previous batch for the drift reading at the seam.
pub fn kf_run_batch(
    s: &KfState,
    quads: &[TimestampQuad],
    prev_tail: Option<&TimestampQuad>,
    cfg: &KfConfig,
) -> Result<KfState> {
    let mut state = *s;
    let mut prev = prev_tail.copied();
    for q in quads {
        state = kf_step(&state, q, prev.as_ref(), cfg)?;
        prev = Some(*q);
    }
    Ok(state)
}

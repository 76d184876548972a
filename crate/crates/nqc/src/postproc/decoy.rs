//! Three-level decoy-state estimation: lower bound on the single-photon
//! yield and gain, upper bound on the single-photon error rate.
//!
//! The estimator is the vacuum-plus-weak-decoy method. Measured gains are
//! first pushed in the adverse direction by `Z_BUFFER` binomial standard
//! errors so the bounds stay sound at realistic session sizes, then the
//! closed-form bounds are evaluated and clamped to [0, 1].

use super::PostprocError;
use crate::photonic::DecoyLevel;

/// Per-level transmit/sift tallies for one session.
///
/// `clicked` counts sifted (basis-matched) detections and `errors` the
/// disagreements among them, so `gain()` and `error_rate()` are in the
/// sifted convention; the bounds only ever use them in ratios where the
/// uniform basis-match factor cancels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecoyStats {
    pub sent: [u64; 3],
    pub clicked: [u64; 3],
    pub errors: [u64; 3],
    pub mu: [f64; 3],
}

impl DecoyStats {
    pub fn check_consistent(&self) -> bool {
        (0..3).all(|i| self.errors[i] <= self.clicked[i] && self.clicked[i] <= self.sent[i])
    }

    /// Q_level = clicked / sent.
    pub fn gain(&self, level: DecoyLevel) -> f64 {
        let i = level.index();
        if self.sent[i] == 0 {
            0.0
        } else {
            self.clicked[i] as f64 / self.sent[i] as f64
        }
    }

    /// E_level = errors / clicked.
    pub fn error_rate(&self, level: DecoyLevel) -> f64 {
        let i = level.index();
        if self.clicked[i] == 0 {
            0.0
        } else {
            self.errors[i] as f64 / self.clicked[i] as f64
        }
    }

    /// E_level * Q_level = errors / sent, as a single binomial rate.
    fn error_gain(&self, level: DecoyLevel) -> f64 {
        let i = level.index();
        if self.sent[i] == 0 {
            0.0
        } else {
            self.errors[i] as f64 / self.sent[i] as f64
        }
    }
}

/// Bounds produced by [`decoy_bounds`]. `degenerate` marks sessions whose
/// statistics forced a clamp (implied negative yield, or a vanishing
/// denominator); such bounds are still safe to use but carry no key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoyBounds {
    pub y1_lower: f64,
    pub e1_upper: f64,
    pub q1_lower: f64,
    pub degenerate: bool,
}

/// Adverse-direction buffer, in binomial standard errors, applied to each
/// measured rate before the closed-form bounds. Four standard errors keep
/// the per-session unsoundness probability around 3e-5 per tail while
/// costing only a few percent of bound tightness at 10^6-pulse sessions.
const Z_BUFFER: f64 = 4.0;

fn binom_sigma(rate: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (rate * (1.0 - rate) / n as f64).sqrt()
}

/// Vacuum-plus-weak-decoy bounds on the single-photon contribution.
///
/// Preconditions: mu_signal > mu_decoy > mu_vacuum = 0, and both the
/// signal and decoy levels have nonzero sent and clicked counts. A vacuum
/// level with zero sent pulses is tolerated (its yield contributes 0).
pub fn decoy_bounds(stats: &DecoyStats) -> Result<DecoyBounds, PostprocError> {
    let mu = stats.mu[DecoyLevel::Signal.index()];
    let nu = stats.mu[DecoyLevel::Decoy.index()];
    let vac = stats.mu[DecoyLevel::Vacuum.index()];
    if !(mu > nu && nu > vac && vac == 0.0) {
        return Err(PostprocError::DecoyPrecondition(
            "mean photon numbers must satisfy signal > decoy > vacuum = 0",
        ));
    }
    for level in [DecoyLevel::Signal, DecoyLevel::Decoy] {
        let i = level.index();
        if stats.sent[i] == 0 || stats.clicked[i] == 0 {
            return Err(PostprocError::DecoyPrecondition(
                "signal and decoy levels need nonzero sent and clicked counts",
            ));
        }
    }
    if !stats.check_consistent() {
        return Err(PostprocError::DecoyPrecondition(
            "counts must satisfy errors <= clicked <= sent",
        ));
    }

    let n_s = stats.sent[DecoyLevel::Signal.index()];
    let n_d = stats.sent[DecoyLevel::Decoy.index()];
    let n_v = stats.sent[DecoyLevel::Vacuum.index()];

    // Measured rates, then buffered in whichever direction weakens the
    // final bound: the decoy gain downward, the signal gain and the
    // vacuum terms upward for Y1; the decoy error-gain upward and the
    // vacuum error-gain downward for e1.
    let q_mu = stats.gain(DecoyLevel::Signal);
    let q_nu = stats.gain(DecoyLevel::Decoy);
    let y0 = stats.gain(DecoyLevel::Vacuum);
    let eq_nu = stats.error_gain(DecoyLevel::Decoy);
    let ey0 = stats.error_gain(DecoyLevel::Vacuum);

    let q_mu_hi = (q_mu + Z_BUFFER * binom_sigma(q_mu, n_s)).min(1.0);
    let q_nu_lo = (q_nu - Z_BUFFER * binom_sigma(q_nu, n_d)).max(0.0);
    let y0_hi = (y0 + Z_BUFFER * binom_sigma(y0, n_v)).min(1.0);
    let eq_nu_hi = (eq_nu + Z_BUFFER * binom_sigma(eq_nu, n_d)).min(1.0);
    let ey0_lo = (ey0 - Z_BUFFER * binom_sigma(ey0, n_v)).max(0.0);

    let mut degenerate = false;

    // Y1 >= mu / (mu*nu - nu^2) * (Qnu e^nu - Qmu e^mu nu^2/mu^2
    //                              - (mu^2 - nu^2)/mu^2 * Y0)
    let coeff = mu / (mu * nu - nu * nu);
    let y1_raw = coeff
        * (q_nu_lo * nu.exp()
            - q_mu_hi * mu.exp() * (nu * nu) / (mu * mu)
            - ((mu * mu - nu * nu) / (mu * mu)) * y0_hi);
    let y1_lower = if y1_raw < 0.0 {
        degenerate = true;
        0.0
    } else {
        y1_raw.min(1.0)
    };

    // e1 <= (EQnu e^nu - EY0) / (nu * Y1_lower)
    let e1_upper = if y1_lower <= 0.0 {
        degenerate = true;
        1.0
    } else {
        let num = eq_nu_hi * nu.exp() - ey0_lo;
        if num < 0.0 {
            degenerate = true;
            0.0
        } else {
            let e1 = num / (nu * y1_lower);
            if e1 > 1.0 {
                degenerate = true;
                1.0
            } else {
                e1
            }
        }
    };

    let q1_lower = (y1_lower * mu * (-mu).exp()).clamp(0.0, 1.0);

    Ok(DecoyBounds { y1_lower, e1_upper, q1_lower, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact Poisson-averaged gain for per-photon transmission `eta_t`,
    /// truncated well past any mass that matters.
    fn exact_gain(mu: f64, eta_t: f64) -> f64 {
        let mut q = 0.0;
        let mut pois = (-mu).exp();
        for n in 0..60 {
            let yn = 1.0 - (1.0 - eta_t).powi(n);
            q += pois * yn;
            pois *= mu / (n as f64 + 1.0);
        }
        q
    }

    /// Stats built from exact rates with counts large enough that the
    /// finite-statistics buffers are negligible.
    fn analytic_stats(mu: f64, nu: f64, eta_t: f64, err: f64) -> DecoyStats {
        let n: u64 = 4_000_000_000_000; // 4e12: buffer term ~ 1e-6 relative
        let q_mu = exact_gain(mu, eta_t);
        let q_nu = exact_gain(nu, eta_t);
        DecoyStats {
            sent: [n, n, n],
            clicked: [0, (q_nu * n as f64) as u64, (q_mu * n as f64) as u64],
            errors: [
                0,
                (err * q_nu * n as f64) as u64,
                (err * q_mu * n as f64) as u64,
            ],
            mu: [0.0, nu, mu],
        }
    }

    #[test]
    fn test_y1_bound_sound_and_tight_on_analytic_channel() {
        let eta_t = 0.015;
        let stats = analytic_stats(0.5, 0.1, eta_t, 0.0);
        let b = decoy_bounds(&stats).unwrap();
        let y1_true = eta_t; // 1 - (1 - eta_t)^1
        assert!(b.y1_lower <= y1_true + 1e-9, "bound {} above truth {y1_true}", b.y1_lower);
        assert!(
            b.y1_lower >= 0.9 * y1_true,
            "bound {} more than 10% below truth {y1_true}",
            b.y1_lower
        );
        assert!(!b.degenerate);
        let q1_expect = b.y1_lower * 0.5 * (-0.5f64).exp();
        assert!((b.q1_lower - q1_expect).abs() < 1e-12);
    }

    #[test]
    fn test_e1_bound_covers_uniform_single_photon_errors() {
        // When every photon number suffers the same flip probability, the
        // single-photon error rate equals that probability and the bound
        // must sit at or above it.
        let eta_t = 0.0474;
        for err in [0.01, 0.03, 0.05] {
            let stats = analytic_stats(0.5, 0.1, eta_t, err);
            let b = decoy_bounds(&stats).unwrap();
            assert!(
                b.e1_upper >= err - 1e-6,
                "e1 bound {} below true rate {err}",
                b.e1_upper
            );
            assert!(b.e1_upper < 3.0 * err, "e1 bound {} uselessly loose", b.e1_upper);
        }
    }

    #[test]
    fn test_vacuum_without_clicks_is_fine() {
        let stats = analytic_stats(0.5, 0.1, 0.015, 0.02);
        assert_eq!(stats.clicked[0], 0);
        let b = decoy_bounds(&stats).unwrap();
        assert!(b.y1_lower > 0.0);
        assert!(b.e1_upper > 0.0 && b.e1_upper <= 1.0);
    }

    #[test]
    fn test_preconditions_rejected() {
        let mut stats = analytic_stats(0.5, 0.1, 0.015, 0.0);
        stats.mu = [0.0, 0.5, 0.5];
        assert!(decoy_bounds(&stats).is_err());

        let mut stats = analytic_stats(0.5, 0.1, 0.015, 0.0);
        stats.mu = [0.01, 0.1, 0.5];
        assert!(decoy_bounds(&stats).is_err());

        let mut stats = analytic_stats(0.5, 0.1, 0.015, 0.0);
        stats.clicked[DecoyLevel::Decoy.index()] = 0;
        assert!(decoy_bounds(&stats).is_err());
    }

    #[test]
    fn test_degenerate_statistics_flagged_not_fatal() {
        // A decoy gain far below anything consistent with the signal gain
        // drives the implied Y1 negative; the bound clamps and flags.
        let stats = DecoyStats {
            sent: [1_000_000; 3],
            clicked: [0, 10, 400_000],
            errors: [0, 1, 4_000],
            mu: [0.0, 0.1, 0.5],
        };
        let b = decoy_bounds(&stats).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.y1_lower, 0.0);
        assert_eq!(b.e1_upper, 1.0);
        assert_eq!(b.q1_lower, 0.0);
    }

    #[test]
    fn test_buffers_pull_in_safe_direction() {
        // Same underlying rates at two session sizes: the smaller session
        // must produce a weaker (smaller) yield bound.
        let big = analytic_stats(0.5, 0.1, 0.015, 0.02);
        let mut small = big;
        for i in 0..3 {
            small.sent[i] /= 1_000_000;
            small.clicked[i] /= 1_000_000;
            small.errors[i] /= 1_000_000;
        }
        let b_big = decoy_bounds(&big).unwrap();
        let b_small = decoy_bounds(&small).unwrap();
        assert!(b_small.y1_lower < b_big.y1_lower);
        assert!(b_small.e1_upper > b_big.e1_upper);
    }
}

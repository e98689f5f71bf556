//! Residual phase drift and the periodic test-and-rectify loop.
//!
//! The working point wanders as a Brownian phase walk. Each cycle starts
//! with a fringe scan: the receiver's modulator steps through a full period
//! while bright unmodulated-level test pulses run, the dark background is
//! subtracted, and a least-squares sinusoid fit recovers the current offset
//! and visibility. The fitted offset is folded into a static bias on the
//! receiver's modulator and key distribution resumes for the rest of the
//! cycle. Scan time is charged to a duty-cycle ledger that the policy caps
//! at ten percent.

use std::f64::consts::{PI, TAU};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{click_probability_for_mu, LinkParams, SourceModel};
use crate::optics::central_bin_port_probabilities;
use crate::rng::{stream, STREAM_DRIFT, STREAM_SCAN};

/// Maximum fraction of run time the calibration scans may consume.
pub const DUTY_CYCLE_LIMIT: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("fringe fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("no usable fringe in scan (flat or dark)")]
    NoUsableFringe,
    #[error("policy rejected: {0}")]
    PolicyRejected(String),
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    PI - (PI - x).rem_euclid(TAU)
}

/// Brownian phase walk of the uncorrected working point.
#[derive(Debug, Clone)]
pub struct DriftState {
    /// Current offset, wrapped to (-pi, pi].
    pub offset: f64,
    /// Walk rate, radians per sqrt(second).
    pub sigma: f64,
    rng: ChaCha8Rng,
}

/// Default drift rate: slow enough to track, fast enough that an
/// uncorrected link degrades within minutes.
pub const DEFAULT_DRIFT_SIGMA: f64 = 0.02;

impl DriftState {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            offset: 0.0,
            sigma,
            rng: stream(seed, STREAM_DRIFT),
        }
    }

    /// Advance the walk by `dt` seconds.
    pub fn advance(&mut self, dt: f64) {
        assert!(dt >= 0.0);
        if dt == 0.0 || self.sigma == 0.0 {
            return;
        }
        let step: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng);
        self.offset = wrap_angle(self.offset + self.sigma * dt.sqrt() * step);
    }
}

/// Periodic calibration schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPolicy {
    /// Seconds between calibration starts.
    pub period_s: f64,
    /// Phase settings per scan, equally spaced over a full period.
    pub scan_points: u32,
    /// Test pulses fired at each setting.
    pub pulses_per_point: u64,
    /// Optional reactive trigger: recalibrate early once the running
    /// interval error estimate exceeds this value.
    pub qber_trigger: Option<f64>,
}

impl Default for CalibrationPolicy {
    fn default() -> Self {
        Self {
            period_s: 30.0,
            scan_points: 16,
            pulses_per_point: 3_400_000,
            qber_trigger: None,
        }
    }
}

impl CalibrationPolicy {
    /// Exact scan duration by accounting.
    pub fn scan_time_s(&self, source: &SourceModel) -> f64 {
        self.scan_points as f64 * self.pulses_per_point as f64 / source.pulse_rate_hz
    }

    pub fn duty_cycle(&self, source: &SourceModel) -> f64 {
        self.scan_time_s(source) / self.period_s
    }

    pub fn validate(&self, source: &SourceModel) -> Result<(), CalibrationError> {
        if self.scan_points < 8 {
            return Err(CalibrationError::PolicyRejected(format!(
                "scan_points must be at least 8, got {}",
                self.scan_points
            )));
        }
        if self.period_s <= 0.0 {
            return Err(CalibrationError::PolicyRejected(format!(
                "period_s must be positive, got {}",
                self.period_s
            )));
        }
        if self.pulses_per_point == 0 {
            return Err(CalibrationError::PolicyRejected(
                "pulses_per_point must be positive".into(),
            ));
        }
        let duty = self.duty_cycle(source);
        if duty > DUTY_CYCLE_LIMIT {
            return Err(CalibrationError::PolicyRejected(format!(
                "scan time / period = {duty:.4} exceeds the {DUTY_CYCLE_LIMIT} duty budget"
            )));
        }
        if let Some(q) = self.qber_trigger {
            if !(0.0..1.0).contains(&q) || q <= 0.0 {
                return Err(CalibrationError::PolicyRejected(format!(
                    "qber_trigger must lie in (0,1), got {q}"
                )));
            }
        }
        Ok(())
    }
}

/// Result of one fringe fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Fitted fringe offset, radians in (-pi, pi].
    pub offset: f64,
    /// Fitted visibility, clamped to [0, 1].
    pub visibility: f64,
    /// Root-mean-square fit residual, in the units of the samples.
    pub residual_rms: f64,
    /// Test pulses consumed by the scan.
    pub pulses_consumed: u64,
}

/// Detector click probability for one test pulse at scan setting `s` when
/// the true fringe offset is `psi`.
fn test_click_probability(link: &LinkParams, s: f64, psi: f64) -> f64 {
    // Scanning the receiver phase with the sender idle: the detector port
    // rides the central-bin fringe. e_opt models fast-coding misalignment
    // and does not wash out the slow test fringe.
    let (monitor, _) = central_bin_port_probabilities(0.0, s - psi);
    let p_sig = click_probability_for_mu(link, link.source.mu_unmodulated, monitor);
    p_sig + (1.0 - p_sig) * link.detector.dark_prob
}

/// Step the receiver's modulator over a full period and collect counts.
/// Drift keeps walking while the scan runs. Returns the samples and the scan
/// duration in seconds.
pub fn fringe_scan(
    link: &LinkParams,
    policy: &CalibrationPolicy,
    drift: &mut DriftState,
    bias: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<(f64, u64)>, f64) {
    let dt_point = policy.pulses_per_point as f64 / link.source.pulse_rate_hz;
    let mut samples = Vec::with_capacity(policy.scan_points as usize);
    for i in 0..policy.scan_points {
        let s = TAU * i as f64 / policy.scan_points as f64;
        let psi = wrap_angle(drift.offset - bias);
        let p = test_click_probability(link, s, psi);
        let counts = Binomial::new(policy.pulses_per_point, p)
            .expect("valid probability")
            .sample(rng);
        samples.push((s, counts));
        drift.advance(dt_point);
    }
    (samples, policy.scan_time_s(&link.source))
}

/// Least-squares fit of c0 + c1 cos(phi) + c2 sin(phi) to the samples.
/// Returns the offset atan2(c2, c1), the visibility, and the fit residual.
pub fn fit_fringe(samples: &[(f64, f64)]) -> Result<CalibrationResult, CalibrationError> {
    if samples.len() < 8 {
        return Err(CalibrationError::DegenerateFit(format!(
            "need at least 8 samples, got {}",
            samples.len()
        )));
    }
    // Normal equations for the three-parameter model.
    let n = samples.len() as f64;
    let (mut sc, mut ss, mut scc, mut sss, mut scs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut syc, mut sys) = (0.0, 0.0, 0.0);
    for &(phi, y) in samples {
        let (s, c) = phi.sin_cos();
        sc += c;
        ss += s;
        scc += c * c;
        sss += s * s;
        scs += c * s;
        sy += y;
        syc += y * c;
        sys += y * s;
    }
    let a = [[n, sc, ss], [sc, scc, scs], [ss, scs, sss]];
    let b = [sy, syc, sys];
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-9 * n {
        return Err(CalibrationError::DegenerateFit(
            "singular normal equations; scan does not span the fringe".into(),
        ));
    }
    let solve = |col: usize| {
        let mut m = a;
        for (row, rhs) in b.iter().enumerate() {
            m[row][col] = *rhs;
        }
        (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))
            / det
    };
    let c0 = solve(0);
    let c1 = solve(1);
    let c2 = solve(2);

    if c0 <= 0.0 {
        return Err(CalibrationError::DegenerateFit(format!(
            "non-positive fringe offset level c0 = {c0}"
        )));
    }
    let amplitude = (c1 * c1 + c2 * c2).sqrt();
    if amplitude <= 1e-9 * c0 {
        return Err(CalibrationError::NoUsableFringe);
    }

    let mut sq = 0.0;
    for &(phi, y) in samples {
        let model = c0 + c1 * phi.cos() + c2 * phi.sin();
        sq += (y - model) * (y - model);
    }
    Ok(CalibrationResult {
        offset: wrap_angle(c2.atan2(c1)),
        visibility: (amplitude / c0).clamp(0.0, 1.0),
        residual_rms: (sq / n).sqrt(),
        pulses_consumed: 0,
    })
}

/// Run one scan, subtract the expected dark background, and fit.
/// Returns the calibration result and the scan duration.
pub fn calibrate_once(
    link: &LinkParams,
    policy: &CalibrationPolicy,
    drift: &mut DriftState,
    bias: f64,
    rng: &mut ChaCha8Rng,
) -> (Result<CalibrationResult, CalibrationError>, f64) {
    let (raw, duration) = fringe_scan(link, policy, drift, bias, rng);
    let dark_level = policy.pulses_per_point as f64 * link.detector.dark_prob;
    let samples: Vec<(f64, f64)> = raw
        .iter()
        .map(|&(phi, c)| (phi, c as f64 - dark_level))
        .collect();
    let fit = fit_fringe(&samples).map(|mut r| {
        r.pulses_consumed = policy.scan_points as u64 * policy.pulses_per_point;
        r
    });
    (fit, duration)
}

/// What one row of the operation log describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalKind {
    Calibration,
    KeyDistribution,
}

impl IntervalKind {
    pub fn label(self) -> &'static str {
        match self {
            IntervalKind::Calibration => "calib",
            IntervalKind::KeyDistribution => "qkd",
        }
    }
}

/// One logged interval of the operating cycle.
#[derive(Debug, Clone)]
pub struct IntervalRow {
    pub t_start: f64,
    pub t_end: f64,
    pub kind: IntervalKind,
    /// Working-point phase error at the end of the interval.
    pub phase: f64,
    /// Measured error rate over the interval (key intervals).
    pub qber: Option<f64>,
    /// Fitted visibility (calibration intervals).
    pub visibility: Option<f64>,
    /// Applied phase correction (calibration intervals).
    pub correction: Option<f64>,
    /// Cumulative calibration time over elapsed time.
    pub duty_cycle_cum: f64,
}

/// Aggregate outcome of an operate run.
#[derive(Debug, Clone)]
pub struct OperationLog {
    pub rows: Vec<IntervalRow>,
    pub pulses: u64,
    pub clicks: u64,
    pub sifted: u64,
    pub errors: u64,
    /// Per-interval sifted/error counts for key-interval rows, in row order.
    pub interval_counts: Vec<(u64, u64)>,
    pub calibration_seconds: f64,
    pub elapsed_seconds: f64,
}

impl OperationLog {
    pub fn qber(&self) -> f64 {
        if self.sifted == 0 {
            return 0.0;
        }
        self.errors as f64 / self.sifted as f64
    }

    pub fn duty_cycle(&self) -> f64 {
        if self.elapsed_seconds == 0.0 {
            return 0.0;
        }
        self.calibration_seconds / self.elapsed_seconds
    }

    pub fn raw_rate(&self) -> f64 {
        if self.pulses == 0 {
            return 0.0;
        }
        self.clicks as f64 / self.pulses as f64
    }

    pub fn sifted_rate(&self) -> f64 {
        if self.pulses == 0 {
            return 0.0;
        }
        self.sifted as f64 / self.pulses as f64
    }
}

/// Substep used to integrate drift across a key-distribution interval.
const QKD_SUBSTEP_S: f64 = 0.5;

/// Alternate calibration and key distribution for `total_time` seconds.
///
/// Runs whole cycles of `policy.period_s`; any trailing fraction of a cycle
/// is dropped, which keeps the duty-cycle accounting exact. A reactive
/// trigger ends a cycle early and calibration starts over immediately. With
/// calibration disabled the full period goes to key distribution and the
/// working point is never corrected. `initial_offset` is the phase error the
/// system powers up with.
pub fn operate(
    link: &LinkParams,
    policy: &CalibrationPolicy,
    drift_sigma: f64,
    initial_offset: f64,
    calibrate: bool,
    total_time: f64,
    seed: u64,
) -> Result<OperationLog, CalibrationError> {
    policy.validate(&link.source)?;
    if total_time <= policy.period_s {
        return Err(CalibrationError::PolicyRejected(format!(
            "total_time {total_time} s must exceed the period {} s",
            policy.period_s
        )));
    }

    let mut drift = DriftState::new(drift_sigma, seed);
    drift.offset = wrap_angle(initial_offset);
    let mut scan_rng = stream(seed, STREAM_SCAN);
    let mut sample_rng = stream(seed, crate::rng::STREAM_DETECTOR);
    let mut bias = 0.0f64;

    let p_signal = crate::channel::signal_click_probability(link, 0.25);
    let dark = link.detector.dark_prob;
    let e_opt = link.e_opt;
    let rate = link.source.pulse_rate_hz;

    let mut log = OperationLog {
        rows: Vec::new(),
        pulses: 0,
        clicks: 0,
        sifted: 0,
        errors: 0,
        interval_counts: Vec::new(),
        calibration_seconds: 0.0,
        elapsed_seconds: 0.0,
    };
    let mut last_visibility = None;

    let mut cycle_start = 0.0f64;
    while cycle_start + policy.period_s <= total_time + 1e-9 {
        let t0 = cycle_start;
        let mut t = t0;

        if calibrate {
            let (fit, scan_dur) = calibrate_once(link, policy, &mut drift, bias, &mut scan_rng);
            log.calibration_seconds += scan_dur;
            t += scan_dur;
            let (correction, visibility) = match fit {
                Ok(result) => {
                    // The detector port rides the inverted fringe: counts go
                    // as 1 - cos(s - psi), so the fit reports psi + pi.
                    let psi = wrap_angle(result.offset - PI);
                    (psi, Some(result.visibility))
                }
                // A failed fit (dark scan, flat fringe) leaves the bias alone.
                Err(_) => (0.0, None),
            };
            bias = wrap_angle(bias + correction);
            last_visibility = visibility;
            log.elapsed_seconds = t;
            log.rows.push(IntervalRow {
                t_start: t0,
                t_end: t,
                kind: IntervalKind::Calibration,
                phase: wrap_angle(drift.offset - bias),
                qber: None,
                visibility,
                correction: Some(correction),
                duty_cycle_cum: log.calibration_seconds / t,
            });
        }

        // Key distribution for the rest of the cycle.
        let qkd_end = t0 + policy.period_s;
        let qkd_start = t;
        let mut interval_sifted = 0u64;
        let mut interval_errors = 0u64;
        let mut pulse_remainder = 0.0f64;
        'substeps: while t < qkd_end - 1e-9 {
            let dt = QKD_SUBSTEP_S.min(qkd_end - t);
            let exact_pulses = rate * dt + pulse_remainder;
            let n = exact_pulses.floor() as u64;
            pulse_remainder = exact_pulses - n as f64;

            let residual = wrap_angle(drift.offset - bias);
            let err_prob = e_opt + (1.0 - 2.0 * e_opt) * (residual / 2.0).sin().powi(2);
            let batch =
                crate::channel::sample_pulse_batch(&mut sample_rng, n, p_signal, dark, err_prob);

            log.pulses += n;
            log.clicks += batch.clicks();
            interval_sifted += batch.sifted;
            interval_errors += batch.errors;

            drift.advance(dt);
            t += dt;

            if let Some(trigger) = policy.qber_trigger {
                if interval_sifted >= 500
                    && interval_errors as f64 / interval_sifted as f64 > trigger
                {
                    break 'substeps;
                }
            }
        }

        log.sifted += interval_sifted;
        log.errors += interval_errors;
        log.elapsed_seconds = t;
        log.interval_counts.push((interval_sifted, interval_errors));
        log.rows.push(IntervalRow {
            t_start: qkd_start,
            t_end: t,
            kind: IntervalKind::KeyDistribution,
            phase: wrap_angle(drift.offset - bias),
            qber: (interval_sifted > 0)
                .then(|| interval_errors as f64 / interval_sifted as f64),
            visibility: last_visibility,
            correction: None,
            duty_cycle_cum: log.calibration_seconds / t,
        });

        // A triggered cycle ends early; the next one starts right away.
        cycle_start = if t >= t0 + policy.period_s - 1e-9 {
            t0 + policy.period_s
        } else {
            t
        };
    }

    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn default_policy() -> CalibrationPolicy {
        CalibrationPolicy::default()
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        for i in -20..20 {
            let x = i as f64 * 0.7;
            let w = wrap_angle(x);
            assert!(w > -PI && w <= PI);
            assert!(((x - w) / TAU - ((x - w) / TAU).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_dt_leaves_drift_unchanged() {
        let mut d = DriftState::new(0.05, 9);
        d.offset = 0.3;
        d.advance(0.0);
        assert_eq!(d.offset, 0.3);
    }

    #[test]
    fn drift_variance_follows_the_diffusion_law() {
        let sigma = 0.05;
        let t = 4.0;
        let n = 10_000;
        let mut sum_sq = 0.0;
        for seed in 0..n {
            let mut d = DriftState::new(sigma, seed);
            // Several steps so the test covers step composition, with total
            // excursion small enough that wrapping never engages.
            for _ in 0..4 {
                d.advance(t / 4.0);
            }
            sum_sq += d.offset * d.offset;
        }
        let var = sum_sq / n as f64;
        let expected = sigma * sigma * t;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "variance {var}, expected {expected}"
        );
    }

    #[test]
    fn drift_increments_are_uncorrelated() {
        let sigma = 0.05;
        let n = 10_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for seed in 0..n as u64 {
            let mut d = DriftState::new(sigma, seed);
            d.advance(1.0);
            let first = d.offset;
            d.advance(1.0);
            xs.push(first);
            ys.push(d.offset - first);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mx = mean(&xs);
        let my = mean(&ys);
        let cov: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / n as f64;
        let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((cov / (sx * sy)).abs() < 0.05);
    }

    #[test]
    fn policy_duty_cycle_is_exact_accounting() {
        let policy = default_policy();
        let source = SourceModel::default();
        let expected = policy.scan_points as f64 * policy.pulses_per_point as f64
            / source.pulse_rate_hz;
        assert_eq!(policy.scan_time_s(&source), expected);
        assert!(policy.duty_cycle(&source) <= DUTY_CYCLE_LIMIT);
        policy.validate(&source).unwrap();
    }

    #[test]
    fn greedy_policy_is_rejected() {
        let mut policy = default_policy();
        policy.pulses_per_point *= 2; // duty would be ~0.18
        let err = policy.validate(&SourceModel::default()).unwrap_err();
        assert!(matches!(err, CalibrationError::PolicyRejected(_)));
    }

    #[test]
    fn narrow_scan_is_rejected() {
        let mut policy = default_policy();
        policy.scan_points = 4;
        assert!(policy.validate(&SourceModel::default()).is_err());
    }

    #[test]
    fn noiseless_fit_recovers_offset_and_visibility() {
        let samples: Vec<(f64, f64)> = (0..16)
            .map(|i| {
                let phi = TAU * i as f64 / 16.0;
                (phi, 100.0 * (1.0 + (phi - 0.7).cos()) / 2.0)
            })
            .collect();
        let fit = fit_fringe(&samples).unwrap();
        assert!((fit.offset - 0.7).abs() < 1e-6);
        assert!((fit.visibility - 1.0).abs() < 1e-9);
        assert!(fit.residual_rms < 1e-9);
    }

    #[test]
    fn flat_scan_has_no_usable_fringe() {
        let samples: Vec<(f64, f64)> =
            (0..16).map(|i| (TAU * i as f64 / 16.0, 50.0)).collect();
        assert_eq!(fit_fringe(&samples).unwrap_err(), CalibrationError::NoUsableFringe);
    }

    #[test]
    fn fit_is_exact_for_arbitrary_noiseless_fringes() {
        for (offset, vis) in [(0.0, 1.0), (-2.4, 0.3), (1.3, 0.05), (3.0, 0.8)] {
            let samples: Vec<(f64, f64)> = (0..32)
                .map(|i| {
                    let phi = TAU * i as f64 / 32.0;
                    (phi, 40.0 * (1.0 + vis * (phi - offset).cos()))
                })
                .collect();
            let fit = fit_fringe(&samples).unwrap();
            assert!(
                (wrap_angle(fit.offset - offset)).abs() < 1e-9,
                "offset {offset}"
            );
            assert!((fit.visibility - vis).abs() < 1e-9);
        }
    }

    #[test]
    fn poisson_noise_keeps_offset_within_band() {
        // 1e4 expected counts per point, true offset 1.3: the fitted offset
        // stays within +/- 0.05 in at least 99% of 1000 trials.
        use rand_distr::Poisson;
        let mut rng = stream(31, STREAM_SCAN);
        let true_offset = 1.3;
        let mut hits = 0;
        let trials = 1000;
        for _ in 0..trials {
            let samples: Vec<(f64, f64)> = (0..16)
                .map(|i| {
                    let phi = TAU * i as f64 / 16.0;
                    let mean = 1e4 * (1.0 + (phi - true_offset).cos()) / 2.0;
                    let y = if mean > 0.0 {
                        Poisson::new(mean).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    };
                    (phi, y)
                })
                .collect();
            let fit = fit_fringe(&samples).unwrap();
            if (wrap_angle(fit.offset - true_offset)).abs() < 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 990, "hits = {hits}/{trials}");
    }

    #[test]
    fn scan_counts_follow_the_fringe() {
        // Big pulse budget, no dark counts, no drift: the fitted fringe
        // residual is small against the amplitude.
        let mut link = LinkParams::default();
        link.fiber.length_km = 0.0;
        link.detector.dark_prob = 0.0;
        let mut policy = default_policy();
        policy.pulses_per_point = 1_000_000;
        policy.period_s = 10.0; // irrelevant here
        let mut drift = DriftState::new(0.0, 3);
        drift.offset = 0.9;
        let mut rng = stream(32, STREAM_SCAN);
        let (samples, duration) = fringe_scan(&link, &policy, &mut drift, 0.0, &mut rng);
        assert_eq!(
            duration,
            policy.scan_points as f64 * policy.pulses_per_point as f64
                / link.source.pulse_rate_hz
        );
        let as_f64: Vec<(f64, f64)> = samples.iter().map(|&(p, c)| (p, c as f64)).collect();
        let fit = fit_fringe(&as_f64).unwrap();
        let amplitude = fit.visibility
            * as_f64.iter().map(|&(_, y)| y).sum::<f64>()
            / samples.len() as f64;
        assert!(fit.residual_rms < 0.02 * amplitude);
        // Detector port rides the inverted fringe.
        assert!((wrap_angle(fit.offset - PI) - 0.9).abs() < 0.02);
    }

    #[test]
    fn dark_scan_returns_background_counts() {
        let mut link = LinkParams::default();
        link.source.mu_unmodulated = 0.0; // no light
        link.detector.dark_prob = 1e-3;
        let policy = default_policy();
        let mut drift = DriftState::new(0.0, 4);
        let mut rng = stream(33, STREAM_SCAN);
        let (samples, _) = fringe_scan(&link, &policy, &mut drift, 0.0, &mut rng);
        let expected = policy.pulses_per_point as f64 * link.detector.dark_prob;
        for (_, c) in samples {
            let sigma = expected.sqrt();
            assert!((c as f64 - expected).abs() < 5.0 * sigma);
        }
    }

    #[test]
    fn correction_locks_the_working_point() {
        // After each calibration the residual |drift - bias| must be small;
        // at the default link and policy at least 99% land within 0.1 rad.
        let link = LinkParams::default();
        let policy = default_policy();
        let mut rng = stream(34, STREAM_SCAN);
        let mut hits = 0;
        let trials = 400;
        for seed in 0..trials {
            let mut drift = DriftState::new(DEFAULT_DRIFT_SIGMA, seed as u64);
            // Start from a random offset as if drift had been running.
            drift.offset = wrap_angle(seed as f64 * 0.37);
            let bias = 0.0;
            let (fit, _) = calibrate_once(&link, &policy, &mut drift, bias, &mut rng);
            let fit = fit.unwrap();
            let correction = wrap_angle(fit.offset - PI);
            let residual = wrap_angle(drift.offset - (bias + correction));
            if residual.abs() < 0.1 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.99 * trials as f64, "hits = {hits}/{trials}");
    }

    #[test]
    fn operate_without_drift_corrects_once() {
        let link = LinkParams::default();
        let policy = default_policy();
        let log = operate(&link, &policy, 0.0, 0.8, true, 300.0, 5).unwrap();
        let corrections: Vec<f64> = log
            .rows
            .iter()
            .filter(|r| r.kind == IntervalKind::Calibration)
            .map(|r| r.correction.unwrap())
            .collect();
        assert!(corrections.len() >= 9);
        // One real correction for the power-on offset, then only fit noise.
        assert!((corrections[0] - 0.8).abs() < 0.08, "first {}", corrections[0]);
        for c in &corrections[1..] {
            assert!(c.abs() < 0.08, "late correction {c}");
        }
    }

    #[test]
    fn operate_rejects_too_short_runs() {
        let link = LinkParams::default();
        let policy = default_policy();
        assert!(operate(&link, &policy, 0.0, 0.0, true, 10.0, 5).is_err());
    }

    #[test]
    fn operate_duty_cycle_is_exact() {
        let link = LinkParams::default();
        let policy = default_policy();
        let log = operate(&link, &policy, DEFAULT_DRIFT_SIGMA, 0.0, true, 600.0, 6).unwrap();
        let expected = policy.scan_time_s(&link.source) / policy.period_s;
        assert!((log.duty_cycle() - expected).abs() < 1e-9);
        assert!(log.duty_cycle() < DUTY_CYCLE_LIMIT);
    }

    #[test]
    fn hour_at_canonical_loss_stays_locked() {
        // One simulated hour at 26 dB: the duty budget holds and every key
        // interval stays below the six percent error line.
        let link = LinkParams::default();
        let policy = default_policy();
        let log = operate(&link, &policy, DEFAULT_DRIFT_SIGMA, 0.0, true, 3600.0, 7).unwrap();
        assert!(log.duty_cycle() < DUTY_CYCLE_LIMIT);
        for row in log.rows.iter().filter(|r| r.kind == IntervalKind::KeyDistribution) {
            let q = row.qber.unwrap();
            assert!(q < 0.06, "interval at t={} has qber {q}", row.t_start);
        }
    }

    #[test]
    fn uncorrected_drift_breaches_the_secure_limit() {
        // Calibration off: the walk eventually pushes an interval past 10%,
        // and the breach happens in the drift range the interference law
        // predicts (phase error of order half a radian).
        let link = LinkParams::default();
        let policy = default_policy();
        let log = operate(&link, &policy, DEFAULT_DRIFT_SIGMA, 0.0, false, 3600.0, 8).unwrap();
        let breach = log
            .rows
            .iter()
            .find(|r| r.kind == IntervalKind::KeyDistribution && r.qber.unwrap_or(0.0) > 0.10);
        let breach = breach.expect("an uncorrected hour must breach the limit");
        assert!(
            breach.phase.abs() > 0.3 && breach.phase.abs() < 1.2,
            "breach at phase {}",
            breach.phase
        );
    }

    #[test]
    fn calibrated_qber_is_stationary_uncalibrated_is_not() {
        let link = LinkParams::default();
        let policy = default_policy();
        let on = operate(&link, &policy, DEFAULT_DRIFT_SIGMA, 0.0, true, 330.0, 9).unwrap();
        let qbers_on: Vec<f64> = on
            .rows
            .iter()
            .filter(|r| r.kind == IntervalKind::KeyDistribution)
            .map(|r| r.qber.unwrap())
            .collect();
        assert!(qbers_on.len() >= 10);
        assert!(
            mann_kendall_p(&qbers_on[..10]) > 0.05,
            "calibrated run shows a trend"
        );

        let off = operate(&link, &policy, DEFAULT_DRIFT_SIGMA, 0.0, false, 3600.0, 10).unwrap();
        let qbers_off: Vec<f64> = off
            .rows
            .iter()
            .filter(|r| r.kind == IntervalKind::KeyDistribution)
            .map(|r| r.qber.unwrap())
            .collect();
        assert!(
            mann_kendall_p(&qbers_off) < 0.05,
            "uncalibrated run shows no trend"
        );
    }

    fn mann_kendall_p(xs: &[f64]) -> f64 {
        let n = xs.len();
        let mut s = 0i64;
        for i in 0..n {
            for j in i + 1..n {
                s += (xs[j] - xs[i]).signum() as i64;
            }
        }
        let var = n as f64 * (n as f64 - 1.0) * (2.0 * n as f64 + 5.0) / 18.0;
        let z = if s > 0 {
            (s as f64 - 1.0) / var.sqrt()
        } else if s < 0 {
            (s as f64 + 1.0) / var.sqrt()
        } else {
            0.0
        };
        let normal = Normal::new(0.0, 1.0).unwrap();
        2.0 * (1.0 - normal.cdf(z.abs()))
    }

    #[test]
    fn qber_trigger_forces_early_recalibration() {
        let link = LinkParams::default();
        let mut policy = default_policy();
        policy.qber_trigger = Some(0.08);
        // Strong drift so intervals regularly wander past the trigger.
        let log = operate(&link, &policy, 0.2, 0.0, true, 300.0, 11).unwrap();
        let short_interval = log
            .rows
            .iter()
            .filter(|r| r.kind == IntervalKind::KeyDistribution)
            .any(|r| r.t_end - r.t_start < policy.period_s - policy.scan_time_s(&link.source) - 1.0);
        assert!(short_interval, "trigger never fired");
    }
}

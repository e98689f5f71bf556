//! Photon-counting statistics for the faint-pulse link.
//!
//! Covers the attenuated laser source, fiber loss, the gated single-photon
//! detector with dark counts, and the analytic error-rate model that the
//! Monte Carlo sessions are checked against. The detection model is the
//! Poisson-averaged exponential form, exact for a Poisson source behind
//! linear loss.

use rand::Rng;

/// Faint-pulse source parameters. Mean photon numbers are quoted at the
/// sender's output: `mu_signal` for the pulse that traversed the encoding
/// modulator, `mu_unmodulated` for the pulse that bypassed it.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub mu_signal: f64,
    pub mu_unmodulated: f64,
    pub pulse_width_ns: f64,
    pub pulse_rate_hz: f64,
}

impl Default for SourceModel {
    fn default() -> Self {
        Self {
            mu_signal: 0.1,
            mu_unmodulated: 0.4,
            pulse_width_ns: 1.0,
            pulse_rate_hz: 2.0e7,
        }
    }
}

/// Transmission fiber: length, attenuation coefficient and the seed that
/// fixes its (static) birefringence draw.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberSpec {
    pub length_km: f64,
    pub atten_db_per_km: f64,
    pub birefringence_seed: u64,
}

impl Default for FiberSpec {
    fn default() -> Self {
        Self {
            length_km: 125.0,
            atten_db_per_km: 0.208,
            birefringence_seed: 1,
        }
    }
}

/// Gated InGaAs detector model.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub efficiency: f64,
    /// Dark-click probability per gate.
    pub dark_prob: f64,
    pub gate_width_ns: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            efficiency: 0.10,
            dark_prob: 8.0e-7,
            gate_width_ns: 2.5,
        }
    }
}

/// Everything the click statistics depend on, end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    pub source: SourceModel,
    pub fiber: FiberSpec,
    pub detector: DetectorModel,
    /// Lumped receiver insertion loss (circulator, connectors), dB.
    pub bob_insertion_loss_db: f64,
    /// Misalignment error of the coding interferometers: probability that a
    /// detected signal photon decodes to the wrong bit at a perfect working
    /// point.
    pub e_opt: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            source: SourceModel::default(),
            fiber: FiberSpec::default(),
            detector: DetectorModel::default(),
            bob_insertion_loss_db: 0.5,
            e_opt: 0.030,
        }
    }
}

impl LinkParams {
    /// Same link with a different fiber length.
    pub fn with_length(&self, length_km: f64) -> Self {
        let mut link = self.clone();
        link.fiber.length_km = length_km;
        link
    }

    pub fn fiber_transmittance(&self) -> f64 {
        transmittance(self.fiber.length_km, self.fiber.atten_db_per_km)
    }

    pub fn bob_transmittance(&self) -> f64 {
        10f64.powf(-self.bob_insertion_loss_db / 10.0)
    }
}

/// Outcome of one detection gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClickOutcome {
    None,
    Signal,
    Dark,
}

impl ClickOutcome {
    pub fn clicked(self) -> bool {
        self != ClickOutcome::None
    }

    pub fn label(self) -> &'static str {
        match self {
            ClickOutcome::None => "none",
            ClickOutcome::Signal => "signal",
            ClickOutcome::Dark => "dark",
        }
    }
}

/// Power transmittance of `length_km` of fiber at `atten_db_per_km`.
pub fn transmittance(length_km: f64, atten_db_per_km: f64) -> f64 {
    assert!(length_km >= 0.0, "fiber length must be non-negative");
    10f64.powf(-length_km * atten_db_per_km / 10.0)
}

/// Detection probability for a pulse of mean photon number `mu`.
///
/// `interference_prob` is the optical probability delivered to the detection
/// bin, normalized internally to the ideal 1/4 interferometric ceiling, so
/// passing 0.25 means the full recombined pulse reaches the gate.
pub fn click_probability_for_mu(link: &LinkParams, mu: f64, interference_prob: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&interference_prob));
    let p_interf = interference_prob / 0.25;
    let eta = link.fiber_transmittance() * link.bob_transmittance() * link.detector.efficiency;
    1.0 - (-mu * eta * p_interf).exp()
}

/// Signal-click probability for a coded pulse.
pub fn signal_click_probability(link: &LinkParams, interference_prob: f64) -> f64 {
    click_probability_for_mu(link, link.source.mu_signal, interference_prob)
}

/// Draw one detection gate: a signal click with probability `p_signal`,
/// otherwise a dark click with probability `dark_prob`.
pub fn sample_click<R: Rng>(rng: &mut R, p_signal: f64, dark_prob: f64) -> ClickOutcome {
    debug_assert!((0.0..=1.0).contains(&p_signal));
    debug_assert!((0.0..=1.0).contains(&dark_prob));
    if rng.random::<f64>() < p_signal {
        ClickOutcome::Signal
    } else if rng.random::<f64>() < dark_prob {
        ClickOutcome::Dark
    } else {
        ClickOutcome::None
    }
}

/// Overall per-pulse click probability (signal plus dark).
pub fn total_click_probability(link: &LinkParams) -> f64 {
    let p_sig = signal_click_probability(link, 0.25);
    p_sig + (1.0 - p_sig) * link.detector.dark_prob
}

/// Aggregate detection counts for a block of pulses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PulseBatch {
    pub signal_clicks: u64,
    pub dark_clicks: u64,
    /// Matched-basis clicks, the sifted contribution.
    pub sifted: u64,
    /// Errors among the sifted bits.
    pub errors: u64,
}

impl PulseBatch {
    pub fn clicks(&self) -> u64 {
        self.signal_clicks + self.dark_clicks
    }

    pub fn accumulate(&mut self, other: &PulseBatch) {
        self.signal_clicks += other.signal_clicks;
        self.dark_clicks += other.dark_clicks;
        self.sifted += other.sifted;
        self.errors += other.errors;
    }
}

/// Sample the detection statistics of `n_pulses` in one shot.
///
/// Distributionally identical to the pulse-by-pulse session: uniform basis
/// match, signal clicks erring at `matched_error_prob`, dark clicks erring
/// at one half.
pub fn sample_pulse_batch<R: Rng>(
    rng: &mut R,
    n_pulses: u64,
    p_signal: f64,
    dark_prob: f64,
    matched_error_prob: f64,
) -> PulseBatch {
    use rand_distr::{Binomial, Distribution};
    let draw = |rng: &mut R, n: u64, p: f64| -> u64 {
        if n == 0 || p <= 0.0 {
            return 0;
        }
        Binomial::new(n, p.min(1.0)).expect("valid probability").sample(rng)
    };
    let signal_clicks = draw(rng, n_pulses, p_signal);
    let dark_clicks = draw(rng, n_pulses - signal_clicks, dark_prob);
    let matched_signal = draw(rng, signal_clicks, 0.5);
    let matched_dark = draw(rng, dark_clicks, 0.5);
    let errors = draw(rng, matched_signal, matched_error_prob) + draw(rng, matched_dark, 0.5);
    PulseBatch {
        signal_clicks,
        dark_clicks,
        sifted: matched_signal + matched_dark,
        errors,
    }
}

/// Expected sifted-key error rate, conditional on matched bases and a locked
/// working point.
///
/// `p_sig` is the basis-matched signal click probability at the constructive
/// setting; dark clicks carry no bit information, hence the factor 1/2.
pub fn expected_qber(link: &LinkParams) -> f64 {
    let p_sig = signal_click_probability(link, 0.25);
    let p_dark = link.detector.dark_prob;
    let denom = p_sig + p_dark;
    if denom <= 0.0 {
        // No clicks at all: any inference would be a coin flip.
        return 0.5;
    }
    (link.e_opt * p_sig + 0.5 * p_dark) / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, STREAM_DETECTOR};
    use proptest::prelude::*;

    #[test]
    fn transmittance_matches_total_attenuation() {
        // 26 dB over 125 km.
        let t = transmittance(125.0, 0.208);
        assert!((t - 10f64.powf(-2.6)).abs() < 1e-15);
        assert!((t - 2.512e-3).abs() < 1e-5);
    }

    #[test]
    fn transmittance_trivial_points() {
        assert_eq!(transmittance(0.0, 0.208), 1.0);
        assert!((transmittance(50.0, 0.2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn no_interference_no_signal_click() {
        let link = LinkParams::default();
        assert_eq!(signal_click_probability(&link, 0.0), 0.0);
    }

    #[test]
    fn click_probability_linear_in_small_mu() {
        let mut link = LinkParams::default();
        link.source.mu_signal = 1e-4;
        let p = signal_click_probability(&link, 0.25);
        let slope = p / link.source.mu_signal;
        let eta = link.fiber_transmittance() * link.bob_transmittance() * link.detector.efficiency;
        assert!((slope - eta).abs() / eta < 0.01);
    }

    #[test]
    fn click_probability_matches_monte_carlo() {
        // Default link at 125 km against a plain Bernoulli loop.
        let link = LinkParams::default();
        let p = signal_click_probability(&link, 0.25);
        let dark = link.detector.dark_prob;
        let mut rng = stream(7, STREAM_DETECTOR);
        let n = 10_000_000u64;
        let mut clicks = 0u64;
        for _ in 0..n {
            if sample_click(&mut rng, p, dark).clicked() {
                clicks += 1;
            }
        }
        let p_total = total_click_probability(&link);
        let sigma = (p_total * (1.0 - p_total) / n as f64).sqrt();
        let observed = clicks as f64 / n as f64;
        assert!(
            (observed - p_total).abs() < 3.0 * sigma,
            "observed {observed}, expected {p_total}, sigma {sigma}"
        );
    }

    #[test]
    fn sample_click_deterministic_edges() {
        let mut rng = stream(1, STREAM_DETECTOR);
        assert_eq!(sample_click(&mut rng, 1.0, 0.0), ClickOutcome::Signal);
        assert_eq!(sample_click(&mut rng, 0.0, 0.0), ClickOutcome::None);
    }

    #[test]
    fn sample_click_total_rate() {
        // Law of total probability: 0.3 + 0.7 * 0.1 = 0.37.
        let mut rng = stream(3, STREAM_DETECTOR);
        let n = 1_000_000u64;
        let clicks = (0..n)
            .filter(|_| sample_click(&mut rng, 0.3, 0.1).clicked())
            .count() as f64;
        let expect = 0.37;
        let sigma = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((clicks / n as f64 - expect).abs() < 3.0 * sigma);
    }

    #[test]
    fn qber_is_zero_without_darks_or_misalignment() {
        let mut link = LinkParams::default();
        link.detector.dark_prob = 0.0;
        link.e_opt = 0.0;
        assert_eq!(expected_qber(&link), 0.0);
    }

    #[test]
    fn qber_saturates_at_half_for_long_fiber() {
        let link = LinkParams::default().with_length(1.0e6);
        assert!((expected_qber(&link) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn qber_at_canonical_distance() {
        let q = expected_qber(&LinkParams::default());
        assert!(
            (0.04..=0.06).contains(&q),
            "expected_qber(125 km) = {q}, outside the frozen operating window"
        );
    }

    #[test]
    fn qber_monotone_in_length_and_dark_prob() {
        let link = LinkParams::default();
        let mut prev = 0.0;
        for l in (0..=200).step_by(10) {
            let q = expected_qber(&link.with_length(l as f64));
            assert!(q >= prev, "qber not monotone at {l} km");
            prev = q;
        }
        let mut prev = 0.0;
        for i in 0..20 {
            let mut link = LinkParams::default();
            link.detector.dark_prob = i as f64 * 1e-7;
            let q = expected_qber(&link);
            assert!(q >= prev);
            if i > 0 {
                assert!(q > prev, "strictly increasing once darks are present");
            }
            prev = q;
        }
    }

    #[test]
    fn qber_limits() {
        // dark -> 0 gives e_opt; length -> infinity gives 1/2.
        let mut link = LinkParams::default();
        link.detector.dark_prob = 0.0;
        assert!((expected_qber(&link) - link.e_opt).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn transmittance_is_multiplicative(a in 0.0..200.0f64, b in 0.0..200.0f64) {
            let atten = 0.208;
            let lhs = transmittance(a + b, atten);
            let rhs = transmittance(a, atten) * transmittance(b, atten);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn click_probability_stays_in_unit_interval(mu in 0.0..10.0f64, p in 0.0..1.0f64) {
            let mut link = LinkParams::default();
            link.source.mu_signal = mu.max(1e-12);
            let p = signal_click_probability(&link, p * 0.25);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}

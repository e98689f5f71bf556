//! Jones-calculus model of the twin unbalanced Michelson interferometers.
//!
//! Each coder splits a pulse at a fiber coupler, runs it out and back along a
//! short and a long arm terminated by mirrors, and recombines it. Arm and
//! channel birefringence are arbitrary 2x2 complex transfers; the return pass
//! through a reciprocal medium uses the transpose of the forward matrix. With
//! 90-degree Faraday mirrors every arm round trip collapses to det(T) times
//! the mirror matrix, which is what makes the link's interference contrast
//! independent of any polarization disturbance.
//!
//! Conventions, fixed once and absorbed by calibration:
//! - cross-port coupler coupling carries a factor i (symmetric beamsplitter);
//! - time bins are integer indices with spacing equal to the arm delay, the
//!   long arm adding exactly one bin per round trip;
//! - global phases are carried but never asserted on.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::channel::LinkParams;

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("loss must be non-negative, got {0} dB")]
    NegativeLoss(f64),
    #[error("visibility is undefined for an all-zero scan")]
    UndefinedVisibility,
    #[error("invalid interferometer: {0}")]
    InvalidSpec(String),
}

/// 2x2 complex amplitude transfer operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesMatrix {
    pub m00: Complex64,
    pub m01: Complex64,
    pub m10: Complex64,
    pub m11: Complex64,
}

impl JonesMatrix {
    pub fn new(m00: Complex64, m01: Complex64, m10: Complex64, m11: Complex64) -> Self {
        Self { m00, m01, m10, m11 }
    }

    pub fn identity() -> Self {
        Self::new(
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
        )
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.m00, self.m10, self.m01, self.m11)
    }

    pub fn dagger(&self) -> Self {
        Self::new(
            self.m00.conj(),
            self.m10.conj(),
            self.m01.conj(),
            self.m11.conj(),
        )
    }

    pub fn det(&self) -> Complex64 {
        self.m00 * self.m11 - self.m01 * self.m10
    }

    pub fn scale(&self, k: Complex64) -> Self {
        Self::new(self.m00 * k, self.m01 * k, self.m10 * k, self.m11 * k)
    }

    pub fn scale_real(&self, k: f64) -> Self {
        self.scale(Complex64::new(k, 0.0))
    }

    /// Entrywise maximum absolute difference.
    pub fn inf_norm_diff(&self, other: &Self) -> f64 {
        [
            self.m00 - other.m00,
            self.m01 - other.m01,
            self.m10 - other.m10,
            self.m11 - other.m11,
        ]
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
    }

    /// True when M†M = I to within `tol` per entry.
    pub fn is_unitary(&self, tol: f64) -> bool {
        self.dagger().mul(self).inf_norm_diff(&Self::identity()) < tol
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        Self::new(
            self.m00 * rhs.m00 + self.m01 * rhs.m10,
            self.m00 * rhs.m01 + self.m01 * rhs.m11,
            self.m10 * rhs.m00 + self.m11 * rhs.m10,
            self.m10 * rhs.m01 + self.m11 * rhs.m11,
        )
    }

    pub fn mul_vec(&self, v: &JonesVector) -> JonesVector {
        JonesVector {
            x: self.m00 * v.x + self.m01 * v.y,
            y: self.m10 * v.x + self.m11 * v.y,
        }
    }
}

impl std::ops::Mul for JonesMatrix {
    type Output = JonesMatrix;
    fn mul(self, rhs: JonesMatrix) -> JonesMatrix {
        JonesMatrix::mul(&self, &rhs)
    }
}

impl std::ops::Mul<JonesVector> for JonesMatrix {
    type Output = JonesVector;
    fn mul(self, rhs: JonesVector) -> JonesVector {
        self.mul_vec(&rhs)
    }
}

/// Two-component complex polarization amplitude. The squared norm is the
/// fraction of the pulse's probability carried by this amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    pub x: Complex64,
    pub y: Complex64,
}

impl JonesVector {
    pub fn new(x: Complex64, y: Complex64) -> Self {
        Self { x, y }
    }

    /// Unit horizontal polarization.
    pub fn horizontal() -> Self {
        Self::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
    }

    pub fn zero() -> Self {
        Self::new(Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.x.norm_sqr() + self.y.norm_sqr()
    }

    pub fn scale(&self, k: Complex64) -> Self {
        Self::new(self.x * k, self.y * k)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.x + other.x, self.y + other.y)
    }
}

/// Mirror terminating an interferometer arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorKind {
    /// 90-degree Faraday mirror: reflects with polarization rotated by 90
    /// degrees, F = [[0, 1], [-1, 0]] up to a global phase.
    Faraday90,
    /// Ordinary mirror, identity up to a global phase.
    PlainMirror,
}

impl MirrorKind {
    pub fn matrix(self) -> JonesMatrix {
        match self {
            MirrorKind::Faraday90 => faraday_mirror(),
            MirrorKind::PlainMirror => JonesMatrix::identity(),
        }
    }
}

/// Jones matrix of a 90-degree Faraday mirror.
pub fn faraday_mirror() -> JonesMatrix {
    JonesMatrix::new(
        Complex64::new(0.0, 0.0),
        Complex64::new(1.0, 0.0),
        Complex64::new(-1.0, 0.0),
        Complex64::new(0.0, 0.0),
    )
}

/// Draw a Haar-uniform 2x2 unitary scaled by an amplitude attenuation of
/// `loss_db` (power dB). Deterministic given the RNG state.
pub fn random_birefringence<R: Rng>(rng: &mut R, loss_db: f64) -> Result<JonesMatrix, OpticsError> {
    if loss_db < 0.0 {
        return Err(OpticsError::NegativeLoss(loss_db));
    }
    // Hopf coordinates on SU(2) plus a uniform overall phase: with
    // cos^2(theta) uniform on [0,1] and the three phases uniform on [0, tau)
    // this is the Haar measure on U(2).
    let u: f64 = rng.random();
    let theta = u.sqrt().asin();
    let alpha = rng.random::<f64>() * TAU;
    let psi = rng.random::<f64>() * TAU;
    let chi = rng.random::<f64>() * TAU;
    let a = Complex64::from_polar(theta.cos(), psi);
    let b = Complex64::from_polar(theta.sin(), chi);
    let phase = Complex64::from_polar(1.0, alpha);
    let unitary = JonesMatrix::new(a, b, -b.conj(), a.conj()).scale(phase);
    Ok(unitary.scale_real(10f64.powf(-loss_db / 20.0)))
}

/// Round trip along one arm: forward transfer `t`, mirror, return pass as the
/// transpose of `t` (reciprocal medium), plus any extra scalar phase.
pub fn arm_round_trip(t: &JonesMatrix, mirror: MirrorKind, extra_phase: f64) -> JonesMatrix {
    let rt = t.transpose().mul(&mirror.matrix()).mul(t);
    rt.scale(Complex64::from_polar(1.0, extra_phase))
}

/// One unbalanced Michelson coder.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferometerSpec {
    /// Power fraction coupled straight through to the short arm.
    pub coupler_ratio: f64,
    /// Arm delay in ns; one time-bin step per long-arm round trip.
    pub delay_ns: f64,
    pub short_arm: JonesMatrix,
    pub long_arm: JonesMatrix,
    /// Phase applied by the modulator over the long-arm round trip.
    pub modulator_phase: f64,
    /// Single-pass modulator insertion loss, dB.
    pub modulator_loss_db: f64,
    pub short_mirror: MirrorKind,
    pub long_mirror: MirrorKind,
}

impl Default for InterferometerSpec {
    fn default() -> Self {
        Self {
            coupler_ratio: 0.5,
            delay_ns: 7.5,
            short_arm: JonesMatrix::identity(),
            long_arm: JonesMatrix::identity(),
            modulator_phase: 0.0,
            modulator_loss_db: 3.0,
            short_mirror: MirrorKind::Faraday90,
            long_mirror: MirrorKind::Faraday90,
        }
    }
}

impl InterferometerSpec {
    /// Lossless coder with ideal arms and Faraday mirrors.
    pub fn ideal(modulator_phase: f64) -> Self {
        Self {
            modulator_loss_db: 0.0,
            modulator_phase,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        if !(self.coupler_ratio > 0.0 && self.coupler_ratio < 1.0) {
            return Err(OpticsError::InvalidSpec(format!(
                "coupler_ratio must lie in (0,1), got {}",
                self.coupler_ratio
            )));
        }
        if self.delay_ns <= 0.0 {
            return Err(OpticsError::InvalidSpec(format!(
                "delay_ns must be positive, got {}",
                self.delay_ns
            )));
        }
        if self.modulator_loss_db < 0.0 {
            return Err(OpticsError::InvalidSpec(format!(
                "modulator_loss_db must be non-negative, got {}",
                self.modulator_loss_db
            )));
        }
        Ok(())
    }

    pub fn short_round_trip(&self) -> JonesMatrix {
        arm_round_trip(&self.short_arm, self.short_mirror, 0.0)
    }

    /// Long-arm round trip, carrying the modulator phase and its double-pass
    /// loss.
    pub fn long_round_trip(&self) -> JonesMatrix {
        let amp = 10f64.powf(-self.modulator_loss_db / 10.0);
        arm_round_trip(&self.long_arm, self.long_mirror, self.modulator_phase).scale_real(amp)
    }
}

/// Coupler output side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Port {
    /// Back toward the input, through the circulator.
    Monitor,
    /// Onward out of the other coupler port.
    Forward,
}

/// Complex field amplitudes indexed by (time bin, output port).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeBinField {
    amps: BTreeMap<(i32, Port), JonesVector>,
}

impl TimeBinField {
    pub fn new() -> Self {
        Self::default()
    }

    /// Coherently add an amplitude into a bin.
    pub fn add_amplitude(&mut self, bin: i32, port: Port, v: JonesVector) {
        let entry = self.amps.entry((bin, port)).or_insert_with(JonesVector::zero);
        *entry = entry.add(&v);
    }

    pub fn amplitude(&self, bin: i32, port: Port) -> JonesVector {
        self.amps.get(&(bin, port)).copied().unwrap_or_else(JonesVector::zero)
    }

    pub fn power(&self, bin: i32, port: Port) -> f64 {
        self.amplitude(bin, port).norm_sqr()
    }

    pub fn total_power(&self) -> f64 {
        self.amps.values().map(JonesVector::norm_sqr).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(i32, Port), &JonesVector)> {
        self.amps.iter()
    }
}

/// Propagate one input pulse through a coder.
///
/// The short-arm contribution stays in `input_bin`, the long-arm contribution
/// lands in `input_bin + 1`; both are routed to the two coupler outputs with
/// the cross-coupling factor i.
pub fn interferometer_transfer(
    spec: &InterferometerSpec,
    input: &JonesVector,
    input_bin: i32,
) -> TimeBinField {
    debug_assert!(input.norm_sqr() <= 1.0 + 1e-12);
    let r = spec.coupler_ratio;
    let through = Complex64::new(r.sqrt(), 0.0);
    let cross = Complex64::new(0.0, (1.0 - r).sqrt());

    let short = spec.short_round_trip().mul_vec(input);
    let long = spec.long_round_trip().mul_vec(input);

    let mut field = TimeBinField::new();
    field.add_amplitude(input_bin, Port::Monitor, short.scale(through * through));
    field.add_amplitude(input_bin, Port::Forward, short.scale(through * cross));
    field.add_amplitude(input_bin + 1, Port::Monitor, long.scale(cross * cross));
    field.add_amplitude(input_bin + 1, Port::Forward, long.scale(cross * through));
    field
}

/// Fields at every output of the full link for one input pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndField {
    /// Light returned out of the sender's monitor port (bins 0 and 1).
    pub alice_monitor: TimeBinField,
    /// Field at the receiver: Monitor is the detector port behind the
    /// circulator, Forward the unused sink (bins 0 through 2).
    pub bob: TimeBinField,
}

impl EndToEndField {
    pub fn total_power(&self) -> f64 {
        self.alice_monitor.total_power() + self.bob.total_power()
    }

    /// Probability delivered to the detector gate at `bin`.
    pub fn detector_probability(&self, bin: i32) -> f64 {
        self.bob.power(bin, Port::Monitor)
    }
}

/// Compose sender coder, transmission channel and receiver coder for a unit
/// pulse injected at bin 0. Bin 1 at the receiver carries the sum of the
/// short-long and long-short path amplitudes.
pub fn end_to_end_field(
    alice: &InterferometerSpec,
    channel: &JonesMatrix,
    bob: &InterferometerSpec,
) -> EndToEndField {
    let input = JonesVector::horizontal();
    let alice_field = interferometer_transfer(alice, &input, 0);

    let mut bob_field = TimeBinField::new();
    let mut alice_monitor = TimeBinField::new();
    for (&(bin, port), amp) in alice_field.entries() {
        match port {
            Port::Monitor => alice_monitor.add_amplitude(bin, Port::Monitor, *amp),
            Port::Forward => {
                let arrived = channel.mul_vec(amp);
                let through_bob = interferometer_transfer(bob, &arrived, bin);
                for (&(b, p), a) in through_bob.entries() {
                    bob_field.add_amplitude(b, p, *a);
                }
            }
        }
    }
    EndToEndField {
        alice_monitor,
        bob: bob_field,
    }
}

/// Detector-port central-bin probability for ideal lossless coders at the
/// given modulator phases, behind `channel_unitary` scaled by the link's
/// fiber transmittance. With Faraday mirrors the value depends on the channel
/// only through that global attenuation.
pub fn central_bin_probability(
    alice_phase: f64,
    bob_phase: f64,
    link: &LinkParams,
    channel_unitary: &JonesMatrix,
) -> f64 {
    let alice = InterferometerSpec::ideal(alice_phase);
    let bob = InterferometerSpec::ideal(bob_phase);
    let amp = link.fiber_transmittance().sqrt();
    let channel = channel_unitary.scale_real(amp);
    end_to_end_field(&alice, &channel, &bob).detector_probability(1)
}

/// Central-bin probabilities at both receiver ports for ideal lossless coders
/// and a unit channel. The two ports are complementary; their sum is the 1/4
/// interferometric ceiling.
pub fn central_bin_port_probabilities(alice_phase: f64, bob_phase: f64) -> (f64, f64) {
    let alice = InterferometerSpec::ideal(alice_phase);
    let bob = InterferometerSpec::ideal(bob_phase);
    let field = end_to_end_field(&alice, &JonesMatrix::identity(), &bob);
    (
        field.bob.power(1, Port::Monitor),
        field.bob.power(1, Port::Forward),
    )
}

/// Fringe visibility (max - min) / (max + min) of a scan.
pub fn visibility(probabilities: &[f64]) -> Result<f64, OpticsError> {
    debug_assert!(probabilities.len() >= 8, "scan should span a full period");
    let max = probabilities.iter().cloned().fold(f64::MIN, f64::max);
    let min = probabilities.iter().cloned().fold(f64::MAX, f64::min);
    if max + min <= 0.0 {
        return Err(OpticsError::UndefinedVisibility);
    }
    Ok((max - min) / (max + min))
}

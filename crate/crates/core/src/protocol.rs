//! BB84 phase-coding protocol engine: pulse-by-pulse sessions, sifting,
//! error estimation with the 10% abort rule, reverse-flux monitoring, and an
//! exclusive-or pad for the key demo.
//!
//! A click's bit value is drawn from the two conjugate central-bin port
//! weights of the receiving interferometer, mixed with the misalignment
//! error; dark clicks decode to a coin flip. The output of a session stops at
//! the sifted-key layer: no reconciliation or privacy amplification.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::index::sample as index_sample;
use rand::Rng;
use thiserror::Error;

use crate::channel::{
    sample_click, signal_click_probability, ClickOutcome, LinkParams,
};
use crate::optics::central_bin_port_probabilities;
use crate::rng::{stream, STREAM_ALICE, STREAM_BOB, STREAM_CHANNEL, STREAM_DETECTOR};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("a session needs at least one pulse")]
    EmptySession,
    #[error("cannot estimate errors on an empty key")]
    EmptyKey,
    #[error("key exhausted: need {needed} bits, have {available}")]
    KeyExhausted { needed: usize, available: usize },
    #[error("key bits must be 0 or 1")]
    InvalidKeyBit,
}

/// Measurement basis of the phase coding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn label(self) -> &'static str {
        match self {
            Basis::Z => "Z",
            Basis::X => "X",
        }
    }
}

/// One BB84 symbol: a bit in a basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Symbol {
    pub bit: u8,
    pub basis: Basis,
}

/// Sender modulator phase for a symbol.
pub fn alice_phase(sym: Symbol) -> f64 {
    match (sym.basis, sym.bit) {
        (Basis::Z, 0) => 0.0,
        (Basis::Z, _) => PI,
        (Basis::X, 0) => FRAC_PI_2,
        (Basis::X, _) => 3.0 * FRAC_PI_2,
    }
}

/// Receiver modulator phase for a basis choice.
pub fn bob_phase(basis: Basis) -> f64 {
    match basis {
        Basis::Z => 0.0,
        Basis::X => FRAC_PI_2,
    }
}

/// Everything recorded about one pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseRecord {
    pub index: u64,
    pub alice: Symbol,
    pub alice_phase: f64,
    pub bob_basis: Basis,
    pub bob_phase: f64,
    pub outcome: ClickOutcome,
    pub decoded_bit: Option<u8>,
}

/// Ordered per-pulse log of one session.
#[derive(Debug, Clone)]
pub struct SessionTranscript {
    pub records: Vec<PulseRecord>,
    pub link: LinkParams,
    pub seed: u64,
}

/// Sifted key material: matched-basis clicked positions, with both parties'
/// bits kept side by side for error estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftedKey {
    pub indices: Vec<u64>,
    pub alice_bits: Vec<u8>,
    pub bob_bits: Vec<u8>,
    /// Error rate measured on the disclosed sample, once estimated.
    pub sample_qber: Option<f64>,
    pub aborted: bool,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bob_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bob_bits.is_empty()
    }
}

/// Decode weight of bit 0 given the effective phase settings, from the two
/// central-bin port probabilities.
fn bit0_weight(alice_phase: f64, bob_phase_eff: f64) -> f64 {
    let (monitor, forward) = central_bin_port_probabilities(alice_phase, bob_phase_eff);
    forward / (monitor + forward)
}

struct PulseSettings {
    p_signal: f64,
    bit0_weight: f64,
}

/// Precomputed optics for the eight (symbol, receiver basis) combinations.
fn settings_table(link: &LinkParams, working_point_error: f64) -> [PulseSettings; 8] {
    std::array::from_fn(|i| {
        let bit = (i & 1) as u8;
        let basis_a = if i & 2 == 0 { Basis::Z } else { Basis::X };
        let basis_b = if i & 4 == 0 { Basis::Z } else { Basis::X };
        let pa = alice_phase(Symbol { bit, basis: basis_a });
        // The working-point error shifts the receiver's effective phase.
        let pb = bob_phase(basis_b) - working_point_error;
        let (monitor, forward) = central_bin_port_probabilities(pa, pb);
        PulseSettings {
            p_signal: signal_click_probability(link, monitor + forward),
            bit0_weight: forward / (monitor + forward),
        }
    })
}

fn table_index(sym: Symbol, bob: Basis) -> usize {
    sym.bit as usize
        | if sym.basis == Basis::X { 2 } else { 0 }
        | if bob == Basis::X { 4 } else { 0 }
}

/// Run a pulse-by-pulse session. Alice's symbols and Bob's bases are uniform
/// and independent; every pulse goes through the optics and detection stack.
/// `working_point_error` is the residual interference phase offset left by
/// drift after the last correction.
pub fn run_session(
    link: &LinkParams,
    n_pulses: u64,
    working_point_error: f64,
    seed: u64,
) -> Result<SessionTranscript, ProtocolError> {
    if n_pulses == 0 {
        return Err(ProtocolError::EmptySession);
    }
    let mut alice_rng = stream(seed, STREAM_ALICE);
    let mut bob_rng = stream(seed, STREAM_BOB);
    let mut det_rng = stream(seed, STREAM_DETECTOR);
    // The channel unitary is drawn once per session from the fiber's own
    // seed; Faraday mirrors make every downstream probability independent of
    // it, which the optics tests pin down.
    let _channel = crate::optics::random_birefringence(
        &mut stream(link.fiber.birefringence_seed, STREAM_CHANNEL),
        0.0,
    )
    .expect("zero loss");

    let table = settings_table(link, working_point_error);
    let dark = link.detector.dark_prob;
    let e_opt = link.e_opt;

    let mut records = Vec::with_capacity(n_pulses as usize);
    for index in 0..n_pulses {
        let sym = Symbol {
            bit: alice_rng.random_range(0..2u8),
            basis: if alice_rng.random::<bool>() { Basis::Z } else { Basis::X },
        };
        let bob_basis = if bob_rng.random::<bool>() { Basis::Z } else { Basis::X };
        let s = &table[table_index(sym, bob_basis)];

        let outcome = sample_click(&mut det_rng, s.p_signal, dark);
        let decoded_bit = match outcome {
            ClickOutcome::None => None,
            ClickOutcome::Signal => {
                let p0 = (1.0 - 2.0 * e_opt) * s.bit0_weight + e_opt;
                Some(if det_rng.random::<f64>() < p0 { 0 } else { 1 })
            }
            ClickOutcome::Dark => Some(det_rng.random_range(0..2u8)),
        };

        records.push(PulseRecord {
            index,
            alice: sym,
            alice_phase: alice_phase(sym),
            bob_basis,
            bob_phase: bob_phase(bob_basis),
            outcome,
            decoded_bit,
        });
    }

    Ok(SessionTranscript {
        records,
        link: link.clone(),
        seed,
    })
}

/// Keep the records with a click and matching bases; the key bit is the
/// decoded bit.
pub fn sift(transcript: &SessionTranscript) -> SiftedKey {
    let mut indices = Vec::new();
    let mut alice_bits = Vec::new();
    let mut bob_bits = Vec::new();
    for rec in &transcript.records {
        if rec.outcome.clicked() && rec.alice.basis == rec.bob_basis {
            if let Some(bit) = rec.decoded_bit {
                indices.push(rec.index);
                alice_bits.push(rec.alice.bit);
                bob_bits.push(bit);
            }
        }
    }
    SiftedKey {
        indices,
        alice_bits,
        bob_bits,
        sample_qber: None,
        aborted: false,
    }
}

/// Disclose a uniform random sample of the key, measure its error rate, and
/// abort if it exceeds `limit`. Disclosed bits are removed from the key.
pub fn estimate_and_gate<R: Rng>(
    key: &SiftedKey,
    sample_fraction: f64,
    rng: &mut R,
    limit: f64,
) -> Result<SiftedKey, ProtocolError> {
    assert!(sample_fraction > 0.0 && sample_fraction < 1.0);
    let n = key.len();
    if n == 0 {
        return Err(ProtocolError::EmptyKey);
    }
    let m = ((n as f64 * sample_fraction).round() as usize).clamp(1, n);
    let mut disclosed = index_sample(rng, n, m).into_vec();
    disclosed.sort_unstable();

    let errors = disclosed
        .iter()
        .filter(|&&i| key.alice_bits[i] != key.bob_bits[i])
        .count();
    let qber = errors as f64 / m as f64;
    let aborted = qber > limit;

    let mut retained = SiftedKey {
        indices: Vec::new(),
        alice_bits: Vec::new(),
        bob_bits: Vec::new(),
        sample_qber: Some(qber),
        aborted,
    };
    if !aborted {
        let mut next = disclosed.iter().copied().peekable();
        for i in 0..n {
            if next.peek() == Some(&i) {
                next.next();
                continue;
            }
            retained.indices.push(key.indices[i]);
            retained.alice_bits.push(key.alice_bits[i]);
            retained.bob_bits.push(key.bob_bits[i]);
        }
    }
    Ok(retained)
}

/// Reverse-photon monitor at the sender's circulator.
#[derive(Debug, Clone, PartialEq)]
pub struct TrojanMonitor {
    /// Number of pulses per monitoring window.
    pub window: u64,
    /// Alarm threshold in counts.
    pub threshold: f64,
    /// Counts observed in the current window.
    pub observed: u64,
}

impl TrojanMonitor {
    /// Threshold at mean + 5 sqrt(mean) of the expected legitimate reverse
    /// flux, a five-sigma Poisson tail.
    pub fn from_expected_flux(window: u64, reverse_rate_per_pulse: f64) -> Self {
        assert!(window > 0);
        let mean = window as f64 * reverse_rate_per_pulse;
        Self {
            window,
            threshold: mean + 5.0 * mean.sqrt(),
            observed: 0,
        }
    }
}

/// Alarm when the observed reverse counts exceed the threshold.
pub fn trojan_check(monitor: &TrojanMonitor) -> bool {
    monitor.observed as f64 > monitor.threshold
}

/// Bitwise exclusive-or of the plaintext with key bits, eight bits per byte,
/// most significant bit first. The same call decrypts.
pub fn otp_encrypt(key_bits: &[u8], plaintext: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    let needed = plaintext.len() * 8;
    if key_bits.len() < needed {
        return Err(ProtocolError::KeyExhausted {
            needed,
            available: key_bits.len(),
        });
    }
    let mut out = Vec::with_capacity(plaintext.len());
    for (i, byte) in plaintext.iter().enumerate() {
        let mut pad = 0u8;
        for (j, &bit) in key_bits[i * 8..i * 8 + 8].iter().enumerate() {
            if bit > 1 {
                return Err(ProtocolError::InvalidKeyBit);
            }
            pad |= bit << (7 - j);
        }
        out.push(byte ^ pad);
    }
    Ok(out)
}

pub fn otp_decrypt(key_bits: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    otp_encrypt(key_bits, ciphertext)
}

/// Pack key bits into a lowercase hex string, MSB first, zero-padded to a
/// whole number of bytes.
pub fn key_to_hex(bits: &[u8]) -> String {
    let mut out = String::with_capacity(bits.len().div_ceil(8) * 2);
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (j, &bit) in chunk.iter().enumerate() {
            byte |= (bit & 1) << (7 - j);
        }
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

//! Flat INI-style experiment configuration.
//!
//! Sections mirror the simulation layers: `[source]`, `[fiber]`,
//! `[detector]`, `[link]`, `[policy]`, `[run]`. Every key has a documented
//! default; an empty file is the canonical 125 km scenario. Unknown keys are
//! rejected with their line number, and invariant violations name the
//! offending field.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::calibration::{CalibrationPolicy, DUTY_CYCLE_LIMIT};
use crate::channel::LinkParams;

/// Arm delay of the coders, ns. Fixed by the hardware model.
pub const INTERFEROMETER_DELAY_NS: f64 = 7.5;

/// Extra misalignment the deployed link carries over the lab one.
pub const FIELD_EXTRA_E_OPT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: cannot parse `{text}`")]
    Parse { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {value}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("{field}: {message}")]
    Invariant { field: String, message: String },
    #[error("no seed given: set run.seed or pass --seed")]
    MissingSeed,
}

/// Which deployment the run models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scenario {
    #[default]
    Lab,
    Field,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Scenario::Lab => "lab",
            Scenario::Field => "field",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub link: LinkParams,
    pub policy: CalibrationPolicy,
    pub scenario: Scenario,
    /// Drift rate of the uncorrected working point, rad/sqrt(s).
    pub drift_sigma: f64,
    /// Simulated duration for stability and field runs, seconds.
    pub duration_s: f64,
    /// Pulse budget for transcript-level sessions.
    pub n_pulses: u64,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            link: LinkParams::default(),
            policy: CalibrationPolicy::default(),
            scenario: Scenario::Lab,
            drift_sigma: crate::calibration::DEFAULT_DRIFT_SIGMA,
            duration_s: 3600.0,
            n_pulses: 200_000,
            seed: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Link parameters with the scenario penalty applied.
    pub fn effective_link(&self) -> LinkParams {
        let mut link = self.link.clone();
        if self.scenario == Scenario::Field {
            link.e_opt += FIELD_EXTRA_E_OPT;
        }
        link
    }

    pub fn require_seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::MissingSeed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |field: &str, message: String| ConfigError::Invariant {
            field: field.into(),
            message,
        };
        let src = &self.link.source;
        if src.mu_signal <= 0.0 {
            return Err(inv("source.mu_signal", format!("must be positive, got {}", src.mu_signal)));
        }
        if src.mu_unmodulated < src.mu_signal {
            return Err(inv(
                "source.mu_unmodulated",
                format!(
                    "must be at least mu_signal = {}, got {}",
                    src.mu_signal, src.mu_unmodulated
                ),
            ));
        }
        if src.pulse_width_ns <= 0.0 || src.pulse_width_ns >= INTERFEROMETER_DELAY_NS {
            return Err(inv(
                "source.pulse_width_ns",
                format!(
                    "time bins separate only for widths in (0, {INTERFEROMETER_DELAY_NS}) ns, got {}",
                    src.pulse_width_ns
                ),
            ));
        }
        if src.pulse_rate_hz <= 0.0 {
            return Err(inv("source.pulse_rate_hz", format!("must be positive, got {}", src.pulse_rate_hz)));
        }
        let fiber = &self.link.fiber;
        if fiber.length_km < 0.0 {
            return Err(inv("fiber.length_km", format!("length must be >= 0 km, got {}", fiber.length_km)));
        }
        if fiber.atten_db_per_km <= 0.0 {
            return Err(inv(
                "fiber.atten_db_per_km",
                format!("attenuation must be positive, got {}", fiber.atten_db_per_km),
            ));
        }
        let det = &self.link.detector;
        if !(det.efficiency > 0.0 && det.efficiency <= 1.0) {
            return Err(inv("detector.efficiency", format!("must lie in (0, 1], got {}", det.efficiency)));
        }
        if !(0.0..1.0).contains(&det.dark_prob) {
            return Err(inv("detector.dark_prob", format!("must lie in [0, 1), got {}", det.dark_prob)));
        }
        if det.gate_width_ns <= 0.0 {
            return Err(inv("detector.gate_width_ns", format!("must be positive, got {}", det.gate_width_ns)));
        }
        if self.link.bob_insertion_loss_db < 0.0 {
            return Err(inv(
                "link.bob_insertion_loss_db",
                format!("must be >= 0 dB, got {}", self.link.bob_insertion_loss_db),
            ));
        }
        if !(0.0..=0.5).contains(&self.link.e_opt) {
            return Err(inv("link.e_opt", format!("must lie in [0, 0.5], got {}", self.link.e_opt)));
        }
        if self.scenario == Scenario::Field && self.link.e_opt + FIELD_EXTRA_E_OPT > 0.5 {
            return Err(inv(
                "link.e_opt",
                format!("field scenario adds {FIELD_EXTRA_E_OPT}; effective value must stay within [0, 0.5]"),
            ));
        }
        if self.policy.scan_points < 8 {
            return Err(inv("policy.scan_points", format!("need at least 8, got {}", self.policy.scan_points)));
        }
        if self.policy.pulses_per_point == 0 {
            return Err(inv("policy.pulses_per_point", "must be positive".into()));
        }
        if self.policy.period_s <= 0.0 {
            return Err(inv("policy.period_s", format!("must be positive, got {}", self.policy.period_s)));
        }
        let duty = self.policy.duty_cycle(src);
        if duty > DUTY_CYCLE_LIMIT {
            return Err(inv(
                "policy.period_s",
                format!("scan time / period = {duty:.4} exceeds the {DUTY_CYCLE_LIMIT} duty budget"),
            ));
        }
        if let Some(q) = self.policy.qber_trigger {
            if !(q > 0.0 && q < 1.0) {
                return Err(inv("policy.qber_trigger", format!("must lie in (0, 1), got {q}")));
            }
        }
        if self.drift_sigma < 0.0 {
            return Err(inv("run.drift_sigma", format!("must be >= 0, got {}", self.drift_sigma)));
        }
        if self.duration_s <= 0.0 {
            return Err(inv("run.duration_s", format!("must be positive, got {}", self.duration_s)));
        }
        if self.n_pulses == 0 {
            return Err(inv("run.n_pulses", "must be positive".into()));
        }
        Ok(())
    }
}

/// Parse configuration text. Unknown keys and malformed lines are errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut section = String::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find(['#', ';']) {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_lowercase();
            match section.as_str() {
                "source" | "fiber" | "detector" | "link" | "policy" | "run" => continue,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: line_no,
                        key: format!("[{section}]"),
                    })
                }
            }
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: line_no,
                text: raw.trim().to_string(),
            });
        };
        let key = key.trim().to_lowercase();
        let value = value.trim().to_string();
        apply_key(&mut cfg, &section, &key, &value, line_no)?;
    }

    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(
    cfg: &mut ExperimentConfig,
    section: &str,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ConfigError> {
    let full_key = || format!("{section}.{key}");
    let bad = |value: &str| ConfigError::BadValue {
        line,
        key: full_key(),
        value: value.to_string(),
    };
    let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad(v));
    let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad(v));
    let parse_u32 = |v: &str| v.parse::<u32>().map_err(|_| bad(v));

    match (section, key) {
        ("source", "mu_signal") => cfg.link.source.mu_signal = parse_f64(value)?,
        ("source", "mu_unmodulated") => cfg.link.source.mu_unmodulated = parse_f64(value)?,
        ("source", "pulse_width_ns") => cfg.link.source.pulse_width_ns = parse_f64(value)?,
        ("source", "pulse_rate_hz") => cfg.link.source.pulse_rate_hz = parse_f64(value)?,
        ("fiber", "length_km") => cfg.link.fiber.length_km = parse_f64(value)?,
        ("fiber", "atten_db_per_km") => cfg.link.fiber.atten_db_per_km = parse_f64(value)?,
        ("fiber", "birefringence_seed") => cfg.link.fiber.birefringence_seed = parse_u64(value)?,
        ("detector", "efficiency") => cfg.link.detector.efficiency = parse_f64(value)?,
        ("detector", "dark_prob") => cfg.link.detector.dark_prob = parse_f64(value)?,
        ("detector", "gate_width_ns") => cfg.link.detector.gate_width_ns = parse_f64(value)?,
        ("link", "bob_insertion_loss_db") => cfg.link.bob_insertion_loss_db = parse_f64(value)?,
        ("link", "e_opt") => cfg.link.e_opt = parse_f64(value)?,
        ("policy", "period_s") => cfg.policy.period_s = parse_f64(value)?,
        ("policy", "scan_points") => cfg.policy.scan_points = parse_u32(value)?,
        ("policy", "pulses_per_point") => cfg.policy.pulses_per_point = parse_u64(value)?,
        ("policy", "qber_trigger") => {
            cfg.policy.qber_trigger = match value {
                "none" | "off" => None,
                v => Some(parse_f64(v)?),
            }
        }
        ("run", "scenario") => {
            cfg.scenario = match value.to_lowercase().as_str() {
                "lab" => Scenario::Lab,
                "field" => Scenario::Field,
                v => return Err(bad(v)),
            }
        }
        ("run", "drift_sigma") => cfg.drift_sigma = parse_f64(value)?,
        ("run", "duration_s") => cfg.duration_s = parse_f64(value)?,
        ("run", "n_pulses") => cfg.n_pulses = parse_u64(value)?,
        ("run", "seed") => cfg.seed = Some(parse_u64(value)?),
        ("run", "out") => cfg.out = Some(PathBuf::from(value)),
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: full_key(),
            })
        }
    }
    Ok(())
}

/// Read and parse a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Serialize a configuration in canonical form: fixed section and key order,
/// shortest round-trip float formatting. `parse_config(dump_config(c))`
/// reproduces `c`.
pub fn dump_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let src = &cfg.link.source;
    out.push_str("[source]\n");
    out.push_str(&format!("mu_signal = {}\n", src.mu_signal));
    out.push_str(&format!("mu_unmodulated = {}\n", src.mu_unmodulated));
    out.push_str(&format!("pulse_width_ns = {}\n", src.pulse_width_ns));
    out.push_str(&format!("pulse_rate_hz = {}\n", src.pulse_rate_hz));
    let fiber = &cfg.link.fiber;
    out.push_str("\n[fiber]\n");
    out.push_str(&format!("length_km = {}\n", fiber.length_km));
    out.push_str(&format!("atten_db_per_km = {}\n", fiber.atten_db_per_km));
    out.push_str(&format!("birefringence_seed = {}\n", fiber.birefringence_seed));
    let det = &cfg.link.detector;
    out.push_str("\n[detector]\n");
    out.push_str(&format!("efficiency = {}\n", det.efficiency));
    out.push_str(&format!("dark_prob = {}\n", det.dark_prob));
    out.push_str(&format!("gate_width_ns = {}\n", det.gate_width_ns));
    out.push_str("\n[link]\n");
    out.push_str(&format!(
        "bob_insertion_loss_db = {}\n",
        cfg.link.bob_insertion_loss_db
    ));
    out.push_str(&format!("e_opt = {}\n", cfg.link.e_opt));
    out.push_str("\n[policy]\n");
    out.push_str(&format!("period_s = {}\n", cfg.policy.period_s));
    out.push_str(&format!("scan_points = {}\n", cfg.policy.scan_points));
    out.push_str(&format!("pulses_per_point = {}\n", cfg.policy.pulses_per_point));
    match cfg.policy.qber_trigger {
        Some(q) => out.push_str(&format!("qber_trigger = {q}\n")),
        None => out.push_str("qber_trigger = none\n"),
    }
    out.push_str("\n[run]\n");
    out.push_str(&format!("scenario = {}\n", cfg.scenario));
    out.push_str(&format!("drift_sigma = {}\n", cfg.drift_sigma));
    out.push_str(&format!("duration_s = {}\n", cfg.duration_s));
    out.push_str(&format!("n_pulses = {}\n", cfg.n_pulses));
    if let Some(seed) = cfg.seed {
        out.push_str(&format!("seed = {seed}\n"));
    }
    if let Some(path) = &cfg.out {
        out.push_str(&format!("out = {}\n", path.display()));
    }
    out
}

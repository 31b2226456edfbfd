//! Probabilistic effect chain `X' = f_1(f_2(...f_n(X)...))`.
//!
//! Each stage fires independently with its own probability and, when it
//! fires, draws its parameter uniformly from a closed range. Stage `n` is
//! applied first and stage `1` last.
//!
//! Randomness comes from a per-utterance stream seeded by
//! `derive_seed(global_seed, utterance_id)`, and every stage consumes exactly
//! [`DRAWS_PER_STAGE`] uniforms whether or not it fires. Changing one stage's
//! probability therefore never perturbs the draws of the others, and outputs
//! do not depend on how utterances are spread over workers.
//!
//! # Config file grammar (TOML)
//!
//! ```toml
//! seed = 7            # optional, usually overridden by --seed
//!
//! [[effect]]          # spec 1, applied last
//! kind = "speed"      # speed | pitch | lowpass | noise_mix
//! probability = 0.5
//! range = [0.95, 1.05]
//!
//! [[effect]]          # spec n, applied first
//! kind = "noise_mix"
//! probability = 0.5
//! range = [25.0, 35.0]   # SNR in dB
//! max_segments = 4       # noise_mix only, 1..=4
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::effects::{self, EffectError, NoiseBank, NoisePlacement, MAX_NOISE_SEGMENTS};
use crate::seed::{derive_seed, item_rng};

/// Uniform draws consumed per stage: fire, parameter, segment count, and an
/// (entry, offset) pair for each possible noise segment.
pub const DRAWS_PER_STAGE: usize = 3 + 2 * MAX_NOISE_SEGMENTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Speed,
    Pitch,
    Lowpass,
    NoiseMix,
}

/// Closed interval `[low, high]`, written as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ParamRange {
    pub low: f64,
    pub high: f64,
}

impl ParamRange {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    /// Maps a uniform in `[0, 1)` linearly onto the range.
    pub fn at(&self, u: f64) -> f64 {
        self.low + u * (self.high - self.low)
    }
}

impl From<[f64; 2]> for ParamRange {
    fn from([low, high]: [f64; 2]) -> Self {
        Self { low, high }
    }
}

impl From<ParamRange> for [f64; 2] {
    fn from(r: ParamRange) -> Self {
        [r.low, r.high]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectSpec {
    pub kind: EffectKind,
    pub probability: f64,
    /// Ratio for speed/pitch, Hz for lowpass, dB SNR for noise_mix.
    pub range: ParamRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_segments: Option<usize>,
}

impl EffectSpec {
    pub fn new(kind: EffectKind, probability: f64, range: ParamRange) -> Self {
        Self {
            kind,
            probability,
            range,
            max_segments: None,
        }
    }

    pub fn noise_mix(probability: f64, snr_db: ParamRange, max_segments: usize) -> Self {
        Self {
            kind: EffectKind::NoiseMix,
            probability,
            range: snr_db,
            max_segments: Some(max_segments),
        }
    }

    fn validate(&self, index: usize) -> Result<(), ChainError> {
        let invalid = |message: String| ChainError::InvalidSpec { index, message };
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(invalid(format!("probability {} not in [0, 1]", self.probability)));
        }
        let ParamRange { low, high } = self.range;
        if !(low.is_finite() && high.is_finite() && low <= high) {
            return Err(invalid(format!("range [{low}, {high}] is not an ordered finite interval")));
        }
        match self.kind {
            EffectKind::Speed | EffectKind::Pitch => {
                if low < effects::MIN_FACTOR || high > effects::MAX_FACTOR {
                    return Err(invalid(format!(
                        "ratio range must lie within [{}, {}]",
                        effects::MIN_FACTOR,
                        effects::MAX_FACTOR
                    )));
                }
            }
            EffectKind::Lowpass => {
                if low <= 0.0 {
                    return Err(invalid("cutoff range must be positive".into()));
                }
            }
            EffectKind::NoiseMix => match self.max_segments {
                Some(n) if (1..=MAX_NOISE_SEGMENTS).contains(&n) => {}
                other => {
                    return Err(invalid(format!(
                        "noise_mix needs max_segments in 1..={MAX_NOISE_SEGMENTS}, got {other:?}"
                    )))
                }
            },
        }
        if self.kind != EffectKind::NoiseMix && self.max_segments.is_some() {
            return Err(invalid("max_segments only applies to noise_mix".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(rename = "seed", default)]
    pub global_seed: u64,
    /// Specs `1..=n` in order; application runs from the last to the first.
    #[serde(rename = "effect", default)]
    pub specs: Vec<EffectSpec>,
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("effect {index}: {message}")]
    InvalidSpec { index: usize, message: String },
    #[error("cannot parse chain config: {0}")]
    Parse(String),
    #[error("input audio is empty")]
    EmptyInput,
    #[error("trace has {trace} steps but the operation expects {expected}")]
    TraceMismatch { trace: usize, expected: usize },
    #[error("effect {index} ({kind:?}) failed: {source}")]
    Effect {
        index: usize,
        kind: EffectKind,
        #[source]
        source: EffectError,
    },
}

/// Speed and pitch in [0.95, 1.05], low-pass cutoff in [300, 1000] Hz and up
/// to four noise clips at 25-35 dB SNR, each firing with probability 0.5.
pub fn default_paper_chain() -> ChainConfig {
    ChainConfig {
        global_seed: 0,
        specs: vec![
            EffectSpec::new(EffectKind::Speed, 0.5, ParamRange::new(0.95, 1.05)),
            EffectSpec::new(EffectKind::Pitch, 0.5, ParamRange::new(0.95, 1.05)),
            EffectSpec::new(EffectKind::Lowpass, 0.5, ParamRange::new(300.0, 1000.0)),
            EffectSpec::noise_mix(0.5, ParamRange::new(25.0, 35.0), 4),
        ],
    }
}

impl ChainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.global_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        self.specs
            .iter()
            .enumerate()
            .try_for_each(|(i, s)| s.validate(i + 1))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ChainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ChainError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("chain config always serializes")
    }

    /// Whether any stage can touch the noise bank.
    pub fn uses_noise(&self) -> bool {
        self.specs
            .iter()
            .any(|s| s.kind == EffectKind::NoiseMix && s.probability > 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based spec index.
    pub index: usize,
    pub kind: EffectKind,
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoisePlacement>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// Everything drawn while augmenting one utterance. Steps are stored in spec
/// order (`steps[0]` is spec 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedTrace {
    pub utterance_id: String,
    pub seed: u64,
    pub steps: Vec<TraceStep>,
}

impl AppliedTrace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace always serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn applied_count(&self) -> usize {
        self.steps.iter().filter(|s| s.applied).count()
    }
}

fn apply_step(
    buffer: &AudioBuffer,
    kind: EffectKind,
    param: f64,
    placements: &[NoisePlacement],
    bank: &NoiseBank,
) -> Result<(AudioBuffer, bool), EffectError> {
    match kind {
        EffectKind::Speed => effects::apply_speed(buffer, param).map(|b| (b, false)),
        EffectKind::Pitch => effects::apply_pitch(buffer, param).map(|b| (b, false)),
        EffectKind::Lowpass => effects::apply_lowpass(buffer, param).map(|b| (b, false)),
        EffectKind::NoiseMix => effects::mix_noise_at(buffer, bank, placements, param)
            .map(|m| (m.audio, m.degenerate)),
    }
}

/// Runs the chain on one utterance and records every draw.
pub fn apply_chain(
    config: &ChainConfig,
    buffer: &AudioBuffer,
    utterance_id: &str,
    bank: &NoiseBank,
) -> Result<(AudioBuffer, AppliedTrace), ChainError> {
    config.validate()?;
    if buffer.is_empty() {
        return Err(ChainError::EmptyInput);
    }
    let seed = derive_seed(config.global_seed, utterance_id);
    let mut rng = item_rng(config.global_seed, utterance_id);
    let n = config.specs.len();
    let mut steps: Vec<Option<TraceStep>> = vec![None; n];
    let mut current = buffer.clone();

    for (i, spec) in config.specs.iter().enumerate().rev() {
        let mut u = [0.0f64; DRAWS_PER_STAGE];
        u.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        let fires = u[0] < spec.probability;
        let mut step = TraceStep {
            index: i + 1,
            kind: spec.kind,
            applied: fires,
            param: None,
            noise: Vec::new(),
            degenerate: false,
        };
        if fires {
            let param = spec.range.at(u[1]);
            let placements = if spec.kind == EffectKind::NoiseMix {
                if bank.is_empty() {
                    return Err(ChainError::Effect {
                        index: i + 1,
                        kind: spec.kind,
                        source: EffectError::EmptyNoiseBank,
                    });
                }
                let max = spec.max_segments.unwrap_or(MAX_NOISE_SEGMENTS);
                let count = ((u[2] * max as f64) as usize).min(max - 1) + 1;
                (0..count)
                    .map(|k| {
                        NoisePlacement::from_uniforms(u[3 + 2 * k], u[4 + 2 * k], bank, current.len())
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let (out, degenerate) = apply_step(&current, spec.kind, param, &placements, bank)
                .map_err(|source| ChainError::Effect {
                    index: i + 1,
                    kind: spec.kind,
                    source,
                })?;
            current = out;
            step.param = Some(param);
            step.noise = placements;
            step.degenerate = degenerate;
        }
        steps[i] = Some(step);
    }

    let trace = AppliedTrace {
        utterance_id: utterance_id.to_string(),
        seed,
        steps: steps.into_iter().map(|s| s.expect("every stage visited")).collect(),
    };
    Ok((current, trace))
}

/// Re-applies a recorded trace without drawing any randomness.
pub fn replay_trace(
    trace: &AppliedTrace,
    buffer: &AudioBuffer,
    bank: &NoiseBank,
) -> Result<AudioBuffer, ChainError> {
    if buffer.is_empty() {
        return Err(ChainError::EmptyInput);
    }
    let mut current = buffer.clone();
    for step in trace.steps.iter().rev().filter(|s| s.applied) {
        let param = step.param.ok_or_else(|| ChainError::InvalidSpec {
            index: step.index,
            message: "applied step has no parameter".into(),
        })?;
        current = apply_step(&current, step.kind, param, &step.noise, bank)
            .map_err(|source| ChainError::Effect {
                index: step.index,
                kind: step.kind,
                source,
            })?
            .0;
    }
    Ok(current)
}

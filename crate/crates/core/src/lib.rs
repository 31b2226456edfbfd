//! Synthetic speech-to-unit corpus construction.
//!
//! Two halves:
//!
//! * **Effects augmentation**: [`chain`] composes the perturbations in
//!   [`effects`] (speed, pitch, low-pass, SNR-controlled noise mixing), each
//!   firing with its own probability, seeded per utterance so that corpora can
//!   be regenerated exactly.
//! * **Text augmentation**: [`text`] cleans a monolingual corpus and filters
//!   translated pairs; [`manifest`] synthesizes both sides through the
//!   [`ports`], reduces the target units, and writes training manifests that
//!   can be mixed with real data at configurable weights.

pub mod audio;
pub mod batch;
pub mod chain;
pub mod effects;
pub mod manifest;
pub mod ports;
pub mod seed;
pub mod text;

pub use audio::{load_wav, resample, save_wav, AudioBuffer, AudioError, WavEncoding};
pub use chain::{apply_chain, default_paper_chain, replay_trace, AppliedTrace, ChainConfig, EffectKind, EffectSpec};
pub use effects::{apply_lowpass, apply_pitch, apply_speed, compute_snr, mix_noise, NoiseBank};
pub use manifest::{build_manifest, corpus_stats, sample_stream, Manifest, ManifestRecord, Origin, SamplerConfig};
pub use ports::{reduce_units, SynthesizerPort, TranslatorPort, UnitSequence, UnitizerPort};
pub use text::{clean_sentence, filter_pair, run_text_stage, FilterPolicy, TextCorpus, TextPair};

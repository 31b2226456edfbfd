//! Ports for the external models (MT, TTS, speech-to-unit), deterministic
//! mock implementations, and line-protocol subprocess adapters.
//!
//! The subprocess protocol is described in `docs/subprocess-protocol.md`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError, WavEncoding, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum PortError {
    #[error("mock rejected input: {0}")]
    MockRejected(String),
    #[error("cannot synthesize empty text")]
    EmptyText,
    #[error("invalid port configuration: {0}")]
    InvalidConfig(String),
    #[error("unit id {unit} outside vocabulary of size {vocabulary}")]
    UnitOutOfRange { unit: u32, vocabulary: u32 },
    #[error("subprocess `{command}`: {message}")]
    Subprocess { command: String, message: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, PortError>;

/// Machine translation: `translate(sentence, from, to)`.
pub trait TranslatorPort: Send + Sync {
    fn translate(&self, sentence: &str, src_lang: &str, tgt_lang: &str) -> Result<String>;

    /// Upper bound on concurrent calls; `None` means unbounded.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Text-to-speech at a fixed output rate.
pub trait SynthesizerPort: Send + Sync {
    fn synthesize(&self, sentence: &str, lang: &str) -> Result<AudioBuffer>;

    fn sample_rate(&self) -> u32;

    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Speech-to-unit encoder producing unreduced ids in `[0, vocabulary_size)`.
pub trait UnitizerPort: Send + Sync {
    fn unitize(&self, buffer: &AudioBuffer) -> Result<UnitSequence>;

    fn vocabulary_size(&self) -> u32;

    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Discrete unit ids. When `reduced` is set no two neighbours are equal.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnitSequence {
    units: Vec<u32>,
    reduced: bool,
}

impl UnitSequence {
    pub fn unreduced(units: Vec<u32>) -> Self {
        Self {
            units,
            reduced: false,
        }
    }

    /// Wraps ids that must already be free of consecutive duplicates.
    pub fn reduced(units: Vec<u32>) -> std::result::Result<Self, usize> {
        match units.windows(2).position(|w| w[0] == w[1]) {
            Some(i) => Err(i + 1),
            None => Ok(Self {
                units,
                reduced: true,
            }),
        }
    }

    pub fn units(&self) -> &[u32] {
        &self.units
    }

    pub fn is_reduced(&self) -> bool {
        self.reduced
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

impl fmt::Display for UnitSequence {
    /// Space-separated ids.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, u) in self.units.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{u}")?;
        }
        Ok(())
    }
}

/// Collapses runs of identical ids to a single id.
pub fn reduce_units(seq: &UnitSequence) -> UnitSequence {
    let mut units = seq.units.clone();
    units.dedup();
    UnitSequence {
        units,
        reduced: true,
    }
}

/// Reverses whitespace tokens and prefixes `[tgt_lang]`: `"a b c"` becomes
/// `"[tgt] c b a"`.
pub fn mock_translate(sentence: &str, _src_lang: &str, tgt_lang: &str) -> Result<String> {
    let tokens: Vec<&str> = sentence.split_whitespace().rev().collect();
    if tokens.is_empty() {
        return Err(PortError::MockRejected("empty input".into()));
    }
    Ok(format!("[{tgt_lang}] {}", tokens.join(" ")))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MockTranslator;

impl TranslatorPort for MockTranslator {
    fn translate(&self, sentence: &str, src_lang: &str, tgt_lang: &str) -> Result<String> {
        mock_translate(sentence, src_lang, tgt_lang)
    }
}

/// Word reversal without the language tag.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReversingTranslator;

impl TranslatorPort for ReversingTranslator {
    fn translate(&self, sentence: &str, _src_lang: &str, _tgt_lang: &str) -> Result<String> {
        let tokens: Vec<&str> = sentence.split_whitespace().rev().collect();
        if tokens.is_empty() {
            return Err(PortError::MockRejected("empty input".into()));
        }
        Ok(tokens.join(" "))
    }
}

pub const MOCK_SEGMENT_SECONDS: f64 = 0.05;
pub const MOCK_AMPLITUDE: f64 = 0.3;

/// Tone per character: `0.05 s` of a sine at `200 + 10 * (codepoint % 100)`
/// Hz, amplitude 0.3, phase restarting for every character.
pub fn mock_synthesize(sentence: &str, sample_rate: u32) -> Result<AudioBuffer> {
    if sentence.is_empty() {
        return Err(PortError::EmptyText);
    }
    let seg = (MOCK_SEGMENT_SECONDS * sample_rate as f64).round() as usize;
    let mut samples = Vec::with_capacity(seg * sentence.chars().count());
    for c in sentence.chars() {
        let freq = 200.0 + 10.0 * (c as u32 % 100) as f64;
        let w = 2.0 * PI * freq / sample_rate as f64;
        samples.extend((0..seg).map(|i| (MOCK_AMPLITUDE * (w * i as f64).sin()) as f32));
    }
    Ok(AudioBuffer::new(samples, sample_rate)?)
}

#[derive(Clone, Copy, Debug)]
pub struct MockSynthesizer {
    pub sample_rate: u32,
}

impl Default for MockSynthesizer {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SynthesizerPort for MockSynthesizer {
    fn synthesize(&self, sentence: &str, _lang: &str) -> Result<AudioBuffer> {
        mock_synthesize(sentence, self.sample_rate)
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

pub const MOCK_HOP_SECONDS: f64 = 0.02;

/// One unit per 20 ms frame (the last frame may be partial): frame RMS
/// quantized into `k` equal bins over `[0, 1]`.
pub fn mock_unitize(buffer: &AudioBuffer, k: u32) -> Result<UnitSequence> {
    if k < 2 {
        return Err(PortError::InvalidConfig(format!("vocabulary size {k} < 2")));
    }
    let hop = ((MOCK_HOP_SECONDS * buffer.sample_rate() as f64).round() as usize).max(1);
    let units = buffer
        .samples()
        .chunks(hop)
        .map(|frame| {
            let rms = (audio::energy(frame) / frame.len() as f64).sqrt();
            ((rms * k as f64) as u32).min(k - 1)
        })
        .collect();
    Ok(UnitSequence::unreduced(units))
}

#[derive(Clone, Copy, Debug)]
pub struct MockUnitizer {
    k: u32,
}

impl MockUnitizer {
    pub fn new(k: u32) -> Result<Self> {
        if k < 2 {
            return Err(PortError::InvalidConfig(format!("vocabulary size {k} < 2")));
        }
        Ok(Self { k })
    }
}

impl UnitizerPort for MockUnitizer {
    fn unitize(&self, buffer: &AudioBuffer) -> Result<UnitSequence> {
        mock_unitize(buffer, self.k)
    }

    fn vocabulary_size(&self) -> u32 {
        self.k
    }
}

struct ChildIo {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// A long-running child process spoken to one line at a time.
struct LineChannel {
    command: String,
    io: Mutex<ChildIo>,
}

impl LineChannel {
    fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PortError::Subprocess {
                command: command.to_string(),
                message: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            command: command.to_string(),
            io: Mutex::new(ChildIo {
                child,
                stdin: Some(stdin),
                stdout,
            }),
        })
    }

    fn err(&self, message: impl Into<String>) -> PortError {
        PortError::Subprocess {
            command: self.command.clone(),
            message: message.into(),
        }
    }

    /// Sends one request line and returns the response line, or the message
    /// of an `ERR\t...` reply as an error.
    fn request(&self, fields: &[&str]) -> Result<String> {
        let line = fields
            .iter()
            .map(|f| f.replace(['\t', '\n', '\r'], " "))
            .collect::<Vec<_>>()
            .join("\t");
        let mut io = self.io.lock().unwrap_or_else(|p| p.into_inner());
        let stdin = io.stdin.as_mut().ok_or_else(|| self.err("channel closed"))?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| self.err(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = io
            .stdout
            .read_line(&mut reply)
            .map_err(|e| self.err(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(self.err("child closed its output"));
        }
        let reply = reply.trim_end_matches(['\n', '\r']);
        match reply.strip_prefix("ERR\t") {
            Some(msg) => Err(self.err(msg.to_string())),
            None if reply == "ERR" => Err(self.err("error reply")),
            None => Ok(reply.to_string()),
        }
    }
}

impl Drop for LineChannel {
    fn drop(&mut self) {
        let io = self.io.get_mut().unwrap_or_else(|p| p.into_inner());
        // EOF on stdin asks the child to exit; give it a moment, then kill
        drop(io.stdin.take());
        for _ in 0..200 {
            match io.child.try_wait() {
                Ok(Some(_)) | Err(_) => return,
                Ok(None) => std::thread::sleep(std::time::Duration::from_millis(10)),
            }
        }
        let _ = io.child.kill();
        let _ = io.child.wait();
    }
}

/// Request: `src_lang TAB tgt_lang TAB sentence`. Reply: the translation.
pub struct SubprocessTranslator {
    channel: LineChannel,
}

impl SubprocessTranslator {
    pub fn spawn(command: &str) -> Result<Self> {
        Ok(Self {
            channel: LineChannel::spawn(command)?,
        })
    }
}

impl TranslatorPort for SubprocessTranslator {
    fn translate(&self, sentence: &str, src_lang: &str, tgt_lang: &str) -> Result<String> {
        self.channel.request(&[src_lang, tgt_lang, sentence])
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }
}

/// Request: `lang TAB sentence`. Reply: path of a WAV file the child wrote.
/// The audio is resampled to `sample_rate`.
pub struct SubprocessSynthesizer {
    channel: LineChannel,
    sample_rate: u32,
}

impl SubprocessSynthesizer {
    pub fn spawn(command: &str, sample_rate: u32) -> Result<Self> {
        Ok(Self {
            channel: LineChannel::spawn(command)?,
            sample_rate,
        })
    }
}

impl SynthesizerPort for SubprocessSynthesizer {
    fn synthesize(&self, sentence: &str, lang: &str) -> Result<AudioBuffer> {
        if sentence.is_empty() {
            return Err(PortError::EmptyText);
        }
        let path = self.channel.request(&[lang, sentence])?;
        let buf = audio::load_wav(Path::new(&path))?;
        Ok(audio::resample(&buf, self.sample_rate)?)
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }
}

/// Request: path of a float32 WAV written by the adapter. Reply:
/// space-separated unit ids.
pub struct SubprocessUnitizer {
    channel: LineChannel,
    k: u32,
    scratch: tempfile::TempDir,
}

impl SubprocessUnitizer {
    pub fn spawn(command: &str, k: u32) -> Result<Self> {
        if k < 2 {
            return Err(PortError::InvalidConfig(format!("vocabulary size {k} < 2")));
        }
        let scratch = tempfile::tempdir().map_err(|e| PortError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            channel: LineChannel::spawn(command)?,
            k,
            scratch,
        })
    }

    fn scratch_path(&self) -> PathBuf {
        self.scratch.path().join("request.wav")
    }
}

impl UnitizerPort for SubprocessUnitizer {
    fn unitize(&self, buffer: &AudioBuffer) -> Result<UnitSequence> {
        let path = self.scratch_path();
        audio::save_wav(buffer, &path, WavEncoding::Float32)?;
        let reply = self.channel.request(&[&path.to_string_lossy()])?;
        let units = reply
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| self.channel.err(format!("bad unit id `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(&unit) = units.iter().find(|&&u| u >= self.k) {
            return Err(PortError::UnitOutOfRange {
                unit,
                vocabulary: self.k,
            });
        }
        Ok(UnitSequence::unreduced(units))
    }

    fn vocabulary_size(&self) -> u32 {
        self.k
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }
}

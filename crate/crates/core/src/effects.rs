//! Individual acoustic perturbations: speed, pitch, low-pass filtering and
//! SNR-controlled noise mixing.
//!
//! Every effect keeps the sample rate of its input and never returns samples
//! outside `[-1, 1]`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, energy, resample, resample_by_step, sanitize, AudioBuffer, AudioError};

pub const MIN_FACTOR: f64 = 0.5;
pub const MAX_FACTOR: f64 = 2.0;
pub const MAX_NOISE_SEGMENTS: usize = 4;
pub const BUTTERWORTH_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EffectError {
    #[error("factor {0} outside [{MIN_FACTOR}, {MAX_FACTOR}]")]
    FactorOutOfRange(f64),
    #[error("cutoff {cutoff} Hz must lie strictly between 0 and the Nyquist frequency {nyquist} Hz")]
    CutoffAboveNyquist { cutoff: f64, nyquist: f64 },
    #[error("noise bank is empty")]
    EmptyNoiseBank,
    #[error("noise segment count {0} outside [1, {MAX_NOISE_SEGMENTS}]")]
    SegmentCountOutOfRange(usize),
    #[error("noise entry `{0}` is not in the bank")]
    UnknownNoiseEntry(String),
    #[error("duplicate noise entry id `{0}`")]
    DuplicateNoiseEntry(String),
    #[error("signal has {signal} samples but noise has {noise}")]
    LengthMismatch { signal: usize, noise: usize },
    #[error("noise has zero power")]
    ZeroNoisePower,
    #[error("SNR must be finite, got {0}")]
    InvalidSnr(f64),
    #[error("noise listing {path}:{line}: {message}")]
    BadListing {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, EffectError>;

fn check_factor(factor: f64) -> Result<()> {
    if (MIN_FACTOR..=MAX_FACTOR).contains(&factor) {
        Ok(())
    } else {
        Err(EffectError::FactorOutOfRange(factor))
    }
}

/// Plays the signal `factor` times faster, like SoX `speed`: duration shrinks
/// to `round(len / factor)` and every frequency is multiplied by `factor`.
pub fn apply_speed(buffer: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    check_factor(factor)?;
    if factor == 1.0 {
        return Ok(buffer.clone());
    }
    let out_len = (buffer.len() as f64 / factor).round() as usize;
    Ok(buffer.with_rate_of(resample_by_step(buffer.samples(), factor, out_len)))
}

/// Multiplies every frequency by `factor` while keeping the sample count.
///
/// The signal is resampled by `factor` (changing pitch and duration) and then
/// time-stretched back to the original length with WSOLA.
pub fn apply_pitch(buffer: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    check_factor(factor)?;
    if factor == 1.0 {
        return Ok(buffer.clone());
    }
    let n = buffer.len();
    let shifted_len = (n as f64 / factor).round() as usize;
    let shifted = resample_by_step(buffer.samples(), factor, shifted_len);
    let out = time_stretch_to(&shifted, n, buffer.sample_rate());
    Ok(buffer.with_rate_of(out))
}

/// WSOLA time-scale modification of `input` to exactly `out_len` samples.
///
/// Frames are 30 ms Hann windows at 50% overlap; each analysis frame may move
/// up to 6 ms from its nominal position to line up with the natural
/// continuation of the previous frame.
fn time_stretch_to(input: &[f32], out_len: usize, sample_rate: u32) -> Vec<f32> {
    let hop = ((sample_rate as f64 * 0.015).round() as usize).max(8);
    let frame = 2 * hop;
    let tolerance = (sample_rate as f64 * 0.006).round() as isize;
    if input.len() < frame || out_len < frame {
        // too short to window; fall back to plain interpolation
        if input.is_empty() {
            return vec![0.0; out_len];
        }
        return resample_by_step(input, input.len() as f64 / out_len as f64, out_len);
    }

    let window: Vec<f32> = (0..frame)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / frame as f64).cos()) as f32)
        .collect();
    let alpha = input.len() as f64 / out_len as f64;
    let max_pos = (input.len() - frame) as isize;

    let mut acc = vec![0.0f32; out_len + frame];
    let mut wsum = vec![0.0f32; out_len + frame];
    let mut prev_pos: isize = 0;
    let mut k = 0usize;
    while k * hop < out_len {
        let nominal = ((k * hop) as f64 * alpha).round() as isize;
        let pos = if k == 0 {
            0
        } else {
            let natural = (prev_pos + hop as isize).min(max_pos);
            let template = &input[natural as usize..natural as usize + hop];
            let lo = (nominal - tolerance).clamp(0, max_pos);
            let hi = (nominal + tolerance).clamp(0, max_pos);
            let mut best = lo;
            let mut best_score = f32::NEG_INFINITY;
            for cand in lo..=hi {
                let seg = &input[cand as usize..cand as usize + hop];
                let mut dot = 0.0f32;
                let mut norm = 0.0f32;
                for (a, b) in template.iter().zip(seg) {
                    dot += a * b;
                    norm += b * b;
                }
                let score = if norm > 0.0 { dot / norm.sqrt() } else { 0.0 };
                if score > best_score {
                    best_score = score;
                    best = cand;
                }
            }
            best
        };
        let start = k * hop;
        let src = &input[pos as usize..pos as usize + frame];
        for i in 0..frame {
            acc[start + i] += src[i] * window[i];
            wsum[start + i] += window[i];
        }
        prev_pos = pos;
        k += 1;
    }
    acc.truncate(out_len);
    acc.iter()
        .zip(&wsum)
        .map(|(&a, &w)| if w > 1e-6 { sanitize(a / w) } else { 0.0 })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Bilinear-transform low-pass section with a prewarped cutoff.
    fn lowpass(cutoff: f64, sample_rate: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: (1.0 - cos) / 2.0 / a0,
            b1: (1.0 - cos) / a0,
            b2: (1.0 - cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn run(&self, signal: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for x in signal.iter_mut() {
            let y = self.b0 * *x + z1;
            z1 = self.b1 * *x - self.a1 * y + z2;
            z2 = self.b2 * *x - self.a2 * y;
            *x = y;
        }
    }
}

/// Pole-pair quality factors of a 4th-order Butterworth prototype:
/// `1 / (2 cos(theta))` for theta = pi/8 and 3pi/8.
fn butterworth_qs() -> [f64; BUTTERWORTH_ORDER / 2] {
    [
        1.0 / (2.0 * (PI / 8.0).cos()),
        1.0 / (2.0 * (3.0 * PI / 8.0).cos()),
    ]
}

/// 4th-order Butterworth low-pass (two cascaded biquads, -3 dB at `cutoff`).
pub fn apply_lowpass(buffer: &AudioBuffer, cutoff: f64) -> Result<AudioBuffer> {
    let nyquist = buffer.sample_rate() as f64 / 2.0;
    if !(cutoff > 0.0 && cutoff < nyquist) {
        return Err(EffectError::CutoffAboveNyquist { cutoff, nyquist });
    }
    let mut work: Vec<f64> = buffer.samples().iter().map(|&s| s as f64).collect();
    for q in butterworth_qs() {
        Biquad::lowpass(cutoff, buffer.sample_rate() as f64, q).run(&mut work);
    }
    Ok(buffer.with_rate_of(work.into_iter().map(|y| sanitize(y as f32)).collect()))
}

/// `10 log10(sum(s^2) / sum(n^2))` over equal-length sequences.
pub fn snr_db(signal: &[f32], noise: &[f32]) -> Result<f64> {
    if signal.len() != noise.len() {
        return Err(EffectError::LengthMismatch {
            signal: signal.len(),
            noise: noise.len(),
        });
    }
    let pn = energy(noise);
    if pn == 0.0 {
        return Err(EffectError::ZeroNoisePower);
    }
    Ok(10.0 * (energy(signal) / pn).log10())
}

/// Whole-utterance SNR in decibels. A silent signal yields negative infinity.
pub fn compute_snr(signal: &AudioBuffer, noise: &AudioBuffer) -> Result<f64> {
    snr_db(signal.samples(), noise.samples())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCategory {
    Noise,
    Music,
    Speech,
}

impl FromStr for NoiseCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "music" => Ok(Self::Music),
            "speech" => Ok(Self::Speech),
            other => Err(format!("unknown noise category `{other}`")),
        }
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Noise => "noise",
            Self::Music => "music",
            Self::Speech => "speech",
        })
    }
}

#[derive(Clone, Debug)]
pub struct NoiseEntry {
    pub id: String,
    pub category: Option<NoiseCategory>,
    pub audio: AudioBuffer,
}

/// Read-only collection of background noise clips, all stored at one working
/// sample rate.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    sample_rate: u32,
    entries: Vec<NoiseEntry>,
    by_id: HashMap<String, usize>,
}

impl NoiseBank {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    /// Adds a clip, resampling it to the bank's working rate.
    pub fn push(
        &mut self,
        id: impl Into<String>,
        category: Option<NoiseCategory>,
        audio: AudioBuffer,
    ) -> Result<()> {
        let id = id.into();
        if self.by_id.contains_key(&id) {
            return Err(EffectError::DuplicateNoiseEntry(id));
        }
        let audio = resample(&audio, self.sample_rate)?;
        self.by_id.insert(id.clone(), self.entries.len());
        self.entries.push(NoiseEntry {
            id,
            category,
            audio,
        });
        Ok(())
    }

    /// Loads every `.wav` under `dir` (recursively, in sorted path order).
    /// Entry ids are the paths relative to `dir` without extension.
    pub fn from_dir(dir: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let mut bank = Self::new(sample_rate);
        for path in crate::batch::find_wavs(dir)? {
            let id = crate::batch::relative_id(dir, &path);
            bank.push(id, None, audio::load_wav(&path)?)?;
        }
        Ok(bank)
    }

    /// Loads a listing file with one `path [category]` per line. Relative
    /// paths resolve against the listing's directory; `#` starts a comment.
    pub fn from_listing(listing: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let listing = listing.as_ref();
        let text = fs::read_to_string(listing).map_err(|source| AudioError::IoFailure {
            path: listing.to_path_buf(),
            source,
        })?;
        let base = listing.parent().unwrap_or(Path::new("."));
        let mut bank = Self::new(sample_rate);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| EffectError::BadListing {
                path: listing.to_path_buf(),
                line: idx + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let rel = fields.next().unwrap_or_default();
            let category = fields
                .next()
                .map(NoiseCategory::from_str)
                .transpose()
                .map_err(bad)?;
            if let Some(extra) = fields.next() {
                return Err(bad(format!("unexpected field `{extra}`")));
            }
            let path = base.join(rel);
            let audio = audio::load_wav(&path)?;
            bank.push(rel, category, audio)?;
        }
        Ok(bank)
    }

    /// Directory or listing file, whichever `path` is.
    pub fn load(path: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::from_dir(path, sample_rate)
        } else {
            Self::from_listing(path, sample_rate)
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NoiseEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&NoiseEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }
}

/// Where one noise clip lands in the mix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePlacement {
    pub entry: String,
    pub offset: usize,
}

impl NoisePlacement {
    /// Maps two uniforms in `[0, 1)` onto an entry (uniform over the bank) and
    /// a start offset (uniform over `[0, signal_len)`).
    pub fn from_uniforms(u_entry: f64, u_offset: f64, bank: &NoiseBank, signal_len: usize) -> Self {
        let pick = |u: f64, n: usize| ((u * n as f64) as usize).min(n.saturating_sub(1));
        Self {
            entry: bank.entries[pick(u_entry, bank.len())].id.clone(),
            offset: pick(u_offset, signal_len),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixOutcome {
    pub audio: AudioBuffer,
    /// The scaled aggregate noise `g * n` that was added, before any peak
    /// rescaling of the mixture.
    pub noise_track: Vec<f32>,
    pub gain: f64,
    /// Factor applied to the whole mixture to keep its peak at 1 (1.0 if none).
    pub rescale: f64,
    pub placements: Vec<NoisePlacement>,
    /// The placed noise had zero power; the input was returned unchanged.
    pub degenerate: bool,
}

/// Mixes `n_segments` randomly chosen and positioned bank clips into `buffer`
/// at `snr_db`.
pub fn mix_noise<R: Rng + ?Sized>(
    buffer: &AudioBuffer,
    bank: &NoiseBank,
    n_segments: usize,
    snr_db: f64,
    rng: &mut R,
) -> Result<MixOutcome> {
    if bank.is_empty() {
        return Err(EffectError::EmptyNoiseBank);
    }
    if !(1..=MAX_NOISE_SEGMENTS).contains(&n_segments) {
        return Err(EffectError::SegmentCountOutOfRange(n_segments));
    }
    let placements: Vec<_> = (0..n_segments)
        .map(|_| {
            let (ue, uo) = (rng.gen::<f64>(), rng.gen::<f64>());
            NoisePlacement::from_uniforms(ue, uo, bank, buffer.len())
        })
        .collect();
    mix_noise_at(buffer, bank, &placements, snr_db)
}

/// Deterministic core of [`mix_noise`] with explicit placements.
///
/// Clips are summed into one aggregate track (truncated at the end of the
/// signal) and a single gain `g = sqrt(Ps / (Pn * 10^(snr/10)))` is applied
/// to it. If the mixture peaks above 1 it is scaled down by its peak.
pub fn mix_noise_at(
    buffer: &AudioBuffer,
    bank: &NoiseBank,
    placements: &[NoisePlacement],
    snr_db: f64,
) -> Result<MixOutcome> {
    if bank.is_empty() {
        return Err(EffectError::EmptyNoiseBank);
    }
    if !(1..=MAX_NOISE_SEGMENTS).contains(&placements.len()) {
        return Err(EffectError::SegmentCountOutOfRange(placements.len()));
    }
    if !snr_db.is_finite() {
        return Err(EffectError::InvalidSnr(snr_db));
    }
    let len = buffer.len();
    let mut aggregate = vec![0.0f64; len];
    for p in placements {
        let entry = bank
            .get(&p.entry)
            .ok_or_else(|| EffectError::UnknownNoiseEntry(p.entry.clone()))?;
        let clip = if entry.audio.sample_rate() == buffer.sample_rate() {
            std::borrow::Cow::Borrowed(&entry.audio)
        } else {
            std::borrow::Cow::Owned(resample(&entry.audio, buffer.sample_rate())?)
        };
        for (dst, &s) in aggregate.iter_mut().skip(p.offset).zip(clip.samples()) {
            *dst += s as f64;
        }
    }

    let unchanged = |degenerate| MixOutcome {
        audio: buffer.clone(),
        noise_track: vec![0.0; len],
        gain: 0.0,
        rescale: 1.0,
        placements: placements.to_vec(),
        degenerate,
    };
    let ps = buffer.energy();
    let pn: f64 = aggregate.iter().map(|v| v * v).sum();
    if ps == 0.0 {
        return Ok(unchanged(false));
    }
    if pn == 0.0 {
        log::warn!("placed noise has zero power; leaving signal unchanged");
        return Ok(unchanged(true));
    }

    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let noise_track: Vec<f32> = aggregate.iter().map(|&v| (gain * v) as f32).collect();
    let mut mixed: Vec<f64> = buffer
        .samples()
        .iter()
        .zip(&noise_track)
        .map(|(&s, &n)| s as f64 + n as f64)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rescale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if rescale != 1.0 {
        mixed.iter_mut().for_each(|v| *v *= rescale);
    }
    let audio = buffer.with_rate_of(mixed.into_iter().map(|v| sanitize(v as f32)).collect());
    Ok(MixOutcome {
        audio,
        noise_track,
        gain,
        rescale,
        placements: placements.to_vec(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, amp: f64, len: usize, rate: u32) -> AudioBuffer {
        let s = (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    fn rms(s: &[f32]) -> f64 {
        (energy(s) / s.len() as f64).sqrt()
    }

    fn random_buffer(rng: &mut ChaCha8Rng, len: usize, amp: f32) -> AudioBuffer {
        let s = (0..len).map(|_| rng.gen_range(-amp..=amp)).collect();
        AudioBuffer::new(s, 16000).unwrap()
    }

    #[test]
    fn speed_identity_and_length() {
        let buf = sine(440.0, 0.5, 16000, 16000);
        assert_eq!(apply_speed(&buf, 1.0).unwrap(), buf);
        // oracle: round(16000 / 1.05) = 15238
        let out = apply_speed(&buf, 1.05).unwrap();
        assert!((out.len() as i64 - 15238).abs() <= 1);
        assert_eq!(out.sample_rate(), 16000);
    }

    #[test]
    fn factor_bounds() {
        let buf = sine(440.0, 0.5, 100, 16000);
        for f in [0.49, 2.01, f64::NAN] {
            assert!(matches!(apply_speed(&buf, f), Err(EffectError::FactorOutOfRange(_))));
            assert!(matches!(apply_pitch(&buf, f), Err(EffectError::FactorOutOfRange(_))));
        }
        assert!(apply_speed(&buf, 0.5).is_ok());
        assert!(apply_speed(&buf, 2.0).is_ok());
    }

    #[test]
    fn pitch_preserves_length() {
        let buf = sine(220.0, 0.5, 12345, 16000);
        for f in [0.5, 0.95, 1.05, 2.0] {
            assert_eq!(apply_pitch(&buf, f).unwrap().len(), buf.len());
        }
        assert_eq!(apply_pitch(&buf, 1.0).unwrap(), buf);
    }

    #[test]
    fn pitch_on_tiny_buffer_falls_back() {
        let buf = sine(220.0, 0.5, 100, 16000);
        let out = apply_pitch(&buf, 1.05).unwrap();
        assert_eq!(out.len(), 100);
    }

    #[test]
    fn lowpass_passband_and_stopband() {
        let rate = 16000;
        let settle = 4000;
        let pass = sine(100.0, 0.5, 16000, rate);
        let out = apply_lowpass(&pass, 1000.0).unwrap();
        let change = 20.0 * (rms(&out.samples()[settle..]) / rms(&pass.samples()[settle..])).log10();
        assert!(change.abs() <= 1.0, "{change}");

        let stop = sine(2000.0, 0.5, 16000, rate);
        let out = apply_lowpass(&stop, 1000.0).unwrap();
        let att = 20.0 * (rms(&stop.samples()[settle..]) / rms(&out.samples()[settle..])).log10();
        assert!(att >= 20.0, "{att}");

        let at = sine(1000.0, 0.5, 16000, rate);
        let out = apply_lowpass(&at, 1000.0).unwrap();
        let att = 20.0 * (rms(&at.samples()[settle..]) / rms(&out.samples()[settle..])).log10();
        assert!((att - 3.0).abs() <= 1.0, "{att}");
    }

    #[test]
    fn lowpass_zero_in_zero_out() {
        let buf = AudioBuffer::silence(1000, 16000).unwrap();
        let out = apply_lowpass(&buf, 300.0).unwrap();
        assert!(out.samples().iter().all(|&s| s == 0.0));
        assert_eq!(out.len(), 1000);
    }

    #[test]
    fn lowpass_cutoff_checks() {
        let buf = AudioBuffer::silence(10, 16000).unwrap();
        for c in [0.0, -5.0, 8000.0, 9000.0, f64::NAN] {
            assert!(matches!(
                apply_lowpass(&buf, c),
                Err(EffectError::CutoffAboveNyquist { .. })
            ));
        }
    }

    #[test]
    fn snr_basic_cases() {
        let s = sine(300.0, 0.5, 1000, 16000);
        assert!(compute_snr(&s, &s).unwrap().abs() < 1e-12);
        let tenth: Vec<f32> = s.samples().iter().map(|&v| v * 0.1).collect();
        let snr = snr_db(s.samples(), &tenth).unwrap();
        assert!((snr - 20.0).abs() < 1e-5, "{snr}");
        assert!(matches!(
            snr_db(&[1.0], &[0.0]),
            Err(EffectError::ZeroNoisePower)
        ));
        assert!(matches!(
            snr_db(&[1.0], &[1.0, 2.0]),
            Err(EffectError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn snr_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let len = rng.gen_range(1..2000);
            let s: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..len {
                num += (s[i] as f64).powi(2);
                den += (n[i] as f64).powi(2);
            }
            let oracle = 10.0 * num.log10() - 10.0 * den.log10();
            assert!((snr_db(&s, &n).unwrap() - oracle).abs() < 1e-9);
        }
    }

    fn bank_with(clips: Vec<AudioBuffer>) -> NoiseBank {
        let mut bank = NoiseBank::new(16000);
        for (i, c) in clips.into_iter().enumerate() {
            bank.push(format!("n{i}"), Some(NoiseCategory::Noise), c).unwrap();
        }
        bank
    }

    #[test]
    fn closed_form_gain() {
        // signal RMS 0.1 and noise RMS 0.1 at 20 dB: g = sqrt(1 / 100) = 0.1
        let len = 1600;
        let signal = AudioBuffer::new(
            (0..len).map(|i| if i % 2 == 0 { 0.1 } else { -0.1 }).collect(),
            16000,
        )
        .unwrap();
        let noise = AudioBuffer::new(vec![0.1; len], 16000).unwrap();
        let bank = bank_with(vec![noise]);
        let placement = NoisePlacement {
            entry: "n0".into(),
            offset: 0,
        };
        let out = mix_noise_at(&signal, &bank, &[placement], 20.0).unwrap();
        assert!((out.gain - 0.1).abs() < 1e-6, "{}", out.gain);
        assert_eq!(out.rescale, 1.0);
    }

    #[test]
    fn mix_hits_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank = bank_with(vec![
            random_buffer(&mut rng, 3000, 0.5),
            random_buffer(&mut rng, 500, 0.9),
        ]);
        for seed in 0..20 {
            let signal = random_buffer(&mut rng, 4000, 0.3);
            let mut draw = ChaCha8Rng::seed_from_u64(seed);
            let snr = 25.0 + seed as f64 / 2.0;
            let out = mix_noise(&signal, &bank, 1 + seed as usize % 4, snr, &mut draw).unwrap();
            let measured = snr_db(signal.samples(), &out.noise_track).unwrap();
            assert!((measured - snr).abs() < 0.1, "{measured} vs {snr}");
        }
    }

    #[test]
    fn mix_zero_signal_is_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = bank_with(vec![random_buffer(&mut rng, 100, 0.5)]);
        let signal = AudioBuffer::silence(200, 16000).unwrap();
        let out = mix_noise(&signal, &bank, 2, 30.0, &mut rng).unwrap();
        assert!(!out.degenerate);
        assert_eq!(out.gain, 0.0);
        assert_eq!(out.audio, signal);
    }

    #[test]
    fn mix_silent_noise_is_degenerate() {
        let bank = bank_with(vec![AudioBuffer::silence(100, 16000).unwrap()]);
        let signal = sine(300.0, 0.5, 200, 16000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = mix_noise(&signal, &bank, 1, 30.0, &mut rng).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.audio, signal);
    }

    #[test]
    fn mix_rescales_on_overflow() {
        let signal = AudioBuffer::new(vec![0.99; 100], 16000).unwrap();
        let bank = bank_with(vec![AudioBuffer::new(vec![0.5; 100], 16000).unwrap()]);
        let p = NoisePlacement {
            entry: "n0".into(),
            offset: 0,
        };
        let out = mix_noise_at(&signal, &bank, &[p], 0.0).unwrap();
        assert!(out.rescale < 1.0);
        assert!(out.audio.peak() <= 1.0);
        assert!((out.audio.peak() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mix_preconditions() {
        let signal = sine(300.0, 0.5, 200, 16000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            mix_noise(&signal, &NoiseBank::new(16000), 1, 30.0, &mut rng),
            Err(EffectError::EmptyNoiseBank)
        ));
        let bank = bank_with(vec![signal.clone()]);
        for n in [0, 5] {
            assert!(matches!(
                mix_noise(&signal, &bank, n, 30.0, &mut rng),
                Err(EffectError::SegmentCountOutOfRange(_))
            ));
        }
        let missing = NoisePlacement {
            entry: "nope".into(),
            offset: 0,
        };
        assert!(matches!(
            mix_noise_at(&signal, &bank, &[missing], 30.0),
            Err(EffectError::UnknownNoiseEntry(_))
        ));
    }

    #[test]
    fn segments_past_end_are_truncated() {
        let signal = sine(300.0, 0.5, 100, 16000);
        let bank = bank_with(vec![AudioBuffer::new(vec![0.5; 100], 16000).unwrap()]);
        let p = NoisePlacement {
            entry: "n0".into(),
            offset: 90,
        };
        let out = mix_noise_at(&signal, &bank, &[p], 30.0).unwrap();
        assert_eq!(out.audio.len(), 100);
        assert!(out.noise_track[..90].iter().all(|&v| v == 0.0));
        assert!(out.noise_track[90..].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn bank_resamples_to_working_rate() {
        let mut bank = NoiseBank::new(16000);
        bank.push("a", None, sine(100.0, 0.5, 800, 8000)).unwrap();
        assert_eq!(bank.get("a").unwrap().audio.sample_rate(), 16000);
        assert_eq!(bank.get("a").unwrap().audio.len(), 1600);
        assert!(matches!(
            bank.push("a", None, sine(100.0, 0.5, 10, 16000)),
            Err(EffectError::DuplicateNoiseEntry(_))
        ));
    }

    #[test]
    fn bank_from_listing() {
        let dir = tempfile::tempdir().unwrap();
        let clip = sine(100.0, 0.5, 160, 16000);
        audio::save_wav(&clip, dir.path().join("a.wav"), audio::WavEncoding::Float32).unwrap();
        audio::save_wav(&clip, dir.path().join("b.wav"), audio::WavEncoding::Pcm16).unwrap();
        let listing = dir.path().join("noise.list");
        fs::write(&listing, "# musan subset\na.wav music\n\nb.wav\n").unwrap();
        let bank = NoiseBank::load(&listing, 16000).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.get("a.wav").unwrap().category, Some(NoiseCategory::Music));
        assert_eq!(bank.get("b.wav").unwrap().category, None);

        fs::write(&listing, "a.wav trumpet\n").unwrap();
        assert!(matches!(
            NoiseBank::load(&listing, 16000),
            Err(EffectError::BadListing { line: 1, .. })
        ));

        let from_dir = NoiseBank::load(dir.path(), 16000).unwrap();
        let ids: Vec<_> = from_dir.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}

//! Mono PCM container, RIFF/WAVE reading and writing, and band-limited
//! resampling.
//!
//! Samples are stored as `f32` in `[-1, 1]` whatever the file encoding was.
//! Stereo files are averaged down to one channel when loaded.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 0x0003;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Half-width of the windowed-sinc kernel, in samples at the lower of the two
/// rates. The full kernel is 64 taps wide.
pub const RESAMPLER_HALF_TAPS: usize = 32;
/// Kernel table resolution (points per input sample).
const KERNEL_OVERSAMPLE: usize = 512;
/// Cutoff relative to the output Nyquist frequency when decimating.
const DECIMATION_ROLLOFF: f64 = 0.97;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("sample {index} is not a finite value in [-1, 1]: {value}")]
    SampleOutOfRange { index: usize, value: f32 },
    #[error("i/o failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// A mono signal with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Checked constructor: every sample must be finite and within `[-1, 1]`.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::SampleOutOfRange { index, value });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a buffer from arbitrary values, mapping non-finite samples to
    /// zero and clamping the rest into `[-1, 1]`.
    pub fn from_clamped(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        for s in samples.iter_mut() {
            *s = sanitize(*s);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    /// Internal constructor for effect outputs that are already sanitized.
    pub(crate) fn with_rate_of(&self, samples: Vec<f32>) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples, accumulated in f64.
    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

pub(crate) fn energy(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
}

#[inline]
pub(crate) fn sanitize(s: f32) -> f32 {
    if s.is_finite() {
        s.clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Sample encoding used when writing WAV files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

impl fmt::Display for WavEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WavEncoding::Pcm16 => "pcm16",
            WavEncoding::Float32 => "float32",
        })
    }
}

impl FromStr for WavEncoding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pcm16" => Ok(WavEncoding::Pcm16),
            "float32" => Ok(WavEncoding::Float32),
            other => Err(format!("unknown wav encoding `{other}` (expected pcm16 or float32)")),
        }
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    decode_wav(&bytes)
}

pub fn save_wav(buffer: &AudioBuffer, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(buffer, encoding)?;
    fs::write(path, bytes).map_err(|source| AudioError::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

struct FmtChunk {
    format_tag: u16,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    bits_per_sample: u16,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(AudioError::MalformedWav(format!(
            "fmt chunk is {} bytes, need at least 16",
            body.len()
        )));
    }
    let mut format_tag = read_u16(body, 0);
    if format_tag == WAVE_FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) subFormat GUID(16)
        if body.len() < 40 {
            return Err(AudioError::MalformedWav(
                "extensible fmt chunk shorter than 40 bytes".into(),
            ));
        }
        format_tag = read_u16(body, 24);
    }
    Ok(FmtChunk {
        format_tag,
        channels: read_u16(body, 2),
        sample_rate: read_u32(body, 4),
        block_align: read_u16(body, 12),
        bits_per_sample: read_u16(body, 14),
    })
}

/// Decodes an in-memory RIFF/WAVE file. Chunks other than `fmt ` and `data`
/// are skipped.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedWav("missing RIFF/WAVE header".into()));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                AudioError::MalformedWav(format!(
                    "chunk `{}` declares {size} bytes past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[start..end])?),
            b"data" => data = Some(&bytes[start..end]),
            _ => {}
        }
        pos = end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| AudioError::MalformedWav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedWav("missing data chunk".into()))?;

    if fmt.sample_rate == 0 {
        return Err(AudioError::MalformedWav("sample rate is zero".into()));
    }
    let channels = fmt.channels as usize;
    match channels {
        0 => return Err(AudioError::MalformedWav("zero channels".into())),
        1 | 2 => {}
        n => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{n} channels (only mono and stereo are read)"
            )))
        }
    }
    let bytes_per_sample = match (fmt.format_tag, fmt.bits_per_sample) {
        (WAVE_FORMAT_PCM, 16) => 2,
        (WAVE_FORMAT_IEEE_FLOAT, 32) => 4,
        (tag, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format tag {tag:#06x} with {bits} bits per sample"
            )))
        }
    };
    let frame_bytes = bytes_per_sample * channels;
    if fmt.block_align as usize != frame_bytes {
        return Err(AudioError::MalformedWav(format!(
            "block align {} does not match {channels} x {bytes_per_sample} bytes",
            fmt.block_align
        )));
    }

    let frames = data.len() / frame_bytes;
    if frames == 0 {
        return Err(AudioError::EmptyAudio);
    }
    let decode = |off: usize| -> Result<f32> {
        if bytes_per_sample == 2 {
            Ok(i16::from_le_bytes([data[off], data[off + 1]]) as f32 / 32768.0)
        } else {
            let v = f32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]]);
            if !v.is_finite() {
                return Err(AudioError::MalformedWav(format!(
                    "non-finite float sample at byte {off}"
                )));
            }
            Ok(v.clamp(-1.0, 1.0))
        }
    };
    let mut samples = Vec::with_capacity(frames);
    for frame in 0..frames {
        let base = frame * frame_bytes;
        if channels == 1 {
            samples.push(decode(base)?);
        } else {
            let l = decode(base)?;
            let r = decode(base + bytes_per_sample)?;
            samples.push(((l + r) * 0.5).clamp(-1.0, 1.0));
        }
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: fmt.sample_rate,
    })
}

/// Quantizes one sample to a PCM16 code. Full scale maps to 32768, so +1.0
/// saturates at 32767 instead of wrapping.
pub fn pcm16_code(sample: f32) -> i16 {
    (sample as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a canonical 44-byte-header WAV file.
pub fn encode_wav(buffer: &AudioBuffer, encoding: WavEncoding) -> Result<Vec<u8>> {
    if buffer.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    let (tag, bytes_per_sample) = match encoding {
        WavEncoding::Pcm16 => (WAVE_FORMAT_PCM, 2u16),
        WavEncoding::Float32 => (WAVE_FORMAT_IEEE_FLOAT, 4u16),
    };
    let data_len = buffer.len() * bytes_per_sample as usize;
    let data_len_u32 = u32::try_from(data_len)
        .ok()
        .filter(|&n| n <= u32::MAX - 36)
        .ok_or_else(|| AudioError::UnsupportedEncoding("data exceeds 4 GiB RIFF limit".into()))?;

    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len_u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate * bytes_per_sample as u32).to_le_bytes());
    out.extend_from_slice(&bytes_per_sample.to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len_u32.to_le_bytes());
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &buffer.samples {
                out.extend_from_slice(&pcm16_code(s).to_le_bytes());
            }
        }
        WavEncoding::Float32 => {
            for &s in &buffer.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Converts `buffer` to `target_rate`. Output length is
/// `round(len * target_rate / source_rate)`; same-rate input is returned as is.
pub fn resample(buffer: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(AudioError::InvalidSampleRate);
    }
    if target_rate == buffer.sample_rate {
        return Ok(buffer.clone());
    }
    let src = buffer.sample_rate as u128;
    let out_len = ((buffer.len() as u128 * target_rate as u128 + src / 2) / src) as usize;
    let step = buffer.sample_rate as f64 / target_rate as f64;
    Ok(AudioBuffer {
        samples: resample_by_step(&buffer.samples, step, out_len),
        sample_rate: target_rate,
    })
}

/// Windowed-sinc interpolation reading the input at positions `j * step` for
/// `j in 0..out_len`. `step > 1` decimates (the kernel widens and its cutoff
/// drops to the output Nyquist), `step < 1` interpolates.
pub(crate) fn resample_by_step(input: &[f32], step: f64, out_len: usize) -> Vec<f32> {
    debug_assert!(step > 0.0 && step.is_finite());
    if input.is_empty() || out_len == 0 {
        return Vec::new();
    }
    let kernel = SincKernel::new(step);
    let n = input.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = j as f64 * step;
        let lo = (pos - kernel.half_width).ceil() as isize;
        let hi = (pos + kernel.half_width).floor() as isize;
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for i in lo..=hi {
            let w = kernel.at((i as f64 - pos).abs());
            wsum += w;
            if (0..n).contains(&i) {
                acc += w * input[i as usize] as f64;
            }
        }
        let y = if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 };
        out.push(sanitize(y as f32));
    }
    out
}

/// Blackman-windowed sinc, tabulated on `[0, half_width]`.
struct SincKernel {
    half_width: f64,
    table: Vec<f64>,
}

impl SincKernel {
    fn new(step: f64) -> Self {
        let (scale, cutoff) = if step > 1.0 {
            (step, DECIMATION_ROLLOFF / step)
        } else {
            (1.0, 1.0)
        };
        let half_width = RESAMPLER_HALF_TAPS as f64 * scale;
        let points = (half_width * KERNEL_OVERSAMPLE as f64).ceil() as usize + 2;
        let table = (0..points)
            .map(|k| {
                let t = k as f64 / KERNEL_OVERSAMPLE as f64;
                if t >= half_width {
                    return 0.0;
                }
                let x = cutoff * t;
                let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let u = t / half_width;
                let window = 0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos();
                cutoff * sinc * window
            })
            .collect();
        Self { half_width, table }
    }

    #[inline]
    fn at(&self, t: f64) -> f64 {
        let x = t * KERNEL_OVERSAMPLE as f64;
        let i = x as usize;
        if i + 1 >= self.table.len() {
            return 0.0;
        }
        let frac = x - i as f64;
        self.table[i] + (self.table[i + 1] - self.table[i]) * frac
    }
}

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use speechaug::AudioBuffer;

pub fn sine(freq: f64, amp: f64, len: usize, rate: u32) -> AudioBuffer {
    let s = (0..len)
        .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
        .collect();
    AudioBuffer::new(s, rate).unwrap()
}

/// Frequency of the largest Hann-windowed FFT bin, refined by parabolic
/// interpolation on log magnitudes.
pub fn fft_peak_hz(samples: &[f32], rate: u32) -> f64 {
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
            Complex::new(s as f64 * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm().max(1e-300)).collect();
    let k = (1..mags.len() - 1)
        .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
        .unwrap();
    let (a, b, c) = (mags[k - 1].ln(), mags[k].ln(), mags[k + 1].ln());
    let delta = 0.5 * (a - c) / (a - 2.0 * b + c);
    (k as f64 + delta) * rate as f64 / n as f64
}

pub fn rms(s: &[f32]) -> f64 {
    (s.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
}

/// Direct sum-of-squares SNR, written independently of the library.
pub fn snr_oracle(signal: &[f32], noise: &[f32]) -> f64 {
    assert_eq!(signal.len(), noise.len());
    let ps: f64 = signal.iter().map(|&v| v as f64 * v as f64).sum();
    let pn: f64 = noise.iter().map(|&v| v as f64 * v as f64).sum();
    10.0 * ps.log10() - 10.0 * pn.log10()
}

pub fn random_buffer(rng: &mut ChaCha8Rng, len: usize, amp: f32, rate: u32) -> AudioBuffer {
    AudioBuffer::new((0..len).map(|_| rng.gen_range(-amp..=amp)).collect(), rate).unwrap()
}

/// Sum of a few random sines below `max_hz`.
pub fn band_limited(seed: u64, len: usize, rate: u32, max_hz: f64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones: Vec<(f64, f64, f64)> = (0..5)
        .map(|_| (rng.gen_range(50.0..max_hz), rng.gen_range(0.02..0.15), rng.gen_range(0.0..PI)))
        .collect();
    let s = (0..len)
        .map(|i| {
            let t = i as f64 / rate as f64;
            tones
                .iter()
                .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>() as f32
        })
        .collect();
    AudioBuffer::new(s, rate).unwrap()
}

pub fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        num += x * y;
        da += x * x;
        db += y * y;
    }
    num / (da * db).sqrt()
}

/// Run-length collapse written as an explicit loop.
pub fn collapse_runs(xs: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for &x in xs {
        if out.last() != Some(&x) {
            out.push(x);
        }
    }
    out
}

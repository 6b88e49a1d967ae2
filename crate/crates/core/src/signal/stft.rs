//! Short-time Fourier transform restricted to the 0–20 Hz band.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Segment, SAMPLE_RATE, SEGMENT_LEN};
use crate::error::{Error, Result};

pub const WINDOW: usize = 512;
/// 50 % overlap.
pub const HOP: usize = WINDOW / 2;
pub const NFFT: usize = 512;
pub const MAX_FREQ_HZ: usize = 20;
/// Bin spacing is `SAMPLE_RATE / NFFT = 1 Hz`, so bins 0..=20 cover 0–20 Hz.
pub const FREQ_BINS: usize = MAX_FREQ_HZ * NFFT / SAMPLE_RATE + 1;
/// Amplitude that maps to 0 dB, in microvolts.
pub const REFERENCE_UV: f64 = 100.0;
pub const DB_MIN: f64 = -80.0;
pub const DB_MAX: f64 = 0.0;

/// Symmetric Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

pub fn frame_count(len: usize) -> usize {
    if len < WINDOW {
        0
    } else {
        (len - WINDOW) / HOP + 1
    }
}

/// Row-major `[bins × frames]` matrix; row 0 is 0 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }
}

fn plan() -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(NFFT)
}

/// Raw `|X(k)|` of the Hann-windowed frames for bins 0..=20.
pub fn stft_magnitude(samples: &[f64]) -> Result<Spectrogram> {
    let frames = frame_count(samples.len());
    if frames == 0 {
        return Err(Error::invalid(
            "stft",
            format!("{} samples, need at least {WINDOW}", samples.len()),
        ));
    }
    let window = hann_window(WINDOW);
    let fft = plan();
    let mut values = vec![0.0; FREQ_BINS * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for f in 0..frames {
        let frame = &samples[f * HOP..f * HOP + WINDOW];
        for (b, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..FREQ_BINS {
            values[k * frames + f] = buf[k].norm();
        }
    }
    Ok(Spectrogram {
        bins: FREQ_BINS,
        frames,
        values,
    })
}

/// Converts raw magnitudes to single-sided amplitude in dB re 100 µV,
/// clipped to `[-80, 0]`.
pub fn magnitude_to_db(magnitude: &Spectrogram) -> Spectrogram {
    let window_sum: f64 = hann_window(WINDOW).iter().sum();
    let scale = 2.0 / window_sum / REFERENCE_UV;
    Spectrogram {
        values: magnitude
            .values
            .iter()
            .map(|m| (20.0 * (m * scale + 1e-12).log10()).clamp(DB_MIN, DB_MAX))
            .collect(),
        ..*magnitude
    }
}

/// The 21×25 dB spectrogram of one 13 s segment.
pub fn stft_spectrogram(segment: &Segment) -> Result<Spectrogram> {
    if segment.samples.len() != SEGMENT_LEN {
        return Err(Error::invalid(
            "stft_spectrogram",
            format!("segment has {} samples, expected {SEGMENT_LEN}", segment.samples.len()),
        ));
    }
    Ok(magnitude_to_db(&stft_magnitude(&segment.samples)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{Channel, Pvt};

    fn seg(samples: Vec<f64>) -> Segment {
        Segment {
            subject_id: "s".into(),
            pvt: Pvt::Pvt1,
            channel: Channel::Fz,
            index: 0,
            start_sample: 0,
            samples,
        }
    }

    #[test]
    fn dims_of_a_segment() {
        assert_eq!(FREQ_BINS, 21);
        assert_eq!(frame_count(SEGMENT_LEN), 25);
        let s = stft_spectrogram(&seg(vec![0.0; SEGMENT_LEN])).unwrap();
        assert_eq!((s.bins, s.frames), (21, 25));
    }

    #[test]
    fn silence_is_the_floor() {
        let s = stft_spectrogram(&seg(vec![0.0; SEGMENT_LEN])).unwrap();
        assert!(s.values.iter().all(|&v| v == DB_MIN));
    }

    #[test]
    fn sinusoid_amplitude_is_calibrated() {
        // 100 µV at 10 Hz lands exactly on a bin: 0 dB there.
        let x: Vec<f64> = (0..SEGMENT_LEN)
            .map(|n| 100.0 * (2.0 * PI * 10.0 * n as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let s = stft_spectrogram(&seg(x)).unwrap();
        for f in 0..s.frames {
            assert!(s.get(10, f).abs() < 0.01, "{}", s.get(10, f));
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(stft_spectrogram(&seg(vec![0.0; 1000])).is_err());
        assert!(stft_magnitude(&[0.0; 100]).is_err());
    }
}

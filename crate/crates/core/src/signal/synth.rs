//! Synthetic Fz/Pz EEG with class-dependent theta/alpha balance.
//!
//! Each recording is a sum of independently generated unit-RMS components
//! (pink background, theta 4–8 Hz, alpha 8–13 Hz, beta 13–30 Hz) scaled by
//! per-class amplitudes with per-subject jitter. Theta and alpha carry a slow
//! envelope so consecutive segments are not identical.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::io::{recording_file_name, write_manifest, write_recording, ManifestRow};
use super::{Channel, EegRecording, Pvt, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::{derive_seed, Label};

/// RMS amplitudes in microvolts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandAmplitudes {
    pub background: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl BandAmplitudes {
    pub fn for_class(label: Label) -> Self {
        match label {
            Label::Alert => Self {
                background: 8.0,
                theta: 3.0,
                alpha: 14.0,
                beta: 5.0,
            },
            Label::Drowsy => Self {
                background: 8.0,
                theta: 12.0,
                alpha: 4.0,
                beta: 3.0,
            },
        }
    }
}

/// Spectral shape of one component: gain as a function of frequency in Hz.
fn band_limited(n: usize, rng: &mut ChaCha8Rng, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = SAMPLE_RATE as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        // Bins above n/2 mirror negative frequencies.
        let f = k.min(n - k) as f64 * df;
        *c *= gain(f);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

fn band(lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    move |f| if f >= lo && f <= hi { 1.0 } else { 0.0 }
}

fn pink(f: f64) -> f64 {
    if (0.5..=100.0).contains(&f) {
        1.0 / f.sqrt()
    } else {
        0.0
    }
}

/// One synthetic recording. Alert subjects are recorded in PVT1 with KSS
/// 1–4, drowsy subjects in PVT3 with KSS 7–9; the subject seed fixes the
/// amplitude jitter shared by both channels.
pub fn synth_eeg(label: Label, channel: Channel, subject_seed: u64, duration_s: f64) -> Result<EegRecording> {
    if duration_s.is_nan() || duration_s < 13.0 {
        return Err(Error::invalid(
            "synth_eeg",
            format!("duration {duration_s} s shorter than 13 s"),
        ));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut subject_rng = ChaCha8Rng::seed_from_u64(derive_seed(subject_seed, 1));
    let mut jitter = || subject_rng.random_range(0.8..1.25);
    let base = BandAmplitudes::for_class(label);
    let mut amp = BandAmplitudes {
        background: base.background * jitter(),
        theta: base.theta * jitter(),
        alpha: base.alpha * jitter(),
        beta: base.beta * jitter(),
    };
    let kss = match label {
        Label::Alert => subject_rng.random_range(1..=4),
        Label::Drowsy => subject_rng.random_range(7..=9),
    };
    let pvt = match label {
        Label::Alert => Pvt::Pvt1,
        Label::Drowsy => Pvt::Pvt3,
    };
    if channel == Channel::Pz {
        amp.alpha *= 1.2;
        amp.theta *= 0.9;
    }

    let tag = match channel {
        Channel::Fz => 100,
        Channel::Pz => 200,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(subject_seed, tag));
    let background = band_limited(n, &mut rng, pink);
    let theta = band_limited(n, &mut rng, band(4.0, 8.0));
    let alpha = band_limited(n, &mut rng, band(8.0, 13.0));
    let beta = band_limited(n, &mut rng, band(13.0, 30.0));
    let envelope = band_limited(n, &mut rng, band(0.02, 0.2));

    let samples = (0..n)
        .map(|i| {
            let env = (1.0 + 0.3 * envelope[i]).max(0.2);
            let v = amp.background * background[i]
                + env * (amp.theta * theta[i] + amp.alpha * alpha[i])
                + amp.beta * beta[i];
            // Stored as f32 on disk; keep the in-memory copy identical.
            f64::from(v as f32)
        })
        .collect();
    EegRecording::new(format!("synth{subject_seed}"), pvt, channel, SAMPLE_RATE, samples, kss)
}

/// `alert + drowsy` subjects, each with an Fz and a Pz recording, in
/// subject order. Subject ids are `S01`, `S02`, …; alert subjects come first.
pub fn synth_corpus(alert: usize, drowsy: usize, minutes: f64, seed: u64) -> Result<Vec<EegRecording>> {
    let total = alert + drowsy;
    let width = total.to_string().len().max(2);
    let mut out = Vec::with_capacity(2 * total);
    for s in 0..total {
        let label = if s < alert { Label::Alert } else { Label::Drowsy };
        let subject_seed = derive_seed(seed, 1000 + s as u64);
        let id = format!("S{:0width$}", s + 1);
        for channel in [Channel::Fz, Channel::Pz] {
            let mut rec = synth_eeg(label, channel, subject_seed, minutes * 60.0)?;
            rec.subject_id = id.clone();
            out.push(rec);
        }
    }
    Ok(out)
}

/// Writes `.f32` files and `recordings.csv` into `dir`.
pub fn write_corpus(dir: &Path, recordings: &[EegRecording]) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(recordings.len());
    for rec in recordings {
        let name = recording_file_name(&rec.subject_id, rec.pvt, rec.channel);
        write_recording(&dir.join(&name), &rec.samples)?;
        rows.push(ManifestRow {
            subject_id: rec.subject_id.clone(),
            pvt: rec.pvt.to_string(),
            channel: rec.channel.to_string(),
            kss: rec.kss,
            path: name,
        });
    }
    write_manifest(&dir.join("recordings.csv"), &rows)?;
    Ok(rows)
}

/// Mean periodogram power density over `[lo, hi]` Hz.
pub fn band_power(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = SAMPLE_RATE as f64 / n as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * df;
        if f >= lo && f <= hi {
            total += c.norm_sqr() / (n as f64 * SAMPLE_RATE as f64);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_eeg(Label::Alert, Channel::Fz, 7, 13.0).unwrap();
        let b = synth_eeg(Label::Alert, Channel::Fz, 7, 13.0).unwrap();
        let c = synth_eeg(Label::Alert, Channel::Fz, 8, 13.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.samples.len(), 6656);
    }

    #[test]
    fn rejects_short_duration() {
        assert!(synth_eeg(Label::Drowsy, Channel::Fz, 1, 12.0).is_err());
    }

    #[test]
    fn labels_follow_the_kss_rule() {
        for seed in 0..20 {
            let a = synth_eeg(Label::Alert, Channel::Fz, seed, 13.0).unwrap();
            let d = synth_eeg(Label::Drowsy, Channel::Pz, seed, 13.0).unwrap();
            assert_eq!(a.label(), Some(Label::Alert));
            assert_eq!(d.label(), Some(Label::Drowsy));
            assert_eq!(d.pvt, Pvt::Pvt3);
        }
    }
}

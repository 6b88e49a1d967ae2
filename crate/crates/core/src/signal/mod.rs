//! From raw Fz/Pz EEG streams to labeled spectrogram images.

mod dataset;
mod io;
mod stft;
mod synth;

pub use dataset::{
    build_dataset, concat_vertical, read_dataset, to_grayscale_image, write_dataset, ChannelImage, Provenance,
    SpectrogramImage, SplitRole, DB_FLOOR, IMAGE_SIDE,
};
pub use io::{load_corpus, load_recording, read_manifest, write_manifest, write_recording, LoadOptions, ManifestRow};
pub use stft::{
    frame_count, hann_window, magnitude_to_db, stft_magnitude, stft_spectrogram, Spectrogram, DB_MAX, DB_MIN,
    FREQ_BINS, HOP, MAX_FREQ_HZ, NFFT, REFERENCE_UV, WINDOW,
};
pub use synth::{band_power, synth_corpus, synth_eeg, write_corpus, BandAmplitudes};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::Label;

pub const SAMPLE_RATE: usize = 512;
pub const SEGMENT_SECONDS: usize = 13;
/// 13 s at 512 Hz.
pub const SEGMENT_LEN: usize = SEGMENT_SECONDS * SAMPLE_RATE;

macro_rules! text_enum {
    ($name:ident, $what:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::format($what, format!("unknown value `{other}`"))),
                }
            }
        }
    };
}

/// Which psychomotor vigilance test session a recording belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pvt {
    Pvt1,
    Pvt2,
    Pvt3,
}
text_enum!(Pvt, "pvt", { Pvt1 => "pvt1", Pvt2 => "pvt2", Pvt3 => "pvt3" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Fz,
    Pz,
}
text_enum!(Channel, "channel", { Fz => "fz", Pz => "pz" });

/// Single Fz images (32×32) or Fz stacked over Pz (64×32).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelSet {
    Fz,
    FzPz,
}
text_enum!(ChannelSet, "channel set", { Fz => "fz", FzPz => "fzpz" });

impl ChannelSet {
    /// Image `(height, width)` produced for this channel set.
    pub fn image_dims(self) -> (usize, usize) {
        match self {
            ChannelSet::Fz => (IMAGE_SIDE, IMAGE_SIDE),
            ChannelSet::FzPz => (2 * IMAGE_SIDE, IMAGE_SIDE),
        }
    }
}

/// One channel of one session of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    pub subject_id: String,
    pub pvt: Pvt,
    pub channel: Channel,
    pub sample_rate: usize,
    /// Microvolts.
    pub samples: Vec<f64>,
    pub kss: u8,
}

impl EegRecording {
    pub fn new(
        subject_id: impl Into<String>,
        pvt: Pvt,
        channel: Channel,
        sample_rate: usize,
        samples: Vec<f64>,
        kss: u8,
    ) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Dataset(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        if !(1..=9).contains(&kss) {
            return Err(Error::Dataset(format!("KSS {kss} outside 1..=9")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("recording contains non-finite samples".into()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            pvt,
            channel,
            sample_rate,
            samples,
            kss,
        })
    }

    pub fn label(&self) -> Option<Label> {
        label_from_kss(self.kss, self.pvt).ok().flatten()
    }
}

/// A 13 s window of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub pvt: Pvt,
    pub channel: Channel,
    pub index: usize,
    pub start_sample: usize,
    pub samples: Vec<f64>,
}

/// Consecutive non-overlapping 13 s windows; a trailing remainder is dropped.
pub fn segment(recording: &EegRecording) -> Vec<Segment> {
    recording
        .samples
        .chunks_exact(SEGMENT_LEN)
        .enumerate()
        .map(|(index, chunk)| Segment {
            subject_id: recording.subject_id.clone(),
            pvt: recording.pvt,
            channel: recording.channel,
            index,
            start_sample: index * SEGMENT_LEN,
            samples: chunk.to_vec(),
        })
        .collect()
}

/// KSS ≤ 4 is alert, KSS ≥ 7 drowsy; 5–6 and every PVT2 session stay unlabeled.
pub fn label_from_kss(kss: u8, pvt: Pvt) -> Result<Option<Label>> {
    if !(1..=9).contains(&kss) {
        return Err(Error::Dataset(format!("KSS {kss} outside 1..=9")));
    }
    Ok(match (pvt, kss) {
        (Pvt::Pvt2, _) => None,
        (_, 1..=4) => Some(Label::Alert),
        (_, 7..=9) => Some(Label::Drowsy),
        _ => None,
    })
}

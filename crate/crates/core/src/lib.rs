//! EEG drowsiness classification from spectrogram images.
//!
//! The crate covers the whole pipeline: raw Fz/Pz recordings are segmented
//! into 13 s windows, turned into grayscale spectrogram images, optionally
//! augmented, and classified by a capsule network with dynamic routing or by
//! a CNN / single-hidden-layer baseline. Models are evaluated with repeated
//! stratified 80/20 holdouts.

pub mod augment;
pub mod capsnet;
pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Mixes a seed with a stream tag into an independent 64-bit seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Target class. Drowsy is the positive class for all metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Alert,
    Drowsy,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Alert => 0,
            Label::Drowsy => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Alert),
            1 => Some(Label::Drowsy),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Alert => "alert",
            Label::Drowsy => "drowsy",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alert" => Ok(Label::Alert),
            "drowsy" => Ok(Label::Drowsy),
            other => Err(Error::format("label", format!("unknown label `{other}`"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

//! Spectrogram images and the `dataset.csv` image manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stft::{stft_spectrogram, Spectrogram, DB_MAX, DB_MIN};
use super::{segment, Channel, ChannelSet, EegRecording, Pvt};
use crate::error::{Error, Result};
use crate::image::{resample_bilinear, stack_vertical, GrayImage};
use crate::Label;

pub const IMAGE_SIDE: usize = 32;
/// dB value that maps to black.
pub const DB_FLOOR: f64 = DB_MIN;

/// Which side of a holdout split an image has been assigned to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SplitRole {
    #[default]
    Unassigned,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub subject_id: String,
    pub channel_set: ChannelSet,
    pub segment_index: usize,
    /// Not stored in `dataset.csv`; known only for freshly built images.
    pub pvt: Option<Pvt>,
}

/// A labeled grayscale spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramImage {
    /// Path relative to the dataset directory; unique within a dataset.
    pub id: String,
    pub image: GrayImage,
    pub label: Label,
    pub provenance: Provenance,
    pub split: SplitRole,
}

impl SpectrogramImage {
    pub fn with_split(&self, split: SplitRole) -> Self {
        Self { split, ..self.clone() }
    }
}

/// A single-channel image before Fz/Pz stacking.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelImage {
    pub image: GrayImage,
    pub subject_id: String,
    pub pvt: Pvt,
    pub channel: Channel,
    pub segment_index: usize,
}

/// Maps dB values linearly from `[-80, 0]` onto `[0, 255]`, resamples to
/// 32×32 with frequency increasing upward. A constant matrix carries no
/// information and maps to black.
pub fn to_grayscale_image(spec: &Spectrogram) -> Result<GrayImage> {
    if spec.bins < 2 || spec.frames < 2 || spec.values.len() != spec.bins * spec.frames {
        return Err(Error::shape(
            "to_grayscale_image",
            format!("{}×{} spectrogram", spec.bins, spec.frames),
        ));
    }
    let first = spec.values[0];
    if spec.values.iter().all(|&v| v == first) {
        return GrayImage::new(IMAGE_SIDE, IMAGE_SIDE, vec![0; IMAGE_SIDE * IMAGE_SIDE]);
    }
    // Highest frequency in the top row.
    let mut flipped = Vec::with_capacity(spec.values.len());
    for bin in (0..spec.bins).rev() {
        flipped.extend(
            spec.values[bin * spec.frames..(bin + 1) * spec.frames]
                .iter()
                .map(|&db| (db.clamp(DB_MIN, DB_MAX) - DB_MIN) / (DB_MAX - DB_MIN) * 255.0),
        );
    }
    let resized = resample_bilinear(&flipped, spec.bins, spec.frames, IMAGE_SIDE, IMAGE_SIDE);
    let pixels = resized.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::new(IMAGE_SIDE, IMAGE_SIDE, pixels)
}

/// Stacks an Fz image over the Pz image of the same subject, session and segment.
pub fn concat_vertical(fz: &ChannelImage, pz: &ChannelImage) -> Result<GrayImage> {
    if fz.channel != Channel::Fz || pz.channel != Channel::Pz {
        return Err(Error::Dataset(
            "concat_vertical expects an Fz image and a Pz image".into(),
        ));
    }
    if fz.subject_id != pz.subject_id || fz.pvt != pz.pvt || fz.segment_index != pz.segment_index {
        return Err(Error::Dataset(format!(
            "provenance mismatch: {}/{}/{} vs {}/{}/{}",
            fz.subject_id, fz.pvt, fz.segment_index, pz.subject_id, pz.pvt, pz.segment_index
        )));
    }
    if fz.image.height() != IMAGE_SIDE || pz.image.height() != IMAGE_SIDE {
        return Err(Error::shape("concat_vertical", "inputs must be 32×32"));
    }
    stack_vertical(&fz.image, &pz.image)
}

fn channel_images(rec: &EegRecording) -> Result<Vec<ChannelImage>> {
    segment(rec)
        .iter()
        .map(|seg| {
            Ok(ChannelImage {
                image: to_grayscale_image(&stft_spectrogram(seg)?)?,
                subject_id: rec.subject_id.clone(),
                pvt: rec.pvt,
                channel: rec.channel,
                segment_index: seg.index,
            })
        })
        .collect()
}

fn image_id(subject: &str, pvt: Pvt, set: ChannelSet, segment: usize) -> String {
    format!("images/{subject}_{pvt}_{set}_{segment:03}.pgm")
}

/// Segment → spectrogram → grayscale (→ Fz/Pz stacking) for every labeled
/// recording, in manifest order.
pub fn build_dataset(recordings: &[EegRecording], set: ChannelSet) -> Result<Vec<SpectrogramImage>> {
    let primary: Vec<&EegRecording> = recordings
        .iter()
        .filter(|r| r.channel == Channel::Fz && r.label().is_some())
        .collect();
    let pz_by_session: HashMap<(&str, Pvt), &EegRecording> = recordings
        .iter()
        .filter(|r| r.channel == Channel::Pz)
        .map(|r| ((r.subject_id.as_str(), r.pvt), r))
        .collect();

    let per_recording: Vec<Vec<SpectrogramImage>> = primary
        .par_iter()
        .map(|fz_rec| {
            let label = fz_rec.label().expect("filtered to labeled recordings");
            let fz = channel_images(fz_rec)?;
            let images: Vec<(usize, GrayImage)> = match set {
                ChannelSet::Fz => fz.into_iter().map(|c| (c.segment_index, c.image)).collect(),
                ChannelSet::FzPz => {
                    let pz_rec = pz_by_session
                        .get(&(fz_rec.subject_id.as_str(), fz_rec.pvt))
                        .ok_or_else(|| {
                            Error::Dataset(format!(
                                "no Pz recording for subject {} {}",
                                fz_rec.subject_id, fz_rec.pvt
                            ))
                        })?;
                    if pz_rec.label() != Some(label) {
                        return Err(Error::Dataset(format!(
                            "Fz and Pz labels disagree for subject {} {}",
                            fz_rec.subject_id, fz_rec.pvt
                        )));
                    }
                    let pz = channel_images(pz_rec)?;
                    fz.iter()
                        .map(|f| {
                            let p = pz.get(f.segment_index).ok_or_else(|| {
                                Error::Dataset(format!(
                                    "missing paired Pz segment {} for subject {} {}",
                                    f.segment_index, f.subject_id, f.pvt
                                ))
                            })?;
                            Ok((f.segment_index, concat_vertical(f, p)?))
                        })
                        .collect::<Result<_>>()?
                }
            };
            Ok(images
                .into_iter()
                .map(|(segment_index, image)| SpectrogramImage {
                    id: image_id(&fz_rec.subject_id, fz_rec.pvt, set, segment_index),
                    image,
                    label,
                    provenance: Provenance {
                        subject_id: fz_rec.subject_id.clone(),
                        channel_set: set,
                        segment_index,
                        pvt: Some(fz_rec.pvt),
                    },
                    split: SplitRole::Unassigned,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_recording.into_iter().flatten().collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRow {
    image_path: String,
    label: String,
    subject_id: String,
    channel_set: String,
    segment_index: usize,
}

/// Writes every image as PGM under `dir` plus `dir/dataset.csv`.
pub fn write_dataset(dir: &Path, images: &[SpectrogramImage]) -> Result<PathBuf> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let manifest = dir.join("dataset.csv");
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::format("csv", e.to_string()))?;
    for img in images {
        img.image.write_pgm(&dir.join(&img.id))?;
        writer
            .serialize(DatasetRow {
                image_path: img.id.clone(),
                label: img.label.to_string(),
                subject_id: img.provenance.subject_id.clone(),
                channel_set: img.provenance.channel_set.to_string(),
                segment_index: img.provenance.segment_index,
            })
            .map_err(|e| Error::format("csv", e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads `dataset.csv` and the images it lists.
pub fn read_dataset(manifest: &Path) -> Result<Vec<SpectrogramImage>> {
    let base = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(manifest, io),
        other => Error::format("dataset manifest", format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for row in reader.deserialize::<DatasetRow>() {
        let row = row.map_err(|e| Error::format("dataset manifest", e.to_string()))?;
        let channel_set: ChannelSet = row.channel_set.parse()?;
        let image = GrayImage::read_pgm(&base.join(&row.image_path))?;
        let (h, w) = channel_set.image_dims();
        if (image.height(), image.width()) != (h, w) {
            return Err(Error::Dataset(format!(
                "{} is {}×{}, expected {h}×{w} for {channel_set}",
                row.image_path,
                image.height(),
                image.width()
            )));
        }
        out.push(SpectrogramImage {
            id: row.image_path,
            image,
            label: row.label.parse()?,
            provenance: Provenance {
                subject_id: row.subject_id,
                channel_set,
                segment_index: row.segment_index,
                pvt: None,
            },
            split: SplitRole::Unassigned,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_eeg, SAMPLE_RATE};

    fn spec(values: Vec<f64>) -> Spectrogram {
        Spectrogram {
            bins: 21,
            frames: 25,
            values,
        }
    }

    #[test]
    fn constant_matrix_gives_constant_image() {
        let img = to_grayscale_image(&spec(vec![-30.0; 525])).unwrap();
        assert_eq!((img.height(), img.width()), (32, 32));
        assert!(img.pixels().iter().all(|&p| p == img.pixels()[0]));
    }

    #[test]
    fn frequency_ramp_stays_monotone_after_resize() {
        // dB rises with frequency: image columns brighten toward the top.
        let values = (0..21)
            .flat_map(|b| std::iter::repeat_n(-80.0 + 4.0 * b as f64, 25))
            .collect();
        let img = to_grayscale_image(&spec(values)).unwrap();
        for c in 0..32 {
            for r in 1..32 {
                assert!(img.get(r - 1, c) >= img.get(r, c));
            }
            assert_eq!(img.get(0, c), 255);
            assert_eq!(img.get(31, c), 0);
        }
    }

    fn channel_image(channel: Channel, value: u8, segment_index: usize) -> ChannelImage {
        ChannelImage {
            image: GrayImage::filled(32, 32, value),
            subject_id: "S01".into(),
            pvt: Pvt::Pvt1,
            channel,
            segment_index,
        }
    }

    #[test]
    fn concat_checks_provenance() {
        let fz = channel_image(Channel::Fz, 10, 0);
        let pz = channel_image(Channel::Pz, 200, 0);
        let both = concat_vertical(&fz, &pz).unwrap();
        assert_eq!((both.height(), both.width()), (64, 32));
        assert!(both.pixels()[..1024].iter().all(|&p| p == 10));
        assert!(both.pixels()[1024..].iter().all(|&p| p == 200));
        assert!(concat_vertical(&fz, &channel_image(Channel::Pz, 200, 1)).is_err());
        assert!(concat_vertical(&pz, &fz).is_err());
    }

    #[test]
    fn empty_input_gives_empty_dataset() {
        assert!(build_dataset(&[], ChannelSet::Fz).unwrap().is_empty());
    }

    #[test]
    fn fzpz_requires_pz_partner() {
        let fz = synth_eeg(Label::Alert, Channel::Fz, 1, 26.0).unwrap();
        assert!(matches!(
            build_dataset(std::slice::from_ref(&fz), ChannelSet::FzPz),
            Err(Error::Dataset(_))
        ));
        let mut pz = synth_eeg(Label::Alert, Channel::Pz, 1, 13.0).unwrap();
        pz.subject_id = fz.subject_id.clone();
        let err = build_dataset(&[fz.clone(), pz], ChannelSet::FzPz).unwrap_err();
        assert!(err.to_string().contains("missing paired Pz segment"));

        let images = build_dataset(&[fz], ChannelSet::Fz).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[1].provenance.segment_index, 1);
        assert_eq!(26 * SAMPLE_RATE / 6656, 2);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for ch in [Channel::Fz, Channel::Pz] {
            recs.push(synth_eeg(Label::Drowsy, ch, 4, 13.0).unwrap());
        }
        let images = build_dataset(&recs, ChannelSet::FzPz).unwrap();
        let manifest = write_dataset(dir.path(), &images).unwrap();
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].image, images[0].image);
        assert_eq!(back[0].id, images[0].id);
        assert_eq!(back[0].label, Label::Drowsy);
        let header = fs::read_to_string(&manifest).unwrap();
        assert!(header.starts_with("image_path,label,subject_id,channel_set,segment_index\n"));
    }
}

//! Raw recording files and the `recordings.csv` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Channel, EegRecording, Pvt, SAMPLE_RATE};
use crate::error::{Error, Result};

/// One row of `recordings.csv`: `subject_id,pvt,channel,kss,path`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub pvt: String,
    pub channel: String,
    pub kss: u8,
    pub path: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Skip the first line of a CSV recording.
    pub csv_has_header: bool,
}

pub(crate) fn recording_file_name(subject: &str, pvt: Pvt, channel: Channel) -> String {
    format!("{subject}_{pvt}_{channel}.f32")
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["subject_id", "pvt", "channel", "kss", "path"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(
            "recordings manifest",
            format!(
                "columns {:?}, expected {expected:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        ));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format("csv", format!("{}: {e}", path.display()))
    }
}

/// Little-endian `f32` samples.
pub fn write_recording(path: &Path, samples: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_samples(path: &Path, opts: LoadOptions) -> Result<Vec<f64>> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let skip = usize::from(opts.csv_has_header);
        text.lines()
            .skip(skip)
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                line.trim().parse::<f64>().map_err(|_| {
                    Error::format(
                        "recording csv",
                        format!(
                            "{} line {}: `{line}` is not a single number",
                            path.display(),
                            i + 1 + skip
                        ),
                    )
                })
            })
            .collect()
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::format(
                "recording",
                format!(
                    "{}: {} bytes is not a whole number of f32 samples",
                    path.display(),
                    bytes.len()
                ),
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    }
}

/// Loads one recording and validates it against its manifest row.
pub fn load_recording(path: &Path, row: &ManifestRow, opts: LoadOptions) -> Result<EegRecording> {
    let pvt: Pvt = row.pvt.parse()?;
    let channel: Channel = row.channel.parse()?;
    let is_raw = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("f32"));
    if is_raw {
        let expected = recording_file_name(&row.subject_id, pvt, channel);
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !name.eq_ignore_ascii_case(&expected) {
            return Err(Error::Dataset(format!(
                "manifest mismatch: row describes `{expected}` but points at `{name}`"
            )));
        }
    }
    let samples = read_samples(path, opts)?;
    EegRecording::new(row.subject_id.clone(), pvt, channel, SAMPLE_RATE, samples, row.kss)
}

/// Loads every recording listed in a manifest; relative paths resolve
/// against the manifest's directory.
pub fn load_corpus(manifest: &Path, opts: LoadOptions) -> Result<Vec<EegRecording>> {
    let base = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    read_manifest(manifest)?
        .iter()
        .map(|row| load_recording(&base.join(&row.path), row, opts))
        .collect()
}

//! Dataset files.
//!
//! A dataset directory holds `dataset.json` (`nexp.dataset.v1`) with the
//! sample count, per-sample shape and class count, plus two blobs:
//! `samples.bin` (little-endian `f32`, samples × C × H × W, row-major) and
//! `labels.bin` (little-endian `u32`, one per sample).
//!
//! [`read_labeled_images`] also reads the plain labeled-image layout: a
//! sequence of fixed-size records, each one label byte followed by
//! C × H × W pixel bytes in channel-major order. Pixels map to `[0, 1]` by
//! dividing by 255.

use std::fs;
use std::path::Path;

use nexp_core::sampling::Dataset;
use nexp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_f32_blob, write_json};
use crate::{Error, Result};

pub const DATASET_SCHEMA: &str = "nexp.dataset.v1";
pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub count: usize,
    pub shape: [usize; 3],
    pub classes: usize,
    pub samples_file: String,
    pub labels_file: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn save_dataset(dir: &Path, ds: &Dataset, config: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let samples: Vec<u8> = ds.samples().data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let labels: Vec<u8> = ds.labels().iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    let m = DatasetManifest {
        schema: DATASET_SCHEMA.into(),
        count: ds.len(),
        shape: ds.sample_shape(),
        classes: ds.classes(),
        samples_file: "samples.bin".into(),
        labels_file: "labels.bin".into(),
        config: config.clone(),
    };
    for (file, bytes) in [(&m.samples_file, samples), (&m.labels_file, labels)] {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(Error::io(&path))?;
    }
    write_json(&dir.join(DATASET_MANIFEST), &m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
    if m.schema != DATASET_SCHEMA {
        return Err(Error::Format(format!("{}: unsupported schema `{}`", path.display(), m.schema)));
    }
    let samples = read_f32_blob(&dir.join(&m.samples_file))?;
    let lpath = dir.join(&m.labels_file);
    let bytes = fs::read(&lpath).map_err(Error::io(&lpath))?;
    if bytes.len() != 4 * m.count {
        return Err(Error::Format(format!("{}: expected {} labels", lpath.display(), m.count)));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let [c, h, w] = m.shape;
    let t = Tensor::new(vec![m.count, c, h, w], samples)
        .map_err(|_| Error::Format(format!("{}: sample blob has the wrong length", m.samples_file)))?;
    Ok(Dataset::new(t, labels, m.classes)?)
}

/// Reads the labeled-image record layout described in the module docs.
pub fn read_labeled_images(path: &Path, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let pixels = shape.iter().product::<usize>();
    let record = pixels + 1;
    if pixels == 0 || bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a whole number of {record}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(record) {
        labels.push(r[0] as usize);
        data.extend(r[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let [c, h, w] = shape;
    Ok(Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)?)
}

/// Writes `ds` in the labeled-image layout; values are clamped to `[0, 1]`
/// and rounded to the nearest byte.
pub fn write_labeled_images(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.classes() > 256 {
        return Err(Error::Format("labeled-image files hold at most 256 classes".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * (ds.samples().row_len() + 1));
    for i in 0..ds.len() {
        out.push(ds.labels()[i] as u8);
        out.extend(ds.samples().row(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(Error::io(path))
}

//! Shifted test streams: feature corruptions, importance resampling, label
//! shift samplers and a synthetic class-conditional Gaussian generator.
//!
//! All samplers are pure functions of their inputs and a seed.

mod corrupt;
mod importance;
mod label_shift;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::tabular::Dataset;

pub use corrupt::{apply_corruption, CorruptionKind, CorruptionSpec, CorruptionTally, Corrupted};
pub use importance::{
    column_importance, importance_weights, resample_by_importance, ImportanceKind, Resampled,
};
pub use label_shift::{
    class_imbalance_weights, sample_label_shifted_stream, smooth_dirichlet_draw, LabelShiftKind,
    LabelShiftSpec, LabelStream, TemporalWindow,
};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

/// Path of the provenance record written next to `path`.
pub fn provenance_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".provenance.json");
    PathBuf::from(name)
}

/// Writes `data` as CSV plus a JSON sidecar holding `provenance`.
pub fn write_with_provenance<P: Serialize>(
    data: &Dataset,
    path: impl AsRef<Path>,
    provenance: &P,
) -> Result<()> {
    let path = path.as_ref();
    data.write_csv(path)?;
    let file = std::fs::File::create(provenance_path(path))?;
    serde_json::to_writer_pretty(file, provenance)?;
    Ok(())
}

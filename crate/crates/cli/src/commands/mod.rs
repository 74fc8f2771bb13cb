pub mod attack;
pub mod eval;
pub mod spectrum;
pub mod train;
pub mod transfer;

use std::path::Path;

use anyhow::{Context, Result};
use uap_core::dataset::{load_idx_dir, load_ntsr_dir, Dataset};
use uap_core::model::{load_model, ModelGraph};

/// Loads a dataset split from either an IDX directory or an NTSR1 tensor
/// directory (`images.ntsr` + `labels.ntsr`).
pub fn load_dataset(dir: &Path, split: &str) -> Result<Dataset> {
    if dir.join("images.ntsr").exists() {
        return load_ntsr_dir(dir).with_context(|| format!("loading {}", dir.display()));
    }
    load_idx_dir(dir, split).with_context(|| format!("loading {} split from {}", split, dir.display()))
}

pub fn load_model_f64(path: &Path) -> Result<ModelGraph<f64>> {
    load_model::<f64>(path).with_context(|| format!("loading model {}", path.display()))
}

/// Stem of a path, for report labels.
pub fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

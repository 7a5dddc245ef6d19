//! Subcommand implementations.

pub mod evaluate;
pub mod fetch_weights;
pub mod phantom;
pub mod reconstruct;
pub mod trace_plot;

use std::path::Path;

use anyhow::{bail, Context, Result};

use rnst_core::dataio::{save_slice, slice_file_name, SliceSet};
use rnst_core::Image;

/// Writes a slice through a temporary file in the same directory, so a
/// crashed run never leaves a half-written image behind.
pub(crate) fn save_slice_atomic(img: &Image, path: &Path) -> Result<()> {
    let dir = path.parent().context("output path has no parent")?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .context("output path has no file name")?;
    let tmp = dir.join(format!(".tmp-{name}"));
    save_slice(img, &tmp).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming into place: {}", path.display()))?;
    Ok(())
}

/// Saves `img` as `<label>_<index:04>.pfi` under `dir`, plus a 16-bit PNG
/// preview when requested. Returns the .pfi path.
pub(crate) fn save_slice_pair(
    img: &Image,
    dir: &Path,
    label: &str,
    index: usize,
    png_preview: bool,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let pfi = dir.join(slice_file_name(label, index, "pfi"));
    save_slice_atomic(img, &pfi)?;
    if png_preview {
        save_slice_atomic(img, &dir.join(slice_file_name(label, index, "png")))?;
    }
    Ok(pfi)
}

/// Infers the slice-set label of a dataset directory; fails when the files
/// disagree so the caller can ask for an explicit label.
pub(crate) fn detect_label(dir: &Path) -> Result<String> {
    let mut labels: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if ext != "pfi" && ext != "png" {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some((label, idx)) = stem.rsplit_once('_') {
            if idx.len() == 4 && idx.chars().all(|c| c.is_ascii_digit()) {
                if !labels.iter().any(|l| l == label) {
                    labels.push(label.to_string());
                }
            }
        }
    }
    match labels.len() {
        0 => bail!("no <label>_NNNN.pfi/.png slices found in {}", dir.display()),
        1 => Ok(labels.pop().unwrap()),
        _ => bail!(
            "multiple slice labels in {} ({}); pass --label",
            dir.display(),
            labels.join(", ")
        ),
    }
}

/// Loads a slice set from a directory (by label) or a single file (index 0).
pub(crate) fn load_source(
    dir: Option<&Path>,
    file: Option<&Path>,
    label: &str,
) -> Result<SliceSet> {
    match (dir, file) {
        (Some(d), None) => Ok(SliceSet::load_dir(d, label)?),
        (None, Some(f)) => {
            let img = rnst_core::dataio::load_slice(f)?;
            Ok(SliceSet::new(label, vec![img], vec![0])?)
        }
        _ => bail!("source must specify exactly one of dir or file"),
    }
}

/// Absolute-difference map against a reference, amplified for visibility
/// (x3, clamped to [0,1]).
pub(crate) fn error_map(img: &Image, reference: &Image) -> Result<Image> {
    let diff = ndarray::Zip::from(img.pixels())
        .and(reference.pixels())
        .map_collect(|&a, &b| ((a - b).abs() * 3.0).min(1.0));
    Ok(Image::new(diff)?)
}

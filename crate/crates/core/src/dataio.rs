//! Slice loading/saving, dataset directory conventions and guidance pairing.
//!
//! Two on-disk formats are supported:
//!
//! - `.pfi`, the portable float image: magic `PFI1`, little-endian u32
//!   height and width, then `height * width` little-endian `f32` pixels in
//!   row-major order. Lossless for every finite image.
//! - `.png`, 8- or 16-bit grayscale. Loading rescales by the source format's
//!   maximum code value (so 8-bit 128 becomes 128/255); saving quantizes to
//!   16 bits.
//!
//! A dataset directory holds one slice set: files named
//! `<label>_<index:04>.{png|pfi}` with strictly increasing indices.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

const PFI_MAGIC: &[u8; 4] = b"PFI1";

/// Writes an image in the portable float format.
pub fn save_pfi(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + img.height() * img.width() * 4);
    buf.extend_from_slice(PFI_MAGIC);
    buf.extend_from_slice(&(img.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for p in img.pixels().iter() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a portable float image.
pub fn load_pfi(path: &Path) -> Result<Image> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != PFI_MAGIC {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "bad magic bytes, expected PFI1".into(),
        });
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut data = vec![0u8; h * w * 4];
    file.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
    let pixels = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::from_vec(h, w, pixels)
}

/// Loads a slice from `.pfi` or grayscale `.png`, rescaled to `[0, 1]`.
pub fn load_slice(path: &Path) -> Result<Image> {
    match extension(path) {
        Some("pfi") => load_pfi(path),
        Some("png") => load_png(path),
        _ => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "expected a .pfi or .png file".into(),
        }),
    }
}

/// Saves a slice in the format chosen by the file extension. Only `.pfi` is
/// a lossless round-trip; `.png` quantizes to 16 bits.
pub fn save_slice(img: &Image, path: &Path) -> Result<()> {
    match extension(path) {
        Some("pfi") => save_pfi(img, path),
        Some("png") => save_png(img, path),
        _ => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "expected a .pfi or .png file".into(),
        }),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (h, w) = (dynimg.height() as usize, dynimg.width() as usize);
    let pixels: Vec<f32> = match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            img.into_raw().iter().map(|&p| p as f32 / 255.0).collect()
        }
        image::DynamicImage::ImageLuma16(img) => {
            img.into_raw().iter().map(|&p| p as f32 / 65535.0).collect()
        }
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("expected 8- or 16-bit grayscale PNG, got {:?}", other.color()),
            })
        }
    };
    Image::from_vec(h, w, pixels)
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let data: Vec<u16> = img
        .pixels()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        img.width() as u32,
        img.height() as u32,
        data,
    )
    .expect("buffer sized from image dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageDecode {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

/// An ordered stack of same-sized slices with strictly increasing indices.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub label: String,
    pub slices: Vec<Image>,
    pub indices: Vec<usize>,
}

impl SliceSet {
    pub fn new(label: impl Into<String>, slices: Vec<Image>, indices: Vec<usize>) -> Result<Self> {
        if slices.len() != indices.len() {
            return Err(Error::InvalidParameter {
                name: "indices",
                reason: format!("{} slices but {} indices", slices.len(), indices.len()),
            });
        }
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter {
                name: "indices",
                reason: "slice indices must be strictly increasing".into(),
            });
        }
        if let Some(first) = slices.first() {
            for s in &slices[1..] {
                first.check_same_shape(s)?;
            }
        }
        Ok(SliceSet {
            label: label.into(),
            slices,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Loads every `<label>_<index:04>.{png|pfi}` file in `dir`, sorted by
    /// index. `.pfi` wins when both extensions exist for the same index.
    pub fn load_dir(dir: &Path, label: &str) -> Result<Self> {
        let mut found: Vec<(usize, PathBuf)> = Vec::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if let Some(index) = parse_slice_name(&path, label) {
                found.push((index, path));
            }
        }
        found.sort();
        // Prefer .pfi over .png for duplicate indices.
        found.dedup_by(|later, earlier| {
            if later.0 != earlier.0 {
                return false;
            }
            if extension(&later.1) == Some("pfi") {
                earlier.1 = later.1.clone();
            }
            true
        });
        if found.is_empty() {
            return Err(Error::UnsupportedFormat {
                path: dir.to_path_buf(),
                reason: format!("no {label}_NNNN.png or .pfi slices found"),
            });
        }
        let mut slices = Vec::with_capacity(found.len());
        let mut indices = Vec::with_capacity(found.len());
        for (index, path) in found {
            slices.push(load_slice(&path)?);
            indices.push(index);
        }
        SliceSet::new(label, slices, indices)
    }

    /// Writes the set into `dir` using the naming convention, one file per
    /// slice with the given extension.
    pub fn save_dir(&self, dir: &Path, format: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.len());
        for (img, &index) in self.slices.iter().zip(&self.indices) {
            let path = dir.join(slice_file_name(&self.label, index, format));
            save_slice(img, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Canonical slice file name: `<label>_<index:04>.<ext>`.
pub fn slice_file_name(label: &str, index: usize, ext: &str) -> String {
    format!("{label}_{index:04}.{ext}")
}

fn parse_slice_name(path: &Path, label: &str) -> Option<usize> {
    let ext = extension(path)?;
    if ext != "png" && ext != "pfi" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let rest = stem.strip_prefix(label)?.strip_prefix('_')?;
    rest.parse().ok()
}

/// How content slices are paired with guidance slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GuidancePolicy {
    /// Guidance slice index equals the content slice index.
    Matched,
    /// A single guidance slice serves every content slice.
    Frozen { frozen_index: usize },
}

/// Pairs each content slice with its guidance slice under the policy.
/// Returns `(content, guidance, content index)` triples in index order.
pub fn pair_guidance<'a>(
    content: &'a SliceSet,
    guidance: &'a SliceSet,
    policy: &GuidancePolicy,
) -> Result<Vec<(&'a Image, &'a Image, usize)>> {
    match policy {
        GuidancePolicy::Matched => {
            let mut pairs = Vec::with_capacity(content.len());
            for (img, &index) in content.slices.iter().zip(&content.indices) {
                let pos = guidance
                    .indices
                    .iter()
                    .position(|&g| g == index)
                    .ok_or(Error::IndexMismatch(index))?;
                pairs.push((img, &guidance.slices[pos], index));
            }
            Ok(pairs)
        }
        GuidancePolicy::Frozen { frozen_index } => {
            let pos = guidance
                .indices
                .iter()
                .position(|&g| g == *frozen_index)
                .ok_or(Error::MissingFrozenIndex(*frozen_index))?;
            let frozen = &guidance.slices[pos];
            Ok(content
                .slices
                .iter()
                .zip(&content.indices)
                .map(|(img, &index)| (img, frozen, index))
                .collect())
        }
    }
}

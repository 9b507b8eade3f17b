//! Directory datasets: `<id>.pgm` (or `.png`) next to `<id>_mask.pgm`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::image_io::{read_gray, write_gray};
use super::Sample;
use crate::error::{Error, Result};

/// Filename stem suffix marking a mask file.
pub const MASK_SUFFIX: &str = "_mask";

fn insert_unique(map: &mut BTreeMap<String, PathBuf>, id: &str, path: PathBuf) -> Result<()> {
    if let Some(prev) = map.insert(id.to_string(), path.clone()) {
        return Err(Error::Dataset(format!(
            "`{id}` has two files: {} and {}",
            prev.display(),
            path.display()
        )));
    }
    Ok(())
}

/// Load every image/mask pair in `dir`, skipping ids in `exclude`.
///
/// Samples come back sorted by id. Masks are binarized at 0.5.
pub fn load_dataset(dir: &Path, exclude: &[String]) -> Result<Vec<Sample>> {
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("pgm" | "png")) || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        match stem.strip_suffix(MASK_SUFFIX) {
            Some(id) => insert_unique(&mut masks, id, path)?,
            None => insert_unique(&mut images, &stem, path)?,
        }
    }
    let exclude: BTreeSet<&str> = exclude.iter().map(String::as_str).collect();
    if let Some(id) = masks
        .keys()
        .find(|id| !images.contains_key(*id) && !exclude.contains(id.as_str()))
    {
        return Err(Error::Dataset(format!("mask `{id}{MASK_SUFFIX}` has no image")));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        if exclude.contains(id.as_str()) {
            continue;
        }
        let mask_path = masks
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("unpaired image `{id}`: no `{id}{MASK_SUFFIX}` file")))?;
        let image = read_gray(image_path)?;
        let mask = read_gray(mask_path)?;
        if image.shape() != mask.shape() {
            return Err(Error::Dataset(format!(
                "`{id}`: image extents {:?} differ from mask extents {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        let mask = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        samples.push(Sample::new(id.clone(), image, mask)?);
    }
    Ok(samples)
}

/// Identifiers listed one per line; blank lines and `#` comments are ignored.
pub fn read_exclusions(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Write samples as 8-bit PGM pairs into `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in samples {
        write_gray(&dir.join(format!("{}.pgm", s.id)), &s.image)?;
        write_gray(&dir.join(format!("{}{MASK_SUFFIX}.pgm", s.id)), &s.mask)?;
    }
    Ok(())
}

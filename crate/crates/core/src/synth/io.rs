use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::render::{generate_sample, to_u8, DefectRecord, Sample};
use super::spec::ScenarioSpec;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor_core::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub defects: Vec<DefectRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: ScenarioSpec,
    pub seed: u64,
    pub count: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `images/NNNNN.png`, `masks/NNNNN.png` and `manifest.json` under
/// `out_dir`. Samples render in parallel; the bytes do not depend on `exec`.
pub fn generate_dataset(spec: &ScenarioSpec, count: usize, out_dir: &Path, exec: Execution) -> Result<Manifest> {
    spec.validate()?;
    let samples = exec.try_map_range(count, |i| generate_sample(spec, i as u64))?;
    write_dataset(spec, &samples, out_dir)
}

pub fn write_dataset(spec: &ScenarioSpec, samples: &[Sample], out_dir: &Path) -> Result<Manifest> {
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        let image = format!("images/{name}");
        let mask = format!("masks/{name}");
        write_png(&out_dir.join(&image), &s.image)?;
        write_png(&out_dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry { image, mask, defects: s.defects.clone() });
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, spec: spec.clone(), seed: spec.seed, count: samples.len(), samples: entries };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Encodes a `[1, 1, H, W]` tensor with values in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = (t.h() as u32, t.w() as u32);
    let pixels: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(w, h, pixels)
        .ok_or_else(|| Error::InvalidArgument(format!("cannot encode tensor of shape {:?}", t.shape())))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Reads any grayscale-convertible image as a `[1, 1, H, W]` tensor of `v / 255`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_luma8();
    let (w, h) = img.dimensions();
    Tensor::new([1, 1, h as usize, w as usize], img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

/// Reads a mask; pixels above mid-gray are foreground.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    Ok(read_png(path)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}

fn load_pair(dir: &Path, image: &str, mask: &str, defects: Vec<DefectRecord>) -> Result<Sample> {
    let (ip, mp) = (dir.join(image), dir.join(mask));
    for p in [&ip, &mp] {
        if !p.is_file() {
            return Err(Error::Dataset { path: dir.to_path_buf(), reason: format!("pair '{image}' is missing {}", p.display()) });
        }
    }
    let img = read_png(&ip)?;
    let m = read_mask(&mp)?;
    if img.shape() != m.shape() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            reason: format!("image {image} is {:?} but its mask is {:?}", img.shape(), m.shape()),
        });
    }
    Ok(Sample { image: img, mask: m, defects })
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p: PathBuf = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                names.push(n.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Image and mask paths of a dataset directory, relative to it, in load
/// order. With a manifest the listed pairs come in order; without one every
/// `images/*.png` pairs with the same name under `masks/` and carries no
/// metadata.
pub fn dataset_entries(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset { path: manifest_path.clone(), reason: format!("malformed manifest: {e}") })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset { path: manifest_path, reason: format!("unsupported schema version {}", manifest.schema_version) });
        }
        if manifest.count != manifest.samples.len() {
            return Err(Error::Dataset {
                path: manifest_path,
                reason: format!("count {} disagrees with {} listed samples", manifest.count, manifest.samples.len()),
            });
        }
        return Ok(manifest.samples);
    }
    let images = dir.join("images");
    if !images.is_dir() {
        return Err(Error::Dataset { path: dir.to_path_buf(), reason: "neither manifest.json nor images/ found".into() });
    }
    Ok(png_names(&images)?
        .into_iter()
        .map(|n| ManifestEntry { image: format!("images/{n}"), mask: format!("masks/{n}"), defects: Vec::new() })
        .collect())
}

/// Loads every pair listed by [`dataset_entries`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    dataset_entries(dir)?.into_iter().map(|e| load_pair(dir, &e.image, &e.mask, e.defects)).collect()
}

//! On-disk formats.
//!
//! Binary blocks (`*.f32`) are a header of little-endian `u32` values followed
//! by little-endian `f32` payload. A dataset episode directory holds:
//!
//! - `observation.png`: reference RGB image
//! - `depth.f32`: header `width, height`, then row-major depth in meters
//! - `trace.f32`: header `K, L + 1`, then `K x (L + 1) x 3` values
//! - `meta.json`: [`SampleMeta`]

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::sample::{DepthMap, TraceSample};
use crate::trace::{GridSpec, ScreenTrace};

pub const SAMPLE_FORMAT_VERSION: u32 = 1;

pub const OBSERVATION_FILE: &str = "observation.png";
pub const DEPTH_FILE: &str = "depth.f32";
pub const TRACE_FILE: &str = "trace.f32";
pub const META_FILE: &str = "meta.json";

pub fn write_f32_block(path: &Path, header: &[u32], values: impl IntoIterator<Item = f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    for h in header {
        put(&h.to_le_bytes())?;
    }
    for v in values {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a block with `header_len` `u32` header words. The payload length must
/// equal the product of the header words times `values_per_cell`.
pub fn read_f32_block(path: &Path, header_len: usize, values_per_cell: usize) -> Result<(Vec<u32>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < header_len * 4 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    let header: Vec<u32> = (0..header_len).map(word).collect();
    let expected = header
        .iter()
        .try_fold(values_per_cell, |acc, h| acc.checked_mul(*h as usize))
        .ok_or_else(|| Error::format(path, "header overflows"))?;
    let payload = &bytes[header_len * 4..];
    if payload.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header implies {}", payload.len(), expected * 4),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_f32_block(
        path,
        &[depth.width() as u32, depth.height() as u32],
        depth.data().iter().copied(),
    )
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let (h, data) = read_f32_block(path, 2, 1)?;
    DepthMap::new(h[0] as usize, h[1] as usize, data)
}

/// Writes `K, L + 1` and the trace values (as `f32`).
pub fn write_trace(path: &Path, trace: &ScreenTrace) -> Result<()> {
    write_f32_block(
        path,
        &[trace.num_keypoints() as u32, trace.frames() as u32],
        trace.points().iter().map(|v| *v as f32),
    )
}

/// Raw trace block: `(K, frames, values)`.
pub fn read_trace_block(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (h, data) = read_f32_block(path, 2, 3)?;
    Ok((h[0] as usize, h[1] as usize, data.into_iter().map(f64::from).collect()))
}

pub fn read_trace(path: &Path, grid: GridSpec, z_valid: Option<Vec<bool>>) -> Result<ScreenTrace> {
    let (k, frames, values) = read_trace_block(path)?;
    if k != grid.num_keypoints() {
        return Err(Error::format(
            path,
            format!("{k} keypoints stored, grid has {}", grid.num_keypoints()),
        ));
    }
    ScreenTrace::new(grid, frames, values, z_valid)
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    image.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

/// Run lengths of a boolean mask, alternating and starting with `true`
/// (the first run may be empty).
pub fn encode_rle(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = true;
    let mut len = 0usize;
    for &v in mask {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_rle(runs: &[usize]) -> Vec<bool> {
    let mut out = Vec::with_capacity(runs.iter().sum());
    let mut value = true;
    for &r in runs {
        out.extend(std::iter::repeat_n(value, r));
        value = !value;
    }
    out
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub format_version: u32,
    pub grid: GridSpec,
    pub camera: CameraModel,
    pub instructions: Vec<String>,
    pub source_id: String,
    /// Run-length encoded depth validity over `K x (L + 1)` entries,
    /// keypoint-major; absent when every entry is valid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_rle: Option<Vec<usize>>,
}

pub fn write_sample(dir: &Path, sample: &TraceSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join(OBSERVATION_FILE), &sample.image)?;
    write_depth(&dir.join(DEPTH_FILE), &sample.depth)?;
    write_trace(&dir.join(TRACE_FILE), &sample.trace)?;
    let meta = SampleMeta {
        format_version: SAMPLE_FORMAT_VERSION,
        grid: *sample.trace.grid(),
        camera: sample.camera.clone(),
        instructions: sample.instructions.clone(),
        source_id: sample.source_id.clone(),
        validity_rle: sample.trace.z_valid().map(encode_rle),
    };
    write_json(&dir.join(META_FILE), &meta)
}

pub fn read_sample(dir: &Path) -> Result<TraceSample> {
    let meta_path = dir.join(META_FILE);
    let meta: SampleMeta = read_json(&meta_path)?;
    if meta.format_version != SAMPLE_FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported format version {}", meta.format_version),
        ));
    }
    let mask = meta.validity_rle.as_deref().map(decode_rle);
    let trace = read_trace(&dir.join(TRACE_FILE), meta.grid, mask)?;
    TraceSample::new(
        read_png(&dir.join(OBSERVATION_FILE))?,
        read_depth(&dir.join(DEPTH_FILE))?,
        meta.camera,
        trace,
        meta.instructions,
        meta.source_id,
    )
}

/// Sorted subdirectories of `root` that contain `marker`.
pub fn list_episode_dirs(root: &Path, marker: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.is_dir() && p.join(marker).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

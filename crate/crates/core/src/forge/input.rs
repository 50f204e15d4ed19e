//! Forge input directory layout.
//!
//! ```text
//! <episode>/
//!   tracks.f32            header T, K; then T x K x 3 world points (NaN = missing)
//!   poses.json            PosesFile
//!   frames/000000.png     one RGB image per frame
//!   depth/000000.f32      one depth map per frame (estimated depth)
//!   sensor_depth/...      optional; enables depth rescaling
//!   instructions.json     optional EpisodeInstructions
//! ```

use std::fs;
use std::path::Path;

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::RawTrackSet;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Intrinsics};
use crate::io::{read_depth, read_f32_block, read_json, read_png, write_depth, write_f32_block, write_json, write_png};
use crate::sample::DepthMap;

pub const TRACKS_FILE: &str = "tracks.f32";
pub const POSES_FILE: &str = "poses.json";
pub const INSTRUCTIONS_FILE: &str = "instructions.json";
pub const FRAMES_DIR: &str = "frames";
pub const DEPTH_DIR: &str = "depth";
pub const SENSOR_DEPTH_DIR: &str = "sensor_depth";

/// Instruction used when an episode ships none.
pub const FALLBACK_INSTRUCTION: &str = "perform the task";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosesFile {
    pub fps: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub intrinsics: Intrinsics,
    pub poses: Vec<PoseEntry>,
}

impl PosesFile {
    pub fn from_cameras(fps: f64, image_width: usize, image_height: usize, cameras: &[CameraModel]) -> Result<Self> {
        let intrinsics = *cameras
            .first()
            .ok_or_else(|| Error::Config("no camera poses".into()))?
            .intrinsics();
        let poses = cameras
            .iter()
            .map(|c| PoseEntry {
                rotation: std::array::from_fn(|i| std::array::from_fn(|j| c.rotation()[(i, j)])),
                translation: [c.translation().x, c.translation().y, c.translation().z],
            })
            .collect();
        Ok(Self {
            fps,
            image_width,
            image_height,
            intrinsics,
            poses,
        })
    }

    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        let k = Intrinsics::new(self.intrinsics.fx, self.intrinsics.fy, self.intrinsics.cx, self.intrinsics.cy)?;
        self.poses
            .iter()
            .map(|p| CameraModel::new(k, Matrix3::from_fn(|i, j| p.rotation[i][j]), Vector3::from(p.translation)))
            .collect()
    }
}

/// Instructions for an episode: a shared list, optionally overridden per
/// motion chunk (in chunk order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeInstructions {
    pub instructions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_chunk: Option<Vec<Vec<String>>>,
}

impl Default for EpisodeInstructions {
    fn default() -> Self {
        Self {
            instructions: vec![FALLBACK_INSTRUCTION.into()],
            per_chunk: None,
        }
    }
}

impl EpisodeInstructions {
    /// Instructions for chunk `index`, at most three.
    pub fn for_chunk(&self, index: usize) -> Vec<String> {
        let list = self
            .per_chunk
            .as_ref()
            .and_then(|p| p.get(index))
            .filter(|l| !l.is_empty())
            .unwrap_or(&self.instructions);
        let mut out: Vec<String> = list.iter().take(3).cloned().collect();
        if out.is_empty() {
            out.push(FALLBACK_INSTRUCTION.into());
        }
        out
    }
}

/// One episode of forge input held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgeEpisode {
    pub id: String,
    pub tracks: RawTrackSet,
    pub images: Vec<RgbImage>,
    pub depths: Vec<DepthMap>,
    pub sensor_depths: Option<Vec<DepthMap>>,
    pub instructions: EpisodeInstructions,
}

impl ForgeEpisode {
    pub fn image_size(&self) -> (usize, usize) {
        let img = &self.images[0];
        (img.width() as usize, img.height() as usize)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let t = self.tracks.num_frames();
        if self.images.len() != t || self.depths.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "{} images and {} depth maps for {t} frames",
                self.images.len(),
                self.depths.len()
            )));
        }
        if let Some(s) = &self.sensor_depths {
            if s.len() != t {
                return Err(Error::ShapeMismatch(format!("{} sensor depth maps for {t} frames", s.len())));
            }
        }
        let (w, h) = self.image_size();
        let all_depths = self.depths.iter().chain(self.sensor_depths.iter().flatten());
        let ok = self.images.iter().all(|i| i.width() as usize == w && i.height() as usize == h)
            && all_depths.into_iter().all(|d| d.width() == w && d.height() == h);
        if !ok {
            return Err(Error::ShapeMismatch("frames differ in size".into()));
        }
        Ok(())
    }
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:06}.{ext}")
}

pub fn write_forge_episode(dir: &Path, episode: &ForgeEpisode) -> Result<()> {
    episode.validate()?;
    for sub in [FRAMES_DIR, DEPTH_DIR] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let tracks = &episode.tracks;
    let (t_count, k_count) = (tracks.num_frames(), tracks.num_tracks());
    let values = (0..t_count).flat_map(|t| {
        (0..k_count).flat_map(move |k| {
            let p = tracks.point(k, t);
            let v = tracks.is_valid(k, t);
            (0..3).map(move |c| if v { p[c] as f32 } else { f32::NAN })
        })
    });
    write_f32_block(&dir.join(TRACKS_FILE), &[t_count as u32, k_count as u32], values)?;
    let (w, h) = episode.image_size();
    write_json(&dir.join(POSES_FILE), &PosesFile::from_cameras(tracks.fps(), w, h, tracks.cameras())?)?;
    for (t, (img, depth)) in episode.images.iter().zip(&episode.depths).enumerate() {
        write_png(&dir.join(FRAMES_DIR).join(frame_name(t, "png")), img)?;
        write_depth(&dir.join(DEPTH_DIR).join(frame_name(t, "f32")), depth)?;
    }
    if let Some(sensor) = &episode.sensor_depths {
        let sd = dir.join(SENSOR_DEPTH_DIR);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (t, d) in sensor.iter().enumerate() {
            write_depth(&sd.join(frame_name(t, "f32")), d)?;
        }
    }
    write_json(&dir.join(INSTRUCTIONS_FILE), &episode.instructions)
}

/// Reads an episode. Track coordinates pass through `f32` on disk.
pub fn read_forge_episode(dir: &Path) -> Result<ForgeEpisode> {
    let tracks_path = dir.join(TRACKS_FILE);
    let (header, values) = read_f32_block(&tracks_path, 2, 3)?;
    let (t_count, k_count) = (header[0] as usize, header[1] as usize);
    let poses: PosesFile = read_json(&dir.join(POSES_FILE))?;
    let cameras = poses.cameras()?;
    if cameras.len() != t_count {
        return Err(Error::format(
            &tracks_path,
            format!("{t_count} frames of tracks but {} poses", cameras.len()),
        ));
    }
    let mut points = vec![0.0; k_count * t_count * 3];
    let mut valid = vec![false; k_count * t_count];
    for t in 0..t_count {
        for k in 0..k_count {
            let src = (t * k_count + k) * 3;
            let p = &values[src..src + 3];
            if p.iter().all(|v| v.is_finite()) {
                valid[k * t_count + t] = true;
                for c in 0..3 {
                    points[(k * t_count + t) * 3 + c] = p[c] as f64;
                }
            }
        }
    }
    let tracks = RawTrackSet::new(k_count, t_count, points, valid, cameras, poses.fps)?;
    let read_maps = |sub: &str| -> Result<Vec<DepthMap>> {
        (0..t_count).map(|t| read_depth(&dir.join(sub).join(frame_name(t, "f32")))).collect()
    };
    let images = (0..t_count)
        .map(|t| read_png(&dir.join(FRAMES_DIR).join(frame_name(t, "png"))))
        .collect::<Result<Vec<_>>>()?;
    let depths = read_maps(DEPTH_DIR)?;
    let sensor_depths = if dir.join(SENSOR_DEPTH_DIR).is_dir() {
        Some(read_maps(SENSOR_DEPTH_DIR)?)
    } else {
        None
    };
    let instr_path = dir.join(INSTRUCTIONS_FILE);
    let instructions = if instr_path.exists() {
        read_json(&instr_path)?
    } else {
        EpisodeInstructions::default()
    };
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let episode = ForgeEpisode {
        id,
        tracks,
        images,
        depths,
        sensor_depths,
        instructions,
    };
    episode.validate()?;
    if (poses.image_width, poses.image_height) != episode.image_size() {
        return Err(Error::format(dir.join(POSES_FILE), "image size disagrees with frames"));
    }
    Ok(episode)
}

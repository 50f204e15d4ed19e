//! Turning raw world-frame point tracks into screen-aligned training traces.
//!
//! The stages are, in order: [`chunk_events`] splits an episode into spans of
//! non-negligible motion, [`align_to_reference`] expresses every track of a
//! span in the span's reference camera and re-seeds it onto the keypoint grid,
//! optional [`rescale_depth`] / [`apply_depth_rescale`] correct estimated depth
//! against a sensor, and [`retarget_speed`] resamples each path to a fixed
//! number of steps by arc length. [`assemble_triplets`] runs all of them for
//! one episode.

mod align;
mod assemble;
mod chunk;
mod depth;
mod input;
mod retarget;

pub use align::align_to_reference;
pub use assemble::{assemble_triplets, chunk_id, chunk_trace, forge_dataset, ForgeConfig, ForgeSummary};
pub use chunk::{chunk_events, chunks_from_scores, motion_scores, EventChunk};
pub use depth::{apply_depth_rescale, rescale_depth, DepthRescaleMap, RescaledTrace};
pub use input::{
    read_forge_episode, write_forge_episode, EpisodeInstructions, ForgeEpisode, PoseEntry, PosesFile, TRACKS_FILE,
};
pub use retarget::{default_z_scale, retarget_speed};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::CameraModel;

/// World-frame tracks of `K` points over `T` frames plus the per-frame camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrackSet {
    num_tracks: usize,
    num_frames: usize,
    /// Track-major: `((k * T) + t) * 3 + axis`.
    points: Vec<f64>,
    valid: Vec<bool>,
    cameras: Vec<CameraModel>,
    fps: f64,
}

impl RawTrackSet {
    pub fn new(
        num_tracks: usize,
        num_frames: usize,
        points: Vec<f64>,
        valid: Vec<bool>,
        cameras: Vec<CameraModel>,
        fps: f64,
    ) -> Result<Self> {
        if num_frames < 2 {
            return Err(Error::HorizonMismatch { frames: num_frames });
        }
        if points.len() != num_tracks * num_frames * 3 || valid.len() != num_tracks * num_frames {
            return Err(Error::ShapeMismatch(format!(
                "track buffers do not match {num_tracks} tracks x {num_frames} frames"
            )));
        }
        if cameras.len() != num_frames {
            return Err(Error::ShapeMismatch(format!(
                "{} cameras for {num_frames} frames",
                cameras.len()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            num_tracks,
            num_frames,
            points,
            valid,
            cameras,
            fps,
        })
    }

    pub fn num_tracks(&self) -> usize {
        self.num_tracks
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn camera(&self, t: usize) -> &CameraModel {
        &self.cameras[t]
    }

    pub fn point(&self, k: usize, t: usize) -> Vector3<f64> {
        let i = (k * self.num_frames + t) * 3;
        Vector3::new(self.points[i], self.points[i + 1], self.points[i + 2])
    }

    pub fn is_valid(&self, k: usize, t: usize) -> bool {
        self.valid[k * self.num_frames + t]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

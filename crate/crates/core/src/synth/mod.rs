//! Deterministic synthetic tabletop scenes with closed-form ground truth.
//!
//! A scene is a textured table plane seen by a (possibly moving) camera. Point
//! tracks start on a uniform grid of rays from the first camera; the tracks
//! nearest a seeded center form the object, which moves along one of several
//! closed-form motion families while everything else stays put.

mod instructions;
mod scene;
mod suite;

pub use instructions::{direction_phrase, instructions_for, COLORS, OBJECTS};
pub use scene::{gen_scene, Scene, SceneTruth};
pub use suite::{
    gen_benchmark_suite, ground_truth, read_manifest, synth_episode_spec, EpisodeTruth, Manifest, SuiteConfig,
    GT_TRACE_FILE, INCOMPLETE_MARKER, MANIFEST_FILE,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionFamily {
    LinearTransport,
    ArcTransport,
    PickPlace,
    Sweep,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [
        MotionFamily::LinearTransport,
        MotionFamily::ArcTransport,
        MotionFamily::PickPlace,
        MotionFamily::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::LinearTransport => "linear-transport",
            MotionFamily::ArcTransport => "arc-transport",
            MotionFamily::PickPlace => "pick-place",
            MotionFamily::Sweep => "sweep",
        }
    }
}

impl fmt::Display for MotionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion family `{s}`")))
    }
}

/// Direction of the object's net displacement in the table plane, as seen
/// from the default camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Left,
    Right,
    Forward,
    Backward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Forward, Direction::Backward];

    /// Unit vector in world coordinates (`z` up, camera looking along `+y`).
    pub fn unit(self) -> [f64; 3] {
        match self {
            Direction::Left => [-1.0, 0.0, 0.0],
            Direction::Right => [1.0, 0.0, 0.0],
            Direction::Forward => [0.0, 1.0, 0.0],
            Direction::Backward => [0.0, -1.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown direction `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CameraPath {
    Static,
    /// Yaw about the vertical axis through the look-at target, growing
    /// linearly to `amplitude_deg` at the last frame.
    Orbit { amplitude_deg: f64 },
    /// Smooth bounded shake: three sinusoids per axis on the eye and the
    /// look-at target.
    HandheldJitter { amplitude_m: f64 },
}

impl CameraPath {
    pub const NAMES: [&'static str; 3] = ["static", "orbit", "handheld-jitter"];

    pub fn name(&self) -> &'static str {
        match self {
            CameraPath::Static => "static",
            CameraPath::Orbit { .. } => "orbit",
            CameraPath::HandheldJitter { .. } => "handheld-jitter",
        }
    }

    /// Path of the given kind with its default amplitude.
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(CameraPath::Static),
            "orbit" => Ok(CameraPath::Orbit { amplitude_deg: 10.0 }),
            "handheld-jitter" => Ok(CameraPath::HandheldJitter { amplitude_m: 0.01 }),
            _ => Err(Error::Config(format!("unknown camera path `{s}`"))),
        }
    }
}

/// Axis-aligned box in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            min: [-0.3, -0.3, 0.0],
            max: [0.3, 0.3, 0.3],
        }
    }
}

impl Workspace {
    pub fn diameter(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub motion_family: MotionFamily,
    /// Fraction of tracks attached to the moving object, in `[0, 1]`.
    pub moving_fraction: f64,
    pub camera_path: CameraPath,
    pub episode_len: usize,
    pub workspace: Workspace,
    pub image_width: usize,
    pub image_height: usize,
    /// Tracks start on a `track_rows x track_cols` grid of first-frame rays.
    pub track_rows: usize,
    pub track_cols: usize,
    /// Seeded when absent.
    pub direction: Option<Direction>,
    /// Net object displacement in meters.
    pub distance: f64,
    /// Frames over which the object moves.
    pub motion_frames: usize,
    /// Replaces the family templates; `{color}`, `{object}` and `{dir}` are
    /// filled in.
    pub instruction_template: Option<String>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            motion_family: MotionFamily::LinearTransport,
            moving_fraction: 0.3,
            camera_path: CameraPath::Static,
            episode_len: 48,
            workspace: Workspace::default(),
            image_width: 128,
            image_height: 128,
            track_rows: 20,
            track_cols: 20,
            direction: None,
            distance: 0.3,
            motion_frames: 12,
            instruction_template: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.moving_fraction) {
            return Err(Error::Config(format!(
                "moving fraction {} outside [0, 1]",
                self.moving_fraction
            )));
        }
        if self.episode_len < 2 {
            return Err(Error::Config("an episode needs at least 2 frames".into()));
        }
        if self.motion_frames == 0 {
            return Err(Error::Config("motion must last at least one frame".into()));
        }
        if self.image_width == 0 || self.image_height == 0 || self.track_rows == 0 || self.track_cols == 0 {
            return Err(Error::Config("image and track grid must be non-empty".into()));
        }
        if !(self.distance.is_finite() && self.distance >= 0.0) {
            return Err(Error::Config(format!("invalid distance {}", self.distance)));
        }
        let w = &self.workspace;
        if (0..3).any(|i| !(w.min[i] < w.max[i])) {
            return Err(Error::Config("workspace box is empty".into()));
        }
        Ok(())
    }
}

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{gen_scene, Scene};
use super::{CameraPath, Direction, MotionFamily, SceneSpec, Workspace};
use crate::error::{Error, Result};
use crate::forge::{chunk_trace, motion_scores, write_forge_episode, EventChunk, ForgeConfig};
use crate::io::{read_json, write_json, write_trace};
use crate::trace::{GridSpec, ScreenTrace};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GT_TRACE_FILE: &str = "gt_trace.f32";
/// Present in a suite directory while it is being written or after a failed
/// write.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Assigned round-robin.
    pub families: Vec<MotionFamily>,
    /// Cycled once per full round of families.
    pub cameras: Vec<CameraPath>,
    /// Seeded per episode from this set.
    pub directions: Vec<Direction>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub horizon: usize,
    pub image_size: usize,
    pub episode_len: usize,
    pub motion_frames: usize,
    pub moving_fraction: f64,
    pub distance: f64,
    pub workspace: Workspace,
    pub instruction_template: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            episodes: 16,
            seed: 0,
            families: MotionFamily::ALL.to_vec(),
            cameras: vec![CameraPath::Static],
            directions: Direction::ALL.to_vec(),
            grid_rows: scene.track_rows,
            grid_cols: scene.track_cols,
            horizon: crate::trace::DEFAULT_HORIZON,
            image_size: scene.image_width,
            episode_len: scene.episode_len,
            motion_frames: scene.motion_frames,
            moving_fraction: scene.moving_fraction,
            distance: scene.distance,
            workspace: scene.workspace,
            instruction_template: None,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.cameras.is_empty() || self.directions.is_empty() {
            return Err(Error::Config("families, cameras and directions must be non-empty".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn forge_config(&self) -> ForgeConfig {
        ForgeConfig {
            horizon: self.horizon,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            ..ForgeConfig::default()
        }
    }

    /// Per-episode seeds, derived from the suite seed.
    pub fn episode_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.episodes).map(|_| rng.random()).collect()
    }
}

/// Scene spec of episode `index`.
pub fn synth_episode_spec(config: &SuiteConfig, index: usize, seed: u64) -> SceneSpec {
    let nf = config.families.len();
    let direction = config.directions[(seed % config.directions.len() as u64) as usize];
    SceneSpec {
        seed,
        motion_family: config.families[index % nf],
        moving_fraction: config.moving_fraction,
        camera_path: config.cameras[(index / nf) % config.cameras.len()],
        episode_len: config.episode_len,
        workspace: config.workspace,
        image_width: config.image_size,
        image_height: config.image_size,
        track_rows: config.grid_rows,
        track_cols: config.grid_cols,
        direction: Some(direction),
        distance: config.distance,
        motion_frames: config.motion_frames,
        instruction_template: config.instruction_template.clone(),
    }
}

/// Closed-form ground truth of one benchmark episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTruth {
    pub id: String,
    pub seed: u64,
    pub family: MotionFamily,
    pub direction: Direction,
    pub camera_path: String,
    pub color: String,
    pub object: String,
    /// Reference frame (start of the motion chunk).
    pub ref_frame: usize,
    /// Exclusive end of the motion chunk.
    pub chunk_end: usize,
    /// Object center projected into the reference frame, pixels. Stands in
    /// for the end-effector position of the endpoint protocol.
    pub anchor_px: [f64; 2],
    /// Object center in the reference camera, before and after the motion.
    pub anchor_start_camera: [f64; 3],
    pub anchor_end_camera: [f64; 3],
    /// Screen-aligned `(x px, y px, z m)` of the object center after the motion.
    pub anchor_end_screen: [f64; 3],
    pub true_arc_length_m: f64,
    /// Keypoints of the ground-truth trace that move.
    pub moving_keypoints: Vec<usize>,
    pub instructions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub horizon: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub workspace: Workspace,
    pub workspace_diameter: f64,
    pub episodes: Vec<EpisodeTruth>,
}

impl Manifest {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid_rows, self.grid_cols, self.image_width, self.image_height)
    }
}

/// Ground-truth trace (exact tracks, true motion chunk) and the episode's
/// truth record.
pub fn ground_truth(scene: &Scene, config: &ForgeConfig, id: &str, seed: u64, camera_path: &str) -> Result<(ScreenTrace, EpisodeTruth)> {
    let t = &scene.truth;
    let tracks = &scene.episode.tracks;
    let end = t.motion_start + t.motion_frames;
    let scores = motion_scores(tracks);
    let chunk = EventChunk {
        start_frame: t.motion_start,
        end_frame: end,
        motion_score_per_frame: scores[t.motion_start..end].to_vec(),
    };
    let trace = chunk_trace(&scene.episode, &chunk, config)?;
    let cam = tracks.camera(t.motion_start);
    let start = Vector3::from(t.anchor_world);
    let stop = start + Vector3::from(t.displacement);
    let s0 = cam.project_world_to_screen(&start)?;
    let s1 = cam.project_world_to_screen(&stop)?;
    let moving_keypoints = (0..trace.num_keypoints())
        .filter(|&k| {
            let (a, b) = (trace.point(k, 0), trace.last_frame()[k]);
            (0..3).any(|c| (a[c] - b[c]).abs() > 1e-6)
        })
        .collect();
    let truth = EpisodeTruth {
        id: id.into(),
        seed,
        family: t.family,
        direction: t.direction,
        camera_path: camera_path.into(),
        color: t.color.clone(),
        object: t.object.clone(),
        ref_frame: t.motion_start,
        chunk_end: end,
        anchor_px: [s0.x, s0.y],
        anchor_start_camera: cam.world_to_camera(&start).into(),
        anchor_end_camera: cam.world_to_camera(&stop).into(),
        anchor_end_screen: s1.as_array(),
        true_arc_length_m: t.path_length_m,
        moving_keypoints,
        instructions: t.instructions.clone(),
    };
    Ok((trace, truth))
}

fn episode_id(index: usize) -> String {
    format!("episode_{index:04}")
}

/// Writes `config.episodes` episodes in the forge input format plus
/// `manifest.json` and a per-episode `gt_trace.f32`. Output bytes depend only
/// on the config.
pub fn gen_benchmark_suite(config: &SuiteConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, "suite generation in progress\n").map_err(|e| Error::io(&marker, e))?;
    let forge = config.forge_config();
    let seeds = config.episode_seeds();
    let result: Result<Vec<EpisodeTruth>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let spec = synth_episode_spec(config, i, seed);
            let mut scene = gen_scene(&spec)?;
            let id = episode_id(i);
            scene.episode.id = id.clone();
            let (trace, truth) = ground_truth(&scene, &forge, &id, seed, spec.camera_path.name())?;
            let dir = out.join(&id);
            write_forge_episode(&dir, &scene.episode)?;
            write_trace(&dir.join(GT_TRACE_FILE), &trace)?;
            Ok(truth)
        })
        .collect();
    let episodes = match result {
        Ok(e) => e,
        Err(e) => {
            let _ = fs::write(&marker, format!("suite generation failed: {e}\n"));
            return Err(e);
        }
    };
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: config.seed,
        grid_rows: config.grid_rows,
        grid_cols: config.grid_cols,
        horizon: config.horizon,
        image_width: config.image_size,
        image_height: config.image_size,
        workspace: config.workspace,
        workspace_diameter: config.workspace.diameter(),
        episodes,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            dir.join(MANIFEST_FILE),
            format!("unsupported manifest version {}", m.format_version),
        ));
    }
    Ok(m)
}

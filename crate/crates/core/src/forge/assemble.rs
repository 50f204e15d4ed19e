use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    align_to_reference, apply_depth_rescale, chunk_events, default_z_scale, read_forge_episode, rescale_depth,
    retarget_speed, EventChunk, ForgeEpisode, TRACKS_FILE,
};
use crate::error::{Error, Result};
use crate::io::{list_episode_dirs, write_sample};
use crate::sample::TraceSample;
use crate::trace::{GridSpec, ScreenTrace, DEFAULT_GRID_SIDE, DEFAULT_HORIZON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeConfig {
    pub horizon: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Pixels per frame.
    pub motion_threshold: f64,
    pub min_chunk_len: usize,
    /// Pixels.
    pub blur_sigma: f64,
    /// Pixels per meter for the arc-length metric; `None` derives it per
    /// chunk from the focal length and median depth.
    pub z_scale: Option<f64>,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            grid_rows: DEFAULT_GRID_SIDE,
            grid_cols: DEFAULT_GRID_SIDE,
            motion_threshold: 0.5,
            min_chunk_len: 8,
            blur_sigma: 7.0,
            z_scale: None,
        }
    }
}

impl ForgeConfig {
    pub fn grid(&self, image_width: usize, image_height: usize) -> Result<GridSpec> {
        GridSpec::new(self.grid_rows, self.grid_cols, image_width, image_height)
    }
}

/// Source id and output directory name of chunk `index` of an episode.
pub fn chunk_id(episode_id: &str, index: usize) -> String {
    format!("{episode_id}__c{index:02}")
}

/// Aligned, depth-corrected and retargeted trace for one chunk, with its
/// reference frame at the chunk start.
pub fn chunk_trace(episode: &ForgeEpisode, chunk: &EventChunk, config: &ForgeConfig) -> Result<ScreenTrace> {
    let (w, h) = episode.image_size();
    let ref_frame = chunk.start_frame;
    let mut trace = align_to_reference(&episode.tracks, chunk, ref_frame, config.grid(w, h)?)?;
    if let Some(sensor) = &episode.sensor_depths {
        let map = rescale_depth(&episode.depths[ref_frame], &sensor[ref_frame], config.blur_sigma)?;
        let rescaled = apply_depth_rescale(&trace, &map)?;
        if !rescaled.out_of_bounds.is_empty() {
            tracing::debug!(
                episode = %episode.id,
                entries = rescaled.out_of_bounds.len(),
                "trace entries outside the rescale map kept their depth"
            );
        }
        trace = rescaled.trace;
    }
    let fx = episode.tracks.camera(ref_frame).intrinsics().fx;
    let z_scale = config.z_scale.unwrap_or_else(|| default_z_scale(&trace, fx));
    retarget_speed(&trace, config.horizon, z_scale)
}

/// One triplet per motion chunk of the episode.
///
/// The observation is the reference frame's image and depth; when sensor
/// depth is present it replaces the estimated depth. Chunks that fail are
/// skipped with a warning; an episode without motion yields nothing.
pub fn assemble_triplets(episode: &ForgeEpisode, config: &ForgeConfig) -> Result<Vec<TraceSample>> {
    episode.validate()?;
    let chunks = match chunk_events(&episode.tracks, config.motion_threshold, config.min_chunk_len) {
        Ok(c) => c,
        Err(Error::NoMotionFound) => {
            tracing::warn!(episode = %episode.id, "no motion found, episode skipped");
            return Ok(Vec::new());
        }
        Err(e) => return Err(e),
    };
    let mut samples = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let built = chunk_trace(episode, chunk, config).and_then(|trace| {
            let r = chunk.start_frame;
            let depth = match &episode.sensor_depths {
                Some(s) => s[r].clone(),
                None => episode.depths[r].clone(),
            };
            TraceSample::new(
                episode.images[r].clone(),
                depth,
                episode.tracks.camera(r).clone(),
                trace,
                episode.instructions.for_chunk(i),
                chunk_id(&episode.id, i),
            )
        });
        match built {
            Ok(s) => samples.push(s),
            Err(e) => tracing::warn!(
                episode = %episode.id,
                chunk = i,
                start = chunk.start_frame,
                end = chunk.end_frame,
                error = %e,
                "chunk skipped"
            ),
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgeSummary {
    pub episodes: usize,
    pub samples: usize,
    /// Sample directory names, sorted.
    pub sample_ids: Vec<String>,
    /// `(episode, reason)` for episodes that could not be read or assembled.
    pub failures: Vec<(String, String)>,
}

/// Forges every episode directory under `input` into sample directories
/// under `output`. Episodes run in parallel; results do not depend on
/// scheduling.
pub fn forge_dataset(input: &Path, output: &Path, config: &ForgeConfig) -> Result<ForgeSummary> {
    let dirs = list_episode_dirs(input, TRACKS_FILE)?;
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let results: Vec<(String, Result<Vec<String>>)> = dirs
        .par_iter()
        .map(|dir| {
            let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let run = || -> Result<Vec<String>> {
                let episode = read_forge_episode(dir)?;
                let samples = assemble_triplets(&episode, config)?;
                let mut ids = Vec::with_capacity(samples.len());
                for s in &samples {
                    write_sample(&output.join(&s.source_id), s)?;
                    ids.push(s.source_id.clone());
                }
                Ok(ids)
            };
            (id, run())
        })
        .collect();
    let mut summary = ForgeSummary {
        episodes: dirs.len(),
        ..Default::default()
    };
    for (id, r) in results {
        match r {
            Ok(ids) => summary.sample_ids.extend(ids),
            Err(e) => {
                tracing::warn!(episode = %id, error = %e, "episode failed");
                summary.failures.push((id, e.to_string()));
            }
        }
    }
    summary.sample_ids.sort();
    summary.samples = summary.sample_ids.len();
    Ok(summary)
}

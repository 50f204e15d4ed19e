use super::{EventChunk, RawTrackSet};
use crate::error::{Error, Result};
use crate::geometry::MIN_DEPTH;
use crate::trace::{GridSpec, ScreenTrace};

/// Expresses a chunk's tracks in the camera of `ref_frame` and re-seeds them
/// onto `grid`.
///
/// Each grid cell, in row-major order, takes the nearest still-unused track
/// (2D distance at the reference frame, ties to the lowest track index). The
/// assigned track is shifted by the constant offset that puts its reference
/// position exactly on the cell, so the reference frame of the result lies on
/// the uniform grid. Timesteps where a track is missing or falls behind the
/// reference camera hold the last valid position and are marked invalid.
pub fn align_to_reference(
    tracks: &RawTrackSet,
    chunk: &EventChunk,
    ref_frame: usize,
    grid: GridSpec,
) -> Result<ScreenTrace> {
    let t_count = tracks.num_frames();
    if chunk.end_frame > t_count || chunk.is_empty() {
        return Err(Error::InvalidChunk(format!(
            "chunk [{}, {}) does not fit a {t_count}-frame episode",
            chunk.start_frame, chunk.end_frame
        )));
    }
    if !chunk.contains(ref_frame) {
        return Err(Error::InvalidChunk(format!(
            "reference frame {ref_frame} outside chunk [{}, {})",
            chunk.start_frame, chunk.end_frame
        )));
    }
    let cam = tracks.camera(ref_frame);

    let mut candidates: Vec<(usize, [f64; 2])> = Vec::new();
    for k in 0..tracks.num_tracks() {
        if !tracks.is_valid(k, ref_frame) {
            continue;
        }
        let c = cam.world_to_camera(&tracks.point(k, ref_frame));
        if !(c.z > MIN_DEPTH) {
            return Err(Error::BehindCamera { track: k, depth: c.z });
        }
        let s = cam.project_camera_point(&c)?;
        candidates.push((k, [s.x, s.y]));
    }
    let cells = grid.positions();
    if candidates.len() < cells.len() {
        return Err(Error::InsufficientTracks {
            available: candidates.len(),
            required: cells.len(),
        });
    }

    let mut used = vec![false; candidates.len()];
    let mut assignment = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, p)) in candidates.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = (p[0] - cell[0]).powi(2) + (p[1] - cell[1]).powi(2);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("enough candidates checked above");
        used[i] = true;
        assignment.push(i);
    }

    let frames = chunk.trace_frames(t_count);
    let n_frames = frames.len();
    let mut points = Vec::with_capacity(cells.len() * n_frames * 3);
    let mut valid = Vec::with_capacity(cells.len() * n_frames);
    for (cell, &ci) in cells.iter().zip(&assignment) {
        let (track, ref_xy) = candidates[ci];
        let offset = [cell[0] - ref_xy[0], cell[1] - ref_xy[1]];
        let ref_z = cam.world_to_camera(&tracks.point(track, ref_frame)).z;
        let mut last = [cell[0], cell[1], ref_z];
        for t in frames.clone() {
            let projected = tracks
                .is_valid(track, t)
                .then(|| cam.project_world_to_screen(&tracks.point(track, t)).ok())
                .flatten();
            match projected {
                Some(s) => {
                    last = [s.x + offset[0], s.y + offset[1], s.z];
                    valid.push(true);
                }
                None => valid.push(false),
            }
            points.extend_from_slice(&last);
        }
    }
    ScreenTrace::new(grid, n_frames, points, Some(valid))
}

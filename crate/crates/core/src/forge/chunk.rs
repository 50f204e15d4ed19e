use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::RawTrackSet;
use crate::error::{Error, Result};

/// A maximal run of frames with non-negligible motion, `[start, end)`.
///
/// A frame's motion score measures the displacement *leaving* that frame, so
/// the positions covering a chunk's motion are frames `start..=end` (see
/// [`EventChunk::trace_frames`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventChunk {
    pub start_frame: usize,
    pub end_frame: usize,
    pub motion_score_per_frame: Vec<f64>,
}

impl EventChunk {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..self.end_frame).contains(&frame)
    }

    /// Frames whose positions span the chunk's motion: the chunk plus the
    /// frame the last movement lands on, clamped to the episode.
    pub fn trace_frames(&self, num_frames: usize) -> Range<usize> {
        self.start_frame..(self.end_frame + 1).min(num_frames)
    }
}

/// Mean 2D displacement (pixels) of visible points between each frame and the
/// next, measured in that frame's camera so camera motion does not count.
/// The last frame repeats the previous score.
pub fn motion_scores(tracks: &RawTrackSet) -> Vec<f64> {
    let t_count = tracks.num_frames();
    let mut scores = Vec::with_capacity(t_count);
    for t in 0..t_count - 1 {
        let cam = tracks.camera(t);
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..tracks.num_tracks() {
            if !(tracks.is_valid(k, t) && tracks.is_valid(k, t + 1)) {
                continue;
            }
            let (Ok(a), Ok(b)) = (
                cam.project_world_to_screen(&tracks.point(k, t)),
                cam.project_world_to_screen(&tracks.point(k, t + 1)),
            ) else {
                continue;
            };
            sum += (b.x - a.x).hypot(b.y - a.y);
            n += 1;
        }
        scores.push(if n > 0 { sum / n as f64 } else { 0.0 });
    }
    let last = *scores.last().unwrap_or(&0.0);
    scores.push(last);
    scores
}

/// Keeps frames scoring at least `threshold` and returns their maximal runs
/// of at least `min_len` frames, in temporal order.
pub fn chunks_from_scores(scores: &[f64], threshold: f64, min_len: usize) -> Result<Vec<EventChunk>> {
    if !scores.iter().any(|s| *s >= threshold) {
        return Err(Error::NoMotionFound);
    }
    let mut chunks = Vec::new();
    let mut t = 0;
    while t < scores.len() {
        if scores[t] < threshold {
            t += 1;
            continue;
        }
        let start = t;
        while t < scores.len() && scores[t] >= threshold {
            t += 1;
        }
        if t - start >= min_len.max(1) {
            chunks.push(EventChunk {
                start_frame: start,
                end_frame: t,
                motion_score_per_frame: scores[start..t].to_vec(),
            });
        }
    }
    Ok(chunks)
}

pub fn chunk_events(tracks: &RawTrackSet, motion_threshold: f64, min_chunk_len: usize) -> Result<Vec<EventChunk>> {
    chunks_from_scores(&motion_scores(tracks), motion_threshold, min_chunk_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, Intrinsics};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn camera() -> CameraModel {
        CameraModel::identity(Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()).unwrap()
    }

    /// Points on the z = 2 plane; `offset(t)` is added to every moving point.
    fn sequence(frames: usize, moving: impl Fn(usize) -> f64, jitter: f64) -> RawTrackSet {
        let k = 6;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        for i in 0..k {
            for t in 0..frames {
                let base = [0.1 * i as f64, -0.05 * i as f64, 2.0];
                let dx = if i < 3 { moving(t) } else { 0.0 };
                pts.extend([
                    base[0] + dx + rng.random_range(-jitter..=jitter),
                    base[1] + rng.random_range(-jitter..=jitter),
                    base[2],
                ]);
            }
        }
        RawTrackSet::new(k, frames, pts, vec![true; k * frames], vec![camera(); frames], 30.0).unwrap()
    }

    /// Position of the moving points: static for 10 frames, 20 moving steps,
    /// then static again.
    fn burst(t: usize) -> f64 {
        0.04 * (t.clamp(10, 30) - 10) as f64
    }

    #[test]
    fn single_burst_is_found() {
        let tracks = sequence(40, burst, 1e-5);
        let scores = motion_scores(&tracks);
        // Brute-force scan: moving frames are those whose outgoing step moves.
        let moving: Vec<usize> = (0..39).filter(|&t| burst(t + 1) != burst(t)).collect();
        assert_eq!(moving.first(), Some(&10));
        assert_eq!(moving.last(), Some(&29));
        // Static jitter is far below the 0.5 px threshold.
        assert!(scores[..10].iter().all(|s| *s < 0.05));
        let chunks = chunk_events(&tracks, 0.5, 8).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!((chunks[0].start_frame, chunks[0].end_frame), (10, 30));
        assert_eq!(chunks[0].trace_frames(40), 10..31);
        assert!(chunks[0].motion_score_per_frame.iter().all(|s| *s >= 0.5));
    }

    #[test]
    fn all_moving_is_one_full_chunk() {
        let tracks = sequence(16, |t| 0.03 * t as f64, 0.0);
        let chunks = chunk_events(&tracks, 0.5, 8).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!((chunks[0].start_frame, chunks[0].end_frame), (0, 16));
        assert_eq!(chunks[0].trace_frames(16), 0..16);
    }

    #[test]
    fn all_static_reports_no_motion() {
        let tracks = sequence(20, |_| 0.0, 1e-5);
        assert!(matches!(chunk_events(&tracks, 0.5, 8), Err(Error::NoMotionFound)));
    }

    #[test]
    fn short_runs_are_dropped() {
        let scores = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        let chunks = chunks_from_scores(&scores, 0.5, 3).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!((chunks[0].start_frame, chunks[0].end_frame), (4, 8));
        let none = chunks_from_scores(&scores, 0.5, 5).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn camera_motion_alone_is_not_motion() {
        // Static points, translating camera.
        let k = 4;
        let frames = 12;
        let pts: Vec<f64> = (0..k)
            .flat_map(|i| (0..frames).flat_map(move |_| [0.2 * i as f64, 0.0, 2.0]))
            .collect();
        let cams = (0..frames)
            .map(|t| {
                CameraModel::new(
                    *camera().intrinsics(),
                    nalgebra::Matrix3::identity(),
                    nalgebra::Vector3::new(0.05 * t as f64, 0.0, 0.0),
                )
                .unwrap()
            })
            .collect();
        let tracks = RawTrackSet::new(k, frames, pts, vec![true; k * frames], cams, 30.0).unwrap();
        assert!(motion_scores(&tracks).iter().all(|s| s.abs() < 1e-9));
    }

    proptest! {
        /// Linearly upsampling the positions by `m` divides every step by `m`;
        /// with the threshold scaled the same way chunk boundaries scale by `m`.
        #[test]
        fn boundaries_scale_with_upsampling(
            m in 1usize..5,
            start in 2usize..12,
            len in 8usize..20,
            speed in 0.025f64..0.08,
        ) {
            let frames = start + len + 6;
            let pos = move |t: f64| speed * (t.clamp(start as f64, (start + len) as f64) - start as f64);
            let base = sequence(frames, |t| pos(t as f64), 0.0);
            let up = sequence((frames - 1) * m + 1, |t| pos(t as f64 / m as f64), 0.0);
            let a = chunk_events(&base, 0.5, 4).unwrap();
            let b = chunk_events(&up, 0.5 / m as f64 - 1e-9, 4 * m).unwrap();
            prop_assert_eq!(a.len(), 1);
            prop_assert_eq!(b.len(), 1);
            prop_assert_eq!(b[0].start_frame, a[0].start_frame * m);
            prop_assert_eq!(b[0].end_frame, a[0].end_frame * m);
        }
    }
}

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instructions::{instructions_for, COLORS, OBJECTS};
use super::{CameraPath, Direction, MotionFamily, SceneSpec};
use crate::error::{Error, Result};
use crate::forge::{EpisodeInstructions, ForgeEpisode, RawTrackSet};
use crate::geometry::{CameraModel, Intrinsics, MIN_DEPTH};
use crate::sample::DepthMap;
use crate::trace::GridSpec;

/// Height of the object's tracked top surface above the table, meters.
pub const OBJECT_HEIGHT: f64 = 0.03;
const LIFT_HEIGHT: f64 = 0.04;
const ARC_BULGE: f64 = 0.3;
const SWEEP_WIGGLE: f64 = 0.15;
/// Keypoint depth is stamped into the depth map unless something at least
/// this much nearer covers it.
const OCCLUSION_MARGIN: f64 = 0.02;
const CHECKER_SIZE: f64 = 0.05;
const FPS: f64 = 10.0;

const EYE: [f64; 3] = [0.0, -0.55, 0.95];
const TARGET: [f64; 3] = [0.0, 0.05, 0.0];
const JITTER_FREQS: [f64; 3] = [0.031, 0.073, 0.137];

const STREAM_LAYOUT: u64 = 0;
const STREAM_DIRECTION: u64 = 1;
const STREAM_CAMERA: u64 = 2;

/// Closed-form facts about a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub family: MotionFamily,
    pub direction: Direction,
    pub color: String,
    pub object: String,
    /// First frame whose outgoing step moves the object.
    pub motion_start: usize,
    pub motion_frames: usize,
    /// Object center (top surface) before the motion, world meters.
    pub anchor_world: [f64; 3],
    /// Net displacement of every object point, world meters.
    pub displacement: [f64; 3],
    /// Length of the object center's path, meters.
    pub path_length_m: f64,
    /// Indices of the tracks attached to the object.
    pub moving_tracks: Vec<usize>,
    pub instructions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub episode: ForgeEpisode,
    pub truth: SceneTruth,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Object offset from its start at motion progress `s` in `[0, 1]`.
fn motion_offset(family: MotionFamily, s: f64, d: &Vector3<f64>) -> Vector3<f64> {
    let len = d.norm();
    let perp = if len > 0.0 {
        Vector3::z().cross(d) / len
    } else {
        Vector3::zeros()
    };
    let base = d * s;
    match family {
        MotionFamily::LinearTransport => base,
        MotionFamily::ArcTransport => base + perp * (ARC_BULGE * len * (PI * s).sin()),
        MotionFamily::PickPlace => {
            // Carried throughout; raised over the first third, held, and
            // lowered over the last third.
            let lift = (3.0 * s).min(3.0 * (1.0 - s)).clamp(0.0, 1.0);
            base + Vector3::z() * (LIFT_HEIGHT * lift)
        }
        MotionFamily::Sweep => base + perp * (SWEEP_WIGGLE * len * (3.0 * PI * s).sin()),
    }
}

fn progress(t: usize, start: usize, frames: usize) -> f64 {
    ((t as f64 - start as f64) / frames as f64).clamp(0.0, 1.0)
}

fn cameras(spec: &SceneSpec, intrinsics: Intrinsics) -> Result<Vec<CameraModel>> {
    let eye = Vector3::from(EYE);
    let target = Vector3::from(TARGET);
    let n = spec.episode_len;
    let mut rng = stream(spec.seed, STREAM_CAMERA);
    let phases: Vec<f64> = (0..18).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    (0..n)
        .map(|t| {
            let (e, g) = match spec.camera_path {
                CameraPath::Static => (eye, target),
                CameraPath::Orbit { amplitude_deg } => {
                    let theta = amplitude_deg.to_radians() * t as f64 / (n - 1) as f64;
                    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
                    (target + rot * (eye - target), target)
                }
                CameraPath::HandheldJitter { amplitude_m } => {
                    let wave = |axis: usize| -> f64 {
                        JITTER_FREQS
                            .iter()
                            .enumerate()
                            .map(|(i, f)| (2.0 * PI * f * t as f64 + phases[axis * 3 + i]).sin())
                            .sum::<f64>()
                            / 3.0
                    };
                    let de = Vector3::new(wave(0), wave(1), wave(2)) * amplitude_m;
                    let dg = Vector3::new(wave(3), wave(4), wave(5)) * amplitude_m;
                    (eye + de, target + dg)
                }
            };
            CameraModel::look_at(intrinsics, Point3::from(e), Point3::from(g), Vector3::z())
        })
        .collect()
}

/// Intersection of the ray through pixel `(x, y)` with the plane `z = h`,
/// with the ray parameter equal to the camera-frame depth.
fn ray_plane(cam: &CameraModel, x: f64, y: f64, h: f64) -> Option<(Vector3<f64>, f64)> {
    let k = cam.intrinsics();
    let dir_c = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
    let dir_w = cam.rotation().transpose() * dir_c;
    let o = cam.center();
    if dir_w.z >= -1e-12 {
        return None;
    }
    let depth = (h - o.z) / dir_w.z;
    (depth > MIN_DEPTH).then(|| (o + dir_w * depth, depth))
}

fn checker(p: &Vector3<f64>) -> [u8; 3] {
    let i = (p.x / CHECKER_SIZE).floor() as i64 + (p.y / CHECKER_SIZE).floor() as i64;
    if i.rem_euclid(2) == 0 {
        [150, 145, 135]
    } else {
        [105, 100, 95]
    }
}

struct Render {
    image: RgbImage,
    depth: DepthMap,
}

fn render(
    cam: &CameraModel,
    w: usize,
    h: usize,
    points: &[Vector3<f64>],
    visible: &[bool],
    moving: &[bool],
    color: [u8; 3],
    disc_radius: f64,
) -> Render {
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut depth = vec![0.0f64; w * h];
    for v in 0..h {
        for u in 0..w {
            let (c, d) = match ray_plane(cam, u as f64, v as f64, 0.0) {
                Some((p, d)) => (checker(&p), d),
                None => ([60, 60, 70], 0.0),
            };
            image.put_pixel(u as u32, v as u32, Rgb(c));
            depth[v * w + u] = d;
        }
    }
    let projected: Vec<Option<[f64; 3]>> = points
        .iter()
        .zip(visible)
        .map(|(p, &vis)| {
            if vis {
                cam.project_world_to_screen(p).ok().map(|s| s.as_array())
            } else {
                None
            }
        })
        .collect();
    let r = disc_radius;
    for (s, _) in projected.iter().zip(moving).filter(|(_, m)| **m) {
        let Some([x, y, z]) = *s else { continue };
        let (u0, u1) = ((x - r).ceil().max(0.0) as usize, (x + r).floor().min(w as f64 - 1.0));
        let (v0, v1) = ((y - r).ceil().max(0.0) as usize, (y + r).floor().min(h as f64 - 1.0));
        if u1 < 0.0 || v1 < 0.0 {
            continue;
        }
        for v in v0..=v1 as usize {
            for u in u0..=u1 as usize {
                if (u as f64 - x).powi(2) + (v as f64 - y).powi(2) > r * r {
                    continue;
                }
                let cur = depth[v * w + u];
                if cur <= 0.0 || z < cur {
                    depth[v * w + u] = z;
                    image.put_pixel(u as u32, v as u32, Rgb(color));
                }
            }
        }
    }
    for [x, y, z] in projected.iter().flatten().copied() {
        let (u, v) = ((x + 0.5).floor(), (y + 0.5).floor());
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let i = v as usize * w + u as usize;
        if depth[i] <= 0.0 || depth[i] >= z - OCCLUSION_MARGIN {
            depth[i] = z;
        }
    }
    let depth = DepthMap::new(w, h, depth.into_iter().map(|d| d as f32).collect()).expect("sized above");
    Render { image, depth }
}

/// Renders a complete episode: world tracks, cameras, frames, depth maps and
/// instructions. Identical specs give identical scenes.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.image_width, spec.image_height);
    let f = 1.1 * w as f64;
    let intrinsics = Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?;
    let cams = cameras(spec, intrinsics)?;
    let t_count = spec.episode_len;

    let mut layout = stream(spec.seed, STREAM_LAYOUT);
    let direction = match spec.direction {
        Some(d) => d,
        None => Direction::ALL[stream(spec.seed, STREAM_DIRECTION).random_range(0..4)],
    };
    let d = Vector3::from(direction.unit()) * spec.distance;
    let ws = &spec.workspace;
    const MARGIN: f64 = 0.05;
    let mut center = [0.0; 2];
    for (i, c) in center.iter_mut().enumerate() {
        let lo = ws.min[i].max(ws.min[i] - d[i]) + MARGIN;
        let hi = ws.max[i].min(ws.max[i] - d[i]) - MARGIN;
        *c = if lo < hi {
            layout.random_range(lo..hi)
        } else {
            0.5 * (ws.min[i] + ws.max[i]) - 0.5 * d[i]
        };
    }
    let (color, rgb) = COLORS[layout.random_range(0..COLORS.len())];
    let object = OBJECTS[layout.random_range(0..OBJECTS.len())];
    let motion_frames = spec.motion_frames.min(t_count - 1);
    let latest = t_count - 1 - motion_frames;
    let motion_start = layout.random_range(latest.min(2)..=latest);

    // Track starts: first-frame grid rays hitting the table; the nearest ones
    // to the object center hit the object's top surface instead.
    let grid = GridSpec::new(spec.track_rows, spec.track_cols, w, h)?;
    let cells = grid.positions();
    let mut table = Vec::with_capacity(cells.len());
    for [x, y] in &cells {
        let (p, _) = ray_plane(&cams[0], *x, *y, 0.0)
            .ok_or_else(|| Error::Config("first camera sees above the horizon".into()))?;
        table.push(p);
    }
    let n_move = (spec.moving_fraction * cells.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..cells.len()).collect();
    let dist = |i: usize| (table[i].x - center[0]).hypot(table[i].y - center[1]);
    order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    let mut moving = vec![false; cells.len()];
    for &i in &order[..n_move] {
        moving[i] = true;
    }
    let starts: Vec<Vector3<f64>> = cells
        .iter()
        .zip(&table)
        .zip(&moving)
        .map(|(([x, y], p), &m)| {
            if m {
                ray_plane(&cams[0], *x, *y, OBJECT_HEIGHT).map(|(q, _)| q).unwrap_or(*p)
            } else {
                *p
            }
        })
        .collect();

    let k_count = cells.len();
    let mut points = vec![0.0; k_count * t_count * 3];
    let mut valid = vec![false; k_count * t_count];
    let mut images = Vec::with_capacity(t_count);
    let mut depths = Vec::with_capacity(t_count);
    let disc_radius = (0.6 * (w as f64 / spec.track_cols as f64).min(h as f64 / spec.track_rows as f64)).max(1.0);
    for (t, cam) in cams.iter().enumerate() {
        let off = motion_offset(spec.motion_family, progress(t, motion_start, motion_frames), &d);
        let frame_points: Vec<Vector3<f64>> = starts
            .iter()
            .zip(&moving)
            .map(|(p, &m)| if m { p + off } else { *p })
            .collect();
        let mut visible = vec![false; k_count];
        for (k, p) in frame_points.iter().enumerate() {
            let i = (k * t_count + t) * 3;
            points[i..i + 3].copy_from_slice(p.as_slice());
            visible[k] = cam.project_world_to_screen(p).is_ok_and(|s| {
                s.x >= -0.5 && s.y >= -0.5 && s.x < w as f64 - 0.5 && s.y < h as f64 - 0.5
            });
            valid[k * t_count + t] = visible[k];
        }
        let r = render(cam, w, h, &frame_points, &visible, &moving, rgb, disc_radius);
        images.push(r.image);
        depths.push(r.depth);
    }

    let path_length_m = {
        let n = 4096;
        (0..n)
            .map(|i| {
                let a = motion_offset(spec.motion_family, i as f64 / n as f64, &d);
                let b = motion_offset(spec.motion_family, (i + 1) as f64 / n as f64, &d);
                (b - a).norm()
            })
            .sum()
    };
    let instructions = instructions_for(
        spec.motion_family,
        color,
        object,
        direction,
        spec.instruction_template.as_deref(),
    );
    let tracks = RawTrackSet::new(k_count, t_count, points, valid, cams, FPS)?;
    Ok(Scene {
        episode: ForgeEpisode {
            id: format!("scene_{:016x}", spec.seed),
            tracks,
            images,
            depths,
            sensor_depths: None,
            instructions: EpisodeInstructions {
                instructions: instructions.clone(),
                per_chunk: None,
            },
        },
        truth: SceneTruth {
            family: spec.motion_family,
            direction,
            color: color.into(),
            object: object.into(),
            motion_start,
            motion_frames,
            anchor_world: [center[0], center[1], OBJECT_HEIGHT],
            displacement: [d.x, d.y, d.z],
            path_length_m,
            moving_tracks: (0..k_count).filter(|&k| moving[k]).collect(),
            instructions,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::chunk_events;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            image_width: 64,
            image_height: 64,
            track_rows: 10,
            track_cols: 10,
            episode_len: 24,
            motion_frames: 8,
            ..Default::default()
        }
    }

    #[test]
    fn no_moving_fraction_means_constant_tracks() {
        let s = gen_scene(&SceneSpec {
            moving_fraction: 0.0,
            ..small(1)
        })
        .unwrap();
        let tr = &s.episode.tracks;
        for k in 0..tr.num_tracks() {
            for t in 0..tr.num_frames() {
                assert_eq!(tr.point(k, t), tr.point(k, 0));
            }
        }
        assert!(s.truth.moving_tracks.is_empty());
    }

    #[test]
    fn moving_tracks_end_at_start_plus_displacement() {
        for family in MotionFamily::ALL {
            let s = gen_scene(&SceneSpec {
                motion_family: family,
                direction: Some(Direction::Right),
                ..small(7)
            })
            .unwrap();
            let tr = &s.episode.tracks;
            let last = tr.num_frames() - 1;
            assert_eq!(s.truth.displacement, [0.3, 0.0, 0.0]);
            assert_eq!(s.truth.moving_tracks.len(), 30);
            for &k in &s.truth.moving_tracks {
                let moved = tr.point(k, last) - tr.point(k, 0);
                assert!((moved - Vector3::new(0.3, 0.0, 0.0)).norm() < 1e-12, "{family}");
            }
            if family == MotionFamily::LinearTransport {
                assert!((s.truth.path_length_m - 0.3).abs() < 1e-9);
            } else {
                assert!(s.truth.path_length_m > 0.3);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec {
            camera_path: CameraPath::HandheldJitter { amplitude_m: 0.01 },
            ..small(99)
        };
        assert_eq!(gen_scene(&spec).unwrap(), gen_scene(&spec).unwrap());
        assert_ne!(gen_scene(&small(100)).unwrap().episode.images, gen_scene(&small(99)).unwrap().episode.images);
    }

    #[test]
    fn rendered_keypoints_match_projection_and_depth() {
        let s = gen_scene(&small(3)).unwrap();
        let ep = &s.episode;
        let t = 0;
        let cam = ep.tracks.camera(t);
        for k in 0..ep.tracks.num_tracks() {
            if !ep.tracks.is_valid(k, t) {
                continue;
            }
            let p = cam.project_world_to_screen(&ep.tracks.point(k, t)).unwrap();
            let (u, v) = ep.depths[t].pixel_at(p.x, p.y).unwrap();
            let d = ep.depths[t].get(u, v) as f64;
            if d < p.z - OCCLUSION_MARGIN {
                // Covered by the object.
                assert!(!s.truth.moving_tracks.contains(&k));
                continue;
            }
            assert!((d - p.z).abs() < 1e-3);
            // Round-half-up lookup is within half a pixel per axis.
            assert!((u as f64 - p.x).abs() <= 0.5 && (v as f64 - p.y).abs() <= 0.5);
        }
        // Object color sits at the moving keypoints' pixels.
        let rgb = COLORS.iter().find(|c| c.0 == s.truth.color).unwrap().1;
        for &k in &s.truth.moving_tracks {
            let p = cam.project_world_to_screen(&ep.tracks.point(k, t)).unwrap();
            let (u, v) = ep.depths[t].pixel_at(p.x, p.y).unwrap();
            assert_eq!(ep.images[t].get_pixel(u as u32, v as u32).0, rgb);
        }
    }

    fn assert_single_chunk(base: SceneSpec, threshold: f64) {
        for family in MotionFamily::ALL {
            for dir in Direction::ALL {
                let s = gen_scene(&SceneSpec {
                    motion_family: family,
                    direction: Some(dir),
                    ..base.clone()
                })
                .unwrap();
                let scores = crate::forge::motion_scores(&s.episode.tracks);
                let chunks = chunk_events(&s.episode.tracks, threshold, 8).unwrap();
                assert_eq!(chunks.len(), 1, "{family} {dir:?} {scores:?}");
                assert_eq!(chunks[0].start_frame, s.truth.motion_start, "{family} {dir:?}");
                assert_eq!(chunks[0].end_frame, s.truth.motion_start + s.truth.motion_frames, "{family} {dir:?} {scores:?}");
            }
        }
    }

    #[test]
    fn motion_is_detected_as_one_chunk() {
        assert_single_chunk(SceneSpec { seed: 11, ..Default::default() }, 0.5);
        // Half the resolution halves pixel motion.
        assert_single_chunk(small(11), 0.25);
    }

    #[test]
    fn moving_cameras_are_valid_poses() {
        for path in ["orbit", "handheld-jitter"] {
            let s = gen_scene(&SceneSpec {
                camera_path: CameraPath::from_name(path).unwrap(),
                ..small(5)
            })
            .unwrap();
            let c = s.episode.tracks.cameras();
            assert_ne!(c[0], c[c.len() - 1]);
        }
    }
}

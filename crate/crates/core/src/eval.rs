//! Trace metrics in camera-frame meters and benchmark evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::read_forge_episode;
use crate::geometry::CameraModel;
use crate::io::{read_trace, write_json, write_trace};
use crate::model::Model;
use crate::sample::DepthMap;
use crate::synth::{read_manifest, EpisodeTruth, Manifest, GT_TRACE_FILE};
use crate::trace::ScreenTrace;

pub const REPORT_FILE: &str = "report.json";
pub const PATHS_CSV: &str = "paths.csv";
pub const PRED_TRACE_FILE: &str = "trace_pred.f32";
pub const EPISODES_DIR: &str = "episodes";

fn check_aligned(a: &ScreenTrace, b: &ScreenTrace) -> Result<()> {
    if a.num_keypoints() == 0 || a.frames() == 0 {
        return Err(Error::EmptyTrace);
    }
    if a.num_keypoints() != b.num_keypoints() || a.frames() != b.frames() {
        return Err(Error::ShapeMismatch(format!(
            "traces are {}x{} and {}x{} (keypoints x frames)",
            a.num_keypoints(),
            a.frames(),
            b.num_keypoints(),
            b.frames()
        )));
    }
    Ok(())
}

fn to_camera(cam: &CameraModel, p: [f64; 3]) -> Result<Vector3<f64>> {
    cam.unproject_screen_to_camera(p[0], p[1], p[2])
}

/// Index of the keypoint whose first-frame image position is nearest
/// `anchor`; ties go to the lowest index.
pub fn anchor_keypoint(trace: &ScreenTrace, anchor: [f64; 2]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, p) in trace.first_frame().iter().enumerate() {
        let d = (p[0] - anchor[0]).powi(2) + (p[1] - anchor[1]).powi(2);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((k, d));
        }
    }
    best.map(|b| b.0).ok_or(Error::EmptyTrace)
}

/// Per-axis absolute difference, in camera meters, between the final
/// positions of the keypoint nearest `anchor` in the predicted first frame.
pub fn endpoint_error(
    predicted: &ScreenTrace,
    reference: &ScreenTrace,
    anchor: [f64; 2],
    camera: &CameraModel,
) -> Result<[f64; 3]> {
    check_aligned(predicted, reference)?;
    let k = anchor_keypoint(predicted, anchor)?;
    let a = to_camera(camera, predicted.last_frame()[k])?;
    let b = to_camera(camera, reference.last_frame()[k])?;
    Ok([(a.x - b.x).abs(), (a.y - b.y).abs(), (a.z - b.z).abs()])
}

/// `(ade, fde)`: mean 3D camera-frame distance over keypoints and frames
/// after the first, and over keypoints at the last frame. Entries whose
/// depth is invalid in either trace are skipped.
pub fn displacement_errors(predicted: &ScreenTrace, reference: &ScreenTrace, camera: &CameraModel) -> Result<(f64, f64)> {
    check_aligned(predicted, reference)?;
    let last = predicted.frames() - 1;
    let (mut sum, mut n, mut fsum, mut fn_) = (0.0, 0usize, 0.0, 0usize);
    for k in 0..predicted.num_keypoints() {
        for t in last.min(1)..=last {
            if !(predicted.is_valid(k, t) && reference.is_valid(k, t)) {
                continue;
            }
            let d = (to_camera(camera, predicted.point(k, t))? - to_camera(camera, reference.point(k, t))?).norm();
            sum += d;
            n += 1;
            if t == last {
                fsum += d;
                fn_ += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    Ok((mean(sum, n), mean(fsum, fn_)))
}

/// Arc length of keypoint `k` in camera meters.
pub fn path_length(trace: &ScreenTrace, k: usize, camera: &CameraModel) -> Result<f64> {
    let pts = trace.path(k).map(|p| to_camera(camera, p)).collect::<Result<Vec<_>>>()?;
    Ok(pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum())
}

/// Mean 3D distance between final positions over `keypoints`.
pub fn mean_endpoint_distance(
    predicted: &ScreenTrace,
    reference: &ScreenTrace,
    keypoints: &[usize],
    camera: &CameraModel,
) -> Result<f64> {
    check_aligned(predicted, reference)?;
    if keypoints.is_empty() {
        return Ok(0.0);
    }
    let (pl, rl) = (predicted.last_frame(), reference.last_frame());
    let mut s = 0.0;
    for &k in keypoints {
        s += (to_camera(camera, pl[k])? - to_camera(camera, rl[k])?).norm();
    }
    Ok(s / keypoints.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub id: String,
    pub endpoint_error: [f64; 3],
    pub ade: f64,
    pub fde: f64,
    /// Absent when the reference path has zero length.
    pub path_length_rel_error: Option<f64>,
    /// Mean final-position distance over the moving keypoints, or over the
    /// anchor keypoint when none move.
    pub moving_endpoint_error: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub predictor: String,
    pub per_axis_endpoint_error: AxisStats,
    pub ade: f64,
    pub fde: f64,
    pub path_length_rel_error: f64,
    pub moving_endpoint_error: f64,
    /// Fraction of evaluated episodes whose moving endpoint error is below
    /// `success_radius_m`.
    pub success_rate: f64,
    pub success_radius_m: f64,
    pub n_episodes: usize,
    pub episodes: Vec<EpisodeMetrics>,
    pub failures: Vec<EpisodeFailure>,
}

impl MetricReport {
    /// Aggregates per-episode metrics; errors when none succeeded.
    pub fn aggregate(
        predictor: &str,
        episodes: Vec<EpisodeMetrics>,
        failures: Vec<EpisodeFailure>,
        success_radius_m: f64,
    ) -> Result<Self> {
        let n = episodes.len();
        if n == 0 {
            return Err(Error::Config(format!("no episode could be evaluated ({} failed)", failures.len())));
        }
        let nf = n as f64;
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / nf;
        let axis_mean: [f64; 3] = std::array::from_fn(|c| mean(&|e| e.endpoint_error[c]));
        let axis_std: [f64; 3] = std::array::from_fn(|c| (mean(&|e| (e.endpoint_error[c] - axis_mean[c]).powi(2))).sqrt());
        let pl: Vec<f64> = episodes.iter().filter_map(|e| e.path_length_rel_error).collect();
        Ok(Self {
            predictor: predictor.into(),
            per_axis_endpoint_error: AxisStats {
                mean: axis_mean,
                std: axis_std,
            },
            ade: mean(&|e| e.ade),
            fde: mean(&|e| e.fde),
            path_length_rel_error: if pl.is_empty() { 0.0 } else { pl.iter().sum::<f64>() / pl.len() as f64 },
            moving_endpoint_error: mean(&|e| e.moving_endpoint_error),
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / nf,
            success_radius_m,
            n_episodes: n,
            episodes,
            failures,
        })
    }
}

/// Everything a predictor may look at for one benchmark episode.
pub struct EpisodeInput<'a> {
    pub index: usize,
    pub truth: &'a EpisodeTruth,
    pub image: &'a RgbImage,
    pub depth: &'a DepthMap,
    pub camera: &'a CameraModel,
    pub reference: &'a ScreenTrace,
}

pub trait TracePredictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, episode: &EpisodeInput) -> Result<ScreenTrace>;
}

/// Returns the reference trace; a sanity baseline whose metrics are zero.
pub struct GroundTruthPredictor;

impl TracePredictor for GroundTruthPredictor {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn predict(&self, episode: &EpisodeInput) -> Result<ScreenTrace> {
        Ok(episode.reference.clone())
    }
}

/// Samples from a trained model with the episode's first instruction. The
/// noise of episode `i` comes from stream `i` of a generator seeded with
/// `seed`, so results do not depend on evaluation order.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl TracePredictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        format!("model(steps={}, guidance={})", self.steps, self.guidance)
    }

    fn predict(&self, ep: &EpisodeInput) -> Result<ScreenTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ep.index as u64);
        let instruction = ep.truth.instructions.first().map_or("", String::as_str);
        self.model.predict_trace(ep.image, ep.depth, instruction, self.steps, self.guidance, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Success radius as a fraction of the workspace diameter.
    pub success_fraction: f64,
    /// Write per-episode predictions and the path CSV next to the report.
    pub exports: bool,
    /// Evaluate only the first `limit` episodes.
    pub limit: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            success_fraction: 0.1,
            exports: true,
            limit: None,
        }
    }
}

fn episode_metrics(
    truth: &EpisodeTruth,
    pred: &ScreenTrace,
    reference: &ScreenTrace,
    camera: &CameraModel,
    radius: f64,
) -> Result<EpisodeMetrics> {
    let endpoint = endpoint_error(pred, reference, truth.anchor_px, camera)?;
    let (ade, fde) = displacement_errors(pred, reference, camera)?;
    let k = anchor_keypoint(pred, truth.anchor_px)?;
    let lr = path_length(reference, k, camera)?;
    let lp = path_length(pred, k, camera)?;
    let path_length_rel_error = (lr > 1e-12).then(|| (lp - lr).abs() / lr);
    let moving = if truth.moving_keypoints.is_empty() {
        vec![k]
    } else {
        truth.moving_keypoints.clone()
    };
    let moving_endpoint_error = mean_endpoint_distance(pred, reference, &moving, camera)?;
    Ok(EpisodeMetrics {
        id: truth.id.clone(),
        endpoint_error: endpoint,
        ade,
        fde,
        path_length_rel_error,
        moving_endpoint_error,
        success: moving_endpoint_error < radius,
    })
}

fn run_episode(
    predictor: &dyn TracePredictor,
    bench: &Path,
    manifest: &Manifest,
    index: usize,
    radius: f64,
) -> Result<(ScreenTrace, ScreenTrace, EpisodeMetrics)> {
    let truth = &manifest.episodes[index];
    let dir = bench.join(&truth.id);
    let ep = read_forge_episode(&dir)?;
    let r = truth.ref_frame;
    if r >= ep.images.len() {
        return Err(Error::format(&dir, format!("reference frame {r} outside the episode")));
    }
    let reference = read_trace(&dir.join(GT_TRACE_FILE), manifest.grid()?, None)?;
    let depth = ep.sensor_depths.as_ref().map_or(&ep.depths[r], |s| &s[r]);
    let camera = ep.tracks.camera(r);
    let input = EpisodeInput {
        index,
        truth,
        image: &ep.images[r],
        depth,
        camera,
        reference: &reference,
    };
    let pred = predictor.predict(&input)?;
    let m = episode_metrics(truth, &pred, &reference, camera, radius)?;
    Ok((pred, reference, m))
}

fn csv_rows(out: &mut String, id: &str, trace: &ScreenTrace, flag: &str) {
    for k in 0..trace.num_keypoints() {
        for t in 0..trace.frames() {
            let p = trace.point(k, t);
            let _ = writeln!(out, "{id},{k},{t},{},{},{},{flag}", p[0], p[1], p[2]);
        }
    }
}

/// Runs `predictor` over every episode of the benchmark in `bench` and
/// writes the report to `report_path`. With exports enabled, predictions go
/// to `episodes/<id>/trace_pred.f32` and all paths to `paths.csv`, both
/// beside the report. Episodes that fail are listed in the report.
pub fn evaluate_suite(
    predictor: &dyn TracePredictor,
    bench: &Path,
    report_path: &Path,
    options: &EvalOptions,
) -> Result<MetricReport> {
    let manifest = read_manifest(bench)?;
    let radius = options.success_fraction * manifest.workspace_diameter;
    let n = options.limit.map_or(manifest.episodes.len(), |l| l.min(manifest.episodes.len()));
    let results: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            run_episode(predictor, bench, &manifest, i, radius)
        })
        .collect();
    let out_dir: PathBuf = report_path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
    if !out_dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    }
    let mut episodes = Vec::new();
    let mut failures = Vec::new();
    let mut csv = String::from("episode_id,keypoint,t,x_px,y_px,z_m,source\n");
    for (i, r) in results.into_iter().enumerate() {
        let id = &manifest.episodes[i].id;
        match r {
            Ok((pred, reference, m)) => {
                if options.exports {
                    let d = out_dir.join(EPISODES_DIR).join(id);
                    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                    write_trace(&d.join(PRED_TRACE_FILE), &pred)?;
                    csv_rows(&mut csv, id, &pred, "pred");
                    csv_rows(&mut csv, id, &reference, "ref");
                }
                episodes.push(m);
            }
            Err(e) => {
                tracing::warn!(episode = %id, error = %e, "episode evaluation failed");
                failures.push(EpisodeFailure {
                    id: id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let report = MetricReport::aggregate(&predictor.name(), episodes, failures, radius)?;
    if options.exports {
        let p = out_dir.join(PATHS_CSV);
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    write_json(report_path, &report)?;
    Ok(report)
}

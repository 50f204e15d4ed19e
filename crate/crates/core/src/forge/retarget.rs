use crate::error::{Error, Result};
use crate::trace::ScreenTrace;

/// Paths shorter than this are treated as stationary.
const DEGENERATE_LENGTH: f64 = 1e-12;

/// Pixels per meter that make depth commensurate with screen motion: `fx`
/// divided by the median valid first-frame depth. Falls back to `fx` when no
/// depth is valid.
pub fn default_z_scale(trace: &ScreenTrace, fx: f64) -> f64 {
    let mut z: Vec<f64> = (0..trace.num_keypoints())
        .filter(|&k| trace.is_valid(k, 0))
        .map(|k| trace.point(k, 0)[2])
        .filter(|z| *z > 0.0)
        .collect();
    if z.is_empty() {
        return fx;
    }
    z.sort_by(f64::total_cmp);
    let n = z.len();
    let median = if n % 2 == 1 {
        z[n / 2]
    } else {
        0.5 * (z[n / 2 - 1] + z[n / 2])
    };
    fx / median
}

/// Resamples every keypoint path to `target_len + 1` frames at uniform
/// fractions of its cumulative arc length.
///
/// Arc length is measured in `(x, y, z * z_scale)`. Positions are linearly
/// interpolated between the bracketing input frames; both endpoints are
/// copied exactly. A resampled frame is depth-valid when its bracketing input
/// frames are.
pub fn retarget_speed(trace: &ScreenTrace, target_len: usize, z_scale: f64) -> Result<ScreenTrace> {
    let n = trace.frames();
    if n < 2 {
        return Err(Error::HorizonMismatch { frames: n });
    }
    if target_len == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    if !(z_scale.is_finite() && z_scale >= 0.0) {
        return Err(Error::Config(format!("invalid depth scale {z_scale}")));
    }
    let k_count = trace.num_keypoints();
    let out_frames = target_len + 1;
    let mut points = Vec::with_capacity(k_count * out_frames * 3);
    let mut valid = Vec::with_capacity(k_count * out_frames);
    let mut cum = vec![0.0; n];
    for k in 0..k_count {
        let path: Vec<[f64; 3]> = trace.path(k).collect();
        for t in 1..n {
            let (a, b) = (path[t - 1], path[t]);
            let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + ((b[2] - a[2]) * z_scale).powi(2)).sqrt();
            cum[t] = cum[t - 1] + d;
        }
        let total = cum[n - 1];
        if total < DEGENERATE_LENGTH {
            for _ in 0..out_frames {
                points.extend_from_slice(&path[0]);
                valid.push(trace.is_valid(k, 0));
            }
            continue;
        }
        let mut j = 0;
        for i in 0..out_frames {
            if i == 0 {
                points.extend_from_slice(&path[0]);
                valid.push(trace.is_valid(k, 0));
                continue;
            }
            if i == target_len {
                points.extend_from_slice(&path[n - 1]);
                valid.push(trace.is_valid(k, n - 1));
                continue;
            }
            let u = total * i as f64 / target_len as f64;
            // Smallest segment whose far end reaches u.
            while j < n - 2 && cum[j + 1] < u {
                j += 1;
            }
            let seg = cum[j + 1] - cum[j];
            let alpha = if seg > 0.0 { ((u - cum[j]) / seg).clamp(0.0, 1.0) } else { 0.0 };
            let (a, b) = (path[j], path[j + 1]);
            points.extend((0..3).map(|c| a[c] + alpha * (b[c] - a[c])));
            valid.push(trace.is_valid(k, j) && trace.is_valid(k, j + 1));
        }
    }
    ScreenTrace::new(*trace.grid(), out_frames, points, Some(valid))
}

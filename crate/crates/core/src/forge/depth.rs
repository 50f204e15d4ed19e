use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{is_valid_depth, DepthMap};
use crate::trace::ScreenTrace;

/// Smoothed per-pixel `sensor / predicted` depth ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRescaleMap {
    width: usize,
    height: usize,
    /// Row-major; exactly `1.0` where either depth was missing.
    ratio: Vec<f64>,
    blur_sigma: f64,
}

impl DepthRescaleMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn blur_sigma(&self) -> f64 {
        self.blur_sigma
    }

    pub fn ratio(&self) -> &[f64] {
        &self.ratio
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.ratio[y * self.width + x]
    }

    /// Ratio at the nearest pixel (round-half-up), `None` outside the map.
    pub fn lookup(&self, x: f64, y: f64) -> Option<f64> {
        let ix = (x + 0.5).floor();
        let iy = (y + 0.5).floor();
        (ix >= 0.0 && iy >= 0.0 && (ix as usize) < self.width && (iy as usize) < self.height)
            .then(|| self.at(ix as usize, iy as usize))
    }

    /// Multiplies every valid pixel of `depth` by the ratio.
    pub fn apply_to_depth(&self, depth: &DepthMap) -> Result<DepthMap> {
        if depth.width() != self.width || depth.height() != self.height {
            return Err(Error::ShapeMismatch("depth map and rescale map differ in size".into()));
        }
        let data = depth
            .data()
            .iter()
            .zip(&self.ratio)
            .map(|(&d, &r)| if is_valid_depth(d) { (d as f64 * r) as f32 } else { d })
            .collect();
        DepthMap::new(self.width, self.height, data)
    }
}

/// Gaussian taps for offsets `-r..=r`, where `r` is the largest integer not
/// exceeding `3 sigma`. `sigma = 0` is the identity kernel.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).floor() as i64;
    (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect()
}

/// Separable 1D pass along rows (`horizontal`) or columns.
fn convolve(src: &[f64], w: usize, h: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, tap) in taps.iter().enumerate() {
                let d = i as i64 - r;
                let (sx, sy) = if horizontal { (x as i64 + d, y as i64) } else { (x as i64, y as i64 + d) };
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                acc += tap * src[sy as usize * w + sx as usize];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Ratio of sensor to predicted depth, smoothed by a truncated Gaussian.
///
/// Smoothing is a normalized convolution over pixels where both depths are
/// valid, so borders and holes do not bias the result. Pixels where either
/// depth is missing keep ratio `1.0`.
pub fn rescale_depth(predicted: &DepthMap, sensor: &DepthMap, blur_sigma: f64) -> Result<DepthRescaleMap> {
    if !predicted.same_shape(sensor) {
        return Err(Error::ShapeMismatch(format!(
            "predicted depth is {}x{}, sensor depth is {}x{}",
            predicted.width(),
            predicted.height(),
            sensor.width(),
            sensor.height()
        )));
    }
    if !(blur_sigma.is_finite() && blur_sigma >= 0.0) {
        return Err(Error::Config(format!("invalid blur sigma {blur_sigma}")));
    }
    let (w, h) = (predicted.width(), predicted.height());
    let mut mask = vec![0.0; w * h];
    let mut weighted = vec![0.0; w * h];
    for (i, (&p, &s)) in predicted.data().iter().zip(sensor.data()).enumerate() {
        if is_valid_depth(p) && is_valid_depth(s) {
            mask[i] = 1.0;
            weighted[i] = s as f64 / p as f64;
        }
    }
    if !mask.iter().any(|m| *m > 0.0) {
        return Err(Error::NoValidOverlap);
    }
    let taps = gaussian_taps(blur_sigma);
    let num = convolve(&convolve(&weighted, w, h, &taps, true), w, h, &taps, false);
    let den = convolve(&convolve(&mask, w, h, &taps, true), w, h, &taps, false);
    let ratio = (0..w * h)
        .map(|i| if mask[i] > 0.0 { num[i] / den[i] } else { 1.0 })
        .collect();
    Ok(DepthRescaleMap {
        width: w,
        height: h,
        ratio,
        blur_sigma,
    })
}

/// A depth-corrected trace plus the `(keypoint, frame)` entries whose screen
/// position fell outside the map and kept their original depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledTrace {
    pub trace: ScreenTrace,
    pub out_of_bounds: Vec<(usize, usize)>,
}

pub fn apply_depth_rescale(trace: &ScreenTrace, map: &DepthRescaleMap) -> Result<RescaledTrace> {
    let mut out = trace.clone();
    let mut out_of_bounds = Vec::new();
    for k in 0..trace.num_keypoints() {
        for t in 0..trace.frames() {
            let p = trace.point(k, t);
            match map.lookup(p[0], p[1]) {
                Some(r) => out.set_point(k, t, [p[0], p[1], p[2] * r]),
                None => out_of_bounds.push((k, t)),
            }
        }
    }
    Ok(RescaledTrace {
        trace: out,
        out_of_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::GridSpec;

    fn map_from(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> DepthMap {
        DepthMap::new(w, h, (0..w * h).map(|i| f(i % w, i / w)).collect()).unwrap()
    }

    #[test]
    fn constant_ratio_is_recovered() {
        let sensor = map_from(40, 30, |x, y| 1.0 + 0.01 * (x + 2 * y) as f32);
        let predicted = map_from(40, 30, |x, y| 2.0 * sensor.get(x, y));
        let m = rescale_depth(&predicted, &sensor, 7.0).unwrap();
        assert!(m.ratio().iter().all(|r| (r - 0.5).abs() < 1e-6));
        let same = rescale_depth(&sensor, &sensor, 7.0).unwrap();
        assert!(same.ratio().iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    /// Direct 2D normalized convolution, one output pixel at a time.
    fn dense_oracle(pred: &DepthMap, sensor: &DepthMap, sigma: f64) -> Vec<f64> {
        let (w, h) = (pred.width() as i64, pred.height() as i64);
        let r = (3.0 * sigma).floor() as i64;
        let ok = |x: i64, y: i64| {
            let (p, s) = (pred.get(x as usize, y as usize), sensor.get(x as usize, y as usize));
            (p.is_finite() && p > 0.0 && s.is_finite() && s > 0.0).then(|| s as f64 / p as f64)
        };
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if ok(x, y).is_none() {
                    out.push(1.0);
                    continue;
                }
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (x + dx, y + dy);
                        if sx < 0 || sy < 0 || sx >= w || sy >= h {
                            continue;
                        }
                        if let Some(v) = ok(sx, sy) {
                            let g = if r == 0 {
                                1.0
                            } else {
                                (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()
                            };
                            num += g * v;
                            den += g;
                        }
                    }
                }
                out.push(num / den);
            }
        }
        out
    }

    #[test]
    fn blur_matches_dense_oracle() {
        // Piecewise-constant ratio with a hole of missing sensor depth.
        let pred = map_from(37, 23, |x, _| if x < 15 { 2.0 } else { 1.0 });
        let sensor = map_from(37, 23, |x, y| {
            if (10..14).contains(&x) && (5..9).contains(&y) {
                0.0
            } else if y < 12 {
                1.0
            } else {
                1.5
            }
        });
        for sigma in [0.0, 1.3, 3.0, 7.0] {
            let m = rescale_depth(&pred, &sensor, sigma).unwrap();
            let oracle = dense_oracle(&pred, &sensor, sigma);
            for (a, b) in m.ratio().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6, "sigma {sigma}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn disjoint_validity_is_an_error() {
        let a = map_from(4, 4, |x, _| if x < 2 { 1.0 } else { 0.0 });
        let b = map_from(4, 4, |x, _| if x >= 2 { 1.0 } else { 0.0 });
        assert!(matches!(rescale_depth(&a, &b, 1.0), Err(Error::NoValidOverlap)));
    }

    #[test]
    fn trace_lookup_matches_scalar_oracle() {
        let pred = map_from(16, 12, |_, _| 1.0);
        let sensor = map_from(16, 12, |x, y| 0.5 + 0.1 * x as f32 + 0.01 * y as f32);
        let m = rescale_depth(&pred, &sensor, 0.0).unwrap();
        let g = GridSpec::new(2, 2, 16, 12).unwrap();
        let pts = vec![
            [0.49, 0.5, 2.0],
            [3.5, 2.4, 2.0],
            [15.49, 11.49, 1.0],
            [15.5, 3.0, 3.0],
        ];
        let trace = ScreenTrace::constant(g, 2, &pts).unwrap();
        let out = apply_depth_rescale(&trace, &m).unwrap();
        let expect = |x: usize, y: usize, z: f64| z * (sensor.get(x, y) as f64);
        assert!((out.trace.point(0, 0)[2] - expect(0, 1, 2.0)).abs() < 1e-12);
        assert!((out.trace.point(1, 1)[2] - expect(4, 2, 2.0)).abs() < 1e-12);
        assert!((out.trace.point(2, 0)[2] - expect(15, 11, 1.0)).abs() < 1e-12);
        assert_eq!(out.trace.point(3, 0)[2], 3.0);
        assert_eq!(out.out_of_bounds, vec![(3, 0), (3, 1)]);
        assert_eq!(out.trace.point(1, 0)[..2], [3.5, 2.4]);

        let half = rescale_depth(&map_from(16, 12, |_, _| 2.0), &map_from(16, 12, |_, _| 1.0), 7.0).unwrap();
        let twos = ScreenTrace::constant(g, 3, &[[1.0, 1.0, 2.0]; 4]).unwrap();
        let out = apply_depth_rescale(&twos, &half).unwrap();
        assert!(out.trace.points().chunks(3).all(|p| (p[2] - 1.0).abs() < 1e-12));
    }
}

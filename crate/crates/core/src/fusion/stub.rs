use std::sync::OnceLock;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureProvider, FeatureStream, StemAdapter, StreamId};
use crate::error::{Error, Result};
use crate::linalg::{mm_acc, mm_bt_acc, row_normalize, row_normalize_backward, Real};
use crate::sample::{is_valid_depth, DepthMap};

pub const STUB_V1: &str = "stub-v1";
pub const D_GEOMETRIC: usize = 96;
pub const D_SEMANTIC: usize = 64;
pub const HIST_BINS: usize = 8;
const HIST_DIM: usize = 3 * HIST_BINS;
const STATS: usize = 8;
/// Depth is divided by this before the stem so that tabletop depths land
/// inside the histogram range `[0, 1]`.
pub const DEPTH_RANGE_M: f64 = 2.0;
pub(crate) const TOKEN_EPS: f64 = 1e-6;
const PROJ_SEED: u64 = 0x7374_7562_7631;

/// Fixed `24 x 64` histogram projection.
pub(crate) fn projection() -> &'static [f64] {
    static PROJ: OnceLock<Vec<f64>> = OnceLock::new();
    PROJ.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJ_SEED);
        let scale = 1.0 / (HIST_DIM as f64).sqrt();
        (0..HIST_DIM * D_SEMANTIC)
            .map(|_| -> f64 { scale * { let x: f64 = StandardNormal.sample(&mut rng); x } })
            .collect()
    })
}

/// Quadratic B-spline weight of a value `t` bin widths from a bin center,
/// and its derivative. C1, so finite differences through it are clean.
fn bspline(t: f64) -> (f64, f64) {
    let a = t.abs();
    if a < 0.5 {
        (0.75 - t * t, -2.0 * t)
    } else if a < 1.5 {
        let r = 1.5 - a;
        (0.5 * r * r, -r * t.signum())
    } else {
        (0.0, 0.0)
    }
}

/// Bins touched by value `v` in `[0, 1]` units with their weights and
/// derivatives with respect to `v`.
fn soft_bins(v: f64) -> impl Iterator<Item = (usize, f64, f64)> {
    let x = v * HIST_BINS as f64 - 0.5;
    // Far outside the range no bin is touched; clamping keeps `j` finite.
    let j = x.clamp(-2.0, HIST_BINS as f64 + 1.0).round() as i64;
    (j - 1..=j + 1).filter_map(move |b| {
        if b < 0 || b >= HIST_BINS as i64 {
            return None;
        }
        let (w, dw) = bspline(x - b as f64);
        (w != 0.0 || dw != 0.0).then_some((b as usize, w, dw * HIST_BINS as f64))
    })
}

/// Start of patch `i` of `n` along an axis of `len` pixels; pixel `u` lies in
/// patch `floor(u * n / len)`.
fn patch_start(i: usize, n: usize, len: usize) -> usize {
    (i * len).div_ceil(n)
}

/// Deterministic statistics featurizer standing in for pretrained encoders.
///
/// The image is cut into an `n x n` patch grid. Stream A holds, per quadrant
/// of each patch and per channel, mean, std, min, max and the signed and
/// absolute means of horizontal and vertical differences. Stream B is a soft
/// color histogram through a fixed random projection. Both are standardized
/// per token, so each token depends on its own patch only.
#[derive(Debug, Clone)]
pub struct StubV1 {
    n: usize,
}

/// Valid depth pixels grouped for the trainable depth stream.
#[derive(Debug, Clone)]
pub(crate) struct DepthInput<R> {
    pub n_tokens: usize,
    pub patch: Vec<u32>,
    /// Depth over [`DEPTH_RANGE_M`].
    pub value: Vec<R>,
    /// Reciprocal valid-pixel count per patch, zero for empty patches.
    pub inv_count: Vec<R>,
}

#[derive(Debug, Clone)]
pub(crate) struct DepthCache<R> {
    pub tokens: Vec<R>,
    rstd: Vec<R>,
}

impl StubV1 {
    pub fn new(patch_grid: usize) -> Result<Self> {
        if patch_grid == 0 {
            return Err(Error::Config("feature patch grid must be at least 1".into()));
        }
        Ok(Self { n: patch_grid })
    }

    fn check_size(&self, w: usize, h: usize) -> Result<()> {
        if w < self.n || h < self.n {
            return Err(Error::Config(format!(
                "{w}x{h} input is smaller than the {0}x{0} patch grid",
                self.n
            )));
        }
        Ok(())
    }

    fn patch_of(&self, u: usize, v: usize, w: usize, h: usize) -> usize {
        (v * self.n / h) * self.n + u * self.n / w
    }

    fn geometric(&self, img: &RgbImage) -> Vec<f64> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = self.n;
        let px = |u: usize, v: usize, c: usize| img.get_pixel(u as u32, v as u32).0[c] as f64 / 255.0;
        let mut out = vec![0.0; n * n * D_GEOMETRIC];
        for pr in 0..n {
            let (v0, v1) = (patch_start(pr, n, h), patch_start(pr + 1, n, h));
            let vm = (v0 + v1) / 2;
            for pc in 0..n {
                let (u0, u1) = (patch_start(pc, n, w), patch_start(pc + 1, n, w));
                let um = (u0 + u1) / 2;
                let tok = &mut out[(pr * n + pc) * D_GEOMETRIC..(pr * n + pc + 1) * D_GEOMETRIC];
                let quads = [(u0, um, v0, vm), (um, u1, v0, vm), (u0, um, vm, v1), (um, u1, vm, v1)];
                for (q, &(qa, qb, qc, qd)) in quads.iter().enumerate() {
                    for c in 0..3 {
                        let s = &mut tok[(q * 3 + c) * STATS..(q * 3 + c + 1) * STATS];
                        let count = (qb - qa) * (qd - qc);
                        if count == 0 {
                            continue;
                        }
                        let (mut sum, mut sq, mut lo, mut hi) = (0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
                        let (mut dx, mut adx, mut nx, mut dy, mut ady, mut ny) = (0.0, 0.0, 0usize, 0.0, 0.0, 0usize);
                        for v in qc..qd {
                            for u in qa..qb {
                                let p = px(u, v, c);
                                sum += p;
                                sq += p * p;
                                lo = lo.min(p);
                                hi = hi.max(p);
                                if u + 1 < qb {
                                    let d = px(u + 1, v, c) - p;
                                    dx += d;
                                    adx += d.abs();
                                    nx += 1;
                                }
                                if v + 1 < qd {
                                    let d = px(u, v + 1, c) - p;
                                    dy += d;
                                    ady += d.abs();
                                    ny += 1;
                                }
                            }
                        }
                        let mean = sum / count as f64;
                        let var = (sq / count as f64 - mean * mean).max(0.0);
                        let nx = nx.max(1) as f64;
                        let ny = ny.max(1) as f64;
                        s.copy_from_slice(&[mean, var.sqrt(), lo, hi, dx / nx, adx / nx, dy / ny, ady / ny]);
                    }
                }
            }
        }
        out
    }

    fn semantic(&self, img: &RgbImage) -> Vec<f64> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let nt = self.n * self.n;
        let mut hist = vec![0.0; nt * HIST_DIM];
        let mut count = vec![0usize; nt];
        for v in 0..h {
            for u in 0..w {
                let p = self.patch_of(u, v, w, h);
                count[p] += 1;
                let rgb = img.get_pixel(u as u32, v as u32).0;
                for c in 0..3 {
                    for (b, wt, _) in soft_bins(rgb[c] as f64 / 255.0) {
                        hist[p * HIST_DIM + c * HIST_BINS + b] += wt;
                    }
                }
            }
        }
        for (p, cnt) in count.iter().enumerate() {
            let inv = 1.0 / *cnt as f64;
            hist[p * HIST_DIM..(p + 1) * HIST_DIM].iter_mut().for_each(|x| *x *= inv);
        }
        project_and_normalize(&hist, nt, projection()).0
    }

    pub(crate) fn prepare_depth<R: Real>(&self, depth: &DepthMap) -> Result<DepthInput<R>> {
        let (w, h) = (depth.width(), depth.height());
        self.check_size(w, h)?;
        let nt = self.n * self.n;
        let mut count = vec![0usize; nt];
        let (mut patch, mut value) = (Vec::new(), Vec::new());
        for v in 0..h {
            for u in 0..w {
                let d = depth.get(u, v);
                if !is_valid_depth(d) {
                    continue;
                }
                let p = self.patch_of(u, v, w, h);
                count[p] += 1;
                patch.push(p as u32);
                value.push(R::of(d as f64 / DEPTH_RANGE_M));
            }
        }
        if patch.is_empty() {
            return Err(Error::AllDepthMissing);
        }
        let inv_count = count
            .iter()
            .map(|c| if *c == 0 { R::zero() } else { R::of(1.0 / *c as f64) })
            .collect();
        Ok(DepthInput {
            n_tokens: nt,
            patch,
            value,
            inv_count,
        })
    }

    /// Stem lift (`w_c * d + b_c` per channel) followed by the stream-B
    /// featurizer over valid pixels. `stem` is `[w0, w1, w2, b0, b1, b2]`.
    pub(crate) fn depth_forward<R: Real>(inp: &DepthInput<R>, stem: &[R], proj: &[R]) -> DepthCache<R> {
        let nt = inp.n_tokens;
        let mut hist = vec![R::zero(); nt * HIST_DIM];
        for (p, d) in inp.patch.iter().zip(&inp.value) {
            let p = *p as usize;
            let ic = inp.inv_count[p];
            for c in 0..3 {
                let lifted = stem[c] * *d + stem[3 + c];
                for (b, wt, _) in soft_bins(lifted.as_f64()) {
                    hist[p * HIST_DIM + c * HIST_BINS + b] += R::of(wt) * ic;
                }
            }
        }
        let (tokens, rstd) = project_and_normalize(&hist, nt, proj);
        DepthCache { tokens, rstd }
    }

    /// Gradient of a scalar with respect to the six stem parameters, given
    /// its gradient with respect to the depth tokens.
    pub(crate) fn depth_backward<R: Real>(
        inp: &DepthInput<R>,
        stem: &[R],
        proj: &[R],
        cache: &DepthCache<R>,
        d_tokens: &[R],
    ) -> [R; 6] {
        let nt = inp.n_tokens;
        let mut dy = vec![R::zero(); nt * D_SEMANTIC];
        row_normalize_backward(d_tokens, &cache.tokens, &cache.rstd, nt, D_SEMANTIC, &mut dy);
        let mut dhist = vec![R::zero(); nt * HIST_DIM];
        mm_bt_acc(&dy, proj, nt, D_SEMANTIC, HIST_DIM, &mut dhist);
        let mut g = [R::zero(); 6];
        for (p, d) in inp.patch.iter().zip(&inp.value) {
            let p = *p as usize;
            let ic = inp.inv_count[p];
            for c in 0..3 {
                let lifted = stem[c] * *d + stem[3 + c];
                let mut dv = R::zero();
                for (b, _, dw) in soft_bins(lifted.as_f64()) {
                    dv += dhist[p * HIST_DIM + c * HIST_BINS + b] * R::of(dw);
                }
                dv *= ic;
                g[c] += dv * *d;
                g[3 + c] += dv;
            }
        }
        g
    }
}

fn project_and_normalize<R: Real>(hist: &[R], nt: usize, proj: &[R]) -> (Vec<R>, Vec<R>) {
    let mut y = vec![R::zero(); nt * D_SEMANTIC];
    mm_acc(hist, proj, nt, HIST_DIM, D_SEMANTIC, &mut y);
    let mut out = vec![R::zero(); nt * D_SEMANTIC];
    let rstd = row_normalize(&y, nt, D_SEMANTIC, R::of(TOKEN_EPS), &mut out);
    (out, rstd)
}

impl FeatureProvider for StubV1 {
    fn name(&self) -> &'static str {
        STUB_V1
    }

    fn patch_grid(&self) -> usize {
        self.n
    }

    fn geometric_dim(&self) -> usize {
        D_GEOMETRIC
    }

    fn semantic_dim(&self) -> usize {
        D_SEMANTIC
    }

    fn encode_rgb(&self, image: &RgbImage) -> Result<[FeatureStream; 2]> {
        self.check_size(image.width() as usize, image.height() as usize)?;
        let nt = self.n * self.n;
        let raw = self.geometric(image);
        let mut a = vec![0.0; raw.len()];
        row_normalize(&raw, nt, D_GEOMETRIC, TOKEN_EPS, &mut a);
        Ok([
            FeatureStream::new(StreamId::RgbGeometric, nt, D_GEOMETRIC, a)?,
            FeatureStream::new(StreamId::RgbSemantic, nt, D_SEMANTIC, self.semantic(image))?,
        ])
    }

    fn encode_depth(&self, depth: &DepthMap, stem: &StemAdapter) -> Result<FeatureStream> {
        let inp = self.prepare_depth::<f64>(depth)?;
        let cache = Self::depth_forward(&inp, &stem.as_params(), projection());
        FeatureStream::new(StreamId::Depth, inp.n_tokens, D_SEMANTIC, cache.tokens)
    }
}

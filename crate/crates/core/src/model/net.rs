use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::patch::{check_even, PATCH, TOKEN_DIM};
use super::{ModelConfig, TraceShape};
use crate::error::{Error, Result};
use crate::fusion::{projection, DepthCache, DepthInput, StubV1, D_GEOMETRIC, D_SEMANTIC, D_TEXT, STUB_V1};
use crate::linalg::{cast, col_sum_acc, mm_acc, mm_at_acc, mm_bt_acc, row_normalize, row_normalize_backward, Real};

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub w: usize,
    pub hid: usize,
    pub s: usize,
    pub l: usize,
    pub t: usize,
    pub d: usize,
    pub dv: usize,
    pub n: usize,
    /// Aligned visual width per spatial token: one visual token per keypoint.
    pub da: usize,
    pub c: usize,
}

/// Offsets of one residual sublayer: its modulation head and the two
/// weight/bias pairs of its mixing function (the second pair is empty for
/// token mixing).
#[derive(Debug, Clone, Copy)]
struct SubOff {
    ada_w: usize,
    ada_b: usize,
    a: usize,
    a_b: usize,
    b: usize,
    b_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: usize,
    vis_w: usize,
    vis_b: usize,
    txt_w: usize,
    txt_b: usize,
    in_w: usize,
    in_b: usize,
    pos_s: usize,
    pos_t: usize,
    sp_w: usize,
    blocks: Vec<[SubOff; 3]>,
    ada_o_w: usize,
    ada_o_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

/// Named contiguous parameter range, for reporting and targeted checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Spatial,
    Temporal,
    Channel,
}

const KINDS: [Kind; 3] = [Kind::Spatial, Kind::Temporal, Kind::Channel];

/// Pooled conditioning consumed by the velocity network: mean visual token,
/// mean text token and, per spatial token, the visual tokens under its
/// keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCond<R> {
    pub visual_mean: Vec<R>,
    pub text_mean: Vec<R>,
    pub aligned: Vec<R>,
}

/// Frozen per-sample inputs of the trainable conditioning path.
pub(crate) struct CondInput<'a, R> {
    pub a: &'a [R],
    pub b: &'a [R],
    pub depth: &'a DepthInput<R>,
    /// Mean raw text embedding over the instruction's tokens.
    pub text: &'a [R],
    pub drop: bool,
}

pub(crate) struct CondCache<R> {
    depth: Option<DepthCache<R>>,
}

struct SubCache<R> {
    m: Vec<R>,
    xhat: Vec<R>,
    rstd: Vec<R>,
    y: Vec<R>,
    z1: Vec<R>,
    a1: Vec<R>,
}

pub(crate) struct CoreCache<R> {
    c: Vec<R>,
    subs: Vec<SubCache<R>>,
    fm: Vec<R>,
    fxhat: Vec<R>,
    frstd: Vec<R>,
}

/// The trainable part of the model: depth stem, fusion projections and the
/// velocity network, over one flat parameter vector.
///
/// Tokens are embedded from 12 values to `width`, summed with learned
/// spatial and temporal position embeddings, the sinusoidal `tau` embedding
/// and a projection of the aligned visual tokens. Each block applies spatial
/// token mixing, temporal token mixing and a channel MLP, every one as a
/// gated residual on a layer norm whose scale, shift and gate come from a
/// zero-initialized linear map of `[mean visual, mean text, tau embedding]`.
#[derive(Debug, Clone)]
pub struct Net<R> {
    dims: Dims,
    lay: Layout,
    config: ModelConfig,
    shape: TraceShape,
    proj: Vec<R>,
    align: Vec<usize>,
    freqs: Vec<f64>,
    stub: StubV1,
}

fn silu(x: f64) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-x).exp());
    (x * s, s * (1.0 + x * (1.0 - s)))
}

impl<R: Real> Net<R> {
    pub fn new(config: &ModelConfig, shape: TraceShape) -> Result<Self> {
        config.validate()?;
        check_even(shape.grid_rows, shape.grid_cols)?;
        if shape.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if config.provider != STUB_V1 {
            return Err(Error::UnknownProvider(config.provider.clone()));
        }
        let stub = StubV1::new(config.patch_grid)?;
        let w = config.width;
        let (sr, sc) = (shape.grid_rows / PATCH, shape.grid_cols / PATCH);
        let s = sr * sc;
        let l = shape.horizon;
        let d = config.d_model;
        let n = config.patch_grid * config.patch_grid;
        let dims = Dims {
            w,
            hid: w * config.mlp_ratio,
            s,
            l,
            t: s * l,
            d,
            dv: D_GEOMETRIC + 2 * D_SEMANTIC,
            n,
            da: PATCH * PATCH * d,
            c: 2 * d + w,
        };
        let lay = Self::layout(&dims, config.depth);
        let g = config.patch_grid;
        let (rows, cols) = (shape.grid_rows, shape.grid_cols);
        let align = (0..s)
            .flat_map(|i| (0..PATCH * PATCH).map(move |j| (PATCH * (i / sc) + j / PATCH, PATCH * (i % sc) + j % PATCH)))
            .map(|(kr, kc)| {
                let vr = ((2 * kr + 1) * g) / (2 * rows);
                let vc = ((2 * kc + 1) * g) / (2 * cols);
                vr.min(g - 1) * g + vc.min(g - 1)
            })
            .collect();
        let half = w / 2;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        Ok(Self {
            dims,
            lay,
            config: config.clone(),
            shape,
            proj: cast(projection()),
            align,
            freqs,
            stub,
        })
    }

    fn layout(d: &Dims, depth: usize) -> Layout {
        let mut cur = 0;
        let mut take = |len: usize| {
            let o = cur;
            cur += len;
            o
        };
        let stem = take(6);
        let vis_w = take(d.dv * d.d);
        let vis_b = take(d.d);
        let txt_w = take(D_TEXT * d.d);
        let txt_b = take(d.d);
        let in_w = take(TOKEN_DIM * d.w);
        let in_b = take(d.w);
        let pos_s = take(d.s * d.w);
        let pos_t = take(d.l * d.w);
        let sp_w = take(d.da * d.w);
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            let mut subs = [SubOff {
                ada_w: 0,
                ada_b: 0,
                a: 0,
                a_b: 0,
                b: 0,
                b_b: 0,
            }; 3];
            for (k, sub) in KINDS.iter().zip(subs.iter_mut()) {
                sub.ada_w = take(d.c * 3 * d.w);
                sub.ada_b = take(3 * d.w);
                match k {
                    Kind::Spatial => {
                        sub.a = take(d.s * d.s);
                        sub.a_b = take(d.s);
                    }
                    Kind::Temporal => {
                        sub.a = take(d.l * d.l);
                        sub.a_b = take(d.l);
                    }
                    Kind::Channel => {
                        sub.a = take(d.w * d.hid);
                        sub.a_b = take(d.hid);
                        sub.b = take(d.hid * d.w);
                        sub.b_b = take(d.w);
                    }
                }
            }
            blocks.push(subs);
        }
        let ada_o_w = take(d.c * 2 * d.w);
        let ada_o_b = take(2 * d.w);
        let out_w = take(d.w * TOKEN_DIM);
        let out_b = take(TOKEN_DIM);
        Layout {
            stem,
            vis_w,
            vis_b,
            txt_w,
            txt_b,
            in_w,
            in_b,
            pos_s,
            pos_t,
            sp_w,
            blocks,
            ada_o_w,
            ada_o_b,
            out_w,
            out_b,
            total: cur,
        }
    }

    pub fn num_params(&self) -> usize {
        self.lay.total
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape(&self) -> TraceShape {
        self.shape
    }

    #[cfg(test)]
    pub(crate) fn dims(&self) -> Dims {
        self.dims
    }

    pub(crate) fn stub(&self) -> &StubV1 {
        &self.stub
    }

    /// Visual token under each keypoint, grouped by spatial token in
    /// within-patch order.
    pub fn alignment(&self) -> &[usize] {
        &self.align
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let (l, d) = (&self.lay, &self.dims);
        let mut g = vec![
            ("stem", l.stem, 6),
            ("fusion.visual.weight", l.vis_w, d.dv * d.d),
            ("fusion.visual.bias", l.vis_b, d.d),
            ("fusion.text.weight", l.txt_w, D_TEXT * d.d),
            ("fusion.text.bias", l.txt_b, d.d),
            ("embed.weight", l.in_w, TOKEN_DIM * d.w),
            ("embed.bias", l.in_b, d.w),
            ("embed.pos_spatial", l.pos_s, d.s * d.w),
            ("embed.pos_temporal", l.pos_t, d.l * d.w),
            ("embed.visual", l.sp_w, d.da * d.w),
        ]
        .into_iter()
        .map(|(n, o, len)| ParamGroup {
            name: n.into(),
            offset: o,
            len,
        })
        .collect::<Vec<_>>();
        for (bi, subs) in l.blocks.iter().enumerate() {
            for (k, sub) in KINDS.iter().zip(subs) {
                let name = match k {
                    Kind::Spatial => "spatial",
                    Kind::Temporal => "temporal",
                    Kind::Channel => "channel",
                };
                let end = if *k == Kind::Channel { sub.b_b + d.w } else { sub.a_b + if *k == Kind::Spatial { d.s } else { d.l } };
                g.push(ParamGroup {
                    name: format!("block{bi}.{name}.modulation"),
                    offset: sub.ada_w,
                    len: sub.a - sub.ada_w,
                });
                g.push(ParamGroup {
                    name: format!("block{bi}.{name}.mix"),
                    offset: sub.a,
                    len: end - sub.a,
                });
            }
        }
        g.push(ParamGroup {
            name: "head.modulation".into(),
            offset: l.ada_o_w,
            len: l.out_w - l.ada_o_w,
        });
        g.push(ParamGroup {
            name: "head.out".into(),
            offset: l.out_w,
            len: l.total - l.out_w,
        });
        g
    }

    /// Training initialization: identity stem, scaled Gaussian weights,
    /// zero biases and zero modulation heads (every block starts gated off).
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<R> {
        let (l, d) = (&self.lay, &self.dims);
        let mut p = vec![R::zero(); l.total];
        let fill = |p: &mut [R], off: usize, len: usize, std: f64, rng: &mut ChaCha8Rng| {
            for v in &mut p[off..off + len] {
                let z: f64 = StandardNormal.sample(rng);
                *v = R::of(std * z);
            }
        };
        for c in 0..3 {
            p[l.stem + c] = R::one();
        }
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        fill(&mut p, l.vis_w, d.dv * d.d, inv(d.dv), rng);
        fill(&mut p, l.txt_w, D_TEXT * d.d, inv(D_TEXT) * 2.0, rng);
        fill(&mut p, l.in_w, TOKEN_DIM * d.w, inv(TOKEN_DIM), rng);
        fill(&mut p, l.pos_s, d.s * d.w, 0.1, rng);
        fill(&mut p, l.pos_t, d.l * d.w, 0.1, rng);
        fill(&mut p, l.sp_w, d.da * d.w, inv(d.da), rng);
        for subs in &l.blocks {
            for (k, sub) in KINDS.iter().zip(subs) {
                match k {
                    Kind::Spatial => fill(&mut p, sub.a, d.s * d.s, inv(d.s), rng),
                    Kind::Temporal => fill(&mut p, sub.a, d.l * d.l, inv(d.l), rng),
                    Kind::Channel => {
                        fill(&mut p, sub.a, d.w * d.hid, inv(d.w), rng);
                        fill(&mut p, sub.b, d.hid * d.w, inv(d.hid), rng);
                    }
                }
            }
        }
        fill(&mut p, l.out_w, d.w * TOKEN_DIM, 0.1 * inv(d.w), rng);
        p
    }

    /// Every parameter drawn from `N(0, scale^2 / fan)`-style noise with the
    /// stem near identity. Used by gradient checks, where zero modulation
    /// heads would hide most of the network.
    pub fn random_params(&self, rng: &mut ChaCha8Rng, scale: f64) -> Vec<R> {
        let mut p = self.init_params(rng);
        for v in p.iter_mut() {
            let z: f64 = rng.random_range(-1.0..1.0);
            *v += R::of(scale * z * 0.3);
        }
        for c in 0..3 {
            p[self.lay.stem + c] = R::of(1.0 + 0.2 * rng.random_range(-1.0..1.0));
            p[self.lay.stem + 3 + c] = R::of(0.05 * rng.random_range(-1.0..1.0));
        }
        p
    }

    fn time_embedding(&self, tau: f64) -> Vec<R> {
        let half = self.freqs.len();
        let mut e = vec![R::zero(); 2 * half];
        for (i, f) in self.freqs.iter().enumerate() {
            let a = TIME_SCALE * tau * f;
            e[i] = R::of(a.sin());
            e[half + i] = R::of(a.cos());
        }
        e
    }

    /// Pooled conditioning from fused tokens: mean visual token, mean of
    /// the word-carrying text tokens (all tokens when there are none) and
    /// the aligned visual tokens.
    pub fn pool_tokens(&self, cond: &crate::fusion::CondTokens) -> Result<PooledCond<R>> {
        let d = self.dims.d;
        if cond.d_model != d || cond.n_visual != self.dims.n {
            return Err(Error::ShapeMismatch(format!(
                "conditioning is {} tokens of width {}, model expects {} of width {d}",
                cond.n_visual, cond.d_model, self.dims.n
            )));
        }
        let mean_rows = |rows: &[f64], n: usize| -> Vec<R> {
            let mut m = vec![0.0; d];
            for i in 0..n {
                for (a, b) in m.iter_mut().zip(&rows[i * d..(i + 1) * d]) {
                    *a += b;
                }
            }
            m.iter().map(|v| R::of(v / n.max(1) as f64)).collect()
        };
        let n_text = if cond.text_valid > 0 { cond.text_valid } else { cond.n_text };
        let aligned = self
            .align
            .iter()
            .flat_map(|&i| cond.visual[i * d..(i + 1) * d].iter().map(|v| R::of(*v)))
            .collect();
        Ok(PooledCond {
            visual_mean: mean_rows(&cond.visual, cond.n_visual),
            text_mean: mean_rows(&cond.text, n_text),
            aligned,
        })
    }

    pub(crate) fn cond_forward(&self, p: &[R], inp: &CondInput<R>) -> (PooledCond<R>, CondCache<R>) {
        let (l, d) = (&self.lay, &self.dims);
        let mut text_mean = p[l.txt_b..l.txt_b + d.d].to_vec();
        if inp.drop {
            return (
                PooledCond {
                    visual_mean: vec![R::zero(); d.d],
                    text_mean,
                    aligned: vec![R::zero(); d.s * d.da],
                },
                CondCache { depth: None },
            );
        }
        mm_acc(inp.text, &p[l.txt_w..l.txt_w + D_TEXT * d.d], 1, D_TEXT, d.d, &mut text_mean);
        let dc = StubV1::depth_forward(inp.depth, &p[l.stem..l.stem + 6], &self.proj);
        let f = self.visual_tokens(p, inp.a, inp.b, &dc.tokens);
        let mut visual_mean = vec![R::zero(); d.d];
        col_sum_acc(&f, d.n, d.d, &mut visual_mean);
        let inv = R::of(1.0 / d.n as f64);
        visual_mean.iter_mut().for_each(|v| *v *= inv);
        let aligned = self.align.iter().flat_map(|&i| f[i * d.d..(i + 1) * d.d].iter().copied()).collect();
        (
            PooledCond {
                visual_mean,
                text_mean,
                aligned,
            },
            CondCache { depth: Some(dc) },
        )
    }

    fn visual_tokens(&self, p: &[R], a: &[R], b: &[R], dep: &[R]) -> Vec<R> {
        let (l, d) = (&self.lay, &self.dims);
        let mut f = p[l.vis_b..l.vis_b + d.d].repeat(d.n);
        let wa = l.vis_w;
        let wb = wa + D_GEOMETRIC * d.d;
        let wd = wb + D_SEMANTIC * d.d;
        mm_acc(a, &p[wa..wb], d.n, D_GEOMETRIC, d.d, &mut f);
        mm_acc(b, &p[wb..wd], d.n, D_SEMANTIC, d.d, &mut f);
        mm_acc(dep, &p[wd..wd + D_SEMANTIC * d.d], d.n, D_SEMANTIC, d.d, &mut f);
        f
    }

    pub(crate) fn cond_backward(
        &self,
        p: &[R],
        inp: &CondInput<R>,
        cache: &CondCache<R>,
        dpool: &PooledCond<R>,
        g: &mut [R],
    ) {
        let (l, d) = (&self.lay, &self.dims);
        for (gv, dv) in g[l.txt_b..l.txt_b + d.d].iter_mut().zip(&dpool.text_mean) {
            *gv += *dv;
        }
        let Some(dc) = &cache.depth else { return };
        mm_at_acc(inp.text, &dpool.text_mean, 1, D_TEXT, d.d, &mut g[l.txt_w..l.txt_w + D_TEXT * d.d]);
        let mut df = vec![R::zero(); d.n * d.d];
        let inv = R::of(1.0 / d.n as f64);
        for row in df.chunks_exact_mut(d.d) {
            for (a, b) in row.iter_mut().zip(&dpool.visual_mean) {
                *a = *b * inv;
            }
        }
        for (s, &i) in self.align.iter().enumerate() {
            for (a, b) in df[i * d.d..(i + 1) * d.d].iter_mut().zip(&dpool.aligned[s * d.d..(s + 1) * d.d]) {
                *a += *b;
            }
        }
        let wa = l.vis_w;
        let wb = wa + D_GEOMETRIC * d.d;
        let wd = wb + D_SEMANTIC * d.d;
        let we = wd + D_SEMANTIC * d.d;
        mm_at_acc(inp.a, &df, d.n, D_GEOMETRIC, d.d, &mut g[wa..wb]);
        mm_at_acc(inp.b, &df, d.n, D_SEMANTIC, d.d, &mut g[wb..wd]);
        mm_at_acc(&dc.tokens, &df, d.n, D_SEMANTIC, d.d, &mut g[wd..we]);
        col_sum_acc(&df, d.n, d.d, &mut g[l.vis_b..l.vis_b + d.d]);
        let mut ddep = vec![R::zero(); d.n * D_SEMANTIC];
        mm_bt_acc(&df, &p[wd..we], d.n, d.d, D_SEMANTIC, &mut ddep);
        let gs = StubV1::depth_backward(inp.depth, &p[l.stem..l.stem + 6], &self.proj, dc, &ddep);
        for (a, b) in g[l.stem..l.stem + 6].iter_mut().zip(gs) {
            *a += b;
        }
    }

    fn cond_vector(&self, pool: &PooledCond<R>, tau: f64) -> Vec<R> {
        let mut c = Vec::with_capacity(self.dims.c);
        c.extend_from_slice(&pool.visual_mean);
        c.extend_from_slice(&pool.text_mean);
        c.extend(self.time_embedding(tau));
        c
    }

    fn modulation(&self, p: &[R], c: &[R], w_off: usize, b_off: usize, k: usize) -> Vec<R> {
        let mut m = p[b_off..b_off + k].to_vec();
        mm_acc(c, &p[w_off..w_off + self.dims.c * k], 1, self.dims.c, k, &mut m);
        m
    }

    /// `u = xhat * (1 + gamma) + beta`, token by token.
    fn modulate(xhat: &[R], m: &[R], w: usize) -> Vec<R> {
        let (gamma, beta) = (&m[..w], &m[w..2 * w]);
        let mut u = xhat.to_vec();
        for row in u.chunks_exact_mut(w) {
            for j in 0..w {
                row[j] = row[j] * (R::one() + gamma[j]) + beta[j];
            }
        }
        u
    }

    /// Velocity for tokens `x` (`T x 12`) at time `tau`.
    pub fn forward(&self, p: &[R], pool: &PooledCond<R>, x: &[R], tau: f64) -> Vec<R> {
        self.core_forward(p, pool, x, tau).0
    }

    pub(crate) fn core_forward(&self, p: &[R], pool: &PooledCond<R>, x: &[R], tau: f64) -> (Vec<R>, CoreCache<R>) {
        let (l, d) = (&self.lay, &self.dims);
        let (w, s, t_len, nt) = (d.w, d.s, d.l, d.t);
        let c = self.cond_vector(pool, tau);
        let e = &c[2 * d.d..];
        let mut gsp = vec![R::zero(); s * w];
        mm_acc(&pool.aligned, &p[l.sp_w..l.sp_w + d.da * w], s, d.da, w, &mut gsp);
        let mut h = vec![R::zero(); nt * w];
        mm_acc(x, &p[l.in_w..l.in_w + TOKEN_DIM * w], nt, TOKEN_DIM, w, &mut h);
        for t in 0..t_len {
            for si in 0..s {
                let row = &mut h[(t * s + si) * w..(t * s + si + 1) * w];
                for j in 0..w {
                    row[j] += p[l.in_b + j] + p[l.pos_s + si * w + j] + p[l.pos_t + t * w + j] + e[j] + gsp[si * w + j];
                }
            }
        }
        let mut subs = Vec::with_capacity(3 * l.blocks.len());
        for block in &l.blocks {
            for (k, off) in KINDS.iter().zip(block) {
                let m = self.modulation(p, &c, off.ada_w, off.ada_b, 3 * w);
                let mut xhat = vec![R::zero(); nt * w];
                let rstd = row_normalize(&h, nt, w, R::of(LN_EPS), &mut xhat);
                let u = Self::modulate(&xhat, &m, w);
                let mut y = vec![R::zero(); nt * w];
                let (mut z1, mut a1) = (Vec::new(), Vec::new());
                match k {
                    Kind::Spatial => {
                        for t in 0..t_len {
                            let blk = t * s * w..(t + 1) * s * w;
                            mm_acc(&p[off.a..off.a + s * s], &u[blk.clone()], s, s, w, &mut y[blk]);
                        }
                        for (i, row) in y.chunks_exact_mut(w).enumerate() {
                            let bias = p[off.a_b + i % s];
                            row.iter_mut().for_each(|v| *v += bias);
                        }
                    }
                    Kind::Temporal => {
                        mm_acc(&p[off.a..off.a + t_len * t_len], &u, t_len, t_len, s * w, &mut y);
                        for (t, blk) in y.chunks_exact_mut(s * w).enumerate() {
                            let bias = p[off.a_b + t];
                            blk.iter_mut().for_each(|v| *v += bias);
                        }
                    }
                    Kind::Channel => {
                        z1 = p[off.a_b..off.a_b + d.hid].repeat(nt);
                        mm_acc(&u, &p[off.a..off.a + w * d.hid], nt, w, d.hid, &mut z1);
                        a1 = z1.iter().map(|z| R::of(silu(z.as_f64()).0)).collect();
                        y = p[off.b_b..off.b_b + w].repeat(nt);
                        mm_acc(&a1, &p[off.b..off.b + d.hid * w], nt, d.hid, w, &mut y);
                    }
                }
                let gate = &m[2 * w..3 * w];
                for (hr, yr) in h.chunks_exact_mut(w).zip(y.chunks_exact(w)) {
                    for j in 0..w {
                        hr[j] += gate[j] * yr[j];
                    }
                }
                subs.push(SubCache {
                    m,
                    xhat,
                    rstd,
                    y,
                    z1,
                    a1,
                });
            }
        }
        let fm = self.modulation(p, &c, l.ada_o_w, l.ada_o_b, 2 * w);
        let mut fxhat = vec![R::zero(); nt * w];
        let frstd = row_normalize(&h, nt, w, R::of(LN_EPS), &mut fxhat);
        let u = Self::modulate(&fxhat, &fm, w);
        let mut out = p[l.out_b..l.out_b + TOKEN_DIM].repeat(nt);
        mm_acc(&u, &p[l.out_w..l.out_w + w * TOKEN_DIM], nt, w, TOKEN_DIM, &mut out);
        (
            out,
            CoreCache {
                c,
                subs,
                fm,
                fxhat,
                frstd,
            },
        )
    }

    /// Backward through a modulated layer norm: accumulates the modulation
    /// gradient into `dm` (`[dgamma, dbeta]`) and the input gradient into `dh`.
    fn modulated_norm_backward(du: &[R], xhat: &[R], rstd: &[R], m: &[R], w: usize, dm: &mut [R], dh: &mut [R]) {
        let nt = rstd.len();
        let gamma = &m[..w];
        let mut dxhat = du.to_vec();
        for (tok, row) in dxhat.chunks_exact_mut(w).enumerate() {
            for j in 0..w {
                dm[j] += du[tok * w + j] * xhat[tok * w + j];
                dm[w + j] += du[tok * w + j];
                row[j] *= R::one() + gamma[j];
            }
        }
        row_normalize_backward(&dxhat, xhat, rstd, nt, w, dh);
    }

    /// Reverse pass for `dout` (`T x 12`); accumulates parameter gradients
    /// into `g` and returns the gradient with respect to the pooled inputs.
    pub(crate) fn core_backward(
        &self,
        p: &[R],
        pool: &PooledCond<R>,
        x: &[R],
        cache: &CoreCache<R>,
        dout: &[R],
        g: &mut [R],
    ) -> PooledCond<R> {
        let (l, d) = (&self.lay, &self.dims);
        let (w, s, t_len, nt, cd) = (d.w, d.s, d.l, d.t, d.c);
        let c = &cache.c;
        let mut dc = vec![R::zero(); cd];

        let u = Self::modulate(&cache.fxhat, &cache.fm, w);
        mm_at_acc(&u, dout, nt, w, TOKEN_DIM, &mut g[l.out_w..l.out_w + w * TOKEN_DIM]);
        col_sum_acc(dout, nt, TOKEN_DIM, &mut g[l.out_b..l.out_b + TOKEN_DIM]);
        let mut du = vec![R::zero(); nt * w];
        mm_bt_acc(dout, &p[l.out_w..l.out_w + w * TOKEN_DIM], nt, TOKEN_DIM, w, &mut du);
        let mut dh = vec![R::zero(); nt * w];
        let mut dm = vec![R::zero(); 2 * w];
        Self::modulated_norm_backward(&du, &cache.fxhat, &cache.frstd, &cache.fm, w, &mut dm, &mut dh);
        self.modulation_backward(p, c, &dm, l.ada_o_w, l.ada_o_b, g, &mut dc);

        let offs: Vec<(Kind, SubOff)> = l.blocks.iter().flat_map(|b| KINDS.iter().copied().zip(b.iter().copied())).collect();
        for ((k, off), sc) in offs.iter().zip(&cache.subs).rev() {
            let gate = &sc.m[2 * w..3 * w];
            let mut dm = vec![R::zero(); 3 * w];
            let mut dy = vec![R::zero(); nt * w];
            for tok in 0..nt {
                for j in 0..w {
                    let i = tok * w + j;
                    dy[i] = dh[i] * gate[j];
                    dm[2 * w + j] += dh[i] * sc.y[i];
                }
            }
            let u = Self::modulate(&sc.xhat, &sc.m, w);
            let mut du = vec![R::zero(); nt * w];
            match k {
                Kind::Spatial => {
                    let ms = &p[off.a..off.a + s * s];
                    for t in 0..t_len {
                        let blk = t * s * w..(t + 1) * s * w;
                        mm_bt_acc(&dy[blk.clone()], &u[blk.clone()], s, w, s, &mut g[off.a..off.a + s * s]);
                        mm_at_acc(ms, &dy[blk.clone()], s, s, w, &mut du[blk]);
                    }
                    for (i, row) in dy.chunks_exact(w).enumerate() {
                        g[off.a_b + i % s] += row.iter().copied().sum::<R>();
                    }
                }
                Kind::Temporal => {
                    let mt = &p[off.a..off.a + t_len * t_len];
                    mm_bt_acc(&dy, &u, t_len, s * w, t_len, &mut g[off.a..off.a + t_len * t_len]);
                    mm_at_acc(mt, &dy, t_len, t_len, s * w, &mut du);
                    for (t, blk) in dy.chunks_exact(s * w).enumerate() {
                        g[off.a_b + t] += blk.iter().copied().sum::<R>();
                    }
                }
                Kind::Channel => {
                    let hid = d.hid;
                    mm_at_acc(&sc.a1, &dy, nt, hid, w, &mut g[off.b..off.b + hid * w]);
                    col_sum_acc(&dy, nt, w, &mut g[off.b_b..off.b_b + w]);
                    let mut da1 = vec![R::zero(); nt * hid];
                    mm_bt_acc(&dy, &p[off.b..off.b + hid * w], nt, w, hid, &mut da1);
                    for (dz, z) in da1.iter_mut().zip(&sc.z1) {
                        *dz *= R::of(silu(z.as_f64()).1);
                    }
                    mm_at_acc(&u, &da1, nt, w, hid, &mut g[off.a..off.a + w * hid]);
                    col_sum_acc(&da1, nt, hid, &mut g[off.a_b..off.a_b + hid]);
                    mm_bt_acc(&da1, &p[off.a..off.a + w * hid], nt, hid, w, &mut du);
                }
            }
            Self::modulated_norm_backward(&du, &sc.xhat, &sc.rstd, &sc.m, w, &mut dm, &mut dh);
            self.modulation_backward(p, c, &dm, off.ada_w, off.ada_b, g, &mut dc);
        }

        mm_at_acc(x, &dh, nt, TOKEN_DIM, w, &mut g[l.in_w..l.in_w + TOKEN_DIM * w]);
        let mut dgsp = vec![R::zero(); s * w];
        for t in 0..t_len {
            for si in 0..s {
                let row = &dh[(t * s + si) * w..(t * s + si + 1) * w];
                for j in 0..w {
                    g[l.in_b + j] += row[j];
                    g[l.pos_t + t * w + j] += row[j];
                    dgsp[si * w + j] += row[j];
                }
            }
        }
        for (a, b) in g[l.pos_s..l.pos_s + s * w].iter_mut().zip(&dgsp) {
            *a += *b;
        }
        mm_at_acc(&pool.aligned, &dgsp, s, d.da, w, &mut g[l.sp_w..l.sp_w + d.da * w]);
        let mut daligned = vec![R::zero(); s * d.da];
        mm_bt_acc(&dgsp, &p[l.sp_w..l.sp_w + d.da * w], s, w, d.da, &mut daligned);
        PooledCond {
            visual_mean: dc[..d.d].to_vec(),
            text_mean: dc[d.d..2 * d.d].to_vec(),
            aligned: daligned,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn modulation_backward(&self, p: &[R], c: &[R], dm: &[R], w_off: usize, b_off: usize, g: &mut [R], dc: &mut [R]) {
        let k = dm.len();
        let cd = self.dims.c;
        mm_at_acc(c, dm, 1, cd, k, &mut g[w_off..w_off + cd * k]);
        for (a, b) in g[b_off..b_off + k].iter_mut().zip(dm) {
            *a += *b;
        }
        mm_bt_acc(dm, &p[w_off..w_off + cd * k], 1, k, cd, dc);
    }

    /// Fusion projections as `f64` layers, for producing [`CondTokens`].
    ///
    /// [`CondTokens`]: crate::fusion::CondTokens
    pub fn fusion_layers(&self, p: &[R]) -> crate::fusion::FusionLayers {
        let (l, d) = (&self.lay, &self.dims);
        let f = |o: usize, n: usize| p[o..o + n].iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
        crate::fusion::FusionLayers {
            d_visual_in: d.dv,
            d_text: D_TEXT,
            d_model: d.d,
            vis_w: f(l.vis_w, d.dv * d.d),
            vis_b: f(l.vis_b, d.d),
            txt_w: f(l.txt_w, D_TEXT * d.d),
            txt_b: f(l.txt_b, d.d),
        }
    }

    pub fn stem(&self, p: &[R]) -> crate::fusion::StemAdapter {
        let v: Vec<f64> = p[self.lay.stem..self.lay.stem + 6].iter().map(|v| v.as_f64()).collect();
        crate::fusion::StemAdapter::from_params(&v)
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(rows: usize, cols: usize, patch_grid: usize) -> Net<f64> {
        let cfg = ModelConfig {
            patch_grid,
            ..Default::default()
        };
        let shape = TraceShape {
            grid_rows: rows,
            grid_cols: cols,
            horizon: 2,
        };
        Net::new(&cfg, shape).unwrap()
    }

    #[test]
    fn matching_grids_give_each_keypoint_its_own_patch() {
        let n = net(4, 4, 4);
        // Spatial token 1 covers keypoint rows 0..2, columns 2..4.
        assert_eq!(&n.alignment()[4..8], &[2, 3, 6, 7]);
        let mut all = n.alignment().to_vec();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn coarse_patches_are_shared_by_nearby_keypoints() {
        let n = net(4, 4, 2);
        assert_eq!(&n.alignment()[..4], &[0, 0, 0, 0]);
        assert_eq!(&n.alignment()[12..], &[3, 3, 3, 3]);
    }
}

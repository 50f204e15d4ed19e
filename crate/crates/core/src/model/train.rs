use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::net::{CondInput, Net};
use super::patch::patchify_values;
use super::{ModelConfig, TraceShape};
use crate::error::{Error, Result};
use crate::fusion::{encode_text_len, DepthInput, FeatureProvider, StubV1};
use crate::linalg::{cast, Real};
use crate::sample::TraceSample;
use crate::trace::{increments_from_trace, NormStats, TraceIncrements};

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VALID: u64 = 2;
const VALID_ITEMS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub cond_dropout_prob: f64,
    pub precision: Precision,
    pub optimizer: Optimizer,
    /// Momentum for `sgd-momentum`; first-moment decay for `adam`.
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-4,
            steps: 5000,
            seed: 0,
            cond_dropout_prob: 0.1,
            precision: Precision::Single,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            grad_clip: 1.0,
            log_every: 100,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config(format!("cond_dropout_prob {} outside [0, 1]", self.cond_dropout_prob)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and grad_clip non-negative".into()));
        }
        self.model.validate()
    }
}

/// One featurized training sample. Streams A and B are frozen; the depth
/// stream is recomputed through the trainable stem on every pass.
#[derive(Debug, Clone)]
pub struct TrainItem<R> {
    a: Vec<R>,
    b: Vec<R>,
    depth: DepthInput<R>,
    /// Mean raw text embedding of each instruction.
    texts: Vec<Vec<R>>,
    /// Standardized increments in token layout.
    x1: Vec<R>,
    /// 1 where the value counts toward the loss, 0 for missing depth.
    mask: Vec<R>,
}

impl<R: Real> TrainItem<R> {
    fn cast_from(it: &TrainItem<f64>) -> Self {
        Self {
            a: cast(&it.a),
            b: cast(&it.b),
            depth: DepthInput {
                n_tokens: it.depth.n_tokens,
                patch: it.depth.patch.clone(),
                value: cast(&it.depth.value),
                inv_count: cast(&it.depth.inv_count),
            },
            texts: it.texts.iter().map(|t| cast(t)).collect(),
            x1: cast(&it.x1),
            mask: cast(&it.mask),
        }
    }

    pub fn num_instructions(&self) -> usize {
        self.texts.len()
    }

    pub fn target(&self) -> &[R] {
        &self.x1
    }
}

/// Featurized corpus with its normalization statistics.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub shape: TraceShape,
    pub stats: NormStats,
    pub items: Vec<TrainItem<f64>>,
}

impl TrainSet {
    /// Featurizes `samples` for `model`. Every sample must share one grid,
    /// horizon and image size.
    pub fn new(samples: &[TraceSample], model: &ModelConfig) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyTrace)?;
        let grid = *first.trace.grid();
        let shape = TraceShape {
            grid_rows: grid.rows,
            grid_cols: grid.cols,
            horizon: first.trace.horizon(),
        };
        // Validates the model against the shape before featurizing.
        Net::<f64>::new(model, shape)?;
        let stub = StubV1::new(model.patch_grid)?;
        let incs: Vec<TraceIncrements> = samples
            .iter()
            .map(|s| {
                if *s.trace.grid() != grid || s.trace.horizon() != shape.horizon {
                    return Err(Error::ShapeMismatch(format!(
                        "sample {} does not share the corpus grid and horizon",
                        s.source_id
                    )));
                }
                increments_from_trace(&s.trace)
            })
            .collect::<Result<_>>()?;
        let stats = NormStats::from_corpus(&incs);
        let items = samples
            .par_iter()
            .zip(incs.par_iter())
            .map(|(s, inc)| featurize(&stub, model, shape, &stats, s, inc))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shape, stats, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn featurize(
    stub: &StubV1,
    model: &ModelConfig,
    shape: TraceShape,
    stats: &NormStats,
    s: &TraceSample,
    inc: &TraceIncrements,
) -> Result<TrainItem<f64>> {
    let [a, b] = stub.encode_rgb(&s.image)?;
    let depth = stub.prepare_depth::<f64>(&s.depth)?;
    let texts = s
        .instructions
        .iter()
        .map(|t| encode_text_len(t, model.text_len).mean_valid())
        .collect();
    let (rows, cols, l) = (shape.grid_rows, shape.grid_cols, shape.horizon);
    let x1 = patchify_values(&inc.standardized(stats), rows, cols, l)?;
    let mask_vals: Vec<f64> = (0..inc.num_keypoints() * l)
        .flat_map(|i| [1.0, 1.0, if inc.z_valid_at(i) { 1.0 } else { 0.0 }])
        .collect();
    let mask = patchify_values(&mask_vals, rows, cols, l)?;
    Ok(TrainItem {
        a: a.tokens,
        b: b.tokens,
        depth,
        texts,
        x1,
        mask,
    })
}

/// Random quantities of one batch element.
#[derive(Debug, Clone)]
pub(crate) struct Draw {
    pub item: usize,
    pub tau: f64,
    pub noise: Vec<f64>,
    pub drop: bool,
    pub instruction: usize,
}

/// Masked mean squared error between a predicted velocity and `x1 - noise`.
pub fn flow_matching_loss(pred: &[f64], x1: &[f64], noise: &[f64], mask: &[f64]) -> Result<f64> {
    if pred.len() != x1.len() || x1.len() != noise.len() || noise.len() != mask.len() {
        return Err(Error::ShapeMismatch("loss inputs differ in length".into()));
    }
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        sum += mask[i] * (pred[i] - (x1[i] - noise[i])).powi(2);
        n += mask[i];
    }
    Ok(if n > 0.0 { sum / n } else { 0.0 })
}

pub(crate) fn draw_batch<R: Real>(
    items: &[TrainItem<R>],
    batch: usize,
    drop_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Draw> {
    (0..batch)
        .map(|i| {
            let item = rng.random_range(0..items.len());
            let u: f64 = rng.random();
            let tau = ((i as f64 + u) / batch as f64).min(1.0);
            let noise = (0..items[item].x1.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                })
                .collect();
            let drop = drop_prob > 0.0 && rng.random::<f64>() < drop_prob;
            let instruction = rng.random_range(0..items[item].texts.len().max(1));
            Draw {
                item,
                tau,
                noise,
                drop,
                instruction,
            }
        })
        .collect()
}

/// Loss and its exact gradient for fixed draws. Per-sample passes run in
/// parallel and are summed in batch order, so results do not depend on the
/// thread count.
pub(crate) fn loss_and_grad<R: Real>(
    net: &Net<R>,
    p: &[R],
    items: &[TrainItem<R>],
    draws: &[Draw],
    with_grad: bool,
) -> Result<(f64, Vec<R>)> {
    let total: f64 = draws
        .iter()
        .map(|d| items[d.item].mask.iter().map(|m| m.as_f64()).sum::<f64>())
        .sum();
    let inv = if total > 0.0 { 1.0 / total } else { 0.0 };
    let parts: Vec<(f64, Option<Vec<R>>)> = draws
        .par_iter()
        .map(|d| {
            let it = &items[d.item];
            let zero_text = vec![R::zero(); crate::fusion::D_TEXT];
            let inp = CondInput {
                a: &it.a,
                b: &it.b,
                depth: &it.depth,
                text: it.texts.get(d.instruction).unwrap_or(&zero_text),
                drop: d.drop,
            };
            let (pool, cc) = net.cond_forward(p, &inp);
            let x: Vec<R> = it
                .x1
                .iter()
                .zip(&d.noise)
                .map(|(x1, e)| R::of((1.0 - d.tau) * e + d.tau * x1.as_f64()))
                .collect();
            let (v, cache) = net.core_forward(p, &pool, &x, d.tau);
            let mut loss = 0.0;
            let mut dout = vec![R::zero(); v.len()];
            for i in 0..v.len() {
                let r = v[i].as_f64() - (it.x1[i].as_f64() - d.noise[i]);
                let m = it.mask[i].as_f64();
                loss += m * r * r;
                dout[i] = R::of(2.0 * m * r * inv);
            }
            loss *= inv;
            if !with_grad || !loss.is_finite() {
                return (loss, None);
            }
            let mut g = vec![R::zero(); p.len()];
            let dpool = net.core_backward(p, &pool, &x, &cache, &dout, &mut g);
            net.cond_backward(p, &inp, &cc, &dpool, &mut g);
            (loss, Some(g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![R::zero(); if with_grad { p.len() } else { 0 }];
    for (i, (l, g)) in parts.into_iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        loss += l;
        if let Some(g) = g {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((loss, grad))
}

/// Draws `tau`, noise, dropout and instruction for `batch` (indices into
/// `items`), then returns the masked flow-matching loss and its gradient
/// with respect to every parameter, stem and fusion included.
pub fn si_loss<R: Real>(
    net: &Net<R>,
    params: &[R],
    items: &[TrainItem<R>],
    batch: &[usize],
    drop_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<R>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut draws = draw_batch(items, batch.len(), drop_prob, rng);
    for (d, &i) in draws.iter_mut().zip(batch) {
        d.item = i;
        if d.noise.len() != items[i].x1.len() {
            d.noise.resize(items[i].x1.len(), 0.0);
        }
        d.instruction %= items[i].texts.len().max(1);
    }
    loss_and_grad(net, params, items, &draws, true)
}

struct OptState<R> {
    m: Vec<R>,
    v: Vec<R>,
    t: i32,
}

fn apply_update<R: Real>(cfg: &TrainConfig, st: &mut OptState<R>, p: &mut [R], g: &mut [R]) {
    if cfg.grad_clip > 0.0 {
        let norm = g.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = R::of(cfg.grad_clip / norm);
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    let lr = cfg.learning_rate;
    st.t += 1;
    match cfg.optimizer {
        Optimizer::Adam => {
            let (b1, b2, eps) = (cfg.momentum, 0.999, 1e-8);
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - f64::powi(b2, st.t);
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let m = b1 * st.m[i].as_f64() + (1.0 - b1) * gi;
                let v = b2 * st.v[i].as_f64() + (1.0 - b2) * gi * gi;
                st.m[i] = R::of(m);
                st.v[i] = R::of(v);
                p[i] -= R::of(lr * (m / c1) / ((v / c2).sqrt() + eps));
            }
        }
        Optimizer::SgdMomentum => {
            for i in 0..p.len() {
                let m = cfg.momentum * st.m[i].as_f64() + g[i].as_f64();
                st.m[i] = R::of(m);
                p[i] -= R::of(lr * m);
            }
        }
    }
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// `(step, batch loss)` every `log_every` steps and at the last step.
    pub losses: Vec<(usize, f64)>,
    /// Loss on a fixed held-out draw before the first and after the last step.
    pub validation_initial: f64,
    pub validation_final: f64,
}

/// A failed run, with the parameters reached before the failing step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub partial: Option<Checkpoint>,
}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for TrainAbort {}

/// Trains at the precision named in `cfg`.
pub fn train(set: &TrainSet, cfg: &TrainConfig) -> std::result::Result<TrainRun, TrainAbort> {
    match cfg.precision {
        Precision::Single => train_typed::<f32>(set, cfg),
        Precision::Double => train_typed::<f64>(set, cfg),
    }
}

pub fn train_typed<R: Real>(set: &TrainSet, cfg: &TrainConfig) -> std::result::Result<TrainRun, TrainAbort> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyTrace.into());
    }
    let net = Net::<R>::new(&cfg.model, set.shape)?;
    let items: Vec<TrainItem<R>> = set.items.iter().map(TrainItem::cast_from).collect();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut p = net.init_params(&mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_TRAIN);
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed);
    vrng.set_stream(STREAM_VALID);
    let mut vdraws = draw_batch(&items, VALID_ITEMS.min(items.len().max(8)), 0.0, &mut vrng);
    for (i, d) in vdraws.iter_mut().enumerate() {
        // Cover the corpus in order rather than with replacement.
        d.item = i % items.len();
        d.noise.resize(items[d.item].x1.len(), 0.0);
        d.instruction %= items[d.item].texts.len().max(1);
    }
    let validation_initial = loss_and_grad(&net, &p, &items, &vdraws, false)?.0;
    let make_ck = |p: &[R], steps: usize| Checkpoint {
        model: cfg.model.clone(),
        train: cfg.clone(),
        shape: set.shape,
        stats: set.stats,
        steps,
        params: p.iter().map(|v| v.as_f64() as f32).collect(),
    };
    let mut st = OptState {
        m: vec![R::zero(); p.len()],
        v: vec![R::zero(); p.len()],
        t: 0,
    };
    let mut losses = Vec::new();
    tracing::info!(params = p.len(), items = items.len(), steps = cfg.steps, "training started");
    for step in 0..cfg.steps {
        let draws = draw_batch(&items, cfg.batch_size, cfg.cond_dropout_prob, &mut rng);
        let (loss, mut g) = match loss_and_grad(&net, &p, &items, &draws, true) {
            Ok(v) => v,
            Err(error) => {
                return Err(TrainAbort {
                    error,
                    partial: Some(make_ck(&p, step)),
                })
            }
        };
        apply_update(cfg, &mut st, &mut p, &mut g);
        let last = step + 1 == cfg.steps;
        if last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            tracing::info!(step, loss, "train step");
            losses.push((step, loss));
        }
    }
    let validation_final = loss_and_grad(&net, &p, &items, &vdraws, false)?.0;
    tracing::info!(validation_initial, validation_final, "training finished");
    Ok(TrainRun {
        checkpoint: make_ck(&p, cfg.steps),
        losses,
        validation_initial,
        validation_final,
    })
}

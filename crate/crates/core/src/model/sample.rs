use image::RgbImage;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::Checkpoint;
use super::net::{Net, PooledCond};
use super::patch::unpatchify_values;
use crate::error::{Error, Result};
use crate::fusion::{encode_text_len, CondTokens, FeatureProvider, FusionLayers, StemAdapter};
use crate::sample::DepthMap;
use crate::trace::{trace_from_increments, GridSpec, NormStats, ScreenTrace, TraceIncrements};

/// Explicit Euler from `tau = 0` to `tau = 1` in `steps` uniform steps.
///
/// `field(x, tau, conditional)` returns a velocity. With `guidance == 1`
/// only the conditional field is evaluated; otherwise
/// `v = v_uncond + guidance * (v_cond - v_uncond)`.
pub fn ode_integrate(
    x0: Vec<f64>,
    steps: usize,
    guidance: f64,
    mut field: impl FnMut(&[f64], f64, bool) -> Vec<f64>,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if !(guidance >= 0.0 && guidance.is_finite()) {
        return Err(Error::Config(format!("guidance scale {guidance} must be finite and non-negative")));
    }
    let mut x = x0;
    let h = 1.0 / steps as f64;
    for i in 0..steps {
        let tau = i as f64 / steps as f64;
        let vc = field(&x, tau, true);
        if guidance == 1.0 {
            x.iter_mut().zip(&vc).for_each(|(a, v)| *a += h * v);
        } else {
            let vu = field(&x, tau, false);
            for j in 0..x.len() {
                x[j] += h * (vu[j] + guidance * (vc[j] - vu[j]));
            }
        }
    }
    Ok(x)
}

/// Grid positions with sensor depth at the nearest pixel. Keypoints without
/// a valid reading take the median of the valid ones and are flagged.
pub fn initial_grid(grid: &GridSpec, depth: &DepthMap) -> Result<(Vec<[f64; 3]>, Vec<bool>)> {
    let pos = grid.positions();
    let zs: Vec<Option<f64>> = pos
        .iter()
        .map(|[x, y]| depth.pixel_at(*x, *y).and_then(|(u, v)| depth.valid(u, v)).map(f64::from))
        .collect();
    let mut valid: Vec<f64> = zs.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::AllDepthMissing);
    }
    valid.sort_by(f64::total_cmp);
    let median = valid[valid.len() / 2];
    let pts = pos.iter().zip(&zs).map(|([x, y], z)| [*x, *y, z.unwrap_or(median)]).collect();
    Ok((pts, zs.iter().map(Option::is_some).collect()))
}

/// A loaded checkpoint ready for inference; immutable and shareable.
#[derive(Debug, Clone)]
pub struct Model {
    net: Net<f32>,
    params: Vec<f32>,
    fusion: FusionLayers,
    stem: StemAdapter,
    ck: Checkpoint,
}

impl Model {
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let net = Net::<f32>::new(&ck.model, ck.shape)?;
        if net.num_params() != ck.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {} parameters, its config implies {}",
                ck.params.len(),
                net.num_params()
            )));
        }
        let fusion = net.fusion_layers(&ck.params);
        let stem = net.stem(&ck.params);
        Ok(Self {
            net,
            params: ck.params.clone(),
            fusion,
            stem,
            ck,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ck
    }

    pub fn stats(&self) -> &NormStats {
        &self.ck.stats
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Encodes and fuses one observation and instruction.
    pub fn condition(&self, image: &RgbImage, depth: &DepthMap, instruction: &str) -> Result<CondTokens> {
        let stub = self.net.stub();
        let [a, b] = stub.encode_rgb(image)?;
        let d = stub.encode_depth(depth, &self.stem)?;
        let text = encode_text_len(instruction, self.ck.model.text_len);
        self.fusion.fuse(&[a, b, d], &text)
    }

    pub fn null_condition(&self) -> CondTokens {
        self.fusion.null_tokens(self.net.stub().n_tokens(), self.ck.model.text_len)
    }

    fn velocity(&self, pool: &PooledCond<f32>, x: &[f64], tau: f64) -> Vec<f64> {
        let xf: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        self.net.forward(&self.params, pool, &xf, tau).into_iter().map(f64::from).collect()
    }

    /// Integrates from fresh noise and returns de-standardized increments.
    pub fn ode_sample(&self, cond: &CondTokens, steps: usize, guidance: f64, rng: &mut ChaCha8Rng) -> Result<TraceIncrements> {
        let pool = self.net.pool_tokens(cond)?;
        let null = self.net.pool_tokens(&self.null_condition())?;
        let shape = self.ck.shape;
        let x0: Vec<f64> = (0..shape.num_values())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        let x = ode_integrate(x0, steps, guidance, |x, tau, conditional| {
            self.velocity(if conditional { &pool } else { &null }, x, tau)
        })?;
        let vals = unpatchify_values(&x, shape.grid_rows, shape.grid_cols, shape.horizon)?;
        TraceIncrements::from_standardized(shape.num_keypoints(), shape.horizon, &vals, &self.ck.stats)
    }

    /// End-to-end prediction from one observation. Keypoints whose initial
    /// depth is missing keep a median depth and are flagged invalid in `z`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_trace(
        &self,
        image: &RgbImage,
        depth: &DepthMap,
        instruction: &str,
        steps: usize,
        guidance: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ScreenTrace> {
        let shape = self.ck.shape;
        let grid = GridSpec::new(shape.grid_rows, shape.grid_cols, depth.width(), depth.height())?;
        let (init, ok) = initial_grid(&grid, depth)?;
        let cond = self.condition(image, depth, instruction)?;
        let inc = self.ode_sample(&cond, steps, guidance, rng)?;
        let trace = trace_from_increments(&inc, &init, grid)?;
        if ok.iter().all(|v| *v) {
            return Ok(trace);
        }
        let (grid, frames, points, _) = trace.into_parts();
        let mask = ok.iter().flat_map(|v| std::iter::repeat_n(*v, frames)).collect();
        ScreenTrace::new(grid, frames, points, Some(mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn guidance_one_skips_the_unconditional_pass() {
        let mut uncond_calls = 0;
        let out = ode_integrate(vec![0.0; 3], 10, 1.0, |_, _, c| {
            if !c {
                uncond_calls += 1;
            }
            vec![1.0, 2.0, 3.0]
        })
        .unwrap();
        assert_eq!(uncond_calls, 0);
        for (a, b) in out.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_zero_follows_the_unconditional_field() {
        let out = ode_integrate(vec![0.0; 2], 4, 0.0, |_, _, c| if c { vec![5.0, 5.0] } else { vec![-1.0, 2.0] }).unwrap();
        assert_eq!(out, vec![-1.0, 2.0]);
        let two = ode_integrate(vec![0.0], 1, 2.0, |_, _, c| if c { vec![3.0] } else { vec![1.0] }).unwrap();
        assert_eq!(two, vec![5.0]);
    }

    #[test]
    fn zero_steps_are_rejected() {
        assert!(ode_integrate(vec![0.0], 0, 1.0, |x, _, _| x.to_vec()).is_err());
        assert!(ode_integrate(vec![0.0], 1, -1.0, |x, _, _| x.to_vec()).is_err());
    }

    #[test]
    fn initial_grid_reads_sensor_depth_and_fills_holes() {
        let grid = GridSpec::new(2, 2, 4, 4).unwrap();
        let mut d = DepthMap::filled(4, 4, 1.0);
        // Positions are (0.5, 0.5), (2.5, 0.5), ... -> pixels (1, 1), (3, 1), (1, 3), (3, 3).
        d.data_mut()[4 + 3] = 2.0;
        d.data_mut()[3 * 4 + 1] = f32::NAN;
        let (pts, ok) = initial_grid(&grid, &d).unwrap();
        assert_eq!(pts[1][2], 2.0);
        assert_eq!(ok, vec![true, true, false, true]);
        assert_eq!(pts[2][2], 1.0);
        assert_eq!([pts[3][0], pts[3][1]], [2.5, 2.5]);
    }

    proptest! {
        #[test]
        fn euler_is_exact_for_constant_velocity(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..16),
            steps in 1usize..200,
        ) {
            let x0: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let x1: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let v: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
            let out = ode_integrate(x0, steps, 1.0, |_, _, _| v.clone()).unwrap();
            for (a, b) in out.iter().zip(&x1) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()) * steps as f64);
            }
        }
    }
}

//! Conditioning stack: frozen feature providers for RGB and depth, a hashed
//! text encoder, and the trainable fusion layers that map everything to
//! width-`D` conditioning tokens.
//!
//! A provider turns an `H x W x 3` image into two `N x D_stream` token
//! streams (geometric and semantic) and a depth map into a third stream of
//! semantic width after a trainable 1x1 channel lift. Only `stub-v1` ships.
//! Another provider plugs in by implementing [`FeatureProvider`]; training
//! through its depth stream additionally needs a vector-Jacobian product
//! for the lift, which the model currently takes from the stub.

mod stub;
mod text;

pub use stub::{StubV1, DEPTH_RANGE_M, D_GEOMETRIC, D_SEMANTIC, HIST_BINS, STUB_V1};
pub(crate) use stub::{projection, DepthCache, DepthInput};
pub use text::{encode_text, encode_text_len, TextTokens, DEFAULT_TEXT_LEN, D_TEXT, TEXT_VOCAB};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{col_sum_acc, mm_acc, mm_at_acc, mm_bt_acc};
use crate::sample::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamId {
    RgbGeometric,
    RgbSemantic,
    Depth,
}

/// `N x dim` tokens of one visual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub stream: StreamId,
    pub n_tokens: usize,
    pub dim: usize,
    pub tokens: Vec<f64>,
}

impl FeatureStream {
    pub fn new(stream: StreamId, n_tokens: usize, dim: usize, tokens: Vec<f64>) -> Result<Self> {
        if tokens.len() != n_tokens * dim {
            return Err(Error::ShapeMismatch(format!(
                "stream has {} values, expected {n_tokens} x {dim}",
                tokens.len()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("stream holds non-finite values".into()));
        }
        Ok(Self {
            stream,
            n_tokens,
            dim,
            tokens,
        })
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

/// Trainable 1x1 lift of single-channel depth to three channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StemAdapter {
    pub weight: [f64; 3],
    pub bias: [f64; 3],
}

impl StemAdapter {
    /// Copies the channel three times.
    pub fn identity() -> Self {
        Self {
            weight: [1.0; 3],
            bias: [0.0; 3],
        }
    }

    /// `[w0, w1, w2, b0, b1, b2]`, the layout used in the model's parameters.
    pub fn as_params(&self) -> [f64; 6] {
        let (w, b) = (self.weight, self.bias);
        [w[0], w[1], w[2], b[0], b[1], b[2]]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            weight: [p[0], p[1], p[2]],
            bias: [p[3], p[4], p[5]],
        }
    }
}

pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &'static str;
    /// Side of the square patch grid; `N = patch_grid^2`.
    fn patch_grid(&self) -> usize;
    fn geometric_dim(&self) -> usize;
    fn semantic_dim(&self) -> usize;
    /// Geometric and semantic streams, in that order.
    fn encode_rgb(&self, image: &RgbImage) -> Result<[FeatureStream; 2]>;
    /// Depth stream; missing pixels are ignored.
    fn encode_depth(&self, depth: &DepthMap, stem: &StemAdapter) -> Result<FeatureStream>;

    fn n_tokens(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }
}

pub fn provider_by_name(name: &str, patch_grid: usize) -> Result<Box<dyn FeatureProvider>> {
    match name {
        STUB_V1 => Ok(Box::new(StubV1::new(patch_grid)?)),
        other => Err(Error::UnknownProvider(other.into())),
    }
}

/// Fused conditioning: `N` visual tokens followed by `M` text tokens, all of
/// width `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTokens {
    pub d_model: usize,
    pub n_visual: usize,
    pub n_text: usize,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
    /// Leading text tokens that carry words; the rest are projected nulls.
    pub text_valid: usize,
    /// Set when the conditioning was nulled for a classifier-free pass.
    pub dropout_flag: bool,
}

impl CondTokens {
    pub fn num_tokens(&self) -> usize {
        self.n_visual + self.n_text
    }

    /// Token `i` of the stacked `(N + M) x D` sequence.
    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.d_model;
        if i < self.n_visual {
            &self.visual[i * d..(i + 1) * d]
        } else {
            let j = i - self.n_visual;
            &self.text[j * d..(j + 1) * d]
        }
    }
}

/// Gradients of [`FusionLayers`] parameters and of the input streams.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub vis_w: Vec<f64>,
    pub vis_b: Vec<f64>,
    pub txt_w: Vec<f64>,
    pub txt_b: Vec<f64>,
    /// `N x (D_d + 2 D_s)` gradient of the concatenated streams.
    pub d_concat: Vec<f64>,
}

/// The two trainable projections: concatenated visual streams to `D` and
/// text tokens to `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayers {
    pub d_visual_in: usize,
    pub d_text: usize,
    pub d_model: usize,
    /// `d_visual_in x d_model`, row-major.
    pub vis_w: Vec<f64>,
    pub vis_b: Vec<f64>,
    /// `d_text x d_model`, row-major.
    pub txt_w: Vec<f64>,
    pub txt_b: Vec<f64>,
}

impl FusionLayers {
    pub fn zeros(d_visual_in: usize, d_text: usize, d_model: usize) -> Self {
        Self {
            d_visual_in,
            d_text,
            d_model,
            vis_w: vec![0.0; d_visual_in * d_model],
            vis_b: vec![0.0; d_model],
            txt_w: vec![0.0; d_text * d_model],
            txt_b: vec![0.0; d_model],
        }
    }

    /// Concatenates the streams along the feature axis, checking they agree
    /// on the token count.
    pub fn concat(&self, streams: &[FeatureStream]) -> Result<(usize, Vec<f64>)> {
        let n = streams.first().map_or(0, |s| s.n_tokens);
        if let Some(bad) = streams.iter().find(|s| s.n_tokens != n) {
            return Err(Error::StreamMismatch(format!(
                "{:?} has {} tokens, expected {n}",
                bad.stream, bad.n_tokens
            )));
        }
        let width: usize = streams.iter().map(|s| s.dim).sum();
        if width != self.d_visual_in {
            return Err(Error::ShapeMismatch(format!(
                "streams concatenate to width {width}, projection expects {}",
                self.d_visual_in
            )));
        }
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            for s in streams {
                out.extend_from_slice(s.token(i));
            }
        }
        Ok((n, out))
    }

    pub fn fuse(&self, streams: &[FeatureStream], text: &TextTokens) -> Result<CondTokens> {
        let (n, cat) = self.concat(streams)?;
        let d = self.d_model;
        let mut visual = self.vis_b.repeat(n);
        mm_acc(&cat, &self.vis_w, n, self.d_visual_in, d, &mut visual);
        let mut txt = self.txt_b.repeat(text.len);
        mm_acc(&text.tokens, &self.txt_w, text.len, self.d_text, d, &mut txt);
        Ok(CondTokens {
            d_model: d,
            n_visual: n,
            n_text: text.len,
            visual,
            text: txt,
            text_valid: text.valid,
            dropout_flag: false,
        })
    }

    /// Classifier-free null: zero visual tokens and projected null text.
    pub fn null_tokens(&self, n_visual: usize, text_len: usize) -> CondTokens {
        CondTokens {
            d_model: self.d_model,
            n_visual,
            n_text: text_len,
            visual: vec![0.0; n_visual * self.d_model],
            text: self.txt_b.repeat(text_len),
            text_valid: 0,
            dropout_flag: true,
        }
    }

    /// Reverse pass of [`Self::fuse`] for upstream gradients `d_visual`
    /// (`N x D`) and `d_text` (`M x D`).
    pub fn backward(
        &self,
        streams: &[FeatureStream],
        text: &TextTokens,
        d_visual: &[f64],
        d_text: &[f64],
    ) -> Result<FusionGrads> {
        let (n, cat) = self.concat(streams)?;
        let (d, dv, dt, m) = (self.d_model, self.d_visual_in, self.d_text, text.len);
        let mut g = FusionGrads {
            vis_w: vec![0.0; dv * d],
            vis_b: vec![0.0; d],
            txt_w: vec![0.0; dt * d],
            txt_b: vec![0.0; d],
            d_concat: vec![0.0; n * dv],
        };
        mm_at_acc(&cat, d_visual, n, dv, d, &mut g.vis_w);
        col_sum_acc(d_visual, n, d, &mut g.vis_b);
        mm_bt_acc(d_visual, &self.vis_w, n, d, dv, &mut g.d_concat);
        mm_at_acc(&text.tokens, d_text, m, dt, d, &mut g.txt_w);
        col_sum_acc(d_text, m, d, &mut g.txt_b);
        Ok(g)
    }
}

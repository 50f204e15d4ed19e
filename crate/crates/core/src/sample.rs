//! Observation / trace / language triplets.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::trace::ScreenTrace;

/// Row-major depth image in meters. A value of exactly `0.0` (or any
/// non-finite value) marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "depth buffer has {} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Depth at `(x, y)` or `None` when missing.
    pub fn valid(&self, x: usize, y: usize) -> Option<f32> {
        let d = self.get(x, y);
        is_valid_depth(d).then_some(d)
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Nearest pixel to a screen position using round-half-up, or `None` when
    /// the position falls outside the map.
    pub fn pixel_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let ix = (x + 0.5).floor();
        let iy = (y + 0.5).floor();
        if ix >= 0.0 && iy >= 0.0 && (ix as usize) < self.width && (iy as usize) < self.height {
            Some((ix as usize, iy as usize))
        } else {
            None
        }
    }
}

pub fn is_valid_depth(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

/// One training triplet: reference observation, trace and instructions.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub camera: CameraModel,
    pub trace: ScreenTrace,
    pub instructions: Vec<String>,
    pub source_id: String,
}

impl TraceSample {
    pub fn new(
        image: RgbImage,
        depth: DepthMap,
        camera: CameraModel,
        trace: ScreenTrace,
        instructions: Vec<String>,
        source_id: String,
    ) -> Result<Self> {
        if image.width() as usize != depth.width() || image.height() as usize != depth.height() {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, depth is {}x{}",
                image.width(),
                image.height(),
                depth.width(),
                depth.height()
            )));
        }
        let g = trace.grid();
        if g.image_width != depth.width() || g.image_height != depth.height() {
            return Err(Error::ShapeMismatch(format!(
                "trace grid is laid over a {}x{} image, observation is {}x{}",
                g.image_width,
                g.image_height,
                depth.width(),
                depth.height()
            )));
        }
        if instructions.is_empty() || instructions.len() > 3 {
            return Err(Error::Config(format!(
                "a sample carries 1 to 3 instructions, got {}",
                instructions.len()
            )));
        }
        Ok(Self {
            image,
            depth,
            camera,
            trace,
            instructions,
            source_id,
        })
    }
}

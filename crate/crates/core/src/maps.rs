//! Dense per-pixel containers shared by the sweep, the losses and the evaluators.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Perpendicular depth in meters with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// All pixels invalid.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// All pixels valid with the given values.
    pub fn dense(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::contract(format!(
                "dense depth map: {} values for {width}x{height}",
                depth.len()
            )));
        }
        Ok(Self {
            width,
            height,
            valid: vec![true; depth.len()],
            depth,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut m = Self::empty(width, height);
        for v in 0..height {
            for u in 0..width {
                if let Some(d) = f(u, v) {
                    let i = v * width + u;
                    m.depth[i] = d;
                    m.valid[i] = true;
                }
            }
        }
        m
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    /// Depth at `(u, v)` if valid.
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = self.index(u, v);
        self.valid[i].then_some(self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Checks that every valid pixel carries a finite positive depth.
    pub fn validate(&self) -> Result<()> {
        if self.depth.len() != self.len() || self.valid.len() != self.len() {
            return Err(Error::contract("depth map buffers do not match its dimensions"));
        }
        for (i, (&d, &ok)) in self.depth.iter().zip(&self.valid).enumerate() {
            if ok && !(d > 0.0 && d.is_finite()) {
                return Err(Error::domain(format!(
                    "depth {d} at pixel ({}, {}) is not positive",
                    i % self.width,
                    i / self.width
                )));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn crop(&self, u0: usize, v0: usize, width: usize, height: usize) -> DepthMap {
        let mut out = DepthMap::empty(width, height);
        for v in 0..height {
            for u in 0..width {
                let src = self.index(u0 + u, v0 + v);
                let dst = v * width + u;
                out.depth[dst] = self.depth[src];
                out.valid[dst] = self.valid[src];
            }
        }
        out
    }

    /// 2x average pooling; an output pixel is valid only when all four inputs are.
    pub fn avg_pool2(&self) -> DepthMap {
        let (w, h) = (pooled_len(self.width), pooled_len(self.height));
        DepthMap::from_fn(w, h, |u, v| {
            let mut sum = 0.0;
            for (du, dv) in pool_taps(self.width, self.height, u, v) {
                sum += self.get(du, dv)?;
            }
            Some(sum / pool_taps(self.width, self.height, u, v).count() as f64)
        })
    }
}

/// Output length of one 2x pooling step (never below 1).
pub(crate) fn pooled_len(n: usize) -> usize {
    (n / 2).max(1)
}

/// Input pixels averaged into output pixel `(u, v)` by a 2x pooling step.
pub(crate) fn pool_taps(width: usize, height: usize, u: usize, v: usize) -> impl Iterator<Item = (usize, usize)> {
    let us: &[usize] = if width >= 2 { &[0, 1] } else { &[0] };
    let vs: &[usize] = if height >= 2 { &[0, 1] } else { &[0] };
    let (bu, bv) = (if width >= 2 { 2 * u } else { u }, if height >= 2 { 2 * v } else { v });
    vs.iter().flat_map(move |&dv| us.iter().map(move |&du| (bu + du, bv + dv)))
}

/// Unit surface normals in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            normals: vec![Vec3::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn get(&self, u: usize, v: usize) -> Option<Vec3> {
        let i = self.index(u, v);
        self.valid[i].then_some(self.normals[i])
    }

    pub fn crop(&self, u0: usize, v0: usize, width: usize, height: usize) -> NormalMap {
        let mut out = NormalMap::empty(width, height);
        for v in 0..height {
            for u in 0..width {
                let src = self.index(u0 + u, v0 + v);
                out.normals[v * width + u] = self.normals[src];
                out.valid[v * width + u] = self.valid[src];
            }
        }
        out
    }
}

/// Grayscale image with intensities nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::contract("image buffer does not match its dimensions"));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    /// Sample with coordinates clamped to the image.
    #[inline]
    pub fn get_clamped(&self, u: isize, v: isize) -> f64 {
        let u = u.clamp(0, self.width as isize - 1) as usize;
        let v = v.clamp(0, self.height as isize - 1) as usize;
        self.data[v * self.width + u]
    }
}

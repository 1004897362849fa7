//! Constellation rasterization on a 7x7 complex plane.
//!
//! Pixel `(row, col)` covers a half-open square; row 0 is the top of the
//! plane (largest imaginary part) and column 0 its left edge. Centroids sit
//! at pixel centers:
//!
//! ```text
//! x_col = -extent + (col + 0.5) * pitch
//! y_row =  extent - (row + 0.5) * pitch
//! ```
//!
//! The enhanced renderer accumulates `P_k * exp(-alpha * d)` over samples
//! within `4 / alpha` of each centroid, with `P_k = |s_k|^2`. Samples are
//! sorted before accumulation so the output does not depend on input order.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no samples fall inside the plane")]
    EmptyImage,
    #[error("decay rate must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("decay rates must be strictly increasing, got {0:?}")]
    AlphaOrder([f64; 3]),
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("image tensor of shape {0:?} cannot be exported")]
    BadImageShape(Vec<usize>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    /// Out-of-plane samples are moved onto the nearest boundary point.
    Clamp,
    /// Out-of-plane samples are ignored.
    Drop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Half-width of the plane per axis.
    pub extent: f64,
    pub resolution: usize,
    pub clip: ClipPolicy,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            extent: 3.5,
            resolution: 224,
            clip: ClipPolicy::Clamp,
        }
    }
}

impl GridSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        GridSpec {
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.resolution < 8 {
            return Err(RenderError::BadGrid(format!("resolution {} < 8", self.resolution)));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(RenderError::BadGrid(format!("extent {}", self.extent)));
        }
        Ok(())
    }

    pub fn pitch(&self) -> f64 {
        2.0 * self.extent / self.resolution as f64
    }

    pub fn centroid(&self, row: usize, col: usize) -> (f64, f64) {
        let w = self.pitch();
        (-self.extent + (col as f64 + 0.5) * w, self.extent - (row as f64 + 0.5) * w)
    }

    /// Applies the clip policy; `None` means the sample is dropped.
    fn place(&self, s: Complex64) -> Option<Complex64> {
        let e = self.extent;
        let inside = (-e..=e).contains(&s.re) && (-e..=e).contains(&s.im);
        match (inside, self.clip) {
            (true, _) => Some(s),
            (false, ClipPolicy::Drop) => None,
            (false, ClipPolicy::Clamp) => Some(Complex64::new(s.re.clamp(-e, e), s.im.clamp(-e, e))),
        }
    }

    fn bin(&self, s: Complex64) -> (usize, usize) {
        let w = self.pitch();
        let last = self.resolution - 1;
        let col = (((s.re + self.extent) / w).floor().max(0.0) as usize).min(last);
        let row = (((self.extent - s.im) / w).floor().max(0.0) as usize).min(last);
        (row, col)
    }

    fn placed(&self, samples: &[Complex64]) -> Result<Vec<Complex64>, RenderError> {
        self.validate()?;
        let mut pts: Vec<Complex64> = samples.iter().filter_map(|&s| self.place(s)).collect();
        if pts.is_empty() {
            return Err(RenderError::EmptyImage);
        }
        pts.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        Ok(pts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// `P_k = |s_k|^2` of the placed sample.
    Instantaneous,
    /// Every sample weighs 1.
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub alphas: [f64; 3],
    pub power_mode: PowerMode,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            alphas: [20.0, 40.0, 80.0],
            power_mode: PowerMode::Instantaneous,
        }
    }
}

impl DecayConfig {
    pub fn new(alphas: [f64; 3], power_mode: PowerMode) -> Result<Self, RenderError> {
        let c = DecayConfig { alphas, power_mode };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        for &a in &self.alphas {
            check_alpha(a)?;
        }
        let [a1, a2, a3] = self.alphas;
        if !(a1 < a2 && a2 < a3) {
            return Err(RenderError::AlphaOrder(self.alphas));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), RenderError> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(RenderError::BadAlpha(alpha))
    }
}

fn to_image(values: Vec<f64>, res: usize) -> Result<Tensor, RenderError> {
    Ok(Tensor::new(vec![res, res], values.into_iter().map(|v| v as f32).collect())?)
}

/// Per-pixel sample counts divided by the maximum count.
pub fn render_gray(samples: &[Complex64], grid: &GridSpec) -> Result<Tensor, RenderError> {
    let pts = grid.placed(samples)?;
    let res = grid.resolution;
    let mut counts = vec![0u64; res * res];
    for s in pts {
        let (r, c) = grid.bin(s);
        counts[r * res + c] += 1;
    }
    let max = *counts.iter().max().expect("non-empty") as f64;
    to_image(counts.into_iter().map(|c| c as f64 / max).collect(), res)
}

/// Un-normalized exponential-decay accumulation.
pub fn enhanced_raw(samples: &[Complex64], grid: &GridSpec, alpha: f64, power: PowerMode) -> Result<Vec<f64>, RenderError> {
    check_alpha(alpha)?;
    let pts = grid.placed(samples)?;
    let res = grid.resolution;
    let w = grid.pitch();
    let e = grid.extent;
    let radius = 4.0 / alpha;
    let span = |center: f64| -> (usize, usize) {
        // pixel centers within [center - radius, center + radius], in index units
        let lo = ((center - radius) / w - 0.5).ceil().max(0.0);
        let hi = ((center + radius) / w - 0.5).floor().min((res - 1) as f64);
        (lo as usize, hi.max(lo - 1.0).max(-1.0) as usize)
    };
    let mut acc = vec![0f64; res * res];
    for s in pts {
        let p = match power {
            PowerMode::Instantaneous => s.norm_sqr(),
            PowerMode::Unit => 1.0,
        };
        if p == 0.0 {
            continue;
        }
        let (c0, c1) = span(s.re + e);
        let (r0, r1) = span(e - s.im);
        if c0 > c1 || r0 > r1 || c0 >= res || r0 >= res {
            continue;
        }
        for row in r0..=r1 {
            let (_, y) = grid.centroid(row, 0);
            let dy = s.im - y;
            for col in c0..=c1 {
                let (x, _) = grid.centroid(0, col);
                let dx = s.re - x;
                let d = (dx * dx + dy * dy).sqrt();
                if d <= radius {
                    acc[row * res + col] += p * (-alpha * d).exp();
                }
            }
        }
    }
    Ok(acc)
}

/// Enhanced grayscale image, min-max normalized to [0, 1].
pub fn render_enhanced(samples: &[Complex64], grid: &GridSpec, alpha: f64, power: PowerMode) -> Result<Tensor, RenderError> {
    let mut raw = enhanced_raw(samples, grid, alpha, power)?;
    crate::modulation::min_max_normalize(&mut raw);
    to_image(raw, grid.resolution)
}

/// Three enhanced images with increasing decay rates, stacked as channels.
pub fn render_rgb(samples: &[Complex64], grid: &GridSpec, decay: &DecayConfig) -> Result<Tensor, RenderError> {
    decay.validate()?;
    let res = grid.resolution;
    let mut data = Vec::with_capacity(3 * res * res);
    for &alpha in &decay.alphas {
        data.extend_from_slice(render_enhanced(samples, grid, alpha, decay.power_mode)?.data());
    }
    Ok(Tensor::new(vec![3, res, res], data)?)
}

/// Binary PPM (P6). Accepts `[H, W]` (replicated to gray) or `[3, H, W]`.
/// Values are clamped to [0, 1] and quantized as `floor(v * 255 + 0.5)`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, RenderError> {
    let (channels, h, w) = match image.shape() {
        &[h, w] => (1, h, w),
        &[3, h, w] => (3, h, w),
        s => return Err(RenderError::BadImageShape(s.to_vec())),
    };
    let plane = h * w;
    let q = |v: f32| -> u8 { (f64::from(v).clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8 };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let src = if channels == 1 { i } else { c * plane + i };
            out.push(q(d[src]));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), RenderError> {
    let bytes = encode_ppm(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Places `[C, H, W]` images side by side.
pub fn hstack(images: &[&Tensor]) -> Result<Tensor, RenderError> {
    let first = images.first().ok_or_else(|| RenderError::BadImageShape(vec![]))?;
    let (c, h) = match first.shape() {
        &[c, h, _] => (c, h),
        s => return Err(RenderError::BadImageShape(s.to_vec())),
    };
    for im in images {
        if im.rank() != 3 || im.shape()[0] != c || im.shape()[1] != h {
            return Err(RenderError::BadImageShape(im.shape().to_vec()));
        }
    }
    let total_w: usize = images.iter().map(|im| im.shape()[2]).sum();
    let mut data = Vec::with_capacity(c * h * total_w);
    for ch in 0..c {
        for row in 0..h {
            for im in images {
                let w = im.shape()[2];
                let start = (ch * h + row) * w;
                data.extend_from_slice(&im.data()[start..start + w]);
            }
        }
    }
    Ok(Tensor::new(vec![c, h, total_w], data)?)
}

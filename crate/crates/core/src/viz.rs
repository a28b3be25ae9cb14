//! Optical-flow style colour coding of direction fields.
//!
//! The angle `atan2(G₁, G₀)` picks a colour on the Middlebury flow wheel
//! (55 segments: red, yellow, green, cyan, blue, magenta) and the magnitude
//! blends that colour with white, so a zero vector is white and magnitudes at
//! or above `max_magnitude` get the fully saturated wheel colour.

use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The flow colour wheel as RGB in `[0, 1]`, one entry per segment step.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramp = |i: usize, n: usize| i as f64 / n as f64;
    let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
    wheel.extend((0..ry).map(|i| [1.0, ramp(i, ry), 0.0]));
    wheel.extend((0..yg).map(|i| [1.0 - ramp(i, yg), 1.0, 0.0]));
    wheel.extend((0..gc).map(|i| [0.0, 1.0, ramp(i, gc)]));
    wheel.extend((0..cb).map(|i| [0.0, 1.0 - ramp(i, cb), 1.0]));
    wheel.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 1.0]));
    wheel.extend((0..mr).map(|i| [1.0, 0.0, 1.0 - ramp(i, mr)]));
    wheel
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowColorMap {
    max_magnitude: f64,
    wheel: Vec<[f64; 3]>,
}

impl FlowColorMap {
    pub fn new(max_magnitude: f64) -> Result<Self> {
        if !(max_magnitude > 0.0) || !max_magnitude.is_finite() {
            return Err(Error::config(format!("max magnitude {max_magnitude} must be positive")));
        }
        Ok(FlowColorMap { max_magnitude, wheel: color_wheel() })
    }

    pub fn max_magnitude(&self) -> f64 {
        self.max_magnitude
    }

    /// Continuous wheel position in `[0, wheel length)` for a vector angle.
    pub fn wheel_position(&self, g0: f64, g1: f64) -> f64 {
        let n = self.wheel.len() as f64;
        let turn = (g1.atan2(g0) + PI) / (2.0 * PI);
        (turn * n) % n
    }

    /// Saturation in `[0, 1]`.
    pub fn saturation(&self, g0: f64, g1: f64) -> f64 {
        (g0.hypot(g1) / self.max_magnitude).min(1.0)
    }

    pub fn color(&self, g0: f64, g1: f64) -> [u8; 3] {
        let s = self.saturation(g0, g1);
        if s == 0.0 {
            return [255; 3];
        }
        let pos = self.wheel_position(g0, g1);
        let k0 = pos.floor() as usize % self.wheel.len();
        let k1 = (k0 + 1) % self.wheel.len();
        let f = pos - pos.floor();
        let mut out = [0u8; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let c = (1.0 - f) * self.wheel[k0][ch] + f * self.wheel[k1][ch];
            *o = (255.0 * (1.0 - s * (1.0 - c))).round() as u8;
        }
        out
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Binary portable pixmap (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&raw))
            .map_err(|e| Error::Numeric(format!("png encoding failed: {e}")))?;
        Ok(out)
    }

    /// Write as PNG if the extension is `.png`, otherwise as PPM.
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let bytes = if is_png { self.to_png()? } else { self.to_ppm() };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// Colour-code frame `frame` of a 2-channel field.
pub fn flow_color_encode(field: &Tensor4, frame: usize, cmap: &FlowColorMap) -> Result<RgbImage> {
    let (n, h, w, c) = field.dims();
    if c != 2 {
        return Err(Error::shape(format!("field needs 2 channels, got {c}")));
    }
    if frame >= n {
        return Err(Error::config(format!("frame {frame} out of range for {n} frames")));
    }
    if !field.is_finite() {
        return Err(Error::Numeric("field contains non-finite values".into()));
    }
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let g = field.pixel(frame, y, x);
            pixels.push(cmap.color(g[0], g[1]));
        }
    }
    Ok(RgbImage { width: w, height: h, pixels })
}

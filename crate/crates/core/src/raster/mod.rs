//! Dense raster maps and the operators every other module builds on.
//!
//! A [`RasterMap`] stores `height` rows of `width` pixels with `channels`
//! interleaved values per pixel, in double precision. The same container
//! holds images, feature maps, depth maps and per-pixel loss maps.

mod io;
pub(crate) mod stencil;

pub use io::{read_pfm, read_pgm, write_csv, write_pfm, write_pgm};

use crate::{Error, Result};

/// Row-major grid of `width * height * channels` finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterMap {
    /// All-zero map.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::constant(width, height, channels, 0.0)
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(value.is_finite(), "constant map value must be finite");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Wraps an interleaved buffer, checking its length and that every value is finite.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values for a {width}x{height}x{channels} map",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a map by evaluating `f(x, y, channel)` at every entry.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_vec(width, height, channels, data).expect("from_fn produced a non-finite value")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer. Callers must keep the values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    /// All channel values of one pixel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &RasterMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_dims(&self, other: &RasterMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_shape(&self, other: &RasterMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` to every value. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> RasterMap {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        RasterMap { data, ..*self }
    }

    pub fn scale(&self, k: f64) -> RasterMap {
        self.map(|v| v * k)
    }

    /// Copy of a single channel as a one-channel map.
    pub fn channel(&self, c: usize) -> RasterMap {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        RasterMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Sum of absolute values over channels, as a one-channel map.
    pub fn channel_sum_abs(&self) -> RasterMap {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().map(|v| v.abs()).sum())
            .collect();
        RasterMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Sum over channels, as a one-channel map.
    pub fn channel_sum(&self) -> RasterMap {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum())
            .collect();
        RasterMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// Per-pixel boolean mask, same layout as a one-channel map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} entries for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub(crate) fn check_dims(&self, map: &RasterMap, what: &str) -> Result<()> {
        if self.width == map.width() && self.height == map.height() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: mask {}x{} vs map {}x{}",
                self.width,
                self.height,
                map.width(),
                map.height()
            )))
        }
    }
}

/// Interpolated value and its spatial derivatives at a continuous location.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub value: Vec<f64>,
    pub valid: bool,
    pub d_du: Vec<f64>,
    pub d_dv: Vec<f64>,
}

/// Bilinear interpolation of `map` at `(u, v)` with the analytic derivatives
/// of the interpolant.
///
/// `valid` is false when the 2x2 footprint leaves `[0, W-1] x [0, H-1]`;
/// values and derivatives are then zero.
pub fn bilinear_sample(map: &RasterMap, u: f64, v: f64) -> SampleResult {
    let c = map.channels();
    let mut out = SampleResult {
        value: vec![0.0; c],
        valid: false,
        d_du: vec![0.0; c],
        d_dv: vec![0.0; c],
    };
    out.valid = sample_into(map, u, v, &mut out.value, &mut out.d_du, &mut out.d_dv);
    out
}

/// Allocation-free form of [`bilinear_sample`]. Each slice must hold
/// `map.channels()` values. Returns the validity flag.
pub fn sample_into(
    map: &RasterMap,
    u: f64,
    v: f64,
    value: &mut [f64],
    d_du: &mut [f64],
    d_dv: &mut [f64],
) -> bool {
    let (w, h) = (map.width(), map.height());
    let inside = w > 0
        && h > 0
        && u.is_finite()
        && v.is_finite()
        && u >= 0.0
        && v >= 0.0
        && u <= (w - 1) as f64
        && v <= (h - 1) as f64;
    if !inside {
        value.fill(0.0);
        d_du.fill(0.0);
        d_dv.fill(0.0);
        return false;
    }
    let (x0, x1, fx) = cell(u, w);
    let (y0, y1, fy) = cell(v, h);
    let has_x = x1 != x0;
    let has_y = y1 != y0;
    let data = map.data();
    let ch = map.channels();
    let i00 = (y0 * w + x0) * ch;
    let i01 = (y0 * w + x1) * ch;
    let i10 = (y1 * w + x0) * ch;
    let i11 = (y1 * w + x1) * ch;
    for c in 0..ch {
        let a = data[i00 + c];
        let b = data[i01 + c];
        let cc = data[i10 + c];
        let d = data[i11 + c];
        let top = a + fx * (b - a);
        let bottom = cc + fx * (d - cc);
        value[c] = top + fy * (bottom - top);
        d_du[c] = if has_x {
            (1.0 - fy) * (b - a) + fy * (d - cc)
        } else {
            0.0
        };
        d_dv[c] = if has_y { bottom - top } else { 0.0 };
    }
    true
}

// Lower cell index, upper index and fractional weight along one axis.
// Integer coordinates on the last row/column use the cell to their left.
#[inline]
fn cell(t: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (t.floor() as usize).min(n - 2);
    (i0, i0 + 1, t - i0 as f64)
}

fn require_min_dims(map: &RasterMap, min: usize) -> Result<()> {
    if map.width() < min || map.height() < min {
        return Err(Error::DimensionTooSmall {
            width: map.width(),
            height: map.height(),
            min,
        });
    }
    Ok(())
}

/// Horizontal and vertical derivatives: central differences in the interior,
/// one-sided differences on the border.
pub fn grad_xy(map: &RasterMap) -> Result<(RasterMap, RasterMap)> {
    require_min_dims(map, 3)?;
    let (w, h, ch) = (map.width(), map.height(), map.channels());
    let mut gx = RasterMap::zeros(w, h, ch);
    let mut gy = RasterMap::zeros(w, h, ch);
    for y in 0..h {
        let ty = stencil::d1_taps(y, h);
        for x in 0..w {
            let tx = stencil::d1_taps(x, w);
            for c in 0..ch {
                let sx: f64 = tx
                    .iter()
                    .map(|&(o, k)| k * map.get(offset(x, o), y, c))
                    .sum();
                let sy: f64 = ty
                    .iter()
                    .map(|&(o, k)| k * map.get(x, offset(y, o), c))
                    .sum();
                gx.set(x, y, c, sx);
                gy.set(x, y, c, sy);
            }
        }
    }
    Ok((gx, gy))
}

/// First-order operator `d/dx + d/dy`, per channel.
pub fn grad1(map: &RasterMap) -> Result<RasterMap> {
    require_min_dims(map, 3)?;
    Ok(apply_stencil(map, stencil::grad1_taps))
}

/// Second-order operator `d2/dx2 + 2 d2/dxdy + d2/dy2`, per channel.
///
/// Defined on interior pixels; border pixels are zero.
pub fn grad2(map: &RasterMap) -> Result<RasterMap> {
    require_min_dims(map, 3)?;
    Ok(apply_stencil(map, stencil::grad2_taps))
}

fn apply_stencil(map: &RasterMap, taps: fn(usize, usize, usize, usize) -> stencil::Taps) -> RasterMap {
    let (w, h, ch) = (map.width(), map.height(), map.channels());
    let mut out = RasterMap::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let t = taps(x, y, w, h);
            for c in 0..ch {
                let s: f64 = t
                    .iter()
                    .map(|&(dx, dy, k)| k * map.get(offset(x, dx), offset(y, dy), c))
                    .sum();
                out.set(x, y, c, s);
            }
        }
    }
    out
}

/// Mirror index for reflection padding (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

#[inline]
pub(crate) fn offset(i: usize, o: isize) -> usize {
    (i as isize + o) as usize
}

/// 2x2 box average to `floor(W/2) x floor(H/2)`.
pub fn downsample2(map: &RasterMap) -> Result<RasterMap> {
    require_min_dims(map, 2)?;
    let (w, h, ch) = (map.width() / 2, map.height() / 2, map.channels());
    Ok(RasterMap::from_fn(w, h, ch, |x, y, c| {
        0.25 * (map.get(2 * x, 2 * y, c)
            + map.get(2 * x + 1, 2 * y, c)
            + map.get(2 * x, 2 * y + 1, c)
            + map.get(2 * x + 1, 2 * y + 1, c))
    }))
}

/// Chain of `levels` maps, level 0 being `map` itself.
pub fn pyramid(map: &RasterMap, levels: usize) -> Result<Vec<RasterMap>> {
    let mut out = vec![map.clone()];
    for _ in 1..levels {
        let next = downsample2(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

//! Toy convolutional autoencoder trained with the single-view loss.
//!
//! Encoder: `conv3x3 -> tanh -> conv3x3 -> tanh`, producing `F` feature
//! channels at input resolution. Decoder: `conv3x3 -> tanh` followed, for
//! each scale `s`, by `s` box downsamplings and a per-scale `conv3x3 ->
//! sigmoid` head. All convolutions use reflection padding. Gradients are
//! derived by hand; tests check them against finite differences.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::losses::{self, LossConfig, LossReport, Term};
use crate::raster::stencil::{self, Taps};
use crate::raster::{self, RasterMap};
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"FMAE1";

/// Layer widths of the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub feature_channels: usize,
    pub scales: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            feature_channels: 16,
            scales: 2,
        }
    }
}

impl ArchSpec {
    pub fn new(in_channels: usize, feature_channels: usize, scales: usize) -> Result<Self> {
        let a = Self {
            in_channels,
            feature_channels,
            scales,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::UnsupportedChannels(self.in_channels));
        }
        if self.feature_channels < 2 {
            return Err(Error::Config(format!(
                "feature_channels must be >= 2, got {}",
                self.feature_channels
            )));
        }
        if !(1..=3).contains(&self.scales) {
            return Err(Error::Config(format!("scales must be 1, 2 or 3, got {}", self.scales)));
        }
        Ok(())
    }

    /// `(in, out)` channel counts: enc1, enc2, dec1, then one head per scale.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let (c, f) = (self.in_channels, self.feature_channels);
        let mut v = vec![(c, f), (f, f), (f, f)];
        v.extend(std::iter::repeat_n((f, c), self.scales));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| o * i * 9 + o).sum()
    }
}

/// Location of one convolution inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub name: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Start of the `out x in x 3 x 3` kernel block.
    pub weights: usize,
    /// Start of the `out` biases.
    pub bias: usize,
}

impl LayerSlot {
    pub fn end(&self) -> usize {
        self.bias + self.out_channels
    }
}

const HEAD_NAMES: [&str; 3] = ["dec2_s0", "dec2_s1", "dec2_s2"];

/// Weights and biases of every layer, stored as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams {
    arch: ArchSpec,
    layers: Vec<LayerSlot>,
    data: Vec<f64>,
}

fn layout(arch: &ArchSpec) -> Vec<LayerSlot> {
    let names = ["enc1", "enc2", "dec1"];
    let mut at = 0;
    arch.layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (cin, cout))| {
            let name = if i < 3 { names[i] } else { HEAD_NAMES[i - 3] };
            let slot = LayerSlot {
                name,
                in_channels: cin,
                out_channels: cout,
                weights: at,
                bias: at + cout * cin * 9,
            };
            at = slot.end();
            slot
        })
        .collect()
}

impl AutoencoderParams {
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            layers: layout(&arch),
            data: vec![0.0; arch.param_count()],
        })
    }

    /// Glorot-uniform kernels `U(-r, r)`, `r = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in p.layers.clone() {
            let r = (6.0 / (9.0 * (l.in_channels + l.out_channels) as f64)).sqrt();
            for w in &mut p.data[l.weights..l.bias] {
                *w = rng.random_range(-r..r);
            }
        }
        Ok(p)
    }

    pub fn from_vec(arch: ArchSpec, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            arch,
            layers: layout(&arch),
            data,
        })
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<LayerSlot> {
        self.layers.iter().copied().find(|l| l.name == name)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn conv(&self, i: usize) -> ConvRef<'_> {
        let l = self.layers[i];
        ConvRef {
            cin: l.in_channels,
            cout: l.out_channels,
            w: &self.data[l.weights..l.bias],
            b: &self.data[l.bias..l.end()],
        }
    }
}

/// Optimizer and run settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub rng_seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            rng_seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam first and second moments plus the number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut AutoencoderParams, state: &mut AdamState, grads: &[f64], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "Adam sizes: params {}, grads {}, state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.data.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// planar tensors and convolutions

/// Channel-major `c x h x w` tensor.
#[derive(Clone, Debug)]
struct Planes {
    w: usize,
    h: usize,
    c: usize,
    data: Vec<f64>,
}

impl Planes {
    fn zeros(w: usize, h: usize, c: usize) -> Self {
        Self {
            w,
            h,
            c,
            data: vec![0.0; w * h * c],
        }
    }

    fn from_raster(m: &RasterMap) -> Self {
        let (w, h, c) = (m.width(), m.height(), m.channels());
        let mut data = vec![0.0; w * h * c];
        for (i, px) in m.data().chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                data[ch * w * h + i] = *v;
            }
        }
        Self { w, h, c, data }
    }

    fn to_raster(&self) -> RasterMap {
        let n = self.w * self.h;
        let mut data = vec![0.0; n * self.c];
        for ch in 0..self.c {
            for i in 0..n {
                data[i * self.c + ch] = self.data[ch * n + i];
            }
        }
        RasterMap::from_vec(self.w, self.h, self.c, data).expect("finite planar tensor")
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.w * self.h;
        &self.data[c * n..(c + 1) * n]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Reflection-padded copy, `(w + 2) x (h + 2)` per channel.
    fn pad(&self) -> Self {
        let (w, h) = (self.w, self.h);
        let (pw, ph) = (w + 2, h + 2);
        let mut data = vec![0.0; pw * ph * self.c];
        for c in 0..self.c {
            let src = self.plane(c);
            let dst = &mut data[c * pw * ph..(c + 1) * pw * ph];
            for py in 0..ph {
                let y = raster::reflect(py as isize - 1, h);
                for px in 0..pw {
                    let x = raster::reflect(px as isize - 1, w);
                    dst[py * pw + px] = src[y * w + x];
                }
            }
        }
        Self {
            w: pw,
            h: ph,
            c: self.c,
            data,
        }
    }

    fn downsample(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut out = Self::zeros(w, h, self.c);
        for c in 0..self.c {
            let src = self.plane(c);
            for y in 0..h {
                for x in 0..w {
                    let i = 2 * y * self.w + 2 * x;
                    out.data[c * w * h + y * w + x] =
                        0.25 * (src[i] + src[i + 1] + src[i + self.w] + src[i + self.w + 1]);
                }
            }
        }
        out
    }
}

/// Adjoint of [`Planes::downsample`] into a `w x h` tensor.
fn downsample_adjoint(g: &Planes, w: usize, h: usize) -> Planes {
    let mut out = Planes::zeros(w, h, g.c);
    for c in 0..g.c {
        for y in 0..g.h {
            for x in 0..g.w {
                let v = 0.25 * g.data[c * g.w * g.h + y * g.w + x];
                let i = c * w * h + 2 * y * w + 2 * x;
                out.data[i] += v;
                out.data[i + 1] += v;
                out.data[i + w] += v;
                out.data[i + w + 1] += v;
            }
        }
    }
    out
}

/// Adds the gradient of a padded tensor back onto its unpadded source.
fn fold_padding(gpad: &Planes, w: usize, h: usize) -> Planes {
    let mut out = Planes::zeros(w, h, gpad.c);
    let (pw, ph) = (gpad.w, gpad.h);
    for c in 0..gpad.c {
        let src = &gpad.data[c * pw * ph..(c + 1) * pw * ph];
        let dst = &mut out.data[c * w * h..(c + 1) * w * h];
        for py in 0..ph {
            let y = raster::reflect(py as isize - 1, h);
            for px in 0..pw {
                let x = raster::reflect(px as isize - 1, w);
                dst[y * w + x] += src[py * pw + px];
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvRef<'a> {
    cin: usize,
    cout: usize,
    w: &'a [f64],
    b: &'a [f64],
}

impl ConvRef<'_> {
    #[inline]
    fn k(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.w[((o * self.cin + i) * 3 + ky) * 3 + kx]
    }

    /// 3x3 convolution of a padded input; output is `(pw - 2) x (ph - 2)`.
    fn forward(&self, xp: &Planes) -> Planes {
        debug_assert_eq!(xp.c, self.cin);
        let (pw, ph) = (xp.w, xp.h);
        let (w, h) = (pw - 2, ph - 2);
        let mut out = Planes::zeros(w, h, self.cout);
        out.data.par_chunks_mut(w * h).enumerate().for_each(|(o, dst)| {
            dst.fill(self.b[o]);
            for i in 0..self.cin {
                let src = &xp.data[i * pw * ph..(i + 1) * pw * ph];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.k(o, i, ky, kx);
                        if k == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            for (d, s) in dst[y * w..(y + 1) * w].iter_mut().zip(row) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Kernel and bias gradients into `gw`/`gb`, and optionally the gradient
    /// with respect to the padded input.
    fn backward(&self, xp: &Planes, gout: &Planes, gw: &mut [f64], gb: &mut [f64], want_input: bool) -> Option<Planes> {
        let (pw, ph) = (xp.w, xp.h);
        let (w, h) = (gout.w, gout.h);
        let n = w * h;
        gw.par_chunks_mut(self.cin * 9).zip(gb.par_iter_mut()).enumerate().for_each(|(o, (gwo, gbo))| {
            let g = &gout.data[o * n..(o + 1) * n];
            *gbo += g.iter().sum::<f64>();
            for i in 0..self.cin {
                let src = &xp.data[i * pw * ph..(i + 1) * pw * ph];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            acc += g[y * w..(y + 1) * w].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gwo[(i * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        });
        if !want_input {
            return None;
        }
        let mut gin = Planes::zeros(pw, ph, self.cin);
        gin.data.par_chunks_mut(pw * ph).enumerate().for_each(|(i, dst)| {
            for o in 0..self.cout {
                let g = &gout.data[o * n..(o + 1) * n];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.k(o, i, ky, kx);
                        if k == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let row = &mut dst[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            for (d, s) in row.iter_mut().zip(&g[y * w..(y + 1) * w]) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        });
        Some(gin)
    }
}

// ---------------------------------------------------------------------------
// forward / backward

struct Forward {
    x_pad: Planes,
    a1: Planes,
    a1_pad: Planes,
    phi: Planes,
    phi_pad: Planes,
    hidden: Planes,
    /// Downsampled hidden map per scale, padded.
    heads_in: Vec<Planes>,
    recs: Vec<Planes>,
}

fn check_image(params: &AutoencoderParams, image: &RasterMap) -> Result<()> {
    if image.channels() != params.arch.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, architecture expects {}",
            image.channels(),
            params.arch.in_channels
        )));
    }
    let min = 3usize.max(1 << (params.arch.scales - 1));
    if image.width() < min || image.height() < min {
        return Err(Error::DimensionTooSmall {
            width: image.width(),
            height: image.height(),
            min,
        });
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn encode_planes(params: &AutoencoderParams, x: &Planes) -> (Planes, Planes, Planes, Planes, Planes) {
    let x_pad = x.pad();
    let a1 = params.conv(0).forward(&x_pad).map(f64::tanh);
    let a1_pad = a1.pad();
    let phi = params.conv(1).forward(&a1_pad).map(f64::tanh);
    let phi_pad = phi.pad();
    (x_pad, a1, a1_pad, phi, phi_pad)
}

fn decode_planes(params: &AutoencoderParams, phi_pad: &Planes) -> (Planes, Vec<Planes>, Vec<Planes>) {
    let hidden = params.conv(2).forward(phi_pad).map(f64::tanh);
    let mut level = hidden.clone();
    let mut heads_in = Vec::new();
    let mut recs = Vec::new();
    for s in 0..params.arch.scales {
        if s > 0 {
            level = level.downsample();
        }
        let p = level.pad();
        recs.push(params.conv(3 + s).forward(&p).map(sigmoid));
        heads_in.push(p);
    }
    (hidden, heads_in, recs)
}

fn forward(params: &AutoencoderParams, image: &RasterMap) -> Forward {
    let x = Planes::from_raster(image);
    let (x_pad, a1, a1_pad, phi, phi_pad) = encode_planes(params, &x);
    let (hidden, heads_in, recs) = decode_planes(params, &phi_pad);
    Forward {
        x_pad,
        a1,
        a1_pad,
        phi,
        phi_pad,
        hidden,
        heads_in,
        recs,
    }
}

/// Encoder features `phi`, `F` channels in `(-1, 1)` at input resolution.
pub fn encode(params: &AutoencoderParams, image: &RasterMap) -> Result<RasterMap> {
    check_image(params, image)?;
    let (_, _, _, phi, _) = encode_planes(params, &Planes::from_raster(image));
    Ok(phi.to_raster())
}

/// Reconstructions in `(0, 1)`, one per scale, following the box
/// downsampling chain.
pub fn decode(params: &AutoencoderParams, phi: &RasterMap) -> Result<Vec<RasterMap>> {
    let f = params.arch.feature_channels;
    if phi.channels() != f {
        return Err(Error::ShapeMismatch(format!("phi has {} channels, expected {f}", phi.channels())));
    }
    let min = 3usize.max(1 << (params.arch.scales - 1));
    if phi.width() < min || phi.height() < min {
        return Err(Error::DimensionTooSmall {
            width: phi.width(),
            height: phi.height(),
            min,
        });
    }
    let (_, _, recs) = decode_planes(params, &Planes::from_raster(phi).pad());
    Ok(recs.iter().map(Planes::to_raster).collect())
}

fn slot_mut(grad: &mut [f64], s: LayerSlot) -> (&mut [f64], &mut [f64]) {
    grad[s.weights..s.end()].split_at_mut(s.bias - s.weights)
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies `taps` to every channel of `phi`; returns the stencil output.
fn stencil_planes(phi: &Planes, taps: fn(usize, usize, usize, usize) -> Taps) -> Planes {
    let mut out = Planes::zeros(phi.w, phi.h, phi.c);
    let n = phi.w * phi.h;
    for c in 0..phi.c {
        stencil::apply_plane(phi.plane(c), phi.w, phi.h, taps, &mut out.data[c * n..(c + 1) * n]);
    }
    out
}

/// Single-view loss and its exact gradient with respect to every parameter
/// (same layout as `params.data()`).
pub fn loss_and_gradients(
    params: &AutoencoderParams,
    image: &RasterMap,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<f64>)> {
    check_image(params, image)?;
    let fw = forward(params, image);
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let f = params.arch.feature_channels;

    // reconstruction
    let targets = raster::pyramid(image, params.arch.scales)?;
    let mut rec = 0.0;
    let mut g_recs = Vec::with_capacity(params.arch.scales);
    for (r, t) in fw.recs.iter().zip(&targets) {
        let tp = Planes::from_raster(t);
        let inv = 1.0 / (r.w * r.h) as f64;
        let mut g = Planes::zeros(r.w, r.h, r.c);
        for ((gv, rv), tv) in g.data.iter_mut().zip(&r.data).zip(&tp.data) {
            let d = rv - tv;
            rec += d.abs() * inv;
            *gv = sgn(d) * inv * rv * (1.0 - rv);
        }
        g_recs.push(g);
    }

    // regularizers on phi
    let weight = losses::texture_weight(image)?;
    let g1 = stencil_planes(&fw.phi, stencil::grad1_taps);
    let g2 = stencil_planes(&fw.phi, stencil::grad2_taps);
    let mut dis = 0.0;
    let mut cvt = 0.0;
    let mut dg1 = Planes::zeros(w, h, f);
    let mut dg2 = Planes::zeros(w, h, f);
    for c in 0..f {
        for i in 0..n {
            let a = g1.data[c * n + i];
            let wt = weight.data()[i];
            dis -= wt * a.abs();
            dg1.data[c * n + i] = -cfg.alpha * wt * sgn(a);
            let b = g2.data[c * n + i];
            cvt += b.abs();
            dg2.data[c * n + i] = cfg.beta * sgn(b);
        }
    }

    let mut grad = vec![0.0; params.len()];
    let slots = params.layers.clone();

    // decoder heads back to the hidden map
    let mut g_hidden = Planes::zeros(w, h, f);
    let mut level_dims = vec![(w, h)];
    for s in 1..params.arch.scales {
        let (pw, ph) = level_dims[s - 1];
        level_dims.push((pw / 2, ph / 2));
    }
    let mut g_levels: Vec<Option<Planes>> = vec![None; params.arch.scales];
    for s in 0..params.arch.scales {
        let (gw, gb) = slot_mut(&mut grad, slots[3 + s]);
        let gpad = params.conv(3 + s).backward(&fw.heads_in[s], &g_recs[s], gw, gb, true);
        let (lw, lh) = level_dims[s];
        g_levels[s] = Some(fold_padding(&gpad.unwrap(), lw, lh));
    }
    // push coarse-level gradients down the downsampling chain
    for s in (1..params.arch.scales).rev() {
        let g = g_levels[s].take().unwrap();
        let (lw, lh) = level_dims[s - 1];
        let up = downsample_adjoint(&g, lw, lh);
        let prev = g_levels[s - 1].as_mut().unwrap();
        for (a, b) in prev.data.iter_mut().zip(&up.data) {
            *a += b;
        }
    }
    let g_top = g_levels[0].take().unwrap();
    for ((gh, gt), hv) in g_hidden.data.iter_mut().zip(&g_top.data).zip(&fw.hidden.data) {
        *gh = gt * (1.0 - hv * hv);
    }

    // dec1 back to phi
    let (gw, gb) = slot_mut(&mut grad, slots[2]);
    let gpad = params.conv(2).backward(&fw.phi_pad, &g_hidden, gw, gb, true);
    let mut g_phi = fold_padding(&gpad.unwrap(), w, h);
    for c in 0..f {
        let gp = &mut g_phi.data[c * n..(c + 1) * n];
        stencil::adjoint_plane(&dg1.data[c * n..(c + 1) * n], w, h, stencil::grad1_taps, gp);
        stencil::adjoint_plane(&dg2.data[c * n..(c + 1) * n], w, h, stencil::grad2_taps, gp);
    }
    for (g, p) in g_phi.data.iter_mut().zip(&fw.phi.data) {
        *g *= 1.0 - p * p;
    }

    // enc2 back to a1
    let (gw, gb) = slot_mut(&mut grad, slots[1]);
    let gpad = params.conv(1).backward(&fw.a1_pad, &g_phi, gw, gb, true);
    let mut g_a1 = fold_padding(&gpad.unwrap(), w, h);
    for (g, a) in g_a1.data.iter_mut().zip(&fw.a1.data) {
        *g *= 1.0 - a * a;
    }

    // enc1
    let (gw, gb) = slot_mut(&mut grad, slots[0]);
    params.conv(0).backward(&fw.x_pad, &g_a1, gw, gb, false);

    let recs: Vec<RasterMap> = fw.recs.iter().map(Planes::to_raster).collect();
    let per_pixel = {
        let r0 = &recs[0];
        let c = image.channels();
        let d: Vec<f64> = image
            .data()
            .chunks_exact(c)
            .zip(r0.data().chunks_exact(c))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
            .collect();
        RasterMap::from_vec(w, h, 1, d)?
    };
    let terms = vec![
        Term {
            name: "rec".into(),
            value: rec,
            weight: 1.0,
        },
        Term {
            name: "dis".into(),
            value: dis,
            weight: cfg.alpha,
        },
        Term {
            name: "cvt".into(),
            value: cvt,
            weight: cfg.beta,
        },
    ];
    let total = rec + cfg.alpha * dis + cfg.beta * cvt;
    Ok((
        LossReport {
            total,
            per_term: terms,
            per_pixel,
            valid_count: n,
        },
        grad,
    ))
}

// ---------------------------------------------------------------------------
// training

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub total: f64,
    pub rec: f64,
    pub dis: f64,
    pub cvt: f64,
}

pub const HISTORY_HEADER: [&str; 5] = ["step", "total", "rec", "dis", "cvt"];

pub fn history_rows(history: &[HistoryRow]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.total.to_string(),
                r.rec.to_string(),
                r.dis.to_string(),
                r.cvt.to_string(),
            ]
        })
        .collect()
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRow]) -> Result<()> {
    raster::write_csv(path, &HISTORY_HEADER, &history_rows(history))
}

/// Parameters initialized from `cfg.rng_seed`.
pub fn init_params(arch: ArchSpec, cfg: &TrainConfig) -> Result<AutoencoderParams> {
    AutoencoderParams::init(arch, cfg.rng_seed)
}

/// Runs `cfg.steps` Adam steps from fresh optimizer state. Step `k` uses
/// `dataset[k % dataset.len()]`.
pub fn train(
    params: AutoencoderParams,
    dataset: &[RasterMap],
    cfg: &TrainConfig,
) -> Result<(AutoencoderParams, Vec<HistoryRow>)> {
    let state = AdamState::new(params.len());
    let (p, _, h) = train_resume(params, state, dataset, cfg)?;
    Ok((p, h))
}

/// Continues training from a saved optimizer state; step numbering and the
/// dataset cycle pick up at `state.step`.
pub fn train_resume(
    mut params: AutoencoderParams,
    mut state: AdamState,
    dataset: &[RasterMap],
    cfg: &TrainConfig,
) -> Result<(AutoencoderParams, AdamState, Vec<HistoryRow>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for img in dataset {
        check_image(&params, img)?;
    }
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let step = state.step;
        let image = &dataset[(step % dataset.len() as u64) as usize];
        let (report, grad) = loss_and_gradients(&params, image, &cfg.loss)?;
        if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("non-finite loss at step {step}")));
        }
        history.push(HistoryRow {
            step,
            total: report.total,
            rec: report.per_term[0].value,
            dis: report.per_term[1].value,
            cvt: report.per_term[2].value,
        });
        adam_step(&mut params, &mut state, &grad, cfg)?;
    }
    Ok((params, state, history))
}

// ---------------------------------------------------------------------------
// checkpoints

/// Writes parameters and optimizer state: magic `FMAE1`, `u32` in_channels,
/// feature_channels, scales, `u64` step, then params, m and v as
/// little-endian `f64`.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &AutoencoderParams, state: &AdamState) -> Result<()> {
    let path = path.as_ref();
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    let mut buf = Vec::with_capacity(33 + 24 * params.len());
    buf.extend_from_slice(MAGIC);
    let a = params.arch;
    for v in [a.in_channels, a.feature_channels, a.scales] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&state.step.to_le_bytes());
    for v in params.data.iter().chain(&state.m).chain(&state.v) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AutoencoderParams, AdamState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 25 || &bytes[..5] != MAGIC {
        return Err(bad("not an FMAE1 checkpoint"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let arch = ArchSpec::new(u32_at(5), u32_at(9), u32_at(13))
        .map_err(|e| bad(&format!("invalid architecture: {e}")))?;
    let step = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let n = arch.param_count();
    if bytes.len() != 25 + 24 * n {
        return Err(bad(&format!("expected {} bytes, found {}", 25 + 24 * n, bytes.len())));
    }
    let floats: Vec<f64> = bytes[25..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    let params = AutoencoderParams::from_vec(arch, floats[..n].to_vec())?;
    let state = AdamState {
        m: floats[n..2 * n].to_vec(),
        v: floats[2 * n..].to_vec(),
        step,
    };
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> RasterMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterMap::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn arch_validation() {
        assert!(ArchSpec::new(2, 16, 2).is_err());
        assert!(ArchSpec::new(1, 1, 2).is_err());
        assert!(ArchSpec::new(1, 16, 4).is_err());
        let a = ArchSpec::new(3, 4, 3).unwrap();
        let expected = (4 * 3 * 9 + 4) + (4 * 4 * 9 + 4) * 2 + 3 * (3 * 4 * 9 + 3);
        assert_eq!(a.param_count(), expected);
        let p = AutoencoderParams::zeros(a).unwrap();
        assert_eq!(p.layers().last().unwrap().end(), expected);
    }

    #[test]
    fn zero_params_encode_and_decode() {
        let p = AutoencoderParams::zeros(ArchSpec::default()).unwrap();
        let img = noise(12, 10, 1, 1);
        let phi = encode(&p, &img).unwrap();
        assert_eq!(phi.channels(), 16);
        assert!(phi.data().iter().all(|&v| v == 0.0));
        let recs = decode(&p, &phi).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[1].width(), recs[1].height()), (6, 5));
        assert!(recs.iter().all(|r| r.data().iter().all(|&v| v == 0.5)));

        let p1 = AutoencoderParams::zeros(ArchSpec::new(1, 4, 1).unwrap()).unwrap();
        assert_eq!(decode(&p1, &encode(&p1, &img).unwrap()).unwrap().len(), 1);

        let p3 = AutoencoderParams::zeros(ArchSpec::new(1, 4, 3).unwrap()).unwrap();
        let img = noise(13, 9, 1, 1);
        let dims: Vec<_> = decode(&p3, &encode(&p3, &img).unwrap())
            .unwrap()
            .iter()
            .map(|r| (r.width(), r.height()))
            .collect();
        assert_eq!(dims, vec![(13, 9), (6, 4), (3, 2)]);
    }

    #[test]
    fn identity_kernel_passes_first_channel() {
        let a = ArchSpec::new(1, 3, 1).unwrap();
        let mut p = AutoencoderParams::zeros(a).unwrap();
        let e1 = p.layer("enc1").unwrap();
        let e2 = p.layer("enc2").unwrap();
        // centre tap of output 0 / input 0
        p.data_mut()[e1.weights + 4] = 1.0;
        p.data_mut()[e2.weights + 4] = 1.0;
        let img = noise(7, 6, 1, 3);
        let phi = encode(&p, &img).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(phi.get(x, y, 0), img.get(x, y, 0).tanh().tanh());
                assert_eq!(phi.get(x, y, 1), 0.0);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = AutoencoderParams::zeros(ArchSpec::default()).unwrap();
        assert!(encode(&p, &noise(8, 8, 3, 0)).is_err());
        assert!(decode(&p, &noise(8, 8, 3, 0)).is_err());
        assert!(encode(&p, &noise(2, 8, 1, 0)).is_err());
    }

    fn fd_check(arch: ArchSpec, cfg: &LossConfig, seed: u64) {
        let mut p = AutoencoderParams::init(arch, seed).unwrap();
        // non-zero biases exercise every path
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in p.layers.clone() {
            for b in &mut p.data[l.bias..l.end()] {
                *b = rng.random_range(-0.2..0.2);
            }
        }
        let img = noise(10, 10, arch.in_channels, seed + 1);
        let (_, g) = loss_and_gradients(&p, &img, cfg).unwrap();
        let eps = 1e-6;
        for l in p.layers.clone() {
            for _ in 0..10 {
                let i = rng.random_range(l.weights..l.end());
                let mut pp = p.clone();
                pp.data[i] += eps;
                let mut pm = p.clone();
                pm.data[i] -= eps;
                let lp = loss_and_gradients(&pp, &img, cfg).unwrap().0.total;
                let lm = loss_and_gradients(&pm, &img, cfg).unwrap().0.total;
                let fd = (lp - lm) / (2.0 * eps);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-4, "{} param {i}: analytic {} fd {fd}", l.name, g[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = LossConfig {
            alpha: 0.05,
            beta: 0.05,
            ..LossConfig::default()
        };
        fd_check(ArchSpec::new(1, 4, 2).unwrap(), &cfg, 7);
        fd_check(ArchSpec::new(3, 3, 3).unwrap(), &cfg, 8);
    }

    #[test]
    fn zero_image_head_bias_gradient() {
        let a = ArchSpec::new(1, 4, 2).unwrap();
        let p = AutoencoderParams::zeros(a).unwrap();
        let img = RasterMap::zeros(10, 10, 1);
        let (r, g) = loss_and_gradients(&p, &img, &LossConfig::default()).unwrap();
        // each scale reconstructs 0.5 against 0: loss 0.5 per scale,
        // bias gradient sum_p (1/P) * sigmoid'(0) = 0.25
        assert!((r.total - 1.0).abs() < 1e-12);
        for name in ["dec2_s0", "dec2_s1"] {
            assert!((g[p.layer(name).unwrap().bias] - 0.25).abs() < 1e-14);
        }
        assert!(g[..p.layer("dec2_s0").unwrap().weights].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_beta_zero_is_pure_reconstruction() {
        let a = ArchSpec::new(1, 4, 2).unwrap();
        let p = AutoencoderParams::init(a, 3).unwrap();
        let img = noise(10, 10, 1, 4);
        let cfg = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let (r, _) = loss_and_gradients(&p, &img, &cfg).unwrap();
        let recs = decode(&p, &encode(&p, &img).unwrap()).unwrap();
        assert!((r.total - losses::reconstruction_loss(&img, &recs).unwrap()).abs() < 1e-12);
        let full = losses::single_view_loss(&img, &recs, &encode(&p, &img).unwrap(), &LossConfig::default()).unwrap();
        let (r2, _) = loss_and_gradients(&p, &img, &LossConfig::default()).unwrap();
        assert!((full.total - r2.total).abs() < 1e-10);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let a = ArchSpec::new(1, 2, 1).unwrap();
        let mut p = AutoencoderParams::zeros(a).unwrap();
        let mut s = AdamState::new(p.len());
        let cfg = TrainConfig::default();
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64 - 20.0) * 0.01).collect();
        adam_step(&mut p, &mut s, &g, &cfg).unwrap();
        for (pv, gv) in p.data().iter().zip(&g) {
            // bias-corrected m = g, v = g^2
            let expected = -cfg.learning_rate * gv / (gv.abs() + cfg.adam_eps);
            assert!((pv - expected).abs() < 1e-15);
        }
        let before = p.clone();
        let mut s0 = AdamState::new(p.len());
        adam_step(&mut p, &mut s0, &vec![0.0; g.len()], &cfg).unwrap();
        assert_eq!(p, before);
        assert!(adam_step(&mut p, &mut s0, &[0.0], &cfg).is_err());
    }

    #[test]
    fn training_on_constant_image_decreases_reconstruction() {
        let a = ArchSpec::new(1, 4, 2).unwrap();
        let cfg = TrainConfig {
            steps: 50,
            rng_seed: 5,
            ..TrainConfig::default()
        };
        let p = init_params(a, &cfg).unwrap();
        let data = [RasterMap::constant(12, 12, 1, 0.8)];
        let (_, hist) = train(p.clone(), &data, &cfg).unwrap();
        assert_eq!(hist.len(), 50);
        for w in hist.windows(2) {
            assert!(w[1].rec <= w[0].rec + 1e-6);
        }
        let (_, hist2) = train(p, &data, &cfg).unwrap();
        assert_eq!(hist, hist2);
        let zero_steps = TrainConfig { steps: 0, ..cfg };
        assert!(train(init_params(a, &cfg).unwrap(), &data, &zero_steps).is_err());
        assert!(train(init_params(a, &cfg).unwrap(), &[], &cfg).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArchSpec::new(1, 3, 2).unwrap();
        let cfg = TrainConfig {
            steps: 6,
            rng_seed: 9,
            ..TrainConfig::default()
        };
        let data = [noise(10, 10, 1, 1), noise(10, 10, 1, 2)];
        let p0 = init_params(a, &cfg).unwrap();
        let (p_once, s_once, h_once) = train_resume(p0.clone(), AdamState::new(p0.len()), &data, &cfg).unwrap();

        let half = TrainConfig { steps: 3, ..cfg };
        let (p_half, s_half, h1) = train_resume(p0.clone(), AdamState::new(p0.len()), &data, &half).unwrap();
        let path = dir.path().join("ae.bin");
        save_checkpoint(&path, &p_half, &s_half).unwrap();
        let (p_loaded, s_loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(p_loaded, p_half);
        assert_eq!(s_loaded, s_half);
        let (p_twice, s_twice, h2) = train_resume(p_loaded, s_loaded, &data, &half).unwrap();
        assert_eq!(p_twice, p_once);
        assert_eq!(s_twice, s_once);
        assert_eq!([h1, h2].concat(), h_once);

        fs::write(&path, b"FMAE2garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}

//! Motion upsampling, per-pixel motion decoding and normalized multi-flow
//! forward warping.
//!
//! Every source pixel `(t, y, x)` and vector `j` with `(Δx, Δy, w)` splats
//! its colour bilinearly onto the four pixels around `(x+Δx, y+Δy)` with
//! weight `u = exp(w)·γ^(T−1−t)·corner fraction`. The output is the ratio of
//! the colour and weight accumulators; pixels whose accumulated weight does
//! not exceed `eps` take the last observed frame's colour.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::scalar::c;
use crate::numerics::{Conv, ParamStore, Scalar, Tape, Tensor, Var};
use crate::pipeline::config::PipelineConfig;

/// Number of fixed source partitions splatted concurrently. Fixed, so the
/// summation order and therefore the result do not depend on thread count.
const SPLAT_PARTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpConfig {
    pub gamma: f64,
    pub eps: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self { gamma: 0.5, eps: 1e-6 }
    }
}

impl WarpConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            gamma: cfg.gamma,
            eps: cfg.eps,
        }
    }
}

// ---- upsampler ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpsampleStage {
    pub conv_a: Conv,
    pub conv_b: Conv,
    /// `C → 4·C` ahead of the ×2 pixel shuffle.
    pub expand: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerParams {
    /// 1×1 projection `C_node → C_sr`, present only when they differ.
    pub input: Option<Conv>,
    pub stages: Vec<UpsampleStage>,
    pub channels: usize,
    pub bypass: bool,
}

impl UpsamplerParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        stages: usize,
        c_node: usize,
        c_sr: usize,
        bypass: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let input = if c_node != c_sr {
            Some(Conv::register(store, "upsampler.input", c_node, c_sr, 1, 1, 0, rng)?)
        } else {
            None
        };
        let stages = (1..=stages)
            .map(|s| {
                Ok(UpsampleStage {
                    conv_a: Conv::register(store, &format!("upsampler.stage{s}.conv_a"), c_sr, c_sr, 3, 1, 1, rng)?,
                    conv_b: Conv::register(store, &format!("upsampler.stage{s}.conv_b"), c_sr, c_sr, 3, 1, 1, rng)?,
                    expand: Conv::register(store, &format!("upsampler.stage{s}.expand"), c_sr, 4 * c_sr, 3, 1, 1, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            stages,
            channels: c_sr,
            bypass,
        })
    }
}

/// `[N×C_node]` node features on a `T×Hs×Ws` grid to `T×C_sr×H×W` with
/// `H = Hs·2^M`. Each stage: `h = x + conv_b(lrelu(conv_a(x)))`, then
/// `pixel_shuffle(expand(h), 2)`, plus `upsample_nearest(h, 2)` when the
/// bypass is on.
#[allow(clippy::too_many_arguments)]
pub fn upsample_motion<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &UpsamplerParams,
    fused: Var,
    frames: usize,
    hs: usize,
    ws: usize,
    slope: T,
) -> Result<Var> {
    let s = tape.shape(fused)?;
    if s.len() != 2 || s[0] != frames * hs * ws {
        return Err(Error::Config(format!(
            "upsampler input {s:?} does not match a {frames}x{hs}x{ws} grid"
        )));
    }
    let grid = tape.reshape(fused, &[frames, hs, ws, s[1]])?;
    let mut x = tape.permute(grid, &[0, 3, 1, 2])?;
    if let Some(p) = &params.input {
        x = p.forward(tape, store, x)?;
    }
    for st in &params.stages {
        let a = st.conv_a.forward(tape, store, x)?;
        let a = tape.leaky_relu(a, slope)?;
        let b = st.conv_b.forward(tape, store, a)?;
        let h = tape.add(x, b)?;
        let e = st.expand.forward(tape, store, h)?;
        let y = tape.pixel_shuffle(e, 2)?;
        x = if params.bypass {
            let skip = tape.upsample_nearest(h, 2)?;
            tape.add(y, skip)?
        } else {
            y
        };
    }
    Ok(x)
}

// ---- decoder ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    pub conv: Conv,
    pub k: usize,
}

impl DecoderParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        c_sr: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::register(store, "decoder.conv", c_sr, 3 * k, 1, 1, 0, rng)?,
            k,
        })
    }
}

/// `T×C_sr×H×W` to the dynamic vector field `T×H×W×k×3`: a 1×1 conv to
/// `3k` channels, `Δ = max_disp·tanh(·)`, `w` left as a raw logit.
pub fn decode_motion<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &DecoderParams,
    features: Var,
    max_disp: T,
) -> Result<Var> {
    let s = tape.shape(features)?;
    if s.len() != 4 {
        return Err(Error::dim("decode_motion", format!("expected T×C×H×W, got {s:?}")));
    }
    let (t, h, w, k) = (s[0], s[2], s[3], params.k);
    let y = params.conv.forward(tape, store, features)?;
    let y = tape.permute(y, &[0, 2, 3, 1])?;
    let rows = t * h * w * k;
    let y = tape.reshape(y, &[rows, 3])?;
    let d = tape.slice(y, 1, 0, 2)?;
    let d = tape.tanh(d)?;
    let d = tape.scale(d, max_disp)?;
    let logit = tape.slice(y, 1, 2, 1)?;
    let p = tape.concat(&[d, logit], 1)?;
    tape.reshape(p, &[t, h, w, k, 3])
}

/// A validated `T×H×W×k×3` field.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicVectorField<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> DynamicVectorField<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        check_field_shape(values.shape())?;
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn get(&self, t: usize, y: usize, x: usize, j: usize) -> (T, T, T) {
        let o = self.values.offset(&[t, y, x, j, 0]);
        let d = self.values.data();
        (d[o], d[o + 1], d[o + 2])
    }
}

fn check_field_shape(s: &[usize]) -> Result<()> {
    if s.len() != 5 || s[4] != 3 {
        return Err(Error::dim("dynamic vector field", format!("expected T×H×W×k×3, got {s:?}")));
    }
    Ok(())
}

fn check_finite<T: Scalar>(p: &Tensor<T>) -> Result<()> {
    if let Some(i) = p.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "dynamic vector field has a non-finite entry at flat index {i}"
        )));
    }
    Ok(())
}

// ---- splatting ----------------------------------------------------------------

/// Colour and weight accumulators of one warped frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatAccumulator<T> {
    pub height: usize,
    pub width: usize,
    /// `[H×W×3]`.
    pub color: Vec<T>,
    /// `[H×W]`, never negative.
    pub weight: Vec<T>,
}

impl<T: Scalar> SplatAccumulator<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            color: vec![T::zero(); height * width * 3],
            weight: vec![T::zero(); height * width],
        }
    }

    /// Add `u·colour` at integer pixel `(x, y)`; outside the frame is a no-op.
    pub fn deposit(&mut self, x: isize, y: isize, color: [T; 3], u: T) {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            return;
        }
        let p = y as usize * self.width + x as usize;
        self.weight[p] = self.weight[p] + u;
        for (acc, &c) in self.color[3 * p..3 * p + 3].iter_mut().zip(&color) {
            *acc = *acc + u * c;
        }
    }

    /// Bilinear splat at sub-pixel position `(tx, ty)`.
    pub fn splat(&mut self, tx: T, ty: T, color: [T; 3], u: T) {
        for (cx, cy, f) in corners(tx, ty) {
            self.deposit(cx, cy, color, u * f);
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a = *a + *b;
        }
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a = *a + *b;
        }
    }

    /// `colour/weight` where `weight > eps`, else the `fallback` pixel.
    pub fn normalize(&self, fallback: &[T], eps: T) -> Tensor<T> {
        let mut out = vec![T::zero(); self.color.len()];
        for p in 0..self.weight.len() {
            let w = self.weight[p];
            for ch in 0..3 {
                out[3 * p + ch] = if w > eps {
                    self.color[3 * p + ch] / w
                } else {
                    fallback[3 * p + ch]
                };
            }
        }
        Tensor::new(&[self.height, self.width, 3], out).expect("accumulator extent")
    }
}

/// Four corners around `(tx, ty)` with their bilinear fractions.
pub fn corners<T: Scalar>(tx: T, ty: T) -> [(isize, isize, T); 4] {
    let (x0, y0) = (tx.floor(), ty.floor());
    let (fx, fy) = (tx - x0, ty - y0);
    let (xi, yi) = (x0.as_f64() as isize, y0.as_f64() as isize);
    let one = T::one();
    [
        (xi, yi, (one - fx) * (one - fy)),
        (xi + 1, yi, fx * (one - fy)),
        (xi, yi + 1, (one - fx) * fy),
        (xi + 1, yi + 1, fx * fy),
    ]
}

struct WarpGeometry {
    frames: usize,
    height: usize,
    width: usize,
    k: usize,
}

fn geometry<T: Scalar>(frames: &Tensor<T>, p: &Tensor<T>) -> Result<WarpGeometry> {
    let fs = frames.shape();
    if fs.len() != 4 || fs[3] != 3 {
        return Err(Error::dim("forward_warp", format!("expected T×H×W×3 frames, got {fs:?}")));
    }
    check_field_shape(p.shape())?;
    let ps = p.shape();
    if ps[..3] != fs[..3] {
        return Err(Error::dim(
            "forward_warp",
            format!("field {ps:?} does not match frames {fs:?}"),
        ));
    }
    check_finite(p)?;
    Ok(WarpGeometry {
        frames: fs[0],
        height: fs[1],
        width: fs[2],
        k: ps[3],
    })
}

/// Frame-recency multipliers `γ^(T−1−t)`.
fn recency<T: Scalar>(frames: usize, gamma: f64) -> Vec<T> {
    (0..frames)
        .map(|t| c(gamma.powi((frames - 1 - t) as i32)))
        .collect()
}

/// Accumulate every `(source pixel, vector)` contribution.
pub fn splat_all<T: Scalar>(frames: &Tensor<T>, p: &Tensor<T>, gamma: f64) -> Result<SplatAccumulator<T>> {
    let g = geometry(frames, p)?;
    let rec = recency::<T>(g.frames, gamma);
    let sources = g.frames * g.height * g.width;
    let part = sources.div_ceil(SPLAT_PARTS).max(1);
    let fd = frames.data();
    let pd = p.data();
    let partial: Vec<SplatAccumulator<T>> = (0..SPLAT_PARTS)
        .into_par_iter()
        .map(|part_id| {
            let mut acc = SplatAccumulator::new(g.height, g.width);
            for s in part_id * part..((part_id + 1) * part).min(sources) {
                let t = s / (g.height * g.width);
                let y = s / g.width % g.height;
                let x = s % g.width;
                let color = [fd[3 * s], fd[3 * s + 1], fd[3 * s + 2]];
                for j in 0..g.k {
                    let o = (s * g.k + j) * 3;
                    let tx = c::<T>(x as f64) + pd[o];
                    let ty = c::<T>(y as f64) + pd[o + 1];
                    acc.splat(tx, ty, color, pd[o + 2].exp() * rec[t]);
                }
            }
            acc
        })
        .collect();
    let mut acc = SplatAccumulator::new(g.height, g.width);
    for p in &partial {
        acc.merge(p);
    }
    Ok(acc)
}

fn last_frame<T: Scalar>(frames: &Tensor<T>) -> &[T] {
    let s = frames.shape();
    let n = s[1] * s[2] * 3;
    &frames.data()[(s[0] - 1) * n..]
}

/// Warp `frames: T×H×W×3` with `p: T×H×W×k×3` to the next frame `H×W×3`.
pub fn forward_warp<T: Scalar>(frames: &Tensor<T>, p: &Tensor<T>, cfg: &WarpConfig) -> Result<Tensor<T>> {
    let acc = splat_all(frames, p, cfg.gamma)?;
    Ok(acc.normalize(last_frame(frames), c(cfg.eps)))
}

/// Effective normalized weight sum at each output pixel, and the mask of
/// pixels whose total weight exceeds `eps`. Where the mask is set the sum is
/// 1 up to rounding; elsewhere it is 0.
pub fn normalized_weight_sums<T: Scalar>(
    frames: &Tensor<T>,
    p: &Tensor<T>,
    cfg: &WarpConfig,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let g = geometry(frames, p)?;
    let total = splat_all(frames, p, cfg.gamma)?.weight;
    let eps = c::<T>(cfg.eps);
    let rec = recency::<T>(g.frames, cfg.gamma);
    let mut sums = vec![0.0; g.height * g.width];
    let pd = p.data();
    for s in 0..g.frames * g.height * g.width {
        let t = s / (g.height * g.width);
        let (y, x) = (s / g.width % g.height, s % g.width);
        for j in 0..g.k {
            let o = (s * g.k + j) * 3;
            let u = pd[o + 2].exp() * rec[t];
            let tx = c::<T>(x as f64) + pd[o];
            let ty = c::<T>(y as f64) + pd[o + 1];
            for (cx, cy, f) in corners(tx, ty) {
                if cx < 0 || cy < 0 || cx >= g.width as isize || cy >= g.height as isize {
                    continue;
                }
                let q = cy as usize * g.width + cx as usize;
                if total[q] > eps {
                    sums[q] += (u * f / total[q]).as_f64();
                }
            }
        }
    }
    let mask = total.iter().map(|&w| w > eps).collect();
    Ok((sums, mask))
}

/// Gradients of [`forward_warp`] for an upstream gradient `grad: H×W×3`.
fn forward_warp_backward<T: Scalar>(
    frames: &Tensor<T>,
    p: &Tensor<T>,
    out: &Tensor<T>,
    grad: &Tensor<T>,
    cfg: &WarpConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = geometry(frames, p)?;
    let acc = splat_all(frames, p, cfg.gamma)?;
    let eps = c::<T>(cfg.eps);
    let hw = g.height * g.width;
    let gd = grad.data();
    let od = out.data();
    // d loss / d colour accumulator and d loss / d weight accumulator
    let mut g_color = vec![T::zero(); hw * 3];
    let mut g_weight = vec![T::zero(); hw];
    let mut g_frames = vec![T::zero(); frames.len()];
    let last = (g.frames - 1) * hw * 3;
    for q in 0..hw {
        let w = acc.weight[q];
        if w > eps {
            let mut gw = T::zero();
            for ch in 0..3 {
                g_color[3 * q + ch] = gd[3 * q + ch] / w;
                gw = gw - gd[3 * q + ch] * od[3 * q + ch] / w;
            }
            g_weight[q] = gw;
        } else {
            for ch in 0..3 {
                g_frames[last + 3 * q + ch] = gd[3 * q + ch];
            }
        }
    }
    let rec = recency::<T>(g.frames, cfg.gamma);
    let fd = frames.data();
    let pd = p.data();
    let mut g_p = vec![T::zero(); p.len()];
    let one = T::one();
    g_frames
        .par_chunks_mut(3)
        .zip(g_p.par_chunks_mut(g.k * 3))
        .enumerate()
        .for_each(|(s, (gf, gp))| {
            let t = s / hw;
            let (y, x) = (s / g.width % g.height, s % g.width);
            let color = [fd[3 * s], fd[3 * s + 1], fd[3 * s + 2]];
            for j in 0..g.k {
                let o = (s * g.k + j) * 3;
                let u = pd[o + 2].exp() * rec[t];
                let tx = c::<T>(x as f64) + pd[o];
                let ty = c::<T>(y as f64) + pd[o + 1];
                let (x0, y0) = (tx.floor(), ty.floor());
                let (fx, fy) = (tx - x0, ty - y0);
                let (xi, yi) = (x0.as_f64() as isize, y0.as_f64() as isize);
                // (dx, dy, bilinear factors along x and y, d/dfx sign, d/dfy sign)
                let taps = [
                    (0, 0, one - fx, one - fy, -one, -one),
                    (1, 0, fx, one - fy, one, -one),
                    (0, 1, one - fx, fy, -one, one),
                    (1, 1, fx, fy, one, one),
                ];
                let (mut d_tx, mut d_ty, mut d_w) = (T::zero(), T::zero(), T::zero());
                for (ox, oy, bx, by, sx, sy) in taps {
                    let (cx, cy) = (xi + ox, yi + oy);
                    if cx < 0 || cy < 0 || cx >= g.width as isize || cy >= g.height as isize {
                        continue;
                    }
                    let q = cy as usize * g.width + cx as usize;
                    // d loss / d (u·b) for this corner
                    let mut du = g_weight[q];
                    for ch in 0..3 {
                        du = du + g_color[3 * q + ch] * color[ch];
                        gf[ch] = gf[ch] + u * bx * by * g_color[3 * q + ch];
                    }
                    d_w = d_w + du * u * bx * by;
                    d_tx = d_tx + du * u * sx * by;
                    d_ty = d_ty + du * u * bx * sy;
                }
                gp[3 * j] = d_tx;
                gp[3 * j + 1] = d_ty;
                gp[3 * j + 2] = d_w;
            }
        });
    Ok((
        Tensor::new(frames.shape(), g_frames)?,
        Tensor::new(p.shape(), g_p)?,
    ))
}

/// Differentiable [`forward_warp`] on the tape.
pub fn forward_warp_var<T: Scalar>(tape: &mut Tape<T>, frames: Var, p: Var, cfg: &WarpConfig) -> Result<Var> {
    let out = forward_warp(tape.value(frames)?, tape.value(p)?, cfg)?;
    let cfg = *cfg;
    tape.record(out, &[frames, p], move |args| {
        let (gf, gp) = forward_warp_backward(args.inputs[0], args.inputs[1], args.output, args.grad, &cfg)?;
        Ok(vec![
            if args.needs[0] { Some(gf) } else { None },
            if args.needs[1] { Some(gp) } else { None },
        ])
    })
}

// ---- rollout ------------------------------------------------------------------

/// Anything that turns an observation window into a dynamic vector field.
pub trait MotionSource<T: Scalar> {
    fn motion(&mut self, frames: &Tensor<T>, step: usize) -> Result<Tensor<T>>;

    fn warp_config(&self) -> WarpConfig {
        WarpConfig::default()
    }
}

/// Fixed per-step fields, e.g. analytic ground truth.
pub struct OracleMotion<T> {
    pub fields: Vec<Tensor<T>>,
    pub cfg: WarpConfig,
}

impl<T: Scalar> MotionSource<T> for OracleMotion<T> {
    fn motion(&mut self, _frames: &Tensor<T>, step: usize) -> Result<Tensor<T>> {
        self.fields
            .get(step)
            .or(self.fields.last())
            .cloned()
            .ok_or_else(|| Error::Argument("oracle motion source has no fields".into()))
    }

    fn warp_config(&self) -> WarpConfig {
        self.cfg
    }
}

/// Field with one vector per pixel that moves every pixel of frame `t` by
/// `(T − t)·(vx, vy)`: the ground truth for a global translation.
pub fn translation_field<T: Scalar>(frames: usize, height: usize, width: usize, vx: f64, vy: f64) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(frames * height * width * 3);
    for t in 0..frames {
        let steps = (frames - t) as f64;
        for _ in 0..height * width {
            data.extend([c(steps * vx), c(steps * vy), T::zero()]);
        }
    }
    Tensor::new(&[frames, height, width, 1, 3], data)
}

/// Autoregressive prediction: predict, append, slide the window, repeat.
pub fn predict_rollout<T: Scalar, M: MotionSource<T>>(
    frames: &Tensor<T>,
    source: &mut M,
    steps: usize,
) -> Result<Vec<Tensor<T>>> {
    if steps == 0 {
        return Err(Error::Argument("rollout needs at least one step".into()));
    }
    let s = frames.shape().to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::dim("predict_rollout", format!("expected T×H×W×3 frames, got {s:?}")));
    }
    let per = s[1] * s[2] * 3;
    let mut window = frames.data().to_vec();
    let mut out = Vec::with_capacity(steps);
    let cfg = source.warp_config();
    for step in 0..steps {
        let obs = Tensor::new(&s, window.clone())?;
        let p = source.motion(&obs, step)?;
        let next = forward_warp(&obs, &p, &cfg)?;
        window.drain(..per);
        window.extend_from_slice(next.data());
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn field(frames: usize, h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize) -> [f64; 3]) -> Tensor<f64> {
        let mut data = Vec::new();
        for t in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    for j in 0..k {
                        data.extend(f(t, y, x, j));
                    }
                }
            }
        }
        Tensor::new(&[frames, h, w, k, 3], data).unwrap()
    }

    #[test]
    fn corner_fractions_partition_unity() {
        let mut r = rng(1);
        for _ in 0..100 {
            let tx: f64 = r.gen_range(-5.0..5.0);
            let ty: f64 = r.gen_range(-5.0..5.0);
            let s: f64 = corners(tx, ty).iter().map(|c| c.2).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_motion_reproduces_last_frame() {
        let f0 = Tensor::rand_uniform(&[1, 5, 6, 3], 0.0, 1.0, &mut rng(2)).unwrap();
        let frames = crate::numerics::ops::concat(&[&f0, &f0, &f0], 0).unwrap();
        let p = field(3, 5, 6, 2, |_, _, _, _| [0.0, 0.0, 0.3]);
        let out = forward_warp(&frames, &p, &WarpConfig::default()).unwrap();
        assert!(out.max_abs_diff(&f0.reshape(&[5, 6, 3]).unwrap()) < 1e-6);
    }

    #[test]
    fn unit_translation_of_single_source() {
        let mut frames = Tensor::<f64>::zeros(&[1, 3, 4, 3]).unwrap();
        for (ch, v) in [0.2, 0.4, 0.6].into_iter().enumerate() {
            frames.set(&[0, 1, 1, ch], v);
        }
        // only pixel (1,1) moves; everything else points out of view
        let p = field(1, 3, 4, 1, |_, y, x, _| if (y, x) == (1, 1) { [1.0, 0.0, 0.0] } else { [-10.0, 0.0, 0.0] });
        let out = forward_warp(&frames, &p, &WarpConfig::default()).unwrap();
        assert_eq!([out.get(&[1, 2, 0]), out.get(&[1, 2, 1]), out.get(&[1, 2, 2])], [0.2, 0.4, 0.6]);
        let acc = splat_all(&frames, &p, 0.5).unwrap();
        assert_eq!(acc.weight.iter().filter(|&&w| w > 0.0).count(), 1);
    }

    #[test]
    fn colliding_vectors_follow_softmax_weights() {
        let mut frames = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        let (c1, c2) = ([0.9, 0.1, 0.3], [0.2, 0.8, 0.5]);
        for ch in 0..3 {
            frames.set(&[0, 0, 0, ch], c1[ch]);
            frames.set(&[0, 0, 2, ch], c2[ch]);
        }
        let (w1, w2) = (0.7, -0.4);
        let p = field(1, 1, 3, 1, |_, _, x, _| match x {
            0 => [1.0, 0.0, w1],
            2 => [-1.0, 0.0, w2],
            _ => [0.0, 5.0, 0.0],
        });
        let out = forward_warp(&frames, &p, &WarpConfig::default()).unwrap();
        for ch in 0..3 {
            let e = (w1.exp() * c1[ch] + w2.exp() * c2[ch]) / (w1.exp() + w2.exp());
            assert!((out.get(&[0, 1, ch]) - e).abs() < 1e-12);
        }
    }

    /// Scalar brute-force splat over all (pixel, vector) pairs.
    fn oracle(frames: &Tensor<f64>, p: &Tensor<f64>, gamma: f64, eps: f64) -> Tensor<f64> {
        let s = frames.shape();
        let (tn, h, w) = (s[0], s[1], s[2]);
        let k = p.shape()[3];
        let mut out = Tensor::zeros(&[h, w, 3]).unwrap();
        for oy in 0..h {
            for ox in 0..w {
                let (mut num, mut den) = ([0.0; 3], 0.0);
                for t in 0..tn {
                    for y in 0..h {
                        for x in 0..w {
                            for j in 0..k {
                                let tx = x as f64 + p.get(&[t, y, x, j, 0]);
                                let ty = y as f64 + p.get(&[t, y, x, j, 1]);
                                let bx = (1.0 - (tx - ox as f64).abs()).max(0.0);
                                let by = (1.0 - (ty - oy as f64).abs()).max(0.0);
                                let u = p.get(&[t, y, x, j, 2]).exp() * gamma.powi((tn - 1 - t) as i32) * bx * by;
                                den += u;
                                for (ch, acc) in num.iter_mut().enumerate() {
                                    *acc += u * frames.get(&[t, y, x, ch]);
                                }
                            }
                        }
                    }
                }
                for (ch, &n) in num.iter().enumerate() {
                    let v = if den > eps { n / den } else { frames.get(&[tn - 1, oy, ox, ch]) };
                    out.set(&[oy, ox, ch], v);
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut r = rng(3);
        let frames = Tensor::rand_uniform(&[2, 4, 5, 3], 0.0, 1.0, &mut r).unwrap();
        let p = field(2, 4, 5, 2, |_, _, _, _| [r.gen_range(-2.5..2.5), r.gen_range(-2.5..2.5), r.gen_range(-1.0..1.0)]);
        let out = forward_warp(&frames, &p, &WarpConfig::default()).unwrap();
        assert!(out.max_abs_diff(&oracle(&frames, &p, 0.5, 1e-6)) < 1e-12);
    }

    #[test]
    fn output_is_convex_where_covered() {
        let mut r = rng(4);
        let frames = Tensor::rand_uniform(&[3, 6, 6, 3], 0.0, 1.0, &mut r).unwrap();
        let p = field(3, 6, 6, 3, |_, _, _, _| [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-2.0..2.0)]);
        let out = forward_warp(&frames, &p, &WarpConfig::default()).unwrap();
        let (sums, mask) = normalized_weight_sums(&frames, &p, &WarpConfig::default()).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = frames.data().iter().skip(ch).step_by(3).copied().collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (q, &covered) in mask.iter().enumerate() {
                if covered {
                    let v = out.data()[3 * q + ch];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
        for (s, m) in sums.iter().zip(&mask) {
            if *m {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nan_vectors_are_rejected() {
        let frames = Tensor::<f64>::zeros(&[1, 2, 2, 3]).unwrap();
        let mut p = field(1, 2, 2, 1, |_, _, _, _| [0.0; 3]);
        p.data_mut()[4] = f64::NAN;
        assert!(matches!(forward_warp(&frames, &p, &WarpConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn partition_independent_of_threads() {
        let mut r = rng(5);
        let frames = Tensor::rand_uniform(&[2, 9, 7, 3], 0.0, 1.0, &mut r).unwrap();
        let p = field(2, 9, 7, 2, |_, _, _, _| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0)]);
        let a = forward_warp(&frames, &p, &WarpConfig::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| forward_warp(&frames, &p, &WarpConfig::default()).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-9);
        assert!(a.max_abs_diff(&oracle(&frames, &p, 0.5, 1e-6)) < 1e-9);
    }

    fn small_upsampler(bypass: bool) -> (ParamStore<f64>, UpsamplerParams) {
        let mut store = ParamStore::new();
        let p = UpsamplerParams::register(&mut store, 2, 3, 3, bypass, &mut rng(6)).unwrap();
        (store, p)
    }

    fn run_upsampler(store: &ParamStore<f64>, p: &UpsamplerParams, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let y = upsample_motion(&mut tape, store, p, v, 2, 2, 3, 0.2).unwrap();
        tape.value(y).unwrap().clone()
    }

    #[test]
    fn upsampler_extents_and_zero_params() {
        let x = Tensor::rand_uniform(&[12, 3], -1.0, 1.0, &mut rng(7)).unwrap();
        for bypass in [false, true] {
            let (mut store, p) = small_upsampler(bypass);
            assert_eq!(run_upsampler(&store, &p, &x).shape(), &[2, 3, 8, 12]);
            for prm in store.iter_mut() {
                prm.value.fill(0.0);
            }
            let y = run_upsampler(&store, &p, &x);
            if bypass {
                // each low-res value fills its 4×4 block
                for t in 0..2 {
                    for ch in 0..3 {
                        for yy in 0..8 {
                            for xx in 0..12 {
                                let src = x.get(&[(t * 2 + yy / 4) * 3 + xx / 4, ch]);
                                assert_eq!(y.get(&[t, ch, yy, xx]), src);
                            }
                        }
                    }
                }
            } else {
                assert_eq!(y.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn upsampler_is_per_frame() {
        let (store, p) = small_upsampler(true);
        let x = Tensor::rand_uniform(&[12, 3], -1.0, 1.0, &mut rng(8)).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[0] += 1.0;
        let (a, b) = (run_upsampler(&store, &p, &x), run_upsampler(&store, &p, &x2));
        let half = a.len() / 2;
        assert_eq!(&a.data()[half..], &b.data()[half..]);
        assert_ne!(&a.data()[..half], &b.data()[..half]);
        let mut tape = Tape::inference();
        let v = tape.constant(x);
        assert!(matches!(
            upsample_motion(&mut tape, &store, &p, v, 2, 3, 3, 0.2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decoder_bounds_and_zero_map() {
        let mut store = ParamStore::<f64>::new();
        let d = DecoderParams::register(&mut store, 4, 3, &mut rng(9)).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[2, 4, 3, 5], -50.0, 50.0, &mut rng(10)).unwrap();
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let p = decode_motion(&mut tape, &store, &d, v, 64.0).unwrap();
        let pv = tape.value(p).unwrap().clone();
        assert_eq!(pv.shape(), &[2, 3, 5, 3, 3]);
        for tri in pv.data().chunks(3) {
            assert!(tri[0].abs() <= 64.0 && tri[1].abs() <= 64.0);
        }
        for prm in store.iter_mut() {
            prm.value.fill(0.0);
        }
        let mut tape = Tape::inference();
        let v = tape.constant(x);
        let p = decode_motion(&mut tape, &store, &d, v, 64.0).unwrap();
        assert_eq!(tape.value(p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rollout_of_constant_video_is_constant() {
        let f0 = Tensor::<f64>::rand_uniform(&[1, 4, 4, 3], 0.0, 1.0, &mut rng(11)).unwrap();
        let frames = crate::numerics::ops::concat(&[&f0, &f0], 0).unwrap();
        let mut src = OracleMotion {
            fields: vec![translation_field(2, 4, 4, 0.0, 0.0).unwrap()],
            cfg: WarpConfig::default(),
        };
        let out = predict_rollout(&frames, &mut src, 3).unwrap();
        assert_eq!(out.len(), 3);
        for f in out {
            assert!(f.max_abs_diff(&f0.clone().reshape(&[4, 4, 3]).unwrap()) < 1e-12);
        }
        assert!(predict_rollout(&frames, &mut src, 0).is_err());
    }

    #[test]
    fn warp_gradients_match_central_differences() {
        use crate::numerics::gradcheck::{check_inputs, Differentiable, GradCheckOptions};
        struct Warp;
        impl Differentiable for Warp {
            fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
                forward_warp_var(tape, inputs[0], inputs[1], &WarpConfig::default())
            }
        }
        let mut r = rng(12);
        let frames = Tensor::rand_uniform(&[2, 4, 4, 3], 0.0, 1.0, &mut r).unwrap();
        // sub-pixel targets, some partly outside the frame
        let p = field(2, 4, 4, 2, |_, _, _, _| {
            [r.gen_range(-1.8..1.8) + 0.05, r.gen_range(-1.8..1.8) + 0.05, r.gen_range(-1.0..1.0)]
        });
        let opts = GradCheckOptions::default();
        let rep = check_inputs::<f64, _>("forward_warp", &Warp, &[frames.clone(), p.clone()], &opts).unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
        let rep = check_inputs::<f32, _>("forward_warp", &Warp, &[frames, p], &opts).unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn splat_is_a_convex_blend(seed in any::<u64>(), gamma in 0.1f64..1.0, spread in 0.0f64..6.0) {
                let mut g = rng(seed);
                let frames = Tensor::<f64>::rand_uniform(&[3, 5, 6, 3], 0.0, 1.0, &mut g).unwrap();
                let mut p = Tensor::<f64>::rand_uniform(&[3, 5, 6, 2, 3], -spread, spread, &mut g).unwrap();
                for w in p.data_mut().iter_mut().skip(2).step_by(3) {
                    *w = w.clamp(-3.0, 3.0);
                }
                let cfg = WarpConfig { gamma, eps: 1e-6 };
                let out = forward_warp(&frames, &p, &cfg).unwrap();
                let (lo, hi) = frames.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
                let (sums, covered) = normalized_weight_sums(&frames, &p, &cfg).unwrap();
                for (s, c) in sums.iter().zip(&covered) {
                    let ok = if *c { (s - 1.0).abs() < 1e-9 } else { *s == 0.0 };
                    prop_assert!(ok, "sum {} covered {}", s, c);
                }
            }
        }
    }
}

//! Plain tensor kernels.
//!
//! Every differentiable primitive on the [`Tape`](super::Tape) is a forward
//! kernel here plus one or more backward kernels, so each rule can be tested
//! on its own. Layouts are row-major; image-like tensors are `B×C×H×W`.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::scalar::Scalar;
use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got {}", shape_str(t.shape())),
        ));
    }
    Ok(())
}

/// `c[i,j] = Σ_k a[i,k]·b[k,j]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {} by {}", shape_str(a.shape()), shape_str(b.shape())),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("transpose", a, 2)?;
    permute(a, &[1, 0])
}

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeometry {
    pub fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", w, 4)?;
        let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, wc_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc_in != c_in {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input {} has {c_in} channels but kernel {} expects {wc_in}",
                    shape_str(x.shape()),
                    shape_str(w.shape())
                ),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        let (oh, ow) = match (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!(
                        "kernel {kh}x{kw} larger than padded input {}x{} (pad {pad}, stride {stride})",
                        h + 2 * pad,
                        wd + 2 * pad
                    ),
                ))
            }
        };
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Range of output columns `ox` whose input column `ox*stride + k - pad`
    /// lands inside `[0, extent)`.
    fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // need ox*stride + k >= pad  and  ox*stride + k - pad < extent
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi_excl = if extent + pad <= k {
            0
        } else {
            ((extent + pad - k - 1) / stride + 1).min(out)
        };
        (lo.min(hi_excl), hi_excl)
    }
}

/// Output pixels unfolded at once by `conv2d`; bounds the im2col buffer.
const CONV_BAND: usize = 4096;

/// Unfold output rows `r0..r1` of one batch item into `col`, laid out as
/// `(c_in·kh·kw) × ((r1 − r0)·ow)` with zeros where the kernel hits padding.
fn im2col_band<T: Scalar>(g: &Conv2dGeometry, xb: &[T], r0: usize, r1: usize, col: &mut Vec<T>) {
    let span = (r1 - r0) * g.ow;
    col.clear();
    col.resize(g.c_in * g.kh * g.kw * span, T::zero());
    let mut rows = col.chunks_mut(span);
    for ci in 0..g.c_in {
        let xplane = &xb[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = Conv2dGeometry::valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let dst = rows.next().expect("im2col row count");
                let (x0, x1) = Conv2dGeometry::valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in r0.max(y0)..r1.min(y1) {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[(oy - r0) * g.ow..(oy - r0 + 1) * g.ow];
                    if g.stride == 1 {
                        drow[x0..x1].copy_from_slice(&xrow[x0 + kx - g.pad..x1 + kx - g.pad]);
                    } else {
                        for ox in x0..x1 {
                            drow[ox] = xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `bias` has one entry per output channel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::dim(
                "conv2d",
                format!("bias {} does not match {} output channels", shape_str(b.shape()), g.c_out),
            ));
        }
    }
    let plane = g.oh * g.ow;
    let ksize = g.c_in * g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    if let Some(bias) = bias {
        for (i, oplane) in out.chunks_mut(plane).enumerate() {
            oplane.fill(bias.data()[i % g.c_out]);
        }
    }
    let xd = x.data();
    let wd = w.data();
    let band_rows = (CONV_BAND / g.ow.max(1)).clamp(1, g.oh.max(1));
    let parallel = g.c_out * plane * ksize >= PAR_THRESHOLD;
    let mut col = Vec::new();
    for b in 0..g.batch {
        let xb = &xd[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w];
        let ob = &mut out[b * g.c_out * plane..][..g.c_out * plane];
        for r0 in (0..g.oh).step_by(band_rows) {
            let r1 = (r0 + band_rows).min(g.oh);
            let span = (r1 - r0) * g.ow;
            im2col_band(&g, xb, r0, r1, &mut col);
            let work = |(co, oplane): (usize, &mut [T])| {
                let orow = &mut oplane[r0 * g.ow..r1 * g.ow];
                for (r, &wv) in wd[co * ksize..(co + 1) * ksize].iter().enumerate() {
                    if wv == T::zero() {
                        continue;
                    }
                    for (o, &cv) in orow.iter_mut().zip(&col[r * span..(r + 1) * span]) {
                        *o = *o + wv * cv;
                    }
                }
            };
            if parallel {
                ob.par_chunks_mut(plane).enumerate().for_each(work);
            } else {
                ob.chunks_mut(plane).enumerate().for_each(work);
            }
        }
    }
    Tensor::new(&[g.batch, g.c_out, g.oh, g.ow], out)
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Conv2dGeometry::new(x, w, stride, pad)?;
    if grad_out.shape() != [g.batch, g.c_out, g.oh, g.ow] {
        return Err(Error::dim(
            "conv2d_backward",
            format!("unexpected gradient shape {}", shape_str(grad_out.shape())),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let cost = g.batch * g.c_out * plane_out * g.c_in * g.kh * g.kw;
    let parallel = cost >= PAR_THRESHOLD;

    // d/dx: one (batch, c_in) plane per task.
    let mut gx = vec![T::zero(); g.batch * g.c_in * plane_in];
    let gx_work = |(bi, xplane): (usize, &mut [T])| {
        let (b, ci) = (bi / g.c_in, bi % g.c_in);
        for co in 0..g.c_out {
            let gplane = &gd[(b * g.c_out + co) * plane_out..][..plane_out];
            for ky in 0..g.kh {
                let (y0, y1) = Conv2dGeometry::valid_range(g.oh, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = wd[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = Conv2dGeometry::valid_range(g.ow, g.w, kx, g.stride, g.pad);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx - g.pad;
                            let gi = iy * g.w + ix;
                            xplane[gi] = xplane[gi] + wv * gplane[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    };
    if parallel {
        gx.par_chunks_mut(plane_in).enumerate().for_each(gx_work);
    } else {
        gx.chunks_mut(plane_in).enumerate().for_each(gx_work);
    }

    // d/dw: one output channel per task.
    let ksize = g.c_in * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.c_out * ksize];
    let gw_work = |(co, wblock): (usize, &mut [T])| {
        for b in 0..g.batch {
            let gplane = &gd[(b * g.c_out + co) * plane_out..][..plane_out];
            for ci in 0..g.c_in {
                let xplane = &xd[(b * g.c_in + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (y0, y1) = Conv2dGeometry::valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let (x0, x1) = Conv2dGeometry::valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            for ox in x0..x1 {
                                let ix = ox * g.stride + kx - g.pad;
                                acc = acc + gplane[oy * g.ow + ox] * xplane[iy * g.w + ix];
                            }
                        }
                        let wi = (ci * g.kh + ky) * g.kw + kx;
                        wblock[wi] = wblock[wi] + acc;
                    }
                }
            }
        }
    };
    if parallel {
        gw.par_chunks_mut(ksize).enumerate().for_each(gw_work);
    } else {
        gw.chunks_mut(ksize).enumerate().for_each(gw_work);
    }

    let mut gb = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for (co, gbv) in gb.iter_mut().enumerate() {
            let s: T = gd[(b * g.c_out + co) * plane_out..][..plane_out].iter().copied().sum();
            *gbv = *gbv + s;
        }
    }

    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[g.c_out], gb)?,
    ))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { slope * g })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

fn shuffle_dims<T: Scalar>(op: &'static str, x: &Tensor<T>, r: usize) -> Result<[usize; 4]> {
    expect_rank(op, x, 4)?;
    if r == 0 {
        return Err(Error::dim(op, "factor must be at least 1"));
    }
    let s = x.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

/// Space-to-depth: `B×C×H×W -> B×(C·r²)×(H/r)×(W/r)`.
///
/// Output channel `c·r² + i·r + j` holds input pixels `(y·r + i, x·r + j)`
/// of channel `c`, so a 2×2 block `[[1,2],[3,4]]` becomes channels `1,2,3,4`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, ch, h, w] = shuffle_dims("pixel_unshuffle", x, r)?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            format!("factor {r} does not divide spatial extent {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let oc = ch * r * r;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for c in 0..ch {
            for i in 0..r {
                for j in 0..r {
                    let o_c = c * r * r + i * r + j;
                    for y in 0..oh {
                        let src = ((bi * ch + c) * h + y * r + i) * w;
                        let dst = ((bi * oc + o_c) * oh + y) * ow;
                        for xx in 0..ow {
                            out[dst + xx] = xd[src + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, oc, oh, ow], out)
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, ch, h, w] = shuffle_dims("pixel_shuffle", x, r)?;
    if ch % (r * r) != 0 {
        return Err(Error::dim(
            "pixel_shuffle",
            format!("{ch} channels not divisible by factor² = {}", r * r),
        ));
    }
    let oc = ch / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for c in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let i_c = c * r * r + i * r + j;
                    for y in 0..h {
                        let src = ((bi * ch + i_c) * h + y) * w;
                        let dst = ((bi * oc + c) * oh + y * r + i) * ow;
                        for xx in 0..w {
                            out[dst + xx * r + j] = xd[src + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, oc, oh, ow], out)
}

/// Nearest-neighbour upsampling of a `B×C×H×W` tensor by integer factor `r`.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, ch, h, w] = shuffle_dims("upsample_nearest", x, r)?;
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len() * r * r);
    for plane in 0..b * ch {
        for y in 0..oh {
            let row = &xd[(plane * h + y / r) * w..][..w];
            for xx in 0..ow {
                out.push(row[xx / r]);
            }
        }
    }
    Tensor::new(&[b, ch, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: sums each `r×r` block.
pub fn upsample_nearest_backward<T: Scalar>(grad: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, ch, oh, ow] = shuffle_dims("upsample_nearest_backward", grad, r)?;
    let (h, w) = (oh / r, ow / r);
    let gd = grad.data();
    let mut out = vec![T::zero(); b * ch * h * w];
    for plane in 0..b * ch {
        for y in 0..oh {
            for xx in 0..ow {
                let o = (plane * h + y / r) * w + xx / r;
                out[o] = out[o] + gd[(plane * oh + y) * ow + xx];
            }
        }
    }
    Tensor::new(&[b, ch, h, w], out)
}

/// Generalized transpose: output axis `a` is input axis `perm[a]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(
            "permute",
            format!("{perm:?} is not a permutation of rank {r}"),
        ));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(xd[off]);
        for a in (0..r).rev() {
            idx[a] += 1;
            off += src_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            off -= src_strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (a, &p) in perm.iter().enumerate() {
        inv[p] = a;
    }
    inv
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat needs at least one tensor".into()))?;
    let r = first.rank();
    if axis >= r {
        return Err(Error::dim("concat", format!("axis {axis} out of range for rank {r}")));
    }
    for p in parts {
        let ok = p.rank() == r
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(a, (x, y))| a == axis || x == y);
        if !ok {
            return Err(Error::dim(
                "concat",
                format!(
                    "{} incompatible with {} along axis {axis}",
                    shape_str(p.shape()),
                    shape_str(first.shape())
                ),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, out)
}

/// `x[.., start..start+len, ..]` along `axis`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim(
            "slice",
            format!(
                "range {start}..{} on axis {axis} of {}",
                start + len,
                shape_str(x.shape())
            ),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let ext = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Adjoint of [`slice`]: embeds `grad` into zeros of `full_shape`.
pub fn slice_backward<T: Scalar>(
    grad: &Tensor<T>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(full_shape)?;
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let ext = full_shape[axis];
    let len = grad.shape()[axis];
    for o in 0..outer {
        let dst = (o * ext + start) * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    Ok(out)
}

fn expect_matrix<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    expect_rank(op, x, 2)?;
    Ok((x.shape()[0], x.shape()[1]))
}

/// Rows of `x` selected by `index`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let (n, cols) = expect_matrix("gather_rows", x)?;
    if let Some(&bad) = index.iter().find(|&&i| i >= n) {
        return Err(Error::dim("gather_rows", format!("row {bad} out of range for {n} rows")));
    }
    let mut out = Vec::with_capacity(index.len() * cols);
    for &i in index {
        out.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(&[index.len(), cols], out)
}

/// Zero matrix of `rows` rows with `x`'s rows added at `index`; duplicates sum.
pub fn scatter_rows<T: Scalar>(x: &Tensor<T>, index: &[usize], rows: usize) -> Result<Tensor<T>> {
    let (n, cols) = expect_matrix("scatter_rows", x)?;
    if index.len() != n {
        return Err(Error::dim(
            "scatter_rows",
            format!("{} indices for {n} rows", index.len()),
        ));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
        return Err(Error::dim("scatter_rows", format!("row {bad} out of range for {rows} rows")));
    }
    let mut out = vec![T::zero(); rows * cols];
    for (r, &i) in index.iter().enumerate() {
        for cc in 0..cols {
            out[i * cols + cc] = out[i * cols + cc] + x.data()[r * cols + cc];
        }
    }
    Tensor::new(&[rows, cols], out)
}

/// Column-wise max over consecutive groups of `group` rows:
/// `[G·group × C] -> [G × C]`. Ties resolve to the first row of the group.
/// Returns the pooled values and the winning row for each output entry.
pub fn group_max<T: Scalar>(x: &Tensor<T>, group: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, cols) = expect_matrix("group_max", x)?;
    if group == 0 || n % group != 0 {
        return Err(Error::dim(
            "group_max",
            format!("{n} rows not divisible into groups of {group}"),
        ));
    }
    let groups = n / group;
    let xd = x.data();
    let mut out = Vec::with_capacity(groups * cols);
    let mut arg = Vec::with_capacity(groups * cols);
    for g in 0..groups {
        for cc in 0..cols {
            let mut best = g * group;
            for r in g * group + 1..(g + 1) * group {
                if xd[r * cols + cc] > xd[best * cols + cc] {
                    best = r;
                }
            }
            out.push(xd[best * cols + cc]);
            arg.push(best);
        }
    }
    Ok((Tensor::new(&[groups, cols], out)?, arg))
}

fn row_norms<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let cols = x.shape()[1];
    x.data()
        .chunks(cols)
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

/// `s[i,j] = ⟨a_i,b_j⟩ / (max(‖a_i‖,eps)·max(‖b_j‖,eps))`.
pub fn cosine_similarity_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (n, ca) = expect_matrix("cosine_similarity_rows", a)?;
    let (m, cb) = expect_matrix("cosine_similarity_rows", b)?;
    if ca != cb {
        return Err(Error::dim(
            "cosine_similarity_rows",
            format!("{} vs {}", shape_str(a.shape()), shape_str(b.shape())),
        ));
    }
    let na: Vec<T> = row_norms(a).into_iter().map(|v| v.max(eps)).collect();
    let nb: Vec<T> = row_norms(b).into_iter().map(|v| v.max(eps)).collect();
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); n * m];
    let work = |(i, orow): (usize, &mut [T])| {
        let ar = &ad[i * ca..(i + 1) * ca];
        for (j, o) in orow.iter_mut().enumerate() {
            let br = &bd[j * ca..(j + 1) * ca];
            let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            *o = dot / (na[i] * nb[j]);
        }
    };
    if n * m * ca >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(work);
    } else {
        out.chunks_mut(m).enumerate().for_each(work);
    }
    Tensor::new(&[n, m], out)
}

/// Cosine similarity of single row pairs `(i, j)` of `x`, same formula as
/// [`cosine_similarity_rows`].
pub fn pair_cosine<T: Scalar>(x: &Tensor<T>, pairs: &[(usize, usize)], eps: T) -> Result<Tensor<T>> {
    let (n, cols) = expect_matrix("pair_cosine", x)?;
    if pairs.is_empty() {
        return Err(Error::Argument("pair_cosine needs at least one pair".into()));
    }
    if let Some(bad) = pairs.iter().find(|(i, j)| *i >= n || *j >= n) {
        return Err(Error::dim("pair_cosine", format!("pair {bad:?} out of range for {n} rows")));
    }
    let norms: Vec<T> = row_norms(x).into_iter().map(|v| v.max(eps)).collect();
    let xd = x.data();
    let out = pairs
        .iter()
        .map(|&(i, j)| {
            let dot: T = xd[i * cols..(i + 1) * cols]
                .iter()
                .zip(&xd[j * cols..(j + 1) * cols])
                .map(|(&a, &b)| a * b)
                .sum();
            dot / (norms[i] * norms[j])
        })
        .collect();
    Tensor::new(&[pairs.len()], out)
}

/// Gradient of `pair_cosine` with respect to `x`.
pub fn pair_cosine_backward<T: Scalar>(
    x: &Tensor<T>,
    pairs: &[(usize, usize)],
    grad: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let cols = x.shape()[1];
    let raw = row_norms(x);
    let xd = x.data();
    let mut gx = vec![T::zero(); x.len()];
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let g = grad.data()[p];
        if g == T::zero() {
            continue;
        }
        let (ni, nj) = (raw[i].max(eps), raw[j].max(eps));
        let xi = &xd[i * cols..(i + 1) * cols];
        let xj = &xd[j * cols..(j + 1) * cols];
        let dot: T = xi.iter().zip(xj).map(|(&a, &b)| a * b).sum();
        let denom = ni * nj;
        // d(dot)/dxi = xj; d(ni)/dxi = xi/ni when the norm exceeds eps.
        let clamp_i = raw[i] > eps;
        let clamp_j = raw[j] > eps;
        for cc in 0..cols {
            let mut di = xj[cc] / denom;
            if clamp_i {
                di = di - dot * xi[cc] / (ni * ni * ni * nj);
            }
            let mut dj = xi[cc] / denom;
            if clamp_j {
                dj = dj - dot * xj[cc] / (nj * nj * nj * ni);
            }
            gx[i * cols + cc] = gx[i * cols + cc] + g * di;
            gx[j * cols + cc] = gx[j * cols + cc] + g * dj;
        }
    }
    Tensor::new(x.shape(), gx)
}

/// Gradients of `cosine_similarity_rows` with respect to both operands.
pub fn cosine_similarity_rows_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, cols) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[0];
    let ra = row_norms(a);
    let rb = row_norms(b);
    let ad = a.data();
    let bd = b.data();
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for i in 0..n {
        let ai = &ad[i * cols..(i + 1) * cols];
        let na = ra[i].max(eps);
        for j in 0..m {
            let g = grad.data()[i * m + j];
            if g == T::zero() {
                continue;
            }
            let bj = &bd[j * cols..(j + 1) * cols];
            let nb = rb[j].max(eps);
            let dot: T = ai.iter().zip(bj).map(|(&x, &y)| x * y).sum();
            let denom = na * nb;
            for cc in 0..cols {
                let mut da = bj[cc] / denom;
                if ra[i] > eps {
                    da = da - dot * ai[cc] / (na * na * na * nb);
                }
                let mut db = ai[cc] / denom;
                if rb[j] > eps {
                    db = db - dot * bj[cc] / (nb * nb * nb * na);
                }
                ga[i * cols + cc] = ga[i * cols + cc] + g * da;
                gb[j * cols + cc] = gb[j * cols + cc] + g * db;
            }
        }
    }
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

/// Indices of the `k` largest scores in descending order; equal scores are
/// ordered by ascending index. NaN scores sort last.
pub fn topk_desc<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<(usize, T)>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    let cmp = |a: &(usize, T), b: &(usize, T)| -> Ordering {
        match b.1.partial_cmp(&a.1) {
            Some(Ordering::Equal) | None => {
                match (a.1.is_nan(), b.1.is_nan()) {
                    (true, false) => Ordering::Greater,
                    (false, true) => Ordering::Less,
                    _ => a.0.cmp(&b.0),
                }
            }
            Some(o) => o,
        }
    };
    let mut items: Vec<(usize, T)> = scores.iter().copied().enumerate().collect();
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    }
    items.sort_by(cmp);
    Ok(items)
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut g = rng();
        let a = Tensor::<f64>::rand_uniform(&[4, 5], -1.0, 1.0, &mut g).unwrap();
        let b = Tensor::<f64>::rand_uniform(&[5, 3], -1.0, 1.0, &mut g).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert_eq!(c.get(&[i, j]), s);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]).unwrap(), &Tensor::zeros(&[2, 3]).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2x3]") && err.contains("cannot multiply"), "{err}");
    }

    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (bn, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bn, co, oh, ow]).unwrap();
        for n in 0..bn {
            for (o, &bias) in b.iter().enumerate().take(co) {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = bias;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += w.get(&[o, c, ky, kx]) * x.get(&[n, c, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[n, o, y, xx], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_ones_counts_overlapping_taps() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        let expect = [4., 6., 6., 4., 6., 9., 9., 6., 6., 9., 9., 6., 4., 6., 6., 4.];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut g = rng();
        for &(stride, pad, h, w) in &[(1, 1, 5, 6), (2, 1, 7, 6), (1, 0, 4, 4), (2, 0, 5, 5), (3, 2, 6, 5), (1, 1, 70, 66)] {
            let x = Tensor::<f64>::rand_uniform(&[2, 3, h, w], -1.0, 1.0, &mut g).unwrap();
            let k = Tensor::<f64>::rand_uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut g).unwrap();
            let b = Tensor::<f64>::rand_uniform(&[4], -1.0, 1.0, &mut g).unwrap();
            let fast = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let slow = conv_naive(&x, &k, b.data(), stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-13, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_kernel_larger_than_input_fails() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Dimension { .. })));
        let w2 = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(conv2d(&x, &w2, None, 1, 0).is_err());
    }

    #[test]
    fn leaky_relu_definition() {
        let y = leaky_relu(&t(&[3], &[-1.0, 0.0, 2.0]), 0.2);
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
        let pos = t(&[3], &[0.0, 1.0, 3.5]);
        assert_eq!(leaky_relu(&pos, 0.2), pos);
    }

    #[test]
    fn unshuffle_channel_order() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        assert_eq!(pixel_unshuffle(&x, 1).unwrap(), x);
        assert_eq!(pixel_shuffle(&y, 2).unwrap(), x);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn shuffle_rejects_non_divisible() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(pixel_unshuffle(&x, 2).is_err());
        let y = Tensor::<f64>::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(pixel_shuffle(&y, 2).is_err());
    }

    #[test]
    fn nearest_upsample_is_shuffle_of_repeated_channels() {
        let mut g = rng();
        let x = Tensor::<f64>::rand_uniform(&[1, 2, 3, 2], 0.0, 1.0, &mut g).unwrap();
        let mut rep = Vec::new();
        for c in 0..2 {
            let plane = slice(&x, 1, c, 1).unwrap();
            for _ in 0..4 {
                rep.push(plane.clone());
            }
        }
        let refs: Vec<&Tensor<f64>> = rep.iter().collect();
        let repeated = concat(&refs, 1).unwrap();
        assert_eq!(upsample_nearest(&x, 2).unwrap(), pixel_shuffle(&repeated, 2).unwrap());
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = rng();
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 4, 5], 0.0, 1.0, &mut g).unwrap();
        let p = [2, 0, 3, 1];
        let y = permute(&x, &p).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        assert_eq!(y.get(&[3, 1, 4, 2]), x.get(&[1, 2, 3, 4]));
        assert_eq!(permute(&y, &inverse_permutation(&p)).unwrap(), x);
        assert!(permute(&x, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(slice(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(slice(&c, 1, 2, 1).unwrap(), b);
        assert!(concat(&[&a, &t(&[3, 1], &[0.; 3])], 1).is_err());
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let x = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let g = gather_rows(&x, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[5., 6., 1., 2., 5., 6.]);
        let s = scatter_rows(&g, &[2, 0, 2], 3).unwrap();
        assert_eq!(s.data(), &[1., 2., 0., 0., 10., 12.]);
    }

    #[test]
    fn group_max_tie_takes_first() {
        let x = t(&[4, 2], &[1., 5., 3., 5., 2., 0., 2., -1.]);
        let (y, arg) = group_max(&x, 2).unwrap();
        assert_eq!(y.data(), &[3., 5., 2., 0.]);
        assert_eq!(arg, vec![1, 0, 2, 2]);
    }

    #[test]
    fn cosine_basic_cases() {
        let a = t(&[2, 2], &[1., 0., 0., 2.]);
        let s = cosine_similarity_rows(&a, &a, 1e-8).unwrap();
        assert_eq!(s.data(), &[1., 0., 0., 1.]);
        let z = t(&[1, 2], &[0., 0.]);
        let s0 = cosine_similarity_rows(&z, &a, 1e-8).unwrap();
        assert!(s0.all_finite());
        assert_eq!(s0.data(), &[0., 0.]);
    }

    #[test]
    fn cosine_matches_per_pair_oracle() {
        let mut g = rng();
        let a = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut g).unwrap();
        let b = Tensor::<f64>::rand_uniform(&[5, 4], -1.0, 1.0, &mut g).unwrap();
        let s = cosine_similarity_rows(&a, &b, 1e-8).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..4 {
                    dot += a.get(&[i, k]) * b.get(&[j, k]);
                    na += a.get(&[i, k]).powi(2);
                    nb += b.get(&[j, k]).powi(2);
                }
                let expect = dot / (na.sqrt() * nb.sqrt());
                assert!((s.get(&[i, j]) - expect).abs() < 1e-15);
            }
        }
        let ab = concat(&[&a, &b], 0).unwrap();
        let pc = pair_cosine(&ab, &[(0, 3), (2, 7)], 1e-8).unwrap();
        assert_eq!(pc.data(), &[s.get(&[0, 0]), s.get(&[2, 4])]);
    }

    #[test]
    fn topk_hand_cases() {
        assert_eq!(topk_desc(&[0.1, 0.9, 0.5], 2).unwrap(), vec![(1, 0.9), (2, 0.5)]);
        let idx: Vec<usize> = topk_desc(&[0.3; 5], 3).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(topk_desc(&[1.0, 2.0], 3).is_err());
        assert!(topk_desc(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn topk_matches_full_sort() {
        use rand::Rng;
        let mut g = rng();
        for _ in 0..20 {
            // coarse values force plenty of ties
            let scores: Vec<f64> = (0..64).map(|_| (g.gen_range(0..16) as f64) / 8.0).collect();
            let mut full: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(topk_desc(&scores, 8).unwrap(), full[..8].to_vec());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shuffle_inverts_unshuffle(
                b in 1usize..3, ch in 1usize..4, hq in 1usize..4, wq in 1usize..4,
                r in 1usize..4, seed in any::<u64>(),
            ) {
                let mut g = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::<f64>::rand_uniform(&[b, ch, hq * r, wq * r], -1.0, 1.0, &mut g).unwrap();
                let down = pixel_unshuffle(&x, r).unwrap();
                prop_assert_eq!(down.shape(), &[b, ch * r * r, hq, wq]);
                prop_assert_eq!(pixel_shuffle(&down, r).unwrap(), x);
            }

            #[test]
            fn topk_is_a_stable_descending_prefix(
                vals in proptest::collection::vec(0i32..5, 1..20), k in 1usize..20,
            ) {
                let scores: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
                let k = k.min(scores.len());
                let mut all: Vec<usize> = (0..scores.len()).collect();
                all.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
                let got: Vec<usize> = topk_desc(&scores, k).unwrap().into_iter().map(|(i, _)| i).collect();
                prop_assert_eq!(got, all[..k].to_vec());
            }
        }
    }
}

//! Shared per-frame image encoder and view alignment.
//!
//! Stage `m` (1-based) halves the resolution with a stride-2 3×3 conv and
//! refines with a stride-1 3×3 conv, both followed by leaky ReLU. Each stage
//! output is then brought to the `Hs×Ws` patch grid by space-to-depth with
//! factor `2^(M−m)` and projected to `view_channels` by a 1×1 conv.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::scalar::c;
use crate::numerics::{Conv, ParamStore, Scalar, Tape, Tensor, Var};
use crate::pipeline::PipelineConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub slope: f64,
    pub view_channels: usize,
}

impl EncoderConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            stages: cfg.views,
            base_channels: cfg.c_img,
            slope: cfg.slope,
            view_channels: cfg.c_view,
        }
    }

    /// Check that `2^stages` divides the frame extent.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let d = 1usize << self.stages;
        if self.stages == 0 || height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "frame extent {height}x{width} is not divisible by 2^{} = {d}",
                self.stages
            )));
        }
        Ok((height / d, width / d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderStage {
    pub down: Conv,
    pub refine: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stages: Vec<EncoderStage>,
    /// One 1×1 projection per view.
    pub projections: Vec<Conv>,
}

impl EncoderParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ch = cfg.base_channels;
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut projections = Vec::with_capacity(cfg.stages);
        for m in 1..=cfg.stages {
            let c_in = if m == 1 { 3 } else { ch };
            stages.push(EncoderStage {
                down: Conv::register(store, &format!("encoder.stage{m}.down"), c_in, ch, 3, 2, 1, rng)?,
                refine: Conv::register(store, &format!("encoder.stage{m}.refine"), ch, ch, 3, 1, 1, rng)?,
            });
        }
        for m in 1..=cfg.stages {
            let r = 1usize << (cfg.stages - m);
            projections.push(Conv::register(
                store,
                &format!("encoder.view{m}.proj"),
                ch * r * r,
                cfg.view_channels,
                1,
                1,
                0,
                rng,
            )?);
        }
        Ok(Self {
            stages,
            projections,
        })
    }
}

/// The `M` aligned views, each a `T×Hs×Ws×C` variable.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub views: Vec<Var>,
    pub frames: usize,
    pub hs: usize,
    pub ws: usize,
    pub channels: usize,
}

/// Run the stage stack on `frames: T×H×W×3`; returns per-stage
/// `T×C×(H/2^m)×(W/2^m)` outputs.
pub fn encode_frames<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    frames: Var,
) -> Result<Vec<Var>> {
    let shape = tape.shape(frames)?;
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::dim("encode_frames", format!("expected T×H×W×3 frames, got {shape:?}")));
    }
    cfg.check_extent(shape[1], shape[2])?;
    let slope = c::<T>(cfg.slope);
    let mut x = tape.permute(frames, &[0, 3, 1, 2])?;
    let mut outputs = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        x = stage.down.forward(tape, store, x)?;
        x = tape.leaky_relu(x, slope)?;
        x = stage.refine.forward(tape, store, x)?;
        x = tape.leaky_relu(x, slope)?;
        outputs.push(x);
    }
    Ok(outputs)
}

/// Single-frame form of [`encode_frames`] for an `H×W×3` frame.
pub fn encode_frame<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    frame: Var,
) -> Result<Vec<Var>> {
    let s = tape.shape(frame)?;
    if s.len() != 3 {
        return Err(Error::dim("encode_frame", format!("expected H×W×3, got {s:?}")));
    }
    let batched = tape.reshape(frame, &[1, s[0], s[1], s[2]])?;
    encode_frames(tape, store, params, cfg, batched)
}

pub fn align_views<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    stage_outputs: &[Var],
) -> Result<MultiScaleFeatures> {
    if stage_outputs.len() != cfg.stages || params.projections.len() != cfg.stages {
        return Err(Error::dim(
            "align_views",
            format!("{} stage outputs for {} stages", stage_outputs.len(), cfg.stages),
        ));
    }
    let deepest = tape.shape(stage_outputs[cfg.stages - 1])?;
    let (frames, hs, ws) = (deepest[0], deepest[2], deepest[3]);
    let mut views = Vec::with_capacity(cfg.stages);
    for (i, (&out, proj)) in stage_outputs.iter().zip(&params.projections).enumerate() {
        let r = 1usize << (cfg.stages - i - 1);
        let s = tape.shape(out)?;
        if s[2] != hs * r || s[3] != ws * r {
            return Err(Error::dim(
                "align_views",
                format!("stage {} extent {}x{}, expected {}x{}", i + 1, s[2], s[3], hs * r, ws * r),
            ));
        }
        let x = if r > 1 { tape.pixel_unshuffle(out, r)? } else { out };
        let x = proj.forward(tape, store, x)?;
        views.push(tape.permute(x, &[0, 2, 3, 1])?);
    }
    Ok(MultiScaleFeatures {
        views,
        frames,
        hs,
        ws,
        channels: cfg.view_channels,
    })
}

/// Encode and align in one call.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    frames: Var,
) -> Result<MultiScaleFeatures> {
    let stages = encode_frames(tape, store, params, cfg, frames)?;
    align_views(tape, store, params, cfg, &stages)
}

/// Half-width `a` of the input interval seen by one stage-`m` output pixel
/// `q`, which is `[q·2^m − a, q·2^m + a]`.
pub fn stage_half_width(m: usize) -> usize {
    let (mut a, mut jump) = (0usize, 1usize);
    for _ in 0..m {
        a += jump; // stride-2 conv, taps at jump spacing
        jump *= 2;
        a += jump; // stride-1 conv on the downsampled grid
    }
    a
}

/// Inclusive input interval (one axis, possibly negative) that view `m`'s
/// feature at patch coordinate `p` depends on.
pub fn patch_receptive_interval(stages: usize, m: usize, p: usize) -> (isize, isize) {
    let a = stage_half_width(m) as isize;
    let big = 1isize << stages;
    let small = 1isize << m;
    let origin = p as isize * big;
    (origin - a, origin + big - small + a)
}

/// Radius `R_m` such that the view-`m` feature of the patch containing pixel
/// `p` depends only on pixels within Chebyshev distance `R_m` of `p`.
pub fn receptive_radius(stages: usize, m: usize) -> usize {
    (1usize << stages) - 1 + stage_half_width(m)
}

/// Frames must be `T×H×W×3` and finite.
pub fn check_frames<T: Scalar>(frames: &Tensor<T>) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::dim("frames", format!("expected T×H×W×3, got {s:?}")));
    }
    if !frames.all_finite() {
        return Err(Error::Input("frames contain non-finite values".into()));
    }
    Ok(())
}

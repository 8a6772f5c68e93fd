//! Named finite-difference gradient checks covering every differentiable
//! operation and the end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::gradcheck::{
    check_inputs, check_params, Differentiable, GradCheckOptions, GradCheckReport, Objective, Primitive,
};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::pipeline::config::{LossKind, PipelineConfig};
use crate::pipeline::loss::loss_var;
use crate::pipeline::model::{Architecture, Model};
use crate::pipeline::scene::translating_squares;
use crate::warp::{forward_warp_var, WarpConfig};

/// Entries sampled per parameter tensor by the end-to-end check.
pub const E2E_ENTRIES: usize = 6;

struct Warp;

impl Differentiable for Warp {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        forward_warp_var(tape, x[0], x[1], &WarpConfig::default())
    }
}

struct Loss(LossKind);

impl Differentiable for Loss {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        loss_var(tape, x[0], x[1], self.0)
    }
}

/// Warp inputs whose targets stay off the integer lattice, so the
/// difference step never crosses a bilinear kink.
fn warp_inputs(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let frames = Tensor::rand_uniform(&[2, 4, 5, 3], 0.0, 1.0, rng)?;
    let n = 2 * 4 * 5 * 2;
    let mut p = Vec::with_capacity(n * 3);
    for _ in 0..n {
        for _ in 0..2 {
            let whole = rng.gen_range(-2i32..=1) as f64;
            p.push(whole + rng.gen_range(0.1..0.9));
        }
        p.push(rng.gen_range(-1.0..1.0));
    }
    Ok(vec![frames, Tensor::new(&[2, 4, 5, 2, 3], p)?])
}

/// MSE of the model's prediction for one toy example.
pub struct EndToEnd {
    pub arch: Architecture,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

impl EndToEnd {
    pub fn new(cfg: &PipelineConfig) -> Result<(Self, ParamStore<f64>)> {
        let model = Model::<f64>::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scene = translating_squares(cfg.height, cfg.width, cfg.frames_in + 1, 2, &mut rng)?.render()?;
        Ok((
            Self {
                arch: model.arch,
                input: scene.window(0, cfg.frames_in)?,
                target: scene.frame(cfg.frames_in),
            },
            model.params,
        ))
    }
}

impl Objective for EndToEnd {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var> {
        let x = tape.constant(self.input.cast());
        let y = tape.constant(self.target.cast());
        let out = self.arch.forward(tape, params, x)?;
        loss_var(tape, out.prediction, y, LossKind::Mse)
    }
}

/// Names accepted by [`run_suite`]'s filter.
pub fn check_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = Primitive::ALL.iter().map(|p| p.name()).collect();
    v.extend(["forward_warp", "loss_mse", "loss_l1", "end_to_end"]);
    v
}

/// One report per named check (the end-to-end check merges its
/// per-parameter reports). `only` restricts to a single check.
pub fn run_suite<T: Scalar>(cfg: &PipelineConfig, only: Option<&str>, seed: u64) -> Result<Vec<GradCheckReport>> {
    if let Some(name) = only {
        if !check_names().contains(&name) {
            return Err(Error::Argument(format!(
                "unknown check `{name}`; known: {}",
                check_names().join(", ")
            )));
        }
    }
    let wanted = |n: &str| only.is_none_or(|o| o == n);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in Primitive::ALL {
        let inputs = p.inputs(&mut rng)?;
        if wanted(p.name()) {
            out.push(check_inputs::<T, _>(p.name(), &p, &inputs, &opts)?);
        }
    }
    let w = warp_inputs(&mut rng)?;
    if wanted("forward_warp") {
        out.push(check_inputs::<T, _>("forward_warp", &Warp, &w, &opts)?);
    }
    let a = Tensor::rand_uniform(&[3, 4, 3], 0.0, 1.0, &mut rng)?;
    // residuals kept away from zero, where |r| has its kink
    let signs: Vec<f64> = (0..a.len()).map(|_| if rng.gen_bool(0.5) { 0.3 } else { -0.3 }).collect();
    let b = Tensor::new(a.shape(), a.data().iter().zip(&signs).map(|(v, s)| v + s).collect())?;
    for (name, kind) in [("loss_mse", LossKind::Mse), ("loss_l1", LossKind::L1)] {
        if wanted(name) {
            out.push(check_inputs::<T, _>(name, &Loss(kind), &[a.clone(), b.clone()], &opts)?);
        }
    }
    if wanted("end_to_end") {
        let (objective, params) = EndToEnd::new(cfg)?;
        let e2e_opts = GradCheckOptions {
            max_entries: Some(E2E_ENTRIES),
            ..opts
        };
        let reports = check_params::<T, _>("end_to_end", &objective, &params, &e2e_opts)?;
        out.push(merge("end_to_end", reports));
    }
    Ok(out)
}

/// Worst-case summary of several reports.
pub fn merge(name: &str, reports: Vec<GradCheckReport>) -> GradCheckReport {
    let mut m = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    for r in reports {
        m.checked += r.checked;
        m.max_abs_err = m.max_abs_err.max(r.max_abs_err);
        if r.max_rel_err > m.max_rel_err || (r.max_rel_err.is_nan() && !m.max_rel_err.is_nan()) {
            m.max_rel_err = r.max_rel_err;
            m.worst = r.worst;
        }
    }
    m
}

//! Training loop: forward, loss, backward, AdamW, zero gradients.

use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, CosineSchedule, OptimizerState, ParamStore, Scalar, Tape, Tensor};
use crate::pipeline::loss::loss_var;
use crate::pipeline::model::Model;
use crate::pipeline::scene::RenderedScene;

/// One observation window and the frame that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    /// `T×H×W×3`.
    pub input: Tensor<T>,
    /// `H×W×3`.
    pub target: Tensor<T>,
}

/// Every window of `frames_in` frames in `scene` that has a successor.
pub fn examples_from_scene<T: Scalar>(scene: &RenderedScene, frames_in: usize) -> Result<Vec<Example<T>>> {
    let total = scene.frames.shape()[0];
    if total <= frames_in {
        return Err(Error::Argument(format!(
            "scene has {total} frames, a window of {frames_in} needs at least {}",
            frames_in + 1
        )));
    }
    (0..total - frames_in)
        .map(|s| {
            Ok(Example {
                input: scene.window(s, frames_in)?.cast(),
                target: scene.frame(s + frames_in).cast(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
}

/// Steps averaged at each end of the history by the smoothed figures.
pub const SMOOTHING_WINDOW: usize = 10;

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn smoothed_initial(&self) -> f64 {
        let n = self.history.len().clamp(1, SMOOTHING_WINDOW);
        self.history.iter().take(n).map(|r| r.loss).sum::<f64>() / n as f64
    }

    pub fn smoothed_final(&self) -> f64 {
        let n = self.history.len().clamp(1, SMOOTHING_WINDOW);
        self.history.iter().rev().take(n).map(|r| r.loss).sum::<f64>() / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
        }
        s
    }
}

/// Name of the first parameter whose value or gradient is not finite.
fn first_non_finite<T: Scalar>(params: &ParamStore<T>) -> Option<String> {
    params.iter().find_map(|(_, p)| {
        if !p.value.all_finite() {
            Some(format!("{} (value)", p.name))
        } else if !p.grad.all_finite() {
            Some(format!("{} (gradient)", p.name))
        } else {
            None
        }
    })
}

/// Train for `steps` steps, cycling through `data` in order.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &[Example<T>], steps: usize) -> Result<TrainReport> {
    if steps == 0 {
        return Err(Error::Argument("training needs at least one step".into()));
    }
    if data.is_empty() {
        return Err(Error::Argument("training needs at least one example".into()));
    }
    let cfg = model.config().clone();
    let mut opt = OptimizerState::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        CosineSchedule {
            base: cfg.lr,
            end: cfg.lr_final,
            total: steps,
        },
    );
    model.params.zero_grads();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let ex = &data[step % data.len()];
        model.arch.check_input(ex.input.shape())?;
        let mut tape = Tape::new();
        let x = tape.constant(ex.input.clone());
        let y = tape.constant(ex.target.clone());
        let out = model.arch.forward(&mut tape, &model.params, x)?;
        let l = loss_var(&mut tape, out.prediction, y, cfg.loss)?;
        let loss = tape.value(l)?.data()[0].as_f64();
        tape.backward(l, Some(&mut model.params))?;
        if !loss.is_finite() || first_non_finite(&model.params).is_some() {
            let group = first_non_finite(&model.params).unwrap_or_else(|| "none (loss only)".into());
            return Err(Error::Numeric(format!(
                "step {step}: loss is {loss}; first non-finite parameter group: {group}"
            )));
        }
        let lr = opt.current_lr();
        opt.step(&mut model.params)?;
        model.params.zero_grads();
        history.push(StepRecord { step, lr, loss });
    }
    Ok(TrainReport { history })
}

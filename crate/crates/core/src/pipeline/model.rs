//! End-to-end model: encoder, graph, interaction, fusion, upsampler,
//! decoder and warper wired together under one [`PipelineConfig`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{dynamic_vector_input, flatten_nodes, init_node_features, EdgeKinds, MotionGraph, NodeInitParams};
use crate::interaction::{
    fuse_views, interact, FusionParams, InteractionConfig, InteractionParams, InteractionTrace, ViewContext,
};
use crate::numerics::scalar::c;
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::pipeline::config::{PipelineConfig, SpatialMode};
use crate::warp::{
    decode_motion, forward_warp_var, upsample_motion, DecoderParams, MotionSource, UpsamplerParams, WarpConfig,
};

/// Layer handles of every module. Values live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: PipelineConfig,
    pub encoder_cfg: EncoderConfig,
    pub encoder: EncoderParams,
    pub nodes: Vec<NodeInitParams>,
    pub interaction_cfg: InteractionConfig,
    pub interaction: Vec<InteractionParams>,
    pub fusion: FusionParams,
    pub upsampler: UpsamplerParams,
    pub decoder: DecoderParams,
    pub warp: WarpConfig,
}

/// Everything a forward pass produces.
pub struct ForwardPass<T> {
    /// `H×W×3`.
    pub prediction: Var,
    /// `T×H×W×k×3`.
    pub motion: Var,
    pub graph: MotionGraph<T>,
    pub traces: Vec<InteractionTrace>,
}

impl Architecture {
    /// Validate `cfg` and register every parameter in `store`, seeded by
    /// `cfg.seed`.
    pub fn build<T: Scalar>(cfg: &PipelineConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder_cfg = EncoderConfig::from_pipeline(cfg);
        let encoder = EncoderParams::register(store, &encoder_cfg, &mut rng)?;
        let d = cfg.d_mf();
        let d_lf = cfg.location_feature_on.then_some(cfg.d_lf);
        let interaction_cfg = InteractionConfig::from_pipeline(cfg);
        let mut nodes = Vec::with_capacity(cfg.views);
        let mut interaction = Vec::with_capacity(cfg.views);
        for v in 1..=cfg.views {
            nodes.push(NodeInitParams::register(store, v, cfg.d_tf, d_lf, &mut rng)?);
            interaction.push(InteractionParams::register(store, v, d, &interaction_cfg, &mut rng)?);
        }
        let fusion = FusionParams::register(store, d * cfg.views, cfg.c_node(), &mut rng)?;
        let upsampler = UpsamplerParams::register(
            store,
            cfg.views,
            cfg.c_node(),
            cfg.c_sr(),
            cfg.upsample_bypass,
            &mut rng,
        )?;
        let decoder = DecoderParams::register(store, cfg.c_sr(), cfg.k_decode(), &mut rng)?;
        Ok(Self {
            config: cfg.clone(),
            encoder_cfg,
            encoder,
            nodes,
            interaction_cfg,
            interaction,
            fusion,
            upsampler,
            decoder,
            warp: WarpConfig::from_pipeline(cfg),
        })
    }

    pub fn edge_kinds(&self) -> EdgeKinds {
        let cfg = &self.config;
        EdgeKinds {
            spatial: cfg.spatial_on && cfg.spatial_mode == SpatialMode::Edges,
            backward: cfg.backward_on,
            forward: true,
        }
    }

    /// Check that `shape` is a `T×H×W×3` window this model accepts.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let want = [cfg.frames_in, cfg.height, cfg.width, 3];
        if shape != want {
            return Err(Error::Config(format!(
                "input frames {shape:?} do not match the configured window {want:?}"
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<ForwardPass<T>> {
        self.check_input(&tape.shape(frames)?)?;
        let cfg = &self.config;
        let slope = c::<T>(cfg.slope);
        let sim_eps = c::<T>(cfg.sim_eps);
        let k = cfg.k_graph();

        let features = encode(tape, store, &self.encoder, &self.encoder_cfg, frames)?;
        let values = features
            .views
            .iter()
            .map(|&v| tape.value(v).cloned())
            .collect::<Result<Vec<_>>>()?;
        let graph = MotionGraph::build(&values, k, sim_eps, self.edge_kinds())?;

        let mut updated = Vec::with_capacity(cfg.views);
        let mut traces = Vec::with_capacity(cfg.views);
        for (m, &view) in features.views.iter().enumerate() {
            let vg = &graph.views[m];
            let nodes = flatten_nodes(tape, view)?;
            let dv = dynamic_vector_input(tape, nodes, &vg.dynamic, sim_eps)?;
            let init = init_node_features(tape, store, &self.nodes[m], graph.dims, dv, k, slope)?;
            let ctx = ViewContext::new(tape, &vg.edges, nodes, sim_eps)?;
            let mut trace = InteractionTrace::default();
            updated.push(interact(
                tape,
                store,
                &self.interaction[m],
                &ctx,
                &self.interaction_cfg,
                init,
                &mut trace,
            )?);
            traces.push(trace);
        }
        let fused = fuse_views(tape, store, &self.fusion, &updated, slope)?;
        let sr = upsample_motion(
            tape,
            store,
            &self.upsampler,
            fused,
            cfg.frames_in,
            graph.dims.hs,
            graph.dims.ws,
            slope,
        )?;
        let motion = decode_motion(tape, store, &self.decoder, sr, c(cfg.max_disp()))?;
        let prediction = forward_warp_var(tape, frames, motion, &self.warp)?;
        Ok(ForwardPass {
            prediction,
            motion,
            graph,
            traces,
        })
    }
}

/// An architecture together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Architecture::build(cfg, &mut params)?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.arch.config
    }

    /// Inference pass: `(prediction H×W×3, motion T×H×W×k×3)`.
    pub fn predict(&self, frames: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::inference();
        let x = tape.constant(frames.clone());
        let out = self.arch.forward(&mut tape, &self.params, x)?;
        Ok((tape.value(out.prediction)?.clone(), tape.value(out.motion)?.clone()))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

impl<T: Scalar> MotionSource<T> for Model<T> {
    fn motion(&mut self, frames: &Tensor<T>, _step: usize) -> Result<Tensor<T>> {
        Ok(self.predict(frames)?.1)
    }

    fn warp_config(&self) -> WarpConfig {
        self.arch.warp
    }
}

/// Scalar counts per top-level module (the first path segment).
pub fn param_summary<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (_, p) in store.iter() {
        let module = p.name.split('.').next().unwrap_or(&p.name).to_string();
        *out.entry(module).or_insert(0) += p.value.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::BlockKind;
    use rand::Rng;

    fn toy_frames(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PipelineConfig::toy();
        let n = cfg.frames_in * cfg.height * cfg.width * 3;
        Tensor::new(
            &[cfg.frames_in, cfg.height, cfg.width, 3],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_extents() {
        let cfg = PipelineConfig::toy();
        let model = Model::<f64>::new(&cfg).unwrap();
        let (pred, motion) = model.predict(&toy_frames(1)).unwrap();
        assert_eq!(pred.shape(), &[16, 16, 3]);
        assert_eq!(motion.shape(), &[4, 16, 16, 4, 3]);
        let cfg = PipelineConfig {
            k_decode: Some(2),
            ..PipelineConfig::toy()
        };
        let (_, motion) = Model::<f64>::new(&cfg).unwrap().predict(&toy_frames(1)).unwrap();
        assert_eq!(motion.shape(), &[4, 16, 16, 2, 3]);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = PipelineConfig::toy();
        let a = Model::<f64>::new(&cfg).unwrap().predict(&toy_frames(2)).unwrap();
        let b = Model::<f64>::new(&cfg).unwrap().predict(&toy_frames(2)).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        let other = PipelineConfig {
            seed: 1,
            ..PipelineConfig::toy()
        };
        let c = Model::<f64>::new(&other).unwrap().predict(&toy_frames(2)).unwrap();
        assert_ne!(a.1.data(), c.1.data());
    }

    #[test]
    fn wrong_window_is_config_error() {
        let model = Model::<f64>::new(&PipelineConfig::toy()).unwrap();
        let bad = Tensor::zeros(&[3, 16, 16, 3]).unwrap();
        assert!(matches!(model.predict(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn toggles_change_blocks_and_widths() {
        let mut tape = Tape::<f64>::inference();
        let model = Model::<f64>::new(&PipelineConfig::toy()).unwrap();
        let x = tape.constant(toy_frames(3));
        let out = model.arch.forward(&mut tape, &model.params, x).unwrap();
        assert!(out.traces.iter().all(|t| t.count() == 12));

        let cfg = PipelineConfig {
            backward_on: false,
            location_feature_on: false,
            ..PipelineConfig::toy()
        };
        let model2 = Model::<f64>::new(&cfg).unwrap();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(toy_frames(3));
        let out2 = model2.arch.forward(&mut tape, &model2.params, x).unwrap();
        for (a, b) in out.traces.iter().zip(&out2.traces) {
            assert_eq!(a.count() - b.count(), a.count_of(BlockKind::Backward));
            assert_eq!(b.count_of(BlockKind::Backward), 0);
        }
        assert_eq!(model2.arch.interaction[0].width, model.arch.interaction[0].width - cfg.d_lf);
        assert!(out2.graph.views.iter().all(|v| v.edges.backward.is_empty()));
    }

    #[test]
    fn every_parameter_receives_a_finite_gradient() {
        let mut model = Model::<f64>::new(&PipelineConfig::toy()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(toy_frames(4));
        let out = model.arch.forward(&mut tape, &model.params, x).unwrap();
        let sq = tape.square(out.prediction).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss, Some(&mut model.params)).unwrap();
        for (_, p) in model.params.iter() {
            assert!(p.grad.all_finite(), "{}", p.name);
        }
        // the decoder and fusion layers always see signal
        let g = model.params.by_name("decoder.conv.weight").unwrap();
        assert!(g.grad.max_abs() > 0.0);
    }

    #[test]
    fn summary_covers_every_scalar() {
        let model = Model::<f32>::new(&PipelineConfig::ucf_sports()).unwrap();
        let s = param_summary(&model.params);
        assert_eq!(s.values().sum::<usize>(), model.num_params());
        for key in ["encoder", "graph", "interaction", "fusion", "upsampler", "decoder"] {
            assert!(s.contains_key(key), "{key}");
        }
    }
}

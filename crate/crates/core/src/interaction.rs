//! Spatial and temporal message passing over a view's motion graph, the
//! round structure that carries information across all frames, and the
//! fusion of the per-view results.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{edge_attributes, EdgeKind, EdgeSet, GridDims, NeighborTable};
use crate::numerics::scalar::c;
use crate::numerics::{Conv, Linear, Mlp2, ParamStore, Scalar, Tape, Tensor, Var};
use crate::pipeline::config::{Aggregation, PipelineConfig, SpatialMode};

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionConfig {
    pub spatial_on: bool,
    pub backward_on: bool,
    pub spatial_mode: SpatialMode,
    pub aggregation: Aggregation,
    pub slope: f64,
}

impl InteractionConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            spatial_on: cfg.spatial_on,
            backward_on: cfg.backward_on,
            spatial_mode: cfg.spatial_mode,
            aggregation: cfg.aggregation,
            slope: cfg.slope,
        }
    }
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self::from_pipeline(&PipelineConfig::default())
    }
}

/// Edge message MLP (`d+3 → d → d`) and the residual update (`2d → d`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeBlock {
    pub message: Mlp2,
    pub update: Linear,
}

impl EdgeBlock {
    fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            message: Mlp2::register(store, &format!("{name}.message"), d + 3, d, d, rng)?,
            update: Linear::register(store, &format!("{name}.update"), 2 * d, d, rng)?,
        })
    }
}

/// Parameters of one view, shared by every round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionParams {
    pub width: usize,
    pub spatial_conv: Option<Conv>,
    pub spatial_edges: Option<EdgeBlock>,
    /// Shared by the forward and backward passes.
    pub temporal: EdgeBlock,
}

impl InteractionParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        view: usize,
        d: usize,
        cfg: &InteractionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let base = format!("interaction.view{view}");
        let (spatial_conv, spatial_edges) = match (cfg.spatial_on, cfg.spatial_mode) {
            (false, _) => (None, None),
            (true, SpatialMode::Conv) => (
                Some(Conv::register(store, &format!("{base}.spatial"), d, d, 3, 1, 1, rng)?),
                None,
            ),
            (true, SpatialMode::Edges) => (
                None,
                Some(EdgeBlock::register(store, &format!("{base}.spatial"), d, rng)?),
            ),
        };
        Ok(Self {
            width: d,
            spatial_conv,
            spatial_edges,
            temporal: EdgeBlock::register(store, &format!("{base}.temporal"), d, rng)?,
        })
    }
}

/// A view's graph plus the `(Δx, Δy, w)` attribute variable of each table.
pub struct ViewContext<'a, T> {
    pub dims: GridDims,
    pub edges: &'a EdgeSet<T>,
    spatial: Option<Var>,
    forward: Option<Var>,
    backward: Option<Var>,
}

impl<'a, T: Scalar> ViewContext<'a, T> {
    /// Attributes whose weights are differentiable in `features: [N×C]`.
    pub fn new(tape: &mut Tape<T>, edges: &'a EdgeSet<T>, features: Var, eps: T) -> Result<Self> {
        let mut attr = |t: &NeighborTable<T>| -> Result<Option<Var>> {
            if t.is_empty() {
                Ok(None)
            } else {
                edge_attributes(tape, features, t, edges.dims, eps).map(Some)
            }
        };
        Ok(Self {
            dims: edges.dims,
            edges,
            spatial: attr(&edges.spatial)?,
            forward: attr(&edges.forward)?,
            backward: attr(&edges.backward)?,
        })
    }

    /// Attributes taken as constants from the stored table weights.
    pub fn detached(tape: &mut Tape<T>, edges: &'a EdgeSet<T>) -> Result<Self> {
        let mut attr = |t: &NeighborTable<T>| -> Result<Option<Var>> {
            if t.is_empty() {
                return Ok(None);
            }
            let mut data = Vec::with_capacity(t.entries() * 3);
            for ((i, j), &w) in t.pairs().into_iter().zip(&t.weights) {
                let (dx, dy) = edges.dims.delta(i, j);
                data.extend([c(dx as f64), c(dy as f64), w]);
            }
            Ok(Some(tape.constant(Tensor::new(&[t.entries(), 3], data)?)))
        };
        Ok(Self {
            dims: edges.dims,
            edges,
            spatial: attr(&edges.spatial)?,
            forward: attr(&edges.forward)?,
            backward: attr(&edges.backward)?,
        })
    }

    fn attrs(&self, kind: EdgeKind) -> Option<Var> {
        match kind {
            EdgeKind::Spatial => self.spatial,
            EdgeKind::Forward => self.forward,
            EdgeKind::Backward => self.backward,
        }
    }
}

fn check_nodes<T: Scalar>(tape: &Tape<T>, v: Var, dims: GridDims, d: usize) -> Result<()> {
    let s = tape.shape(v)?;
    if s != [dims.nodes(), d] {
        return Err(Error::dim(
            "message passing",
            format!("node features {s:?}, expected [{}, {d}]", dims.nodes()),
        ));
    }
    Ok(())
}

/// One residual edge block over `table`; nodes without a row are unchanged.
#[allow(clippy::too_many_arguments)]
fn edge_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &EdgeBlock,
    table: &NeighborTable<T>,
    attrs: Option<Var>,
    v: Var,
    nodes: usize,
    aggregation: Aggregation,
    slope: T,
) -> Result<Var> {
    let Some(attrs) = attrs else { return Ok(v) };
    let k = table.k;
    let nbrs: Vec<usize> = table.neighbors.iter().map(|&n| n as usize).collect();
    let recv: Vec<usize> = table.receivers.iter().map(|&n| n as usize).collect();
    let vj = tape.gather_rows(v, &nbrs)?;
    let input = tape.concat(&[vj, attrs], 1)?;
    let msg = block.message.forward(tape, store, input, slope)?;
    let agg = match aggregation {
        Aggregation::Max => tape.group_max(msg, k)?,
        Aggregation::Mean => {
            let groups: Vec<usize> = (0..nbrs.len()).map(|e| e / k).collect();
            let s = tape.scatter_rows(msg, &groups, recv.len())?;
            tape.scale(s, T::one() / c::<T>(k as f64))?
        }
    };
    let vi = tape.gather_rows(v, &recv)?;
    let both = tape.concat(&[vi, agg], 1)?;
    let upd = block.update.forward(tape, store, both)?;
    let delta = tape.scatter_rows(upd, &recv, nodes)?;
    tape.add(v, delta)
}

/// `v + lrelu(conv3×3(v))` per frame on the patch grid, or the edge-based
/// variant over the spatial table.
pub fn spatial_mp<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &InteractionParams,
    ctx: &ViewContext<'_, T>,
    cfg: &InteractionConfig,
    v: Var,
) -> Result<Var> {
    let dims = ctx.dims;
    let d = params.width;
    check_nodes(tape, v, dims, d)?;
    let slope = c::<T>(cfg.slope);
    if let Some(conv) = &params.spatial_conv {
        let grid = tape.reshape(v, &[dims.frames, dims.hs, dims.ws, d])?;
        let x = tape.permute(grid, &[0, 3, 1, 2])?;
        let y = conv.forward(tape, store, x)?;
        let y = tape.leaky_relu(y, slope)?;
        let y = tape.permute(y, &[0, 2, 3, 1])?;
        let y = tape.reshape(y, &[dims.nodes(), d])?;
        return tape.add(v, y);
    }
    if let Some(block) = &params.spatial_edges {
        return edge_block(
            tape,
            store,
            block,
            &ctx.edges.spatial,
            ctx.attrs(EdgeKind::Spatial),
            v,
            dims.nodes(),
            cfg.aggregation,
            slope,
        );
    }
    Err(Error::Config("spatial message passing has no parameters (spatial_on = false)".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Each node aggregates over its neighbours in the next frame.
    Forward,
    /// Each node aggregates over its neighbours in the previous frame.
    Backward,
}

pub fn temporal_mp<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &InteractionParams,
    ctx: &ViewContext<'_, T>,
    cfg: &InteractionConfig,
    v: Var,
    direction: Direction,
) -> Result<Var> {
    check_nodes(tape, v, ctx.dims, params.width)?;
    let kind = match direction {
        Direction::Forward => EdgeKind::Forward,
        Direction::Backward => EdgeKind::Backward,
    };
    edge_block(
        tape,
        store,
        &params.temporal,
        ctx.edges.table(kind),
        ctx.attrs(kind),
        v,
        ctx.dims.nodes(),
        cfg.aggregation,
        c::<T>(cfg.slope),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Spatial,
    Forward,
    Backward,
}

/// Record of the blocks applied by [`interact`], in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionTrace {
    pub blocks: Vec<(usize, BlockKind)>,
}

impl InteractionTrace {
    pub fn count(&self) -> usize {
        self.blocks.len()
    }

    pub fn count_of(&self, kind: BlockKind) -> usize {
        self.blocks.iter().filter(|(_, k)| *k == kind).count()
    }
}

/// Run `rounds` rounds of (spatial, forward, spatial, backward).
#[allow(clippy::too_many_arguments)]
pub fn interact_rounds<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &InteractionParams,
    ctx: &ViewContext<'_, T>,
    cfg: &InteractionConfig,
    mut v: Var,
    rounds: usize,
    trace: &mut InteractionTrace,
) -> Result<Var> {
    for round in 0..rounds {
        for kind in [BlockKind::Spatial, BlockKind::Forward, BlockKind::Spatial, BlockKind::Backward] {
            v = match kind {
                BlockKind::Spatial if cfg.spatial_on => spatial_mp(tape, store, params, ctx, cfg, v)?,
                BlockKind::Forward => temporal_mp(tape, store, params, ctx, cfg, v, Direction::Forward)?,
                BlockKind::Backward if cfg.backward_on => {
                    temporal_mp(tape, store, params, ctx, cfg, v, Direction::Backward)?
                }
                _ => continue,
            };
            trace.blocks.push((round, kind));
        }
    }
    Ok(v)
}

/// The full interaction module: `T − 1` rounds.
pub fn interact<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &InteractionParams,
    ctx: &ViewContext<'_, T>,
    cfg: &InteractionConfig,
    v: Var,
    trace: &mut InteractionTrace,
) -> Result<Var> {
    let frames = ctx.dims.frames;
    if frames < 2 {
        return Err(Error::Config(format!("interaction needs T >= 2, got {frames}")));
    }
    interact_rounds(tape, store, params, ctx, cfg, v, frames - 1, trace)
}

/// Fusion of concatenated view features: `Linear → lrelu → Linear`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionParams {
    pub mlp: Mlp2,
}

impl FusionParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        total_width: usize,
        c_node: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::register(store, "fusion", total_width, c_node, c_node, rng)?,
        })
    }
}

/// `[N×Σd_m] -> [N×C_node]`.
pub fn fuse_views<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &FusionParams,
    views: &[Var],
    slope: T,
) -> Result<Var> {
    let first = views
        .first()
        .ok_or_else(|| Error::Argument("fusion needs at least one view".into()))?;
    let rows = tape.shape(*first)?[0];
    for &v in views {
        let s = tape.shape(v)?;
        if s.len() != 2 || s[0] != rows {
            return Err(Error::dim("fuse_views", format!("view of shape {s:?}, expected {rows} rows")));
        }
    }
    let cat = if views.len() == 1 { *first } else { tape.concat(views, 1)? };
    params.mlp.forward(tape, store, cat, slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_edges, EdgeKinds};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f64>,
        params: InteractionParams,
        edges: EdgeSet<f64>,
        cfg: InteractionConfig,
    }

    fn fixture(mode: SpatialMode, d: usize, k: usize, seed: u64) -> Fixture {
        let cfg = InteractionConfig {
            spatial_mode: mode,
            ..InteractionConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Tensor::rand_uniform(&[4, 3, 3, 4], -1.0, 1.0, &mut rng).unwrap();
        let edges = build_edges(&feats, k, 1e-8, EdgeKinds::ALL).unwrap();
        let mut store = ParamStore::new();
        let params = InteractionParams::register(&mut store, 1, d, &cfg, &mut rng).unwrap();
        Fixture {
            store,
            params,
            edges,
            cfg,
        }
    }

    fn zero_params(store: &mut ParamStore<f64>) {
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
    }

    type Block = fn(&mut Tape<f64>, &Fixture, &ViewContext<'_, f64>, Var) -> Result<Var>;

    fn apply(fx: &Fixture, v: &Tensor<f64>, f: Block) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let ctx = ViewContext::detached(&mut tape, &fx.edges).unwrap();
        let x = tape.constant(v.clone());
        let y = f(&mut tape, fx, &ctx, x).unwrap();
        tape.value(y).unwrap().clone()
    }

    fn spatial(t: &mut Tape<f64>, fx: &Fixture, ctx: &ViewContext<'_, f64>, v: Var) -> Result<Var> {
        spatial_mp(t, &fx.store, &fx.params, ctx, &fx.cfg, v)
    }
    fn forward(t: &mut Tape<f64>, fx: &Fixture, ctx: &ViewContext<'_, f64>, v: Var) -> Result<Var> {
        temporal_mp(t, &fx.store, &fx.params, ctx, &fx.cfg, v, Direction::Forward)
    }
    fn backward(t: &mut Tape<f64>, fx: &Fixture, ctx: &ViewContext<'_, f64>, v: Var) -> Result<Var> {
        temporal_mp(t, &fx.store, &fx.params, ctx, &fx.cfg, v, Direction::Backward)
    }
    fn full(t: &mut Tape<f64>, fx: &Fixture, ctx: &ViewContext<'_, f64>, v: Var) -> Result<Var> {
        interact(t, &fx.store, &fx.params, ctx, &fx.cfg, v, &mut InteractionTrace::default())
    }

    fn random_nodes(d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[36, d], -1.0, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn zero_parameters_are_identity() {
        for mode in [SpatialMode::Conv, SpatialMode::Edges] {
            let mut fx = fixture(mode, 5, 2, 1);
            zero_params(&mut fx.store);
            let v = random_nodes(5, 2);
            for f in [spatial as Block, forward, backward, full] {
                assert_eq!(apply(&fx, &v, f), v);
            }
        }
    }

    #[test]
    fn boundary_frames_untouched() {
        let fx = fixture(SpatialMode::Conv, 5, 2, 3);
        let v = random_nodes(5, 4);
        let fwd = apply(&fx, &v, forward);
        assert_eq!(&fwd.data()[27 * 5..], &v.data()[27 * 5..]);
        assert_ne!(&fwd.data()[..9 * 5], &v.data()[..9 * 5]);
        let bwd = apply(&fx, &v, backward);
        assert_eq!(&bwd.data()[..9 * 5], &v.data()[..9 * 5]);
    }

    #[test]
    fn spatial_conv_is_local_and_per_frame() {
        let fx = fixture(SpatialMode::Conv, 3, 2, 5);
        let base = random_nodes(3, 6);
        let mut bumped = base.clone();
        // node (t=1, y=0, x=0)
        bumped.data_mut()[9 * 3] += 1.0;
        let a = apply(&fx, &base, spatial);
        let b = apply(&fx, &bumped, spatial);
        let dims = GridDims::new(4, 3, 3);
        for i in 0..36 {
            let changed = a.data()[i * 3..i * 3 + 3] != b.data()[i * 3..i * 3 + 3];
            let (t, y, x) = dims.coords(i);
            if changed {
                assert!(t == 1 && y <= 1 && x <= 1, "node {i} changed");
            }
        }
    }

    #[test]
    fn single_edge_update_matches_hand_evaluation() {
        // d = 1, k = 1: message = fc2(lrelu(fc1([v_j, dx, dy, w]))), update on [v_i, m].
        let mut fx = fixture(SpatialMode::Conv, 1, 1, 7);
        let set = |store: &mut ParamStore<f64>, id, vals: &[f64]| {
            store.get_mut(id).value.data_mut().copy_from_slice(vals);
        };
        let t = fx.params.temporal;
        set(&mut fx.store, t.message.first.weight, &[0.5, -1.0, 2.0, 0.25]);
        set(&mut fx.store, t.message.first.bias, &[0.1]);
        set(&mut fx.store, t.message.second.weight, &[3.0]);
        set(&mut fx.store, t.message.second.bias, &[-0.2]);
        set(&mut fx.store, t.update.weight, &[0.7, -0.4]);
        set(&mut fx.store, t.update.bias, &[0.05]);
        let v = random_nodes(1, 8);
        let out = apply(&fx, &v, forward);
        let i = 4usize;
        let (recv, nb, w) = fx.edges.forward.row(i);
        assert_eq!(recv, i);
        let j = nb[0] as usize;
        let (dx, dy) = fx.edges.dims.delta(i, j);
        let h = 0.5 * v.data()[j] - 1.0 * dx as f64 + 2.0 * dy as f64 + 0.25 * w[0] + 0.1;
        let h = if h > 0.0 { h } else { 0.2 * h };
        let m = 3.0 * h - 0.2;
        let expect = v.data()[i] + 0.7 * v.data()[i] - 0.4 * m + 0.05;
        assert!((out.data()[i] - expect).abs() < 1e-12);
    }

    #[test]
    fn round_structure_and_toggles() {
        let fx = fixture(SpatialMode::Conv, 2, 2, 9);
        let v = random_nodes(2, 1);
        let mut tape = Tape::inference();
        let ctx = ViewContext::detached(&mut tape, &fx.edges).unwrap();
        let x = tape.constant(v);
        let mut trace = InteractionTrace::default();
        interact(&mut tape, &fx.store, &fx.params, &ctx, &fx.cfg, x, &mut trace).unwrap();
        assert_eq!(trace.count(), 12);
        assert_eq!(trace.count_of(BlockKind::Spatial), 6);
        assert_eq!(
            trace.blocks[..4].iter().map(|b| b.1).collect::<Vec<_>>(),
            [BlockKind::Spatial, BlockKind::Forward, BlockKind::Spatial, BlockKind::Backward]
        );
        let cfg = InteractionConfig {
            backward_on: false,
            ..fx.cfg.clone()
        };
        let mut trace = InteractionTrace::default();
        interact(&mut tape, &fx.store, &fx.params, &ctx, &cfg, x, &mut trace).unwrap();
        assert_eq!(trace.count(), 9);
        assert_eq!(trace.count_of(BlockKind::Backward), 0);
    }

    #[test]
    fn runs_are_bit_identical() {
        let fx = fixture(SpatialMode::Edges, 4, 2, 10);
        let v = random_nodes(4, 2);
        assert_eq!(apply(&fx, &v, full), apply(&fx, &v, full));
    }

    #[test]
    fn mean_aggregation_averages_messages() {
        let mut fx = fixture(SpatialMode::Conv, 1, 2, 12);
        fx.cfg.aggregation = Aggregation::Mean;
        let t = fx.params.temporal;
        // message = v_j exactly, update = agg
        fx.store.get_mut(t.message.first.weight).value.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        fx.store.get_mut(t.message.first.bias).value.fill(0.0);
        fx.store.get_mut(t.message.second.weight).value.fill(1.0);
        fx.store.get_mut(t.message.second.bias).value.fill(0.0);
        fx.store.get_mut(t.update.weight).value.data_mut().copy_from_slice(&[0.0, 1.0]);
        fx.store.get_mut(t.update.bias).value.fill(0.0);
        let v = random_nodes(1, 3).map(f64::abs);
        let out = apply(&fx, &v, backward);
        let (i, nb, _) = fx.edges.backward.row(0);
        let mean = (v.data()[nb[0] as usize] + v.data()[nb[1] as usize]) / 2.0;
        assert!((out.data()[i] - v.data()[i] - mean).abs() < 1e-12);
    }

    fn fusion_fixture(widths: usize, c_node: usize) -> (ParamStore<f64>, FusionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = FusionParams::register(&mut store, widths, c_node, &mut rng).unwrap();
        (store, p)
    }

    fn fuse(store: &ParamStore<f64>, p: &FusionParams, views: &[Tensor<f64>]) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let y = fuse_views(&mut tape, store, p, &vars, 0.2).unwrap();
        tape.value(y).unwrap().clone()
    }

    #[test]
    fn single_view_identity_fusion_passes_through() {
        let (mut store, p) = fusion_fixture(3, 3);
        let eye = Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        for l in [p.mlp.first, p.mlp.second] {
            store.get_mut(l.weight).value = eye.clone();
            store.get_mut(l.bias).value.fill(0.0);
        }
        let v = random_nodes(3, 5).map(f64::abs);
        assert_eq!(fuse(&store, &p, std::slice::from_ref(&v)), v);
    }

    #[test]
    fn swapped_views_absorbed_by_permuted_weights() {
        let (store, p) = fusion_fixture(4, 3);
        let a = random_nodes(2, 1);
        let b = random_nodes(2, 2);
        let base = fuse(&store, &p, &[a.clone(), b.clone()]);
        let mut swapped = store.clone();
        let w = &store.get(p.mlp.first.weight).value;
        let ws = &mut swapped.get_mut(p.mlp.first.weight).value;
        for r in 0..4 {
            for col in 0..3 {
                ws.set(&[(r + 2) % 4, col], w.get(&[r, col]));
            }
        }
        let out = fuse(&swapped, &p, &[b, a]);
        assert!(out.max_abs_diff(&base) < 1e-12);
        assert!(matches!(
            fuse_views(&mut Tape::<f64>::inference(), &store, &p, &[], 0.2),
            Err(Error::Argument(_))
        ));
    }
}

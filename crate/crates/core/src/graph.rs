//! Multi-view motion graph over the `T×Hs×Ws` patch grid.
//!
//! Selection (dynamic vectors and neighbour tables) runs on plain feature
//! values. The similarity weights that feed the network are re-evaluated on
//! the tape with [`Tape::pair_cosine`], so gradients reach the encoder
//! through the weights while the discrete choice of neighbours stays fixed.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::scalar::c;
use crate::numerics::{ops, topk_desc, Mlp2, ParamStore, Scalar, Tape, Tensor, Var};

pub use crate::pipeline::config::default_k as k_rule;

/// Bytes charged for the graph header (`T`, `Hs`, `Ws`, `k`, views as u64).
pub const GRAPH_HEADER_BYTES: usize = 5 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub frames: usize,
    pub hs: usize,
    pub ws: usize,
}

impl GridDims {
    pub fn new(frames: usize, hs: usize, ws: usize) -> Self {
        Self { frames, hs, ws }
    }

    pub fn of_features<T: Scalar>(features: &Tensor<T>) -> Result<Self> {
        let s = features.shape();
        if s.len() != 4 {
            return Err(Error::dim("graph", format!("expected T×Hs×Ws×C features, got {s:?}")));
        }
        Ok(Self::new(s[0], s[1], s[2]))
    }

    pub fn per_frame(&self) -> usize {
        self.hs * self.ws
    }

    pub fn nodes(&self) -> usize {
        self.frames * self.per_frame()
    }

    /// `i = t·Hs·Ws + y·Ws + x`.
    pub fn node(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.hs + y) * self.ws + x
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let p = self.per_frame();
        (i / p, (i % p) / self.ws, i % self.ws)
    }

    /// `(x_j − x_i, y_j − y_i)` in patch units.
    pub fn delta(&self, i: usize, j: usize) -> (isize, isize) {
        let (_, yi, xi) = self.coords(i);
        let (_, yj, xj) = self.coords(j);
        (xj as isize - xi as isize, yj as isize - yi as isize)
    }
}

fn frame_rows<T: Scalar>(features: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let s = features.shape();
    let rows = s[1] * s[2];
    let cols = s[3];
    Tensor::new(&[rows, cols], features.data()[t * rows * cols..(t + 1) * rows * cols].to_vec())
}

/// Cosine similarity between every patch of frame `ta` and every patch of
/// frame `tb`: `[(Hs·Ws)×(Hs·Ws)]`.
pub fn frame_similarity<T: Scalar>(features: &Tensor<T>, ta: usize, tb: usize, eps: T) -> Result<Tensor<T>> {
    let dims = GridDims::of_features(features)?;
    if ta >= dims.frames || tb >= dims.frames {
        return Err(Error::Argument(format!(
            "frames ({ta}, {tb}) out of range for {} frames",
            dims.frames
        )));
    }
    ops::cosine_similarity_rows(&frame_rows(features, ta)?, &frame_rows(features, tb)?, eps)
}

/// Similarity of frame `t` against frame `t + 1`.
pub fn frame_pair_similarity<T: Scalar>(features: &Tensor<T>, t: usize, eps: T) -> Result<Tensor<T>> {
    let dims = GridDims::of_features(features)?;
    if t + 1 >= dims.frames {
        return Err(Error::Argument(format!(
            "frame pair index {t} out of range for {} frames",
            dims.frames
        )));
    }
    frame_similarity(features, t, t + 1, eps)
}

/// Per-node top-`K` motion candidates `(Δx, Δy, w)`, sorted by descending `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicVectors<T> {
    pub dims: GridDims,
    pub k: usize,
    /// Target node ids for the `(T−1)·Hs·Ws` nodes that have a next frame.
    pub targets: Vec<u32>,
    /// `[N×K×3]`; rows of frame `T−1` are zero.
    pub values: Tensor<T>,
}

impl<T: Scalar> DynamicVectors<T> {
    pub fn get(&self, node: usize, j: usize) -> (T, T, T) {
        let o = (node * self.k + j) * 3;
        let d = self.values.data();
        (d[o], d[o + 1], d[o + 2])
    }

    /// `(node, target)` for every stored candidate, row-major in `(node, j)`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.targets
            .iter()
            .enumerate()
            .map(|(r, &t)| (r / self.k, t as usize))
            .collect()
    }

    pub fn storage_bytes(&self) -> usize {
        self.targets.len() * 4 + self.values.len() * T::BYTES
    }
}

pub fn init_dynamic_vectors<T: Scalar>(features: &Tensor<T>, k: usize, eps: T) -> Result<DynamicVectors<T>> {
    let dims = GridDims::of_features(features)?;
    let p = dims.per_frame();
    if k == 0 || k > p {
        return Err(Error::Argument(format!("K must be in 1..={p}, got {k}")));
    }
    if dims.frames < 2 {
        return Err(Error::Argument("dynamic vectors need at least two frames".into()));
    }
    let mut targets = vec![0u32; (dims.frames - 1) * p * k];
    let mut values = vec![T::zero(); dims.nodes() * k * 3];
    for t in 0..dims.frames - 1 {
        let sim = frame_pair_similarity(features, t, eps)?;
        let rows: Vec<Vec<(usize, T)>> = sim
            .data()
            .par_chunks(p)
            .map(|row| topk_desc(row, k))
            .collect::<Result<_>>()?;
        for (local, picks) in rows.into_iter().enumerate() {
            let i = t * p + local;
            for (j, (cand, w)) in picks.into_iter().enumerate() {
                let target = (t + 1) * p + cand;
                targets[i * k + j] = target as u32;
                let (dx, dy) = dims.delta(i, target);
                let o = (i * k + j) * 3;
                values[o] = c(dx as f64);
                values[o + 1] = c(dy as f64);
                values[o + 2] = w;
            }
        }
    }
    Ok(DynamicVectors {
        dims,
        k,
        targets,
        values: Tensor::new(&[dims.nodes(), k, 3], values)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Spatial,
    Backward,
    Forward,
}

impl EdgeKind {
    pub fn code(self) -> char {
        match self {
            EdgeKind::Spatial => 'S',
            EdgeKind::Backward => 'B',
            EdgeKind::Forward => 'F',
        }
    }
}

/// Which neighbour tables [`build_edges`] fills in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeKinds {
    pub spatial: bool,
    pub backward: bool,
    pub forward: bool,
}

impl EdgeKinds {
    pub const ALL: Self = Self {
        spatial: true,
        backward: true,
        forward: true,
    };
}

/// Fixed-width neighbour rows for a subset of receiving nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable<T> {
    pub k: usize,
    pub receivers: Vec<u32>,
    /// `receivers.len()·k` neighbour ids, row-major.
    pub neighbors: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T: Scalar> NeighborTable<T> {
    pub fn empty(k: usize) -> Self {
        Self {
            k,
            receivers: Vec::new(),
            neighbors: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.receivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receivers.is_empty()
    }

    /// Number of stored `(neighbour, weight)` entries.
    pub fn entries(&self) -> usize {
        self.neighbors.len()
    }

    pub fn row(&self, r: usize) -> (usize, &[u32], &[T]) {
        let span = r * self.k..(r + 1) * self.k;
        (self.receivers[r] as usize, &self.neighbors[span.clone()], &self.weights[span])
    }

    /// `(receiver, neighbour)` per entry.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(e, &n)| (self.receivers[e / self.k] as usize, n as usize))
            .collect()
    }

    pub fn storage_bytes(&self) -> usize {
        self.receivers.len() * 4 + self.neighbors.len() * 4 + self.weights.len() * T::BYTES
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSet<T> {
    pub dims: GridDims,
    pub k: usize,
    pub spatial: NeighborTable<T>,
    pub backward: NeighborTable<T>,
    pub forward: NeighborTable<T>,
}

impl<T: Scalar> EdgeSet<T> {
    pub fn empty(dims: GridDims) -> Self {
        Self {
            dims,
            k: 0,
            spatial: NeighborTable::empty(0),
            backward: NeighborTable::empty(0),
            forward: NeighborTable::empty(0),
        }
    }

    pub fn table(&self, kind: EdgeKind) -> &NeighborTable<T> {
        match kind {
            EdgeKind::Spatial => &self.spatial,
            EdgeKind::Backward => &self.backward,
            EdgeKind::Forward => &self.forward,
        }
    }

    pub fn entries(&self) -> usize {
        self.spatial.entries() + self.backward.entries() + self.forward.entries()
    }

    pub fn storage_bytes(&self) -> usize {
        self.spatial.storage_bytes() + self.backward.storage_bytes() + self.forward.storage_bytes()
    }
}

/// Fill rows for every node of frame `t` from a similarity block against
/// frame `t_nb`. With `skip_self`, the node's own patch is excluded.
fn append_rows<T: Scalar>(
    table: &mut NeighborTable<T>,
    dims: GridDims,
    sim_rows: &[Vec<T>],
    t: usize,
    t_nb: usize,
    skip_self: bool,
) -> Result<()> {
    let p = dims.per_frame();
    let k = table.k;
    let picks: Vec<Vec<(usize, T)>> = sim_rows
        .par_iter()
        .enumerate()
        .map(|(local, row)| {
            if skip_self {
                let mut scores = row.clone();
                scores.remove(local);
                let mut sel = topk_desc(&scores, k)?;
                for s in &mut sel {
                    if s.0 >= local {
                        s.0 += 1;
                    }
                }
                Ok(sel)
            } else {
                topk_desc(row, k)
            }
        })
        .collect::<Result<_>>()?;
    for (local, sel) in picks.into_iter().enumerate() {
        table.receivers.push((t * p + local) as u32);
        for (cand, w) in sel {
            table.neighbors.push((t_nb * p + cand) as u32);
            table.weights.push(w);
        }
    }
    Ok(())
}

fn matrix_rows<T: Scalar>(m: &Tensor<T>) -> Vec<Vec<T>> {
    let cols = m.shape()[1];
    m.data().chunks(cols).map(|r| r.to_vec()).collect()
}

/// Spatial, backward and forward neighbour tables: for every node the `k`
/// most similar patches in its own frame (excluding itself), the previous
/// frame and the next frame. Frame 0 has no backward rows and frame `T−1`
/// no forward rows.
pub fn build_edges<T: Scalar>(features: &Tensor<T>, k: usize, eps: T, kinds: EdgeKinds) -> Result<EdgeSet<T>> {
    let dims = GridDims::of_features(features)?;
    let p = dims.per_frame();
    if k == 0 || k + 1 > p {
        return Err(Error::Argument(format!(
            "edge k must be in 1..={} for a {}x{} grid, got {k}",
            p.saturating_sub(1),
            dims.hs,
            dims.ws
        )));
    }
    let mut set = EdgeSet {
        dims,
        k,
        spatial: NeighborTable::empty(k),
        backward: NeighborTable::empty(k),
        forward: NeighborTable::empty(k),
    };
    if kinds.spatial {
        for t in 0..dims.frames {
            let sim = frame_similarity(features, t, t, eps)?;
            append_rows(&mut set.spatial, dims, &matrix_rows(&sim), t, t, true)?;
        }
    }
    if kinds.forward || kinds.backward {
        for t in 0..dims.frames.saturating_sub(1) {
            let sim = frame_pair_similarity(features, t, eps)?;
            if kinds.forward {
                append_rows(&mut set.forward, dims, &matrix_rows(&sim), t, t + 1, false)?;
            }
            if kinds.backward {
                let back = ops::transpose2d(&sim)?;
                append_rows(&mut set.backward, dims, &matrix_rows(&back), t + 1, t, false)?;
            }
        }
    }
    if kinds.backward {
        // rows were appended per frame pair, so they are already in node order
        debug_assert!(set.backward.receivers.windows(2).all(|w| w[0] < w[1]));
    }
    Ok(set)
}

/// Graph of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGraph<T> {
    pub dynamic: DynamicVectors<T>,
    pub edges: EdgeSet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionGraph<T> {
    pub dims: GridDims,
    pub k: usize,
    pub views: Vec<ViewGraph<T>>,
}

impl<T: Scalar> MotionGraph<T> {
    /// Build from per-view `T×Hs×Ws×C` feature values.
    pub fn build(views: &[Tensor<T>], k: usize, eps: T, kinds: EdgeKinds) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::Argument("motion graph needs at least one view".into()))?;
        let dims = GridDims::of_features(first)?;
        let mut out = Vec::with_capacity(views.len());
        for f in views {
            if GridDims::of_features(f)? != dims {
                return Err(Error::dim(
                    "motion graph",
                    format!("view extent {:?} differs from {:?}", f.shape(), first.shape()),
                ));
            }
            out.push(ViewGraph {
                dynamic: init_dynamic_vectors(f, k, eps)?,
                edges: build_edges(f, k, eps, kinds)?,
            });
        }
        Ok(Self { dims, k, views: out })
    }

    /// Bytes of all stored edges and dynamic vectors plus the header.
    pub fn storage_bytes(&self) -> usize {
        GRAPH_HEADER_BYTES
            + self
                .views
                .iter()
                .map(|v| v.dynamic.storage_bytes() + v.edges.storage_bytes())
                .sum::<usize>()
    }

    /// Line-oriented edge dump: a `#` header, then
    /// `view m type {S|B|F} src dst weight` per edge (views 1-based).
    pub fn dump(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(
            out,
            "# T={} Hs={} Ws={} k={} views={}",
            self.dims.frames,
            self.dims.hs,
            self.dims.ws,
            self.k,
            self.views.len()
        )?;
        for (m, view) in self.views.iter().enumerate() {
            for kind in [EdgeKind::Spatial, EdgeKind::Backward, EdgeKind::Forward] {
                let table = view.edges.table(kind);
                for r in 0..table.rows() {
                    let (src, nbrs, ws) = table.row(r);
                    for (&dst, &w) in nbrs.iter().zip(ws) {
                        writeln!(out, "view {} type {} {src} {dst} {w}", m + 1, kind.code())?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bytes of a dense all-pairs similarity matrix for every adjacent frame pair.
pub fn dense_similarity_bytes<T: Scalar>(dims: GridDims) -> usize {
    let p = dims.per_frame();
    dims.frames.saturating_sub(1) * p * p * T::BYTES
}

// ---- differentiable views of the graph --------------------------------------

/// Flatten a `T×Hs×Ws×C` variable to `[N×C]`.
pub fn flatten_nodes<T: Scalar>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let s = tape.shape(features)?;
    if s.len() != 4 {
        return Err(Error::dim("flatten_nodes", format!("expected rank 4, got {s:?}")));
    }
    tape.reshape(features, &[s[0] * s[1] * s[2], s[3]])
}

/// `[rows×3]` triplets: constant `(Δx, Δy)` and a tape-evaluated cosine weight
/// for the `pairs`, placed at `slots` (remaining rows are zero).
fn triplets<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: Var,
    pairs: &[(usize, usize)],
    slots: &[usize],
    rows: usize,
    dims: GridDims,
    eps: T,
) -> Result<Var> {
    let mut deltas = vec![T::zero(); rows * 2];
    for (&(i, j), &s) in pairs.iter().zip(slots) {
        let (dx, dy) = dims.delta(i, j);
        deltas[2 * s] = c(dx as f64);
        deltas[2 * s + 1] = c(dy as f64);
    }
    let deltas = tape.constant(Tensor::new(&[rows, 2], deltas)?);
    let w = tape.pair_cosine(nodes, pairs, eps)?;
    let w = tape.reshape(w, &[pairs.len(), 1])?;
    let w = if pairs.len() == rows {
        w
    } else {
        tape.scatter_rows(w, slots, rows)?
    };
    tape.concat(&[deltas, w], 1)
}

/// Dynamic vectors as a `[N·K×3]` variable whose weights are differentiable
/// in the flattened node features `nodes: [N×C]`.
pub fn dynamic_vector_input<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: Var,
    dv: &DynamicVectors<T>,
    eps: T,
) -> Result<Var> {
    let pairs = dv.pairs();
    let slots: Vec<usize> = (0..pairs.len()).collect();
    triplets(tape, nodes, &pairs, &slots, dv.dims.nodes() * dv.k, dv.dims, eps)
}

/// Edge attributes `(Δx, Δy, w)` per table entry, `[entries×3]`.
pub fn edge_attributes<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: Var,
    table: &NeighborTable<T>,
    dims: GridDims,
    eps: T,
) -> Result<Var> {
    if table.is_empty() {
        return Err(Error::Argument("edge attributes of an empty table".into()));
    }
    let pairs = table.pairs();
    let slots: Vec<usize> = (0..pairs.len()).collect();
    triplets(tape, nodes, &pairs, &slots, pairs.len(), dims, eps)
}

// ---- node features -----------------------------------------------------------

/// Tendency and location embeddings of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeInitParams {
    pub tendency: Mlp2,
    pub location: Option<Mlp2>,
}

impl NodeInitParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        view: usize,
        d_tf: usize,
        d_lf: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let tendency = Mlp2::register(store, &format!("graph.view{view}.tendency"), 3, d_tf, d_tf, rng)?;
        let location = match d_lf {
            Some(d) => Some(Mlp2::register(store, &format!("graph.view{view}.location"), 2, d, d, rng)?),
            None => None,
        };
        Ok(Self { tendency, location })
    }

    pub fn width(&self) -> usize {
        self.tendency.second.outputs + self.location.map_or(0, |l| l.second.outputs)
    }
}

/// Shared per-triplet MLP followed by a max over each node's `k` triplets:
/// `[n·k×3] -> [n×d_tf]`.
pub fn tendency_feature<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mlp: &Mlp2,
    triplets: Var,
    k: usize,
    slope: T,
) -> Result<Var> {
    let e = mlp.forward(tape, store, triplets, slope)?;
    tape.group_max(e, k)
}

/// Normalized grid coordinates `(x/Ws, y/Hs)` of every node, `[N×2]`.
pub fn location_inputs<T: Scalar>(dims: GridDims) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(dims.nodes() * 2);
    for i in 0..dims.nodes() {
        let (_, y, x) = dims.coords(i);
        data.push(c(x as f64 / dims.ws as f64));
        data.push(c(y as f64 / dims.hs as f64));
    }
    Tensor::new(&[dims.nodes(), 2], data)
}

pub fn location_feature<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mlp: &Mlp2,
    dims: GridDims,
    slope: T,
) -> Result<Var> {
    let x = tape.constant(location_inputs(dims)?);
    mlp.forward(tape, store, x, slope)
}

/// `[location | tendency]` node features, `[N×d_mf]`.
pub fn init_node_features<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &NodeInitParams,
    dims: GridDims,
    dynamic: Var,
    k: usize,
    slope: T,
) -> Result<Var> {
    let tf = tendency_feature(tape, store, &params.tendency, dynamic, k, slope)?;
    match &params.location {
        Some(mlp) => {
            let lf = location_feature(tape, store, mlp, dims, slope)?;
            tape.concat(&[lf, tf], 1)
        }
        None => Ok(tf),
    }
}

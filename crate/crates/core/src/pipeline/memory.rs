//! Storage of the sparse motion graph against a dense all-pairs similarity
//! matrix, measured on real graphs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{dense_similarity_bytes, EdgeKinds, GridDims, MotionGraph, GRAPH_HEADER_BYTES};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryRow {
    /// Patches per frame, `Hs·Ws`.
    pub n: usize,
    pub hs: usize,
    pub ws: usize,
    pub graph_bytes: usize,
    pub dense_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
    pub graph_slope: f64,
    pub dense_slope: f64,
}

impl MemoryReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,hs,ws,graph_bytes,dense_bytes\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.n, r.hs, r.ws, r.graph_bytes, r.dense_bytes));
        }
        s.push_str(&format!("# slopes graph={:.4} dense={:.4}\n", self.graph_slope, self.dense_slope));
        s
    }
}

/// Square grid for a patch count that is a perfect square.
pub fn square_grid(n: usize) -> Result<(usize, usize)> {
    let side = (n as f64).sqrt().round() as usize;
    if side == 0 || side * side != n {
        return Err(Error::Argument(format!("{n} is not a perfect square; give the grid as HsxWs")));
    }
    Ok((side, side))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

/// Bytes of a single-view `f32` motion graph with all edge kinds, built
/// from random `channels`-wide features.
pub fn graph_bytes(hs: usize, ws: usize, frames: usize, k: usize, channels: usize, seed: u64) -> Result<usize> {
    if k == 0 {
        return Ok(GRAPH_HEADER_BYTES);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::<f32>::rand_uniform(&[frames, hs, ws, channels], -1.0, 1.0, &mut rng)?;
    Ok(MotionGraph::build(&[f], k, 1e-8, EdgeKinds::ALL)?.storage_bytes())
}

pub fn bench_memory(sizes: &[(usize, usize)], frames: usize, k: usize, channels: usize, seed: u64) -> Result<MemoryReport> {
    if sizes.is_empty() {
        return Err(Error::Argument("no sizes given".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &(hs, ws) in sizes {
        rows.push(MemoryRow {
            n: hs * ws,
            hs,
            ws,
            graph_bytes: graph_bytes(hs, ws, frames, k, channels, seed)?,
            dense_bytes: dense_similarity_bytes::<f32>(GridDims::new(frames, hs, ws)),
        });
    }
    let fit = |f: fn(&MemoryRow) -> usize| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, f(r) as f64)).collect();
        log_log_slope(&pts)
    };
    Ok(MemoryReport {
        graph_slope: fit(|r| r.graph_bytes),
        dense_slope: fit(|r| r.dense_bytes),
        rows,
    })
}

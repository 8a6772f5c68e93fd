//! Reverse-mode differentiation over tensor-valued nodes.
//!
//! A [`Tape`] records one node per primitive in execution order. Each node
//! keeps its value, the nodes it was computed from and a backward rule that
//! maps the output gradient to input gradients. [`Tape::backward`] walks the
//! nodes once in reverse, accumulates gradients, adds them into the
//! [`ParamStore`] and clears the tape.
//!
//! Handles ([`Var`]) carry the tape id and generation so that a handle from
//! another tape, or from before a `backward`, is rejected with a state error.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops;
use super::scalar::{c, Scalar};
use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named learnable tensors with gradient buffers, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = value.zeros_like();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    generation: u32,
    index: usize,
}

/// What a backward rule sees: the output gradient, input and output values,
/// and which inputs actually need a gradient.
pub struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Op,
    Constant,
    Leaf,
    Param(ParamId),
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    origin: Origin,
    requires_grad: bool,
}

/// Gradients of non-parameter leaves produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    generation: u32,
    leaves: HashMap<usize, Tensor<T>>,
    /// Number of recorded ops whose backward rule ran.
    pub ops_visited: usize,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape || var.generation != self.generation {
            return None;
        }
        self.leaves.get(&var.index)
    }
}

pub struct Tape<T: Scalar> {
    id: u64,
    generation: u32,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, usize>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates: no backward rules are stored.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.backward.is_some()).count()
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id {
            return Err(Error::State(format!(
                "variable belongs to tape {} but was used on tape {}",
                var.tape, self.id
            )));
        }
        if var.generation != self.generation || var.index >= self.nodes.len() {
            return Err(Error::State(
                "variable is stale: its tape was cleared by a backward pass".into(),
            ));
        }
        Ok(var.index)
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            generation: self.generation,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            origin: Origin::Constant,
            requires_grad: false,
        })
    }

    /// A differentiable input whose gradient is returned by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            origin: Origin::Leaf,
            requires_grad,
        })
    }

    /// Bind a parameter; repeated calls within one pass share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&index) = self.param_vars.get(&id) {
            return Var {
                tape: self.id,
                generation: self.generation,
                index,
            };
        }
        let requires_grad = self.grad_enabled;
        let var = self.push(Node {
            value: store.get(id).value.clone(),
            inputs: Vec::new(),
            backward: None,
            origin: Origin::Param(id),
            requires_grad,
        });
        self.param_vars.insert(id, var.index);
        var
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        Ok(self.param(store, id))
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        let i = self.index(var)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, var: Var) -> Result<Vec<usize>> {
        Ok(self.value(var)?.shape().to_vec())
    }

    /// Record a primitive. `backward` receives the values of `inputs` in order
    /// and must return one optional gradient per input.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<Vec<_>>>()?;
        let requires_grad = self.grad_enabled && idx.iter().any(|&i| self.nodes[i].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                inputs: idx,
                backward: Some(Box::new(backward)),
                origin: Origin::Op,
                requires_grad: true,
            }
        } else {
            Node {
                value,
                inputs: Vec::new(),
                backward: None,
                origin: Origin::Op,
                requires_grad: false,
            }
        };
        Ok(self.push(node))
    }

    /// Reverse sweep from a single-element `loss`. Parameter gradients are
    /// added into `store`; leaf gradients are returned. The tape is cleared.
    pub fn backward(&mut self, loss: Var, store: Option<&mut ParamStore<T>>) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a single-element loss, got {}",
                shape_str(self.nodes[root].value.shape())
            )));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::State(
                "loss does not depend on any differentiable input".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one())?);
        let mut visited = 0;
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.backward {
                visited += 1;
                let args = BackwardArgs {
                    grad: &g,
                    inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                    output: &node.value,
                    needs: node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect(),
                };
                let input_grads = rule(&args)?;
                for (&j, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[j].requires_grad {
                        continue;
                    }
                    if ig.shape() != self.nodes[j].value.shape() {
                        return Err(Error::State(format!(
                            "backward rule produced gradient {} for input {}",
                            shape_str(ig.shape()),
                            shape_str(self.nodes[j].value.shape())
                        )));
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&ig)?,
                        slot => *slot = Some(ig),
                    }
                }
            }
            // leaves and params keep their gradient for collection below
            if !matches!(node.origin, Origin::Op) {
                grads[i] = Some(g);
            }
        }

        let mut leaves = HashMap::new();
        let mut store = store;
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[i].take() else { continue };
            match node.origin {
                Origin::Leaf => {
                    leaves.insert(i, g);
                }
                Origin::Param(id) => {
                    if let Some(s) = store.as_deref_mut() {
                        s.get_mut(id).grad.add_assign(&g)?;
                    }
                }
                _ => {}
            }
        }
        let out = Gradients {
            tape: self.id,
            generation: self.generation,
            leaves,
            ops_visited: visited,
        };
        self.clear();
        Ok(out)
    }

    /// Drop all nodes; outstanding handles become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.generation = self.generation.wrapping_add(1);
    }

    // ---- primitives -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a)?.shape(), self.value(b)?.shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{} vs {}", shape_str(sa), shape_str(sb))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a)?, self.value(b)?);
        Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q)?;
        self.record(v, &[a, b], |args| Ok(vec![Some(args.grad.clone()), Some(args.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q)?;
        self.record(v, &[a, b], |args| {
            Ok(vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q)?;
        self.record(v, &[a, b], |args| {
            let prod = |x: &Tensor<T>| {
                Tensor::new(
                    x.shape(),
                    x.data().iter().zip(args.grad.data()).map(|(&p, &g)| p * g).collect(),
                )
            };
            Ok(vec![Some(prod(args.inputs[1])?), Some(prod(args.inputs[0])?)])
        })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let v = self.value(a)?.map(|x| x * factor);
        self.record(v, &[a], move |args| Ok(vec![Some(args.grad.map(|g| g * factor))]))
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x)?, self.value(b)?);
        let cols = *xv.shape().last().expect("rank >= 1");
        if bv.len() != cols {
            return Err(Error::dim(
                "add_bias",
                format!("bias {} for input {}", shape_str(bv.shape()), shape_str(xv.shape())),
            ));
        }
        let data = xv
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&p, &q)| p + q))
            .collect();
        let v = Tensor::new(xv.shape(), data)?;
        self.record(v, &[x, b], move |args| {
            let mut gb = vec![T::zero(); cols];
            for row in args.grad.data().chunks(cols) {
                for (acc, &g) in gb.iter_mut().zip(row) {
                    *acc = *acc + g;
                }
            }
            Ok(vec![
                Some(args.grad.clone()),
                Some(Tensor::new(args.inputs[1].shape(), gb)?),
            ])
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a)?, self.value(b)?)?;
        self.record(v, &[a, b], |args| {
            let ga = if args.needs[0] {
                Some(ops::matmul(args.grad, &ops::transpose2d(args.inputs[1])?)?)
            } else {
                None
            };
            let gb = if args.needs[1] {
                Some(ops::matmul(&ops::transpose2d(args.inputs[0])?, args.grad)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    /// `x·W + b` for row-major `x: [N×in]`, `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let v = ops::leaky_relu(self.value(x)?, slope);
        self.record(v, &[x], move |args| {
            Ok(vec![Some(ops::leaky_relu_backward(args.inputs[0], args.grad, slope))])
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(|p| p.tanh());
        self.record(v, &[x], |args| {
            let d = args
                .output
                .data()
                .iter()
                .zip(args.grad.data())
                .map(|(&y, &g)| g * (T::one() - y * y))
                .collect();
            Ok(vec![Some(Tensor::new(args.output.shape(), d)?)])
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(|p| p.exp());
        self.record(v, &[x], |args| {
            let d = args
                .output
                .data()
                .iter()
                .zip(args.grad.data())
                .map(|(&y, &g)| g * y)
                .collect();
            Ok(vec![Some(Tensor::new(args.output.shape(), d)?)])
        })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(|p| p * p);
        self.record(v, &[x], |args| {
            let two = c::<T>(2.0);
            let d = args.inputs[0]
                .data()
                .iter()
                .zip(args.grad.data())
                .map(|(&p, &g)| two * p * g)
                .collect();
            Ok(vec![Some(Tensor::new(args.output.shape(), d)?)])
        })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(|p| p.abs());
        self.record(v, &[x], |args| {
            let d = args.inputs[0]
                .data()
                .iter()
                .zip(args.grad.data())
                .map(|(&p, &g)| {
                    if p > T::zero() {
                        g
                    } else if p < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok(vec![Some(Tensor::new(args.output.shape(), d)?)])
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x)?.sum());
        self.record(v, &[x], |args| {
            Ok(vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.data()[0])?)])
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / c::<T>(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x)?.clone().reshape(shape)?;
        self.record(v, &[x], |args| {
            Ok(vec![Some(args.grad.clone().reshape(args.inputs[0].shape())?)])
        })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = ops::permute(self.value(x)?, perm)?;
        let inv = ops::inverse_permutation(perm);
        self.record(v, &[x], move |args| Ok(vec![Some(ops::permute(args.grad, &inv)?)]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values = parts
            .iter()
            .map(|&p| self.value(p))
            .collect::<Result<Vec<_>>>()?;
        let v = ops::concat(&values, axis)?;
        let extents: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
        self.record(v, parts, move |args| {
            let mut out = Vec::with_capacity(extents.len());
            let mut start = 0;
            for (i, &e) in extents.iter().enumerate() {
                out.push(if args.needs[i] {
                    Some(ops::slice(args.grad, axis, start, e)?)
                } else {
                    None
                });
                start += e;
            }
            Ok(out)
        })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice(self.value(x)?, axis, start, len)?;
        self.record(v, &[x], move |args| {
            Ok(vec![Some(ops::slice_backward(args.grad, args.inputs[0].shape(), axis, start)?)])
        })
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = ops::gather_rows(self.value(x)?, index)?;
        let index = index.to_vec();
        self.record(v, &[x], move |args| {
            Ok(vec![Some(ops::scatter_rows(args.grad, &index, args.inputs[0].shape()[0])?)])
        })
    }

    pub fn scatter_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let v = ops::scatter_rows(self.value(x)?, index, rows)?;
        let index = index.to_vec();
        self.record(v, &[x], move |args| Ok(vec![Some(ops::gather_rows(args.grad, &index)?)]))
    }

    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (v, arg) = ops::group_max(self.value(x)?, group)?;
        self.record(v, &[x], move |args| {
            let input = args.inputs[0];
            let cols = input.shape()[1];
            let mut g = input.zeros_like();
            for (o, &row) in arg.iter().enumerate() {
                let col = o % cols;
                let gi = row * cols + col;
                g.data_mut()[gi] = g.data()[gi] + args.grad.data()[o];
            }
            Ok(vec![Some(g)])
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv2d(
            self.value(x)?,
            self.value(w)?,
            match b {
                Some(b) => Some(self.value(b)?),
                None => None,
            },
            stride,
            pad,
        )?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record(v, &inputs, move |args| {
            let (gx, gw, gb) =
                ops::conv2d_backward(args.inputs[0], args.inputs[1], args.grad, stride, pad)?;
            let mut out = vec![Some(gx), Some(gw)];
            if args.inputs.len() == 3 {
                out.push(Some(gb.reshape(args.inputs[2].shape())?));
            }
            Ok(out)
        })
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = ops::pixel_unshuffle(self.value(x)?, r)?;
        self.record(v, &[x], move |args| Ok(vec![Some(ops::pixel_shuffle(args.grad, r)?)]))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = ops::pixel_shuffle(self.value(x)?, r)?;
        self.record(v, &[x], move |args| Ok(vec![Some(ops::pixel_unshuffle(args.grad, r)?)]))
    }

    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = ops::upsample_nearest(self.value(x)?, r)?;
        self.record(v, &[x], move |args| {
            Ok(vec![Some(ops::upsample_nearest_backward(args.grad, r)?)])
        })
    }

    pub fn cosine_similarity_rows(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let v = ops::cosine_similarity_rows(self.value(a)?, self.value(b)?, eps)?;
        self.record(v, &[a, b], move |args| {
            let (ga, gb) =
                ops::cosine_similarity_rows_backward(args.inputs[0], args.inputs[1], args.grad, eps)?;
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    /// Differentiable cosine similarity of selected row pairs of `x`.
    pub fn pair_cosine(&mut self, x: Var, pairs: &[(usize, usize)], eps: T) -> Result<Var> {
        let v = ops::pair_cosine(self.value(x)?, pairs, eps)?;
        let pairs = pairs.to_vec();
        self.record(v, &[x], move |args| {
            Ok(vec![Some(ops::pair_cosine_backward(args.inputs[0], &pairs, args.grad, eps)?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_and_quadratic_grads() {
        let mut store = ParamStore::new();
        let id = store.add("p", t(&[2], &[1.0, -2.0])).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let s = tape.sum(p).unwrap();
        tape.backward(s, Some(&mut store)).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0]);

        store.zero_grads();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s, Some(&mut store)).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, -4.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let id = store.add("p", t(&[1], &[3.0])).unwrap();
        let mut tape = Tape::new();
        for _ in 0..2 {
            let p = tape.param(&store, id);
            let s = tape.sum(p).unwrap();
            tape.backward(s, Some(&mut store)).unwrap();
        }
        assert_eq!(store.get(id).grad.data(), &[2.0]);
        store.zero_grads();
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn foreign_and_stale_vars_are_state_errors() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(t(&[1], &[1.0]));
        assert!(matches!(b.sum(x), Err(Error::State(_))));
        assert!(matches!(b.backward(x, None), Err(Error::State(_))));
        let s = a.sum(x).unwrap();
        a.backward(s, None).unwrap();
        assert!(a.is_empty());
        assert!(matches!(a.value(x), Err(Error::State(_))));
        assert!(matches!(a.backward(s, None), Err(Error::State(_))));
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.5, -1.5]));
        let a = tape.tanh(x).unwrap();
        let b = tape.square(a).unwrap();
        let c2 = tape.add(a, b).unwrap();
        let d = tape.sum(c2).unwrap();
        assert_eq!(tape.recorded_ops(), 4);
        let g = tape.backward(d, None).unwrap();
        assert_eq!(g.ops_visited, 4);
        let gx = g.get(x).unwrap();
        for (i, &xv) in [0.5f64, -1.5].iter().enumerate() {
            let th = xv.tanh();
            let expect = (1.0 + 2.0 * th) * (1.0 - th * th);
            assert!((gx.data()[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.leaf(t(&[1], &[1.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.recorded_ops(), 0);
        assert!(tape.backward(s, None).is_err());
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", t(&[1], &[0.0])).unwrap();
        assert!(store.add("a", t(&[1], &[0.0])).is_err());
    }
}

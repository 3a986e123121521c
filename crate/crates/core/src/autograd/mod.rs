//! A small reverse-mode autodiff engine over [`Tensor`]s.
//!
//! Every backward rule is written with the same differentiable operations as
//! the forward pass, so [`grad`] with `create_graph = true` returns gradients
//! that can themselves be differentiated. The gradient penalty relies on this
//! to push `‖∇ₓD‖` back into the critic weights.
//!
//! Graphs are single-threaded (`Rc`); numeric kernels underneath may use
//! several threads but always reduce in a fixed order.

mod conv;
mod field_ops;
mod ops;
mod tensor;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

pub use conv::{conv_out_size, ConvGeom};
pub use tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Local derivative rule of one recorded operation.
pub(crate) trait Op {
    /// Gradients for each input given the output gradient. Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(&self, inputs: &[Var], grad: &Var, needs: &[bool]) -> Vec<Option<Var>>;
}

struct Node {
    id: u64,
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Option<Box<dyn Op>>,
    inputs: Vec<Var>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl Var {
    fn make(value: Rc<Tensor>, requires_grad: bool, op: Option<Box<dyn Op>>, inputs: Vec<Var>) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad, op, inputs }))
    }

    /// A value that gradients never flow into.
    pub fn constant(t: Tensor) -> Var {
        Self::make(Rc::new(t), false, None, Vec::new())
    }

    /// A differentiable leaf (parameter or input under study).
    pub fn leaf(t: Tensor) -> Var {
        Self::make(Rc::new(t), true, None, Vec::new())
    }

    pub(crate) fn from_op(value: Tensor, op: impl Op + 'static, inputs: Vec<Var>) -> Var {
        if inputs.iter().any(|v| v.requires_grad()) {
            Self::make(Rc::new(value), true, Some(Box::new(op)), inputs)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Self::make(self.0.value.clone(), false, None, Vec::new())
    }
}

/// Gradients of the one-element `output` with respect to each of `wrt`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients are recorded and differentiable.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().numel(), 1, "grad() needs a one-element output");
    let seed = Var::constant(Tensor::full(output.shape(), 1.0));
    grad_with(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product: back-propagates `seed` (shaped like `output`).
pub fn grad_with(output: &Var, seed: Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(seed.shape(), output.shape());
    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();

    // Collect the differentiable subgraph below `output`.
    let mut nodes: Vec<Var> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for inp in &v.0.inputs {
            stack.push(inp.clone());
        }
        nodes.push(v);
    }
    // Inputs are always created before their consumers.
    nodes.sort_by_key(|v| v.id());

    let mut reaches: HashSet<u64> = HashSet::new();
    for v in &nodes {
        if targets.contains(&v.id()) || v.0.inputs.iter().any(|i| reaches.contains(&i.id())) {
            reaches.insert(v.id());
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    if reaches.contains(&output.id()) {
        grads.insert(output.id(), if create_graph { seed } else { seed.detach() });
    }
    for v in nodes.iter().rev() {
        let Some(op) = v.0.op.as_ref() else { continue };
        let g = if targets.contains(&v.id()) {
            grads.get(&v.id()).cloned()
        } else {
            grads.remove(&v.id())
        };
        let Some(g) = g else { continue };
        let needs: Vec<bool> = v.0.inputs.iter().map(|i| reaches.contains(&i.id())).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let local = if create_graph {
            op.backward(&v.0.inputs, &g, &needs)
        } else {
            let detached: Vec<Var> = v.0.inputs.iter().map(Var::detach).collect();
            op.backward(&detached, &g.detach(), &needs)
        };
        for ((inp, gi), need) in v.0.inputs.iter().zip(local).zip(&needs) {
            if !need {
                continue;
            }
            let gi = gi.expect("backward rule skipped a needed gradient");
            debug_assert_eq!(gi.shape(), inp.shape());
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => prev.add(&gi),
                None => gi,
            };
            grads.insert(inp.id(), acc);
        }
    }

    wrt.iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
        })
        .collect()
}

#[cfg(test)]
mod tests;

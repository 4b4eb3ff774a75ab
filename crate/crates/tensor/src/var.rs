//! Graph nodes and the reverse-mode engine.
//!
//! Every backward rule is written in terms of [`Var`] ops, so running the
//! engine with `create_graph = true` records the backward pass itself and
//! the returned gradients can be differentiated again.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{Shape, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording until dropped.
#[must_use]
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

fn set_grad_enabled(on: bool) -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(on));
    NoGradGuard { prev }
}

/// Backward rule of one recorded op.
///
/// `backward` receives the op's own output node and the incoming gradient
/// and returns one optional gradient per entry of `inputs`, in order.
pub trait GradFn {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    fn backward(&self, out: &Var, grad: &Var) -> Vec<Option<Var>>;
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// A tensor participating in the autodiff graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.grad_fn.as_ref().map(|g| g.name()).unwrap_or("leaf");
        write!(f, "Var#{}<{}>{:?}", self.0.id, op, self.0.value)
    }
}

impl Var {
    /// A constant: never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: false, grad_fn: None }))
    }

    /// A leaf that gradients are accumulated for (a parameter or an input
    /// being differentiated).
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: true, grad_fn: None }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    /// Records an op output. The node only keeps its backward rule when
    /// grad mode is on and some input requires a gradient.
    pub fn from_op(value: Tensor, grad_fn: impl GradFn + 'static) -> Var {
        let track = is_grad_enabled() && grad_fn.inputs().iter().any(|v| v.requires_grad());
        if track {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad: true,
                grad_fn: Some(Box::new(grad_fn)),
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.grad_fn.as_ref().map(|g| g.name()).unwrap_or("leaf")
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }
}

/// Reverse topological order of the nodes that require a gradient.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // Iterative post-order DFS: (node, children_pushed).
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(f) = &v.0.grad_fn {
            for inp in f.inputs().into_iter().rev() {
                if inp.requires_grad() && !seen.contains(&inp.id()) {
                    stack.push((inp, false));
                }
            }
        }
    }
    order.reverse();
    order
}

/// Gradients of `output` seeded with `seed` (same shape as `output`) for
/// every node that requires one, keyed by node id.
fn run_backward(output: &Var, seed: Var, create_graph: bool) -> HashMap<u64, Var> {
    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    if !output.requires_grad() {
        return grads;
    }
    grads.insert(output.id(), seed);
    let order = topo_order(output);
    let mut done: HashMap<u64, Var> = HashMap::new();
    for node in order {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if let Some(f) = &node.0.grad_fn {
            let inputs = f.inputs();
            let contribs = f.backward(&node, &g);
            debug_assert_eq!(inputs.len(), contribs.len(), "{} backward arity", f.name());
            for (inp, c) in inputs.into_iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(c.shape(), inp.shape(), "{} gradient shape", f.name());
                let acc = match grads.remove(&inp.id()) {
                    Some(prev) => &prev + &c,
                    None => c,
                };
                grads.insert(inp.id(), acc);
            }
        }
        done.insert(node.id(), g);
    }
    done
}

/// Gradient of a scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves graph nodes
/// and can be differentiated again (double backward).
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
    if output.shape().numel() != 1 {
        return Err(TensorError::NonScalar(output.shape()));
    }
    let seed = Var::constant(Tensor::full(output.shape(), 1.0));
    let mut all = run_backward(output, seed, create_graph);
    Ok(wrt.iter().map(|v| all.remove(&v.id())).collect())
}

/// Vector-Jacobian product: gradient of `<output, seed>`.
pub fn grad_seeded(output: &Var, seed: &Tensor, wrt: &[&Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
    if seed.shape() != output.shape() {
        return Err(TensorError::shape("grad_seeded", format!("seed {} vs output {}", seed.shape(), output.shape())));
    }
    let mut all = run_backward(output, Var::constant(seed.clone()), create_graph);
    Ok(wrt.iter().map(|v| all.remove(&v.id())).collect())
}

/// First-order gradients for every leaf reachable from a scalar `loss`.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if loss.shape().numel() != 1 {
        return Err(TensorError::NonScalar(loss.shape()));
    }
    let seed = Var::constant(Tensor::full(loss.shape(), 1.0));
    let all = run_backward(loss, seed, false);
    Ok(Gradients(all.into_iter().map(|(k, v)| (k, v.value().clone())).collect()))
}

/// Leaf gradients produced by [`backward`].
#[derive(Default)]
pub struct Gradients(HashMap<u64, Tensor>);

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.0.get(&v.id())
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.0.remove(&v.id())
    }
}

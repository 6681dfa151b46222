//! Graph-recording variables and reverse-mode differentiation.
//!
//! Every op's backward pass is itself written with recorded ops, so calling
//! [`grad`] with `create_graph = true` yields gradients that can be
//! differentiated again. That is what the Wasserstein gradient penalty needs:
//! the penalty is a function of `∇ₓ D(x)` and must be differentiated with
//! respect to the critic's parameters.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        Self::set(false)
    }

    fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording a graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

/// Backward rule of a recorded op.
pub(crate) trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the gradient of the output.
    /// `needed[i]` is false when input `i` does not lead to any requested
    /// variable; implementations may return `None` for those.
    fn backward(
        &self,
        inputs: &[Var<T>],
        grad: &Var<T>,
        needed: &[bool],
    ) -> Result<Vec<Option<Var<T>>>>;

    fn supports_higher_order(&self) -> bool {
        true
    }
}

struct Node<T: Scalar> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Var<T>>,
}

struct Inner<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// A tensor that may carry a recorded computation history.
pub struct Var<T: Scalar>(Rc<Inner<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        Var(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            node,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub(crate) fn record(
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
        inputs: Vec<Var<T>>,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        if track {
            Self::make(
                value,
                true,
                Some(Node {
                    op: Box::new(op),
                    inputs,
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    /// Same value, no history.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn node(&self) -> Option<&Node<T>> {
        self.0.node.as_ref()
    }
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// Variables not reachable from `output` get a zero gradient. With
/// `create_graph` the returned gradients are themselves differentiable.
pub fn grad<T: Scalar>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
    if output.len() != 1 {
        return Err(Error::NonScalarOutput(output.shape().to_vec()));
    }
    let seed = Var::constant(Tensor::full(output.shape(), T::one()));
    grad_with_seed(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product: gradients of `⟨seed, output⟩`.
pub fn grad_with_seed<T: Scalar>(
    output: &Var<T>,
    seed: Var<T>,
    wrt: &[&Var<T>],
    create_graph: bool,
) -> Result<Vec<Var<T>>> {
    if seed.shape() != output.shape() {
        return Err(Error::shape("grad seed", seed.shape(), output.shape()));
    }
    let order = topo_order(output);
    let targets: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();

    // A variable is "needed" when it is a target or one of its inputs is.
    let mut needed: HashSet<usize> = HashSet::new();
    for v in &order {
        let hit = targets.contains(&v.id())
            || v
                .node()
                .is_some_and(|n| n.inputs.iter().any(|i| needed.contains(&i.id())));
        if hit {
            needed.insert(v.id());
        }
    }

    let _mode = NoGradGuard::set(create_graph);
    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    if needed.contains(&output.id()) {
        grads.insert(output.id(), seed);
    }

    for v in order.iter().rev() {
        let Some(node) = v.node() else { continue };
        let Some(g) = grads.get(&v.id()).cloned() else {
            continue;
        };
        if !targets.contains(&v.id()) {
            grads.remove(&v.id());
        }
        let mask: Vec<bool> = node
            .inputs
            .iter()
            .map(|i| i.requires_grad() && needed.contains(&i.id()))
            .collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        if create_graph && !node.op.supports_higher_order() {
            return Err(Error::HigherOrderUnsupported(node.op.name()));
        }
        let input_grads = node.op.backward(&node.inputs, &g, &mask)?;
        for ((input, gi), keep) in node.inputs.iter().zip(input_grads).zip(&mask) {
            let (Some(gi), true) = (gi, *keep) else { continue };
            if gi.shape() != input.shape() {
                return Err(Error::shape(node.op.name(), gi.shape(), input.shape()));
            }
            let merged = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&gi)?,
                None => gi,
            };
            grads.insert(input.id(), merged);
        }
    }

    Ok(wrt
        .iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect())
}

/// Post-order (inputs before outputs) over the tracked part of the graph.
fn topo_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((v, child)) = stack.pop() {
        let inputs_len = v.node().map_or(0, |n| n.inputs.len());
        if child < inputs_len {
            let next = v.node().unwrap().inputs[child].clone();
            stack.push((v, child + 1));
            if next.requires_grad() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(v);
        }
    }
    order
}

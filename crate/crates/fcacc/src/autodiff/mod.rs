//! Minimal reverse-mode autodiff over `ndarray`.
//!
//! A [`Graph`] is a tape of nodes created in topological order. Every op
//! records its parents and a closure computing parent gradients from the
//! output gradient. [`Graph::backward`] walks the tape in reverse, frees
//! interior gradients as it goes, and keeps gradients of leaves (parameters
//! and inputs).
//!
//! The op set is exactly what the encoder and the contrastive/clustering
//! losses need; every backward pass is covered by finite-difference tests.

mod conv;
mod elem;
mod ops;
#[cfg(test)]
mod tests;

pub(crate) use conv::conv1d_forward;
pub use elem::Elem;

use ndarray::{ArcArray, ArrayD, IxDyn};

/// Central finite-difference gradient of `f` with respect to every element of
/// every input. The oracle side of the gradient checks.
pub fn numeric_gradient<F>(f: F, inputs: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = ArrayD::<f64>::zeros(inputs[i].raw_dim());
        for pos in 0..inputs[i].len() {
            let orig = work[i].as_slice().unwrap()[pos];
            work[i].as_slice_mut().unwrap()[pos] = orig + eps;
            let fp = f(&work);
            work[i].as_slice_mut().unwrap()[pos] = orig - eps;
            let fm = f(&work);
            work[i].as_slice_mut().unwrap()[pos] = orig;
            gi.as_slice_mut().unwrap()[pos] = (fp - fm) / (2.0 * eps);
        }
        grads.push(gi);
    }
    grads
}

/// Worst relative error between an analytic and a numeric gradient, with the
/// denominator floored so near-zero entries are compared absolutely.
pub fn max_grad_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type GradFn<E> = Box<dyn Fn(&ArrayD<E>) -> Vec<ArrayD<E>>>;

pub(crate) struct Node<E: Elem> {
    value: ArcArray<E, IxDyn>,
    parents: Vec<Var>,
    grad_fn: Option<GradFn<E>>,
}

/// Computation tape. Build ops through the methods in [`ops`] and [`conv`],
/// then call [`Graph::backward`] on a scalar node.
pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert a leaf (input or parameter). Leaves have no grad_fn, so their
    /// gradients survive the backward sweep.
    pub fn leaf(&mut self, value: ArrayD<E>) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<E>,
        parents: Vec<Var>,
        grad_fn: Option<GradFn<E>>,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: value.into_shared(),
            parents,
            grad_fn,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &ArcArray<E, IxDyn> {
        &self.nodes[v.0].value
    }

    /// Value of a zero-dimensional (scalar) node.
    pub fn scalar(&self, v: Var) -> E {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar root. Returns gradients for all nodes that
    /// received one and were not consumed (leaves in particular).
    pub fn backward(&self, root: Var) -> Gradients<E> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = grad_fn(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.zip_mut_with(&pg, |a, &b| *a = *a + b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<E: Elem> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zero array when the leaf never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

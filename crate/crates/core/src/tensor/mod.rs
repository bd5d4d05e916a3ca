//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op produces a new [`Tensor`] that remembers its parents and a
//! closure mapping the output gradient to parent gradients. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph once in reverse
//! topological order and accumulates into the `grad` buffer of every leaf
//! created with `requires_grad`.

mod conv;
mod linalg;
mod nnops;
mod ops;
pub mod serialize;


pub use conv::{ConvSpec, Padding};
pub use nnops::Csr;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Maps `(grad_out, out_data, parents)` to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` without recording a graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![v], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::leaf(data, shape.to_vec(), false)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self::leaf(data, shape.to_vec(), false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Returns a new leaf sharing no graph history, tracking gradients.
    pub fn requires_grad(self) -> Self {
        let data = self.node.data.borrow().clone();
        Self::leaf(data, self.node.shape.clone(), true)
    }

    /// Copy of the values as an untracked leaf.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.data.borrow().clone(), self.node.shape.clone(), false)
    }

    /// Builds an op output. The backward closure is kept only when grad
    /// recording is on and some parent participates in differentiation.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        if !track {
            return Self::leaf(data, shape, false);
        }
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.node.shape);
        d[0]
    }

    /// In-place update of the values. Intended for optimizers and loaders
    /// operating on leaves.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.node.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: self.node.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        d.copy_from_slice(values);
        Ok(())
    }

    /// Accumulated gradient; zeros when nothing has flowed into this leaf.
    pub fn grad(&self) -> Vec<f64> {
        self.node.grad.borrow().clone().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Errors when any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        let d = self.node.data.borrow();
        match d.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: element {i} is {}", d[i]))),
        }
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape()),
            });
        }
        if !self.node.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.node.id, vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node.id) else { continue };
            match &t.node.backward {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let data = t.node.data.borrow();
                    let pgrads = f(&g, &data, &t.node.parents);
                    debug_assert_eq!(pgrads.len(), t.node.parents.len());
                    for (p, pg) in t.node.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.node.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.node.requires_grad && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0], &[3]).unwrap().requires_grad();
        let loss = x.square().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        x.square().sum_all().backward().unwrap();
        x.square().sum_all().backward().unwrap();
        assert_eq!(x.grad(), vec![4.0, 8.0]);
        x.zero_grad();
        assert_eq!(x.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let y = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap().requires_grad();
        x.sum_all().backward().unwrap();
        assert_eq!(y.grad(), vec![0.0, 0.0]);
        assert!(!y.has_grad());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        assert!(x.mul_scalar(2.0).backward().is_err());
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice: d/dx (x^2 + x^2) = 4x
        let x = Tensor::from_vec(vec![3.0], &[1]).unwrap().requires_grad();
        let y = x.mul(&x).unwrap();
        let loss = y.add(&y).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![12.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::from_vec(vec![1.0], &[1]).unwrap().requires_grad();
        let y = no_grad(|| x.square());
        assert!(!y.is_tracked());
    }

    #[test]
    fn check_finite_reports_nan() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(t.check_finite("probe"), Err(Error::NonFinite(_))));
    }
}

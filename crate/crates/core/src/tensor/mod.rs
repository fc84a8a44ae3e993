//! Minimal reverse-mode autodiff over `ndarray` f32 tensors.
//!
//! Nodes form an immutable DAG of reference-counted values. Backward passes
//! replay recorded vector-Jacobian closures; each closure builds its result
//! *through the same op layer*, so running a backward pass with
//! `create_graph = true` yields cotangents that are themselves
//! differentiable. That is what lets the gradient penalty differentiate the
//! critic's input gradient with respect to the critic's weights.
//!
//! A thread-local flag controls graph recording. With recording off (the
//! default during a plain backward pass) the very same closures execute but
//! produce constants, so first- and second-order passes share one code path.

mod conv;
mod ops;

pub use conv::{conv2d_fwd, conv2d_input_grad_fwd, conv2d_weight_grad_fwd};

use ndarray::{ArrayD, IxDyn};
use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// RAII guard flipping graph recording; restores the previous state on drop.
pub struct GradGuard {
    prev: bool,
}

impl Drop for GradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradGuard { prev }
}

/// Run a closure with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = set_grad_enabled(false);
    f()
}

/// Cumulative per-op timing, enabled with `TRYON_PROFILE=1`. Only the main
/// thread records (ops run rayon internally but are entered serially).
pub mod prof {
    use std::cell::RefCell;
    use std::collections::HashMap;
    use std::time::Instant;

    thread_local! {
        static TIMES: RefCell<HashMap<&'static str, (u64, f64)>> = RefCell::new(HashMap::new());
    }

    pub fn enabled() -> bool {
        static ON: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        *ON.get_or_init(|| std::env::var("TRYON_PROFILE").is_ok_and(|v| v == "1"))
    }

    pub fn timed<T>(name: &'static str, f: impl FnOnce() -> T) -> T {
        if !enabled() {
            return f();
        }
        let t = Instant::now();
        let out = f();
        let dt = t.elapsed().as_secs_f64();
        TIMES.with(|m| {
            let mut m = m.borrow_mut();
            let e = m.entry(name).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += dt;
        });
        out
    }

    pub fn report() -> Vec<(&'static str, u64, f64)> {
        TIMES.with(|m| {
            let mut v: Vec<_> = m.borrow().iter().map(|(k, (c, t))| (*k, *c, *t)).collect();
            v.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            v
        })
    }

    pub fn reset() {
        TIMES.with(|m| m.borrow_mut().clear());
    }
}

type Vjp = Box<dyn Fn(&Var) -> Vec<Var>>;

struct Node {
    id: u64,
    value: Rc<ArrayD<f32>>,
    parents: Vec<Var>,
    vjp: Option<Vjp>,
    requires_grad: bool,
}

fn next_id() -> u64 {
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Autodiff handle; clones share the node.
#[derive(Clone)]
pub struct Var {
    node: Rc<Node>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Var {
    /// Constant node: carries no gradient.
    pub fn constant(value: ArrayD<f32>) -> Var {
        Var {
            node: Rc::new(Node {
                id: next_id(),
                value: Rc::new(value),
                parents: Vec::new(),
                vjp: None,
                requires_grad: false,
            }),
        }
    }

    /// Trainable leaf.
    pub fn leaf(value: ArrayD<f32>) -> Var {
        Var::leaf_shared(Rc::new(value))
    }

    pub fn leaf_shared(value: Rc<ArrayD<f32>>) -> Var {
        Var {
            node: Rc::new(Node {
                id: next_id(),
                value,
                parents: Vec::new(),
                vjp: None,
                requires_grad: true,
            }),
        }
    }

    pub fn scalar(v: f32) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub(crate) fn from_op(
        value: ArrayD<f32>,
        parents: Vec<Var>,
        vjp: impl Fn(&Var) -> Vec<Var> + 'static,
    ) -> Var {
        let record = is_grad_enabled() && parents.iter().any(Var::requires_grad);
        if record {
            Var {
                node: Rc::new(Node {
                    id: next_id(),
                    value: Rc::new(value),
                    parents,
                    vjp: Some(Box::new(vjp)),
                    requires_grad: true,
                }),
            }
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn value(&self) -> &ArrayD<f32> {
        &self.node.value
    }

    pub fn value_rc(&self) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.node.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn len(&self) -> usize {
        self.node.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Extract the single element of a scalar-shaped tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        *self.node.value.iter().next().unwrap()
    }

    /// Same value, cut loose from the graph.
    pub fn detach(&self) -> Var {
        Var {
            node: Rc::new(Node {
                id: next_id(),
                value: Rc::clone(&self.node.value),
                parents: Vec::new(),
                vjp: None,
                requires_grad: false,
            }),
        }
    }

    fn parents(&self) -> &[Var] {
        &self.node.parents
    }

    /// Reverse-mode sweep from a scalar root. Returns cotangents for every
    /// reachable node that requires grad.
    pub fn backward(&self) -> Gradients {
        self.backward_with(false)
    }

    pub fn backward_with(&self, create_graph: bool) -> Gradients {
        assert_eq!(self.len(), 1, "backward requires a scalar root");
        let order = topo_order(self);
        let mut cot: HashMap<u64, Var> = HashMap::new();
        let seed = Var::constant(ArrayD::from_elem(IxDyn(self.shape()), 1.0));
        cot.insert(self.id(), seed);
        let _guard = set_grad_enabled(create_graph);
        for var in order.iter().rev() {
            let Some(g) = cot.get(&var.id()).cloned() else {
                continue;
            };
            if let Some(vjp) = &var.node.vjp {
                let parent_grads = vjp(&g);
                assert_eq!(parent_grads.len(), var.parents().len());
                for (parent, pg) in var.parents().iter().zip(parent_grads) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(parent.shape(), pg.shape(), "vjp shape mismatch");
                    match cot.remove(&parent.id()) {
                        Some(existing) => {
                            cot.insert(parent.id(), ops::add(&existing, &pg));
                        }
                        None => {
                            cot.insert(parent.id(), pg);
                        }
                    }
                }
            }
        }
        Gradients { cot }
    }

    /// Gradient of a scalar with respect to selected leaves, optionally kept
    /// differentiable for a second-order pass.
    pub fn grad_wrt(&self, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
        let grads = self.backward_with(create_graph);
        wrt.iter()
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Var::constant(ArrayD::zeros(IxDyn(v.shape()))))
            })
            .collect()
    }
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Var> = Vec::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((var, expanded)) = stack.pop() {
        if expanded {
            order.push(var);
            continue;
        }
        if !visited.insert(var.id()) {
            continue;
        }
        stack.push((var.clone(), true));
        for p in var.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Cotangents from one backward sweep, keyed by node id.
pub struct Gradients {
    cot: HashMap<u64, Var>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Var> {
        self.cot.get(&var.id())
    }

    /// Gradient array for a leaf; zeros when the leaf is unreachable.
    pub fn get_or_zeros(&self, var: &Var) -> ArrayD<f32> {
        match self.cot.get(&var.id()) {
            Some(g) => g.value().clone(),
            None => ArrayD::zeros(IxDyn(var.shape())),
        }
    }
}

pub use ops::{
    abs, add, add_bias, add_scalar, bilinear_warp, broadcast_to, concat_channels, conv2d,
    conv2d_input_grad, conv2d_weight_grad, correlation, div, leaky_relu, matmul, mean_all,
    mean_axes, mul, mul_scalar, neg, norm_fused, relu, reshape, rsqrt, slice_channels, softplus,
    sqrt, square, sub, sum_all, sum_axes, tanh, transpose2d, NormAxes,
};

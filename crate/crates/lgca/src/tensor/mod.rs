//! Reverse-mode automatic differentiation over dynamic-dimensional `f64`
//! arrays.
//!
//! The engine is a define-by-run tape: every operation appends a node holding
//! its result and a closure that maps the upstream gradient to contributions
//! for the node's parents. Node ids grow monotonically, so creation order is
//! already a topological order and the backward pass is a single reverse
//! sweep. Everything is `f64` so analytic gradients can be checked against
//! central finite differences at tight tolerances.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArcArray, ArrayD, IxDyn};

mod conv;
mod geom;
mod ops;

pub use geom::{FactorLayout, WindowGeometry};

/// Dynamic-dimensional `f64` array, the engine's only value type.
pub type Arr = ArrayD<f64>;
/// Shared handle to a value; clones are O(1).
pub type SharedArr = ArcArray<f64, IxDyn>;

type BackFn = Box<dyn Fn(&Arr) -> Vec<(usize, Arr)>>;

struct Node {
    value: SharedArr,
    back: Option<BackFn>,
}

/// Records the computation graph of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Arr>>>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        })
    }

    /// Inserts a gradient-less input node.
    pub fn leaf(self: &Rc<Self>, value: Arr) -> Var {
        Var::push(self, value, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs the reverse sweep from `root`, accumulating gradients for every
    /// node that (transitively) feeds it. `root` must be a scalar (0-d or
    /// single-element) node.
    pub fn backward(&self, root: &Var) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Arr::ones(nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            if let Some(back) = nodes[id].back.as_ref() {
                for (pid, contrib) in back(g) {
                    debug_assert_eq!(
                        contrib.shape(),
                        nodes[pid].value.shape(),
                        "gradient shape mismatch for node {pid}"
                    );
                    match grads[pid].as_mut() {
                        Some(acc) => *acc += &contrib,
                        None => grads[pid] = Some(contrib),
                    }
                }
            }
        }
        *self.grads.borrow_mut() = grads;
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: &Var) -> Option<Arr> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    id: usize,
}

impl Var {
    fn push(tape: &Rc<Tape>, value: Arr, back: Option<BackFn>) -> Var {
        // Stored values are always standard layout so views can be reshaped
        // without copies downstream.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let mut nodes = tape.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: value.into_shared(),
            back,
        });
        Var {
            tape: Rc::clone(tape),
            id,
        }
    }

    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    pub fn value(&self) -> SharedArr {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.ndim()
    }

    /// Extracts the value of a single-element node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on shape {:?}", v.shape());
        *v.first().unwrap()
    }

    pub fn grad(&self) -> Option<Arr> {
        self.tape.grad(self)
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "operands belong to different tapes"
        );
    }
}

pub(crate) fn dim(shape: &[usize]) -> IxDyn {
    IxDyn(shape)
}

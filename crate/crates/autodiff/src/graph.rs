use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::tensor::Tensor;

/// Computes the input gradients of one recorded op from the output gradient.
///
/// Gradients are built from [`Var`] ops, so when the tape is active they are
/// themselves differentiable.
pub(crate) type BackwardFn = Box<dyn Fn(&Var, &[Var], &Var) -> Vec<Option<Var>>>;

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    name: &'static str,
}

/// A tensor value recorded on the autodiff tape.
#[derive(Clone)]
pub struct Var(Rc<Node>);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    /// Nodes lying on a path to one of the inputs of the running `grad` call.
    static NEEDED: RefCell<Option<Rc<HashSet<u64>>>> = const { RefCell::new(None) };
}

/// Whether the running backward pass wants a gradient for `v`.
pub(crate) fn is_needed(v: &Var) -> bool {
    v.requires_grad() && NEEDED.with(|n| n.borrow().as_ref().is_none_or(|s| s.contains(&v.id())))
}

struct NeededGuard(Option<Rc<HashSet<u64>>>);

impl NeededGuard {
    fn set(set: HashSet<u64>) -> Self {
        NeededGuard(NEEDED.with(|n| n.replace(Some(Rc::new(set)))))
    }
}

impl Drop for NeededGuard {
    fn drop(&mut self) {
        NEEDED.with(|n| *n.borrow_mut() = self.0.take());
    }
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

struct GradModeGuard(bool);

impl GradModeGuard {
    fn set(enabled: bool) -> Self {
        GradModeGuard(GRAD_ENABLED.with(|g| g.replace(enabled)))
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` without recording any ops.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard::set(false);
    f()
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.0.name)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A value that is never differentiated.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            name: "const",
        }))
    }

    /// A differentiable leaf (parameter or input being probed).
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
            name: "leaf",
        }))
    }

    pub(crate) fn from_op(
        name: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Var, &[Var], &Var) -> Vec<Option<Var>> + 'static,
    ) -> Var {
        let track = is_grad_enabled() && parents.iter().any(Var::requires_grad);
        if !track {
            return Var(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
                name,
            }));
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
            name,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f32 {
        self.0.value.item()
    }

    fn id(&self) -> u64 {
        self.0.id
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients stay on the tape and can be
/// differentiated again.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(
        output.value().numel(),
        1,
        "grad() needs a scalar output, got {:?}",
        output.shape()
    );
    let _guard = GradModeGuard::set(create_graph);

    // Reachable nodes on the tape; ids increase with creation order, so
    // descending id is a valid reverse topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        order.push(v);
    }
    order.sort_by_key(|v| std::cmp::Reverse(v.id()));

    let targets: HashMap<u64, usize> = wrt.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    // Parents precede children in ascending id order.
    let mut needed: HashSet<u64> = HashSet::new();
    for node in order.iter().rev() {
        if targets.contains_key(&node.id()) || node.0.parents.iter().any(|p| needed.contains(&p.id())) {
            needed.insert(node.id());
        }
    }
    order.retain(|v| needed.contains(&v.id()));
    let _needed = NeededGuard::set(needed);
    let mut results: Vec<Option<Var>> = vec![None; wrt.len()];
    let mut grads: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    }

    for node in &order {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if let Some(&slot) = targets.get(&node.id()) {
            results[slot] = Some(g.clone());
        }
        let Some(backward) = &node.0.backward else {
            continue;
        };
        let parent_grads = backward(&g, &node.0.parents, node);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !is_needed(parent) {
                continue;
            }
            debug_assert_eq!(pg.shape(), parent.shape(), "grad shape for {}", node.0.name);
            let merged = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), merged);
        }
    }

    results
        .into_iter()
        .zip(wrt)
        .map(|(g, v)| g.unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape()))))
        .collect()
}

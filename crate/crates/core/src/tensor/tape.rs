use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Computes input gradients from the output gradient. The mask says which
/// inputs are tracked; untracked entries may be returned as `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    numel: usize,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Define-by-run record of differentiable operations.
///
/// A tape is built fresh for every forward pass and confined to one thread.
/// Records are appended in evaluation order; [`Tape::backward`] walks them in
/// strict reverse insertion order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    no_grad_depth: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            no_grad_depth: Cell::new(0),
        }
    }

    /// Number of records on the tape.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.no_grad_depth.get() == 0
    }

    /// Enter a no-grad scope that lasts until the guard is dropped.
    pub fn no_grad(&self) -> NoGradGuard<'_> {
        self.no_grad_depth.set(self.no_grad_depth.get() + 1);
        NoGradGuard { tape: self }
    }

    /// Trainable leaf. Under a no-grad scope the leaf is untracked.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let node = if self.is_recording() {
            Some(self.push(Node {
                numel: value.numel(),
                inputs: vec![],
                backward: None,
            }))
        } else {
            None
        };
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Untracked value; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Wrap an op result, recording it iff some input is tracked and the
    /// tape is not in a no-grad scope.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[&Var<'t>],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var<'t> {
        let tracked = self.is_recording() && inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            Some(self.push(Node {
                numel: value.numel(),
                inputs: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
            }))
        } else {
            None
        };
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Var<'_>) -> Result<Grads> {
        if root.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some(root_id) = root.node else {
            return Ok(Grads { grads });
        };
        grads[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    grads[id] = Some(g);
                }
                Some(f) => {
                    let mask: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let input_grads = f(&g, &mask);
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let (Some(i), Some(ig)) = (input, ig) else {
                            continue;
                        };
                        debug_assert_eq!(ig.len(), nodes[*i].numel);
                        match &mut grads[*i] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

pub struct NoGradGuard<'t> {
    tape: &'t Tape,
}

impl Drop for NoGradGuard<'_> {
    fn drop(&mut self) {
        self.tape.no_grad_depth.set(self.tape.no_grad_depth.get() - 1);
    }
}

/// Gradients from one backward sweep, indexed by tape node. Only leaves
/// keep their buffers.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`; zero when unreachable or
    /// untracked.
    pub fn get(&self, v: &Var<'_>) -> Tensor {
        self.try_get(v).unwrap_or_else(|| Tensor::zeros(v.value.shape()))
    }

    /// `None` when `v` is untracked or the root does not depend on it.
    pub fn try_get(&self, v: &Var<'_>) -> Option<Tensor> {
        let id = v.node?;
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(v.value.shape(), g.clone()).expect("gradient length matches node"))
    }
}

/// A tensor bound to a tape.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) value: Rc<Tensor>,
    pub(crate) node: Option<usize>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    /// Whether this value participates in backpropagation.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Value-identical copy through which no gradient flows.
    pub fn stop_grad(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            value: Rc::clone(&self.value),
            node: None,
        }
    }
}

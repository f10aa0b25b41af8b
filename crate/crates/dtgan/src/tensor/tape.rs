//! Differentiation tape: ordered record of primitive applications.
//!
//! A tape is created per forward pass and carried by the tensors it
//! produced; there is no ambient global state. Leaves register lazily: the
//! first op that combines an attached tensor with a plain `requires_grad`
//! tensor records the latter as a leaf. Entries save their input/output
//! buffers by reference (`Rc` clones), so recording costs no copies.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::op::Op;
use super::vjp;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

pub(crate) struct Saved {
    pub data: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub node: Option<usize>,
}

impl Saved {
    fn of(t: &Tensor) -> Saved {
        Saved {
            data: Rc::clone(&t.data),
            shape: t.shape.clone(),
            node: t.node.as_ref().map(|n| n.id),
        }
    }

    /// Reconstitute as a live tensor. With `attach`, the tensor points back
    /// at its node so ops on it keep extending the graph (second order);
    /// without, it is a plain constant.
    fn tensor(&self, tape: &Tape, attach: bool) -> Tensor {
        let node = match (attach, self.node) {
            (true, Some(id)) => Some(NodeRef { tape: tape.clone(), id }),
            _ => None,
        };
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            requires_grad: node.is_some(),
            node,
        }
    }
}

pub(crate) struct Entry {
    pub op: Op,
    pub inputs: Vec<Saved>,
    pub output: Saved,
}

struct TapeInner {
    entries: Vec<Entry>,
    /// Leaf registration memo keyed by buffer address; holds the buffer
    /// alive so addresses cannot be recycled within the tape's lifetime.
    leaves: HashMap<usize, (usize, Rc<Vec<f64>>)>,
    warnings: Vec<String>,
}

/// Cheaply cloneable handle to one differentiation tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                entries: Vec::new(),
                leaves: HashMap::new(),
                warnings: Vec::new(),
            })),
        }
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of recorded entries (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drain accumulated warnings (e.g. gradients requested for off-tape
    /// tensors).
    pub fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut self.inner.borrow_mut().warnings)
    }

    /// Attach a tensor to this tape as a leaf, returning the attached copy.
    /// Repeated watches of the same buffer reuse one node.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        if let Some(node) = &t.node {
            assert!(node.tape.same_as(self), "tensor already attached to a different tape");
            return t.clone();
        }
        let key = Rc::as_ptr(&t.data) as usize;
        let mut inner = self.inner.borrow_mut();
        let id = match inner.leaves.get(&key) {
            Some((id, _)) => *id,
            None => {
                let id = inner.entries.len();
                inner.entries.push(Entry {
                    op: Op::Leaf,
                    inputs: Vec::new(),
                    output: Saved {
                        data: Rc::clone(&t.data),
                        shape: t.shape.clone(),
                        node: Some(id),
                    },
                });
                inner.leaves.insert(key, (id, Rc::clone(&t.data)));
                id
            }
        };
        Tensor {
            data: Rc::clone(&t.data),
            shape: t.shape.clone(),
            requires_grad: t.requires_grad,
            node: Some(NodeRef { tape: self.clone(), id }),
        }
    }

    fn resolve(&self, t: &Tensor) -> Option<usize> {
        if let Some(node) = &t.node {
            if node.tape.same_as(self) {
                return Some(node.id);
            }
            return None;
        }
        let key = Rc::as_ptr(&t.data) as usize;
        self.inner.borrow().leaves.get(&key).map(|(id, _)| *id)
    }

    /// Reverse-mode gradients of a scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph`, the gradient computation itself is recorded so
    /// the returned tensors can be differentiated again.
    pub fn backward(&self, root: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot(root.shape.clone()));
        }
        let root_id = match self.resolve(root) {
            Some(id) => id,
            None => {
                self.inner
                    .borrow_mut()
                    .warnings
                    .push("backward: root is not recorded on this tape; returning zeros".to_string());
                return Ok(wrt.iter().map(|t| Tensor::zeros(t.shape())).collect());
            }
        };

        let n_nodes = self.len();
        let mut grads: Vec<Option<Tensor>> = (0..n_nodes).map(|_| None).collect();
        grads[root_id] = Some(Tensor::ones(&root.shape));

        for id in (0..=root_id).rev() {
            let Some(grad_out) = grads[id].clone() else { continue };
            // Clone what the VJP needs, then release the borrow: with
            // create_graph the VJP ops re-borrow this tape to append.
            let (op, inputs, output, input_nodes) = {
                let inner = self.inner.borrow();
                let entry = &inner.entries[id];
                if matches!(entry.op, Op::Leaf) {
                    continue;
                }
                let inputs: Vec<Tensor> = entry.inputs.iter().map(|s| s.tensor(self, create_graph)).collect();
                let output = entry.output.tensor(self, create_graph);
                let nodes: Vec<Option<usize>> = entry.inputs.iter().map(|s| s.node).collect();
                (entry.op.clone(), inputs, output, nodes)
            };
            let contribs = vjp::vjp(&op, &inputs, &output, &grad_out, &input_nodes)?;
            for (slot, contrib) in input_nodes.iter().zip(contribs) {
                let (Some(nid), Some(c)) = (slot, contrib) else { continue };
                debug_assert!(*nid < id);
                grads[*nid] = Some(match grads[*nid].take() {
                    None => c,
                    Some(prev) => prev.add(&c)?,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for t in wrt {
            match self.resolve(t) {
                Some(id) => out.push(match grads.get(id).and_then(|g| g.clone()) {
                    Some(g) => g,
                    None => Tensor::zeros(t.shape()),
                }),
                None => {
                    self.inner.borrow_mut().warnings.push(format!(
                        "backward: requested gradient for a tensor (shape {:?}) not on this tape; returning zeros",
                        t.shape()
                    ));
                    out.push(Tensor::zeros(t.shape()));
                }
            }
        }
        Ok(out)
    }
}

/// Apply a primitive, recording it when any input is attached to a tape.
/// Detached inputs that require grad are auto-registered as leaves.
pub(crate) fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match &tape {
                None => tape = Some(node.tape.clone()),
                Some(existing) => {
                    if !existing.same_as(&node.tape) {
                        return Err(Error::TapeMismatch(op.name()));
                    }
                }
            }
        }
    }

    let raw: Vec<(&[f64], &[usize])> = inputs.iter().map(|t| (t.data.as_slice(), t.shape.as_slice())).collect();
    let out = op.eval(&raw)?;
    let requires_grad = inputs.iter().any(|t| t.requires_grad);

    let Some(tape) = tape else {
        return Ok(Tensor {
            data: Rc::new(out.data),
            shape: out.shape,
            requires_grad,
            node: None,
        });
    };

    // Attach stragglers that carry gradients but are not yet on the tape.
    let attached: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            if t.node.is_none() && t.requires_grad {
                tape.watch(t)
            } else {
                (*t).clone()
            }
        })
        .collect();

    let data = Rc::new(out.data);
    let id = {
        let mut inner = tape.inner.borrow_mut();
        let id = inner.entries.len();
        inner.entries.push(Entry {
            op,
            inputs: attached.iter().map(Saved::of).collect(),
            output: Saved {
                data: Rc::clone(&data),
                shape: out.shape.clone(),
                node: Some(id),
            },
        });
        id
    };
    Ok(Tensor {
        data,
        shape: out.shape,
        requires_grad,
        node: Some(NodeRef { tape, id }),
    })
}

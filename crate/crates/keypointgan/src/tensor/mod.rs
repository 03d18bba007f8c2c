//! Minimal reverse-mode autodiff over `ndarray` f32 arrays.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it in
//! reverse, producing a gradient per recorded node. Parameters bind onto the
//! tape as leaf nodes, so a parameter used twice (shared weights) accumulates
//! both contributions. Everything is single-threaded and sequential, which
//! keeps training runs bit-reproducible under a fixed seed.

mod geometry;
mod nn;
mod ops;
mod opt;

pub use opt::Adam;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub type ArrD = ndarray::ArrayD<f32>;

/// A named, reference-counted parameter array. The `Arc` lets forward passes
/// capture values without copying; the optimizer uses `Arc::make_mut` once
/// the tape has been dropped.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<ArrD>,
    uid: u64,
}

static NEXT_PARAM_UID: AtomicU64 = AtomicU64::new(1);

impl Param {
    pub fn new(name: impl Into<String>, value: ArrD) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            uid: NEXT_PARAM_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Mutable access for optimizer updates; clones only if a tape still
    /// holds the value.
    pub fn value_mut(&mut self) -> &mut ArrD {
        Arc::make_mut(&mut self.value)
    }
}

/// Handle to a value produced during a forward pass.
#[derive(Clone)]
pub struct Tensor {
    pub data: Arc<ArrD>,
    pub(crate) node: Option<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn scalar(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1, "scalar() on non-scalar tensor");
        *self.data.iter().next().unwrap()
    }
}

type BackFn = Box<dyn FnOnce(&ArrD, &mut Gradients)>;

struct Node {
    backward: Option<BackFn>,
}

/// Gradients keyed by tape node index.
pub struct Gradients {
    grads: Vec<Option<ArrD>>,
    param_nodes: HashMap<u64, usize>,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, node: usize, grad: ArrD) {
        match &mut self.grads[node] {
            Some(existing) => *existing += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn for_node(&self, node: usize) -> Option<&ArrD> {
        self.grads.get(node).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss with respect to a bound parameter, if it
    /// participated in the pass and received any gradient.
    pub fn for_param(&self, param: &Param) -> Option<&ArrD> {
        self.param_nodes
            .get(&param.uid)
            .and_then(|&n| self.for_node(n))
    }
}

/// Records a forward pass. Create with [`Tape::new`] for training or
/// [`Tape::inference`] to skip gradient bookkeeping entirely.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<u64, usize>,
    recording: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub(crate) fn push(&mut self, backward: BackFn) -> Option<usize> {
        if !self.recording {
            return None;
        }
        self.nodes.push(Node {
            backward: Some(backward),
        });
        Some(self.nodes.len() - 1)
    }

    /// Wrap an array as a constant: no gradient flows into it.
    pub fn constant(&self, value: ArrD) -> Tensor {
        Tensor {
            data: Arc::new(value),
            node: None,
        }
    }

    pub fn constant_shared(&self, value: Arc<ArrD>) -> Tensor {
        Tensor { data: value, node: None }
    }

    /// Bind a parameter as a leaf node. Binding the same parameter twice
    /// returns the same node, so gradient contributions accumulate.
    pub fn param(&mut self, p: &Param) -> Tensor {
        if !self.recording {
            return Tensor {
                data: Arc::clone(&p.value),
                node: None,
            };
        }
        let node = match self.param_nodes.get(&p.uid) {
            Some(&n) => n,
            None => {
                let n = self
                    .push(Box::new(|_, _| {}))
                    .expect("recording tape always yields a node");
                self.param_nodes.insert(p.uid, n);
                n
            }
        };
        Tensor {
            data: Arc::clone(&p.value),
            node: Some(node),
        }
    }

    /// Cut the graph: same data, no gradient path.
    pub fn detach(&self, t: &Tensor) -> Tensor {
        Tensor {
            data: Arc::clone(&t.data),
            node: None,
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(mut self, loss: &Tensor) -> Gradients {
        assert!(self.recording, "backward on an inference tape");
        let loss_node = loss
            .node
            .expect("loss must depend on at least one recorded node");
        assert_eq!(loss.data.len(), 1, "backward requires a scalar loss");
        let mut grads = Gradients {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            param_nodes: std::mem::take(&mut self.param_nodes),
        };
        grads.grads[loss_node] = Some(ndarray::ArrayD::ones(loss.data.shape()));
        for idx in (0..self.nodes.len()).rev() {
            if grads.grads[idx].is_none() {
                continue;
            }
            if let Some(f) = self.nodes[idx].backward.take() {
                let g = grads.grads[idx].take().unwrap();
                f(&g, &mut grads);
                grads.grads[idx] = Some(g);
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn param_binding_is_shared_across_uses() {
        let p = Param::new("w", ndarray::ArrayD::from_elem(IxDyn(&[2]), 3.0f32));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a.node, b.node);
        // loss = sum((w*w)) -> dloss/dw = 2w = 6.
        let prod = tape.mul(&a, &b);
        let loss = tape.mean_all(&prod);
        let grads = tape.backward(&loss);
        let g = grads.for_param(&p).unwrap();
        for &v in g.iter() {
            assert!((v - 3.0).abs() < 1e-6); // d(mean(w^2))/dw = 2w/2 = w
        }
    }

    #[test]
    fn inference_tape_records_nothing() {
        let p = Param::new("w", ndarray::ArrayD::from_elem(IxDyn(&[4]), 1.0f32));
        let mut tape = Tape::inference();
        let t = tape.param(&p);
        let s = tape.sigmoid(&t);
        assert!(s.node.is_none());
    }
}

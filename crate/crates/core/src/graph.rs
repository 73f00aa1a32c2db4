//! Reverse-mode computation graph.
//!
//! The graph is an append-only tape: operation outputs are pushed in
//! execution order, and backward walks the tape in exact reverse insertion
//! order, accumulating gradients additively into predecessor slots. A graph
//! can be replayed backward once; a second backward is an error.
//!
//! A graph built with [`Graph::inference`] stores activations but records no
//! backward closures, which is the fast path used by the sampler.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on one specific graph. Only meaningful for the graph
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value {
    pub(crate) idx: usize,
}

/// Gradient accumulator passed to backward closures. Slots are lazily
/// allocated as zeros and indexed by node position.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
}

impl<'a> GradSink<'a> {
    /// Mutable gradient slot for `v`, zero-initialized on first touch.
    pub(crate) fn slot(&mut self, v: Value) -> &mut [f64] {
        let g = &mut self.grads[v.idx];
        if g.is_none() {
            *g = Some(vec![0.0; self.sizes[v.idx]]);
        }
        g.as_mut().expect("slot was just initialized")
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    backward: Option<BackwardFn>,
    /// Set when the node carries gradient information (it is a tracked leaf
    /// or depends on one).
    tracked: bool,
    /// Tensor id when this node is a leaf whose gradient should be reported.
    leaf_of: Option<u64>,
}

/// Gradients keyed by leaf tensor id.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.by_id.get(&t.id())
    }

    pub fn get_by_id(&self, id: u64) -> Option<&Tensor> {
        self.by_id.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Sum per-item gradient maps. Accumulation runs in the order given,
    /// so the result is deterministic for a fixed input order.
    pub fn merge_sum(parts: Vec<Gradients>) -> Result<Gradients> {
        let mut out: HashMap<u64, Tensor> = HashMap::new();
        for part in parts {
            for (id, g) in part.by_id {
                match out.remove(&id) {
                    None => {
                        out.insert(id, g);
                    }
                    Some(acc) => {
                        out.insert(id, acc.add(&g)?);
                    }
                }
            }
        }
        Ok(Gradients { by_id: out })
    }
}

/// Append-only tape of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
    check_finite: bool,
    leaves: HashMap<u64, Value>,
    peak_elements: usize,
    live_elements: usize,
}

impl Graph {
    /// A recording graph: tracked leaves participate in backward.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            check_finite: cfg!(debug_assertions),
            leaves: HashMap::new(),
            peak_elements: 0,
            live_elements: 0,
        }
    }

    /// A non-recording graph: forward only, nothing is tracked.
    pub fn inference() -> Self {
        let mut g = Graph::new();
        g.recording = false;
        g
    }

    /// Force the per-op finite check on or off (it defaults to on in debug
    /// builds only).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total elements held by node activations; the profiler's
    /// live-activation metric.
    pub fn live_elements(&self) -> usize {
        self.live_elements
    }

    pub fn peak_elements(&self) -> usize {
        self.peak_elements
    }

    /// Register a tensor as a graph input. Tensors with `requires_grad` are
    /// tracked (on a recording graph) and receive an entry in the gradient
    /// map produced by [`Graph::backward`]. Repeated registration of the
    /// same tensor returns the same node, so gradients from multiple uses
    /// accumulate additively.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        if let Some(&v) = self.leaves.get(&t.id()) {
            return v;
        }
        let tracked = self.recording && t.requires_grad();
        let v = self.push_node(Node {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            backward: None,
            tracked,
            leaf_of: if tracked { Some(t.id()) } else { None },
        });
        self.leaves.insert(t.id(), v);
        v
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Value {
        let v = self.push_node(Node {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            backward: None,
            tracked: false,
            leaf_of: None,
        });
        v
    }

    fn push_node(&mut self, node: Node) -> Value {
        self.live_elements += node.data.len();
        self.peak_elements = self.peak_elements.max(self.live_elements);
        self.nodes.push(node);
        Value {
            idx: self.nodes.len() - 1,
        }
    }

    /// Push an op output. `backward` is dropped unless the graph records and
    /// at least one input is tracked.
    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[Value],
        backward: impl FnOnce() -> BackwardFn,
    ) -> Result<Value> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: bad output buffer");
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let tracked = self.recording && inputs.iter().any(|v| self.nodes[v.idx].tracked);
        let node = Node {
            shape,
            data: Arc::new(data),
            backward: if tracked { Some(backward()) } else { None },
            tracked,
            leaf_of: None,
        };
        Ok(self.push_node(node))
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.idx].data
    }

    pub(crate) fn data_arc(&self, v: Value) -> Arc<Vec<f64>> {
        Arc::clone(&self.nodes[v.idx].data)
    }

    /// Snapshot a node as a standalone tensor (shares the data buffer).
    pub fn tensor(&self, v: Value) -> Tensor {
        Tensor::from_arc(self.shape(v).to_vec(), self.data_arc(v))
    }

    /// Scalar payload of a rank-0/length-1 node.
    pub fn scalar_value(&self, v: Value) -> Result<f64> {
        let d = self.data(v);
        if d.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(v).to_vec()));
        }
        Ok(d[0])
    }

    /// Reverse sweep from `loss`, visiting nodes in exact reverse insertion
    /// order. Consumes the graph's backward state: a second call fails.
    pub fn backward(&mut self, loss: Value) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.idx].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.idx].shape.clone()));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.data.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![1.0]);

        let mut out = HashMap::new();
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let Some(f) = self.nodes[idx].backward.take() {
                let mut sink = GradSink {
                    grads: &mut grads,
                    sizes: &sizes,
                };
                f(&g, &mut sink);
            }
            if let Some(id) = self.nodes[idx].leaf_of {
                let t = Tensor::new(self.nodes[idx].shape.clone(), g)?;
                out.insert(id, t);
            }
        }
        Ok(Gradients { by_id: out })
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let xv = g.leaf(&x);
        let s = g.sum_all(xv).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let xv = g.leaf(&x);
        assert!(matches!(g.backward(xv), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn leaf_registration_is_deduplicated() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad();
        let a = g.leaf(&x);
        let b = g.leaf(&x);
        assert_eq!(a, b);
        // x used twice: gradients accumulate additively.
        let y = g.add(a, b).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn inference_graph_records_no_backward() {
        let mut g = Graph::inference();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let xv = g.leaf(&x);
        let s = g.sum_all(xv).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.is_empty());
    }
}

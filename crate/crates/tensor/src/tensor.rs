use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{domain, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the output gradient to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Record {
    pub op: &'static str,
    pub parents: Vec<Tensor>,
    pub backward: BackwardFn,
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    record: Option<Record>,
}

/// Cheaply clonable handle to an immutable tensor node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.record.as_ref().map(|r| r.op))
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(domain("tensor", format!("extents must be positive, got {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(TensorError::Shape { op: "tensor", lhs: shape.to_vec(), rhs: vec![len] });
    }
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            record: None,
        })))
    }

    /// Leaf that never accumulates a gradient.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf that accumulates a gradient on backward.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::constant(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false).expect("scalar shape is valid")
    }

    /// Output of an operation. Attaches `backward` only when some parent
    /// takes part in differentiation.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let record = requires_grad.then(|| Record { op, parents, backward: Box::new(backward) });
        Self(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            record,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.record.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Name of the operation that produced this tensor, `None` for leaves.
    pub fn op(&self) -> Option<&'static str> {
        self.0.record.as_ref().map(|r| r.op)
    }

    /// First element; convenient for single-element losses.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    /// Rows and columns of a rank-2 tensor. Rank-1 tensors read as one row.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(domain(op, format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        if self.0.shape.len() == 1 {
            1
        } else {
            self.0.shape[..self.0.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.0.shape.last().expect("rank >= 1")
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    /// Accumulated gradient, or zeros when backward never reached this leaf.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same data, new leaf without history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false).expect("valid shape")
    }

    /// Parameter leaf holding `data` with this tensor's shape.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::leaf(self.0.shape.clone(), data, self.0.requires_grad && self.is_leaf())
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse topological order of the differentiable subgraph under `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(rec) = &t.0.record {
                for p in rec.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order.reverse();
        order
    }

    /// Backpropagates from a single-element tensor into every `param` leaf
    /// reachable through differentiable operations.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let index: std::collections::HashMap<u64, usize> = order.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; order.len()];
        grads[0] = Some(vec![1.0]);
        for (i, t) in order.iter().enumerate() {
            let Some(g) = grads[i].take() else { continue };
            match &t.0.record {
                None => t.accumulate(&g),
                Some(rec) => {
                    let parent_grads = (rec.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), rec.parents.len(), "{}", rec.op);
                    for (p, pg) in rec.parents.iter().zip(parent_grads) {
                        let (Some(pg), true) = (pg, p.requires_grad()) else { continue };
                        let j = index[&p.id()];
                        match grads[j].as_mut() {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => grads[j] = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of backward records reachable from this tensor.
    pub fn graph_len(&self) -> usize {
        if self.requires_grad() {
            self.topo_order().iter().filter(|t| !t.is_leaf()).count()
        } else {
            0
        }
    }
}

use crate::error::{Error, Result};

use super::{Real, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation recorded on the tape.
///
/// `backward` returns one entry per element of `inputs()`, `None` where the
/// input does not need a gradient.
pub trait Op<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> &[Var];
    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        out: &Tensor4<T>,
        grad_out: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>>;
}

pub struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Option<Box<dyn Op<T>>>,
    requires_grad: bool,
}

/// Wengert list of forward values and the operations that produced them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of `op`. `macs` is the multiply-accumulate count of
    /// the forward computation, summed into [`Tape::macs`].
    pub fn push(&mut self, value: Tensor4<T>, op: Box<dyn Op<T>>, macs: u64) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.macs += macs;
        self.nodes.push(Node {
            value,
            op: Some(op),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Names of recorded operations in order, for diagnostics.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| n.op.as_ref().map_or("leaf", |o| o.name()))
            .collect()
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let value = self.value(root);
        if value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", value.shape()),
            ));
        }
        self.backward_with(root, Tensor4::ones(value.shape()))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor4<T>) -> Result<Gradients<T>> {
        super::check_same_shape("backward", self.value(root).shape(), seed.shape())?;
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let ctx = BackwardCtx { nodes: &self.nodes };
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let input_grads = op.backward(&ctx, &node.value, g);
            debug_assert_eq!(input_grads.len(), op.inputs().len());
            for (&input, ig) in op.inputs().iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[input.0].value.shape(), "{}", op.name());
                match &mut lower[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

use super::tensor::Tensor;
use crate::error::{MptError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One query/key segment pairing for the packed attention kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnPair {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_bcast: bool,
        b_bcast: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    ScaleByElement {
        x: Var,
        s: Var,
        idx: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        xs: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pairs: Vec<AttnPair>,
        probs: Vec<f64>,
    },
    SmoothedCe {
        logits: Var,
        rows: Vec<Option<usize>>,
        eps: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { x, .. }
            | Op::Reshape { x }
            | Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::Dropout { x, .. }
            | Op::MaskFill { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::ScaleByElement { x, s, .. } => vec![*x, *s],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embed { table, .. } => vec![*table],
            Op::ConcatCols { xs } => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SmoothedCe { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a topological order of the computation DAG.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.push_raw(t, Op::Leaf)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push_raw(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub(crate) fn push_raw(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op node; `requires_grad` is inherited from the inputs.
    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.requires_grad(*v));
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push_raw(value, op)
    }

    /// Runs reverse accumulation from a scalar output. Previously stored
    /// gradients are discarded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(MptError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.requires_grad(output) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if !node.value.requires_grad {
                continue;
            }
            super::ops::backward_op(&node.op, &node.value, &g, head, &mut grads);
            node.value.grad = Some(g);
        }
        Ok(())
    }
}

/// Adds `contrib` into the gradient slot for `v`, allocating on first use.
pub(crate) fn accumulate<F>(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: F,
) where
    F: FnOnce(&mut [f64]),
{
    let node = &nodes[v.0];
    if !node.value.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(slot);
}

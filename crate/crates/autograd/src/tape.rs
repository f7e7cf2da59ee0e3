use std::collections::hash_map::Entry;
use std::collections::HashMap;

use crate::conv::ConvGeometry;
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Stable identity of a trainable parameter, assigned by the model that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub(crate) enum Op<E> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    /// Tensor times a one-element variable.
    MulScalarVar {
        x: Var,
        s: Var,
    },
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    LeakyRelu(Var, E),
    Conv3 {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose3 {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<E>,
        inv_std: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        dot: f64,
        na: f64,
        nb: f64,
        eps: f64,
    },
    ChannelMean(Var),
    Sum(Var),
    Mean(Var),
    ConcatChannels(Var, Var),
    LogSoftmaxChannels(Var),
    SumSpatial(Var),
    SliceBatch {
        x: Var,
        index: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<E>,
    },
}

pub(crate) struct Node<E> {
    pub(crate) value: Tensor<E>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<E>,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in evaluation order, which is a topological
/// order of the computation graph.
pub struct Tape<E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that records values only: parameters enter as constants and no
    /// backward information is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Moves a value out of the tape, leaving an empty placeholder. Only use on
    /// values no later op will read.
    pub fn take_value(&mut self, v: Var) -> Tensor<E> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, inputs: &[Var], op: Op<E>) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf. `requires_grad` is ignored on an inference tape.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor<E>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: value.clone(),
            requires_grad,
            op: if requires_grad { Op::Param(id) } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a one-element `loss`. The tape can be swept once;
    /// a second call is rejected until a fresh forward pass is recorded.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if self.consumed {
            return Err(TensorError::Contract(
                "backward called twice on the same tape; record a new forward pass".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss does not belong to this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<E>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), E::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(id) => match out.params.entry(*id) {
                    Entry::Occupied(mut e) => e.get_mut().add_assign(&g),
                    Entry::Vacant(e) => {
                        e.insert(g);
                    }
                },
                Op::Leaf => {
                    if self.nodes[i].requires_grad {
                        out.leaves.insert(Var(i), g);
                    }
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        Ok(out)
    }
}

/// Result of a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients<E> {
    params: HashMap<ParamId, Tensor<E>>,
    leaves: HashMap<Var, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.params.get(&id)
    }

    pub fn take_param(&mut self, id: ParamId) -> Option<Tensor<E>> {
        self.params.remove(&id)
    }

    /// Gradient of a non-parameter leaf created with `requires_grad = true`.
    pub fn leaf(&self, v: Var) -> Option<&Tensor<E>> {
        self.leaves.get(&v)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

pub(crate) fn accumulate<E: Element>(grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

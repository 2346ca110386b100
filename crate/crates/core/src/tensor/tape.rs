//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] records every op as a node; [`Var`]s are handles into one
//! specific tape. `backward` seeds a scalar root and accumulates gradients
//! into per-node slots; repeated backward calls (possibly from different
//! roots, possibly scaled) keep accumulating until [`Tape::clear_grads`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, LabelGrid, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on one specific tape. Using it with any other tape is an
/// error, not silent misbehaviour.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: u32,
}

enum Op<E> {
    Leaf,
    Conv3d { input: u32, kernels: u32, bias: u32 },
    LeakyRelu { input: u32, slope: E },
    UpsampleRepeat { input: u32, factor: usize },
    CenterCrop { input: u32 },
    ConcatChannels { inputs: Vec<u32> },
    SoftmaxXentMean { logits: u32, targets: LabelGrid, probs: Tensor<E> },
    Add { lhs: u32, rhs: u32 },
    Sub { lhs: u32, rhs: u32 },
    Scale { input: u32, factor: E },
    SumAll { input: u32 },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    op: Op<E>,
    /// `false` only for data leaves; lets backward skip gradients nothing needs.
    requires_grad: bool,
}

pub struct Tape<E> {
    id: u64,
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index as usize >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index as usize)
    }

    fn push(&mut self, op: &'static str, value: Tensor<E>, node_op: Op<E>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let index = u32::try_from(self.nodes.len()).expect("tape overflows u32 nodes");
        self.nodes.push(Node { value, grad: None, op: node_op, requires_grad: true });
        Ok(Var { tape: self.id, index })
    }

    /// Record an input tensor that needs gradients (parameters).
    pub fn leaf(&mut self, value: Tensor<E>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Record an input tensor that never needs gradients (data patches).
    pub fn leaf_no_grad(&mut self, value: Tensor<E>) -> Result<Var> {
        let v = self.push("leaf", value, Op::Leaf)?;
        self.nodes[v.index as usize].requires_grad = false;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        let i = self.check(v).expect("value() with foreign var");
        &self.nodes[i].value
    }

    /// Accumulated gradient for `v`, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        let i = self.check(v).expect("grad() with foreign var");
        self.nodes[i].grad.as_deref()
    }

    pub fn conv3d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (i, k, b) = (self.check(input)?, self.check(kernels)?, self.check(bias)?);
        let value =
            ops::conv3d_valid(&self.nodes[i].value, &self.nodes[k].value, &self.nodes[b].value)?;
        self.push(
            "conv3d",
            value,
            Op::Conv3d { input: input.index, kernels: kernels.index, bias: bias.index },
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: E) -> Result<Var> {
        let i = self.check(input)?;
        let value = ops::leaky_relu(&self.nodes[i].value, slope);
        self.push("leaky_relu", value, Op::LeakyRelu { input: input.index, slope })
    }

    pub fn upsample_repeat(&mut self, input: Var, factor: usize) -> Result<Var> {
        let i = self.check(input)?;
        let value = ops::upsample_repeat(&self.nodes[i].value, factor)?;
        self.push("upsample_repeat", value, Op::UpsampleRepeat { input: input.index, factor })
    }

    pub fn center_crop(&mut self, input: Var, target: [usize; 3]) -> Result<Var> {
        let i = self.check(input)?;
        let value = ops::center_crop(&self.nodes[i].value, target)?;
        self.push("center_crop", value, Op::CenterCrop { input: input.index })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let tensors: Vec<&Tensor<E>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = ops::concat_channels(&tensors)?;
        self.push(
            "concat_channels",
            value,
            Op::ConcatChannels { inputs: inputs.iter().map(|v| v.index).collect() },
        )
    }

    /// Mean softmax cross-entropy over all spatial positions (rank-0 output).
    pub fn softmax_xent_mean(&mut self, logits: Var, targets: &LabelGrid) -> Result<Var> {
        let i = self.check(logits)?;
        let (loss, probs) = ops::softmax_xent_mean(&self.nodes[i].value, targets)?;
        self.push(
            "softmax_xent_mean",
            Tensor::scalar(loss),
            Op::SoftmaxXentMean { logits: logits.index, targets: targets.clone(), probs },
        )
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (l, r) = (self.check(lhs)?, self.check(rhs)?);
        let (a, b) = (&self.nodes[l].value, &self.nodes[r].value);
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let data: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { lhs: lhs.index, rhs: rhs.index })
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (l, r) = (self.check(lhs)?, self.check(rhs)?);
        let (a, b) = (&self.nodes[l].value, &self.nodes[r].value);
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let data: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub { lhs: lhs.index, rhs: rhs.index })
    }

    pub fn scale(&mut self, input: Var, factor: E) -> Result<Var> {
        let i = self.check(input)?;
        let value = self.nodes[i].value.map(|v| v * factor);
        self.push("scale", value, Op::Scale { input: input.index, factor })
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let value = Tensor::scalar(ops::sum_all(&self.nodes[i].value));
        self.push("sum_all", value, Op::SumAll { input: input.index })
    }

    /// `backward` with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_scaled(root, E::one())
    }

    /// Reverse pass from a scalar root, seeding `d(root)/d(root) = seed`.
    /// Gradients accumulate into per-node slots; earlier accumulated gradients
    /// are left intact and added to.
    pub fn backward_scaled(&mut self, root: Var, seed: E) -> Result<()> {
        let ri = self.check(root)?;
        if !self.nodes[ri].value.shape().is_empty() {
            return Err(Error::NonScalarRoot { shape: self.nodes[ri].value.shape().to_vec() });
        }
        // Per-pass contributions, kept separate from the persistent slots so
        // that residue from earlier backward calls is not re-propagated.
        let mut delta: Vec<Option<Vec<E>>> = Vec::with_capacity(ri + 1);
        delta.resize_with(ri + 1, || None);
        delta[ri] = Some(vec![seed]);
        for i in (0..=ri).rev() {
            let Some(g) = delta[i].take() else { continue };
            self.propagate(i, &g, &mut delta);
            let node = &mut self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(slot) => {
                    for (s, &v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Push this node's incoming gradient `g` to its inputs' delta slots.
    fn propagate(&self, i: usize, g: &[E], delta: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let add_to = |delta: &mut [Option<Vec<E>>], idx: u32, contrib: &[E]| {
            if !nodes[idx as usize].requires_grad {
                return;
            }
            let slot = delta[idx as usize]
                .get_or_insert_with(|| vec![E::zero(); contrib.len()]);
            for (s, &v) in slot.iter_mut().zip(contrib) {
                *s += v;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, kernels, bias } => {
                let dout = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("dout");
                let in_t = &self.nodes[*input as usize].value;
                let k_t = &self.nodes[*kernels as usize].value;
                if nodes[*input as usize].requires_grad {
                    add_to(delta, *input, ops::conv3d_grad_input(&dout, in_t, k_t).data());
                }
                add_to(delta, *kernels, ops::conv3d_grad_kernels(&dout, in_t, k_t).data());
                add_to(delta, *bias, ops::conv3d_grad_bias(&dout).data());
            }
            Op::LeakyRelu { input, slope } => {
                let in_t = &self.nodes[*input as usize].value;
                let contrib: Vec<E> = in_t
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > E::zero() { gv } else { *slope * gv })
                    .collect();
                add_to(delta, *input, &contrib);
            }
            Op::UpsampleRepeat { input, factor } => {
                let dout = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("dout");
                let in_t = &self.nodes[*input as usize].value;
                add_to(delta, *input, ops::upsample_repeat_grad(&dout, in_t, *factor).data());
            }
            Op::CenterCrop { input } => {
                let dout = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("dout");
                let in_t = &self.nodes[*input as usize].value;
                add_to(delta, *input, ops::center_crop_grad(&dout, in_t).data());
            }
            Op::ConcatChannels { inputs } => {
                let mut offset = 0;
                for &idx in inputs {
                    let n = self.nodes[idx as usize].value.numel();
                    add_to(delta, idx, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SoftmaxXentMean { logits, targets, probs } => {
                let contrib = ops::softmax_xent_mean_grad(g[0], probs, targets);
                add_to(delta, *logits, contrib.data());
            }
            Op::Add { lhs, rhs } => {
                add_to(delta, *lhs, g);
                add_to(delta, *rhs, g);
            }
            Op::Sub { lhs, rhs } => {
                add_to(delta, *lhs, g);
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                add_to(delta, *rhs, &neg);
            }
            Op::Scale { input, factor } => {
                let contrib: Vec<E> = g.iter().map(|&v| v * *factor).collect();
                add_to(delta, *input, &contrib);
            }
            Op::SumAll { input } => {
                let n = self.nodes[*input as usize].value.numel();
                add_to(delta, *input, &vec![g[0]; n]);
            }
        }
    }

    /// Reset all gradient slots (values and graph stay intact).
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }
}

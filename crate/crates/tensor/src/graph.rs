//! Define-by-run tape. Every op appends a node whose inputs already exist,
//! so node order is a topological order and backward is one reverse sweep.

use crate::error::{dim_err, Result, TensorError};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::ops::dense::{
    activation_backward, activation_forward, batch_norm2d_backward, batch_norm2d_forward, linear_backward,
    linear_forward, Activation, BnCache, NormMode, RunningStats,
};
use crate::ops::spatial::*;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    ScaleChannels {
        input: Var,
        gate: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    /// Dot product with a constant tensor of the same shape.
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Affine {
        input: Var,
        scale: T,
    },
    MaskedMse {
        pred: Var,
        /// `(pred - ref) * mask`, already zero where masked out.
        residual: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of a leaf or parameter node.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.adjoints.get(var.0).and_then(|a| a.as_ref())
    }

    /// Add parameter adjoints into the store's gradient accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.adjoints[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose adjoint is reported by [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Snapshot a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (out, geometry) = conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (out, argmax) = max_pool2d_forward(self.value(input), window)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = upsample2x_forward(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Upsample2x { input }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = concat_channels_forward(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<&mut RunningStats<T>>,
        mode: NormMode,
    ) -> Result<Var> {
        let (out, cache) = batch_norm2d_forward(self.value(input), self.value(gamma), self.value(beta), running, mode)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = activation_forward(self.value(input), kind);
        let rg = self.rg(&[input]);
        self.push(out, Op::Activation { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = global_avg_pool_forward(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = linear_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn scale_channels(&mut self, input: Var, gate: Var) -> Result<Var> {
        let out = scale_channels_forward(self.value(input), self.value(gate))?;
        let rg = self.rg(&[input, gate]);
        Ok(self.push(out, Op::ScaleChannels { input, gate }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(input).shape() {
            return dim_err(
                "weighted_sum",
                format!("{:?} vs {:?}", weights.shape(), self.value(input).shape()),
            );
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// `scale * input + shift` with constant scalars.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        let out = self.value(input).map(|v| scale * v + shift);
        let rg = self.rg(&[input]);
        self.push(out, Op::Affine { input, scale }, rg)
    }

    /// Mean of `(pred - reference)^2` over pixels where `mask == 1`.
    ///
    /// Masked-out pixels never enter the forward arithmetic, so their
    /// reference values cannot influence the loss or any gradient.
    pub fn masked_mse(&mut self, pred: Var, reference: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != reference.shape() || p.shape() != mask.shape() {
            return dim_err(
                "masked_mse",
                format!(
                    "pred {:?}, reference {:?}, mask {:?}",
                    p.shape(),
                    reference.shape(),
                    mask.shape()
                ),
            );
        }
        let mut residual = vec![T::zero(); p.numel()];
        let mut count = 0usize;
        let mut acc = T::zero();
        for (i, ((&pv, &rv), &m)) in p.data().iter().zip(reference.data()).zip(mask.data()).enumerate() {
            if m == T::one() {
                let d = pv - rv;
                residual[i] = d;
                acc = acc + d * d;
                count += 1;
            } else if m != T::zero() {
                return Err(TensorError::Usage(format!("mask value {m} is not binary")));
            }
        }
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let loss = acc / T::of(count as f64);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                residual,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                params.push((id, i));
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            // Interior adjoints are dead once propagated; keep only leaves.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                adj[i] = Some(g);
            }
        }
        params.reverse();
        Ok(Gradients { adjoints: adj, params })
    }

    /// Backward, then add parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let grads = conv2d_backward(
                    geometry,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    needs(*input),
                    needs(*kernel),
                    bias.map(needs).unwrap_or(false),
                );
                if let Some(t) = grads.input {
                    send(*input, t);
                }
                if let Some(t) = grads.kernel {
                    send(*kernel, t);
                }
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    send(*b, t);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                send(*input, max_pool2d_backward(self.value(*input).shape(), argmax, g));
            }
            Op::Upsample2x { input } => {
                send(*input, upsample2x_backward(self.value(*input).shape(), g));
            }
            Op::Concat { a, b } => {
                let (da, db) = concat_channels_backward(self.value(*a).shape(), self.value(*b).shape(), g);
                send(*a, da);
                send(*b, db);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let grads = batch_norm2d_backward(self.value(*input).shape(), self.value(*gamma), cache, g);
                send(*input, grads.input);
                send(*gamma, grads.gamma);
                send(*beta, grads.beta);
            }
            Op::Activation { input, kind } => {
                send(*input, activation_backward(&node.value, g, *kind));
            }
            Op::GlobalAvgPool { input } => {
                send(*input, global_avg_pool_backward(self.value(*input).shape(), g));
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = linear_backward(self.value(*input), self.value(*weight), g);
                send(*input, dx);
                send(*weight, dw);
                if let Some(b) = bias {
                    send(*b, db);
                }
            }
            Op::ScaleChannels { input, gate } => {
                let (dx, dg) = scale_channels_backward(self.value(*input), self.value(*gate), g);
                send(*input, dx);
                send(*gate, dg);
            }
            Op::Add { a, b } => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul { a, b } => {
                let prod = |x: &Tensor<T>| {
                    let d = x.data().iter().zip(g.data()).map(|(&u, &v)| u * v).collect();
                    Tensor::from_vec(x.shape(), d).expect("mul grad")
                };
                send(*a, prod(self.value(*b)));
                send(*b, prod(self.value(*a)));
            }
            Op::Sum { input } => {
                send(*input, Tensor::full(self.value(*input).shape(), g.item()));
            }
            Op::WeightedSum { input, weights } => {
                let s = g.item();
                let d = weights.iter().map(|&w| w * s).collect();
                send(*input, Tensor::from_vec(self.value(*input).shape(), d)?);
            }
            Op::Affine { input, scale } => {
                send(*input, g.map(|v| v * *scale));
            }
            Op::MaskedMse { pred, residual, count } => {
                let k = T::of(2.0) * g.item() / T::of(*count as f64);
                let d = residual.iter().map(|&r| r * k).collect();
                send(*pred, Tensor::from_vec(self.value(*pred).shape(), d)?);
            }
        }
        Ok(())
    }
}

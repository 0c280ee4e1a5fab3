//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations in execution order; that order is a valid
//! topological order, so [`Graph::backward`] simply replays it in reverse.
//! Forward values are saved eagerly. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, and their gradients are returned in a
//! [`Gradients`] table that the store can accumulate.
//!
//! A graph is single-threaded; build one per training step.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, NormCache, NormGroups};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    QuaternionWeight {
        banks: [Var; 4],
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormGroups,
        cache: NormCache<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
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
    Upsample {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

struct Node<'p, T: Real> {
    op: Op<T>,
    value: Cow<'p, Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Owned(value),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Owned(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrows a parameter as a leaf.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(store.value(id)),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv { x, w, b, geom }, out, &inputs))
    }

    /// Expands four kernel banks into the real block weight of a quaternion convolution.
    pub fn quaternion_weight(&mut self, banks: [Var; 4]) -> Result<Var> {
        let out = kernels::quaternion_block_weight(banks.map(|b| self.value(b)))?;
        Ok(self.push(Op::QuaternionWeight { banks }, out, &banks))
    }

    /// Quaternion convolution `Ŵ ⊗ q̂` computed as one grouped real convolution.
    pub fn qconv2d(&mut self, x: Var, banks: [Var; 4], bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let w = self.quaternion_weight(banks)?;
        self.conv2d(x, w, bias, geom)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T, mode: NormGroups) -> Result<Var> {
        let (out, cache) =
            kernels::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps, mode)?;
        Ok(self.push(
            Op::Norm {
                x,
                gamma,
                beta,
                mode,
                cache,
            },
            out,
            &[x, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = kernels::leaky_relu(self.value(x), slope);
        self.push(Op::LeakyRelu { x, slope }, out, &[x])
    }

    /// Sign pattern (`x > 0`) of every LeakyReLU input recorded so far. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::LeakyRelu { x, .. } = n.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(Op::Sigmoid { x }, out, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: operand shapes {} and {} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add { a, b }, out, &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(Op::Mul { a, b }, out, &[a, b]))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample_nearest2x(self.value(x));
        self.push(Op::Upsample { x }, out, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, out, &[x])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::mse(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mse { a, b }, Tensor::scalar(v), &[a, b]))
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::Shape(format!("{} is not a scalar", t.shape())));
        }
        Ok(t.data()[0])
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, b, geom } => {
                    let need_x = self.needs(*x);
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *geom, need_x);
                    if let Some(dx) = cg.input {
                        self.acc(&mut grads, *x, dx);
                    }
                    self.acc(&mut grads, *w, cg.weight);
                    if let Some(b) = b {
                        let db = cg.bias.reshape(self.shape(*b))?;
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::QuaternionWeight { banks } => {
                    for (bank, gb) in banks.iter().zip(kernels::fold_block_weight_grad(&g)) {
                        self.acc(&mut grads, *bank, gb);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    mode,
                    cache,
                } => {
                    let ng = kernels::instance_norm_backward(&g, self.value(*gamma), cache, *mode);
                    self.acc(&mut grads, *x, ng.input);
                    self.acc(&mut grads, *gamma, ng.gamma.reshape(self.shape(*gamma))?);
                    self.acc(&mut grads, *beta, ng.beta.reshape(self.shape(*beta))?);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = kernels::leaky_relu_backward(self.value(*x), &g, *slope);
                    self.acc(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = kernels::sigmoid_backward(&node.value, &g);
                    self.acc(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let mut da = g.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= v;
                    }
                    let mut db = g;
                    for (d, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= v;
                    }
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Op::Upsample { x } => {
                    self.acc(&mut grads, *x, kernels::upsample_nearest2x_backward(&g));
                }
                Op::Sum { x } => {
                    let dx = Tensor::full(self.shape(*x), g.data()[0]);
                    self.acc(&mut grads, *x, dx);
                }
                Op::Mse { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let scale = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(va.len().max(1)).unwrap();
                    let mut da = va.clone();
                    for (d, &y) in da.data_mut().iter_mut().zip(vb.data()) {
                        *d = (*d - y) * scale;
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, da.map(|v| -v));
                    }
                    self.acc(&mut grads, *a, da);
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf reached by the backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }
}

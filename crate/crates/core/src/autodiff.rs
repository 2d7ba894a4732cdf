//! Minimal reverse-mode differentiation over images, filter banks and
//! scalars.
//!
//! A [`Tape`] records every operation in evaluation order; nodes can only
//! reference earlier nodes, so the graph is acyclic by construction and the
//! backward pass is a single reverse sweep.

use crate::conv::{conv2d_adjoint, conv2d_same, conv2d_weight_grad, FilterBank};
use crate::error::{Error, Result};
use crate::raster::MultibandImage;
use crate::scalar::Scalar;
use crate::solver::soft_threshold;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Image(MultibandImage<T>),
    Bank(FilterBank<T>),
    Scalar(T),
}

impl<T: Scalar> Value<T> {
    pub fn as_image(&self) -> Option<&MultibandImage<T>> {
        match self {
            Value::Image(x) => Some(x),
            _ => None,
        }
    }

    pub fn as_bank(&self) -> Option<&FilterBank<T>> {
        match self {
            Value::Bank(x) => Some(x),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<T> {
        match self {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Image(_) => "image",
            Value::Bank(_) => "bank",
            Value::Scalar(_) => "scalar",
        }
    }

    fn accumulate(&mut self, other: Value<T>) {
        match (self, other) {
            (Value::Image(a), Value::Image(b)) => a.axpy(T::one(), &b).expect("gradient shape"),
            (Value::Bank(a), Value::Bank(b)) => a.add_assign_scaled(T::one(), &b),
            (Value::Scalar(a), Value::Scalar(b)) => *a += b,
            (a, b) => panic!("gradient kind mismatch: {} vs {}", a.kind(), b.kind()),
        }
    }
}

/// Operation that produced a node, with the inputs its backward rule needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Constant input; never receives a gradient.
    Constant,
    /// Trainable input.
    Parameter,
    Conv { input: Var, bank: Var },
    ConvAdjoint { input: Var, bank: Var },
    Add(Var, Var),
    Sub(Var, Var),
    /// Image times a scalar node.
    Scale { input: Var, factor: Var },
    Relu(Var),
    /// Images stacked along the band axis.
    ConcatBands(Vec<Var>),
    /// Banks stacked along the output-channel axis.
    ConcatBanks(Vec<Var>),
    /// `Σ x²` of an image, producing a scalar.
    SquareSum(Var),
    /// Recorded for evaluation only; has no backward rule.
    SoftThreshold { input: Var, tau: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Conv { .. } => "conv2d_same",
            Op::ConvAdjoint { .. } => "conv2d_adjoint",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::ConcatBands(_) => "concat_bands",
            Op::ConcatBanks(_) => "concat_banks",
            Op::SquareSum(_) => "square_sum",
            Op::SoftThreshold { .. } => "soft_threshold",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::Conv { input, bank } | Op::ConvAdjoint { input, bank } => vec![*input, *bank],
            Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
            Op::Scale { input, factor } => vec![*input, *factor],
            Op::Relu(x) | Op::SquareSum(x) => vec![*x],
            Op::SoftThreshold { input, .. } => vec![*input],
            Op::ConcatBands(v) | Op::ConcatBanks(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode<T> {
    pub op: Op,
    pub value: Value<T>,
    /// Whether any parameter feeds into this node.
    pub needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<TapeNode<T>>,
}

/// Gradients indexed by node; `None` where nothing flowed.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Value<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Value<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn image(&self, v: Var) -> Option<&MultibandImage<T>> {
        self.get(v).and_then(Value::as_image)
    }

    pub fn bank(&self, v: Var) -> Option<&FilterBank<T>> {
        self.get(v).and_then(Value::as_bank)
    }

    pub fn scalar(&self, v: Var) -> Option<T> {
        self.get(v).and_then(Value::as_scalar)
    }
}

fn type_error(op: &str, want: &str) -> Error {
    Error::shape(format!("{op}: expected {want} operand"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Value<T> {
        &self.nodes[v.0].value
    }

    pub fn image(&self, v: Var) -> Result<&MultibandImage<T>> {
        self.value(v).as_image().ok_or_else(|| type_error("image", "image"))
    }

    pub fn bank(&self, v: Var) -> Result<&FilterBank<T>> {
        self.value(v).as_bank().ok_or_else(|| type_error("bank", "bank"))
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        self.value(v).as_scalar().ok_or_else(|| type_error("scalar", "scalar"))
    }

    fn push(&mut self, op: Op, value: Value<T>) -> Var {
        let needs_grad = match &op {
            Op::Parameter => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(TapeNode { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Value<T>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn constant_image(&mut self, img: MultibandImage<T>) -> Var {
        self.constant(Value::Image(img))
    }

    pub fn parameter(&mut self, value: Value<T>) -> Var {
        self.push(Op::Parameter, value)
    }

    pub fn conv(&mut self, input: Var, bank: Var) -> Result<Var> {
        let y = conv2d_same(self.image(input)?, self.bank(bank)?)?;
        Ok(self.push(Op::Conv { input, bank }, Value::Image(y)))
    }

    pub fn conv_adjoint(&mut self, input: Var, bank: Var) -> Result<Var> {
        let y = conv2d_adjoint(self.image(input)?, self.bank(bank)?)?;
        Ok(self.push(Op::ConvAdjoint { input, bank }, Value::Image(y)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.image(a)?.add(self.image(b)?)?;
        Ok(self.push(Op::Add(a, b), Value::Image(y)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.image(a)?.sub(self.image(b)?)?;
        Ok(self.push(Op::Sub(a, b), Value::Image(y)))
    }

    pub fn scale(&mut self, input: Var, factor: Var) -> Result<Var> {
        let y = self.image(input)?.scale(self.scalar(factor)?);
        Ok(self.push(Op::Scale { input, factor }, Value::Image(y)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.image(x)?.map(|v| v.max(T::zero()));
        Ok(self.push(Op::Relu(x), Value::Image(y)))
    }

    pub fn concat_bands(&mut self, parts: &[Var]) -> Result<Var> {
        let imgs = parts.iter().map(|&p| self.image(p)).collect::<Result<Vec<_>>>()?;
        let y = MultibandImage::concat_bands(&imgs)?;
        Ok(self.push(Op::ConcatBands(parts.to_vec()), Value::Image(y)))
    }

    pub fn concat_banks(&mut self, parts: &[Var]) -> Result<Var> {
        let banks = parts.iter().map(|&p| self.bank(p)).collect::<Result<Vec<_>>>()?;
        let y = FilterBank::concat_out(&banks)?;
        Ok(self.push(Op::ConcatBanks(parts.to_vec()), Value::Bank(y)))
    }

    pub fn square_sum(&mut self, x: Var) -> Result<Var> {
        let y = self.image(x)?.norm_sq();
        Ok(self.push(Op::SquareSum(x), Value::Scalar(y)))
    }

    pub fn soft_threshold(&mut self, x: Var, tau: f64) -> Result<Var> {
        let y = soft_threshold(self.image(x)?, tau)?;
        Ok(self.push(Op::SoftThreshold { input: x, tau }, Value::Image(y)))
    }

    /// Reverse sweep from a scalar node with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).as_scalar().is_none() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, node {} is a {}",
                loss.0,
                self.value(loss).kind()
            )));
        }
        let mut grads: Vec<Option<Value<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Value::Scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.backward_rule(&node.op, &g)?;
            grads[idx] = Some(g);
            for (target, contrib) in contributions {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(existing) => existing.accumulate(contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_rule(&self, op: &Op, g: &Value<T>) -> Result<Vec<(Var, Value<T>)>> {
        let img_grad = || g.as_image().ok_or_else(|| type_error(op.name(), "image gradient"));
        let mut out = Vec::new();
        match op {
            Op::Constant | Op::Parameter => {}
            Op::Conv { input, bank } => {
                let gy = img_grad()?;
                let w = self.bank(*bank)?;
                if self.wants(*input) {
                    out.push((*input, Value::Image(conv2d_adjoint(gy, w)?)));
                }
                if self.wants(*bank) {
                    let gw = conv2d_weight_grad(self.image(*input)?, gy, w.size())?;
                    out.push((*bank, Value::Bank(gw)));
                }
            }
            Op::ConvAdjoint { input, bank } => {
                let gx = img_grad()?;
                let w = self.bank(*bank)?;
                if self.wants(*input) {
                    out.push((*input, Value::Image(conv2d_same(gx, w)?)));
                }
                if self.wants(*bank) {
                    // <gx, Aᵀy> = <A gx, y>
                    let gw = conv2d_weight_grad(gx, self.image(*input)?, w.size())?;
                    out.push((*bank, Value::Bank(gw)));
                }
            }
            Op::Add(a, b) => {
                let gy = img_grad()?;
                out.push((*a, Value::Image(gy.clone())));
                out.push((*b, Value::Image(gy.clone())));
            }
            Op::Sub(a, b) => {
                let gy = img_grad()?;
                out.push((*a, Value::Image(gy.clone())));
                if self.wants(*b) {
                    out.push((*b, Value::Image(gy.scale(-T::one()))));
                }
            }
            Op::Scale { input, factor } => {
                let gy = img_grad()?;
                if self.wants(*input) {
                    out.push((*input, Value::Image(gy.scale(self.scalar(*factor)?))));
                }
                if self.wants(*factor) {
                    let x = self.image(*input)?;
                    out.push((*factor, Value::Scalar(crate::raster::inner_product(x, gy)?)));
                }
            }
            Op::Relu(x) => {
                let gy = img_grad()?;
                let gx = self.image(*x)?.zip_map(gy, |v, g| if v > T::zero() { g } else { T::zero() })?;
                out.push((*x, Value::Image(gx)));
            }
            Op::ConcatBands(parts) => {
                let gy = img_grad()?;
                let mut start = 0;
                for &p in parts {
                    let len = self.image(p)?.bands();
                    if self.wants(p) {
                        out.push((p, Value::Image(gy.band_range(start, len))));
                    }
                    start += len;
                }
            }
            Op::ConcatBanks(parts) => {
                let gy = g.as_bank().ok_or_else(|| type_error(op.name(), "bank gradient"))?;
                let mut start = 0;
                for &p in parts {
                    let len = self.bank(p)?.out_bands();
                    if self.wants(p) {
                        out.push((p, Value::Bank(gy.out_range(start, len))));
                    }
                    start += len;
                }
            }
            Op::SquareSum(x) => {
                let gs = g.as_scalar().ok_or_else(|| type_error(op.name(), "scalar gradient"))?;
                out.push((*x, Value::Image(self.image(*x)?.scale(gs + gs))));
            }
            Op::SoftThreshold { .. } => {
                return Err(Error::Unsupported(format!("{} has no backward rule", op.name())));
            }
        }
        Ok(out)
    }
}

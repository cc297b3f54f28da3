use super::conv::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward};
use super::norm::{batch_norm_backward, batch_norm_forward, BatchStats};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are invalidated by [`Tape::reset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own mean and variance.
    Train,
    /// Normalize with running statistics.
    Infer { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Pow(Var, T),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Depthwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Concat {
        parts: Vec<Var>,
        channels: Vec<usize>,
    },
    AvgPool2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record-on-execute tape. Each operation evaluates eagerly, appends a node
/// and remembers how to push gradients back to its inputs.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_unchecked(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.generation != self.generation {
            return Err(Error::UnknownVar(v.index));
        }
        self.nodes.get(v.index).ok_or(Error::UnknownVar(v.index))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("stale or foreign Var").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.node(v).ok().and_then(|n| n.grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.node(v)?.requires_grad;
        }
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.node(a)?.value.zip_map(&self.node(b)?.value, name, f)?;
        self.push(name, value, &[a, b], op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.node(a)?.value.map(f);
        self.push(name, value, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// `a^p` for non-negative `a`. The derivative at `a = 0` is taken as 0.
    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary("powf", a, |x| x.powf(p), Op::Pow(a, p))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sum();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.node(a)?.value;
        let m = v.sum() / T::from_usize(v.len()).unwrap();
        self.push("mean", Tensor::scalar(m), &[a], Op::Mean(a))
    }

    /// Mean over every axis but the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&mut self, a: Var) -> Result<Var> {
        let v = &self.node(a)?.value;
        let n = *v.shape().first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "mean_per_sample needs a batch axis".into(),
        })?;
        let per = v.len() / n;
        let denom = T::from_usize(per).unwrap();
        let data = v
            .data()
            .chunks(per)
            .map(|c| c.iter().fold(T::zero(), |s, &x| s + x) / denom)
            .collect();
        let value = Tensor::from_vec(&[n], data)?;
        self.push("mean_per_sample", value, &[a], Op::MeanPerSample(a))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let value = conv2d(
            &self.node(input)?.value,
            &self.node(weight)?.value,
            bias.map(|b| self.node(b).map(|n| &n.value)).transpose()?,
            padding,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
        )
    }

    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let value = depthwise_conv2d(
            &self.node(input)?.value,
            &self.node(weight)?.value,
            bias.map(|b| self.node(b).map(|n| &n.value)).transpose()?,
            padding,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "depthwise_conv2d",
            value,
            &inputs,
            Op::Depthwise {
                input,
                weight,
                bias,
                padding,
            },
        )
    }

    /// Returns the normalized output and, in training mode, the observed
    /// batch statistics for the caller's running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let running = match mode {
            BnMode::Train => None,
            BnMode::Infer { mean, var } => Some((mean, var)),
        };
        let fwd = batch_norm_forward(
            &self.node(input)?.value,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
            running,
            eps,
        )?;
        let var = self.push(
            "batch_norm",
            fwd.output,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                training: running.is_none(),
            },
        )?;
        Ok((var, fwd.stats))
    }

    /// Concatenates `[N, Ci, H, W]` parts along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.node(*first)?.value.dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.node(p)?.value;
            let [pn, pc, ph, pw] = v.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.node(*first)?.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for ni in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.node(p)?.value.data();
                data.extend_from_slice(&src[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], data)?;
        self.push(
            "concat_channels",
            value,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
        )
    }

    /// 2x2 mean pooling with stride 2; an odd trailing row/column is dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let v = &self.node(a)?.value;
        let [n, c, h, w] = v.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape {
                shape: v.shape().to_vec(),
                reason: "avg_pool2 needs H, W >= 2".into(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let src = v.data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in src.chunks(h * w) {
            for oy in 0..ho {
                let r0 = &plane[2 * oy * w..];
                let r1 = &plane[(2 * oy + 1) * w..];
                for ox in 0..wo {
                    let s = r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1];
                    data.push(s * quarter);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], data)?;
        self.push("avg_pool2", value, &[a], Op::AvgPool2(a))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// reachable node that requires grad; call [`Tape::zero_grads`] or
    /// [`Tape::reset`] between independent passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let seed = Tensor::ones(root.value.shape());
        self.accumulate(loss.index, seed)?;

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v.index, g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn accumulate(&mut self, index: usize, g: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[index];
        match node.grad.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => {
                node.grad = Some(g);
                Ok(())
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.index].value;
        let mut out = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Result<Tensor<T>>| -> Result<()> {
            if self.wants(v) {
                out.push((v, f()?));
            }
            Ok(())
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| Ok(g.clone()))?;
                emit(*b, &|| Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                emit(*a, &|| Ok(g.clone()))?;
                emit(*b, &|| Ok(g.map(|x| -x)))?;
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g.zip_map(val(*b), "mul", |d, y| d * y))?;
                emit(*b, &|| g.zip_map(val(*a), "mul", |d, x| d * x))?;
            }
            Op::Div(a, b) => {
                emit(*a, &|| g.zip_map(val(*b), "div", |d, y| d / y))?;
                emit(*b, &|| {
                    let q = val(*a).zip_map(val(*b), "div", |x, y| x / (y * y))?;
                    g.zip_map(&q, "div", |d, q| -d * q)
                })?;
            }
            Op::Scale(a, s) => emit(*a, &|| Ok(g.map(|d| d * *s)))?,
            Op::AddScalar(a) => emit(*a, &|| Ok(g.clone()))?,
            Op::Relu(a) => emit(*a, &|| {
                g.zip_map(val(*a), "relu", |d, x| if x > T::zero() { d } else { T::zero() })
            })?,
            Op::Square(a) => emit(*a, &|| {
                let two = T::from_f64_lossy(2.0);
                g.zip_map(val(*a), "square", |d, x| two * x * d)
            })?,
            Op::Pow(a, p) => emit(*a, &|| {
                g.zip_map(val(*a), "powf", |d, x| {
                    if x == T::zero() {
                        T::zero()
                    } else {
                        d * *p * x.powf(*p - T::one())
                    }
                })
            })?,
            Op::Sum(a) => emit(*a, &|| Ok(Tensor::full(val(*a).shape(), g.data()[0])))?,
            Op::Mean(a) => emit(*a, &|| {
                let n = T::from_usize(val(*a).len()).unwrap();
                Ok(Tensor::full(val(*a).shape(), g.data()[0] / n))
            })?,
            Op::MeanPerSample(a) => emit(*a, &|| {
                let x = val(*a);
                let per = x.len() / g.len();
                let denom = T::from_usize(per).unwrap();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d / denom, per))
                    .collect();
                Tensor::from_vec(x.shape(), data)
            })?,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let need = [
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let grads = conv2d_backward(val(*input), val(*weight), g, *padding, need)?;
                push_grads(&mut out, *input, *weight, *bias, grads);
            }
            Op::Depthwise {
                input,
                weight,
                bias,
                padding,
            } => {
                let need = [
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let grads = depthwise_conv2d_backward(val(*input), val(*weight), g, *padding, need)?;
                push_grads(&mut out, *input, *weight, *bias, grads);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (dx, dg, db) = batch_norm_backward(xhat, inv_std, val(*gamma), g, *training)?;
                for (v, t) in [(*input, dx), (*gamma, dg), (*beta, db)] {
                    if self.wants(v) {
                        out.push((v, t));
                    }
                }
            }
            Op::Concat { parts, channels } => {
                let [n, total, h, w] = g.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(channels) {
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for ni in 0..n {
                            let start = (ni * total + offset) * plane;
                            data.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        out.push((p, Tensor::from_vec(&[n, c, h, w], data)?));
                    }
                    offset += c;
                }
            }
            Op::AvgPool2(a) => emit(*a, &|| {
                let x = val(*a);
                let [_, _, h, w] = x.dims4()?;
                let [_, _, ho, wo] = g.dims4()?;
                let quarter = T::from_f64_lossy(0.25);
                let mut dx = Tensor::zeros(x.shape());
                for (dplane, gplane) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = gplane[oy * wo + ox] * quarter;
                            for (yy, xx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dplane[(2 * oy + yy) * w + 2 * ox + xx] = d;
                            }
                        }
                    }
                }
                Ok(dx)
            })?,
        }
        Ok(out)
    }
}

fn push_grads<T>(
    out: &mut Vec<(Var, Tensor<T>)>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    grads: super::conv::ConvGrads<T>,
) {
    if let Some(g) = grads.input {
        out.push((input, g));
    }
    if let Some(g) = grads.weight {
        out.push((weight, g));
    }
    if let (Some(b), Some(g)) = (bias, grads.bias) {
        out.push((b, g));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], vec![1.5, -2.0, 3.25, 0.0]);
        let a = tape.constant(x.clone());
        let z = tape.constant(Tensor::zeros_like(&x));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), &x);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[4], vec![1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = t(&[3], vec![0.3, -1.2, 2.0]);
        let a = tape.leaf(x.clone(), true);
        let sq = tape.square(a).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &x);
    }

    #[test]
    fn reused_input_accumulates_once_per_use() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], vec![2.0, 3.0]), true);
        let p = tape.mul(a, a).unwrap();
        let q = tape.add(p, a).unwrap();
        let s = tape.sum(q).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        tape.reset();
        assert!(tape.is_empty());
        let mut fresh = Tape::<f64>::new();
        let mut other = Tape::<f64>::new();
        let v = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(fresh.backward(v), Err(Error::EmptyTape)));
    }

    #[test]
    fn reset_invalidates_handles() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(1.0), true);
        tape.reset();
        assert!(tape.try_value(a).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], vec![1.0]));
        let z = tape.constant(t(&[1], vec![0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let p = tape.avg_pool2(a).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);

        let c = tape.constant(Tensor::full(&[1, 2, 5, 5], 0.75));
        let p = tape.avg_pool2(c).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 2, 2, 2]);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.75));

        let small = tape.constant(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(tape.avg_pool2(small).is_err());
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[2, 64, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 16, 3, 3]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 80, 3, 3]);
        let single = tape.concat_channels(&[b]).unwrap();
        assert_eq!(tape.value(single), tape.value(b));
        let bad = tape.constant(Tensor::zeros(&[2, 1, 4, 3]));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], vec![1.0, 2.0]), false);
        let b = tape.leaf(t(&[2], vec![3.0, 4.0]), true);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    }
}

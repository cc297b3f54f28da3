//! Parameterized building blocks: convolutions (full and depthwise
//! separable), batch norm, dense blocks and transition layers.
//!
//! Trainable tensors and batch-norm running statistics live in a
//! [`ParamStore`] under hierarchical names; layers keep only ids into it.
//! A forward pass binds the store to a [`Tape`] and threads a [`Ctx`]
//! through the layers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Real, Tape, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running average in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

/// Non-trainable state saved with the network (batch-norm running stats).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

/// Tape handles for every parameter of a store, in registration order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Tape leaves in parameter registration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

struct StatUpdate<T> {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats<T>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter {
            grad: Tensor::zeros_like(&value),
            name,
            value,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.buffers.iter().any(|b| b.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars, frozen or not. Buffers are not counted.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name satisfies `predicate` as `frozen`
    /// (or unfrozen). Returns how many matched.
    pub fn set_frozen(&mut self, predicate: impl Fn(&str) -> bool, frozen: bool) -> Result<usize> {
        let mut matched = 0;
        for p in self.params.iter_mut().filter(|p| predicate(&p.name)) {
            p.frozen = frozen;
            matched += 1;
        }
        if matched == 0 {
            return Err(Error::NoMatchingParameters("<predicate>".into()));
        }
        Ok(matched)
    }

    /// Glob form of [`ParamStore::set_frozen`]; `*` matches any run of characters.
    pub fn set_frozen_glob(&mut self, pattern: &str, frozen: bool) -> Result<usize> {
        self.set_frozen(|n| glob_match(pattern, n), frozen)
            .map_err(|_| Error::NoMatchingParameters(pattern.to_string()))
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).count()
    }

    /// Registers each parameter as a tape leaf. Frozen parameters do not
    /// require grad, so backward never visits them.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), !p.frozen))
                .collect(),
        }
    }

    /// Adds the tape's gradients for bound parameters into their `grad`
    /// buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, binding: &Binding) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    pub fn apply_stats(&mut self, pending: PendingStats<T>) {
        let keep = T::from_f64_lossy(BN_MOMENTUM);
        let take = T::one() - keep;
        for u in pending.0 {
            for (id, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &f) in self.buffers[id.0].value.data_mut().iter_mut().zip(fresh) {
                    *r = keep * *r + take * f;
                }
            }
        }
    }
}

/// Shell-style matching where `*` is the only metacharacter.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    match pattern.split_once('*') {
        None => pattern == name,
        Some((head, rest)) => {
            let Some(tail) = name.strip_prefix(head) else {
                return false;
            };
            (0..=tail.len())
                .filter(|&i| tail.is_char_boundary(i))
                .any(|i| glob_match(rest, &tail[i..]))
        }
    }
}

/// State threaded through one forward pass.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    binding: &'a Binding,
    pub mode: Mode,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, binding: &'a Binding, mode: Mode) -> Self {
        Self {
            tape,
            store,
            binding,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.binding.var(id)
    }

    /// Ends the pass, handing back the batch statistics gathered by
    /// training-mode batch norms.
    pub fn finish(self) -> PendingStats<T> {
        PendingStats(self.updates)
    }
}

/// Running-stat updates produced by a training pass, applied with
/// [`ParamStore::apply_stats`].
pub struct PendingStats<T>(Vec<StatUpdate<T>>);

impl<T> PendingStats<T> {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn he_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// Stride-1 convolution with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub padding: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_extents(&[cin, cout, kernel])?;
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel {kernel} must be odd")));
        }
        let weight = store.add_param(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
        )?;
        let bias = bias
            .then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout])))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.var(self.weight);
        let b = self.bias.map(|b| cx.var(b));
        cx.tape.conv2d(x, w, b, self.padding)
    }
}

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1`
/// convolution, each with its own bias.
#[derive(Debug, Clone)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: ParamId,
    pub pointwise_bias: ParamId,
    pub padding: usize,
}

impl SeparableConv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_extents(&[cin, cout, kernel])?;
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel {kernel} must be odd")));
        }
        let depthwise = store.add_param(
            format!("{name}.depthwise.weight"),
            he_normal(rng, &[cin, 1, kernel, kernel], kernel * kernel),
        )?;
        let depthwise_bias = store.add_param(format!("{name}.depthwise.bias"), Tensor::zeros(&[cin]))?;
        let pointwise = store.add_param(
            format!("{name}.pointwise.weight"),
            he_normal(rng, &[cout, cin, 1, 1], cin),
        )?;
        let pointwise_bias = store.add_param(format!("{name}.pointwise.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            depthwise,
            depthwise_bias,
            pointwise,
            pointwise_bias,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (dw, dwb) = (cx.var(self.depthwise), cx.var(self.depthwise_bias));
        let (pw, pwb) = (cx.var(self.pointwise), cx.var(self.pointwise_bias));
        let spatial = cx.tape.depthwise_conv2d(x, dw, Some(dwb), self.padding)?;
        cx.tape.conv2d(spatial, pw, Some(pwb), 0)
    }
}

/// Convolution flavour used inside dense blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Full,
    Separable,
}

#[derive(Debug, Clone)]
pub enum ConvUnit {
    Full(Conv),
    Separable(SeparableConv),
}

impl ConvUnit {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Full(c) => c.forward(cx, x),
            ConvUnit::Separable(c) => c.forward(cx, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        check_extents(&[channels])?;
        Ok(Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.var(self.gamma), cx.var(self.beta));
        let eps = T::from_f64_lossy(BN_EPSILON);
        let store = cx.store;
        let mode = match cx.mode {
            Mode::Train => BnMode::Train,
            Mode::Infer => BnMode::Infer {
                mean: store.buffer(self.running_mean).value.data(),
                var: store.buffer(self.running_var).value.data(),
            },
        };
        let (y, stats) = cx.tape.batch_norm(x, g, b, mode, eps)?;
        if let Some(stats) = stats {
            cx.updates.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub in_channels: usize,
    pub growth_rate: usize,
    pub num_layers: usize,
    pub kernel: usize,
}

impl DenseBlockSpec {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth_rate
    }

    /// Input width of internal layer `i` (0-based).
    pub fn layer_in_channels(&self, i: usize) -> usize {
        self.in_channels + i * self.growth_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

/// conv -> BN -> ReLU, producing `growth_rate` maps.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub conv: ConvUnit,
    pub bn: BatchNorm,
    pub in_channels: usize,
}

impl DenseLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        kind: ConvKind,
        rng: &mut R,
    ) -> Result<Self> {
        let conv_name = format!("{name}.conv");
        let conv = match kind {
            ConvKind::Full => ConvUnit::Full(Conv::new(store, &conv_name, cin, cout, kernel, false, rng)?),
            ConvKind::Separable => ConvUnit::Separable(SeparableConv::new(store, &conv_name, cin, cout, kernel, rng)?),
        };
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout)?;
        Ok(Self {
            conv,
            bn,
            in_channels: cin,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.tape.value(x).dims4()?[1];
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                op: "dense_layer",
                expected: self.in_channels,
                actual: c,
            });
        }
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        cx.tape.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub spec: DenseBlockSpec,
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: DenseBlockSpec,
        kind: ConvKind,
        rng: &mut R,
    ) -> Result<Self> {
        check_extents(&[spec.in_channels, spec.growth_rate, spec.num_layers, spec.kernel])?;
        let layers = (0..spec.num_layers)
            .map(|i| {
                DenseLayer::new(
                    store,
                    &format!("{name}.layer{}", i + 1),
                    spec.layer_in_channels(i),
                    spec.growth_rate,
                    spec.kernel,
                    kind,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    /// Each layer sees the concat of the block input and all earlier layer
    /// outputs; the result is the block input followed by every layer's maps.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.tape.value(x).dims4()?[1];
        if c != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                op: "dense_block",
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        let mut features = x;
        for layer in &self.layers {
            let fresh = layer.forward(cx, features)?;
            features = cx.tape.concat_channels(&[features, fresh])?;
        }
        Ok(features)
    }
}

/// BN over the incoming volume, then a bias-free `1 x 1` convolution and
/// ReLU compressing it to `out_channels`.
#[derive(Debug, Clone)]
pub struct Transition {
    pub spec: TransitionSpec,
    pub bn: BatchNorm,
    pub conv: Conv,
}

impl Transition {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: TransitionSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.in_channels)?;
        let conv = Conv::new(
            store,
            &format!("{name}.conv"),
            spec.in_channels,
            spec.out_channels,
            1,
            false,
            rng,
        )?;
        Ok(Self { spec, bn, conv })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.tape.value(x).dims4()?[1];
        if c != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                op: "transition",
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        let y = self.bn.forward(cx, x)?;
        let y = self.conv.forward(cx, y)?;
        cx.tape.relu(y)
    }
}

fn check_extents(extents: &[usize]) -> Result<()> {
    if extents.contains(&0) {
        return Err(Error::InvalidArgument(format!("extents must be positive: {extents:?}")));
    }
    Ok(())
}

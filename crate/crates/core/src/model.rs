//! Full denoising networks.
//!
//! The dense variants wire a first `3 x 3` convolution, `pairs` dense-block /
//! transition pairs and a final `3 x 3` reconstruction convolution. The first
//! layer's feature map is concatenated onto the input of every transition
//! layer. The network output is the residual (noise) map; the clean estimate
//! is `noisy - output`.
//!
//! Counting convention (reproduces 382,080 / 133,248 / 556,032 exactly for
//! the default v1 / v2 / DnCNN configurations):
//! - full convolutions carry no bias, including the first and final ones;
//! - every batch norm contributes gamma and beta; running stats are not counted;
//! - the first convolution is followed by ReLU only (no batch norm);
//! - transition layers normalize their concatenated input (BN over
//!   `block_out + base` channels) before the `1 x 1` convolution;
//! - depthwise-separable convolutions carry a bias on both stages.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm, Binding, Conv, ConvKind, Ctx, DenseBlock, DenseBlockSpec, Mode, ParamStore, Transition, TransitionSpec,
};
use crate::tensor::{Real, Tape, Tensor, Var};

mod checkpoint;

pub use checkpoint::{checkpoint_digest, from_bytes, load_checkpoint, save_checkpoint, to_bytes, MAGIC, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Dense blocks with full convolutions.
    V1,
    /// Dense blocks with depthwise-separable convolutions.
    V2,
    /// Plain DnCNN stack, kept for parameter-count comparison.
    DncnnRef,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::DncnnRef => "dncnn_ref",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "dncnn_ref" | "dncnn" => Ok(Variant::DncnnRef),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected v1, v2 or dncnn_ref)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_channels: usize,
    /// Width of the first convolution and of every transition output.
    pub base_channels: usize,
    pub pairs: usize,
    pub growth_rate: usize,
    pub block_layers: usize,
    /// Total convolution count of the DnCNN reference; unused by v1/v2.
    pub depth: usize,
}

impl ModelConfig {
    pub fn v1() -> Self {
        Self {
            variant: Variant::V1,
            input_channels: 1,
            base_channels: 64,
            pairs: 6,
            growth_rate: 16,
            block_layers: 4,
            depth: 17,
        }
    }

    pub fn v2() -> Self {
        Self {
            variant: Variant::V2,
            ..Self::v1()
        }
    }

    pub fn dncnn_ref() -> Self {
        Self {
            variant: Variant::DncnnRef,
            ..Self::v1()
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::V1 => Self::v1(),
            Variant::V2 => Self::v2(),
            Variant::DncnnRef => Self::dncnn_ref(),
        }
    }

    /// Two dense-block pairs, otherwise the default widths.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            pairs: 2,
            ..Self::for_variant(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.input_channels,
            self.base_channels,
            self.pairs,
            self.growth_rate,
            self.block_layers,
        ];
        if extents.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model extents must be positive: {self:?}"
            )));
        }
        if self.variant == Variant::DncnnRef && self.depth < 3 {
            return Err(Error::InvalidArgument(format!("DnCNN depth {} < 3", self.depth)));
        }
        Ok(())
    }

    pub fn block_spec(&self) -> DenseBlockSpec {
        DenseBlockSpec {
            in_channels: self.base_channels,
            growth_rate: self.growth_rate,
            num_layers: self.block_layers,
            kernel: 3,
        }
    }

    /// Transition input width: dense-block output plus the forwarded
    /// first-layer features.
    pub fn transition_in_channels(&self) -> usize {
        self.block_spec().out_channels() + self.base_channels
    }
}

#[derive(Debug, Clone)]
struct Pair {
    block: DenseBlock,
    transition: Transition,
}

#[derive(Debug, Clone)]
enum Arch {
    Dense {
        first: Conv,
        pairs: Vec<Pair>,
        last: Conv,
    },
    Dncnn {
        first: Conv,
        body: Vec<(Conv, BatchNorm)>,
        last: Conv,
    },
}

/// Scale applied to the He-initialized final convolution, so an untrained
/// network starts close to the identity denoiser.
pub const FINAL_INIT_GAIN: f64 = 0.1;

/// A realized network: configuration, parameters and layer graph.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    arch: Arch,
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    pub input: Var,
    /// Residual map `R(y)`.
    pub output: Var,
    pub binding: Binding,
    /// First-layer features (dense variants only).
    pub first_features: Option<Var>,
    /// Input volume of each transition layer, in order.
    pub transition_inputs: Vec<Var>,
}

/// Forward-pass switches for inspection and ablation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace the forwarded first-layer features with zeros at every
    /// transition input.
    pub zero_skip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(layer path, trainable scalars)` in registration order.
    pub breakdown: Vec<(String, usize)>,
}

impl<T: Real> Network<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let base = config.base_channels;
        let arch = match config.variant {
            Variant::V1 | Variant::V2 => {
                let kind = if config.variant == Variant::V1 {
                    ConvKind::Full
                } else {
                    ConvKind::Separable
                };
                let first = Conv::new(
                    &mut store,
                    "first_conv",
                    config.input_channels,
                    base,
                    3,
                    false,
                    &mut rng,
                )?;
                let pairs = (1..=config.pairs)
                    .map(|k| {
                        let block = DenseBlock::new(
                            &mut store,
                            &format!("pair{k}.block"),
                            config.block_spec(),
                            kind,
                            &mut rng,
                        )?;
                        let spec = TransitionSpec {
                            in_channels: config.transition_in_channels(),
                            out_channels: base,
                        };
                        let transition = Transition::new(&mut store, &format!("pair{k}.transition"), spec, &mut rng)?;
                        Ok(Pair { block, transition })
                    })
                    .collect::<Result<_>>()?;
                let last = Conv::new(
                    &mut store,
                    "final_conv",
                    base,
                    config.input_channels,
                    3,
                    false,
                    &mut rng,
                )?;
                Arch::Dense { first, pairs, last }
            }
            Variant::DncnnRef => {
                let first = Conv::new(
                    &mut store,
                    "first_conv",
                    config.input_channels,
                    base,
                    3,
                    false,
                    &mut rng,
                )?;
                let body = (1..=config.depth - 2)
                    .map(|i| {
                        let conv = Conv::new(&mut store, &format!("body{i}.conv"), base, base, 3, false, &mut rng)?;
                        let bn = BatchNorm::new(&mut store, &format!("body{i}.bn"), base)?;
                        Ok((conv, bn))
                    })
                    .collect::<Result<_>>()?;
                let last = Conv::new(
                    &mut store,
                    "final_conv",
                    base,
                    config.input_channels,
                    3,
                    false,
                    &mut rng,
                )?;
                Arch::Dncnn { first, body, last }
            }
        };
        let gain = T::from_f64_lossy(FINAL_INIT_GAIN);
        for p in store
            .params_mut()
            .iter_mut()
            .filter(|p| Self::is_final_layer_param(&p.name))
        {
            p.value = p.value.map(|v| v * gain);
        }
        Ok(Self {
            config,
            params: store,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut breakdown: Vec<(String, usize)> = Vec::new();
        for p in self.params.params() {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            match breakdown.last_mut() {
                Some((name, n)) if name == layer => *n += p.value.len(),
                _ => breakdown.push((layer.to_string(), p.value.len())),
            }
        }
        ParamCount {
            total: self.params.scalar_count(),
            breakdown,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::ChannelMismatch {
                op: "network",
                expected: self.config.input_channels,
                actual: c,
            });
        }
        Ok(())
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<(ForwardPass, crate::layers::PendingStats<T>)> {
        self.check_input(x)?;
        let binding = self.params.bind(tape);
        let input = tape.constant(x.clone());
        let mut cx = Ctx::new(tape, &self.params, &binding, mode);
        let mut transition_inputs = Vec::new();
        let mut first_features = None;
        let output = match &self.arch {
            Arch::Dense { first, pairs, last } => {
                let f0 = first.forward(&mut cx, input)?;
                let f0 = cx.tape.relu(f0)?;
                first_features = Some(f0);
                let skip = if opts.zero_skip {
                    let zeros = Tensor::zeros(cx.tape.value(f0).shape());
                    cx.tape.constant(zeros)
                } else {
                    f0
                };
                let mut t = f0;
                for pair in pairs {
                    let d = pair.block.forward(&mut cx, t)?;
                    let tin = cx.tape.concat_channels(&[d, skip])?;
                    transition_inputs.push(tin);
                    t = pair.transition.forward(&mut cx, tin)?;
                }
                last.forward(&mut cx, t)?
            }
            Arch::Dncnn { first, body, last } => {
                let h = first.forward(&mut cx, input)?;
                let mut h = cx.tape.relu(h)?;
                for (conv, bn) in body {
                    let c = conv.forward(&mut cx, h)?;
                    let b = bn.forward(&mut cx, c)?;
                    h = cx.tape.relu(b)?;
                }
                last.forward(&mut cx, h)?
            }
        };
        let pending = cx.finish();
        Ok((
            ForwardPass {
                input,
                output,
                binding,
                first_features,
                transition_inputs,
            },
            pending,
        ))
    }

    /// Records a forward pass of `x` on `tape`. In training mode the batch
    /// norms' running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass> {
        let (pass, pending) = self.run(tape, x, mode, ForwardOptions::default())?;
        self.params.apply_stats(pending);
        Ok(pass)
    }

    /// Inference-mode forward pass that leaves the network untouched.
    pub fn forward_infer(&self, tape: &mut Tape<T>, x: &Tensor<T>, opts: ForwardOptions) -> Result<ForwardPass> {
        Ok(self.run(tape, x, Mode::Infer, opts)?.0)
    }

    /// Residual map `R(y)` in inference mode.
    pub fn residual(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_infer(&mut tape, noisy, ForwardOptions::default())?;
        Ok(tape.value(pass.output).clone())
    }

    /// Clean estimate `noisy - R(noisy)`, unclipped.
    pub fn denoise(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.residual(noisy)?;
        noisy.zip_map(&r, "denoise", |y, r| y - r)
    }

    /// Denoises an `N x C x H x W` tensor in overlapping tiles, keeping the
    /// centre of each tile. With `overlap` at least the receptive-field
    /// radius this matches [`Network::denoise`] up to rounding.
    pub fn denoise_tiled(&self, noisy: &Tensor<T>, tile: usize, overlap: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = noisy.dims4()?;
        if tile == 0 {
            return Err(Error::InvalidArgument("tile size must be positive".into()));
        }
        if h <= tile && w <= tile {
            return self.denoise(noisy);
        }
        let mut out = Tensor::zeros(noisy.shape());
        let src = noisy.data();
        for y0 in (0..h).step_by(tile) {
            for x0 in (0..w).step_by(tile) {
                let (y1, x1) = ((y0 + tile).min(h), (x0 + tile).min(w));
                let (ey0, ex0) = (y0.saturating_sub(overlap), x0.saturating_sub(overlap));
                let (ey1, ex1) = ((y1 + overlap).min(h), (x1 + overlap).min(w));
                let (th, tw) = (ey1 - ey0, ex1 - ex0);
                let mut patch = Vec::with_capacity(n * c * th * tw);
                for plane in src.chunks(h * w) {
                    for yy in ey0..ey1 {
                        patch.extend_from_slice(&plane[yy * w + ex0..yy * w + ex1]);
                    }
                }
                let denoised = self.denoise(&Tensor::from_vec(&[n, c, th, tw], patch)?)?;
                for (dplane, splane) in out.data_mut().chunks_mut(h * w).zip(denoised.data().chunks(th * tw)) {
                    for yy in y0..y1 {
                        let sy = yy - ey0;
                        let row = &splane[sy * tw + (x0 - ex0)..sy * tw + (x1 - ex0)];
                        dplane[yy * w + x0..yy * w + x1].copy_from_slice(row);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Converts every parameter and buffer to another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut params = ParamStore::<U>::new();
        for p in self.params.params() {
            params.add_param(p.name.clone(), p.value.cast()).expect("unique names");
        }
        for b in self.params.buffers() {
            params.add_buffer(b.name.clone(), b.value.cast()).expect("unique names");
        }
        for (dst, src) in params.params_mut().iter_mut().zip(self.params.params()) {
            dst.frozen = src.frozen;
        }
        Network {
            config: self.config,
            params,
            arch: self.arch.clone(),
        }
    }

    /// Parameters belonging to the final reconstruction convolution.
    pub fn is_final_layer_param(name: &str) -> bool {
        name.starts_with("final_conv.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts_match_reference_table() {
        assert_eq!(
            Network::<f32>::build(ModelConfig::v1(), 0)
                .unwrap()
                .count_parameters()
                .total,
            382_080
        );
        assert_eq!(
            Network::<f32>::build(ModelConfig::v2(), 0)
                .unwrap()
                .count_parameters()
                .total,
            133_248
        );
        assert_eq!(
            Network::<f32>::build(ModelConfig::dncnn_ref(), 0)
                .unwrap()
                .count_parameters()
                .total,
            556_032
        );
    }

    #[test]
    fn breakdown_sums_to_total() {
        for cfg in [ModelConfig::v1(), ModelConfig::v2(), ModelConfig::dncnn_ref()] {
            let count = Network::<f32>::build(cfg, 0).unwrap().count_parameters();
            assert_eq!(count.breakdown.iter().map(|(_, n)| n).sum::<usize>(), count.total);
        }
    }

    #[test]
    fn transition_width_is_192_by_default() {
        assert_eq!(ModelConfig::v1().transition_in_channels(), 192);
        let net = Network::<f32>::build(ModelConfig::v1(), 0).unwrap();
        let Arch::Dense { pairs, .. } = &net.arch else { panic!() };
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|p| p.transition.spec.in_channels == 192));
    }

    #[test]
    fn tiny_forward_preserves_shape() {
        let net = Network::<f32>::build(ModelConfig::tiny(Variant::V1), 1).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.5);
        assert_eq!(net.denoise(&x).unwrap().shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn zero_final_layer_is_identity_denoiser() {
        let mut net = Network::<f32>::build(ModelConfig::tiny(Variant::V2), 3).unwrap();
        for p in net.params_mut().params_mut() {
            if Network::<f32>::is_final_layer_param(&p.name) {
                p.value.fill(0.0);
            }
        }
        let x = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|v| v as f32 / 64.0).collect()).unwrap();
        assert_eq!(net.denoise(&x).unwrap(), x);
    }

    #[test]
    fn v1_and_v2_share_wiring() {
        let a = Network::<f32>::build(ModelConfig::tiny(Variant::V1), 0).unwrap();
        let b = Network::<f32>::build(ModelConfig::tiny(Variant::V2), 0).unwrap();
        let strip = |n: &Network<f32>| n.params().buffers().iter().map(|b| b.name.clone()).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let net = Network::<f32>::build(ModelConfig::tiny(Variant::V1), 0).unwrap();
        assert!(matches!(
            net.denoise(&Tensor::zeros(&[1, 2, 8, 8])),
            Err(Error::ChannelMismatch {
                expected: 1,
                actual: 2,
                ..
            })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::dncnn_ref();
        cfg.depth = 2;
        assert!(Network::<f32>::build(cfg, 0).is_err());
        let mut cfg = ModelConfig::v1();
        cfg.growth_rate = 0;
        assert!(Network::<f32>::build(cfg, 0).is_err());
    }
}

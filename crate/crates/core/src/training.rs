//! Losses, optimizers and the two-stage training protocol.
//!
//! Stage 1 trains every parameter on the residual MSE with batch norm in
//! training mode. Stage 2 freezes everything except the final convolution,
//! switches batch norm to inference mode and minimizes
//! `(1 - MS-SSIM) + MSE`.

use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamStore};
use crate::metrics::{self, ms_ssim_on_tape, SsimParams};
use crate::model::{ForwardPass, Network};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `(1/2N) sum ||R(y) - (y - x)||^2`.
    MseResidual,
    /// `(1 - mean MS-SSIM(x, y - R(y))) + MseResidual`.
    Combined,
}

fn check_batch<T: Real>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<usize> {
    let (va, vb) = (tape.try_value(a)?, tape.try_value(b)?);
    va.check_same_shape(vb, op)?;
    let [n, _, _, _] = va.dims4()?;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty batch")));
    }
    Ok(n)
}

/// Residual MSE on the tape from the residual `r`, clean `x` and noisy `y`.
pub fn mse_residual_on_tape<T: Real>(tape: &mut Tape<T>, r: Var, x: Var, y: Var) -> Result<Var> {
    let n = check_batch(tape, x, y, "mse_residual")?;
    check_batch(tape, r, y, "mse_residual")?;
    let target = tape.sub(y, x)?;
    let diff = tape.sub(r, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, T::from_f64_lossy(0.5 / n as f64))
}

/// Combined loss on the tape; see [`LossKind::Combined`].
pub fn combined_on_tape<T: Real>(tape: &mut Tape<T>, r: Var, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    let mse = mse_residual_on_tape(tape, r, x, y)?;
    let estimate = tape.sub(y, r)?;
    let per_sample = ms_ssim_on_tape(tape, x, estimate, p)?;
    let mean = tape.mean(per_sample)?;
    let neg = tape.scale(mean, -T::one())?;
    let dissimilarity = tape.add_scalar(neg, T::one())?;
    tape.add(dissimilarity, mse)
}

pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    kind: LossKind,
    r: Var,
    x: Var,
    y: Var,
    p: &SsimParams,
) -> Result<Var> {
    match kind {
        LossKind::MseResidual => mse_residual_on_tape(tape, r, x, y),
        LossKind::Combined => combined_on_tape(tape, r, x, y, p),
    }
}

/// Runs the network on `noisy` and records the loss against `clean`.
pub fn network_loss<T: Real>(
    net: &mut Network<T>,
    tape: &mut Tape<T>,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    kind: LossKind,
    mode: Mode,
) -> Result<(Var, ForwardPass)> {
    clean.check_same_shape(noisy, "loss")?;
    let pass = net.forward(tape, noisy, mode)?;
    let x = tape.constant(clean.clone());
    let loss = loss_on_tape(tape, kind, pass.output, x, pass.input, &SsimParams::default())?;
    Ok((loss, pass))
}

pub fn loss_mse_residual<T: Real>(
    net: &mut Network<T>,
    tape: &mut Tape<T>,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
) -> Result<Var> {
    Ok(network_loss(net, tape, clean, noisy, LossKind::MseResidual, Mode::Train)?.0)
}

pub fn loss_combined<T: Real>(
    net: &mut Network<T>,
    tape: &mut Tape<T>,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
) -> Result<Var> {
    Ok(network_loss(net, tape, clean, noisy, LossKind::Combined, Mode::Infer)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Slot {
    name: String,
    len: usize,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam or SGD with momentum over a [`ParamStore`]. State is created on the
/// first step and must match the store afterwards.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {learning_rate} must be finite and >= 0"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            steps: 0,
            slots: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn sync<T: Real>(&mut self, store: &ParamStore<T>) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = store
                .params()
                .iter()
                .map(|p| Slot {
                    name: p.name.clone(),
                    len: p.value.len(),
                    first: vec![0.0; p.value.len()],
                    second: vec![0.0; p.value.len()],
                })
                .collect();
            return Ok(());
        }
        if self.slots.len() != store.params().len() {
            return Err(Error::OptimizerState(format!(
                "state holds {} parameters, store has {}",
                self.slots.len(),
                store.params().len()
            )));
        }
        for (s, p) in self.slots.iter().zip(store.params()) {
            if s.name != p.name || s.len != p.value.len() {
                return Err(Error::OptimizerState(format!(
                    "state slot {} does not match parameter {}",
                    s.name, p.name
                )));
            }
        }
        Ok(())
    }

    /// Applies one update to every unfrozen parameter, then zeroes all
    /// gradients. Returns the L2 norm of the applied update.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        self.sync(store)?;
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.learning_rate;
        let mut norm2 = 0.0;
        for (slot, p) in self.slots.iter_mut().zip(store.params_mut()) {
            if p.frozen {
                continue;
            }
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i].to_f64_lossy();
                let delta = match self.kind {
                    OptimizerKind::Adam { beta1, beta2, epsilon } => {
                        slot.first[i] = beta1 * slot.first[i] + (1.0 - beta1) * g;
                        slot.second[i] = beta2 * slot.second[i] + (1.0 - beta2) * g * g;
                        let m = slot.first[i] / (1.0 - beta1.powi(t));
                        let v = slot.second[i] / (1.0 - beta2.powi(t));
                        lr * m / (v.sqrt() + epsilon)
                    }
                    OptimizerKind::Sgd { momentum } => {
                        slot.first[i] = momentum * slot.first[i] + g;
                        lr * slot.first[i]
                    }
                };
                if delta != 0.0 {
                    values[i] = T::from_f64_lossy(values[i].to_f64_lossy() - delta);
                }
                norm2 += delta * delta;
            }
        }
        store.zero_grads();
        Ok(norm2.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Every layer, residual MSE, batch norm in training mode.
    Stage1,
    /// Final convolution only, combined loss, batch norm in inference mode.
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1_full_mse",
            Stage::Stage2 => "stage2_lastlayer_combined",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Seeds the per-epoch batch order.
    pub seed: u64,
    /// Stage 2 only: retrain every layer instead of the final convolution.
    pub retrain_all: bool,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Stage1,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            retrain_all: false,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Stage2,
            learning_rate: 1e-4,
            epochs: 2,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Optimizer::new(self.optimizer, self.learning_rate).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub update_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: Option<PatchMetrics>,
    pub seconds: f64,
}

/// Mean metrics of a denoiser over a patch set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMetrics {
    pub noisy_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// One `step` line per optimizer step and one `epoch` line per epoch.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut epochs = self.epochs.iter().peekable();
        for (i, s) in self.steps.iter().enumerate() {
            let _ = writeln!(
                out,
                "step {} epoch {} loss {:.9e} lr {:e} update_norm {:.6e} time {:.3}",
                s.step, s.epoch, s.loss, s.learning_rate, s.update_norm, s.seconds
            );
            let epoch_done = self.steps.get(i + 1).is_none_or(|next| next.epoch != s.epoch);
            if epoch_done {
                while let Some(e) = epochs.next_if(|e| e.epoch <= s.epoch) {
                    write_epoch(&mut out, e);
                }
            }
        }
        for e in epochs {
            write_epoch(&mut out, e);
        }
        out
    }
}

fn write_epoch(out: &mut String, e: &EpochRecord) {
    let _ = write!(
        out,
        "epoch {} mean_loss {:.9e} time {:.3}",
        e.epoch, e.mean_loss, e.seconds
    );
    if let Some(v) = e.validation {
        let _ = write!(
            out,
            " val_noisy_psnr {:.4} val_psnr {:.4} val_ssim {:.6} val_ms_ssim {:.6}",
            v.noisy_psnr, v.psnr, v.ssim, v.ms_ssim
        );
    }
    out.push('\n');
}

/// Mean per-patch PSNR (peak 1, denoised output clipped to `[0, 1]`), SSIM
/// and MS-SSIM of the network's estimates over `set`.
pub fn evaluate_patches<T: Real>(net: &Network<T>, set: &PatchSet<T>, batch_size: usize) -> Result<PatchMetrics> {
    if set.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    let p = SsimParams::default();
    let mut sums = [0.0; 4];
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (clean, noisy) = set.batch(chunk)?;
        let denoised = net.denoise(&noisy)?.map(|v| v.clamp(T::zero(), T::one()));
        for i in 0..chunk.len() {
            let (c, n, d) = (clean.sample(i)?, noisy.sample(i)?, denoised.sample(i)?);
            sums[0] += metrics::psnr(&c, &n, 1.0)?;
            sums[1] += metrics::psnr(&c, &d, 1.0)?;
        }
        sums[2] += metrics::ssim(&clean, &denoised, &p)? * chunk.len() as f64;
        sums[3] += metrics::ms_ssim(&clean, &denoised, &p)? * chunk.len() as f64;
    }
    let n = set.len() as f64;
    Ok(PatchMetrics {
        noisy_psnr: sums[0] / n,
        psnr: sums[1] / n,
        ssim: sums[2] / n,
        ms_ssim: sums[3] / n,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

fn train_loop<T: Real>(
    net: &mut Network<T>,
    data: &PatchSet<T>,
    validation: Option<&PatchSet<T>>,
    config: &TrainConfig,
    kind: LossKind,
    mode: Mode,
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if net.params().trainable_count() == 0 {
        return Err(Error::NothingToTrain);
    }
    let start = Instant::now();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new();
    net.params_mut().zero_grads();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let step = log.steps.len() + 1;
            let (clean, noisy) = data.batch(chunk)?;
            tape.reset();
            let (loss, pass) =
                network_loss(net, &mut tape, &clean, &noisy, kind, mode).map_err(|e| diverged(step, e))?;
            let value = tape.value(loss).item().expect("scalar loss").to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            tape.backward(loss).map_err(|e| diverged(step, e))?;
            net.params_mut().accumulate_grads(&tape, &pass.binding)?;
            let update_norm = optimizer.step(net.params_mut())?;
            loss_sum += value;
            batches += 1;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: value,
                learning_rate: config.learning_rate,
                update_norm,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        let validation = validation
            .map(|v| evaluate_patches(net, v, config.batch_size))
            .transpose()?;
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Trains the unfrozen parameters on the residual MSE with training-mode
/// batch norm.
pub fn train_stage1<T: Real>(
    net: &mut Network<T>,
    data: &PatchSet<T>,
    validation: Option<&PatchSet<T>>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if config.stage != Stage::Stage1 {
        return Err(Error::InvalidArgument(format!(
            "train_stage1 given a {} config",
            config.stage
        )));
    }
    train_loop(net, data, validation, config, LossKind::MseResidual, Mode::Train)
}

/// Retrains the final convolution (or every layer with `retrain_all`) on the
/// combined loss. Batch norm uses its running statistics, so frozen layers
/// and their statistics are left bit-identical. Freeze flags are restored on
/// return.
pub fn train_stage2<T: Real>(
    net: &mut Network<T>,
    data: &PatchSet<T>,
    validation: Option<&PatchSet<T>>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if config.stage != Stage::Stage2 {
        return Err(Error::InvalidArgument(format!(
            "train_stage2 given a {} config",
            config.stage
        )));
    }
    let saved: Vec<bool> = net.params().params().iter().map(|p| p.frozen).collect();
    let result = (|| {
        if !config.retrain_all {
            net.params_mut().set_frozen(|_| true, true)?;
            net.params_mut()
                .set_frozen(Network::<T>::is_final_layer_param, false)
                .map_err(|_| Error::NothingToTrain)?;
        }
        train_loop(net, data, validation, config, LossKind::Combined, Mode::Infer)
    })();
    for (p, frozen) in net.params_mut().params_mut().iter_mut().zip(saved) {
        p.frozen = frozen;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn scalar_store(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("p", Tensor::scalar(value)).unwrap();
        s.params_mut()[0].grad = Tensor::scalar(1.0);
        s
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0);
        Optimizer::new(OptimizerKind::adam(), 0.1)
            .unwrap()
            .step(&mut s)
            .unwrap();
        assert!((s.params()[0].value.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.params()[0].grad.data()[0], 0.0);
    }

    #[test]
    fn sgd_step() {
        let mut s = scalar_store(2.0);
        Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.5)
            .unwrap()
            .step(&mut s)
            .unwrap();
        assert_eq!(s.params()[0].value.data()[0], 1.5);
    }

    #[test]
    fn frozen_parameter_is_skipped() {
        let mut s = scalar_store(2.0);
        s.params_mut()[0].frozen = true;
        Optimizer::new(OptimizerKind::adam(), 0.5)
            .unwrap()
            .step(&mut s)
            .unwrap();
        assert_eq!(s.params()[0].value.data()[0], 2.0);
    }

    #[test]
    fn optimizer_state_mismatch_is_an_error() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1).unwrap();
        opt.step(&mut scalar_store(1.0)).unwrap();
        let mut other = scalar_store(1.0);
        other.add_param("q", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(opt.step(&mut other), Err(Error::OptimizerState(_))));
    }

    #[test]
    fn mse_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let y = tape.constant(Tensor::ones(&[1, 1, 1, 2]));
        let r = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let loss = mse_residual_on_tape(&mut tape, r, x, y).unwrap();
        assert_eq!(tape.value(loss).item(), Some(1.0));
        let perfect = tape.constant(Tensor::ones(&[1, 1, 1, 2]));
        let loss = mse_residual_on_tape(&mut tape, perfect, x, y).unwrap();
        assert_eq!(tape.value(loss).item(), Some(0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
        assert!(mse_residual_on_tape(&mut tape, a, a, b).is_err());
    }

    #[test]
    fn combined_is_zero_for_perfect_residual() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<f64> = (0..32 * 32).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let x = Tensor::from_vec(&[1, 1, 32, 32], xs).unwrap();
        let y = x.map(|v| v * 0.9 + 0.05);
        let r = y.zip_map(&x, "t", |a, b| a - b).unwrap();
        let (xv, yv, rv) = (tape.constant(x), tape.constant(y), tape.constant(r));
        let loss = combined_on_tape(&mut tape, rv, xv, yv, &SsimParams::default()).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn stage2_with_nothing_to_train_errors() {
        let mut net = Network::<f32>::build(ModelConfig::tiny(crate::Variant::V1), 0).unwrap();
        let set = PatchSet {
            patch_size: 16,
            sigma: 0.0,
            entries: vec![],
            clean: vec![],
            noisy: vec![],
        };
        assert!(train_stage2(&mut net, &set, None, &TrainConfig::stage1()).is_err());
    }
}

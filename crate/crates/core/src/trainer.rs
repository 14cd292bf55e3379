//! Losses, the Adam optimisation loop with deep supervision, and the
//! overfit sanity harness.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::datapipe::{synthetic_samples, to_batch, ImageSample};
use crate::error::{domain_err, shape_err, Result, SegError};
use crate::kernels::sigmoid;
use crate::metrics::{confusion_counts, metric_set, Mask};
use crate::models::{build_model, Arch, Model, ModelConfig, ModelOutput};
use crate::tensor::Tensor;

/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1.0;
/// Global gradient-norm ceiling applied before every update.
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "bce")]
    Bce,
    #[serde(rename = "dice")]
    Dice,
    #[serde(rename = "bce+dice")]
    BceDice,
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    4
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_loss() -> LossKind {
    LossKind::BceDice
}
fn default_aux_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_aux_weight")]
    pub aux_weight: f64,
    #[serde(default)]
    pub seed: u64,
    /// Best-so-far checkpoint destination; nothing is written when absent.
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            loss: default_loss(),
            aux_weight: default_aux_weight(),
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SegError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a finite value > 0");
        }
        if !(0.0..=1.0).contains(&self.aux_weight) {
            return bad("aux_weight must be in [0, 1]");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| SegError::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per epoch, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).unwrap();
        }
        out
    }
}

fn check_pair(logits: &Tensor, truth: &Tensor) -> Result<()> {
    if logits.shape() != truth.shape() {
        return shape_err(format!("logits {:?} vs truth {:?}", logits.shape(), truth.shape()));
    }
    Ok(())
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)` with `p = sigmoid(logits)`.
pub fn dice_loss(logits: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(logits, truth)?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&z, &t) in logits.data().iter().zip(truth.data()) {
        let p = sigmoid(z);
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS))
}

/// Mean binary cross-entropy on logits.
pub fn bce_loss(logits: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(logits, truth)?;
    let sum: f64 = logits
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(sum / logits.numel() as f64)
}

fn loss_of(logits: &Tensor, truth: &Tensor, kind: LossKind) -> Result<f64> {
    Ok(match kind {
        LossKind::Bce => bce_loss(logits, truth)?,
        LossKind::Dice => dice_loss(logits, truth)?,
        LossKind::BceDice => bce_loss(logits, truth)? + dice_loss(logits, truth)?,
    })
}

/// `loss(main) + aux_weight * sum(loss(aux_i))`.
pub fn total_loss(output: &ModelOutput, truth: &Tensor, config: &TrainConfig) -> Result<f64> {
    let mut total = loss_of(&output.main, truth, config.loss)?;
    if config.aux_weight != 0.0 {
        for a in &output.aux {
            total += config.aux_weight * loss_of(a, truth, config.loss)?;
        }
    } else {
        for a in &output.aux {
            check_pair(a, truth)?;
        }
    }
    Ok(total)
}

fn graph_loss(g: &mut Graph, logits: Var, truth: &Tensor, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::Bce => g.bce_with_logits(logits, truth),
        LossKind::Dice => g.dice_loss(logits, truth, DICE_EPS),
        LossKind::BceDice => {
            let b = g.bce_with_logits(logits, truth)?;
            let d = g.dice_loss(logits, truth, DICE_EPS)?;
            g.weighted_sum(&[(b, 1.0), (d, 1.0)])
        }
    }
}

/// Total loss and its gradient with respect to every model parameter, in
/// parameter storage order.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Tensor,
    truth: &Tensor,
    config: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let x = g.leaf(batch.clone());
    let out = model.forward_graph(&mut g, x)?;
    let mut terms = vec![(graph_loss(&mut g, out.main, truth, config.loss)?, 1.0)];
    if config.aux_weight != 0.0 {
        for &a in &out.aux {
            terms.push((graph_loss(&mut g, a, truth, config.loss)?, config.aux_weight));
        }
    }
    let root = g.weighted_sum(&terms)?;
    let loss = g.value(root).item();
    let mut grads = g.backward(root)?;
    let per_param = out
        .params
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((loss, per_param))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One clipped Adam update on a fixed batch; returns the pre-update loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &Tensor,
    truth: &Tensor,
    config: &TrainConfig,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_gradients(model, batch, truth, config)?;
    if !loss.is_finite() {
        return Err(SegError::NonFinite { epoch: 0, step: 0, value: loss });
    }
    clip_global_norm(&mut grads, CLIP_NORM);
    opt.step(model.params_mut().tensors_mut(), &grads);
    Ok(loss)
}

fn check_divisible(model: &Model, samples: &[ImageSample]) -> Result<()> {
    let m = model.config().spatial_multiple();
    for s in samples {
        if s.height() % m != 0 || s.width() % m != 0 {
            return shape_err(format!(
                "sample {} is {}x{}; height and width must be divisible by 2^depth = {m}",
                s.id,
                s.height(),
                s.width()
            ));
        }
    }
    Ok(())
}

fn hard_mask(logits: &Tensor, i: usize) -> Result<Mask> {
    let (_, _, h, w) = logits.dims4()?;
    let plane = &logits.data()[i * h * w..(i + 1) * h * w];
    Mask::new(h, w, plane.iter().map(|&z| (sigmoid(z) > 0.5) as u8).collect())
}

/// Mean validation loss and mean per-image DSC at threshold 0.5.
pub fn validate(model: &Model, samples: &[ImageSample], config: &TrainConfig) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return domain_err("validation set is empty");
    }
    let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
    for chunk in samples.chunks(config.batch_size) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (batch, truth) = to_batch(&refs)?;
        let out = model.forward(&batch)?;
        for (i, s) in chunk.iter().enumerate() {
            let single = ModelOutput {
                main: out.main.batch_item(i)?,
                aux: out.aux.iter().map(|a| a.batch_item(i)).collect::<Result<_>>()?,
            };
            loss_sum += total_loss(&single, &truth.batch_item(i)?, config)?;
            let pred = hard_mask(&out.main, i)?;
            dice_sum += metric_set(&confusion_counts(&pred, &s.mask)?)?.dsc;
        }
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, dice_sum / n))
}

/// Fits `model` for `config.epochs` epochs of seeded mini-batch Adam.
///
/// A checkpoint is written whenever validation Dice improves. Returns the
/// model after the final epoch and the per-epoch history.
pub fn train(
    mut model: Model,
    train_set: &[ImageSample],
    val_set: &[ImageSample],
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return domain_err("training and validation sets must be nonempty");
    }
    check_divisible(&model, train_set)?;
    check_divisible(&model, val_set)?;
    let input_size = Some([train_set[0].height(), train_set[0].width()]);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut history = TrainHistory::default();
    let mut best = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&ImageSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (batch, truth) = to_batch(&refs)?;
            let loss = train_step(&mut model, &mut opt, &batch, &truth, config).map_err(|e| match e {
                SegError::NonFinite { value, .. } => SegError::NonFinite { epoch, step: step + 1, value },
                other => other,
            })?;
            loss_sum += loss;
            steps += 1;
        }
        let (val_loss, val_dice) = validate(&model, val_set, config)?;
        if !val_loss.is_finite() {
            return Err(SegError::NonFinite { epoch, step: steps, value: val_loss });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            val_dice,
        });
        if val_dice > best {
            best = val_dice;
            if let Some(path) = &config.checkpoint_path {
                checkpoint::save(path, &model, input_size)?;
            }
        }
    }
    Ok((model, history))
}

/// Size of the synthetic overfit problem.
pub const SANITY_SAMPLES: usize = 8;
pub const SANITY_SIZE: usize = 64;

/// Tiny model config used by [`overfit_sanity`].
pub fn sanity_model_config(arch: Arch) -> ModelConfig {
    ModelConfig::new(arch).with_size(8, 2).with_seed(0)
}

pub fn sanity_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: SANITY_SAMPLES,
        learning_rate: 3e-3,
        loss: LossKind::BceDice,
        aux_weight: 1.0,
        seed: 0,
        checkpoint_path: None,
    }
}

/// Trains a tiny `arch` model for `steps` full-batch Adam steps on a fixed
/// synthetic batch and returns the bce+dice loss of the main output
/// afterwards (the initial loss when `steps == 0`).
pub fn overfit_sanity(arch: Arch, steps: usize) -> Result<f64> {
    let mut model = build_model(&sanity_model_config(arch))?;
    let samples = synthetic_samples(SANITY_SAMPLES, SANITY_SIZE, 0);
    let refs: Vec<&ImageSample> = samples.iter().collect();
    let (batch, truth) = to_batch(&refs)?;
    let config = sanity_train_config();
    let mut opt = Adam::new(config.learning_rate);
    for step in 0..steps {
        train_step(&mut model, &mut opt, &batch, &truth, &config).map_err(|e| match e {
            SegError::NonFinite { value, .. } => SegError::NonFinite { epoch: 1, step: step + 1, value },
            other => other,
        })?;
    }
    let out = model.forward(&batch)?;
    let loss = loss_of(&out.main, &truth, LossKind::BceDice)?;
    if !loss.is_finite() {
        return Err(SegError::NonFinite { epoch: 1, step: steps, value: loss });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(v: f64, n: usize) -> Tensor {
        Tensor::full(&[1, 1, 1, n], v)
    }

    #[test]
    fn dice_loss_cases() {
        let truth = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = truth.map(|t| if t > 0.5 { 100.0 } else { -100.0 });
        assert!(dice_loss(&logits, &truth).unwrap() <= 1e-6);
        let n = 10;
        let expected = 1.0 - (n as f64 + 1.0) / (1.5 * n as f64 + 1.0);
        assert!((dice_loss(&filled(0.0, n), &filled(1.0, n)).unwrap() - expected).abs() < 1e-12);
        assert!(dice_loss(&filled(-100.0, n), &filled(0.0, n)).unwrap().abs() < 1e-6);
        assert!(dice_loss(&filled(0.0, 3), &filled(0.0, 4)).is_err());
    }

    #[test]
    fn bce_loss_cases() {
        assert!((bce_loss(&filled(0.0, 5), &filled(1.0, 5)).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&filled(100.0, 5), &filled(1.0, 5)).unwrap() <= 1e-6);
    }

    #[test]
    fn total_loss_with_aux() {
        let main = filled(0.3, 4);
        let truth = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = TrainConfig::default();
        let base = loss_of(&main, &truth, LossKind::BceDice).unwrap();
        let bare = ModelOutput { main: main.clone(), aux: vec![] };
        assert_eq!(total_loss(&bare, &truth, &cfg).unwrap(), base);
        let with = ModelOutput { main: main.clone(), aux: vec![main.clone(); 3] };
        assert!((total_loss(&with, &truth, &cfg).unwrap() - 4.0 * base).abs() < 1e-9);
        let zero = TrainConfig { aux_weight: 0.0, ..cfg };
        let other = ModelOutput { main, aux: vec![filled(9.0, 4)] };
        assert_eq!(total_loss(&other, &truth, &zero).unwrap(), base);
    }

    #[test]
    fn config_json() {
        let cfg = TrainConfig::from_json(r#"{"epochs":3,"loss":"bce+dice"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert!(TrainConfig::from_json(r#"{"epochs":0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"loss":"focal"}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"nope":1}"#).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::full(&[4], 10.0)];
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - 20.0).abs() < 1e-12);
        let after: f64 = g[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }
}

//! Diffusion fine-tuning: configuration, learning-rate schedule, the combined
//! loss and the training and evaluation pipelines.

mod eval;
mod pipeline;
mod runlog;
mod segmenter;

use std::path::PathBuf;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var, D};
use candle_nn::{AdamW, Optimizer};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::diffusion::{
    decode_label, predict_x0_batch, q_sample_batch, NoiseSchedule, SamplingConfig,
};
use crate::error::{config_err, contract_err, Result};
use crate::knls::SmoothingConfig;
use crate::network::{DtsModel, ModelConfig};
use crate::util::{randn, scalar_f64, SeededRng};

pub use eval::{run_eval, EvalConfig, Predictor};
pub use pipeline::{
    load_pretrained_condition, prepare_soft_labels, train, SoftLabeler, TrainOutcome,
    CHECKPOINT_DIR, CONFIG_FILE, REPORT_FILE, RUNLOG_FILE,
};
pub use runlog::{loss_sequence, read_runlog, EvalRecord, LogRecord, RunLog, StepRecord};
pub use segmenter::{argmax_channels, DiffusionSegmenter};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mse: f64,
    pub dice: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            dice: 1.0,
            bce: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.mse, self.dice, self.bce];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.iter().all(|&v| v == 0.0) {
            return Err(config_err!(
                "loss weights must be non-negative and not all zero"
            ));
        }
        Ok(())
    }
}

/// How the conditional image encoder is initialised and whether it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CondMode {
    #[default]
    Scratch,
    FrozenPretrained,
    TrainablePretrained,
}

impl CondMode {
    pub fn pretrained(self) -> bool {
        self != CondMode::Scratch
    }

    pub fn frozen(self) -> bool {
        self == CondMode::FrozenPretrained
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub loss_weights: LossWeights,
    /// `None` trains on one-hot labels.
    pub knls: Option<SmoothingConfig>,
    pub cond_mode: CondMode,
    /// Checkpoint of a pretrained conditional encoder.
    pub pretrained: Option<PathBuf>,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Evaluate on a test subset every this many epochs; 0 only evaluates at the end.
    pub eval_every: usize,
    pub eval_images: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-3,
            warmup_frac: 0.1,
            loss_weights: LossWeights::default(),
            knls: Some(SmoothingConfig::default()),
            cond_mode: CondMode::Scratch,
            pretrained: None,
            model: ModelConfig::default(),
            sampling: SamplingConfig::default(),
            augment: None,
            grad_clip: Some(1.0),
            eval_every: 10,
            eval_images: 16,
            eval_batch: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        if let Some(k) = &self.knls {
            k.validate()?;
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(config_err!("epochs and batch sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(config_err!(
                "learning rate must be positive and weight decay non-negative"
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(config_err!(
                "warmup fraction {} outside [0,1)",
                self.warmup_frac
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err!("gradient clip must be positive"));
        }
        if self.cond_mode.pretrained() && self.pretrained.is_none() {
            return Err(config_err!(
                "conditional-encoder mode {:?} needs a pretrained checkpoint",
                self.cond_mode
            ));
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.model.schedule.steps {
            return Err(config_err!(
                "sampling steps must lie in 1..={}, got {}",
                self.model.schedule.steps,
                self.sampling.steps
            ));
        }
        if self.sampling.ensemble == 0 {
            return Err(config_err!("ensemble size must be at least 1"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup_frac * total_steps`, then
/// cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> Result<f64> {
    if step > total_steps {
        return Err(contract_err!(
            "step {step} beyond schedule of {total_steps} steps"
        ));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(config_err!("warmup fraction {warmup_frac} outside [0,1)"));
    }
    let warmup = warmup_frac * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        return Ok(peak * s / warmup);
    }
    let span = total_steps as f64 - warmup;
    if span <= 0.0 {
        return Ok(peak);
    }
    let progress = (s - warmup) / span;
    Ok(peak * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub mse: f64,
    pub dice: f64,
    pub bce: f64,
}

/// `1 - (2 sum p y + eps) / (sum p + sum y + eps)` per class over the whole
/// batch, averaged over the foreground channels `1..C` of `(B, C, H, W)`.
pub fn soft_dice_loss(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = p.dims4()?;
    if p.dims() != y.dims() || c < 2 {
        return Err(contract_err!(
            "soft Dice needs equal (B, C>=2, H, W) shapes, got {:?} and {:?}",
            p.dims(),
            y.dims()
        ));
    }
    let per_class =
        |t: &Tensor| -> Result<Tensor> { Ok(t.sum(D::Minus1)?.sum(D::Minus1)?.sum(0)?) };
    let inter = per_class(&(p * y)?)?;
    let denom = ((per_class(p)? + per_class(y)?)? + DICE_EPS)?;
    let dice = ((inter * 2.0)? + DICE_EPS)?.div(&denom)?;
    Ok(dice.narrow(0, 1, c - 1)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Per-pixel cross-entropy against soft targets, `-(sum_c y log p)` averaged over pixels.
pub fn soft_cross_entropy(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    if p.dims() != y.dims() {
        return Err(contract_err!(
            "cross-entropy shapes {:?} and {:?} differ",
            p.dims(),
            y.dims()
        ));
    }
    let (b, _, h, w) = p.dims4()?;
    let ll = (y * p.log()?)?.sum_all()?;
    Ok((ll / -((b * h * w) as f64))?)
}

/// The weighted fine-tuning objective for one noise estimate. `soft` is the
/// `(B, C, H, W)` target whose encoding produced `x_t`.
pub fn combined_loss(
    eps_hat: &Tensor,
    eps: &Tensor,
    x_t: &Tensor,
    ts: &[usize],
    soft: &Tensor,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
) -> Result<(Tensor, StepLosses)> {
    let mse = (eps_hat - eps)?.sqr()?.mean_all()?;
    let p = decode_label(&predict_x0_batch(x_t, ts, eps_hat, schedule, true)?)?;
    let dice = soft_dice_loss(&p, soft)?;
    let bce = soft_cross_entropy(&p, soft)?;
    let total = ((&mse * weights.mse)? + (&dice * weights.dice)?)?;
    let total = (total + (&bce * weights.bce)?)?;
    let (m, d, b) = (scalar_f64(&mse)?, scalar_f64(&dice)?, scalar_f64(&bce)?);
    let losses = StepLosses {
        total: weights.mse * m + weights.dice * d + weights.bce * b,
        mse: m,
        dice: d,
        bce: b,
    };
    Ok((total, losses))
}

/// Images `(B, C_img, H, W)` with their soft targets `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Tensor,
    pub soft: Tensor,
}

/// Rescales the gradients of `vars` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += scalar_f64(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Draws `t` and `eps`, evaluates the combined loss and applies one AdamW
/// update at learning rate `lr`.
pub fn finetune_step(
    model: &DtsModel,
    opt: &mut AdamW,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut SeededRng,
) -> Result<StepLosses> {
    let b = batch.images.dim(0)?;
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(0..schedule.len())).collect();
    let x0 = crate::diffusion::encode_label(&batch.soft)?;
    let eps = randn(rng, x0.dims(), x0.dtype(), x0.device())?;
    let x_t = q_sample_batch(&x0, &ts, &eps, schedule)?;
    let frozen = cfg.cond_mode.frozen();
    let eps_hat = if frozen {
        let cond = model.encode_condition(&batch.images)?.detach();
        model.forward_with_condition(&x_t, &batch.images, &cond, &ts)?
    } else {
        model.forward(&x_t, &batch.images, &ts)?
    };
    let (loss, losses) = combined_loss(
        &eps_hat,
        &eps,
        &x_t,
        &ts,
        &batch.soft,
        schedule,
        &cfg.loss_weights,
    )?;
    let mut grads = loss.backward()?;
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(&mut grads, &model.trainable_vars(frozen), max)?;
    }
    opt.set_learning_rate(lr);
    opt.step(&grads)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded;
    use candle_core::{DType, Device};
    use candle_nn::ParamsAdamW;

    #[test]
    fn lr_schedule_landmarks() {
        let (total, peak) = (100, 2e-3);
        assert_eq!(lr_at(0, total, peak, 0.1).unwrap(), 0.0);
        assert!((lr_at(5, total, peak, 0.1).unwrap() - peak / 2.0).abs() < 1e-15);
        assert!((lr_at(10, total, peak, 0.1).unwrap() - peak).abs() < 1e-15);
        assert!((lr_at(55, total, peak, 0.1).unwrap() - peak / 2.0).abs() < 1e-15);
        assert!(lr_at(100, total, peak, 0.1).unwrap().abs() < 1e-15);
        assert!(lr_at(101, total, peak, 0.1).is_err());
        assert_eq!(lr_at(0, total, peak, 0.0).unwrap(), peak);
    }

    #[test]
    fn lr_is_continuous_at_warmup_end() {
        let (total, peak) = (1000, 1.0);
        let left = lr_at(99, total, peak, 0.1).unwrap();
        let right = lr_at(101, total, peak, 0.1).unwrap();
        assert!((lr_at(100, total, peak, 0.1).unwrap() - peak).abs() < 1e-15);
        assert!((left - peak).abs() < 0.011 && (right - peak).abs() < 1e-4);
        for s in 0..total {
            let (a, b) = (
                lr_at(s, total, peak, 0.1).unwrap(),
                lr_at(s + 1, total, peak, 0.1).unwrap(),
            );
            assert!((a - b).abs() <= peak / 90.0 + 1e-12);
        }
    }

    fn rand_probs(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let x = randn(rng, shape, DType::F64, &Device::Cpu).unwrap();
        crate::util::softmax_dim(&x, 1).unwrap()
    }

    #[test]
    fn dice_and_ce_reference_values() {
        let mut rng = seeded(1);
        let y = rand_probs(&mut rng, &[2, 3, 4, 4]);
        let p = rand_probs(&mut rng, &[2, 3, 4, 4]);
        let pv = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let idx = |b: usize, c: usize, i: usize| (b * 3 + c) * 16 + i;
        let mut expect = 0.0;
        for c in 1..3 {
            let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
            for b in 0..2 {
                for i in 0..16 {
                    inter += pv[idx(b, c, i)] * yv[idx(b, c, i)];
                    sp += pv[idx(b, c, i)];
                    sy += yv[idx(b, c, i)];
                }
            }
            expect += 1.0 - (2.0 * inter + DICE_EPS) / (sp + sy + DICE_EPS);
        }
        expect /= 2.0;
        assert!((scalar_f64(&soft_dice_loss(&p, &y).unwrap()).unwrap() - expect).abs() < 1e-12);
        let mut ce = 0.0;
        for b in 0..2 {
            for i in 0..16 {
                ce -= (0..3)
                    .map(|c| yv[idx(b, c, i)] * pv[idx(b, c, i)].ln())
                    .sum::<f64>();
            }
        }
        ce /= 32.0;
        assert!((scalar_f64(&soft_cross_entropy(&p, &y).unwrap()).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn perfect_noise_estimate_has_zero_mse() {
        let mut rng = seeded(4);
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let soft = rand_probs(&mut rng, &[2, 3, 8, 8]);
        let x0 = crate::diffusion::encode_label(&soft).unwrap();
        let eps = randn(&mut rng, &[2, 3, 8, 8], DType::F64, &Device::Cpu).unwrap();
        let ts = [10, 700];
        let x_t = q_sample_batch(&x0, &ts, &eps, &schedule).unwrap();
        let (_, l) = combined_loss(
            &eps,
            &eps,
            &x_t,
            &ts,
            &soft,
            &schedule,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(l.mse, 0.0);
        let only_mse = LossWeights {
            mse: 2.0,
            dice: 0.0,
            bce: 0.0,
        };
        let eps_hat = randn(&mut rng, &[2, 3, 8, 8], DType::F64, &Device::Cpu).unwrap();
        let (t, l) = combined_loss(&eps_hat, &eps, &x_t, &ts, &soft, &schedule, &only_mse).unwrap();
        assert_eq!(l.total, 2.0 * l.mse);
        assert!((scalar_f64(&t).unwrap() - 2.0 * l.mse).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_step_only_decays_weights() {
        let w0 = Tensor::new(&[[0.5f64, -1.5], [2.0, 0.25]], &Device::Cpu).unwrap();
        let w = Var::from_tensor(&w0).unwrap();
        let (lr, wd) = (0.01, 1e-3);
        let mut opt = AdamW::new(
            vec![w.clone()],
            ParamsAdamW {
                lr,
                weight_decay: wd,
                ..ParamsAdamW::default()
            },
        )
        .unwrap();
        let loss = (w.as_tensor() * w0.zeros_like().unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.backward_step(&loss).unwrap();
        let got = w
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let want = (w0 * (1.0 - lr * wd))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn config_rejects_bad_values() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig {
                warmup_frac: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                loss_weights: LossWeights {
                    mse: 0.0,
                    dice: 0.0,
                    bce: 0.0,
                },
                ..TrainConfig::default()
            },
            TrainConfig {
                cond_mode: CondMode::TrainablePretrained,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        let json = r#"{"epochs": 2, "unknown": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let json = r#"{"epochs": 2, "knls": null, "cond_mode": "frozen-pretrained"}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(
            (c.epochs, c.knls, c.cond_mode),
            (2, None, CondMode::FrozenPretrained)
        );
    }
}

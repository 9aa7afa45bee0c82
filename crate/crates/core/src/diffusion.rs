//! Gaussian diffusion over segmentation labels.
//!
//! Labels enter the process as `x0 = 2 * soft_label - 1`, so every entry lies in
//! `[-1, 1]`. The denoiser predicts the injected noise; the clean label is
//! recovered algebraically with [`predict_x0`].

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::util::{randn, seeded, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Serializable description of a noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

/// Per-step variances and their cumulative products.
///
/// `timesteps[i]` maps index `i` of this schedule back to the step index the
/// denoiser was trained with. For a freshly built schedule it is the identity;
/// [`NoiseSchedule::respace`] produces a strided sub-schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err!("diffusion step count must be positive"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            ));
        }
        let betas = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::build(steps, ScheduleKind::Linear, beta_start, beta_end)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(config_err!("empty beta schedule"));
        }
        if let Some(b) = betas
            .iter()
            .find(|b| !(**b > 0.0 && 1.0 - **b < 1.0 && **b < 1.0))
        {
            return Err(config_err!(
                "beta {b} outside (0, 1) or too small to represent"
            ));
        }
        let mut acc = 1.0;
        let alpha_bar: Vec<f64> = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        if acc < f64::MIN_POSITIVE {
            return Err(config_err!(
                "schedule drives alpha_bar below the smallest normal float"
            ));
        }
        let timesteps = (0..betas.len()).collect();
        Ok(Self {
            betas,
            alpha_bar,
            timesteps,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Denoiser step index that schedule index `t` corresponds to.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.timesteps[t]
    }

    /// Uniformly strided sub-schedule with `steps` entries spanning the full range.
    ///
    /// Betas of the sub-schedule are re-derived from the retained cumulative
    /// products so that `alpha_bar` is unchanged at the kept indices.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(config_err!(
                "sampling steps must be in 1..={total}, got {steps}"
            ));
        }
        let kept: Vec<usize> = if steps == 1 {
            vec![total - 1]
        } else {
            (0..steps)
                .map(|k| ((k * (total - 1)) as f64 / (steps - 1) as f64).round() as usize)
                .collect()
        };
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar[t];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut out = Self::from_betas(betas)?;
        out.alpha_bar = kept.iter().map(|&t| self.alpha_bar[t]).collect();
        out.timesteps = kept.iter().map(|&t| self.timesteps[t]).collect();
        Ok(out)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(contract_err!("step {t} outside [0, {})", self.len()));
        }
        Ok(())
    }

    /// Per-sample coefficient tensor of shape `(B, 1, 1, 1)`.
    /// `f(alpha_bar[t])` per batch entry, shaped to broadcast against `like`.
    pub fn coef(&self, ts: &[usize], f: impl Fn(f64) -> f64, like: &Tensor) -> Result<Tensor> {
        let mut shape = vec![ts.len()];
        shape.resize(like.rank(), 1);
        let vals: Vec<f64> = ts.iter().map(|&t| f(self.alpha_bar[t])).collect();
        Ok(Tensor::from_vec(vals, shape, like.device())?.to_dtype(like.dtype())?)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract_err!(
            "{what}: shape {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

/// Forward noising at a single step: `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t)?;
    check_same_shape(x0, eps, "q_sample")?;
    let ab = s.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Forward noising with one step index per leading-dimension entry.
pub fn q_sample_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(x0, eps, "q_sample")?;
    check_batch(x0, ts, s)?;
    let a = s.coef(ts, f64::sqrt, x0)?;
    let b = s.coef(ts, |ab| (1.0 - ab).sqrt(), x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

fn check_batch(x: &Tensor, ts: &[usize], s: &NoiseSchedule) -> Result<()> {
    if x.rank() == 0 || x.dim(0)? != ts.len() {
        return Err(contract_err!(
            "{} step indices for tensor {:?}",
            ts.len(),
            x.dims()
        ));
    }
    ts.iter().try_for_each(|&t| s.check_step(t))
}

/// Inverse of [`q_sample`] given a noise estimate. Clamps to `[-1, 1]` when `clamp` is set.
pub fn predict_x0(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    clamp: bool,
) -> Result<Tensor> {
    s.check_step(t)?;
    check_same_shape(x_t, eps_hat, "predict_x0")?;
    let ab = s.alpha_bar(t);
    let x0 = ((x_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(if clamp { x0.clamp(-1.0, 1.0)? } else { x0 })
}

pub fn predict_x0_batch(
    x_t: &Tensor,
    ts: &[usize],
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    clamp: bool,
) -> Result<Tensor> {
    check_same_shape(x_t, eps_hat, "predict_x0")?;
    check_batch(x_t, ts, s)?;
    let b = s.coef(ts, |ab| (1.0 - ab).sqrt(), x_t)?;
    let inv_a = s.coef(ts, |ab| 1.0 / ab.sqrt(), x_t)?;
    let x0 = (x_t - eps_hat.broadcast_mul(&b)?)?.broadcast_mul(&inv_a)?;
    Ok(if clamp { x0.clamp(-1.0, 1.0)? } else { x0 })
}

/// One ancestral reverse step `x_t -> x_{t-1}`.
///
/// `noise` is ignored at `t == 0`, where the posterior variance is zero.
pub fn p_sample_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    s.check_step(t)?;
    check_same_shape(x_t, eps_hat, "p_sample_step")?;
    let beta = s.beta(t);
    let ab = s.alpha_bar(t);
    let mean = ((x_t - (eps_hat * (beta / (1.0 - ab).sqrt()))?)? / (1.0 - beta).sqrt())?;
    if t == 0 {
        return Ok(mean);
    }
    let sigma = posterior_std(s, t);
    match noise {
        Some(z) => {
            check_same_shape(x_t, z, "p_sample_step noise")?;
            Ok((mean + (z * sigma)?)?)
        }
        None => Ok(mean),
    }
}

/// `sigma_t = sqrt(beta_t * (1 - ab_{t-1}) / (1 - ab_t))`, zero at `t == 0`.
pub fn posterior_std(s: &NoiseSchedule, t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    (s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))).sqrt()
}

/// Soft label (simplex per pixel) to the diffusion range `[-1, 1]`.
pub fn encode_label(soft: &Tensor) -> Result<Tensor> {
    Ok(((soft * 2.0)? - 1.0)?)
}

/// Diffusion-range tensor `(B, C, H, W)` back to per-pixel probabilities.
///
/// Values are mapped through `(x + 1) / 2`, clipped to `[0, 1]` and renormalized
/// over the channel axis.
pub fn decode_label(x: &Tensor) -> Result<Tensor> {
    let p = ((x + 1.0)? / 2.0)?.clamp(0.0, 1.0)?;
    let p = (p + 1e-8)?;
    let sum = p.sum_keepdim(1)?;
    Ok(p.broadcast_div(&sum)?)
}

/// A noise predictor usable by the reverse process.
///
/// `Condition` caches whatever depends on the image alone so that it is
/// computed once per sampling run rather than once per step.
pub trait Denoiser {
    type Condition;

    fn num_classes(&self) -> usize;

    fn condition(&self, image: &Tensor) -> Result<Self::Condition>;

    /// `x_t` is `(B, C, H, W)`, `image` is `(B, C_img, H, W)`, and `t` is a
    /// step index of the schedule the denoiser was trained with.
    fn predict_eps(
        &self,
        x_t: &Tensor,
        image: &Tensor,
        cond: &Self::Condition,
        t: usize,
    ) -> Result<Tensor>;
}

/// Wraps a closure `(x_t, image, t) -> eps` as a [`Denoiser`].
pub struct EpsFn<F> {
    classes: usize,
    f: F,
}

impl<F> EpsFn<F>
where
    F: Fn(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    pub fn new(classes: usize, f: F) -> Self {
        Self { classes, f }
    }
}

impl<F> Denoiser for EpsFn<F>
where
    F: Fn(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    type Condition = ();

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn condition(&self, _image: &Tensor) -> Result<()> {
        Ok(())
    }

    fn predict_eps(&self, x_t: &Tensor, image: &Tensor, _cond: &(), t: usize) -> Result<Tensor> {
        (self.f)(x_t, image, t)
    }
}

/// Returns the exact noise that separates `x_t` from a known clean label.
pub struct OracleDenoiser {
    x0: Tensor,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    /// `x0` is the encoded clean label `(B, C, H, W)` of the images that will be sampled.
    pub fn new(x0: Tensor, schedule: NoiseSchedule) -> Self {
        Self { x0, schedule }
    }
}

impl Denoiser for OracleDenoiser {
    type Condition = ();

    fn num_classes(&self) -> usize {
        self.x0.dim(1).unwrap_or(0)
    }

    fn condition(&self, _image: &Tensor) -> Result<()> {
        Ok(())
    }

    fn predict_eps(&self, x_t: &Tensor, _image: &Tensor, _cond: &(), t: usize) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t);
        let x0 = self.x0.to_dtype(x_t.dtype())?;
        Ok(((x_t - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub ensemble: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            ensemble: 1,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    /// Seed of ensemble member `m`.
    pub fn member_seed(&self, m: usize) -> u64 {
        self.seed
            .wrapping_add((m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Runs the reverse process from pure noise and returns per-pixel class
/// probabilities `(B, C, H, W)` averaged over the ensemble.
pub fn sample_segmentation<M: Denoiser>(
    model: &M,
    image: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &SamplingConfig,
) -> Result<Tensor> {
    if cfg.ensemble == 0 {
        return Err(config_err!("ensemble size must be at least 1"));
    }
    let seeds: Vec<u64> = (0..cfg.ensemble).map(|m| cfg.member_seed(m)).collect();
    sample_segmentation_with_seeds(model, image, schedule, cfg.steps, &seeds)
}

/// As [`sample_segmentation`], with one explicit seed per ensemble member.
pub fn sample_segmentation_with_seeds<M: Denoiser>(
    model: &M,
    image: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    seeds: &[u64],
) -> Result<Tensor> {
    if steps == 0 {
        return Err(config_err!("sampling steps must be positive"));
    }
    if seeds.is_empty() {
        return Err(config_err!("ensemble size must be at least 1"));
    }
    let sub = schedule.respace(steps)?;
    let cond = model.condition(image)?;
    let (b, _, h, w) = image.dims4()?;
    let shape = [b, model.num_classes(), h, w];
    let mut acc: Option<Tensor> = None;
    for &seed in seeds {
        let mut rng = seeded(seed);
        let probs = reverse_chain(model, image, &cond, &sub, &shape, &mut rng)?;
        acc = Some(match acc {
            None => probs,
            Some(a) => (a + probs)?,
        });
    }
    let mean = (acc.expect("at least one member") / seeds.len() as f64)?;
    let sum = mean.sum_keepdim(1)?;
    Ok(mean.broadcast_div(&sum)?)
}

fn reverse_chain<M: Denoiser>(
    model: &M,
    image: &Tensor,
    cond: &M::Condition,
    sub: &NoiseSchedule,
    shape: &[usize],
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let dtype = image.dtype();
    let device: &Device = image.device();
    let mut x = randn(rng, shape, dtype, device)?;
    for t in (0..sub.len()).rev() {
        let eps_hat = model.predict_eps(&x, image, cond, sub.model_timestep(t))?;
        let noise = if t > 0 {
            Some(randn(rng, shape, dtype, device)?)
        } else {
            None
        };
        x = p_sample_step(&x, t, &eps_hat, sub, noise.as_ref())?;
    }
    decode_label(&x.clamp(-1.0, 1.0)?)
}

/// Argmax over the channel axis of `(B, C, H, W)` probabilities.
pub fn argmax_labels(probs: &Tensor) -> Result<Tensor> {
    Ok(probs.argmax(1)?)
}

/// One-hot `(B, C, H, W)` from integer labels `(B, H, W)`.
pub fn one_hot(labels: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let (b, h, w) = labels.dims3()?;
    let ids = labels.to_dtype(DType::U32)?.unsqueeze(1)?;
    let range =
        Tensor::arange(0u32, classes as u32, labels.device())?.reshape((1, classes, 1, 1))?;
    let hot = ids
        .broadcast_as((b, classes, h, w))?
        .eq(&range.broadcast_as((b, classes, h, w))?)?;
    Ok(hot.to_dtype(dtype)?)
}

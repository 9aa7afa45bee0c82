//! Self-supervised pretraining of the image encoder with three pretext tasks:
//! contrastive agreement between two views, masked-cell location and
//! masked-patch reconstruction.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::{apply_image, AugmentConfig, AugmentDraw};
use crate::data::SegSample;
use crate::error::{config_err, contract_err, Result};
use crate::network::checkpoint::{save_params, Manifest};
use crate::network::model::{build_condition_encoder, CONDITION_PREFIX};
use crate::network::swin::{global_pool, SwinEncoder};
use crate::network::ModelConfig;
use crate::nn::{nhwc_to_nchw, pixel_shuffle, Linear, ParamStore, Scope};
use crate::ops;
use crate::train::lr_at;
use crate::util::{log_softmax_last, scalar_f64, seeded, SeededRng};

/// Cells of the location task.
pub const GRID_CELLS: usize = 9;

/// Zeroes `round(ratio * N)` of the `N` square patches, chosen without replacement.
/// Returns the masked image and the pixel mask of replaced patches.
pub fn mask_patches(
    image: ArrayView2<f32>,
    patch: usize,
    ratio: f64,
    rng: &mut SeededRng,
) -> Result<(Array2<f32>, Array2<bool>)> {
    let (h, w) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(config_err!(
            "image {h}x{w} is not divisible into {patch}-pixel patches"
        ));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(config_err!("mask ratio {ratio} outside [0,1]"));
    }
    let (ph, pw) = (h / patch, w / patch);
    let n = ph * pw;
    let m = (ratio * n as f64).round() as usize;
    let mut out = image.to_owned();
    let mut mask = Array2::from_elem((h, w), false);
    for idx in sample_indices(rng, n, m) {
        let (r, c) = (idx / pw * patch, idx % pw * patch);
        out.slice_mut(s![r..r + patch, c..c + patch]).fill(0.0);
        mask.slice_mut(s![r..r + patch, c..c + patch]).fill(true);
    }
    Ok((out, mask))
}

/// Pixel bounds `[start, end)` of the 3x3 grid along a side.
pub fn grid_bounds(side: usize) -> [usize; 4] {
    [0, side / 3, 2 * side / 3, side]
}

/// Zeroes grid cell `cell` (row-major over the 3x3 grid).
pub fn mask_cell(image: &mut Array2<f32>, cell: usize) {
    let (h, w) = image.dim();
    let (rb, cb) = (grid_bounds(h), grid_bounds(w));
    let (r, c) = (cell / 3, cell % 3);
    image
        .slice_mut(s![rb[r]..rb[r + 1], cb[c]..cb[c + 1]])
        .fill(0.0);
}

/// NT-Xent over the `2B` rows of `z_i` and `z_j`: row `a` of one view is
/// the positive of row `a` of the other, every other row is a negative.
pub fn contrastive_loss(z_i: &Tensor, z_j: &Tensor, temperature: f64) -> Result<Tensor> {
    let (b, d) = z_i.dims2()?;
    if z_j.dims() != [b, d] {
        return Err(contract_err!(
            "views {:?} and {:?} differ",
            z_i.dims(),
            z_j.dims()
        ));
    }
    if b < 2 {
        return Err(config_err!(
            "contrastive loss needs at least 2 pairs, got {b}"
        ));
    }
    if !(temperature > 0.0) {
        return Err(config_err!("temperature must be positive"));
    }
    let z = l2_normalize(&Tensor::cat(&[z_i, z_j], 0)?)?;
    let n = 2 * b;
    let sim = (z.matmul(&z.t()?)? / temperature)?;
    let mut self_mask = vec![0f64; n * n];
    let mut positive = vec![0f64; n * n];
    for a in 0..n {
        self_mask[a * n + a] = -1e9;
        positive[a * n + (a + b) % n] = 1.0;
    }
    let dev = z.device();
    let self_mask = Tensor::from_vec(self_mask, (n, n), dev)?.to_dtype(z.dtype())?;
    let positive = Tensor::from_vec(positive, (n, n), dev)?.to_dtype(z.dtype())?;
    let logp = log_softmax_last(&(sim + self_mask)?)?;
    Ok(((logp * positive)?.sum_all()? / -(n as f64))?)
}

/// Mean cross-entropy of `(B, 9)` logits against cell indices.
pub fn location_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if targets.len() != b || targets.iter().any(|&t| t >= k) {
        return Err(contract_err!("{} targets in 0..{k} expected", b));
    }
    let mut hot = vec![0f64; b * k];
    for (i, &t) in targets.iter().enumerate() {
        hot[i * k + t] = 1.0;
    }
    let hot = Tensor::from_vec(hot, (b, k), logits.device())?.to_dtype(logits.dtype())?;
    Ok(((log_softmax_last(logits)? * hot)?.sum_all()? / -(b as f64))?)
}

/// Mean squared error over the pixels where `mask` is 1.
pub fn reconstruction_loss(pred: &Tensor, original: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if pred.dims() != original.dims() || pred.dims() != mask.dims() {
        return Err(contract_err!(
            "prediction {:?}, original {:?} and mask {:?} must agree",
            pred.dims(),
            original.dims(),
            mask.dims()
        ));
    }
    let count = scalar_f64(&mask.sum_all()?)?;
    if count <= 0.0 {
        return Err(contract_err!("reconstruction mask is empty"));
    }
    let diff = ((pred - original)? * mask)?;
    Ok((diff.sqr()?.sum_all()? / count)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslLossWeights {
    pub contrastive: f64,
    pub location: f64,
    pub reconstruction: f64,
}

impl Default for SslLossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            location: 1.0,
            reconstruction: 1.0,
        }
    }
}

impl SslLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.contrastive, self.location, self.reconstruction];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.iter().all(|&v| v == 0.0) {
            return Err(config_err!(
                "pretext weights must be non-negative and not all zero"
            ));
        }
        Ok(())
    }

    pub fn enabled(&self) -> [bool; 3] {
        [
            self.contrastive > 0.0,
            self.location > 0.0,
            self.reconstruction > 0.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslLosses {
    pub total: f64,
    pub contrastive: f64,
    pub location: f64,
    pub reconstruction: f64,
}

impl SslLosses {
    pub fn components(&self) -> [f64; 3] {
        [self.contrastive, self.location, self.reconstruction]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    /// Architecture of the encoder being pretrained.
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub mask_ratio: f64,
    pub mask_patch: usize,
    pub temperature: f64,
    pub proj_dim: usize,
    pub weights: SslLossWeights,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-3,
            warmup_frac: 0.1,
            mask_ratio: 0.4,
            mask_patch: 8,
            temperature: 0.5,
            proj_dim: 64,
            weights: SslLossWeights::default(),
            augment: AugmentConfig {
                scale_range: (1.0, 1.0),
                shift_range: (0.0, 0.0),
                ..AugmentConfig::default()
            },
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(config_err!("pretraining batch must hold at least 2 images"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(config_err!("warmup fraction must lie in [0,1)"));
        }
        if !(self.temperature > 0.0) || self.proj_dim == 0 || self.mask_patch == 0 {
            return Err(config_err!(
                "temperature, projection width and mask patch must be positive"
            ));
        }
        Ok(())
    }
}

/// Two masked, independently augmented views of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_i: Array2<f32>,
    pub view_j: Array2<f32>,
    pub mask_i: Array2<bool>,
    pub mask_j: Array2<bool>,
    /// Grid cell zeroed in `view_i`.
    pub loc_target: usize,
    /// `view_j` before masking, the reconstruction target.
    pub target_j: Array2<f32>,
}

pub fn make_view_pair(
    image: ArrayView2<f32>,
    cfg: &SslConfig,
    rng: &mut SeededRng,
) -> Result<ViewPair> {
    let a = apply_image(image, &AugmentDraw::sample(rng, &cfg.augment));
    let (mut view_i, mask_i) = mask_patches(a.view(), cfg.mask_patch, cfg.mask_ratio, rng)?;
    let loc_target = rng.gen_range(0..GRID_CELLS);
    mask_cell(&mut view_i, loc_target);
    let target_j = apply_image(image, &AugmentDraw::sample(rng, &cfg.augment));
    let (view_j, mask_j) = mask_patches(target_j.view(), cfg.mask_patch, cfg.mask_ratio, rng)?;
    Ok(ViewPair {
        view_i,
        view_j,
        mask_i,
        mask_j,
        loc_target,
        target_j,
    })
}

/// Image encoder plus the three pretext heads.
pub struct SslModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: SwinEncoder,
    proj1: Linear,
    proj2: Linear,
    location: Linear,
    recon: Linear,
    recon_factor: usize,
}

impl SslModel {
    pub fn new(
        cfg: ModelConfig,
        proj_dim: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let encoder = build_condition_encoder(&mut store, &cfg)?;
        let d = cfg.stage_dims[3];
        let scope = Scope::root("ssl");
        let recon_factor = cfg.image_size / cfg.level_side(3);
        let proj1 = Linear::fan_in(&mut store, &scope.sub("proj1"), d, d)?;
        let proj2 = Linear::fan_in(&mut store, &scope.sub("proj2"), d, proj_dim)?;
        let location = Linear::fan_in(&mut store, &scope.sub("location"), d, GRID_CELLS)?;
        let recon = Linear::fan_in(
            &mut store,
            &scope.sub("recon"),
            d,
            recon_factor * recon_factor * cfg.image_channels,
        )?;
        Ok(Self {
            cfg,
            store,
            encoder,
            proj1,
            proj2,
            location,
            recon,
            recon_factor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &SwinEncoder {
        &self.encoder
    }

    /// Saves only the encoder, under the conditional-encoder parameter names.
    pub fn save_encoder(&self, dir: &Path, metadata: serde_json::Value) -> Result<Manifest> {
        let prefix = format!("{CONDITION_PREFIX}.");
        save_params(dir, &self.cfg, &self.store, Some(&prefix), metadata)
    }
}

fn stack(views: &[&Array2<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = views[0].dim();
    let data: Vec<f32> = views.iter().flat_map(|v| v.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (views.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Forward pass of all three pretext tasks on a batch of images. The
/// returned tensor is the weighted total, ready for backpropagation.
pub fn ssl_step(
    model: &SslModel,
    images: &[ArrayView2<f32>],
    cfg: &SslConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, SslLosses)> {
    let pairs = images
        .iter()
        .map(|img| make_view_pair(*img, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    ssl_losses(model, &pairs, cfg)
}

/// Pretext losses for prepared view pairs.
pub fn ssl_losses(
    model: &SslModel,
    pairs: &[ViewPair],
    cfg: &SslConfig,
) -> Result<(Tensor, SslLosses)> {
    if model.cfg.image_channels != 1 {
        return Err(config_err!("pretraining supports single-channel images"));
    }
    let b = pairs.len();
    let (dtype, dev) = (model.store.dtype(), model.store.device().clone());
    let views: Vec<&Array2<f32>> = pairs
        .iter()
        .map(|p| &p.view_i)
        .chain(pairs.iter().map(|p| &p.view_j))
        .collect();
    let x = stack(&views, dtype, &dev)?;
    let pyramid = model.encoder.forward(&x, None)?;
    let pooled = global_pool(&pyramid)?;
    let z = model
        .proj2
        .forward(&ops::silu(&model.proj1.forward(&pooled)?)?)?;
    let l_cl = contrastive_loss(&z.narrow(0, 0, b)?, &z.narrow(0, b, b)?, cfg.temperature)?;

    let targets: Vec<usize> = pairs.iter().map(|p| p.loc_target).collect();
    let l_loc = location_loss(&model.location.forward(&pooled.narrow(0, 0, b)?)?, &targets)?;

    let deep = pyramid.levels[3].narrow(0, b, b)?;
    let recon = nhwc_to_nchw(&pixel_shuffle(
        &model.recon.forward(&deep)?,
        model.recon_factor,
    )?)?;
    let originals: Vec<&Array2<f32>> = pairs.iter().map(|p| &p.target_j).collect();
    let original = stack(&originals, dtype, &dev)?;
    let masks: Vec<Array2<f32>> = pairs
        .iter()
        .map(|p| p.mask_j.mapv(|m| m as u8 as f32))
        .collect();
    let mask = stack(&masks.iter().collect::<Vec<_>>(), dtype, &dev)?;
    let l_rec = reconstruction_loss(&recon, &original, &mask)?;

    let w = cfg.weights;
    let total = ((l_cl.clone() * w.contrastive)? + (l_loc.clone() * w.location)?)?;
    let total = (total + (l_rec.clone() * w.reconstruction)?)?;
    let (c, l, r) = (scalar_f64(&l_cl)?, scalar_f64(&l_loc)?, scalar_f64(&l_rec)?);
    let losses = SslLosses {
        total: w.contrastive * c + w.location * l + w.reconstruction * r,
        contrastive: c,
        location: l,
        reconstruction: r,
    };
    Ok((total, losses))
}

/// Per-step record of a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslStepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: SslLosses,
}

pub struct SslRun {
    pub model: SslModel,
    pub steps: Vec<SslStepLog>,
    /// Losses on a fixed probe batch before the first and after the last update.
    pub probe_start: SslLosses,
    pub probe_end: SslLosses,
}

/// Pretrains a fresh encoder on the images of `samples`.
pub fn pretrain(samples: &[&SegSample], cfg: &SslConfig) -> Result<SslRun> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(config_err!("pretraining needs at least 2 images"));
    }
    let side = cfg.model.image_size;
    if let Some(s) = samples.iter().find(|s| s.image.dim() != (side, side)) {
        return Err(config_err!(
            "image {:?} does not match the {side}x{side} encoder input",
            s.image.dim()
        ));
    }
    let model = SslModel::new(
        cfg.model.clone(),
        cfg.proj_dim,
        cfg.seed,
        DType::F32,
        &Device::Cpu,
    )?;
    let mut opt = AdamW::new(
        model.store.all_vars(),
        ParamsAdamW {
            lr: 0.0,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let probe_views: Vec<ArrayView2<f32>> = samples
        .iter()
        .take(cfg.batch_size)
        .map(|s| s.image.view())
        .collect();
    let probe_seed = cfg.seed ^ 0x05EE_D0F9_E0BE;
    let probe = |m: &SslModel| -> Result<SslLosses> {
        let mut rng = seeded(probe_seed);
        Ok(ssl_step(m, &probe_views, cfg, &mut rng)?.1)
    };
    let probe_start = probe(&model)?;
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..samples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<ArrayView2<f32>> = order
            .drain(..cfg.batch_size.min(order.len()))
            .map(|i| samples[i].image.view())
            .collect();
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_frac)?;
        opt.set_learning_rate(lr);
        let (loss, losses) = ssl_step(&model, &batch, cfg, &mut rng)?;
        opt.backward_step(&loss)?;
        steps.push(SslStepLog { step, lr, losses });
    }
    let probe_end = probe(&model)?;
    Ok(SslRun {
        model,
        steps,
        probe_start,
        probe_end,
    })
}

/// Provenance stored in the checkpoint manifest of a pretrained encoder.
pub fn pretrain_metadata(cfg: &SslConfig) -> serde_json::Value {
    let [c, l, r] = cfg.weights.enabled();
    serde_json::json!({
        "kind": "ssl-pretrained-encoder",
        "losses": { "contrastive": c, "location": l, "reconstruction": r },
        "weights": cfg.weights,
        "steps": cfg.steps,
        "seed": cfg.seed,
    })
}

/// Row-wise L2 normalisation.
pub fn l2_normalize(z: &Tensor) -> Result<Tensor> {
    let norm = (z.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(z.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::randn;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn t64(v: Vec<f64>, shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar_f64(t).unwrap()
    }

    #[test]
    fn mask_count_is_rounded_ratio() {
        let img = Array2::from_elem((64, 64), 1.0f32);
        let mut rng = seeded(3);
        let (out, mask) = mask_patches(img.view(), 8, 0.4, &mut rng).unwrap();
        let masked = mask.iter().filter(|&&m| m).count();
        assert_eq!(masked, 26 * 64);
        assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), 26 * 64);
        let (same, none) = mask_patches(img.view(), 8, 0.0, &mut rng).unwrap();
        assert_eq!(same, img);
        assert!(!none.iter().any(|&m| m));
        let (zero, all) = mask_patches(img.view(), 8, 1.0, &mut rng).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0) && all.iter().all(|&m| m));
        assert!(mask_patches(img.view(), 7, 0.4, &mut rng).is_err());
    }

    #[test]
    fn orthogonal_identical_pairs() {
        let z = t64(vec![1.0, 0.0, 0.0, 1.0], (2, 2));
        let l = val(&contrastive_loss(&z, &z, 1.0).unwrap());
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 2.0)).ln()).abs() < 1e-9);
        assert!(contrastive_loss(
            &t64(vec![1.0, 0.0], (1, 2)),
            &t64(vec![1.0, 0.0], (1, 2)),
            0.5
        )
        .is_err());
    }

    #[test]
    fn correct_pairing_beats_shuffled() {
        let mut rng = seeded(21);
        let mut wins = 0;
        for _ in 0..100 {
            let zi = randn(&mut rng, &[32, 16], DType::F64, &Device::Cpu).unwrap();
            let noise = randn(&mut rng, &[32, 16], DType::F64, &Device::Cpu).unwrap();
            let zj = (&zi + (noise * 0.5).unwrap()).unwrap();
            let mut perm: Vec<u32> = (0..32).collect();
            perm.shuffle(&mut rng);
            let shuffled = zj
                .index_select(&Tensor::new(perm, &Device::Cpu).unwrap(), 0)
                .unwrap();
            let good = val(&contrastive_loss(&zi, &zj, 0.5).unwrap());
            let bad = val(&contrastive_loss(&zi, &shuffled, 0.5).unwrap());
            assert!(good.is_finite() && bad.is_finite());
            wins += (good < bad) as usize;
        }
        assert!(wins >= 95, "{wins}/100");
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = seeded(5);
        let zi = randn(&mut rng, &[6, 4], DType::F64, &Device::Cpu).unwrap();
        let zj = randn(&mut rng, &[6, 4], DType::F64, &Device::Cpu).unwrap();
        // Householder reflection I - 2vv^T with unit v
        let v = l2_normalize(&randn(&mut rng, &[1, 4], DType::F64, &Device::Cpu).unwrap()).unwrap();
        let q = (Tensor::eye(4, DType::F64, &Device::Cpu).unwrap()
            - (v.t().unwrap().matmul(&v).unwrap() * 2.0).unwrap())
        .unwrap();
        let a = val(&contrastive_loss(&zi, &zj, 0.5).unwrap());
        let b =
            val(&contrastive_loss(&zi.matmul(&q).unwrap(), &zj.matmul(&q).unwrap(), 0.5).unwrap());
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn location_loss_limits() {
        let uniform = Tensor::zeros((3, 9), DType::F64, &Device::Cpu).unwrap();
        let l = val(&location_loss(&uniform, &[0, 4, 8]).unwrap());
        assert!((l - 9f64.ln()).abs() < 1e-6);
        let mut v = vec![0.0; 9];
        v[2] = 20.0;
        let sharp = t64(v, (1, 9));
        assert!(val(&location_loss(&sharp, &[2]).unwrap()) < 1e-7);
    }

    #[test]
    fn location_targets_are_uniform() {
        let cfg = SslConfig::default();
        let img = Array2::from_elem((24, 24), 1.0f32);
        let mut rng = seeded(8);
        let mut counts = [0f64; 9];
        let cfg = SslConfig {
            mask_ratio: 0.0,
            ..cfg
        };
        for _ in 0..9000 {
            counts[make_view_pair(img.view(), &cfg, &mut rng)
                .unwrap()
                .loc_target] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 1000.0).powi(2) / 1000.0).sum();
        let p = 1.0 - ChiSquared::new(8.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn cell_masking_zeroes_one_cell() {
        let mut img = Array2::from_elem((64, 64), 1.0f32);
        mask_cell(&mut img, 4);
        let zeros: Vec<(usize, usize)> = img
            .indexed_iter()
            .filter(|(_, &v)| v == 0.0)
            .map(|(p, _)| p)
            .collect();
        assert_eq!(zeros.len(), 21 * 21);
        assert!(zeros
            .iter()
            .all(|&(i, j)| (21..42).contains(&i) && (21..42).contains(&j)));
    }

    #[test]
    fn reconstruction_loss_properties() {
        let mut rng = seeded(2);
        let orig = randn(&mut rng, &[2, 1, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let mask_v: Vec<f64> = (0..32).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mask = Tensor::from_vec(mask_v.clone(), (2, 1, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(val(&reconstruction_loss(&orig, &orig, &mask).unwrap()), 0.0);
        let shifted = (&orig + (&mask * 0.3).unwrap()).unwrap();
        assert!((val(&reconstruction_loss(&shifted, &orig, &mask).unwrap()) - 0.09).abs() < 1e-12);
        let noise = randn(&mut rng, &[2, 1, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let inv = ((mask.ones_like().unwrap() - &mask).unwrap() * noise).unwrap();
        let perturbed = (&shifted + inv).unwrap();
        assert_eq!(
            val(&reconstruction_loss(&perturbed, &orig, &mask).unwrap()),
            val(&reconstruction_loss(&shifted, &orig, &mask).unwrap())
        );
        let empty = mask.zeros_like().unwrap();
        assert!(reconstruction_loss(&orig, &orig, &empty).is_err());
    }

    fn micro_setup() -> (SslModel, Vec<Array2<f32>>) {
        let cfg = ModelConfig::micro();
        let model = SslModel::new(cfg, 8, 1, DType::F64, &Device::Cpu).unwrap();
        let data =
            crate::data::gen_phantom(&crate::data::PhantomConfig::with_shape(16, 2), 3, 4).unwrap();
        (model, data.into_iter().map(|s| s.image).collect())
    }

    #[test]
    fn total_is_linear_in_weights() {
        let (model, imgs) = micro_setup();
        let views: Vec<ArrayView2<f32>> = imgs.iter().map(|i| i.view()).collect();
        let base = SslConfig {
            mask_patch: 4,
            ..SslConfig::default()
        };
        let run = |w: SslLossWeights| {
            let cfg = SslConfig {
                weights: w,
                ..base.clone()
            };
            ssl_step(&model, &views, &cfg, &mut seeded(9)).unwrap()
        };
        let (t_cl, only_cl) = run(SslLossWeights {
            contrastive: 1.0,
            location: 0.0,
            reconstruction: 0.0,
        });
        assert_eq!(only_cl.total, only_cl.contrastive);
        assert!((val(&t_cl) - only_cl.contrastive).abs() < 1e-12);
        let (_, all) = run(SslLossWeights::default());
        let (_, no_rec) = run(SslLossWeights {
            reconstruction: 0.0,
            ..SslLossWeights::default()
        });
        assert!((all.total - no_rec.total - all.reconstruction).abs() < 1e-12);
        assert_eq!(all.components(), no_rec.components());
    }

    #[test]
    fn saved_encoder_holds_only_condition_weights() {
        let (model, _) = micro_setup();
        let dir = tempfile::tempdir().unwrap();
        let m = model
            .save_encoder(dir.path(), pretrain_metadata(&SslConfig::default()))
            .unwrap();
        assert!(m.parameters.iter().all(|p| p.name.starts_with("cond_enc.")));
        assert_eq!(m.metadata["losses"]["reconstruction"], true);
    }
}

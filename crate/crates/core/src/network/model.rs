use candle_core::{DType, Device, Tensor, Var};

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{contract_err, Result};
use crate::network::config::ModelConfig;
use crate::network::decoder::{Decoder, DecoderOutput};
use crate::network::swin::{fuse, FeaturePyramid, SwinEncoder};
use crate::network::time::TimeEmbedding;
use crate::nn::{nchw_to_nhwc, nhwc_to_nchw, Conv3x3, ParamStore, Scope};
use crate::ops;
use crate::rba::RbaCascade;
use crate::util::softmax_dim;

/// Parameter-name prefix of the conditional image encoder.
pub const CONDITION_PREFIX: &str = "cond_enc";

/// The noise predictor: a time-conditioned encoder over `(x_t, image)`, an
/// image-only conditional encoder, per-level additive fusion, a UNet decoder
/// and (optionally) the reverse-boundary attention cascade.
///
/// The network head emits class logits. Their softmax gives a clean-label
/// estimate `x0 = 2 p - 1`, and the noise estimate is the `eps` that maps
/// that `x0` onto `x_t` under the noise schedule.
pub struct DtsModel {
    cfg: ModelConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    time: TimeEmbedding,
    diffusion_encoder: SwinEncoder,
    condition_encoder: SwinEncoder,
    stem: Conv3x3,
    decoder: Decoder,
    rba: Option<RbaCascade>,
}

impl DtsModel {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let time = TimeEmbedding::new(&mut store, &Scope::root("time"), cfg.time_dim)?;
        let diffusion_encoder = SwinEncoder::new(
            &mut store,
            &Scope::root("diff_enc"),
            &cfg,
            cfg.in_channels(),
            Some(cfg.time_dim),
        )?;
        let condition_encoder = build_condition_encoder(&mut store, &cfg)?;
        let stem = Conv3x3::new(
            &mut store,
            &Scope::root("stem"),
            cfg.in_channels(),
            cfg.stem_dim,
        )?;
        let decoder = Decoder::new(&mut store, &Scope::root("decoder"), &cfg)?;
        let rba = if cfg.rba {
            let d = cfg.stage_dims;
            Some(RbaCascade::new(
                &mut store,
                &Scope::root("rba"),
                &[d[2], d[1], d[0], cfg.stem_dim],
                cfg.num_classes,
                cfg.boundary_weight,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            schedule,
            store,
            time,
            diffusion_encoder,
            condition_encoder,
            stem,
            decoder,
            rba,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn diffusion_encoder(&self) -> &SwinEncoder {
        &self.diffusion_encoder
    }

    pub fn condition_encoder(&self) -> &SwinEncoder {
        &self.condition_encoder
    }

    pub fn rba(&self) -> Option<&RbaCascade> {
        self.rba.as_ref()
    }

    pub fn condition_vars(&self) -> Vec<Var> {
        self.store.vars_with_prefix(&format!("{CONDITION_PREFIX}."))
    }

    /// Parameters updated during fine-tuning.
    pub fn trainable_vars(&self, freeze_condition: bool) -> Vec<Var> {
        let cond = format!("{CONDITION_PREFIX}.");
        self.store
            .iter()
            .filter(|(name, _)| !(freeze_condition && name.starts_with(&cond)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn time_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        self.time.forward(ts, self.dtype(), self.device())
    }

    fn check_inputs(&self, x_t: &Tensor, image: &Tensor, ts: &[usize]) -> Result<()> {
        let (b, c, h, w) = x_t.dims4()?;
        let (bi, ci, hi, wi) = image.dims4()?;
        let n = self.cfg.image_size;
        if (b, h, w) != (bi, hi, wi) || h != n || w != n {
            return Err(contract_err!(
                "label {:?} and image {:?} must be aligned at {n}x{n}",
                x_t.dims(),
                image.dims()
            ));
        }
        if c != self.cfg.num_classes || ci != self.cfg.image_channels {
            return Err(contract_err!(
                "expected {} label and {} image channels, got {c} and {ci}",
                self.cfg.num_classes,
                self.cfg.image_channels
            ));
        }
        if ts.len() != b {
            return Err(contract_err!("{} step indices for batch of {b}", ts.len()));
        }
        if let Some(t) = ts.iter().find(|&&t| t >= self.schedule.len()) {
            return Err(contract_err!(
                "step {t} outside schedule of {} steps",
                self.schedule.len()
            ));
        }
        Ok(())
    }

    /// Pyramid of the time-conditioned encoder over the channel concatenation of `x_t` and `image`.
    pub fn encode_diffusion(
        &self,
        x_t: &Tensor,
        image: &Tensor,
        ts: &[usize],
    ) -> Result<FeaturePyramid> {
        self.check_inputs(x_t, image, ts)?;
        let temb = self.time_embedding(ts)?;
        let input = Tensor::cat(&[x_t, image], 1)?;
        self.diffusion_encoder.forward(&input, Some(&temb))
    }

    pub fn encode_condition(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.condition_encoder.forward(image, None)
    }

    pub fn decode(
        &self,
        fused: &FeaturePyramid,
        stem: &Tensor,
        temb: &Tensor,
    ) -> Result<DecoderOutput> {
        self.decoder.forward(fused, stem, temb)
    }

    /// Class logits `(B, C, H, W)` reusing a precomputed conditional pyramid.
    pub fn logits_with_condition(
        &self,
        x_t: &Tensor,
        image: &Tensor,
        cond: &FeaturePyramid,
        ts: &[usize],
    ) -> Result<Tensor> {
        self.check_inputs(x_t, image, ts)?;
        let temb = self.time_embedding(ts)?;
        let input = Tensor::cat(&[x_t, image], 1)?;
        let diff = self.diffusion_encoder.forward(&input, Some(&temb))?;
        let fused = fuse(&diff, cond)?;
        let stem = ops::silu(&self.stem.forward(&nchw_to_nhwc(&input)?)?)?;
        let dec = self.decoder.forward(&fused, &stem, &temb)?;
        let out = match &self.rba {
            Some(cascade) => {
                let feats = [
                    dec.features[2].clone(),
                    dec.features[1].clone(),
                    dec.features[0].clone(),
                    dec.full_features.clone(),
                ];
                cascade.forward(&dec.logits[3], &feats, self.cfg.image_size)?
            }
            None => dec.full_logits,
        };
        nhwc_to_nchw(&out)
    }

    /// Noise estimate `(B, C, H, W)` reusing a precomputed conditional pyramid.
    pub fn forward_with_condition(
        &self,
        x_t: &Tensor,
        image: &Tensor,
        cond: &FeaturePyramid,
        ts: &[usize],
    ) -> Result<Tensor> {
        let logits = self.logits_with_condition(x_t, image, cond, ts)?;
        self.eps_from_logits(x_t, &logits, ts)
    }

    /// `(x_t - sqrt(ab) x0) / sqrt(1 - ab)` with `x0 = 2 softmax(logits) - 1`.
    pub fn eps_from_logits(&self, x_t: &Tensor, logits: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let x0 = ((softmax_dim(logits, 1)? * 2.0)? - 1.0)?;
        let a = self.schedule.coef(ts, f64::sqrt, x_t)?;
        let inv_b = self.schedule.coef(ts, |ab| 1.0 / (1.0 - ab).sqrt(), x_t)?;
        Ok((x_t - x0.broadcast_mul(&a)?)?.broadcast_mul(&inv_b)?)
    }

    /// `eps_theta(x_t, image, t)`.
    pub fn forward(&self, x_t: &Tensor, image: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let cond = self.encode_condition(image)?;
        self.forward_with_condition(x_t, image, &cond, ts)
    }
}

pub(crate) fn build_condition_encoder(
    store: &mut ParamStore,
    cfg: &ModelConfig,
) -> Result<SwinEncoder> {
    SwinEncoder::new(
        store,
        &Scope::root(CONDITION_PREFIX),
        cfg,
        cfg.image_channels,
        None,
    )
}

impl Denoiser for DtsModel {
    type Condition = FeaturePyramid;

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn condition(&self, image: &Tensor) -> Result<FeaturePyramid> {
        Ok(self.encode_condition(image)?.detach())
    }

    fn predict_eps(
        &self,
        x_t: &Tensor,
        image: &Tensor,
        cond: &FeaturePyramid,
        t: usize,
    ) -> Result<Tensor> {
        let ts = vec![t; x_t.dim(0)?];
        Ok(self.forward_with_condition(x_t, image, cond, &ts)?.detach())
    }
}

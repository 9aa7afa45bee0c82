//! UNet-style decoder over a fused feature pyramid.

use candle_core::Tensor;

use crate::error::{contract_err, Result};
use crate::network::config::ModelConfig;
use crate::network::swin::FeaturePyramid;
use crate::nn::{
    pixel_shuffle, upsample_nearest, Conv3x3, FiLM, LayerNorm, Linear, ParamStore, Scope,
};
use crate::ops;

/// conv → norm → time scale-shift → SiLU → conv, plus a (projected) skip.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv3x3,
    norm: LayerNorm,
    film: FiLM,
    conv2: Conv3x3,
    skip: Option<Linear>,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
        time_dim: usize,
    ) -> Result<Self> {
        let skip = if in_dim != out_dim {
            Some(Linear::fan_in(store, &scope.sub("skip"), in_dim, out_dim)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv3x3::new(store, &scope.sub("conv1"), in_dim, out_dim)?,
            norm: LayerNorm::new(store, &scope.sub("norm"), out_dim)?,
            film: FiLM::new(store, &scope.sub("film"), time_dim, out_dim)?,
            conv2: Conv3x3::new(store, &scope.sub("conv2"), out_dim, out_dim)?,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        self.forward_parts(&[x], temb)
    }

    /// Block over the channel concatenation of `parts`.
    pub fn forward_parts(&self, parts: &[&Tensor], temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward_parts(parts)?;
        let h = ops::silu(&self.film.forward(&self.norm.forward(&h)?, temb)?)?;
        let h = self.conv2.forward(&h)?;
        let s = match (&self.skip, parts) {
            (Some(l), _) => l.forward_parts(parts)?,
            (None, [x]) => (*x).clone(),
            (None, _) => Tensor::cat(parts, 3)?,
        };
        Ok((s + h)?)
    }
}

/// Decoder activations and per-scale logits, all channels-last.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Decoder feature maps aligned with encoder levels 0..4 (shallow to deep).
    pub features: Vec<Tensor>,
    /// `(B, H, W, stem_dim)` full-resolution features.
    pub full_features: Tensor,
    /// `(B, side_i, side_i, C)` logits per encoder level.
    pub logits: Vec<Tensor>,
    /// `(B, H, W, C)` full-resolution head.
    pub full_logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    bottom: ConvBlock,
    up_proj: Vec<Linear>,
    up_blocks: Vec<ConvBlock>,
    expand: Linear,
    full_block: ConvBlock,
    heads: Vec<Linear>,
    full_head: Linear,
    patch: usize,
    stem_dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.stage_dims;
        let td = cfg.time_dim;
        let c = cfg.num_classes;
        let bottom = ConvBlock::new(store, &scope.sub("bottom"), d[3], d[3], td)?;
        let mut up_proj = Vec::new();
        let mut up_blocks = Vec::new();
        for i in (0..3).rev() {
            up_proj.push(Linear::fan_in(
                store,
                &scope.sub(format!("up{i}.proj")),
                d[i + 1],
                d[i],
            )?);
            up_blocks.push(ConvBlock::new(
                store,
                &scope.sub(format!("up{i}.block")),
                2 * d[i],
                d[i],
                td,
            )?);
        }
        let p2 = cfg.patch_size * cfg.patch_size;
        let expand = Linear::fan_in(store, &scope.sub("expand"), d[0], cfg.stem_dim * p2)?;
        let full_block = ConvBlock::new(
            store,
            &scope.sub("full"),
            2 * cfg.stem_dim,
            cfg.stem_dim,
            td,
        )?;
        let heads = (0..4)
            .map(|i| Linear::fan_in(store, &scope.sub(format!("head{i}")), d[i], c))
            .collect::<Result<_>>()?;
        let full_head = Linear::fan_in(store, &scope.sub("head_full"), cfg.stem_dim, c)?;
        Ok(Self {
            bottom,
            up_proj,
            up_blocks,
            expand,
            full_block,
            heads,
            full_head,
            patch: cfg.patch_size,
            stem_dim: cfg.stem_dim,
        })
    }

    /// `pyramid` is the fused encoder output, `stem` the `(B, H, W, stem_dim)`
    /// full-resolution input features and `temb` the `(B, time_dim)` step embedding.
    pub fn forward(
        &self,
        pyramid: &FeaturePyramid,
        stem: &Tensor,
        temb: &Tensor,
    ) -> Result<DecoderOutput> {
        if pyramid.levels.len() != 4 {
            return Err(contract_err!(
                "decoder expects 4 levels, got {}",
                pyramid.levels.len()
            ));
        }
        let mut feats: Vec<Tensor> = Vec::with_capacity(4);
        let mut cur = self.bottom.forward(&pyramid.levels[3], temb)?;
        feats.push(cur.clone());
        for (k, i) in (0..3).rev().enumerate() {
            let skip = &pyramid.levels[i];
            let up = upsample_nearest(&self.up_proj[k].forward(&cur)?, 2)?;
            if up.dims() != skip.dims() {
                return Err(contract_err!(
                    "decoder level {i}: {:?} vs skip {:?}",
                    up.dims(),
                    skip.dims()
                ));
            }
            cur = self.up_blocks[k].forward_parts(&[&up, skip], temb)?;
            feats.push(cur.clone());
        }
        feats.reverse();
        let expanded = pixel_shuffle(&self.expand.forward(&feats[0])?, self.patch)?;
        if expanded.dims()[..3] != stem.dims()[..3] || stem.dim(3)? != self.stem_dim {
            return Err(contract_err!(
                "full-resolution skip {:?} does not match decoder output {:?}",
                stem.dims(),
                expanded.dims()
            ));
        }
        let full_features = self.full_block.forward_parts(&[&expanded, stem], temb)?;
        let logits = feats
            .iter()
            .zip(&self.heads)
            .map(|(f, h)| h.forward(f))
            .collect::<Result<_>>()?;
        let full_logits = self.full_head.forward(&full_features)?;
        Ok(DecoderOutput {
            features: feats,
            full_features,
            logits,
            full_logits,
        })
    }
}

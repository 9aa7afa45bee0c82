//! Reverse-boundary attention refinement.
//!
//! Each stage upsamples the coarser prediction, builds a modulation map that
//! is high where nothing has been predicted yet (reverse attention) and along
//! the edges of what has been predicted (boundary attention), and adds a
//! residual computed from the modulated features. The map construction is a
//! reconstruction from the method's prose description: foreground confidence
//! is the maximum softmax probability over non-background channels, and the
//! boundary is the 3×3 morphological gradient of that confidence.
//!
//! All tensors here are channels-last: logits `(B, H, W, C)` with channel 0 the
//! background, maps `(B, H, W, 1)`.

use candle_core::{Tensor, D};

use crate::error::{config_err, contract_err, Result};
use crate::nn::{upsample_nearest, Linear, ParamStore, Scope};
use crate::ops;
use crate::util::softmax_last;

/// `1 - max_{c >= 1} softmax(logits)_c` per pixel.
pub fn reverse_map(logits: &Tensor) -> Result<Tensor> {
    let c = logits.dim(D::Minus1)?;
    if c < 2 {
        return Err(config_err!(
            "reverse attention needs a background and a foreground channel, got {c}"
        ));
    }
    let probs = softmax_last(logits)?;
    let fg = probs.narrow(D::Minus1, 1, c - 1)?.max_keepdim(D::Minus1)?;
    Ok(fg.affine(-1.0, 1.0)?)
}

/// 3×3 max filter minus 3×3 min filter with edge replication.
pub fn boundary_map(prob: &Tensor) -> Result<Tensor> {
    let (_, h, w, _) = prob.dims4()?;
    let padded = prob.pad_with_same(1, 1, 1)?.pad_with_same(2, 1, 1)?;
    let mut hi: Option<Tensor> = None;
    let mut lo: Option<Tensor> = None;
    for dy in 0..3 {
        let row = padded.narrow(1, dy, h)?;
        for dx in 0..3 {
            let tap = row.narrow(2, dx, w)?;
            hi = Some(match hi {
                None => tap.clone(),
                Some(m) => m.maximum(&tap)?,
            });
            lo = Some(match lo {
                None => tap,
                Some(m) => m.minimum(&tap)?,
            });
        }
    }
    Ok((hi.unwrap() - lo.unwrap())?)
}

/// The three attention maps of one refinement stage.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub reverse: Tensor,
    pub boundary: Tensor,
    pub modulation: Tensor,
}

/// Maps for upsampled logits: `modulation = clamp(reverse + weight * boundary, 0, 1)`.
pub fn attention_maps(up_logits: &Tensor, boundary_weight: f64) -> Result<AttentionMaps> {
    let reverse = reverse_map(up_logits)?;
    let boundary = boundary_map(&reverse.affine(-1.0, 1.0)?)?;
    let modulation = (&reverse + (&boundary * boundary_weight)?)?.clamp(0.0, 1.0)?;
    Ok(AttentionMaps {
        reverse,
        boundary,
        modulation,
    })
}

/// One refinement step: `up(coarse) + head(features * M)`.
#[derive(Debug, Clone)]
pub struct RbaStage {
    hidden: Linear,
    out: Linear,
    boundary_weight: f64,
}

impl RbaStage {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        feat_dim: usize,
        classes: usize,
        boundary_weight: f64,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::fan_in(store, &scope.sub("hidden"), feat_dim, feat_dim)?,
            out: Linear::new(store, &scope.sub("out"), feat_dim, classes, 0.02)?,
            boundary_weight,
        })
    }

    /// Final projection of the residual head; zeroing it makes the stage an
    /// exact upsampler.
    pub fn out_proj(&self) -> &Linear {
        &self.out
    }

    pub fn forward(&self, features: &Tensor, coarse: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_maps(features, coarse)?.0)
    }

    pub fn forward_with_maps(
        &self,
        features: &Tensor,
        coarse: &Tensor,
    ) -> Result<(Tensor, AttentionMaps)> {
        let (fb, fh, fw, _) = features.dims4()?;
        let (cb, ch, cw, _) = coarse.dims4()?;
        if fb != cb || ch == 0 || fh % ch != 0 || fw % cw != 0 || fh / ch != fw / cw {
            return Err(contract_err!(
                "features {:?} and coarse logits {:?} are not aligned",
                features.dims(),
                coarse.dims()
            ));
        }
        let up = upsample_nearest(coarse, fh / ch)?;
        let maps = attention_maps(&up, self.boundary_weight)?;
        let gated = features.broadcast_mul(&maps.modulation)?;
        let residual = self
            .out
            .forward(&ops::silu(&self.hidden.forward(&gated)?)?)?;
        Ok(((up + residual)?, maps))
    }
}

/// Stages applied from the deepest feature map to the shallowest.
#[derive(Debug, Clone)]
pub struct RbaCascade {
    stages: Vec<RbaStage>,
}

impl RbaCascade {
    /// `feat_dims` lists the feature widths in application order (deep to shallow).
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        feat_dims: &[usize],
        classes: usize,
        boundary_weight: f64,
    ) -> Result<Self> {
        let stages = feat_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                RbaStage::new(
                    store,
                    &scope.sub(format!("stage{i}")),
                    d,
                    classes,
                    boundary_weight,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[RbaStage] {
        &self.stages
    }

    /// Refines `deepest` logits with `features` (deep to shallow, one per stage)
    /// and upsamples the result to `out_side`.
    pub fn forward(
        &self,
        deepest: &Tensor,
        features: &[Tensor],
        out_side: usize,
    ) -> Result<Tensor> {
        if features.len() != self.stages.len() {
            return Err(contract_err!(
                "cascade has {} stages but received {} feature maps",
                self.stages.len(),
                features.len()
            ));
        }
        let mut cur = deepest.clone();
        for (stage, feat) in self.stages.iter().zip(features) {
            cur = stage.forward(feat, &cur)?;
        }
        let side = cur.dim(1)?;
        if side == 0 || !out_side.is_multiple_of(side) {
            return Err(contract_err!("cannot upsample side {side} to {out_side}"));
        }
        upsample_nearest(&cur, out_side / side)
    }
}

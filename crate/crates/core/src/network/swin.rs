//! Hierarchical windowed-attention encoder.

use candle_core::Tensor;

use crate::error::{config_err, contract_err, Result};
use crate::network::config::ModelConfig;
use crate::network::window::{
    relative_position_index, shift_mask, window_partition, window_reverse,
};
use crate::nn::{FiLM, Init, LayerNorm, Linear, ParamStore, Scope};
use crate::util::softmax_last;

const INIT_STD: f64 = 0.02;

/// Multi-scale encoder output. Level `i` is `(B, side_i, side_i, stage_dims[i])`,
/// channels-last.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// `(side, channels)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| (l.dim(1).unwrap_or(0), l.dim(3).unwrap_or(0)))
            .collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Per-level addition.
pub fn fuse(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<FeaturePyramid> {
    if a.levels.len() != b.levels.len() {
        return Err(contract_err!(
            "pyramids have {} and {} levels",
            a.levels.len(),
            b.levels.len()
        ));
    }
    let levels = a
        .levels
        .iter()
        .zip(&b.levels)
        .map(|(x, y)| {
            if x.dims() != y.dims() {
                return Err(contract_err!(
                    "level shapes {:?} vs {:?}",
                    x.dims(),
                    y.dims()
                ));
            }
            Ok((x + y)?)
        })
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid { levels })
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: candle_core::Var,
    bias_index: Tensor,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("{heads} heads do not divide width {dim}"));
        }
        let span = 2 * window - 1;
        let idx = relative_position_index(window);
        let bias_index = Tensor::from_vec(idx, window.pow(4), store.device())?;
        Ok(Self {
            qkv: Linear::new(store, &scope.sub("qkv"), dim, 3 * dim, INIT_STD)?,
            proj: Linear::new(store, &scope.sub("proj"), dim, dim, INIT_STD)?,
            bias_table: store.var(
                &scope.name("rel_bias"),
                &[span * span, heads],
                Init::Normal(INIT_STD),
            )?,
            bias_index,
            heads,
            window,
        })
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    fn relative_bias(&self) -> Result<Tensor> {
        let n = self.window * self.window;
        Ok(self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    /// Attention over `(Bw, N, D)` windows; also returns the `(Bw, heads, N, N)`
    /// attention probabilities. `mask` is `(nW, N, N)` when windows are shifted.
    pub fn forward_with_probs(
        &self,
        x: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (bw, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?.contiguous()?)?;
        attn = attn.broadcast_add(&self.relative_bias()?.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.to_dtype(attn.dtype())?.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let probs = softmax_last(&attn)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bw, n, d))?;
        Ok((self.proj.forward(&out)?, probs))
    }
}

/// Pre-norm windowed attention block with optional cyclic shift and optional
/// time-conditioned scale-shift ahead of attention.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    film: Option<FiLM>,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        dim: usize,
        heads: usize,
        side: usize,
        window: usize,
        shifted: bool,
        mlp_ratio: usize,
        time_dim: Option<usize>,
    ) -> Result<Self> {
        if !side.is_multiple_of(window) {
            return Err(config_err!(
                "grid side {side} not divisible by window {window}"
            ));
        }
        let shift = if shifted && side > window {
            window / 2
        } else {
            0
        };
        let mask = if shift > 0 {
            Some(shift_mask(side, window, shift, store.device())?)
        } else {
            None
        };
        let film = match time_dim {
            Some(td) => Some(FiLM::new(store, &scope.sub("film"), td, dim)?),
            None => None,
        };
        Ok(Self {
            norm1: LayerNorm::new(store, &scope.sub("norm1"), dim)?,
            film,
            attn: WindowAttention::new(store, &scope.sub("attn"), dim, heads, window)?,
            norm2: LayerNorm::new(store, &scope.sub("norm2"), dim)?,
            fc1: Linear::new(store, &scope.sub("fc1"), dim, dim * mlp_ratio, INIT_STD)?,
            fc2: Linear::new(store, &scope.sub("fc2"), dim * mlp_ratio, dim, INIT_STD)?,
            window,
            shift,
            mask,
        })
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    /// Output projections of both residual branches.
    pub fn output_projections(&self) -> [&Linear; 2] {
        [self.attn.proj(), &self.fc2]
    }

    fn attention_input(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        match (&self.film, temb) {
            (Some(film), Some(t)) => film.forward(&h, t),
            (Some(_), None) => Err(contract_err!(
                "time-conditioned block called without a time embedding"
            )),
            (None, _) => Ok(h),
        }
    }

    /// Attention probabilities `(B * nW, heads, N, N)` for input `x`.
    pub fn attention_probs(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let h = self.attention_input(x, temb)?;
        let win = window_partition(&h, self.window, self.shift)?;
        Ok(self.attn.forward_with_probs(&win, self.mask.as_ref())?.1)
    }

    /// `x` is `(B, S, S, D)`; returns the same shape.
    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let side = x.dim(1)?;
        let h = self.attention_input(x, temb)?;
        let win = window_partition(&h, self.window, self.shift)?;
        let (out, _) = self.attn.forward_with_probs(&win, self.mask.as_ref())?;
        let out = window_reverse(&out, self.window, side, self.shift)?;
        let x = (x + out)?;
        let m = self
            .fc2
            .forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + m)?)
    }
}

/// Non-overlapping patch projection of a `(B, C, H, W)` image to `(B, H/p, W/p, D)`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Linear,
    norm: LayerNorm,
    patch: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        in_ch: usize,
        patch: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::fan_in(store, &scope.sub("proj"), in_ch * patch * patch, dim)?,
            norm: LayerNorm::new(store, &scope.sub("norm"), dim)?,
            patch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(contract_err!("image {h}x{w} not divisible by patch {p}"));
        }
        let patches = x
            .reshape((b, c, h / p, p, w / p, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, h / p, w / p, c * p * p))?;
        self.norm.forward(&self.proj.forward(&patches)?)
    }
}

/// 2×2 neighbourhood concatenation followed by a linear reduction.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, scope: &Scope, dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &scope.sub("norm"), 4 * dim)?,
            reduce: Linear::with_bias(store, &scope.sub("reduce"), 4 * dim, out, INIT_STD, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, d) = x.dims4()?;
        let merged = x
            .reshape((b, h / 2, 2, w / 2, 2, d))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, h / 2, w / 2, 4 * d))?;
        self.reduce.forward(&self.norm.forward(&merged)?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinStage {
    merge: Option<PatchMerging>,
    blocks: Vec<SwinBlock>,
}

impl SwinStage {
    pub fn blocks(&self) -> &[SwinBlock] {
        &self.blocks
    }

    pub fn merge(&self, x: &Tensor) -> Result<Tensor> {
        match &self.merge {
            Some(m) => m.forward(x),
            None => Ok(x.clone()),
        }
    }
}

/// Four-stage encoder. With `time_dim` set, every block is conditioned on the
/// step embedding.
#[derive(Debug, Clone)]
pub struct SwinEncoder {
    embed: PatchEmbed,
    stages: Vec<SwinStage>,
    in_channels: usize,
}

impl SwinEncoder {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        cfg: &ModelConfig,
        in_channels: usize,
        time_dim: Option<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(
            store,
            &scope.sub("embed"),
            in_channels,
            cfg.patch_size,
            cfg.stage_dims[0],
        )?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let s = scope.sub(format!("stage{i}"));
            let merge = if i > 0 {
                Some(PatchMerging::new(
                    store,
                    &s.sub("merge"),
                    cfg.stage_dims[i - 1],
                    cfg.stage_dims[i],
                )?)
            } else {
                None
            };
            let blocks = (0..cfg.stage_depths[i])
                .map(|j| {
                    SwinBlock::new(
                        store,
                        &s.sub(format!("block{j}")),
                        cfg.stage_dims[i],
                        cfg.num_heads[i],
                        cfg.level_side(i),
                        cfg.effective_window(i),
                        j % 2 == 1,
                        cfg.mlp_ratio,
                        time_dim,
                    )
                })
                .collect::<Result<_>>()?;
            stages.push(SwinStage { merge, blocks });
        }
        Ok(Self {
            embed,
            stages,
            in_channels,
        })
    }

    pub fn stages(&self) -> &[SwinStage] {
        &self.stages
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(contract_err!(
                "encoder expects {} channels, got {c}",
                self.in_channels
            ));
        }
        self.embed.forward(x)
    }

    /// `x` is `(B, C_in, H, W)`; `temb` is `(B, time_dim)` for time-conditioned encoders.
    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<FeaturePyramid> {
        let mut h = self.embed(x)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            h = stage.merge(&h)?;
            for block in &stage.blocks {
                h = block.forward(&h, temb)?;
            }
            levels.push(h.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Mean over the token grid of the deepest level, `(B, D)`.
pub fn global_pool(p: &FeaturePyramid) -> Result<Tensor> {
    let last = p
        .levels
        .last()
        .ok_or_else(|| contract_err!("empty pyramid"))?;
    Ok(last.mean(1)?.mean(1)?)
}

//! Parameter storage and the handful of layers the network is built from.
//!
//! Every layer works on channels-last tensors `(..., C)` so that channel
//! mixing is a plain matrix multiply.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, Result};
use crate::ops;
use crate::util::{seeded, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

/// Named trainable parameters, initialised from a seeded generator in
/// construction order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: SeededRng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
            rng: seeded(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(contract_err!("parameter {name} registered twice"));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// All parameters whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Overwrites the value of an existing parameter, keeping its identity.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))?;
        if v.dims() != value.dims() {
            return Err(contract_err!(
                "parameter {name}: shape {:?} vs stored {:?}",
                value.dims(),
                v.dims()
            ));
        }
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Dotted parameter-name prefix.
#[derive(Debug, Clone)]
pub struct Scope(String);

impl Scope {
    pub fn root(name: &str) -> Self {
        Scope(name.to_string())
    }

    pub fn sub(&self, name: impl std::fmt::Display) -> Self {
        if self.0.is_empty() {
            Scope(name.to_string())
        } else {
            Scope(format!("{}.{name}", self.0))
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        self.sub(leaf).0
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Result<Self> {
        Self::with_bias(store, scope, in_dim, out_dim, std, true)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.var(&scope.name("weight"), &[in_dim, out_dim], Init::Normal(std))?;
        let bias = if bias {
            Some(store.var(&scope.name("bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Fan-in scaled initialisation.
    pub fn fan_in(
        store: &mut ParamStore,
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Self::new(store, scope, in_dim, out_dim, (1.0 / in_dim as f64).sqrt())
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims
            .last()
            .ok_or_else(|| contract_err!("linear on a scalar"))?;
        if last != self.in_dim {
            return Err(contract_err!(
                "linear expects {} inputs, got {:?}",
                self.in_dim,
                dims
            ));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(self.weight.as_tensor())?;
        let y = match &self.bias {
            Some(b) => ops::channel_shift(&y, &b.as_tensor().unsqueeze(0)?)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out)?)
    }

    /// Applies the layer to the last-axis concatenation of `parts`.
    pub fn forward_parts(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| contract_err!("linear over no inputs"))?;
        let mut dims = first.dims().to_vec();
        let mut acc: Option<Tensor> = None;
        let mut offset = 0;
        for part in parts {
            let c = part.dim(D::Minus1)?;
            if offset + c > self.in_dim {
                return Err(contract_err!(
                    "linear expects {} inputs in total",
                    self.in_dim
                ));
            }
            let rows = part.elem_count() / c;
            let wk = self.weight.as_tensor().narrow(0, offset, c)?;
            let y = part.reshape((rows, c))?.matmul(&wk)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
            offset += c;
        }
        if offset != self.in_dim {
            return Err(contract_err!(
                "linear expects {} inputs, got {offset}",
                self.in_dim
            ));
        }
        let mut y = acc.expect("at least one part");
        if let Some(b) = &self.bias {
            y = ops::channel_shift(&y, &b.as_tensor().unsqueeze(0)?)?;
        }
        *dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.var(&scope.name("gamma"), &[dim], Init::Ones)?,
            beta: store.var(&scope.name("beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xn = ops::normalize(x, self.eps)?;
        ops::channel_affine(
            &xn,
            &self.gamma.as_tensor().unsqueeze(0)?,
            &self.beta.as_tensor().unsqueeze(0)?,
        )
    }
}

/// 3×3 convolution, stride 1, zero padding 1, on `(B, H, W, C)` tensors.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    proj: Linear,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::fan_in(store, scope, 9 * in_dim, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_parts(&[x])
    }

    /// Same as convolving the channel concatenation of `parts`, without
    /// materialising it.
    pub fn forward_parts(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let (b, h, w, _) = parts
            .first()
            .ok_or_else(|| contract_err!("conv over no inputs"))?
            .dims4()?;
        let in_dim: usize = parts
            .iter()
            .map(|p| p.dim(3))
            .sum::<candle_core::Result<usize>>()?;
        if in_dim * 9 != self.proj.in_dim {
            return Err(contract_err!(
                "conv expects {} inputs, got {in_dim}",
                self.proj.in_dim / 9
            ));
        }
        if let [x] = parts {
            return self.proj.forward(&ops::im2col3x3(x)?);
        }
        let weight = self.proj.weight.as_tensor();
        let rows = b * h * w;
        let mut acc: Option<Tensor> = None;
        let mut offset = 0;
        for part in parts {
            let c = part.dim(3)?;
            if part.dims()[..3] != [b, h, w] {
                return Err(contract_err!(
                    "conv inputs {:?} and {:?} differ",
                    part.dims(),
                    [b, h, w]
                ));
            }
            let idx: Vec<u32> = (0..9)
                .flat_map(|k| (0..c).map(move |j| (k * in_dim + offset + j) as u32))
                .collect();
            let idx = Tensor::new(idx, weight.device())?;
            let wk = weight.index_select(&idx, 0)?;
            let y = ops::im2col3x3(part)?.reshape((rows, 9 * c))?.matmul(&wk)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
            offset += c;
        }
        let mut y = acc.expect("at least one part");
        if let Some(bias) = &self.proj.bias {
            y = ops::channel_shift(&y, &bias.as_tensor().unsqueeze(0)?)?;
        }
        Ok(y.reshape((b, h, w, self.proj.out_dim))?)
    }
}

/// Per-channel `x * (1 + scale) + shift` driven by a conditioning vector.
#[derive(Debug, Clone)]
pub struct FiLM {
    proj: Linear,
    dim: usize,
}

impl FiLM {
    pub fn new(store: &mut ParamStore, scope: &Scope, cond_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, scope, cond_dim, 2 * dim, 0.02)?,
            dim,
        })
    }

    /// `x` is `(B, ..., dim)`, `cond` is `(B, cond_dim)`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let ss = self.proj.forward(&ops::silu(cond)?)?;
        let scale = (ss.narrow(1, 0, self.dim)? + 1.0)?;
        let shift = ss.narrow(1, self.dim, self.dim)?;
        ops::channel_affine(x, &scale, &shift)
    }
}

/// Nearest-neighbour upsampling of `(B, H, W, C)` by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, factor, w, factor, c))?
        .reshape((b, h * factor, w * factor, c))?)
}

/// `(B, H, W, C * f * f)` to `(B, H * f, W * f, C)`.
pub fn pixel_shuffle(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, cff) = x.dims4()?;
    let c = cff / (factor * factor);
    Ok(x.reshape((b, h, w, factor, factor, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h * factor, w * factor, c))?)
}

pub fn nchw_to_nhwc(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

pub fn nhwc_to_nchw(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

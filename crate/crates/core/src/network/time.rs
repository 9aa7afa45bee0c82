use candle_core::{DType, Device, Tensor};

use crate::error::{config_err, Result};
use crate::nn::{Linear, ParamStore, Scope};
use crate::ops;

const FREQ_BASE: f64 = 10_000.0;

/// Sinusoidal step encoding `[sin(t w_0), .., sin(t w_{h-1}), cos(t w_0), .., cos(t w_{h-1})]`
/// with `w_k = base^(-k / h)` and `h = dim / 2`.
pub fn sinusoidal(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(config_err!(
            "time embedding width must be even and positive, got {dim}"
        ));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| FREQ_BASE.powf(-(k as f64) / half as f64))
        .collect();
    let t = t as f64;
    Ok(freqs
        .iter()
        .map(|w| (t * w).sin())
        .chain(freqs.iter().map(|w| (t * w).cos()))
        .collect())
}

/// Sinusoidal encodings for a batch of steps, shape `(B, dim)`.
pub fn sinusoidal_batch(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal(t, dim)?);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal encoding followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, scope: &Scope, dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(config_err!(
                "time embedding width must be even and positive, got {dim}"
            ));
        }
        Ok(Self {
            fc1: Linear::fan_in(store, &scope.sub("fc1"), dim, dim)?,
            fc2: Linear::fan_in(store, &scope.sub("fc2"), dim, dim)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let raw = sinusoidal_batch(ts, self.dim, dtype, device)?;
        self.fc2.forward(&ops::silu(&self.fc1.forward(&raw)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_zero_is_sines_zero_cosines_one() {
        let e = sinusoidal(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn step_one_width_four() {
        let e = sinusoidal(1, 4).unwrap();
        let expect = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((e[0] - 0.8415).abs() < 1e-4);
        assert!((e[1] - 0.0100).abs() < 1e-4);
        assert!((e[2] - 0.5403).abs() < 1e-4);
        assert!((e[3] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal(3, 5).is_err());
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        assert!(TimeEmbedding::new(&mut s, &Scope::root("t"), 5).is_err());
    }

    #[test]
    fn embedding_is_deterministic() {
        let mut s = ParamStore::new(0, DType::F64, Device::Cpu);
        let te = TimeEmbedding::new(&mut s, &Scope::root("t"), 8).unwrap();
        let a = te
            .forward(&[5], DType::F64, &Device::Cpu)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        let b = te
            .forward(&[5], DType::F64, &Device::Cpu)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(a, b);
        assert!(a[0].iter().all(|v| v.is_finite()));
    }
}

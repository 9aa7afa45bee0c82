//! Fused CPU kernels with hand-written backward passes for the elementwise
//! and per-channel operations that dominate full-resolution activations.
//!
//! All ops treat the last axis as channels. Per-channel parameters have shape
//! `(G, C)` where `G` is 1 (shared) or the leading (batch) dimension of `x`.

use candle_core::{
    CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType,
};
use num_traits::Float;

use crate::error::{contract_err, Result};

trait Elem: WithDType + Float {}
impl Elem for f32 {}
impl Elem for f64 {}

fn slice<'a, T: Elem>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "fused op" }),
    }
}

fn unsupported(dtype: DType) -> candle_core::Error {
    candle_core::Error::UnsupportedDTypeForOp(dtype, "fused op")
}

macro_rules! dispatch {
    ($s:expr, $f:ident ( $($arg:expr),* )) => {
        match $s {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            other => Err(unsupported(candle_core::backend::BackendStorage::dtype(other))),
        }
    };
}

fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct Silu;

fn silu_fwd<T: Elem>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = slice::<T>(s, l)?;
    let y: Vec<T> = x.iter().map(|&v| v * sigmoid(v)).collect();
    Ok((T::to_cpu_storage_owned(y), l.shape().clone()))
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, silu_fwd(s, l))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

struct SiluGrad;

fn silu_grad<T: Elem>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = slice::<T>(s1, l1)?;
    let g = slice::<T>(s2, l2)?;
    let out: Vec<T> = x
        .iter()
        .zip(g)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "fused-silu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, silu_grad(s1, l1, s2, l2))
    }
}

/// Normalisation over the last axis without the affine part.
struct Normalize {
    eps: f64,
}

fn row_stats<T: Elem>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    (mean, (var + T::from(eps).unwrap()).sqrt().recip())
}

fn normalize_fwd<T: Elem>(
    s: &CpuStorage,
    l: &Layout,
    eps: f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = slice::<T>(s, l)?;
    let c = l.dims().last().copied().unwrap_or(1).max(1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let (mean, rstd) = row_stats(row, eps);
        out.extend(row.iter().map(|&v| (v - mean) * rstd));
    }
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "fused-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, normalize_fwd(s, l, self.eps))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(
            &grad.contiguous()?,
            &NormalizeGrad { eps: self.eps },
        )?))
    }
}

struct NormalizeGrad {
    eps: f64,
}

fn normalize_grad<T: Elem>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    eps: f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = slice::<T>(s1, l1)?;
    let g = slice::<T>(s2, l2)?;
    let c = l1.dims().last().copied().unwrap_or(1).max(1);
    let n = T::from(c).unwrap();
    let mut out = Vec::with_capacity(x.len());
    for (row, grow) in x.chunks_exact(c).zip(g.chunks_exact(c)) {
        let (mean, rstd) = row_stats(row, eps);
        let mut gsum = T::zero();
        let mut gdot = T::zero();
        for (&v, &gv) in row.iter().zip(grow) {
            gsum += gv;
            gdot += gv * (v - mean) * rstd;
        }
        let (gmean, gdot) = (gsum / n, gdot / n);
        out.extend(
            row.iter()
                .zip(grow)
                .map(|(&v, &gv)| rstd * (gv - gmean - (v - mean) * rstd * gdot)),
        );
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "fused-normalize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, normalize_grad(s1, l1, s2, l2, self.eps))
    }
}

/// Parameter row used by row `i` of `total`.
fn group_of(i: usize, groups: usize, total: usize) -> usize {
    if groups == 1 {
        0
    } else {
        i / (total / groups)
    }
}

/// `x * scale + shift`. `scale_grad: false` skips the scale gradient.
struct ChannelAffine {
    scale_grad: bool,
}

fn affine_fwd<T: Elem>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = slice::<T>(s1, l1)?;
    let sc = slice::<T>(s2, l2)?;
    let sh = slice::<T>(s3, l3)?;
    let (groups, c) = l2.shape().dims2()?;
    let rows = x.len() / c;
    let mut out = Vec::with_capacity(x.len());
    for (r, row) in x.chunks_exact(c).enumerate() {
        let g = group_of(r, groups, rows) * c;
        let (a, b) = (&sc[g..g + c], &sh[g..g + c]);
        out.extend(row.iter().zip(a).zip(b).map(|((&v, &a), &b)| v * a + b));
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, affine_fwd(s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let zeros = scale.zeros_like()?;
        let gx = grad.apply_op3_no_bwd(scale, &zeros, &ChannelAffine { scale_grad: false })?;
        let groups = scale.dim(0)?;
        let gs = if self.scale_grad {
            Some(grad.apply_op2_no_bwd(
                x,
                &ChannelReduce {
                    groups,
                    weighted: true,
                },
            )?)
        } else {
            None
        };
        let gb = grad.apply_op2_no_bwd(
            x,
            &ChannelReduce {
                groups,
                weighted: false,
            },
        )?;
        Ok((Some(gx), gs, Some(gb.reshape(shift.shape())?)))
    }
}

/// Per-group channel sums of `g` (or of `g * x` when weighted), shape `(G, C)`.
struct ChannelReduce {
    groups: usize,
    weighted: bool,
}

fn reduce_fwd<T: Elem>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    groups: usize,
    weighted: bool,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let g = slice::<T>(s1, l1)?;
    let x = slice::<T>(s2, l2)?;
    let c = l1.dims().last().copied().unwrap_or(1).max(1);
    let rows = g.len() / c;
    let mut out = vec![T::zero(); groups * c];
    for r in 0..rows {
        let o = group_of(r, groups, rows) * c;
        let acc = &mut out[o..o + c];
        let grow = &g[r * c..(r + 1) * c];
        if weighted {
            let xrow = &x[r * c..(r + 1) * c];
            for ((a, &gv), &xv) in acc.iter_mut().zip(grow).zip(xrow) {
                *a += gv * xv;
            }
        } else {
            for (a, &gv) in acc.iter_mut().zip(grow) {
                *a += gv;
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((groups, c))))
}

impl CustomOp2 for ChannelReduce {
    fn name(&self) -> &'static str {
        "channel-reduce"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, reduce_fwd(s1, l1, s2, l2, self.groups, self.weighted))
    }
}

/// 3x3 neighbourhood gather with zero padding: `(B, H, W, C)` to
/// `(B, H, W, 9 * C)`, tap-major (`dy`, then `dx`, then channel).
struct Im2Col;

fn im2col_fwd<T: Elem>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = slice::<T>(s, l)?;
    let (b, h, w, c) = l.shape().dims4()?;
    let mut out = vec![T::zero(); b * h * w * 9 * c];
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let o = ((n * h + i) * w + j) * 9 * c;
                for dy in 0..3 {
                    let si = i + dy;
                    if si < 1 || si > h {
                        continue;
                    }
                    for dx in 0..3 {
                        let sj = j + dx;
                        if sj < 1 || sj > w {
                            continue;
                        }
                        let src = ((n * h + si - 1) * w + sj - 1) * c;
                        let dst = o + (dy * 3 + dx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, h, w, 9 * c))))
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, im2col_fwd(s, l))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im)?))
    }
}

/// Adjoint of [`Im2Col`]: scatter-adds each tap back to its source pixel.
struct Col2Im;

fn col2im_fwd<T: Elem>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let g = slice::<T>(s, l)?;
    let (b, h, w, c9) = l.shape().dims4()?;
    let c = c9 / 9;
    let mut out = vec![T::zero(); b * h * w * c];
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let o = ((n * h + i) * w + j) * c9;
                for dy in 0..3 {
                    let si = i + dy;
                    if si < 1 || si > h {
                        continue;
                    }
                    for dx in 0..3 {
                        let sj = j + dx;
                        if sj < 1 || sj > w {
                            continue;
                        }
                        let dst = ((n * h + si - 1) * w + sj - 1) * c;
                        let src = o + (dy * 3 + dx) * c;
                        for (a, &v) in out[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, h, w, c))))
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, col2im_fwd(s, l))
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Silu)?)
}

/// Zero-padded 3x3 patches of a channels-last map, `(B, H, W, 9 * C)`.
pub fn im2col3x3(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Im2Col)?)
}

/// Zero-mean, unit-variance rows over the last axis.
pub fn normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Normalize { eps })?)
}

fn check_params(x: &Tensor, p: &Tensor) -> Result<()> {
    let (g, c) = p.dims2()?;
    let lead = if x.rank() > 1 { x.dim(0)? } else { 1 };
    if x.dims().last() != Some(&c) || (g != 1 && g != lead) {
        return Err(contract_err!(
            "per-channel parameter {:?} does not fit {:?}",
            p.dims(),
            x.dims()
        ));
    }
    Ok(())
}

/// `x * scale + shift` with `(G, C)` parameters broadcast over all other axes.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    check_params(x, scale)?;
    check_params(x, shift)?;
    if scale.dims() != shift.dims() {
        return Err(contract_err!(
            "scale {:?} and shift {:?} differ",
            scale.dims(),
            shift.dims()
        ));
    }
    Ok(x.contiguous()?.apply_op3(
        &scale.contiguous()?,
        &shift.contiguous()?,
        ChannelAffine { scale_grad: true },
    )?)
}

/// `x + shift` with a `(G, C)` shift.
pub fn channel_shift(x: &Tensor, shift: &Tensor) -> Result<Tensor> {
    check_params(x, shift)?;
    let ones = shift.ones_like()?.detach();
    Ok(x.contiguous()?.apply_op3(
        &ones,
        &shift.contiguous()?,
        ChannelAffine { scale_grad: false },
    )?)
}

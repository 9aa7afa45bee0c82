//! Cyclic-shift window partitioning of square token grids.

use candle_core::{Device, Tensor};

use crate::error::{config_err, Result};

fn check(side: usize, window: usize, shift: usize) -> Result<()> {
    if window == 0 || !side.is_multiple_of(window) {
        return Err(config_err!(
            "grid side {side} not divisible by window {window}"
        ));
    }
    if shift >= window {
        return Err(config_err!(
            "shift {shift} must be smaller than window {window}"
        ));
    }
    Ok(())
}

/// `(B, S, S, D)` grid to `(B * nW, window², D)` windows after rolling the grid
/// up and left by `shift` tokens. Windows are ordered row-major per image.
pub fn window_partition(x: &Tensor, window: usize, shift: usize) -> Result<Tensor> {
    let (b, h, w, d) = x.dims4()?;
    if h != w {
        return Err(config_err!("token grid must be square, got {h}x{w}"));
    }
    check(h, window, shift)?;
    let x = if shift > 0 {
        x.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?
    } else {
        x.clone()
    };
    let n = h / window;
    Ok(x.reshape((b, n, window, n, window, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * n * n, window * window, d))?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &Tensor,
    window: usize,
    side: usize,
    shift: usize,
) -> Result<Tensor> {
    check(side, window, shift)?;
    let (bw, _, d) = windows.dims3()?;
    let n = side / window;
    let b = bw / (n * n);
    let x = windows
        .reshape((b, n, n, window, window, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, side, side, d))?;
    Ok(if shift > 0 {
        x.roll(shift as i32, 1)?.roll(shift as i32, 2)?
    } else {
        x
    })
}

/// Additive attention mask `(nW, window², window²)` that blocks attention
/// between tokens which were not spatial neighbours before the cyclic shift.
pub fn shift_mask(side: usize, window: usize, shift: usize, device: &Device) -> Result<Tensor> {
    check(side, window, shift)?;
    let region = |i: usize| -> usize {
        if i < side - window {
            0
        } else if i < side - shift {
            1
        } else {
            2
        }
    };
    let n = side / window;
    let ww = window * window;
    let mut data = vec![0f32; n * n * ww * ww];
    for wr in 0..n {
        for wc in 0..n {
            let ids: Vec<usize> = (0..ww)
                .map(|k| {
                    let (r, c) = (wr * window + k / window, wc * window + k % window);
                    region(r) * 3 + region(c)
                })
                .collect();
            let base = (wr * n + wc) * ww * ww;
            for q in 0..ww {
                for k in 0..ww {
                    if ids[q] != ids[k] {
                        data[base + q * ww + k] = -100.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (n * n, ww, ww), device)?)
}

/// Flattened relative-position index `(window², window²)` into a
/// `(2w - 1)²` bias table.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let ww = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(ww * ww);
    for q in 0..ww {
        let (qr, qc) = (q / window, q % window);
        for k in 0..ww {
            let (kr, kc) = (k / window, k % window);
            let dr = qr + window - 1 - kr;
            let dc = qc + window - 1 - kc;
            idx.push((dr * span + dc) as u32);
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn grid(b: usize, side: usize, d: usize) -> Tensor {
        Tensor::arange(0u32, (b * side * side * d) as u32, &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .reshape((b, side, side, d))
            .unwrap()
    }

    #[test]
    fn partition_counts() {
        let x = grid(1, 8, 1);
        let w = window_partition(&x, 4, 0).unwrap();
        assert_eq!(w.dims(), &[4, 16, 1]);
    }

    #[test]
    fn partition_round_trip_any_shift() {
        let x = grid(2, 8, 3);
        for shift in 0..4 {
            let w = window_partition(&x, 4, shift).unwrap();
            let back = window_reverse(&w, 4, 8, shift).unwrap();
            assert_eq!(
                back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }

    #[test]
    fn shifted_origin_shares_window_with_far_corner() {
        // token id = row * 8 + col
        let x = grid(1, 8, 1);
        let w = window_partition(&x, 4, 2)
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        let holder = |id: f64| {
            w.iter()
                .position(|win| win.iter().any(|t| t[0] == id))
                .unwrap()
        };
        assert_eq!(holder(0.0), holder(6.0 * 8.0 + 6.0));
        assert_eq!(holder(0.0), 3);
    }

    #[test]
    fn indivisible_grid_rejected() {
        let x = grid(1, 6, 1);
        assert!(window_partition(&x, 4, 0).is_err());
        assert!(shift_mask(8, 4, 4, &Device::Cpu).is_err());
    }

    #[test]
    fn mask_only_blocks_wrapped_pairs() {
        let m = shift_mask(8, 4, 2, &Device::Cpu)
            .unwrap()
            .to_vec3::<f32>()
            .unwrap();
        // first window never straddles the wrap
        assert!(m[0].iter().flatten().all(|v| *v == 0.0));
        assert!(m[3].iter().flatten().any(|v| *v < 0.0));
    }

    #[test]
    fn relative_index_symmetry() {
        let idx = relative_position_index(2);
        assert_eq!(idx.len(), 16);
        // diagonal maps to zero offset, the centre of the 3x3 table
        for q in 0..4 {
            assert_eq!(idx[q * 4 + q], 4);
        }
    }
}

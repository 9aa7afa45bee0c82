use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{config_err, contract_err, Result};

/// Tile origins along one axis; the last tile is snapped to the border.
pub fn tile_starts(side: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(config_err!("overlap {overlap} outside [0,1)"));
    }
    if window == 0 || window > side {
        return Err(config_err!(
            "window {window} does not fit image side {side}"
        ));
    }
    let stride = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..=side - window).step_by(stride).collect();
    if *starts.last().unwrap() != side - window {
        starts.push(side - window);
    }
    Ok(starts)
}

/// Averages `predict` over overlapping `window`-sized tiles of `image`.
///
/// `predict` maps a tile to `(C, window, window)` class probabilities; the
/// result is the per-pixel mean over tiles, renormalised over classes.
pub fn sliding_window_predict<F>(
    mut predict: F,
    image: ArrayView2<f32>,
    window: usize,
    overlap: f64,
) -> Result<Array3<f32>>
where
    F: FnMut(ArrayView2<f32>) -> Result<Array3<f32>>,
{
    let (h, w) = image.dim();
    let rows = tile_starts(h, window, overlap)?;
    let cols = tile_starts(w, window, overlap)?;
    let mut acc: Option<Array3<f32>> = None;
    let mut hits = Array2::<f32>::zeros((h, w));
    for &r in &rows {
        for &c in &cols {
            let tile = image.slice(s![r..r + window, c..c + window]);
            let p = predict(tile)?;
            if p.dim().1 != window || p.dim().2 != window {
                return Err(contract_err!(
                    "tile prediction {:?} is not {window}x{window}",
                    p.dim()
                ));
            }
            let acc = acc.get_or_insert_with(|| Array3::zeros((p.dim().0, h, w)));
            if acc.dim().0 != p.dim().0 {
                return Err(contract_err!(
                    "tile predictions disagree on the class count"
                ));
            }
            let mut dst = acc.slice_mut(s![.., r..r + window, c..c + window]);
            dst += &p;
            hits.slice_mut(s![r..r + window, c..c + window])
                .mapv_inplace(|v| v + 1.0);
        }
    }
    let mut acc = acc.expect("at least one tile");
    for mut plane in acc.axis_iter_mut(Axis(0)) {
        plane /= &hits;
    }
    let total = acc.sum_axis(Axis(0));
    for mut plane in acc.axis_iter_mut(Axis(0)) {
        plane /= &total;
    }
    Ok(acc)
}

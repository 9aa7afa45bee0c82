use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{config_err, Result};
use crate::util::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotate: bool,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate: true,
            scale_range: (0.9, 1.1),
            shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(config_err!(
                "flip probability {} outside [0,1]",
                self.flip_prob
            ));
        }
        if self.scale_range.0 > self.scale_range.1 || self.shift_range.0 > self.shift_range.1 {
            return Err(config_err!(
                "augmentation ranges must be ordered (min, max)"
            ));
        }
        Ok(())
    }
}

/// One realisation of the random augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub scale: f32,
    pub shift: f32,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip_h: false,
        flip_v: false,
        quarter_turns: 0,
        scale: 1.0,
        shift: 0.0,
    };

    pub fn sample(rng: &mut SeededRng, cfg: &AugmentConfig) -> Self {
        let range = |rng: &mut SeededRng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        };
        Self {
            flip_h: rng.gen_bool(cfg.flip_prob),
            flip_v: rng.gen_bool(cfg.flip_prob),
            quarter_turns: if cfg.rotate { rng.gen_range(0..4) } else { 0 },
            scale: range(rng, cfg.scale_range) as f32,
            shift: range(rng, cfg.shift_range) as f32,
        }
    }
}

/// Counter-clockwise rotation by `k` quarter turns of a square grid.
pub fn rot90<T: Clone>(a: ArrayView2<T>, k: u8) -> Array2<T> {
    match k % 4 {
        0 => a.to_owned(),
        1 => a.t().slice(s![..;-1, ..]).to_owned(),
        2 => a.slice(s![..;-1, ..;-1]).to_owned(),
        _ => a.t().slice(s![.., ..;-1]).to_owned(),
    }
}

fn geometric<T: Clone>(a: ArrayView2<T>, d: &AugmentDraw) -> Array2<T> {
    let mut v = a;
    if d.flip_h {
        v.invert_axis(ndarray::Axis(1));
    }
    if d.flip_v {
        v.invert_axis(ndarray::Axis(0));
    }
    rot90(v, d.quarter_turns)
}

pub fn apply(sample: &SegSample, d: &AugmentDraw) -> SegSample {
    SegSample {
        image: apply_image(sample.image.view(), d),
        label: geometric(sample.label.view(), d),
    }
}

/// The image half of [`apply`].
pub fn apply_image(image: ArrayView2<f32>, d: &AugmentDraw) -> Array2<f32> {
    geometric(image, d).mapv(|v| v * d.scale + d.shift)
}

pub fn augment(sample: &SegSample, rng: &mut SeededRng, cfg: &AugmentConfig) -> SegSample {
    apply(sample, &AugmentDraw::sample(rng, cfg))
}

//! Synthetic "anatomy": one jittered ellipse per foreground class at a fixed
//! canonical position, so classes keep stable relative positions across images.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{config_err, Result};
use crate::util::{seeded, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    /// Including background.
    pub num_classes: usize,
    /// Normalized `(row, col)` per foreground class.
    pub canonical_centers: Vec<(f64, f64)>,
    pub jitter_sigma: f64,
    /// Normalized `(min, max)` semi-axis range per foreground class.
    pub radii: Vec<(f64, f64)>,
    /// `(mean, std)` of the per-image intensity of every class, background first.
    pub intensity: Vec<(f64, f64)>,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 4,
            // class 2 sits next to class 1, class 3 across the image
            canonical_centers: vec![(0.38, 0.32), (0.40, 0.62), (0.74, 0.70)],
            jitter_sigma: 0.03,
            radii: vec![(0.12, 0.18), (0.08, 0.13), (0.10, 0.15)],
            intensity: vec![(0.0, 0.05), (0.9, 0.05), (0.5, 0.05), (-0.6, 0.05)],
            noise_sigma: 0.15,
        }
    }
}

impl PhantomConfig {
    /// The default layout at `size` pixels; more than four classes are placed on a ring.
    pub fn with_shape(size: usize, num_classes: usize) -> Self {
        let base = Self::default();
        let fg = num_classes.saturating_sub(1);
        let (canonical_centers, radii) = if fg <= base.canonical_centers.len() {
            (
                base.canonical_centers[..fg].to_vec(),
                base.radii[..fg].to_vec(),
            )
        } else {
            let ring = (0..fg)
                .map(|k| {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / fg as f64;
                    (0.5 + 0.34 * a.sin(), 0.5 + 0.34 * a.cos())
                })
                .collect();
            (ring, vec![(0.05, 0.08); fg])
        };
        let intensity = (0..num_classes)
            .map(|k| match base.intensity.get(k) {
                Some(&v) if num_classes <= base.num_classes => v,
                _ => (
                    -1.0 + 2.0 * k as f64 / (num_classes - 1).max(1) as f64,
                    0.05,
                ),
            })
            .collect();
        Self {
            size,
            num_classes,
            canonical_centers,
            radii,
            intensity,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 || c > u8::MAX as usize {
            return Err(config_err!("phantom needs 2..=255 classes, got {c}"));
        }
        if self.size < 4 {
            return Err(config_err!("phantom size {} is too small", self.size));
        }
        if self.canonical_centers.len() != c - 1
            || self.radii.len() != c - 1
            || self.intensity.len() != c
        {
            return Err(config_err!(
                "{c} classes need {} centers, {} radius ranges and {c} intensities",
                c - 1,
                c - 1
            ));
        }
        for &(r, col) in &self.canonical_centers {
            if !(r > 0.0 && r < 1.0 && col > 0.0 && col < 1.0) {
                return Err(config_err!("canonical center ({r}, {col}) outside (0,1)^2"));
            }
        }
        for &(lo, hi) in &self.radii {
            if !(lo > 0.0 && lo <= hi) {
                return Err(config_err!(
                    "radius range ({lo}, {hi}) must satisfy 0 < min <= max"
                ));
            }
        }
        if self.intensity.iter().any(|&(_, s)| !(s >= 0.0))
            || !(self.noise_sigma >= 0.0)
            || !(self.jitter_sigma >= 0.0)
        {
            return Err(config_err!("standard deviations must be non-negative"));
        }
        for a in 0..c - 1 {
            for b in a + 1..c - 1 {
                let (pa, pb) = (self.canonical_centers[a], self.canonical_centers[b]);
                let d = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
                let min_r = self.radii[a].0.max(self.radii[b].0);
                if d < min_r {
                    return Err(config_err!(
                        "canonical centers of classes {} and {} are {d:.3} apart, closer than radius {min_r}",
                        a + 1,
                        b + 1
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Seed of sample `i`, independent of how generation is split across workers.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn draw_range(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn normal(rng: &mut SeededRng, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(mean, std).expect("validated std").sample(rng)
    } else {
        mean
    }
}

/// One phantom; `cfg` must be valid.
pub fn gen_one(cfg: &PhantomConfig, seed: u64) -> SegSample {
    let mut rng = seeded(seed);
    let n = cfg.size;
    let scale = (n - 1) as f64;
    let levels: Vec<f64> = cfg
        .intensity
        .iter()
        .map(|&(m, s)| normal(&mut rng, m, s))
        .collect();
    let mut label = Array2::<u8>::zeros((n, n));
    for (k, (&(cr, cc), &radii)) in cfg.canonical_centers.iter().zip(&cfg.radii).enumerate() {
        let cy = (cr + normal(&mut rng, 0.0, cfg.jitter_sigma)).clamp(0.0, 1.0) * scale;
        let cx = (cc + normal(&mut rng, 0.0, cfg.jitter_sigma)).clamp(0.0, 1.0) * scale;
        let ry = draw_range(&mut rng, radii) * n as f64;
        let rx = draw_range(&mut rng, radii) * n as f64;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        for ((i, j), v) in label.indexed_iter_mut() {
            if *v != 0 {
                continue;
            }
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            let u = c * dy + s * dx;
            let w = -s * dy + c * dx;
            if (u / ry).powi(2) + (w / rx).powi(2) <= 1.0 {
                *v = (k + 1) as u8;
            }
        }
    }
    let image =
        label.mapv(|l| (levels[l as usize] + normal(&mut rng, 0.0, cfg.noise_sigma)) as f32);
    SegSample { image, label }
}

/// `n` phantoms; sample `i` depends only on `(cfg, seed, i)`.
pub fn gen_phantom(cfg: &PhantomConfig, n: usize, seed: u64) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    crate::data::parallel_map(n, |i| Ok(gen_one(cfg, sample_seed(seed, i))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a = gen_phantom(&cfg, 4, 7).unwrap();
        let b = gen_phantom(&cfg, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_phantom(&cfg, 4, 8).unwrap());
        for s in &a {
            assert_eq!(s.image.dim(), s.label.dim());
        }
    }

    #[test]
    fn centroid_matches_canonical_center_without_jitter() {
        let cfg = PhantomConfig {
            jitter_sigma: 0.0,
            radii: vec![(0.1, 0.1), (0.07, 0.07), (0.09, 0.09)],
            ..PhantomConfig::default()
        };
        for s in gen_phantom(&cfg, 5, 3).unwrap() {
            for (k, &(r, c)) in cfg.canonical_centers.iter().enumerate() {
                let mut acc = (0.0, 0.0, 0.0);
                for ((i, j), &l) in s.label.indexed_iter() {
                    if l as usize == k + 1 {
                        acc = (acc.0 + i as f64, acc.1 + j as f64, acc.2 + 1.0);
                    }
                }
                let (y, x) = (acc.0 / acc.2, acc.1 / acc.2);
                let scale = (cfg.size - 1) as f64;
                assert!(
                    (y - r * scale).abs() <= 0.5 && (x - c * scale).abs() <= 0.5,
                    "class {}",
                    k + 1
                );
            }
        }
    }

    #[test]
    fn overlapping_centers_rejected() {
        let mut cfg = PhantomConfig::default();
        cfg.canonical_centers[1] = (0.40, 0.35);
        assert!(gen_phantom(&cfg, 1, 0).is_err());
    }

    #[test]
    fn resized_layout_is_valid() {
        for (size, classes) in [(16, 2), (32, 4), (48, 6)] {
            let cfg = PhantomConfig::with_shape(size, classes);
            cfg.validate().unwrap();
            let s = gen_phantom(&cfg, 1, 1).unwrap().remove(0);
            assert_eq!(s.label.dim(), (size, size));
            assert!(s.label.iter().all(|&l| (l as usize) < classes));
        }
    }
}

//! k-neighbour label smoothing.
//!
//! Label mass `alpha` is moved from each pixel's class to the `k` foreground
//! classes whose centroids lie closest to that class's centroid, weighted by
//! `exp(-d / tau)`. Centroids are taken over a whole training set so that the
//! smoothing reflects where classes usually sit relative to each other.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, DtsError, Result};

/// Per-class mean positions in normalised `[0, 1]²` coordinates and their
/// pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGeometry {
    centroids: Vec<Option<(f64, f64)>>,
    dist: Array2<f64>,
}

impl ClassGeometry {
    /// Builds the geometry from optional centroids; absent classes get `NaN`
    /// distances to everything but themselves.
    pub fn from_centroids(centroids: Vec<Option<(f64, f64)>>) -> Self {
        let c = centroids.len();
        let dist = Array2::from_shape_fn((c, c), |(a, b)| {
            if a == b {
                return 0.0;
            }
            match (centroids[a], centroids[b]) {
                (Some((ra, ca)), Some((rb, cb))) => ((ra - rb).powi(2) + (ca - cb).powi(2)).sqrt(),
                _ => f64::NAN,
            }
        });
        Self { centroids, dist }
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn present(&self, c: usize) -> bool {
        self.centroids.get(c).is_some_and(Option::is_some)
    }

    pub fn centroid(&self, c: usize) -> Option<(f64, f64)> {
        self.centroids.get(c).copied().flatten()
    }

    pub fn centroids(&self) -> &[Option<(f64, f64)>] {
        &self.centroids
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        self.dist[[a, b]]
    }

    pub fn distances(&self) -> &Array2<f64> {
        &self.dist
    }

    /// Fills classes absent here with their centroids from `fallback`.
    pub fn filled_from(&self, fallback: &ClassGeometry) -> ClassGeometry {
        let centroids = self
            .centroids
            .iter()
            .zip(fallback.centroids.iter().chain(std::iter::repeat(&None)))
            .map(|(own, other)| own.or(*other))
            .collect();
        Self::from_centroids(centroids)
    }
}

/// Mean pixel coordinate per class, normalised by `(H - 1, W - 1)`.
pub fn class_centroids(labels: ArrayView2<u8>, num_classes: usize) -> Result<ClassGeometry> {
    let (h, w) = labels.dim();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); num_classes];
    for ((r, c), &id) in labels.indexed_iter() {
        let id = id as usize;
        let s = sums.get_mut(id).ok_or_else(|| {
            DtsError::Data(format!(
                "class id {id} at ({r}, {c}) but only {num_classes} classes"
            ))
        })?;
        s.0 += r as f64;
        s.1 += c as f64;
        s.2 += 1;
    }
    let sy = (h.max(2) - 1) as f64;
    let sx = (w.max(2) - 1) as f64;
    let centroids = sums
        .into_iter()
        .map(|(r, c, n)| (n > 0).then(|| (r / n as f64 / sy, c / n as f64 / sx)))
        .collect();
    Ok(ClassGeometry::from_centroids(centroids))
}

/// Per-class mean of centroids over the geometries in which the class appears.
pub fn dataset_geometry(geometries: &[ClassGeometry]) -> Result<ClassGeometry> {
    let first = geometries
        .first()
        .ok_or_else(|| DtsError::Data("no geometries to aggregate".into()))?;
    let c = first.num_classes();
    if geometries.iter().any(|g| g.num_classes() != c) {
        return Err(DtsError::Data(
            "geometries disagree on the class count".into(),
        ));
    }
    let centroids = (0..c)
        .map(|k| {
            let pts: Vec<(f64, f64)> = geometries.iter().filter_map(|g| g.centroid(k)).collect();
            (!pts.is_empty()).then(|| {
                let n = pts.len() as f64;
                let (r, col) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
                (r / n, col / n)
            })
        })
        .collect();
    Ok(ClassGeometry::from_centroids(centroids))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingKind {
    /// Distance-aware smoothing toward the k nearest classes.
    #[default]
    Knls,
    /// Classic label smoothing: `alpha` spread evenly over all other classes.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub kind: SmoothingKind,
    pub k: usize,
    pub alpha: f64,
    /// Distance temperature in normalised image units.
    pub tau: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            kind: SmoothingKind::Knls,
            k: 3,
            alpha: 0.1,
            tau: 0.2,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config_err!("k must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(config_err!(
                "alpha must lie in [0, 0.5), got {}",
                self.alpha
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

/// Smoothed distribution for a pixel whose hard label is `class`.
pub fn soft_vector(
    class: usize,
    geometry: &ClassGeometry,
    cfg: &SmoothingConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let c = geometry.num_classes();
    if class >= c {
        return Err(DtsError::Data(format!("class {class} outside {c} classes")));
    }
    let mut y = vec![0.0; c];
    y[class] = 1.0 - cfg.alpha;
    if cfg.alpha == 0.0 || c == 1 {
        y[class] = 1.0;
        return Ok(y);
    }
    let uniform = |y: &mut Vec<f64>| {
        let share = cfg.alpha / (c - 1) as f64;
        for (k, v) in y.iter_mut().enumerate() {
            if k != class {
                *v = share;
            }
        }
    };
    if cfg.kind == SmoothingKind::Uniform {
        uniform(&mut y);
        return Ok(y);
    }
    if !geometry.present(class) {
        return Err(DtsError::Data(format!(
            "class {class} has no centroid in the smoothing geometry"
        )));
    }
    let mut candidates: Vec<(f64, usize)> = (1..c)
        .filter(|&n| n != class && geometry.present(n))
        .map(|n| (geometry.dist(class, n), n))
        .collect();
    if candidates.is_empty() {
        uniform(&mut y);
        return Ok(y);
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(cfg.k);
    // shift by the nearest distance so the exponentials cannot all underflow
    let d0 = candidates[0].0;
    let weights: Vec<f64> = candidates
        .iter()
        .map(|(d, _)| (-(d - d0) / cfg.tau).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for ((_, n), w) in candidates.iter().zip(&weights) {
        y[*n] = cfg.alpha * w / total;
    }
    Ok(y)
}

/// Soft labels `(C, H, W)` for a hard label map.
pub fn smooth_labels(
    labels: ArrayView2<u8>,
    geometry: &ClassGeometry,
    cfg: &SmoothingConfig,
) -> Result<Array3<f32>> {
    cfg.validate()?;
    let c = geometry.num_classes();
    let (h, w) = labels.dim();
    let mut table: Vec<Option<Vec<f64>>> = vec![None; c];
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ((r, col), &id) in labels.indexed_iter() {
        let id = id as usize;
        if id >= c {
            return Err(DtsError::Data(format!(
                "class id {id} at ({r}, {col}) but only {c} classes"
            )));
        }
        if table[id].is_none() {
            table[id] = Some(soft_vector(id, geometry, cfg)?);
        }
        for (k, v) in table[id].as_ref().unwrap().iter().enumerate() {
            out[[k, r, col]] = *v as f32;
        }
    }
    Ok(out)
}

/// Exact one-hot `(C, H, W)` encoding.
pub fn one_hot(labels: ArrayView2<u8>, num_classes: usize) -> Result<Array3<f32>> {
    let (h, w) = labels.dim();
    let mut out = Array3::<f32>::zeros((num_classes, h, w));
    for ((r, c), &id) in labels.indexed_iter() {
        if id as usize >= num_classes {
            return Err(DtsError::Data(format!(
                "class id {id} but only {num_classes} classes"
            )));
        }
        out[[id as usize, r, c]] = 1.0;
    }
    Ok(out)
}

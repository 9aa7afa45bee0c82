//! Synthetic phantoms, the on-disk dataset layout, augmentation and
//! sliding-window inference.

pub mod augment;
pub mod phantom;
pub mod sliding;
pub mod tensor_file;

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, DtsError, Result};

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use phantom::{gen_phantom, PhantomConfig};
pub use sliding::{sliding_window_predict, tile_starts};
pub use tensor_file::{read_image, read_tensor, write_pgm, write_tensor, TensorData};

/// Environment variable holding the loader thread count.
pub const WORKERS_ENV: &str = "DTS_NUM_WORKERS";

/// A single-channel image with its integer label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Array2<f32>,
    pub label: Array2<u8>,
}

pub fn num_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// `(0..n).map(f)` on up to [`num_workers`] threads; output order is by index.
pub fn parallel_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = num_workers().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// The first `n - round(test_frac * n)` samples train, the rest test.
    pub fn contiguous(n: usize, test_frac: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&test_frac) {
            return Err(config_err!("test fraction {test_frac} outside [0,1]"));
        }
        let n_test = (test_frac * n as f64).round() as usize;
        Ok(Self {
            train: (0..n - n_test).collect(),
            test: (n - n_test..n).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub phantom: PhantomConfig,
    pub seed: u64,
    pub count: usize,
    pub splits: Splits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

/// Recipe for a synthetic phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    /// Fraction of samples, taken from the end, held out for testing.
    pub test_frac: f64,
    pub seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 250,
            test_frac: 0.2,
            seed: 7,
            phantom: PhantomConfig::default(),
        }
    }
}

/// An in-memory dataset with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SegSample>,
}

pub const META_FILE: &str = "meta.json";
const PREVIEWS: usize = 8;

/// File name of sample `i` under `images/` and `labels/`.
pub fn sample_name(i: usize) -> String {
    format!("{i:04}.dten")
}

impl Dataset {
    pub fn generate(
        phantom: PhantomConfig,
        count: usize,
        seed: u64,
        test_frac: f64,
    ) -> Result<Self> {
        let samples = gen_phantom(&phantom, count, seed)?;
        Ok(Self {
            meta: DatasetMeta {
                phantom,
                seed,
                count,
                splits: Splits::contiguous(count, test_frac)?,
            },
            samples,
        })
    }

    pub fn from_config(cfg: &GenerateConfig) -> Result<Self> {
        Self::generate(cfg.phantom.clone(), cfg.count, cfg.seed, cfg.test_frac)
    }

    pub fn num_classes(&self) -> usize {
        self.meta.phantom.num_classes
    }

    pub fn split(&self, split: Split) -> Vec<&SegSample> {
        let idx = match split {
            Split::Train => &self.meta.splits.train,
            Split::Test => &self.meta.splits.test,
        };
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Writes `images/`, `labels/`, `meta.json` and a few PGM previews.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels", "previews"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| DtsError::io(&d, e))?;
        }
        parallel_map(self.samples.len(), |i| {
            let s = &self.samples[i];
            let name = sample_name(i);
            write_tensor(
                &dir.join("images").join(&name),
                &TensorData::F32(s.image.clone().into_dyn()),
            )?;
            write_tensor(
                &dir.join("labels").join(&name),
                &TensorData::U8(s.label.clone().into_dyn()),
            )
        })?;
        for (i, s) in self.samples.iter().take(PREVIEWS).enumerate() {
            let previews = dir.join("previews");
            write_pgm(
                &previews.join(format!("{i:04}_image.pgm")),
                image_to_u8(&s.image).view(),
            )?;
            write_pgm(
                &previews.join(format!("{i:04}_label.pgm")),
                label_to_u8(&s.label, self.num_classes()).view(),
            )?;
        }
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| DtsError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read(&path).map_err(|e| DtsError::io(&path, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&text)?;
        meta.phantom.validate()?;
        let samples = parallel_map(meta.count, |i| {
            let name = sample_name(i);
            let image = read_tensor(&dir.join("images").join(&name))?.into_f32()?;
            let label = read_tensor(&dir.join("labels").join(&name))?.into_u8()?;
            let image = image
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| DtsError::Data(format!("image {name}: {e}")))?;
            let label = label
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| DtsError::Data(format!("label {name}: {e}")))?;
            if image.dim() != label.dim() {
                return Err(DtsError::Data(format!(
                    "image and label {name} differ in shape"
                )));
            }
            if let Some(&bad) = label
                .iter()
                .find(|&&l| l as usize >= meta.phantom.num_classes)
            {
                return Err(DtsError::Data(format!("label {name} contains class {bad}")));
            }
            Ok(SegSample { image, label })
        })?;
        let all = meta.splits.train.iter().chain(&meta.splits.test);
        if let Some(&bad) = all.clone().find(|&&i| i >= meta.count) {
            return Err(DtsError::Data(format!("split index {bad} out of range")));
        }
        Ok(Self { meta, samples })
    }
}

/// Min-max scaling to 0..=255 for previews.
pub fn image_to_u8(img: &Array2<f32>) -> Array2<u8> {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.mapv(|v| ((v - lo) / span * 255.0).round() as u8)
}

/// Spreads class ids over the grey range for previews.
pub fn label_to_u8(label: &Array2<u8>, classes: usize) -> Array2<u8> {
    let step = 255 / (classes.max(2) - 1);
    label.mapv(|l| (l as usize * step).min(255) as u8)
}

/// Stacks images into `(B, 1, H, W)`.
pub fn images_tensor(samples: &[&SegSample], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = samples
        .first()
        .ok_or_else(|| DtsError::Data("empty batch".into()))?
        .image
        .dim();
    let mut v = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dim() != (h, w) {
            return Err(DtsError::Data("images in a batch differ in shape".into()));
        }
        v.extend(s.image.iter().copied());
    }
    Ok(Tensor::from_vec(v, (samples.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

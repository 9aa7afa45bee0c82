use candle_core::Tensor;
use ndarray::{Array2, Array3, ArrayView2};

use crate::data::{images_tensor, sliding_window_predict, SegSample};
use crate::diffusion::{sample_segmentation, SamplingConfig};
use crate::error::{contract_err, Result};
use crate::metrics::Segmenter;
use crate::network::DtsModel;

/// Overlap of sliding-window tiles when images exceed the model input.
pub const TILE_OVERLAP: f64 = 0.5;

/// Segments by running the reverse diffusion process and taking the argmax
/// of the ensemble-averaged probabilities. The batch starting at sample
/// `offset` is drawn with seed `sampling.seed + offset`.
pub struct DiffusionSegmenter<'a> {
    pub model: &'a DtsModel,
    pub sampling: SamplingConfig,
}

impl DiffusionSegmenter<'_> {
    fn sampling_at(&self, offset: usize) -> SamplingConfig {
        SamplingConfig {
            seed: self.sampling.seed.wrapping_add(offset as u64),
            ..self.sampling
        }
    }

    /// Class probabilities `(B, C, H, W)` for images at the model resolution.
    pub fn probabilities(&self, images: &Tensor, offset: usize) -> Result<Tensor> {
        sample_segmentation(
            self.model,
            images,
            self.model.schedule(),
            &self.sampling_at(offset),
        )
    }

    /// Class probabilities `(C, H, W)` for one image of any size at least as
    /// large as the model input; larger images are tiled.
    pub fn image_probabilities(
        &self,
        image: ArrayView2<f32>,
        offset: usize,
    ) -> Result<Array3<f32>> {
        let side = self.model.config().image_size;
        let (h, w) = image.dim();
        if h < side || w < side {
            return Err(contract_err!(
                "image {h}x{w} smaller than the {side}x{side} model input"
            ));
        }
        if (h, w) == (side, side) {
            let s = SegSample {
                image: image.to_owned(),
                label: Array2::zeros((h, w)),
            };
            let x = images_tensor(&[&s], self.model.dtype(), self.model.device())?;
            return to_array3(&self.probabilities(&x, offset)?, side);
        }
        self.tiled(image, offset)
    }

    fn tiled(&self, image: ArrayView2<f32>, offset: usize) -> Result<Array3<f32>> {
        let side = self.model.config().image_size;
        let mut tile = 0usize;
        sliding_window_predict(
            |view| {
                let s = SegSample {
                    image: view.to_owned(),
                    label: Array2::zeros(view.dim()),
                };
                let x = images_tensor(&[&s], self.model.dtype(), self.model.device())?;
                let p = self.probabilities(&x, offset.wrapping_mul(1 << 16).wrapping_add(tile))?;
                tile += 1;
                to_array3(&p, side)
            },
            image,
            side,
            TILE_OVERLAP,
        )
    }
}

fn to_array3(p: &Tensor, side: usize) -> Result<Array3<f32>> {
    let c = p.dim(1)?;
    let v = p
        .squeeze(0)?
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((c, side, side), v).expect("sampler output shape"))
}

/// Per-pixel argmax over the leading class axis; ties go to the lower class.
pub fn argmax_channels(p: &Array3<f32>) -> Array2<u8> {
    let (c, h, w) = p.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0;
        for k in 1..c {
            if p[[k, i, j]] > p[[best, i, j]] {
                best = k;
            }
        }
        best as u8
    })
}

impl Segmenter for DiffusionSegmenter<'_> {
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    fn segment(&self, batch: &[&SegSample], offset: usize) -> Result<Vec<Array2<u8>>> {
        let side = self.model.config().image_size;
        if batch.iter().all(|s| s.image.dim() == (side, side)) {
            let x = images_tensor(batch, self.model.dtype(), self.model.device())?;
            let labels = self
                .probabilities(&x, offset)?
                .argmax(1)?
                .to_dtype(candle_core::DType::U32)?;
            let (b, h, w) = labels.dims3()?;
            let flat = labels.flatten_all()?.to_vec1::<u32>()?;
            return Ok((0..b)
                .map(|k| Array2::from_shape_fn((h, w), |(i, j)| flat[(k * h + i) * w + j] as u8))
                .collect());
        }
        batch
            .iter()
            .enumerate()
            .map(|(k, s)| {
                Ok(argmax_channels(
                    &self.image_probabilities(s.image.view(), offset + k)?,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_ties() {
        let mut p = Array3::<f32>::zeros((3, 1, 2));
        p[[1, 0, 0]] = 0.5;
        p[[2, 0, 0]] = 0.5;
        p[[2, 0, 1]] = 0.1;
        assert_eq!(
            argmax_channels(&p),
            Array2::from_shape_vec((1, 2), vec![1, 2]).unwrap()
        );
    }
}

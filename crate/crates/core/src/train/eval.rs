use std::path::PathBuf;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::diffusion::SamplingConfig;
use crate::error::{config_err, Result};
use crate::metrics::{evaluate, BackgroundSegmenter, MetricsReport, OracleSegmenter, Segmenter};
use crate::network::DtsModel;
use crate::train::DiffusionSegmenter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    /// Reverse diffusion with a trained checkpoint.
    #[default]
    Model,
    /// Returns the ground truth; a sanity check of the metric pipeline.
    Oracle,
    /// All-background prediction; a floor for the metrics.
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub predictor: Predictor,
    /// Model checkpoint directory, required by [`Predictor::Model`].
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub sampling: SamplingConfig,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predictor: Predictor::Model,
            checkpoint: None,
            split: Split::Test,
            sampling: SamplingConfig::default(),
            batch_size: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("eval batch size must be positive"));
        }
        if self.predictor == Predictor::Model && self.checkpoint.is_none() {
            return Err(config_err!("the model predictor needs a checkpoint"));
        }
        if self.sampling.steps == 0 || self.sampling.ensemble == 0 {
            return Err(config_err!(
                "sampling steps and ensemble size must be positive"
            ));
        }
        Ok(())
    }
}

/// Scores the chosen predictor on one split of `dataset`.
pub fn run_eval(dataset: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let samples = dataset.split(cfg.split);
    if samples.is_empty() {
        return Err(config_err!("the {:?} split is empty", cfg.split));
    }
    let classes = dataset.num_classes();
    let model;
    let segmenter: Box<dyn Segmenter + '_> = match cfg.predictor {
        Predictor::Oracle => Box::new(OracleSegmenter {
            num_classes: classes,
        }),
        Predictor::Background => Box::new(BackgroundSegmenter {
            num_classes: classes,
        }),
        Predictor::Model => {
            model = DtsModel::load(cfg.checkpoint.as_ref().expect("validated"), &Device::Cpu)?;
            if model.config().num_classes != classes {
                return Err(config_err!(
                    "checkpoint predicts {} classes, dataset has {classes}",
                    model.config().num_classes
                ));
            }
            if cfg.sampling.steps > model.schedule().len() {
                return Err(config_err!(
                    "{} sampling steps exceed the {}-step noise schedule",
                    cfg.sampling.steps,
                    model.schedule().len()
                ));
            }
            Box::new(DiffusionSegmenter {
                model: &model,
                sampling: cfg.sampling,
            })
        }
    };
    evaluate(segmenter.as_ref(), &samples, cfg.batch_size)
}

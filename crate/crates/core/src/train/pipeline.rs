use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array3, ArrayView2};
use rand::seq::SliceRandom;

use crate::data::{augment, images_tensor, Dataset, SegSample, Split};
use crate::error::{config_err, DtsError, Result};
use crate::knls::{
    class_centroids, dataset_geometry, one_hot, smooth_labels, ClassGeometry, SmoothingConfig,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::checkpoint::{assign_params, load_params};
use crate::network::model::CONDITION_PREFIX;
use crate::network::DtsModel;
use crate::train::runlog::{EvalRecord, LogRecord, RunLog, StepRecord};
use crate::train::{finetune_step, lr_at, DiffusionSegmenter, TrainBatch, TrainConfig};
use crate::util::seeded;

pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Turns hard label maps into training targets: k-NLS against the
/// training-split geometry when smoothing is on, one-hot otherwise.
#[derive(Debug, Clone)]
pub struct SoftLabeler {
    num_classes: usize,
    smoothing: Option<(SmoothingConfig, ClassGeometry)>,
}

impl SoftLabeler {
    pub fn fit(
        samples: &[&SegSample],
        num_classes: usize,
        smoothing: Option<SmoothingConfig>,
    ) -> Result<Self> {
        let smoothing = match smoothing {
            Some(cfg) => {
                cfg.validate()?;
                let geos = samples
                    .iter()
                    .map(|s| class_centroids(s.label.view(), num_classes))
                    .collect::<Result<Vec<_>>>()?;
                Some((cfg, dataset_geometry(&geos)?))
            }
            None => None,
        };
        Ok(Self {
            num_classes,
            smoothing,
        })
    }

    pub fn geometry(&self) -> Option<&ClassGeometry> {
        self.smoothing.as_ref().map(|(_, g)| g)
    }

    /// `(C, H, W)` target; classes missing from the dataset geometry take
    /// their centroid from this image.
    pub fn soft(&self, label: ArrayView2<u8>) -> Result<Array3<f32>> {
        match &self.smoothing {
            Some((cfg, prior)) => {
                let own = class_centroids(label, self.num_classes)?;
                smooth_labels(label, &prior.filled_from(&own), cfg)
            }
            None => one_hot(label, self.num_classes),
        }
    }
}

/// Soft targets of `samples` stacked as `(B, C, H, W)`.
pub fn prepare_soft_labels(
    labeler: &SoftLabeler,
    samples: &[&SegSample],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let maps = samples
        .iter()
        .map(|s| labeler.soft(s.label.view()))
        .collect::<Result<Vec<_>>>()?;
    stack_soft(&maps, dtype, device)
}

fn stack_soft(maps: &[Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (c, h, w) = maps[0].dim();
    let v: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    Ok(Tensor::from_vec(v, (maps.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Copies the conditional-encoder weights of a checkpoint into `model`.
pub fn load_pretrained_condition(model: &DtsModel, dir: &Path) -> Result<usize> {
    let (manifest, params) = load_params(dir, model.device())?;
    let prefix = format!("{CONDITION_PREFIX}.");
    let want = model.condition_vars().len();
    let params = params
        .into_iter()
        .filter(|(k, _)| k.starts_with(&prefix))
        .map(|(k, v)| Ok((k, v.to_dtype(model.dtype())?)))
        .collect::<Result<_>>()?;
    let n = assign_params(model.store(), &params, Some(&prefix))?;
    if n != want {
        return Err(DtsError::Format(format!(
            "{} holds {n} conditional-encoder tensors, model needs {want} (config {:?})",
            dir.display(),
            manifest.config.stage_dims
        )));
    }
    Ok(n)
}

pub struct TrainOutcome {
    pub model: DtsModel,
    pub log: Vec<LogRecord>,
    /// Final evaluation on the full test split.
    pub report: MetricsReport,
}

fn check_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let side = dataset.meta.phantom.size;
    if dataset.num_classes() != cfg.model.num_classes || side != cfg.model.image_size {
        return Err(config_err!(
            "dataset has {} classes at {side}x{side}, model expects {} at {}x{}",
            dataset.num_classes(),
            cfg.model.num_classes,
            cfg.model.image_size,
            cfg.model.image_size
        ));
    }
    if dataset.meta.splits.train.is_empty() || dataset.meta.splits.test.is_empty() {
        return Err(config_err!(
            "training needs non-empty train and test splits"
        ));
    }
    Ok(())
}

/// Fine-tunes a fresh model on the train split and evaluates it on the test
/// split. With `out` set, writes the run log, final report, resolved config
/// and model checkpoint there.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    let device = Device::Cpu;
    let dtype = DType::F32;
    let model = DtsModel::new(cfg.model.clone(), cfg.seed, dtype, &device)?;
    if cfg.cond_mode.pretrained() {
        let path = cfg.pretrained.as_ref().expect("validated");
        load_pretrained_condition(&model, path)?;
    }
    let schedule = model.schedule().clone();
    let train_set = dataset.split(Split::Train);
    let test_set = dataset.split(Split::Test);
    let labeler = SoftLabeler::fit(&train_set, dataset.num_classes(), cfg.knls)?;
    let fixed_soft: Vec<Array3<f32>> = if cfg.augment.is_none() {
        train_set
            .iter()
            .map(|s| labeler.soft(s.label.view()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut opt = AdamW::new(
        model.trainable_vars(cfg.cond_mode.frozen()),
        ParamsAdamW {
            lr: 0.0,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| DtsError::io(dir, e))?;
            let path = dir.join(CONFIG_FILE);
            fs::write(&path, serde_json::to_vec_pretty(cfg)?)
                .map_err(|e| DtsError::io(&path, e))?;
            RunLog::to_file(&dir.join(RUNLOG_FILE))?
        }
        None => RunLog::in_memory(),
    };

    let segmenter = DiffusionSegmenter {
        model: &model,
        sampling: cfg.sampling,
    };
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = match &cfg.augment {
                None => {
                    let picked: Vec<&SegSample> = chunk.iter().map(|&i| train_set[i]).collect();
                    let soft: Vec<Array3<f32>> =
                        chunk.iter().map(|&i| fixed_soft[i].clone()).collect();
                    TrainBatch {
                        images: images_tensor(&picked, dtype, &device)?,
                        soft: stack_soft(&soft, dtype, &device)?,
                    }
                }
                Some(aug) => {
                    let owned: Vec<SegSample> = chunk
                        .iter()
                        .map(|&i| augment(train_set[i], &mut rng, aug))
                        .collect();
                    let picked: Vec<&SegSample> = owned.iter().collect();
                    TrainBatch {
                        images: images_tensor(&picked, dtype, &device)?,
                        soft: prepare_soft_labels(&labeler, &picked, dtype, &device)?,
                    }
                }
            };
            let lr = lr_at(step, total, cfg.lr, cfg.warmup_frac)?;
            let losses = finetune_step(&model, &mut opt, &batch, &schedule, cfg, lr, &mut rng)?;
            if !losses.total.is_finite() {
                return Err(DtsError::Data(format!("loss diverged at step {step}")));
            }
            log.push(LogRecord::Step(StepRecord {
                step,
                epoch,
                lr,
                losses,
                wall_secs: start.elapsed().as_secs_f64(),
            }))?;
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if !last && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && cfg.eval_images > 0 {
            let subset = &test_set[..cfg.eval_images.min(test_set.len())];
            let report = evaluate(&segmenter, subset, cfg.eval_batch)?;
            log.push(LogRecord::Eval(EvalRecord {
                epoch,
                step,
                wall_secs: start.elapsed().as_secs_f64(),
                report,
            }))?;
        }
    }
    let report = evaluate(&segmenter, &test_set, cfg.eval_batch)?;
    log.push(LogRecord::Eval(EvalRecord {
        epoch: cfg.epochs - 1,
        step,
        wall_secs: start.elapsed().as_secs_f64(),
        report: report.clone(),
    }))?;
    if let Some(dir) = out {
        let path = dir.join(REPORT_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&report)?)
            .map_err(|e| DtsError::io(&path, e))?;
        model.save(
            &dir.join(CHECKPOINT_DIR),
            serde_json::json!({
                "kind": "dts-model",
                "train": cfg,
                "steps": step,
            }),
        )?;
    }
    Ok(TrainOutcome {
        model,
        log: log.into_records(),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PhantomConfig;
    use crate::network::ModelConfig;
    use crate::train::CondMode;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            model: ModelConfig {
                num_classes: 3,
                ..ModelConfig::micro()
            },
            sampling: crate::diffusion::SamplingConfig {
                steps: 3,
                ..Default::default()
            },
            eval_every: 1,
            eval_images: 2,
            eval_batch: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn soft_labeler_matches_modes() {
        let ds = Dataset::generate(PhantomConfig::with_shape(16, 3), 6, 1, 0.0).unwrap();
        let train = ds.split(Split::Train);
        let hard = SoftLabeler::fit(&train, 3, None).unwrap();
        assert_eq!(
            hard.soft(train[0].label.view()).unwrap(),
            one_hot(train[0].label.view(), 3).unwrap()
        );
        let smooth = SoftLabeler::fit(&train, 3, Some(SmoothingConfig::default())).unwrap();
        let s = smooth.soft(train[0].label.view()).unwrap();
        let fg = train[0].label.iter().position(|&l| l == 1).unwrap();
        let (i, j) = (fg / 16, fg % 16);
        assert!((s[[1, i, j]] - 0.9).abs() < 1e-6 && (s[[2, i, j]] - 0.1).abs() < 1e-6);
        assert!(smooth.geometry().unwrap().present(2));
    }

    #[test]
    fn tiny_run_writes_artifacts_and_is_deterministic() {
        let ds = Dataset::generate(PhantomConfig::with_shape(16, 3), 10, 3, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let a = train(&ds, &cfg, Some(dir.path())).unwrap();
        let b = train(&ds, &cfg, None).unwrap();
        let seq = |log: &[LogRecord]| crate::train::runlog::loss_sequence(log);
        assert_eq!(seq(&a.log), seq(&b.log));
        assert_eq!(a.report, b.report);
        assert_eq!(seq(&a.log).len(), 4);
        let evals = a
            .log
            .iter()
            .filter(|r| matches!(r, LogRecord::Eval(_)))
            .count();
        assert_eq!(evals, 2);
        for f in [
            RUNLOG_FILE,
            REPORT_FILE,
            CONFIG_FILE,
            "checkpoint/manifest.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = crate::train::read_runlog(&dir.path().join(RUNLOG_FILE)).unwrap();
        assert_eq!(back.len(), a.log.len());

        let reloaded = DtsModel::load(&dir.path().join(CHECKPOINT_DIR), &Device::Cpu).unwrap();
        let seg = DiffusionSegmenter {
            model: &reloaded,
            sampling: cfg.sampling,
        };
        let again = evaluate(&seg, &ds.split(Split::Test), cfg.eval_batch).unwrap();
        assert_eq!(again, a.report);
    }

    #[test]
    fn pretrained_condition_weights_are_loaded() {
        let cfg = ModelConfig::micro();
        let donor = DtsModel::new(cfg.clone(), 11, DType::F32, &Device::Cpu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        donor.save(dir.path(), serde_json::Value::Null).unwrap();
        let model = DtsModel::new(cfg, 12, DType::F32, &Device::Cpu).unwrap();
        let n = load_pretrained_condition(&model, dir.path()).unwrap();
        assert_eq!(n, model.condition_vars().len());
        let values = |m: &DtsModel, name: &str| {
            m.store()
                .get(name)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        let mut changed = 0;
        for name in model.store().names() {
            let same = values(&model, name) == values(&donor, name);
            if name.starts_with("cond_enc.") {
                assert!(same, "{name}");
            } else {
                changed += !same as usize;
            }
        }
        assert!(changed > 0);
        let bad = TrainConfig {
            cond_mode: CondMode::FrozenPretrained,
            pretrained: Some(dir.path().join("missing")),
            ..tiny_config()
        };
        let ds = Dataset::generate(PhantomConfig::with_shape(16, 3), 4, 3, 0.5).unwrap();
        assert!(train(&ds, &bad, None).is_err());
    }
}

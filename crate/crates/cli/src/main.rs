use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use dts_core::data::{
    image_to_u8, label_to_u8, parallel_map, read_image, sample_name, write_pgm, write_tensor,
    Dataset, GenerateConfig, PhantomConfig, Split, TensorData,
};
use dts_core::diffusion::SamplingConfig;
use dts_core::knls::SmoothingConfig;
use dts_core::network::{DtsModel, ModelConfig};
use dts_core::ssl::{pretrain, pretrain_metadata, SslConfig};
use dts_core::train::{
    argmax_channels, run_eval, train, DiffusionSegmenter, EvalConfig, SoftLabeler, TrainConfig,
    CHECKPOINT_DIR, CONFIG_FILE, REPORT_FILE,
};

const SSL_LOG_FILE: &str = "ssl_log.jsonl";
const PROBE_FILE: &str = "probe.json";

#[derive(Parser)]
#[command(
    name = "dts",
    version,
    about = "Diffusion transformer segmentation on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its fields and unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override any config field by dotted path, e.g. `model.stem_dim=8`.
    /// The value is parsed as JSON and taken as a string if that fails.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Self-supervised pretraining of the conditional image encoder.
    Pretrain(PretrainArgs),
    /// Fine-tune the diffusion segmenter and evaluate it on the test split.
    Train(TrainArgs),
    /// Score a predictor on a dataset split and write report.json.
    Eval(EvalArgs),
    /// Segment one image and write probabilities, labels and previews.
    Sample(SampleArgs),
    /// Export smoothed soft labels for every sample of a dataset.
    Smooth(SmoothArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Number of classes including background.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    test_frac: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Contrastive, location and reconstruction weights, e.g. `1,1,1`.
    #[arg(long, value_name = "C,L,R")]
    weights: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["on", "off"])]
    knls: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    rba: Option<String>,
    #[arg(long, value_parser = ["scratch", "frozen-pretrained", "trainable-pretrained"])]
    cond_mode: Option<String>,
    /// Pretrained encoder checkpoint directory.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    sampling_steps: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["model", "oracle", "background"])]
    predictor: Option<String>,
    #[arg(long, value_parser = ["train", "test"])]
    split: Option<String>,
    #[arg(long)]
    sampling_steps: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(
        long,
        requires = "index",
        conflicts_with = "image",
        required_unless_present = "image"
    )]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    /// A float32 `.dten` image of shape (H, W) or (1, H, W).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    sampling_steps: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Args)]
struct SmoothArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = ["knls", "uniform"])]
    kind: Option<String>,
}

/// A config under construction as JSON, so file values, flags and `--set`
/// overrides compose before one strict deserialization.
struct Layered {
    value: Value,
}

impl Layered {
    fn new<T: Serialize>(common: &Common, default: &T) -> Result<Self> {
        let value = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => serde_json::to_value(default)?,
        };
        ensure!(value.is_object(), "config must be a JSON object");
        Ok(Self { value })
    }

    fn get(&self, path: &str) -> Option<&Value> {
        path.split('.').try_fold(&self.value, |v, key| v.get(key))
    }

    fn set(&mut self, path: &str, v: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(v)?;
        let mut node = &mut self.value;
        let keys: Vec<&str> = path.split('.').collect();
        for key in &keys[..keys.len() - 1] {
            if node.is_null() {
                *node = json!({});
            }
            let obj = node
                .as_object_mut()
                .with_context(|| format!("cannot set {path}: {key} is not an object"))?;
            node = obj.entry(key.to_string()).or_insert(Value::Null);
        }
        if node.is_null() {
            *node = json!({});
        }
        let obj = node
            .as_object_mut()
            .with_context(|| format!("cannot set {path}"))?;
        obj.insert(keys[keys.len() - 1].to_string(), v);
        Ok(())
    }

    fn set_opt(&mut self, path: &str, v: Option<impl Serialize>) -> Result<()> {
        match v {
            Some(v) => self.set(path, v),
            None => Ok(()),
        }
    }

    fn finish<T: DeserializeOwned>(mut self, common: &Common) -> Result<T> {
        for item in &common.set {
            let (path, raw) = item
                .split_once('=')
                .with_context(|| format!("--set expects PATH=VALUE, got {item}"))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            self.set(path, v)?;
        }
        serde_json::from_value(self.value).context("invalid config")
    }
}

fn on_off(flag: &Option<String>) -> Option<bool> {
    flag.as_deref().map(|s| s == "on")
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_weights(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--weights expects three numbers, got {s}"))?;
    let w: [f64; 3] = parts
        .try_into()
        .map_err(|_| anyhow::anyhow!("--weights expects three numbers, got {s}"))?;
    Ok(w)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut layers = Layered::new(&a.common, &GenerateConfig::default())?;
    layers.set_opt("count", a.n)?;
    layers.set_opt("test_frac", a.test_frac)?;
    layers.set_opt("seed", a.common.seed)?;
    if a.size.is_some() || a.classes.is_some() {
        let current: GenerateConfig =
            serde_json::from_value(layers.value.clone()).context("invalid config")?;
        let phantom = PhantomConfig::with_shape(
            a.size.unwrap_or(current.phantom.size),
            a.classes.unwrap_or(current.phantom.num_classes),
        );
        layers.set("phantom", phantom)?;
    }
    let cfg: GenerateConfig = layers.finish(&a.common)?;
    let ds = Dataset::from_config(&cfg)?;
    let out = &a.common.out;
    create_out(out)?;
    ds.save(out)?;
    println!(
        "wrote {} samples ({} train, {} test) of {}x{} with {} classes to {}",
        ds.samples.len(),
        ds.meta.splits.train.len(),
        ds.meta.splits.test.len(),
        cfg.phantom.size,
        cfg.phantom.size,
        cfg.phantom.num_classes,
        out.display()
    );
    Ok(())
}

/// Points a default model config at the dataset's image size and class count.
fn fit_model(model: &mut ModelConfig, ds: &Dataset) {
    model.image_size = ds.meta.phantom.size;
    model.num_classes = ds.num_classes();
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut base = SslConfig::default();
    fit_model(&mut base.model, &ds);
    let mut layers = Layered::new(&a.common, &base)?;
    layers.set_opt("steps", a.steps)?;
    layers.set_opt("batch_size", a.batch_size)?;
    layers.set_opt("lr", a.lr)?;
    layers.set_opt("seed", a.common.seed)?;
    if let Some(w) = &a.weights {
        let [c, l, r] = parse_weights(w)?;
        layers.set(
            "weights",
            json!({"contrastive": c, "location": l, "reconstruction": r}),
        )?;
    }
    let cfg: SslConfig = layers.finish(&a.common)?;
    let out = &a.common.out;
    create_out(out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let run = pretrain(&ds.split(Split::Train), &cfg)?;
    let mut lines = String::new();
    for s in &run.steps {
        lines.push_str(&serde_json::to_string(s)?);
        lines.push('\n');
    }
    let log_path = out.join(SSL_LOG_FILE);
    fs::write(&log_path, lines).with_context(|| format!("writing {}", log_path.display()))?;
    write_json(
        &out.join(PROBE_FILE),
        &json!({"start": run.probe_start, "end": run.probe_end}),
    )?;
    run.model
        .save_encoder(&out.join(CHECKPOINT_DIR), pretrain_metadata(&cfg))?;
    let (s, e) = (run.probe_start, run.probe_end);
    println!(
        "probe loss {:.4} -> {:.4} (contrastive {:.4} -> {:.4}, location {:.4} -> {:.4}, reconstruction {:.4} -> {:.4})",
        s.total, e.total, s.contrastive, e.contrastive, s.location, e.location, s.reconstruction, e.reconstruction
    );
    println!(
        "encoder checkpoint in {}",
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut base = TrainConfig::default();
    fit_model(&mut base.model, &ds);
    let mut layers = Layered::new(&a.common, &base)?;
    layers.set_opt("epochs", a.epochs)?;
    layers.set_opt("batch_size", a.batch_size)?;
    layers.set_opt("lr", a.lr)?;
    layers.set_opt("seed", a.common.seed)?;
    match on_off(&a.knls) {
        Some(false) => layers.set("knls", Value::Null)?,
        Some(true) if layers.get("knls").is_none_or(Value::is_null) => {
            layers.set("knls", SmoothingConfig::default())?
        }
        _ => {}
    }
    layers.set_opt("model.rba", on_off(&a.rba))?;
    layers.set_opt("cond_mode", a.cond_mode.as_deref())?;
    layers.set_opt("pretrained", a.pretrained.as_deref())?;
    layers.set_opt("sampling.steps", a.sampling_steps)?;
    layers.set_opt("sampling.ensemble", a.ensemble)?;
    let cfg: TrainConfig = layers.finish(&a.common)?;
    let outcome = train(&ds, &cfg, Some(&a.common.out))?;
    let r = &outcome.report;
    println!(
        "test mean dice {:.4} over {} images; per class {:?}",
        r.mean_dice, r.num_images, r.dice
    );
    println!("run written to {}", a.common.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut layers = Layered::new(&a.common, &EvalConfig::default())?;
    layers.set_opt("checkpoint", a.checkpoint.as_deref())?;
    layers.set_opt("predictor", a.predictor.as_deref())?;
    layers.set_opt("split", a.split.as_deref())?;
    layers.set_opt("sampling.steps", a.sampling_steps)?;
    layers.set_opt("sampling.ensemble", a.ensemble)?;
    layers.set_opt("sampling.seed", a.common.seed)?;
    layers.set_opt("batch_size", a.batch_size)?;
    let cfg: EvalConfig = layers.finish(&a.common)?;
    let report = run_eval(&ds, &cfg)?;
    create_out(&a.common.out)?;
    write_json(&a.common.out.join(REPORT_FILE), &report)?;
    let hd = report
        .mean_hausdorff
        .map_or_else(|| "undefined".to_string(), |h| format!("{h:.3}"));
    println!(
        "mean dice {:.4}, mean hausdorff {hd} over {} images",
        report.mean_dice, report.num_images
    );
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let image = match (&a.data, &a.image, a.index) {
        (Some(dir), None, Some(i)) => {
            let ds = load_dataset(dir)?;
            ensure!(
                i < ds.samples.len(),
                "index {i} out of range for {} samples",
                ds.samples.len()
            );
            ds.samples[i].image.clone()
        }
        (None, Some(path), _) => read_image(path)?,
        _ => bail!("pass either --data with --index or --image"),
    };
    let mut layers = Layered::new(&a.common, &SamplingConfig::default())?;
    layers.set_opt("steps", a.sampling_steps)?;
    layers.set_opt("ensemble", a.ensemble)?;
    layers.set_opt("seed", a.common.seed)?;
    let sampling: SamplingConfig = layers.finish(&a.common)?;
    let model = DtsModel::load_cpu(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let segmenter = DiffusionSegmenter {
        model: &model,
        sampling,
    };
    let probs = segmenter.image_probabilities(image.view(), 0)?;
    let labels = argmax_channels(&probs);
    let classes = model.config().num_classes;
    let out = &a.common.out;
    create_out(out)?;
    write_tensor(&out.join("probs.dten"), &TensorData::F32(probs.into_dyn()))?;
    write_tensor(
        &out.join("labels.dten"),
        &TensorData::U8(labels.clone().into_dyn()),
    )?;
    write_pgm(
        &out.join("labels.pgm"),
        label_to_u8(&labels, classes).view(),
    )?;
    write_pgm(&out.join("image.pgm"), image_to_u8(&image).view())?;
    let mut counts = vec![0usize; classes];
    for &l in labels.iter() {
        counts[l as usize] += 1;
    }
    println!("pixels per class {counts:?}; outputs in {}", out.display());
    Ok(())
}

fn smooth_cmd(a: SmoothArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut layers = Layered::new(&a.common, &SmoothingConfig::default())?;
    layers.set_opt("k", a.k)?;
    layers.set_opt("alpha", a.alpha)?;
    layers.set_opt("tau", a.tau)?;
    layers.set_opt("kind", a.kind.as_deref())?;
    let cfg: SmoothingConfig = layers.finish(&a.common)?;
    cfg.validate()?;
    let labeler = SoftLabeler::fit(&ds.split(Split::Train), ds.num_classes(), Some(cfg))?;
    let out = &a.common.out;
    let dir = out.join("soft");
    create_out(&dir)?;
    parallel_map(ds.samples.len(), |i| {
        let soft = labeler.soft(ds.samples[i].label.view())?;
        write_tensor(&dir.join(sample_name(i)), &TensorData::F32(soft.into_dyn()))
    })?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    write_json(&out.join("geometry.json"), &labeler.geometry())?;
    println!(
        "wrote {} soft label maps to {}",
        ds.samples.len(),
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Smooth(a) => smooth_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(set: &[&str]) -> Common {
        Common {
            config: None,
            seed: None,
            out: PathBuf::from("unused"),
            set: set.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn layers_apply_flags_then_set() {
        let c = common(&[
            "model.rba=false",
            "sampling.steps=7",
            "cond_mode=frozen-pretrained",
        ]);
        let mut l = Layered::new(&c, &TrainConfig::default()).unwrap();
        l.set("sampling.steps", 3).unwrap();
        l.set("knls", Value::Null).unwrap();
        let cfg: TrainConfig = l.finish(&c).unwrap();
        assert!(!cfg.model.rba);
        assert_eq!(cfg.sampling.steps, 7);
        assert_eq!(cfg.knls, None);
        assert_eq!(cfg.cond_mode, dts_core::train::CondMode::FrozenPretrained);
    }

    #[test]
    fn set_creates_missing_objects_and_rejects_scalars() {
        let mut l = Layered {
            value: json!({"a": 1, "b": null}),
        };
        l.set("b.c.d", true).unwrap();
        assert_eq!(l.get("b.c.d"), Some(&json!(true)));
        assert!(l.set("a.x", 2).is_err());
    }

    #[test]
    fn weights_need_three_numbers() {
        assert_eq!(parse_weights("1, 0,0.5").unwrap(), [1.0, 0.0, 0.5]);
        assert!(parse_weights("1,2").is_err());
        assert!(parse_weights("1,x,2").is_err());
    }
}

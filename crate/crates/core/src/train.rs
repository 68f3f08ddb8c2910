//! Run configuration, SGD training, evaluation and inference.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{flip_horizontal, save_image, Sample};
use crate::error::{Error, Result};
use crate::head::{assign_and_loss, decode_and_nms, evaluate, to_coco_results, DecodeConfig, Detection, LossConfig, Metrics};
use crate::model::{Detector, ModelConfig};
use crate::neck::INPUT_MULTIPLE;
use crate::tensor::{seeded_rng, weights, Graph, ParamStore, Tensor};

/// Step decay: the rate is multiplied by `factor` at the start of each
/// epoch listed in `decay_epochs` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 0.01, decay_epochs: vec![8], factor: 0.1 }
    }
}

impl LrSchedule {
    /// Rate used throughout 1-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        (0..decays).fold(self.initial, |lr, _| lr * self.factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Pins the worker pool to one thread. The numeric engine is
    /// sequential either way.
    pub deterministic: bool,
    pub out: PathBuf,
    pub resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; zero disables clipping.
    pub clip_norm: f64,
    /// Random horizontal flips of training images.
    pub flip: bool,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            out: PathBuf::from("runs/default"),
            resolution: 256,
            epochs: 10,
            batch_size: 4,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            flip: true,
            train_manifest: PathBuf::from("data/train/annotations.json"),
            eval_manifest: PathBuf::from("data/eval/annotations.json"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!("resolution {} must be a positive multiple of {INPUT_MULTIPLE}", self.resolution)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.initial > 0.0 && self.lr.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.model.neck.validate()
    }

    /// Worker count: `APFN_THREADS` if set, else available cores; one
    /// when deterministic.
    pub fn threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        std::env::var("APFN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n: &usize| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// `key=value` log, one line per event. Each line starts with
/// `ts=<unix seconds>` so timestamps can be stripped before comparing runs.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    /// Starts an empty log at `path`, replacing any earlier run's.
    pub fn create(path: PathBuf) -> Result<Self> {
        fs::File::create(&path)?;
        Ok(RunLog { path })
    }

    pub fn record(&self, fields: &[(&str, String)]) -> Result<()> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let mut line = format!("ts={ts:.3}");
        for (k, v) in fields {
            write!(line, " {k}={v}").expect("string write");
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Drops the leading `ts=` field of every line.
pub fn strip_timestamps(log: &str) -> String {
    log.lines().map(|l| l.split_once(' ').map_or("", |(_, rest)| rest)).collect::<Vec<_>>().join("\n")
}

fn metric_fields(m: Option<Metrics>) -> Vec<(&'static str, String)> {
    match m {
        Some(m) => vec![
            ("map", format!("{:.6}", m.map)),
            ("ap50", format!("{:.6}", m.ap50)),
            ("ap75", format!("{:.6}", m.ap75)),
            ("r50", format!("{:.6}", m.r50)),
        ],
        None => vec![("metrics", "undefined".into())],
    }
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("stack", "no images"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {shape:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

/// SGD with momentum and L2 weight decay:
/// `v = mu v + g + wd w`, `w -= lr v`.
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>, momentum: f64, weight_decay: f64) -> Self {
        Sgd { velocity: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(), momentum, weight_decay }
    }

    /// Applies the accumulated gradients, optionally rescaled so their
    /// global norm is at most `clip_norm`. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64, clip_norm: f64) -> f64 {
        let norm = store
            .iter()
            .filter_map(|(_, _, t)| t.grad())
            .flatten()
            .map(|g| (*g as f64) * (*g as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        let ids: Vec<_> = store.ids().collect();
        for (id, vel) in ids.into_iter().zip(&mut self.velocity) {
            let t = store.get_mut(id);
            let grad = t.grad().map(<[f32]>::to_vec).unwrap_or_default();
            if grad.is_empty() {
                continue;
            }
            for ((w, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                let d = g as f64 * scale + self.weight_decay * *w as f64;
                *v = (self.momentum * *v as f64 + d) as f32;
                *w = (*w as f64 - lr * *v as f64) as f32;
            }
        }
        store.zero_grad();
        norm
    }
}

/// Runs the detector over `samples` one image at a time.
pub fn predict(det: &Detector, store: &ParamStore<f32>, samples: &[Sample], cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = Graph::new(store);
        let x = g.input(stack(&[&s.image])?);
        let outs = det.forward(&mut g, x)?;
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        out.extend(decode_and_nms(&g, &outs, (h, w), cfg)?);
    }
    Ok(out)
}

pub fn evaluate_samples(det: &Detector, store: &ParamStore<f32>, samples: &[Sample], cfg: &DecodeConfig) -> Result<Option<Metrics>> {
    let dets = predict(det, store, samples, cfg)?;
    let gts: Vec<_> = samples.iter().map(|s| s.gt.clone()).collect();
    evaluate(&dets, &gts, det.cfg.num_classes)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub best_metrics: Option<Metrics>,
    pub final_metrics: Option<Metrics>,
    pub epoch_losses: Vec<f64>,
}

fn check_samples(samples: &[Sample], resolution: usize, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Training(format!("{what} set is empty")));
    }
    for s in samples {
        if s.image.shape()[1..] != [resolution, resolution] {
            return Err(Error::Training(format!(
                "{what} image {} is {:?}, configured resolution is {resolution}",
                s.image_id,
                s.image.shape()
            )));
        }
    }
    Ok(())
}

/// Trains from scratch, writing `last.apfn`, `best.apfn` (highest eval R50)
/// and `train.log` into `cfg.out`. A non-finite loss aborts the run and
/// leaves the last completed epoch's checkpoint in place.
pub fn train(cfg: &RunConfig, train_set: &[Sample], eval_set: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(train_set, cfg.resolution, "training")?;
    check_samples(eval_set, cfg.resolution, "evaluation")?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    let log = RunLog::create(cfg.out.join("train.log"))?;
    let last = cfg.out.join("last.apfn");
    let best = cfg.out.join("best.apfn");

    let mut store = ParamStore::<f32>::new();
    let det = Detector::new(&mut store, &cfg.model, cfg.resolution, cfg.seed)?;
    let mut sgd = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    let mut rng = seeded_rng(cfg.seed ^ 0x5eed);
    log.record(&[
        ("event", "start".into()),
        ("params", det.param_count().to_string()),
        ("train_images", train_set.len().to_string()),
        ("eval_images", eval_set.len().to_string()),
        ("seed", cfg.seed.to_string()),
    ])?;

    let mut best_r50 = f64::NEG_INFINITY;
    let mut best_metrics = None;
    let mut final_metrics = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr.at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut cls_sum, mut reg_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train_set[i];
                if cfg.flip && rand::Rng::random_bool(&mut rng, 0.5) {
                    let (im, gt) = flip_horizontal(&s.image, &s.gt);
                    images.push(im);
                    gts.push(gt);
                } else {
                    images.push(s.image.clone());
                    gts.push(s.gt.clone());
                }
            }
            let batch = stack(&images.iter().collect::<Vec<_>>())?;
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.input(batch);
                let outs = det.forward(&mut g, x)?;
                let loss = assign_and_loss(&mut g, &outs, &gts, &cfg.loss);
                let (loss, parts) = match loss {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => {
                        log.record(&[("event", "abort".into()), ("epoch", epoch.to_string()), ("batch", bi.to_string())])?;
                        return Err(Error::Training(format!(
                            "non-finite loss at epoch {epoch} batch {bi}; last good checkpoint: {}",
                            if last.exists() { last.display().to_string() } else { "none".into() }
                        )));
                    }
                    Err(e) => return Err(e),
                };
                sum += parts.total();
                cls_sum += parts.cls;
                reg_sum += parts.reg;
                batches += 1;
                g.backward(loss)?
            };
            store.accumulate(&grads);
            sgd.step(&mut store, lr, cfg.clip_norm);
        }
        let mean = sum / batches as f64;
        epoch_losses.push(mean);
        weights::save(&store, &last)?;
        let metrics = evaluate_samples(&det, &store, eval_set, &cfg.decode)?;
        let r50 = metrics.map_or(0.0, |m| m.r50);
        if r50 > best_r50 {
            best_r50 = r50;
            best_metrics = metrics;
            weights::save(&store, &best)?;
        }
        final_metrics = metrics;
        let mut fields = vec![
            ("event", "epoch".to_string()),
            ("epoch", epoch.to_string()),
            ("lr", format!("{lr:e}")),
            ("loss", format!("{mean:.6}")),
            ("cls", format!("{:.6}", cls_sum / batches as f64)),
            ("reg", format!("{:.6}", reg_sum / batches as f64)),
        ];
        fields.extend(metric_fields(metrics));
        log.record(&fields)?;
    }
    log.record(&[("event", "done".into()), ("best_r50", format!("{best_r50:.6}"))])?;
    Ok(TrainOutcome { best, last, best_metrics, final_metrics, epoch_losses })
}

/// Builds the configured detector and loads weights from `checkpoint`.
pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<(Detector, ParamStore<f32>)> {
    let mut store = ParamStore::<f32>::new();
    let det = Detector::new(&mut store, &cfg.model, cfg.resolution, cfg.seed)?;
    let saved = weights::load::<f32>(checkpoint)?;
    store.load_from(&saved)?;
    Ok((det, store))
}

/// Writes COCO results to `path` and, if `overlay_dir` is given, one PNG
/// per image with detection outlines drawn in white.
pub fn write_detections(path: &Path, samples: &[Sample], dets: &[Vec<Detection>], overlay_dir: Option<&Path>) -> Result<usize> {
    let ids: Vec<u64> = samples.iter().map(|s| s.image_id).collect();
    let records = to_coco_results(&ids, dets);
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::invalid("write_detections", e.to_string()))?;
    fs::write(path, text)?;
    if let Some(dir) = overlay_dir {
        fs::create_dir_all(dir)?;
        for (s, ds) in samples.iter().zip(dets) {
            let mut img = s.image.clone();
            for d in ds {
                draw_outline(&mut img, d);
            }
            save_image(&dir.join(format!("{:06}.png", s.image_id)), &img)?;
        }
    }
    Ok(records.len())
}

fn draw_outline(img: &mut Tensor<f32>, d: &Detection) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let px = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let (x1, x2) = (px(d.bbox.x1, w), px(d.bbox.x2, w));
    let (y1, y2) = (px(d.bbox.y1, h), px(d.bbox.y2, h));
    let data = img.data_mut();
    let mut set = |x: usize, y: usize| {
        for ch in 0..3 {
            data[(ch * h + y) * w + x] = 1.0;
        }
    };
    for x in x1..=x2 {
        set(x, y1);
        set(x, y2);
    }
    for y in y1..=y2 {
        set(x1, y);
        set(x2, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::WindowSize;
    use crate::data::{generate_scene, SceneSpec};

    #[test]
    fn schedule_drops_by_exact_factor() {
        let s = LrSchedule { initial: 0.02, decay_epochs: vec![3, 5], factor: 0.1 };
        assert_eq!(s.at(1), 0.02);
        assert_eq!(s.at(2), 0.02);
        assert_eq!(s.at(3), 0.02 * 0.1);
        assert_eq!(s.at(4), s.at(3));
        assert_eq!(s.at(5), 0.02 * 0.1 * 0.1);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.model.neck.attention.window = WindowSize::Ratio(16);
        cfg.lr.decay_epochs = vec![2, 4];
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_toml("epochs = 3\n[lr]\ninitial = 0.5\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.lr.factor, 0.1);
        assert!(RunConfig::from_toml("resolution = 100").is_err());
        assert!(RunConfig::from_toml("epochs = 0").is_err());
        let nested = RunConfig::from_toml("[model.neck.attention]\nheads = 2\n").unwrap();
        assert!(nested.model.neck.attention.resample_small);
        assert_eq!(nested.model.neck.attention.heads, 2);
        let e = RunConfig::from_toml("epoch = 2").unwrap_err().to_string();
        assert!(e.contains("epoch"), "{e}");
    }

    #[test]
    fn strips_timestamps() {
        assert_eq!(strip_timestamps("ts=1.000 a=1\nts=2.500 b=2"), "a=1\nb=2");
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut sgd = Sgd::new(&store, 0.9, 0.0);
        for _ in 0..2 {
            *store.get_mut(id).grad_mut() = vec![0.5, 1.0];
            sgd.step(&mut store, 0.1, 0.0);
        }
        // v1 = g, v2 = 0.9 g + g
        let want = [1.0 - 0.1 * 0.5 - 0.1 * 0.95, -2.0 - 0.1 * 1.0 - 0.1 * 1.9];
        for (a, b) in store.get(id).data().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    fn tiny_run(out: PathBuf) -> (RunConfig, Vec<Sample>) {
        let mut cfg = RunConfig { out, resolution: 64, epochs: 2, batch_size: 2, ..RunConfig::default() };
        cfg.model.neck.channels = 8;
        cfg.model.neck.depth = 1;
        cfg.model.neck.backbone_widths = [8, 8, 8, 8];
        cfg.model.neck.attention.window = WindowSize::Fixed(2);
        cfg.model.head.width = 8;
        let spec = SceneSpec { size: 64, radius: (2.0, 5.0), num_classes: 2, ..SceneSpec::easy(64) };
        let samples = (0..4)
            .map(|i| {
                let s = generate_scene(&spec.for_image(i)).unwrap();
                Sample { image_id: i + 1, image: s.image, gt: s.gt }
            })
            .collect();
        (cfg, samples)
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_reload() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg_a, samples) = tiny_run(dir.path().join("a"));
        let cfg_b = RunConfig { out: dir.path().join("b"), ..cfg_a.clone() };
        let a = train(&cfg_a, &samples, &samples).unwrap();
        let b = train(&cfg_b, &samples, &samples).unwrap();
        assert_eq!(fs::read(&a.last).unwrap(), fs::read(&b.last).unwrap());
        let la = fs::read_to_string(cfg_a.out.join("train.log")).unwrap();
        let lb = fs::read_to_string(cfg_b.out.join("train.log")).unwrap();
        assert_eq!(strip_timestamps(&la), strip_timestamps(&lb));
        assert_eq!(la.lines().count(), 4);

        let (det, store) = load_detector(&cfg_a, &a.last).unwrap();
        let m = evaluate_samples(&det, &store, &samples, &cfg_a.decode).unwrap();
        assert_eq!(m, a.final_metrics);

        let mut other = cfg_a.clone();
        other.model.head.width = 4;
        let e = load_detector(&other, &a.last).unwrap_err().to_string();
        assert!(e.contains("head.tower0.conv.weight"), "{e}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, samples) = tiny_run(dir.path().join("nan"));
        cfg.lr.initial = 1e30;
        cfg.clip_norm = 0.0;
        cfg.epochs = 3;
        let e = train(&cfg, &samples, &samples).unwrap_err().to_string();
        assert!(e.contains("non-finite"), "{e}");
        assert!(fs::read_to_string(cfg.out.join("train.log")).unwrap().contains("event=abort"));
    }
}

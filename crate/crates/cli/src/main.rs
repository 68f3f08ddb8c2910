use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use attnpafpn::attention::{Variant, WindowSize};
use attnpafpn::audit::{self, Scope, TOLERANCE};
use attnpafpn::data::{generate_dataset, load_samples, SceneSpec, EVAL_SEED_OFFSET};
use attnpafpn::gradcheck::random_tensor;
use attnpafpn::head::Metrics;
use attnpafpn::model::{Detector, ModelConfig};
use attnpafpn::train::{evaluate_samples, load_detector, predict, train, write_detections, RunConfig};
use attnpafpn::{Graph, ParamStore, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnpafpn", version, about = "Attention-augmented feature pyramid detector on synthetic culture dishes")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread and fixed accumulation order.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Square input side, a multiple of 64.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Standard,
    Window,
    Global,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Standard => Variant::Standard,
            VariantArg::Window => Variant::LocalWindow,
            VariantArg::Global => Variant::EfficientGlobal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Large, well separated, high-contrast colonies of two classes.
    Easy,
    /// Tiny, low-contrast, overlapping colonies of five classes.
    Hard,
}

#[derive(Subcommand)]
enum Command {
    /// Render train and eval splits of synthetic dishes.
    Generate {
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        eval: usize,
        #[arg(long, value_enum, default_value_t = Preset::Easy)]
        preset: Preset,
    },
    /// Train from scratch; writes checkpoints and train.log to the output directory.
    Train,
    /// Report mAP, AP50, AP75 and R50 of a checkpoint.
    Eval {
        /// Defaults to best.apfn in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest to score; defaults to the configured eval manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write COCO-format detections and optional overlays.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        score_thr: Option<f64>,
        /// Also write PNGs with detection outlines.
        #[arg(long)]
        overlays: bool,
    },
    /// Finite-difference gradient audit.
    Gradcheck {
        #[arg(long, value_parser = parse_scope, default_value = "op")]
        scope: Scope,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Analytic FLOPs, parameters and forward time per resolution.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 512])]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        window: usize,
        /// Skip timed forward passes.
        #[arg(long)]
        no_time: bool,
    },
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    s.parse().map_err(|e: attnpafpn::Error| e.to_string())
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(r) = cli.resolution {
        cfg.resolution = r;
    }
    if let Some(v) = cli.variant {
        cfg.model.neck.attention.variant = v.into();
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_line(m: Option<Metrics>) -> String {
    match m {
        Some(m) => format!("map={:.4} ap50={:.4} ap75={:.4} r50={:.4}", m.map, m.ap50, m.ap75, m.r50),
        None => "metrics=undefined (no annotations)".into(),
    }
}

fn checkpoint_or_best(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> PathBuf {
    checkpoint.clone().unwrap_or_else(|| cfg.out.join("best.apfn"))
}

fn cmd_generate(cli: &Cli, train_n: usize, eval_n: usize, preset: Preset) -> Result<()> {
    let cfg = run_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let mut spec = match preset {
        Preset::Easy => SceneSpec::easy(cfg.resolution),
        Preset::Hard => SceneSpec { size: cfg.resolution, ..SceneSpec::default() },
    };
    let threads = cfg.threads();
    spec.seed = cfg.seed;
    let tm = generate_dataset(&out.join("train"), &spec, train_n, threads)?;
    spec.seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
    let em = generate_dataset(&out.join("eval"), &spec, eval_n, threads)?;
    println!(
        "train: {} images, {} annotations -> {}",
        tm.images.len(),
        tm.annotations.len(),
        out.join("train/annotations.json").display()
    );
    println!("eval: {} images, {} annotations -> {}", em.images.len(), em.annotations.len(), out.join("eval/annotations.json").display());
    Ok(())
}

fn load_split(path: &Path, what: &str) -> Result<Vec<attnpafpn::data::Sample>> {
    if !path.exists() {
        return Err(attnpafpn::Error::Training(format!(
            "{what} manifest {} not found; run `attnpafpn generate` or set {what}_manifest",
            path.display()
        )));
    }
    Ok(load_samples(path)?.1)
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli)?;
    let train_set = load_split(&cfg.train_manifest, "train")?;
    let eval_set = load_split(&cfg.eval_manifest, "eval")?;
    let started = Instant::now();
    let outcome = train(&cfg, &train_set, &eval_set)?;
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.4}", i + 1);
    }
    println!("final  {}", metrics_line(outcome.final_metrics));
    println!("best   {}", metrics_line(outcome.best_metrics));
    println!("checkpoints: {} {}", outcome.best.display(), outcome.last.display());
    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_eval(cli: &Cli, checkpoint: &Option<PathBuf>, manifest: &Option<PathBuf>) -> Result<()> {
    let cfg = run_config(cli)?;
    let (det, store) = load_detector(&cfg, &checkpoint_or_best(&cfg, checkpoint))?;
    let samples = load_split(manifest.as_ref().unwrap_or(&cfg.eval_manifest), "eval")?;
    println!("{}", metrics_line(evaluate_samples(&det, &store, &samples, &cfg.decode)?));
    Ok(())
}

fn cmd_infer(cli: &Cli, checkpoint: &Option<PathBuf>, manifest: &Option<PathBuf>, score_thr: Option<f64>, overlays: bool) -> Result<()> {
    let mut cfg = run_config(cli)?;
    if let Some(t) = score_thr {
        cfg.decode.score_thr = t;
    }
    let (det, store) = load_detector(&cfg, &checkpoint_or_best(&cfg, checkpoint))?;
    let samples = load_split(manifest.as_ref().unwrap_or(&cfg.eval_manifest), "eval")?;
    let dets = predict(&det, &store, &samples, &cfg.decode)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("detections.json");
    let overlay_dir = cfg.out.join("overlays");
    let n = write_detections(&path, &samples, &dets, overlays.then_some(overlay_dir.as_path()))?;
    println!("{n} detections -> {}", path.display());
    Ok(())
}

fn cmd_gradcheck(scope: Scope, inject_fault: bool) -> Result<bool> {
    let report = audit::run(scope, inject_fault)?;
    let width = report.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>7}  {:>12}  status", "group", "checked", "max_rel_err");
    for g in &report.groups {
        let ok = g.max_rel_err < TOLERANCE;
        println!("{:<width$}  {:>7}  {:>12.3e}  {}", g.name, g.checked, g.max_rel_err, if ok { "ok" } else { "FAIL" });
    }
    let passed = report.passed(TOLERANCE);
    println!(
        "scope={scope} groups={} max_rel_err={:.3e} tolerance={TOLERANCE:e} result={}",
        report.groups.len(),
        report.max_rel_err(),
        if passed { "pass" } else { "fail" }
    );
    Ok(passed)
}

/// Attention logits of the largest single evaluation are capped so the
/// timed pass fits in memory.
const TIMING_LOGIT_BUDGET: u64 = 1 << 27;

struct BenchRow {
    resolution: usize,
    variant: &'static str,
    attn_core: u64,
    total: u64,
    params: usize,
    forward_ms: Option<f64>,
}

fn cmd_bench(cli: &Cli, resolutions: &[usize], channels: usize, window: usize, no_time: bool) -> Result<()> {
    let base = run_config(cli)?;
    if let Some(r) = resolutions.iter().find(|&&r| r == 0 || r % 64 != 0) {
        return Err(attnpafpn::Error::Config(format!("bench resolution {r} is not a positive multiple of 64")));
    }
    let variants: Vec<Variant> = match cli.variant {
        Some(v) => vec![v.into()],
        None => vec![Variant::EfficientGlobal, Variant::LocalWindow, Variant::Standard],
    };
    let mut rows = Vec::new();
    for &variant in &variants {
        for &r in resolutions {
            let mut cfg: ModelConfig = base.model.clone();
            cfg.neck.channels = channels;
            cfg.neck.attention.variant = variant;
            cfg.neck.attention.window = WindowSize::Fixed(window);
            let mut store = ParamStore::<f32>::new();
            let det = Detector::new(&mut store, &cfg, r, base.seed)?;
            let flops = det.flops(1, r, r)?;
            let tokens = ((r / 4) * (r / 4)) as u64;
            let largest_logits = match variant {
                Variant::Standard => tokens * tokens,
                _ => (window * window * window * window) as u64,
            };
            let forward_ms = if no_time || largest_logits > TIMING_LOGIT_BUDGET {
                None
            } else {
                let mut g = Graph::new(&store);
                let x = g.input(random_tensor(&[1, 3, r, r], 1.0, base.seed).cast());
                let t = Instant::now();
                det.forward(&mut g, x)?;
                Some(t.elapsed().as_secs_f64() * 1e3)
            };
            let name = match variant {
                Variant::Standard => "standard",
                Variant::LocalWindow => "window",
                Variant::EfficientGlobal => "global",
            };
            rows.push(BenchRow { resolution: r, variant: name, attn_core: flops.attn_core, total: flops.total, params: det.param_count(), forward_ms });
        }
    }
    println!("{:>10}  {:>8}  {:>16}  {:>16}  {:>10}  {:>10}", "resolution", "variant", "attn_core_flops", "total_flops", "params", "forward_ms");
    for r in &rows {
        let ms = r.forward_ms.map_or("skipped".to_string(), |v| format!("{v:.1}"));
        println!("{:>10}  {:>8}  {:>16}  {:>16}  {:>10}  {:>10}", r.resolution, r.variant, r.attn_core, r.total, r.params, ms);
    }
    let mut csv = String::from("resolution,variant,attn_core_flops,total_flops,params,forward_ms\n");
    for r in &rows {
        let ms = r.forward_ms.map_or(String::new(), |v| format!("{v:.3}"));
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.resolution, r.variant, r.attn_core, r.total, r.params, ms));
    }
    println!();
    print!("{csv}");
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.csv"), &csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { train, eval, preset } => cmd_generate(&cli, *train, *eval, *preset).map(|_| true),
        Command::Train => cmd_train(&cli).map(|_| true),
        Command::Eval { checkpoint, manifest } => cmd_eval(&cli, checkpoint, manifest).map(|_| true),
        Command::Infer { checkpoint, manifest, score_thr, overlays } => {
            cmd_infer(&cli, checkpoint, manifest, *score_thr, *overlays).map(|_| true)
        }
        Command::Gradcheck { scope, inject_fault } => cmd_gradcheck(*scope, *inject_fault),
        Command::Bench { resolutions, channels, window, no_time } => cmd_bench(&cli, resolutions, *channels, *window, *no_time).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

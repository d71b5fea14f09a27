//! Subcommands.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use crackclf_core::adversary::Critic;
use crackclf_core::complexity::{self, REFERENCE_FLOPS, REFERENCE_FPS, REFERENCE_PARAMS};
use crackclf_core::metrics::{evaluate, MetricsReport};
use crackclf_core::segnet::SegNet;
use crackclf_core::synthetic::{self, SyntheticConfig};
use crackclf_core::trainer::{ClfTrainer, DeepSupervision, EpochSummary, LogRecord, Observer, Sample};
use crackclf_core::{Graph, ProbabilityMap, Tensor};
use serde_json::json;

use crate::checkpoint::{config_diff, load_tensors, save_f32_tensors, Checkpoint};
use crate::config::{extract_overrides, Override, RunConfig};
use crate::data_io::{
    self, assign_counts, assign_fractions, center_crop_box, crop_tensor, entry_name, load_split, DatasetManifest,
    ManifestEntry, Split, CFD_FRACTIONS, INPUT_DIVISOR,
};
use crate::error::{AppError, AppResult};

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(
    name = "crackclf",
    version,
    about = "Crack segmentation with closed-loop adversarial feedback",
    after_help = "Any configuration key can be overridden with --section.key VALUE (e.g. --train.lr 0.01); \
                  --clf=false disables the critic."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network, writing checkpoints, a JSON-lines log and a config snapshot.
    Train(TrainArgs),
    /// Score a checkpoint (or saved predictions) on the evaluation split.
    Eval(EvalArgs),
    /// Write crack masks for images.
    Infer(InferArgs),
    /// Report parameters, FLOPs and measured FPS.
    Complexity(ComplexityArgs),
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Reassign the splits of a manifest.
    Split(SplitArgs),
    /// Cut every pair of a manifest into a grid of tiles.
    Tile(TileArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed probability maps (`<name>.safetensors` or
    /// `<name>.png`) used instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write `probs/<name>.safetensors` with the fused map as f32.
    #[arg(long)]
    dump_probs: bool,
    /// Also write `features/<name>.safetensors` with encoder, decoder and side activations.
    #[arg(long)]
    dump_features: bool,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Measure a trained network instead of a freshly initialised one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.75,0,0.25")]
    fractions: String,
}

#[derive(Args, Debug)]
struct SplitArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train, val and test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long, conflicts_with_all = ["counts", "preset"])]
    fractions: Option<String>,
    /// Exact train, val and test counts.
    #[arg(long, conflicts_with = "preset")]
    counts: Option<String>,
    /// Named split; `cfd` is 72 train / 46 test out of 118.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TileArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    /// Skip tiles whose mask has no crack pixel.
    #[arg(long)]
    drop_empty: bool,
}

/// Entry point: parses `args` (including the program name) and runs the
/// command. Exit status 2 signals a configuration or usage error.
pub fn run(args: Vec<String>) -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let (overrides, rest) = match extract_overrides(&args) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &AppError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}

fn dispatch(command: Command, overrides: &[Override]) -> AppResult<()> {
    let no_overrides = |name: &str| {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(AppError::Config(format!("`{name}` takes no configuration overrides")))
        }
    };
    match command {
        Command::Train(a) => train(
            &RunConfig::load(a.config.config.as_deref(), overrides)?,
            a.resume.as_deref(),
        ),
        Command::Eval(a) => {
            let cfg = RunConfig::load(a.config.config.as_deref(), overrides)?;
            eval(&cfg, a.checkpoint.as_deref(), a.predictions.as_deref()).map(|_| ())
        }
        Command::Infer(a) => {
            let mut cfg = RunConfig::load(a.config.config.as_deref(), overrides)?;
            if let Some(t) = a.threshold {
                cfg.infer.threshold = t;
            }
            cfg.infer.dump_probs |= a.dump_probs;
            cfg.infer.dump_features |= a.dump_features;
            cfg.validate()?;
            infer(&cfg, &a.checkpoint, &a.images)
        }
        Command::Complexity(a) => complexity(
            &RunConfig::load(a.config.config.as_deref(), overrides)?,
            a.checkpoint.as_deref(),
        )
        .map(|_| ()),
        Command::Synth(a) => {
            no_overrides("synth")?;
            synth(&a.out, a.count, a.size, a.seed, parse_triple(&a.fractions)?).map(|_| ())
        }
        Command::Split(a) => {
            no_overrides("split")?;
            let m = DatasetManifest::read(&a.manifest)?;
            let n = m.entries.len();
            let assignment = match (a.preset.as_deref(), a.fractions, a.counts) {
                (Some("cfd"), _, _) => assign_fractions(n, CFD_FRACTIONS, a.seed)?,
                (Some(p), _, _) => return Err(AppError::Config(format!("unknown preset `{p}` (known: cfd)"))),
                (None, Some(f), _) => assign_fractions(n, parse_triple(&f)?, a.seed)?,
                (None, None, Some(c)) => {
                    let c = parse_triple(&c)?;
                    assign_counts(n, c.map(|v| v as usize), a.seed)?
                }
                (None, None, None) => {
                    return Err(AppError::Config("split needs --preset, --fractions or --counts".into()))
                }
            };
            let out = rebase(m.with_splits(&assignment)?, &a.out)?;
            out.write(&a.out)?;
            log::info!(
                "{}: {} train, {} val, {} test",
                a.out.display(),
                out.count(Split::Train),
                out.count(Split::Val),
                out.count(Split::Test)
            );
            Ok(())
        }
        Command::Tile(a) => {
            no_overrides("tile")?;
            tile(&DatasetManifest::read(&a.manifest)?, &a.out, a.grid, a.drop_empty).map(|_| ())
        }
    }
}

fn parse_triple(s: &str) -> AppResult<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| AppError::Config(format!("expected three comma-separated numbers, got `{s}`")))?;
    v.try_into()
        .map_err(|_| AppError::Config(format!("expected three comma-separated numbers, got `{s}`")))
}

/// Rewrites relative entry paths so they resolve from `target`'s directory.
fn rebase(mut m: DatasetManifest, target: &Path) -> AppResult<DatasetManifest> {
    let dot = |p: &Path| {
        if p.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            p.to_path_buf()
        }
    };
    let to = target.parent().map(dot).unwrap_or_else(|| PathBuf::from("."));
    let from = std::path::absolute(dot(&m.base_dir)).map_err(|e| AppError::io(&m.base_dir, e))?;
    let to_abs = std::path::absolute(&to).map_err(|e| AppError::io(&to, e))?;
    if from != to_abs {
        for e in &mut m.entries {
            for p in [&mut e.image, &mut e.mask] {
                if p.is_relative() {
                    let abs = from.join(&*p);
                    *p = match abs.strip_prefix(&to_abs) {
                        Ok(rel) => rel.to_path_buf(),
                        Err(_) => abs,
                    };
                }
            }
        }
    }
    m.base_dir = to;
    Ok(m)
}

fn create_dir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> AppResult<()> {
    std::fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

fn samples_of(named: Vec<(String, Sample)>) -> Vec<Sample> {
    named.into_iter().map(|(_, s)| s).collect()
}

/// Writes log lines and checkpoints as training proceeds.
struct RunWriter {
    dir: PathBuf,
    log: BufWriter<File>,
    start: Instant,
}

impl RunWriter {
    fn line(&mut self, mut v: serde_json::Value) -> std::io::Result<()> {
        v["wall_ms"] = json!(self.start.elapsed().as_millis() as u64);
        writeln!(self.log, "{v}")?;
        self.log.flush()
    }

    fn checkpoint(&self, t: &ClfTrainer<SegNet, DeepSupervision>, name: &str) -> AppResult<()> {
        Checkpoint::from_trainer(t).save(&self.dir.join(name))
    }
}

fn observer_error(e: impl std::fmt::Display) -> crackclf_core::Error {
    crackclf_core::Error::Observer(e.to_string())
}

impl Observer<SegNet, DeepSupervision> for RunWriter {
    fn on_record(&mut self, record: &LogRecord) -> crackclf_core::Result<()> {
        let v = serde_json::to_value(record).map_err(observer_error)?;
        self.line(v).map_err(observer_error)
    }

    fn on_epoch_end(&mut self, s: &EpochSummary, t: &ClfTrainer<SegNet, DeepSupervision>) -> crackclf_core::Result<()> {
        self.line(json!({
            "kind": "epoch",
            "epoch": s.epoch,
            "mean_l_total": s.mean_l_total,
            "val_f1": s.val_f1,
            "is_best": s.is_best,
        }))
        .map_err(observer_error)?;
        self.checkpoint(t, LAST_CHECKPOINT).map_err(observer_error)?;
        if s.is_best {
            self.checkpoint(t, BEST_CHECKPOINT).map_err(observer_error)?;
        }
        match s.val_f1 {
            Some(f) => log::info!("epoch {} mean l_total {:.5} val F1 {:.4}", s.epoch, s.mean_l_total, f),
            None => log::info!("epoch {} mean l_total {:.5}", s.epoch, s.mean_l_total),
        }
        Ok(())
    }
}

/// `train`: fits the configured network and critic.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> AppResult<()> {
    let manifest = DatasetManifest::read(cfg.manifest()?)?;
    let train = samples_of(load_split(&manifest, cfg.data.train_split)?);
    if train.is_empty() {
        return Err(AppError::Config(format!(
            "the manifest has no `{}` entries",
            cfg.data.train_split
        )));
    }
    let val = if cfg.data.val_split == cfg.data.train_split {
        Vec::new()
    } else {
        samples_of(load_split(&manifest, cfg.data.val_split)?)
    };
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;

    let loss = DeepSupervision {
        weights: cfg.loss.clone(),
    };
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let diff = config_diff("model", &cfg.model, &ckpt.model);
            if !diff.is_empty() {
                return Err(AppError::Mismatch(diff.join("\n")));
            }
            if cfg.train.clf_enabled {
                if let Some(c) = &ckpt.critic_config {
                    let diff = config_diff("critic", &cfg.critic, c);
                    if !diff.is_empty() {
                        return Err(AppError::Mismatch(diff.join("\n")));
                    }
                }
            }
            ckpt.into_trainer(loss, cfg.train.clone())?
        }
        None => {
            let net = SegNet::new(cfg.model.clone(), cfg.train.seed)?;
            ClfTrainer::new(net, loss, cfg.critic.clone(), cfg.train.clone())?
        }
    };
    let log_path = dir.join(TRAIN_LOG);
    let log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| AppError::io(&log_path, e))?;
    let mut writer = RunWriter {
        dir: dir.clone(),
        log: BufWriter::new(log),
        start: Instant::now(),
    };
    log::info!(
        "training on {} images ({} validation), {} parameters, clf {}",
        train.len(),
        val.len(),
        trainer.backbone().num_params(),
        if trainer.critic().is_some() { "on" } else { "off" }
    );
    trainer.fit(&train, &val, &mut writer)?;
    write_file(&dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

fn load_prediction(dir: &Path, name: &str, h: usize, w: usize) -> AppResult<ProbabilityMap> {
    let st = dir.join(format!("{name}.safetensors"));
    let png = dir.join(format!("{name}.png"));
    let t = if st.is_file() {
        let mut tensors = load_tensors(&st)?;
        let i = tensors
            .iter()
            .position(|(n, _)| n == "prob")
            .ok_or_else(|| AppError::format(&st, "no `prob` tensor"))?;
        tensors.swap_remove(i).1
    } else if png.is_file() {
        data_io::load_gray(&png)?
    } else {
        return Err(AppError::format(
            dir,
            format!("no prediction for `{name}` (.safetensors or .png)"),
        ));
    };
    let (_, ph, pw) = t.dims3()?;
    let t = if (ph, pw) == (h, w) {
        t
    } else {
        // A prediction made before the divisibility crop.
        let (top, left, ch, cw) = center_crop_box(ph, pw, INPUT_DIVISOR);
        if (ch, cw) != (h, w) {
            return Err(AppError::format(
                dir,
                format!("prediction `{name}` is {ph}x{pw}, ground truth {h}x{w}"),
            ));
        }
        crop_tensor(&t, top, left, ch, cw)?
    };
    ProbabilityMap::new(t).map_err(|e| AppError::format(dir, format!("prediction `{name}`: {e}")))
}

/// `eval`: fixed-threshold scores, ODS, OIS and the PR curve on the
/// evaluation split.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, predictions: Option<&Path>) -> AppResult<MetricsReport> {
    let manifest = DatasetManifest::read(cfg.manifest()?)?;
    let named = load_split(&manifest, cfg.data.eval_split)?;
    if named.is_empty() {
        return Err(AppError::Config(format!(
            "the manifest has no `{}` entries",
            cfg.data.eval_split
        )));
    }
    let (probs, source) = match (predictions, checkpoint) {
        (Some(dir), _) => {
            let p = named
                .iter()
                .map(|(n, s)| load_prediction(dir, n, s.mask.height(), s.mask.width()))
                .collect::<AppResult<Vec<_>>>()?;
            (p, dir.display().to_string())
        }
        (None, Some(path)) => {
            let ckpt = Checkpoint::load(path)?;
            let diff = config_diff("model", &cfg.model, &ckpt.model);
            if !diff.is_empty() {
                return Err(AppError::Mismatch(diff.join("\n")));
            }
            let net = ckpt.network()?;
            let p = named
                .iter()
                .map(|(_, s)| Ok(net.infer(&s.image)?.fused))
                .collect::<AppResult<Vec<_>>>()?;
            (p, path.display().to_string())
        }
        (None, None) => return Err(AppError::Config("eval needs --checkpoint or --predictions".into())),
    };
    let gts: Vec<_> = named.iter().map(|(_, s)| s.mask.clone()).collect();
    let report = evaluate(&probs, &gts, cfg.eval.threshold, cfg.eval.tolerance)?;

    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let meta = json!({
        "source": source,
        "split": cfg.data.eval_split,
        "images": named.len(),
        "threshold": report.threshold,
        "tolerance": cfg.eval.tolerance,
        "counts": report.counts,
        "pr": report.pr,
        "re": report.re,
        "f1": report.f1,
        "ods": report.ods,
        "best_t": report.best_t,
        "ois": report.ois,
    });
    let text = serde_json::to_string_pretty(&meta).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(&dir.join("metrics.json"), text + "\n")?;
    let mut csv = String::from("t,pr,re,f1\n");
    for c in &report.pr_curve {
        csv.push_str(&format!("{},{},{},{}\n", c.t, c.pr, c.re, c.f1));
    }
    write_file(&dir.join("pr_curve.csv"), csv)?;
    let summary = format!(
        "source {source}\nsplit {} ({} images)\nthreshold {}\ntolerance {} px ({:?})\n\
         tp {} fp {} fn {}\nPr {:.4}\nRe {:.4}\nF1 {:.4}\nODS {:.4} (t = {})\nOIS {:.4}\n",
        cfg.data.eval_split,
        named.len(),
        report.threshold,
        cfg.eval.tolerance.radius,
        cfg.eval.tolerance.metric,
        report.counts.tp,
        report.counts.fp,
        report.counts.fn_,
        report.pr,
        report.re,
        report.f1,
        report.ods,
        report.best_t,
        report.ois,
    );
    write_file(&dir.join("metrics.txt"), &summary)?;
    print!("{summary}");
    Ok(report)
}

/// Output stems for `paths`, suffixed `_2`, `_3`, ... on collisions.
fn unique_stems(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = HashSet::new();
    paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let mut name = stem.clone();
            let mut k = 2;
            while !seen.insert(name.clone()) {
                name = format!("{stem}_{k}");
                k += 1;
            }
            name
        })
        .collect()
}

fn infer_one(cfg: &RunConfig, net: &SegNet, path: &Path, name: &str) -> AppResult<()> {
    let mut image = data_io::load_image(path)?;
    let (_, h, w) = image.dims3()?;
    if h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
        let (top, left, ch, cw) = center_crop_box(h, w, INPUT_DIVISOR);
        if ch == 0 || cw == 0 {
            return Err(AppError::format(
                path,
                format!("{h}x{w} is smaller than {INPUT_DIVISOR}x{INPUT_DIVISOR}"),
            ));
        }
        log::warn!("{}: {h}x{w} centre-cropped to {ch}x{cw}", path.display());
        image = crop_tensor(&image, top, left, ch, cw)?;
    }
    let mut g = Graph::new();
    let out = net.forward(&mut g, &image, false)?;
    // Threshold the f32 values that are dumped so the two always agree.
    let prob = g.value(out.fused).map(|p| p as f32 as f64);
    let mask = ProbabilityMap::new(prob.clone())?.threshold(cfg.infer.threshold);
    let dir = &cfg.output.dir;
    data_io::save_mask(&mask, &dir.join("masks").join(format!("{name}.png")))?;
    if cfg.infer.dump_probs {
        save_f32_tensors(
            &dir.join("probs").join(format!("{name}.safetensors")),
            &[("prob".into(), prob)],
        )?;
    }
    if cfg.infer.dump_features {
        let feats: Vec<(String, Tensor)> = out
            .features
            .iter()
            .map(|(n, v)| (n.clone(), g.value(*v).clone()))
            .collect();
        save_f32_tensors(&dir.join("features").join(format!("{name}.safetensors")), &feats)?;
    }
    Ok(())
}

/// `infer`: one mask per image; failures are reported and skipped.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf]) -> AppResult<()> {
    let net = Checkpoint::load(checkpoint)?.network()?;
    create_dir(&cfg.output.dir)?;
    let mut failed = Vec::new();
    for (path, name) in images.iter().zip(unique_stems(images)) {
        match infer_one(cfg, &net, path, &name) {
            Ok(()) => log::info!("{} -> masks/{name}.png", path.display()),
            Err(e) => {
                log::error!("{e}");
                failed.push(path.display().to_string());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::Format {
            path: cfg.output.dir.clone(),
            message: format!(
                "{} of {} inputs failed: {}",
                failed.len(),
                images.len(),
                failed.join(", ")
            ),
        })
    }
}

/// `complexity`: exact parameter counts, analytic FLOPs and median FPS.
pub fn complexity(cfg: &RunConfig, checkpoint: Option<&Path>) -> AppResult<serde_json::Value> {
    let net = match checkpoint {
        Some(p) => Checkpoint::load(p)?.network()?,
        None => SegNet::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let critic = if cfg.train.clf_enabled {
        Some(Critic::new(cfg.critic.clone(), cfg.train.seed)?)
    } else {
        None
    };
    let c = &cfg.complexity;
    let report = complexity::report(&net, critic.as_ref(), c.height, c.width)?;
    let image = Tensor::full(&[net.config().in_channels, c.height, c.width], 0.5);
    for _ in 0..c.warmup {
        net.infer(&image)?;
    }
    let mut times: Vec<f64> = (0..c.runs)
        .map(|_| {
            let t = Instant::now();
            net.infer(&image).map(|_| t.elapsed().as_secs_f64())
        })
        .collect::<Result<_, _>>()?;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    let deviation = report.params_deviation();
    let v = json!({
        "convention": "2 FLOPs per multiply-accumulate; convolutions, transposed convolutions and matrix-vector products only",
        "input": [c.height, c.width],
        "params": report.params,
        "flops": report.flops,
        "flops_total": report.flops.total(),
        "critic_params": report.critic_params,
        "critic_flops_total": report.critic_flops.map(|f| f.total()),
        "fps": 1.0 / median,
        "median_ms": median * 1e3,
        "timed_runs": c.runs,
        "warmup_runs": c.warmup,
        "reference": { "params": REFERENCE_PARAMS, "flops": REFERENCE_FLOPS, "fps": REFERENCE_FPS },
        "params_deviation": deviation,
        "params_flagged": deviation.abs() > 0.25,
    });
    create_dir(&cfg.output.dir)?;
    let text = serde_json::to_string_pretty(&v).map_err(|e| AppError::Config(e.to_string()))?;
    write_file(&cfg.output.dir.join("complexity.json"), text + "\n")?;
    println!("# FLOPs: {}", v["convention"].as_str().unwrap_or_default());
    println!("input       {}x{}", c.height, c.width);
    println!(
        "params      {} ({:+.1}% vs reference {:.2}M{})",
        report.params,
        deviation * 100.0,
        REFERENCE_PARAMS / 1e6,
        if deviation.abs() > 0.25 { ", FLAGGED" } else { "" }
    );
    println!(
        "FLOPs       {:.3}G (reference {:.2}G)",
        report.flops.total() as f64 / 1e9,
        REFERENCE_FLOPS / 1e9
    );
    if let (Some(p), Some(f)) = (report.critic_params, report.critic_flops) {
        println!(
            "critic      {} params, {:.3}G FLOPs per masked image",
            p,
            f.total() as f64 / 1e9
        );
    }
    println!(
        "FPS         {:.2} (median of {} after {} warm-up)",
        1.0 / median,
        c.runs,
        c.warmup
    );
    Ok(v)
}

/// `synth`: `count` synthetic pairs under `out/images`, `out/masks` and
/// `out/manifest.tsv`.
pub fn synth(out: &Path, count: usize, size: usize, seed: u64, fractions: [f64; 3]) -> AppResult<DatasetManifest> {
    if size == 0 || !size.is_multiple_of(INPUT_DIVISOR) {
        return Err(AppError::Config(format!(
            "--size must be a positive multiple of {INPUT_DIVISOR}"
        )));
    }
    let cfg = SyntheticConfig {
        height: size,
        width: size,
        ..SyntheticConfig::default()
    };
    let splits = assign_fractions(count, fractions, seed)?;
    let mut m = DatasetManifest::new("synthetic");
    m.base_dir = out.to_path_buf();
    for (i, split) in splits.into_iter().enumerate() {
        let s = synthetic::generate(&cfg, seed.wrapping_add(i as u64));
        let image = PathBuf::from(format!("images/{i:04}.png"));
        let mask = PathBuf::from(format!("masks/{i:04}.png"));
        data_io::save_image(&s.image, &out.join(&image))?;
        data_io::save_mask(&s.mask, &out.join(&mask))?;
        m.entries.push(ManifestEntry { image, mask, split });
    }
    m.write(&out.join("manifest.tsv"))?;
    Ok(m)
}

/// `tile`: cuts every pair into `grid x grid` tiles under `out`, keeping
/// each entry's split.
pub fn tile(manifest: &DatasetManifest, out: &Path, grid: usize, drop_empty: bool) -> AppResult<DatasetManifest> {
    let mut m = DatasetManifest::new(&manifest.dataset);
    m.base_dir = out.to_path_buf();
    let mut sizes = HashSet::new();
    let mut dropped = 0;
    for e in &manifest.entries {
        let name = entry_name(e);
        let pair = data_io::load_pair(manifest, e)?;
        for (k, t) in data_io::tile(&pair, grid)?.into_iter().enumerate() {
            if drop_empty && t.mask.count() == 0 {
                dropped += 1;
                continue;
            }
            sizes.insert((t.mask.height(), t.mask.width()));
            let image = PathBuf::from(format!("images/{name}_{k:02}.png"));
            let mask = PathBuf::from(format!("masks/{name}_{k:02}.png"));
            data_io::save_image(&t.image, &out.join(&image))?;
            data_io::save_mask(&t.mask, &out.join(&mask))?;
            m.entries.push(ManifestEntry {
                image,
                mask,
                split: e.split,
            });
        }
    }
    m.tile_size = match sizes.iter().collect::<Vec<_>>()[..] {
        [&(h, w)] if h == w => Some(h),
        _ => None,
    };
    m.write(&out.join("manifest.tsv"))?;
    log::info!("{} tiles written, {dropped} empty tiles dropped", m.entries.len());
    Ok(m)
}

//! `raysem`: dataset generation, training, evaluation, ablations and
//! diagnostics.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 I/O or
//! file-format error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raysem_core::config::{KeyValues, KvWriter};
use raysem_core::eval::{self, format_parallax, ParallaxSettings};
use raysem_core::geom::Vec3;
use raysem_core::pseudo::confidence_sampler;
use raysem_core::render::{all_pixels, render_bundle};
use raysem_core::train::{self, checkpoint, format_table, Dataset, ExperimentReport, Mode, PreparedScene, Split};
use raysem_core::{Error, SceneConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "raysem", version, about = "Ray-rendered semantic self-supervision for LiDAR segmentation")]
struct Cli {
    /// Worker threads; defaults to the available parallelism. Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene collection.
    Gen(GenArgs),
    /// Train one model and evaluate it on the held-out scenes.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out scenes (backbone and voxel head only).
    Eval(EvalArgs),
    /// Train every mode for several seeds and tabulate held-out mIoU.
    Ablate(AblateArgs),
    /// Compare ray-based and perspective pseudo-labels under camera offsets.
    Parallax(ParallaxArgs),
    /// Render one scene with a trained model and dump images.
    RenderDebug(RenderArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene config (key = value); may also set `count` and `mask_perturbation`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes (overrides the config file).
    #[arg(long)]
    count: Option<usize>,
    /// Boundary-perturbation rounds for the segment masks (overrides the config file).
    #[arg(long)]
    mask_perturbation: Option<u32>,
}

/// Training options shared by `train` and `ablate`; flags override the file.
#[derive(Args, Debug)]
struct TrainOpts {
    /// Training config (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Labeled fraction of the training pool.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// full, sup-only, perspective or no-sam.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for config, report, checkpoints and image dumps.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated learning rates: pick the best on a validation split
    /// of the training pool before training.
    #[arg(long, value_delimiter = ',')]
    select_lr: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint; defaults to `<run>/model.srck`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training run directory; its `config.txt` fixes the held-out split.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Training config, when no run directory is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write `eval.txt`; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; one subdirectory per mode and seed.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParallaxArgs {
    /// Scene config (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes per offset.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Comma-separated camera offsets in meters.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
    offsets: Vec<f64>,
    /// Offset direction in the LiDAR frame, `x,y,z`.
    #[arg(long, value_delimiter = ',', default_value = "0,1,0")]
    direction: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    mask_perturbation: u32,
    #[arg(long, default_value_t = 1.6)]
    entropy_threshold: f64,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training run directory (reads `config.txt` and `model.srck`).
    #[arg(long)]
    run: PathBuf,
    /// Scene index within the dataset.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long)]
    out: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn load_kv(path: Option<&Path>) -> Result<KeyValues, Error> {
    match path {
        Some(p) => KeyValues::load(p),
        None => KeyValues::parse("", "<defaults>"),
    }
}

/// `run.txt`: the command, seed and fully resolved config of a run.
fn record_run(out: &Path, command: &str, seed: u64, resolved: &str) -> Result<(), Error> {
    record_run_named(out, command, seed, resolved, "run.txt")
}

fn record_run_named(out: &Path, command: &str, seed: u64, resolved: &str, name: &str) -> Result<(), Error> {
    create_dir(out)?;
    let mut text = String::new();
    let _ = writeln!(text, "# raysem {command}");
    let _ = writeln!(text, "seed = {seed}");
    text.push_str(resolved);
    write_file(&out.join(name), &text)
}

fn gen(a: &GenArgs) -> Result<(), Error> {
    let mut kv = load_kv(a.config.as_deref())?;
    let count = a.count.or(kv.take("count")?).unwrap_or(200);
    let pert = a.mask_perturbation.or(kv.take("mask_perturbation")?).unwrap_or(1);
    let cfg = SceneConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let ds = Dataset::generate(&cfg, a.seed, count, pert)?;
    ds.save(&a.out)?;
    record_run(&a.out, "gen", a.seed, &ds.manifest())?;
    println!("wrote {} scenes to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_config(opts: &TrainOpts, mode: Option<&str>, seed: Option<u64>) -> Result<TrainConfig, Error> {
    let mut kv = load_kv(opts.config.as_deref())?;
    if let Some(m) = mode {
        kv.set("mode", m);
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    if let Some(v) = opts.split {
        kv.set("labeled_fraction", v);
    }
    if let Some(v) = opts.lr {
        kv.set("lr", v);
    }
    if let Some(v) = opts.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = opts.steps_per_epoch {
        kv.set("steps_per_epoch", v);
    }
    let cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<(), Error> {
    let mut cfg = train_config(&a.opts, a.mode.as_deref(), a.seed)?;
    let ds = Dataset::load(&a.opts.data)?;
    create_dir(&a.out)?;
    if let Some(lrs) = &a.select_lr {
        let table = train::select_lr(&ds, &cfg, lrs)?;
        let mut text = String::from("# validation mIoU per learning rate\n");
        for (lr, m) in &table {
            let _ = writeln!(text, "{lr} {m:.6}");
        }
        write_file(&a.out.join("lr_selection.txt"), &text)?;
        let best = table.iter().fold((cfg.lr, f64::NEG_INFINITY), |b, &(lr, m)| if m > b.1 { (lr, m) } else { b });
        cfg.lr = best.0;
    }
    record_run(&a.out, "train", cfg.seed, &cfg.to_kv())?;
    let report = train::run_experiment(&ds, &cfg, Some(&a.out))?;
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), Error> {
    let cfg = match (&a.run, &a.config) {
        (Some(run), _) => TrainConfig::load(&run.join("config.txt"))?,
        (None, Some(c)) => TrainConfig::load(c)?,
        (None, None) => TrainConfig::default(),
    };
    let model_path = match (&a.model, &a.run) {
        (Some(m), _) => m.clone(),
        (None, Some(run)) => run.join("model.srck"),
        (None, None) => return Err(Error::config("eval needs --model or --run")),
    };
    let out = a.out.clone().or_else(|| a.run.clone()).ok_or_else(|| Error::config("eval needs --out or --run"))?;
    let ds = Dataset::load(&a.data)?;
    let model = checkpoint::load_inference(&model_path)?;
    if model.vox.classes() != ds.classes() {
        return Err(Error::config("checkpoint and dataset disagree on the class count"));
    }
    let split = Split::new(ds.len(), cfg.labeled_fraction, cfg.heldout_fraction, cfg.seed)?;
    let test: Vec<PreparedScene> = split
        .test
        .iter()
        .map(|&i| PreparedScene::new(ds.records[i].clone(), &ds.scene_config.grid, &cfg.sampling, train::PixelSet::Cover))
        .collect();
    let refs: Vec<&PreparedScene> = test.iter().collect();
    let cm = train::evaluate(&model, &refs);
    let report = ExperimentReport {
        mode: cfg.mode,
        labeled_fraction: cfg.labeled_fraction,
        seed: cfg.seed,
        epochs: Vec::new(),
        confusion: cm,
        band_entropy: (0.0, 0.0),
    };
    let mut text = String::new();
    let _ = writeln!(text, "# held-out point mIoU, {} scenes", test.len());
    text.push_str(&format_table(std::slice::from_ref(&report)));
    let _ = writeln!(text, "# miou {:?}", report.miou());
    let mut resolved = KvWriter::new();
    resolved.put("data", a.data.display()).put("model", model_path.display());
    record_run_named(&out, "eval", cfg.seed, &(resolved.finish() + &cfg.to_kv()), "eval_run.txt")?;
    write_file(&out.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ablate(a: &AblateArgs) -> Result<(), Error> {
    let base = train_config(&a.opts, None, None)?;
    let ds = Dataset::load(&a.opts.data)?;
    let scenes = train::prepare_all(&ds, &base);
    record_run(&a.out, "ablate", a.seed, &base.to_kv())?;
    let mut reports = Vec::new();
    let mut summary = String::new();
    let _ = writeln!(summary, "{:<12} {:>6} {:>8}", "mode", "split", "median");
    for mode in Mode::ALL {
        let mut mious = Vec::new();
        for seed in a.seed..a.seed + a.seeds {
            let cfg = TrainConfig { mode, seed, ..base.clone() };
            let split = Split::new(ds.len(), cfg.labeled_fraction, cfg.heldout_fraction, seed)?;
            let dir = a.out.join(format!("{mode}_seed{seed}"));
            let (_, r) = train::run_split(&scenes, &split, &cfg, ds.classes(), Some(&dir))?;
            log::info!("{mode} seed {seed}: mIoU {:.4}", r.miou());
            mious.push(r.miou());
            reports.push(r);
        }
        let _ = writeln!(summary, "{:<12} {:>6.3} {:>8.4}", mode.name(), base.labeled_fraction, median(&mut mious));
    }
    let text = format!("{}\n{}", format_table(&reports), summary);
    write_file(&a.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn parallax(a: &ParallaxArgs) -> Result<(), Error> {
    let mut kv = load_kv(a.config.as_deref())?;
    let cfg = SceneConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if a.direction.len() != 3 {
        return Err(Error::config("--direction needs three components"));
    }
    let direction = Vec3::new(a.direction[0], a.direction[1], a.direction[2]);
    if direction.norm() == 0.0 {
        return Err(Error::config("--direction must be nonzero"));
    }
    let sampling = raysem_core::RaySampling::new(0.5, cfg.max_range + 2.0, a.samples).map_err(|e| Error::config(e.to_string()))?;
    let settings = ParallaxSettings {
        scenes: a.scenes,
        seed: a.seed,
        direction,
        sampling,
        mask_perturbation: a.mask_perturbation,
        entropy_threshold: a.entropy_threshold,
        band_radius: 2,
    };
    let mut resolved = KvWriter::new();
    resolved
        .put("scenes", a.scenes)
        .put_list("offsets", &a.offsets)
        .put_list("direction", &a.direction)
        .put("mask_perturbation", a.mask_perturbation)
        .put("entropy_threshold", a.entropy_threshold)
        .put("samples", a.samples);
    cfg.write_kv(&mut resolved);
    record_run(&a.out, "parallax", a.seed, &resolved.finish())?;
    let rows = eval::parallax_report(&cfg, &settings, &a.offsets)?;
    let text = format_parallax(&rows);
    write_file(&a.out.join("parallax.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn render_debug(a: &RenderArgs) -> Result<(), Error> {
    let cfg = TrainConfig::load(&a.run.join("config.txt"))?;
    let model = checkpoint::load(&a.run.join("model.srck"))?;
    let ds = Dataset::load(&a.data)?;
    let rec = ds
        .records
        .get(a.scene)
        .ok_or_else(|| Error::config(format!("scene {} out of range ({} scenes)", a.scene, ds.len())))?
        .clone();
    let scene = PreparedScene::new(rec, &ds.scene_config.grid, &cfg.sampling, train::PixelSet::Cover);
    let rec = &scene.record;
    let (grid, _) = model.backbone.forward(&scene.input);
    let bundle = render_bundle(&rec.camera, &grid, &model.nerf, &all_pixels(&rec.camera), cfg.sampling, false)?;
    let (verdicts, pseudo) = confidence_sampler(&bundle, &rec.masks, cfg.weights.entropy_threshold);
    record_run(&a.out, "render-debug", cfg.seed, &format!("scene = {}\n{}", a.scene, cfg.to_kv()))?;
    eval::dump_images(&bundle, Some(&pseudo), &rec.label_image, &a.out, "")?;
    let (band, interior) = eval::band_entropy(&bundle, &rec.label_image, 2);
    let mut text = String::new();
    let _ = writeln!(text, "boundary_entropy = {band:.6}");
    let _ = writeln!(text, "interior_entropy = {interior:.6}");
    let _ = writeln!(text, "cover_rays = {}", scene.pixels.len());
    for (i, v) in verdicts.verdicts.iter().enumerate() {
        let _ = writeln!(
            text,
            "segment {i}: {:?} class {:?} entropy {}",
            v.status,
            v.class,
            v.entropy.map_or("-".to_string(), |h| format!("{h:.4}"))
        );
    }
    write_file(&a.out.join("render.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::PixelOutOfBounds { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Parallax(a) => parallax(a),
        Command::RenderDebug(a) => render_debug(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

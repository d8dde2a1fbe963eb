//! Command-line entry point: scene generation, training (including the
//! ablation variants), batch rendering, evaluation, and the basis-count
//! sweep. One binary, subcommand style; flags override config values.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::appearance::Model;
use crate::config::{restore_model, RunConfig, SceneFile};
use crate::error::{Error, Result};
use crate::render::render_image;
use crate::scene_io::{
    generate_scene, load_checkpoint, load_dataset, psnr, save_checkpoint, save_dataset, ssim,
    write_image, SceneDataset,
};
use crate::train::{refreshed_mask, train, TrainOptions, TrainReport};

const OUT_DIR_ENV: &str = "GLINTFIELD_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "glintfield",
    about = "Differentiable tensorial radiance field with dynamic coefficient decomposition",
    version
)]
pub struct Cli {
    /// Cap the worker thread pool.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Force fixed-order gradient reductions. Reductions are fixed-order in
    /// this implementation regardless; the flag is recorded in the config.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root containing transforms_{split}.json.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory (flag > GLINTFIELD_OUT_DIR > config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model variant: full, or ablations a..d
    /// (no_decomposition, linear_blend, concat_conditioning, raw_features).
    #[arg(long)]
    pub variant: Option<String>,
    /// Override train.iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Override both learning rates.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Ray-trace a synthetic scene description into a dataset on disk.
    MakeScene {
        /// Scene description (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize a model on a dataset and write checkpoint + metrics.
    Train(TrainArgs),
    /// Render a dataset split from a checkpoint to PNG frames.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report per-frame and mean PSNR/SSIM of a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train one model per basis count and report the comparison.
    SweepNp {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated basis counts, e.g. 4,16.
        #[arg(long, value_delimiter = ',', required = true)]
        np: Vec<usize>,
    },
}

pub fn main() -> Result<()> {
    let cli = Cli::parse();
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // ignore the error if a global pool already exists (tests, repeat runs)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match cli.command {
        Command::MakeScene { spec, out, seed } => cmd_make_scene(&spec, out, seed),
        Command::Train(args) => cmd_train(&args, cli.deterministic).map(|_| ()),
        Command::Render {
            checkpoint,
            dataset,
            split,
            out,
        } => cmd_render(&checkpoint, dataset, &split, out),
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => cmd_eval(&checkpoint, dataset, &split),
        Command::SweepNp { train, np } => cmd_sweep_np(&train, &np, cli.deterministic),
    }
}

fn out_dir_from(flag: Option<PathBuf>, cfg: Option<&PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.cloned())
        .unwrap_or_else(|| PathBuf::from("glintfield_out"))
}

fn cmd_make_scene(spec_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut file = SceneFile::load(spec_path)?;
    if let Some(s) = seed {
        file.scene.seed = s;
    }
    let out = out_dir_from(out, None);
    let mut total = 0;
    for (split, n) in [("train", file.n_train), ("test", file.n_test)] {
        if n == 0 {
            continue;
        }
        let ds = generate_scene(&file.scene, n, file.resolution, split, file.near, file.far)?;
        save_dataset(&ds, &out)?;
        total += ds.frames.len();
        println!(
            "wrote {} {} frames at {}x{} to {}",
            ds.frames.len(),
            split,
            file.resolution,
            file.resolution,
            out.display()
        );
    }
    println!("scene complete: {total} frames");
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_loss: f64,
    pub report: TrainReport,
    pub config: RunConfig,
    pub model: Model,
    pub dataset: SceneDataset,
}

fn cmd_train(args: &TrainArgs, deterministic: bool) -> Result<TrainOutcome> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(v) = &args.variant {
        cfg.variant = v.clone();
    }
    if let Some(iters) = args.iters {
        cfg.train.iterations = iters;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr_grid = lr;
        cfg.train.lr_network = lr;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;

    let dataset_root = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--dataset or config)".into()))?;
    let out = out_dir_from(args.out.clone(), cfg.out_dir.as_ref());
    std::fs::create_dir_all(&out)?;

    let dataset = load_dataset(&dataset_root, "train", cfg.render.near, cfg.render.far)?;
    let model = cfg.build_model(dataset.n_conditions)?;
    let echo = cfg.to_toml()?;

    let metrics_path = out.join("metrics.jsonl");
    let report = train(
        &model,
        &dataset,
        &cfg.render_config(true),
        &cfg.train,
        TrainOptions {
            metrics_path: Some(&metrics_path),
            snapshot: Some((out.join("nan_snapshot.ckpt"), echo.clone())),
        },
    )?;

    let ckpt = out.join("checkpoint_final.ckpt");
    save_checkpoint(
        &model.named_params(),
        &echo,
        Some(&report.optimizer.to_blob()),
        &ckpt,
    )?;
    println!(
        "trained {} iterations (variant {}), final loss {:.6e}",
        cfg.train.iterations, cfg.variant, report.final_loss
    );
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", metrics_path.display());
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics: metrics_path,
        final_loss: report.final_loss,
        report,
        config: cfg,
        model,
        dataset,
    })
}

fn cmd_render(
    checkpoint: &Path,
    dataset: Option<PathBuf>,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = load_checkpoint(checkpoint)?;
    let (cfg, model) = restore_model(&data)?;
    let root = dataset
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset given (--dataset or config)".into()))?;
    let ds = load_dataset(&root, split, cfg.render.near, cfg.render.far)?;
    let out = out_dir_from(out, cfg.out_dir.as_ref());
    std::fs::create_dir_all(&out)?;

    let rc = cfg.render_config(false);
    let mask = refreshed_mask(
        &model,
        &rc,
        cfg.render.near,
        cfg.render.far,
        cfg.grid.alpha_threshold,
    )?;
    for (i, frame) in ds.frames.iter().enumerate() {
        let img = render_image(&model, &frame.camera, &rc, Some(&mask), frame.illumination)?;
        write_image(&img, &out.join(format!("render_{i:03}.png")))?;
    }
    println!("rendered {} {} frames to {}", ds.frames.len(), split, out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    frame: usize,
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    split: String,
    frames: usize,
    mean_psnr: f64,
    mean_ssim: f64,
}

fn cmd_eval(checkpoint: &Path, dataset: Option<PathBuf>, split: &str) -> Result<()> {
    let data = load_checkpoint(checkpoint)?;
    let (cfg, model) = restore_model(&data)?;
    let root = dataset
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset given (--dataset or config)".into()))?;
    let ds = load_dataset(&root, split, cfg.render.near, cfg.render.far)?;
    let rc = cfg.render_config(false);
    let mask = refreshed_mask(
        &model,
        &rc,
        cfg.render.near,
        cfg.render.far,
        cfg.grid.alpha_threshold,
    )?;

    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for (i, frame) in ds.frames.iter().enumerate() {
        let img = render_image(&model, &frame.camera, &rc, Some(&mask), frame.illumination)?
            .quantized();
        let p = psnr(&img, &frame.image)?;
        let s = ssim(&img, &frame.image)?;
        sum_psnr += p;
        sum_ssim += s;
        let rec = EvalRecord {
            frame: i,
            psnr: p,
            ssim: s,
        };
        println!("{}", serde_json::to_string(&rec).unwrap());
    }
    let n = ds.frames.len().max(1);
    let summary = EvalSummary {
        split: split.to_string(),
        frames: ds.frames.len(),
        mean_psnr: sum_psnr / n as f64,
        mean_ssim: sum_ssim / n as f64,
    };
    println!("{}", serde_json::to_string(&summary).unwrap());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    n_bases: usize,
    seed: u64,
    mean_psnr: f64,
}

fn cmd_sweep_np(args: &TrainArgs, np: &[usize], deterministic: bool) -> Result<()> {
    if np.is_empty() {
        return Err(Error::Config("sweep needs at least one --np value".into()));
    }
    let base_out = out_dir_from(
        args.out.clone(),
        match &args.config {
            Some(p) => RunConfig::load(p)?.out_dir.clone(),
            None => None,
        }
        .as_ref(),
    );
    let mut rows = Vec::new();
    for &n_bases in np {
        let sub = base_out.join(format!("np{n_bases}"));
        let mut sub_args = args.clone();
        sub_args.out = Some(sub.clone());
        // same seed and config per point; only N_p differs
        let outcome = {
            let mut cfg = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.appearance.n_bases = n_bases;
            let tmp = sub.join("run_config.toml");
            std::fs::create_dir_all(&sub)?;
            std::fs::write(&tmp, cfg.to_toml()?)?;
            sub_args.config = Some(tmp);
            cmd_train(&sub_args, deterministic)?
        };
        // held-out PSNR on the test split
        let test = load_dataset(
            outcome
                .config
                .dataset
                .as_ref()
                .ok_or_else(|| Error::Config("no dataset for sweep eval".into()))?,
            "test",
            outcome.config.render.near,
            outcome.config.render.far,
        )?;
        let rc = outcome.config.render_config(false);
        let mask = refreshed_mask(
            &outcome.model,
            &rc,
            outcome.config.render.near,
            outcome.config.render.far,
            outcome.config.grid.alpha_threshold,
        )?;
        let mean = crate::train::eval_mean_psnr(&outcome.model, &test, &rc, Some(&mask))?;
        rows.push(SweepRow {
            n_bases,
            seed: outcome.config.seed,
            mean_psnr: mean,
        });
    }
    println!("{:>8} {:>8} {:>10}", "n_bases", "seed", "psnr_db");
    for row in &rows {
        println!("{:>8} {:>8} {:>10.3}", row.n_bases, row.seed, row.mean_psnr);
    }
    let table = base_out.join("sweep.jsonl");
    let mut text = String::new();
    for row in &rows {
        text.push_str(&serde_json::to_string(row).unwrap());
        text.push('\n');
    }
    std::fs::write(&table, text)?;
    println!("table: {}", table.display());
    Ok(())
}

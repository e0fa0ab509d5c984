mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use locater::bench::{self, BenchOptions};
use locater::corpus::{
    concat_spatial, concat_temporal, contrast_sample, decode_masks, generate, read_dataset,
    read_sample, standard_vocabulary, write_dataset, VideoSample,
};
use locater::eval::evaluate;
use locater::trainer::{infer_with, load_predictions, save_predictions, train_with, Checkpoint};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "locater", about = "Language-guided video segmentation with memory at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Contrast {
    None,
    Spatial,
    Temporal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "none")]
        contrast: Contrast,
        /// Output directory; defaults to the config's corpus path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Segment one sample directory, or every sample of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Global-memory sampling interval; defaults to the checkpoint's.
        #[arg(long)]
        interval: Option<usize>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Print `metric,value` rows instead of aligned columns.
        #[arg(long)]
        csv: bool,
    },
    /// Time full attention against the memory pipeline.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "15,30,50,80,100")]
        frames_list: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        tokens: usize,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(config: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(sets)?;
    Ok(cfg)
}

fn cmd_gen(
    config: Option<&Path>,
    count: Option<usize>,
    seed: Option<u64>,
    contrast: Contrast,
    out: Option<PathBuf>,
    sets: &[String],
) -> Result<()> {
    let mut cfg = resolve(config, sets)?;
    if let Some(c) = count {
        cfg.count = c;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.corpus = o;
    }
    print!("{}", cfg.header());
    cfg.scene.width = cfg.train.model.frame_width;
    cfg.scene.height = cfg.train.model.frame_height;
    cfg.scene.channels = cfg.train.model.channels;
    let singles = generate(cfg.count, &cfg.scene, cfg.train.seed)?;
    let samples: Vec<VideoSample> = match contrast {
        Contrast::None => singles,
        Contrast::Spatial | Contrast::Temporal => contrast_sample(&singles)?
            .into_iter()
            .map(|(q, p)| match contrast {
                Contrast::Spatial => concat_spatial(&singles[q], &singles[p]),
                _ => concat_temporal(&singles[q], &singles[p]),
            })
            .collect::<locater::Result<_>>()?,
    };
    if cfg.corpus.exists() {
        fs::remove_dir_all(&cfg.corpus).with_context(|| format!("clearing {}", cfg.corpus.display()))?;
    }
    write_dataset(&cfg.corpus, &samples, &standard_vocabulary())?;
    println!("wrote {} samples to {}", samples.len(), cfg.corpus.display());
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    resume: Option<&Path>,
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    sets: &[String],
) -> Result<()> {
    let mut cfg = resolve(config, sets)?;
    if let Some(c) = corpus {
        cfg.corpus = c;
    }
    if let Some(c) = checkpoint {
        cfg.checkpoint = c;
    }
    let (samples, vocab) = read_dataset(&cfg.corpus)?;
    // geometry and vocabulary come from the data
    let (h, w, c) = samples[0].dims();
    let model = &mut cfg.train.model;
    model.frame_height = h;
    model.frame_width = w;
    model.channels = c;
    model.vocab_size = vocab.len();
    print!("{}", cfg.header());
    let resume = resume.map(Checkpoint::load).transpose()?;
    let ckpt = train_with(&cfg.train, &samples, resume, |_| {})?;
    ckpt.save(&cfg.checkpoint)?;
    println!("saved checkpoint at step {} to {}", ckpt.step, cfg.checkpoint.display());
    Ok(())
}

/// Sample directories below `dir`, or `dir` itself when it is one.
fn sample_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if dir.join("frames.bin").exists() || dir.join("masks.bin").exists() || dir.join("frame_00000.pbm").exists() {
        return Ok(vec![(String::new(), dir.to_path_buf())]);
    }
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .filter(|(n, _)| n.starts_with("sample_"))
        .collect();
    out.sort();
    if out.is_empty() {
        bail!("{} holds no samples", dir.display());
    }
    Ok(out)
}

fn cmd_infer(checkpoint: &Path, video: &Path, out: &Path, threshold: f64, interval: Option<usize>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut header = RunConfig {
        train: ckpt.config.clone(),
        ..RunConfig::default()
    };
    header.output = out.to_path_buf();
    print!("{}", header.header());
    println!("# threshold = {threshold}");
    let model = ckpt.model()?;
    let interval = interval.unwrap_or(ckpt.config.model.interval);
    for (name, dir) in sample_dirs(video)? {
        let sample = read_sample(&dir)?;
        let results = infer_with(&sample, &model, interval, threshold)?;
        let dest = if name.is_empty() { out.to_path_buf() } else { out.join(&name) };
        save_predictions(&dest, &results)?;
        println!("segmented {} frames into {}", results.len(), dest.display());
    }
    Ok(())
}

fn masks_in(dir: &Path) -> Result<Vec<Vec<bool>>> {
    if dir.join("masks.bin").exists() {
        return Ok(decode_masks(&fs::read(dir.join("masks.bin"))?)?.0);
    }
    Ok(load_predictions(dir)?)
}

fn cmd_eval(pred: &Path, gt: &Path, csv: bool) -> Result<()> {
    let (p, g) = (sample_dirs(pred)?, sample_dirs(gt)?);
    let names = |v: &[(String, PathBuf)]| v.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    if names(&p) != names(&g) {
        bail!("prediction and ground-truth samples differ");
    }
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for ((name, pd), (_, gd)) in p.iter().zip(&g) {
        let (a, b) = (masks_in(pd)?, masks_in(gd)?);
        if a.len() != b.len() {
            bail!("sample {name:?}: {} predicted frames, {} ground-truth frames", a.len(), b.len());
        }
        preds.extend(a);
        gts.extend(b);
    }
    let report = evaluate(&preds, &gts)?;
    println!("# pred = {}", pred.display());
    println!("# gt = {}", gt.display());
    if csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_bench(frames: &[usize], tokens: usize, dim: usize, trials: usize, warmup: usize, out: Option<&Path>) -> Result<()> {
    let opts = BenchOptions {
        warmup,
        trials,
        ..BenchOptions::default()
    };
    let list: Vec<String> = frames.iter().map(usize::to_string).collect();
    println!("# frames_list = {}", list.join(","));
    println!("# tokens = {tokens}\n# dim = {dim}\n# trials = {trials}\n# warmup = {warmup}");
    let result = bench::run(frames, tokens, dim, &opts)?;
    let csv = result.to_csv();
    print!("{csv}");
    if let Some(p) = out {
        fs::write(p, &csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            count,
            seed,
            contrast,
            out,
            sets,
        } => cmd_gen(config.as_deref(), count, seed, contrast, out, &sets),
        Command::Train {
            config,
            resume,
            corpus,
            checkpoint,
            sets,
        } => cmd_train(config.as_deref(), resume.as_deref(), corpus, checkpoint, &sets),
        Command::Infer {
            checkpoint,
            video,
            out,
            threshold,
            interval,
        } => cmd_infer(&checkpoint, &video, &out, threshold, interval),
        Command::Eval { pred, gt, csv } => cmd_eval(&pred, &gt, csv),
        Command::Bench {
            frames_list,
            tokens,
            dim,
            trials,
            warmup,
            out,
        } => cmd_bench(&frames_list, tokens, dim, trials, warmup, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

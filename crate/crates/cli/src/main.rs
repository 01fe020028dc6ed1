//! `img`: synthesize data, train, evaluate, sweep audio noise and render reports.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 training
//! divergence, 1 anything else.

mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use img_core::eval::{evaluate_checkpoint, noise_sweep_checkpoint};
use img_core::{Branch, Dataset, ImgError, LoadOptions, ModelConfig, Split, SyntheticSpec, TrainOptions, Trainer};

const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

#[derive(Debug, Parser)]
#[command(name = "img", version, about = "Audio-visual video moment retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// SyntheticSpec JSON; omitted keys take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split of a dataset directory.
    Train {
        /// ModelConfig JSON; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
        /// Overrides the config seed.
        #[arg(long, env = "IMG_SEED")]
        seed: Option<u64>,
    },
    /// Evaluate one branch on the held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "fusion")]
        branch: Branch,
        /// Write the full report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replace growing shares of audio with noise and track importance and mIoU.
    NoiseSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1.0")]
        fractions: Vec<f64>,
        /// Write the sweep as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Noise seed; defaults to the checkpoint's config seed.
        #[arg(long, env = "IMG_SEED")]
        seed: Option<u64>,
    },
    /// Print an eval or sweep JSON as a table, optionally with SVG curves.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> img_core::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> img_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> ImgError {
    ImgError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A checkpoint argument may name the file or the directory holding it.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn synth(spec: Option<&Path>, out: &Path) -> img_core::Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    let corpus = img_core::generate_synthetic_dataset(&spec)?;
    corpus.save(out)?;
    write_json(&out.join("synthetic_spec.json"), &spec)?;
    println!(
        "wrote {} samples ({} test) to {}",
        spec.n_samples,
        spec.n_test(),
        out.display()
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, resume: bool, seed: Option<u64>) -> img_core::Result<()> {
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        if config.is_some() || seed.is_some() {
            log::warn!("resuming: configuration and seed come from {}", ckpt.display());
        }
        Trainer::load(&ckpt)?
    } else {
        let mut cfg = match config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Trainer::new(&cfg)?
    };
    let cfg = trainer.cfg().clone();
    let ds = Dataset::load(
        data,
        LoadOptions {
            max_frames: cfg.max_frames,
            max_tokens: cfg.max_tokens,
            read_audio: true,
        },
    )?;
    let train = ds.split(Split::Train);
    if let Some(s) = train.first() {
        let widths = (s.visual.ncols(), s.audio.as_ref().map_or(cfg.d_a, |a| a.ncols()), s.query.ncols());
        if widths != (cfg.d_v, cfg.d_a, cfg.d_q) {
            return Err(ImgError::Config(format!(
                "data widths (d_v, d_a, d_q) = {widths:?} but config expects {:?}",
                (cfg.d_v, cfg.d_a, cfg.d_q)
            )));
        }
    }
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        stop_at_step: None,
        checkpoint_each_epoch: true,
    };
    let summaries = trainer.run(&train, &opts)?;
    trainer.save(&ckpt)?;
    if let Some(last) = summaries.last() {
        println!(
            "trained {} epochs ({} steps) on {} samples; final loss {:.4}",
            last.epoch + 1,
            trainer.step,
            train.len(),
            last.mean_total
        );
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, branch: Branch, report: Option<&Path>) -> img_core::Result<()> {
    let r = evaluate_checkpoint(&checkpoint_path(ckpt), data, branch)?;
    print!("{}", render::eval_table(&r, Some(branch)));
    if let Some(p) = report {
        write_json(p, &r)?;
    }
    Ok(())
}

fn sweep(ckpt: &Path, data: &Path, fractions: &[f64], out: Option<&Path>, seed: Option<u64>) -> img_core::Result<()> {
    let ckpt = checkpoint_path(ckpt);
    let seed = match seed {
        Some(s) => s,
        None => Trainer::load(&ckpt)?.cfg().seed,
    };
    let s = noise_sweep_checkpoint(&ckpt, data, fractions, seed)?;
    print!("{}", render::sweep_table(&s));
    if let Some(p) = out {
        write_json(p, &s)?;
    }
    Ok(())
}

fn report(input: &Path, svg: Option<&Path>) -> img_core::Result<()> {
    let doc: render::Document = read_json(input)?;
    match &doc {
        render::Document::Eval(r) => print!("{}", render::eval_table(r, None)),
        render::Document::Sweep(s) => print!("{}", render::sweep_table(s)),
    }
    if let Some(dir) = svg {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for p in render::write_svgs(&doc, dir)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> img_core::Result<()> {
    match cli.command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            seed,
        } => train(config.as_deref(), &data, &out, resume, seed),
        Command::Eval {
            ckpt,
            data,
            branch,
            report: path,
        } => eval(&ckpt, &data, branch, path.as_deref()),
        Command::NoiseSweep {
            ckpt,
            data,
            fractions,
            out,
            seed,
        } => sweep(&ckpt, &data, &fractions, out.as_deref(), seed),
        Command::Report { input, svg } => report(&input, svg.as_deref()),
    }
}

fn exit_code(e: &ImgError) -> u8 {
    match e {
        ImgError::Divergence(_) => 3,
        e if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

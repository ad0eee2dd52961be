use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use afpa_core::afpa::{export_pattern, suffixed};
use afpa_core::corpus::{build_corpus, read_dataset, tensor_write, AnomalyRecipe, Split};
use afpa_core::dsp::load_wav;
use afpa_core::metrics::{report, write_scores};
use afpa_core::{checkpoint, eval, trainer, Error, RunConfig};

/// Anomalous sound detection with attention over frequency bins.
#[derive(Parser)]
#[command(name = "afpa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; unspecified settings keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the corpus seed (synth) or the training seed (train).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic machine-sound corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Target directory.
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty target directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on the normal clips of a corpus and write a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus root.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Train the backbone without the attention stage.
        #[arg(long)]
        no_afpa: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the test clips and write scores plus a metric report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for scores.csv, report.csv and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the attention maps and the enhanced feature of one clip.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Output prefix; files get `.pattern.aft`, `.pattern.csv` and
        /// `.enhanced.aft` appended.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> afpa_core::Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn announce(cfg: &RunConfig) {
    println!("# effective configuration (sha256 {})", cfg.hash());
    print!("{}", cfg.to_toml());
    println!("# end of configuration");
}

fn write_file(path: &Path, contents: &str) -> afpa_core::Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn synth(common: &Common, out: &Path, force: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.corpus.seed = seed;
    }
    cfg.validate()?;
    announce(&cfg);
    let manifest = build_corpus(&cfg.corpus, cfg.dsp.sample_rate, cfg.dsp.clip_len(), out, force)?;
    let mut counts: BTreeMap<(&str, &str), [usize; 3]> = BTreeMap::new();
    for e in &manifest {
        let slot = Split::ALL.iter().position(|s| *s == e.split).expect("known split");
        counts.entry((&e.machine_type, &e.machine_id)).or_default()[slot] += 1;
    }
    println!("{:<10} {:<8} {:>12} {:>12} {:>15}", "type", "id", "train_normal", "test_normal", "test_anomalous");
    for ((t, id), [a, b, c]) in &counts {
        println!("{t:<10} {id:<8} {a:>12} {b:>12} {c:>15}");
    }
    println!("{} clips written to {}", manifest.len(), out.display());
    Ok(())
}

fn train(common: &Common, data: &Path, out: &Path, no_afpa: bool, epochs: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(epochs) = epochs {
        cfg.trainer.epochs = epochs;
    }
    if no_afpa {
        cfg.trainer.use_afpa = false;
    }
    cfg.validate()?;
    announce(&cfg);
    let dataset = read_dataset(data)?;
    let outcome = trainer::train(&dataset, &cfg.architecture(), &cfg.trainer, |row| match row.validation_loss {
        Some(v) => println!("epoch {:>3}  loss {:.6}  val {:.6}  lr {:.3e}", row.epoch, row.mean_loss, v, row.lr),
        None => println!("epoch {:>3}  loss {:.6}  lr {:.3e}", row.epoch, row.mean_loss, row.lr),
    })?;
    checkpoint::save(&outcome.model, out, &cfg.hash())?;
    write_file(&out.join("train_log.csv"), &trainer::log_csv(&outcome.log))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn evaluate(common: &Common, ckpt: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    announce(&cfg);
    let (model, manifest) = checkpoint::load(ckpt)?;
    let dataset = read_dataset(data)?;
    let scores = eval::score_dataset(&model, &dataset)?;
    let metrics = report(&scores, cfg.metrics.max_fpr)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_scores(out.join("scores.csv"), &scores)?;
    write_file(&out.join("report.csv"), &metrics.to_csv())?;
    let table = format!(
        "checkpoint config sha256 {}\nevaluation config sha256 {}\n\n{}",
        manifest.config_hash,
        cfg.hash(),
        metrics.to_table()
    );
    write_file(&out.join("report.txt"), &table)?;
    print!("{}", metrics.to_table());
    Ok(())
}

fn attention(common: &Common, ckpt: &Path, wav: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    announce(&cfg);
    let (model, _) = checkpoint::load(ckpt)?;
    if !model.arch.use_afpa {
        return Err(Error::Config(format!(
            "{} was trained with --no-afpa and has no attention stage to export",
            ckpt.display()
        ))
        .into());
    }
    let wave = load_wav(wav)?;
    let inference = model.infer(&wave)?;
    let (Some(pattern), Some(enhanced)) = (inference.pattern, inference.enhanced) else {
        bail!("model produced no attention output");
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    export_pattern(&pattern, out)?;
    tensor_write(suffixed(out, ".enhanced.aft"), &[("enhanced".to_string(), enhanced)])?;
    if let AnomalyRecipe::NarrowbandHfTone { f_anom, .. } = cfg.corpus.anomaly {
        let fb = model.filterbank();
        println!(
            "pooled attention column mass over the {f_anom} Hz band: {:.6} (uniform {:.6})",
            pattern.column_mass(&fb.bins_covering(f_anom)),
            1.0 / fb.n_mels() as f64
        );
    }
    println!("wrote {}.pattern.aft, .pattern.csv and .enhanced.aft", out.display());
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("AFPA_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("AFPA_THREADS must be a positive integer, got {value:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Format { .. } | Error::Data { .. } | Error::Corruption { .. } | Error::Version { .. }) => 3,
        Some(Error::NumericAbort(_) | Error::NumericDomain { .. }) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { common, out, force } => synth(&common, &out, force),
        Command::Train {
            common,
            data,
            out,
            no_afpa,
            epochs,
        } => train(&common, &data, &out, no_afpa, epochs),
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => evaluate(&common, &checkpoint, &data, &out),
        Command::Attention {
            common,
            checkpoint,
            wav,
            out,
        } => attention(&common, &checkpoint, &wav, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use augsub::analysis::{
    check_objective_gradients, compare_runs, emit_metrics, flop_estimate, load_metrics, GradCheckSetup,
};
use augsub::checkpoint;
use augsub::data::{gen_synth, Batch, Dataset, SynthSpec};
use augsub::masking::{MaskSpec, MaskStrategy};
use augsub::objective::probe_losses;
use augsub::rng::{Purpose, StreamKey};
use augsub::trainer::{evaluate, TrainConfig, Trainer};
use augsub::vit::Vit;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "augsub", version, about = "Masked sub-model training on a small vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a JSON config; writes metrics.csv and checkpoint.bin under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Probe losses and accuracy of a checkpoint on a record file.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Mask ratio of the second probe loss.
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the full objective's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute of a token-removal sub forward relative to the main forward.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        keep_ratio: f64,
    },
    /// Write a synthetic dataset as CIFAR-10 style records.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Noise stream; splits of one seed share class patterns.
        #[arg(long, default_value_t = 0)]
        split: u64,
    },
    /// Per-epoch differences between two metrics files (b minus a).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Failure attributable to the invocation rather than the run.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Usage(e.into()))
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("AUGSUB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(anyhow::anyhow!(
                "AUGSUB_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn read_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(usage)?;
    TrainConfig::from_json(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(usage)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = threads()?;
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(usage)?;
            let mut trainer = Trainer::from_config(cfg)
                .map_err(|e| if e.is_usage() { usage(e) } else { e.into() })?
                .with_threads(threads);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut records = Vec::new();
            for _ in 0..trainer.config().epochs {
                let r = trainer.train_epoch()?;
                println!(
                    "epoch {:>3}  step {:>6}  loss {:.4}  main {:.4}  sub {:.4}  eq1 {:.4}  eq2 {:.4}  train {:.4}  eval {:.4}",
                    r.epoch, r.step, r.loss_total, r.loss_main, r.loss_sub, r.probe_eq1, r.probe_eq2, r.train_acc, r.eval_acc
                );
                records.push(r);
            }
            emit_metrics(&records, &out.join("metrics.csv"))?;
            let crc = checkpoint::save(&out.join("checkpoint.bin"), trainer.vit().config(), trainer.params())?;
            println!("checkpoint crc32 {crc:08x}");
        }
        Command::Probe {
            checkpoint: path,
            data,
            ratio,
            seed,
        } => {
            let mask = MaskSpec::new(MaskStrategy::TokenRemoval, ratio, 0, StreamKey::new(seed, Purpose::Probe, 0))
                .map_err(usage)?;
            if ratio >= 1.0 {
                return Err(usage(anyhow::anyhow!("--ratio must be below 1")));
            }
            let ckpt = checkpoint::load(&path)?;
            let vit = Vit::new(ckpt.config.clone())?;
            vit.check_store(&ckpt.params)?;
            let set = Dataset::load(&data, ckpt.config.image_size, ckpt.config.classes)?;
            if set.is_empty() {
                bail!("{} holds no records", data.display());
            }
            let (mut e1, mut e2) = (0.0, 0.0);
            let idx: Vec<usize> = (0..set.len()).collect();
            for (c, chunk) in idx.chunks(128).enumerate() {
                let batch: Batch<f32> = set.batch(chunk);
                let m = MaskSpec {
                    stream: mask.stream.with_lane(c as u64),
                    ..mask
                };
                let (a, b) = probe_losses(&vit, &ckpt.params, &batch, &m)?;
                e1 += a * chunk.len() as f64;
                e2 += b * chunk.len() as f64;
            }
            let n = set.len() as f64;
            let acc = evaluate(&vit, &ckpt.params, &set, 256, threads)?;
            println!("records    {}", set.len());
            println!("probe_eq1  {:.6}", e1 / n);
            println!("probe_eq2  {:.6}", e2 / n);
            println!("accuracy   {acc:.6}");
        }
        Command::Gradcheck { depth, dim, seed } => {
            if dim == 0 || dim % 2 != 0 {
                return Err(usage(anyhow::anyhow!("--dim must be a positive even number")));
            }
            let setup = GradCheckSetup {
                depth,
                dim,
                seed,
                ..GradCheckSetup::default()
            };
            let (report, count) = check_objective_gradients(&setup)?;
            println!("parameters        {count}");
            println!("coordinates       {}", report.coordinates);
            println!("loss              {:.12}", report.value);
            println!("max relative err  {:.3e}", report.max_rel_error);
            if !(report.max_rel_error <= GRADCHECK_TOLERANCE) {
                bail!(
                    "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    report.max_rel_error
                );
            }
        }
        Command::Flops { config, keep_ratio } => {
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => TrainConfig::default(),
            };
            let b = flop_estimate(&cfg.model, keep_ratio).map_err(usage)?;
            println!("kept tokens       {}", b.kept_tokens);
            println!("main MACs/sample  {}", b.flops_main);
            println!("sub MACs/sample   {}", b.flops_sub);
            println!("ratio             {:.6}", b.ratio);
            println!("linear ratio      {:.6}", b.linear_ratio);
        }
        Command::GenData {
            seed,
            out,
            per_class,
            classes,
            image_size,
            split,
        } => {
            let spec = SynthSpec {
                split,
                ..SynthSpec::new(seed, per_class, classes, image_size)
            };
            let set = gen_synth(&spec).map_err(usage)?;
            set.save(&out)?;
            println!("wrote {} records to {}", set.len(), out.display());
        }
        Command::Compare { a, b, json } => {
            let ra = load_metrics(&a)?;
            let rb = load_metrics(&b)?;
            let c = compare_runs(&ra, &rb)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&c)?);
            } else {
                println!("{c}");
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<augsub::Error>() {
        Some(inner) if inner.is_usage() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
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
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use visreformer::config::{DataConfig, DataSource, Precision, RunConfig};
use visreformer::failure::{classify, usage, ExitStatus, InvariantFailure};
use visreformer::runlog::{write_json, Manifest, MonotonicClock};
use visreformer::sweep::{emit_reports, run_sweep, BenchSpec};
use visreformer::{session, verify};
use visreformer_core::bench::matched_capacity_check;
use visreformer_core::model::{ModelConfig, Variant, VisionModel};

#[derive(Parser)]
#[command(name = "visreformer", version, about = "Vision transformers with LSH attention and reversible blocks")]
struct Cli {
    /// Output directory for manifests, logs and reports.
    #[arg(long, global = true, env = "VISREFORMER_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check attention, reversible-block and gradient invariants.
    Verify {
        #[arg(long, default_value = "all", value_parser = ["attention", "revblocks", "gradients", "all"])]
        scope: String,
        /// Deliberately break an invariant to exercise the harness.
        #[cfg(feature = "fault-injection")]
        #[arg(long, value_parser = ["broken-inverse"])]
        inject: Option<String>,
    },
    /// Sweep dense and LSH attention over sequence lengths.
    Bench(BenchArgs),
    /// Train one variant.
    Train {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted override such as `lr=0` or `model.depth=2`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on a validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Report parameter counts, token count and the capacity match of a preset.
    Inspect {
        #[arg(long, default_value = "cifar10")]
        preset: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "dense,lsh")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    model_dim: usize,
    #[arg(long, default_value_t = 16)]
    bucket_size: usize,
    #[arg(long, default_value_t = 2)]
    n_rounds: usize,
    #[arg(long, default_value_t = 1)]
    lookback: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value = "f32", value_parser = ["f32", "f64"])]
    precision: String,
    /// Skip points whose memory estimate exceeds this many floats.
    #[arg(long)]
    memory_budget: Option<f64>,
    /// Count scores without timing.
    #[arg(long)]
    counts_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value = "synthetic", value_parser = ["synthetic", "cifar10"])]
    source: String,
    /// CIFAR-10 batch directory.
    #[arg(long)]
    data_path: Option<String>,
    #[arg(long)]
    subset_per_class: Option<usize>,
}

impl DataArgs {
    fn config(&self) -> DataConfig {
        DataConfig {
            source: if self.source == "cifar10" { DataSource::Cifar10 } else { DataSource::Synthetic },
            path: self.data_path.clone(),
            subset_per_class: self.subset_per_class,
            ..DataConfig::default()
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>, verb: &str) -> Result<PathBuf> {
    let dir = cli_out.clone().unwrap_or_else(|| Path::new("runs").join(verb));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Verify {
            scope,
            #[cfg(feature = "fault-injection")]
            inject,
        } => {
            #[cfg(feature = "fault-injection")]
            if let Some(f) = inject.as_deref().and_then(verify::faults::parse) {
                verify::faults::inject(f);
            }
            let scope = verify::Scope::parse(&scope).ok_or_else(|| usage(format!("unknown scope {scope}")))?;
            let dir = out_dir(&cli.out, "verify")?;
            let mut manifest = Manifest::new("verify", args, 0, serde_json::json!({ "scope": scope }));
            manifest.outputs = vec!["verify.json".into()];
            manifest.write(&dir)?;
            let report = verify::run(scope);
            write_json(&dir.join("verify.json"), &report)?;
            for c in &report.checks {
                let measured = c.measured.map(|m| format!(" measured={m:.3e}")).unwrap_or_default();
                let tol = c.tolerance.map(|t| format!(" tolerance={t:.0e}")).unwrap_or_default();
                println!("{} {}{measured}{tol} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !report.passed {
                return Err(InvariantFailure(report.failures()).into());
            }
            Ok(())
        }
        Command::Bench(b) => {
            let variants = b.variants.iter().map(|v| Variant::parse(v).map_err(|e| usage(e.to_string()))).collect::<Result<Vec<_>>>()?;
            let spec = BenchSpec {
                n_values: b.n,
                variants,
                trials: b.trials,
                warmup: b.warmup,
                heads: b.heads,
                model_dim: b.model_dim,
                bucket_size: b.bucket_size,
                n_rounds: b.n_rounds,
                lookback: b.lookback,
                batch: b.batch,
                precision: if b.precision == "f64" { Precision::F64 } else { Precision::F32 },
                memory_budget: b.memory_budget,
                counts_only: b.counts_only,
                seed: b.seed,
            };
            let dir = out_dir(&cli.out, "bench")?;
            let mut manifest = Manifest::new("bench", args, spec.seed, serde_json::to_value(&spec)?);
            manifest.write(&dir)?;
            let outcome = run_sweep(&spec, &MonotonicClock::new())?;
            manifest.outputs = emit_reports(&outcome, &spec, &dir)?;
            manifest.write(&dir)?;
            for f in &outcome.fits {
                println!("{} {:?} exponent={:.3} r2={:.4} points={}", f.variant, f.metric, f.exponent, f.r2, f.points);
            }
            Ok(())
        }
        Command::Train { config, set } => {
            let cfg = RunConfig::load(config.as_deref(), &set)?;
            let dir = out_dir(&cli.out, "train")?;
            let summary = session::run_train(&cfg, &dir, args)?;
            println!("{} parameters, {} epochs", summary.param_count, cfg.epochs);
            for e in &summary.epochs {
                let val = e.val.as_ref().map(|v| format!(" val_acc={:.4} val_macro_f1={:.4}", v.accuracy, v.macro_f1)).unwrap_or_default();
                println!("epoch {} loss={:.4} acc={:.4}{val}", e.epoch, e.train.loss.unwrap_or(f64::NAN), e.train.accuracy);
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, seed, batch } => {
            let dir = out_dir(&cli.out, "eval")?;
            let r = session::run_eval(&checkpoint, &data.config(), seed, batch, &dir, args)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::Inspect { preset, classes } => {
            let dir = out_dir(&cli.out, "inspect")?;
            let mut manifest = Manifest::new("inspect", args, 0, serde_json::json!({ "preset": preset, "classes": classes }));
            manifest.outputs = vec!["inspect.json".into()];
            manifest.write(&dir)?;
            let build = |v: Variant| -> Result<ModelConfig> {
                let mut c = ModelConfig::preset(&preset, v).map_err(|e| usage(e.to_string()))?;
                c.n_classes = classes;
                c.validate()?;
                Ok(c)
            };
            let (dense, lsh) = (build(Variant::Dense)?, build(Variant::Lsh)?);
            let report = matched_capacity_check(&dense, &lsh)?;
            let doc = serde_json::json!({
                "preset": preset,
                "capacity": report,
                "dense_params": VisionModel::<f32>::build(dense, 0)?.param_count(),
                "lsh_params": VisionModel::<f32>::build(lsh, 0)?.param_count(),
            });
            write_json(&dir.join("inspect.json"), &doc)?;
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { ExitStatus::Usage } else { ExitStatus::Success };
            return ExitCode::from(code.code() as u8);
        }
    };
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e).code() as u8)
        }
    }
}

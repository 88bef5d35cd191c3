use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use incongruity::commands::{
    cmd_ablate, cmd_dump_attention, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, median_by_f1,
};
use incongruity::config::load_config;
use incongruity::report::{gradcheck_table, metrics_json, metrics_table};
use incongruity::{CliError, CliResult};
use incongruity_core::data::GeneratorConfig;
use incongruity_core::model::Variant;
use incongruity_core::train::TrainConfig;

#[derive(Parser)]
#[command(name = "incongruity", version, about = "Multimodal incongruity classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split into train/val/test.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = GeneratorConfig::default().n_samples)]
        n: usize,
        #[arg(long, default_value_t = GeneratorConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = GeneratorConfig::default().attribute_noise)]
        attr_noise: f64,
        #[arg(long, default_value_t = GeneratorConfig::default().pixel_noise)]
        pixel_noise: f64,
        /// Filler tokens added to every text.
        #[arg(long, default_value_t = GeneratorConfig::default().text_noise_tokens)]
        text_noise: usize,
        #[arg(long, default_value_t = GeneratorConfig::default().image_size)]
        image_size: usize,
        #[arg(long, default_value_t = GeneratorConfig::default().vocab_size)]
        vocab_size: usize,
    },
    /// Train one model, keeping the epoch with the best validation F1.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, no-film, no-coatt, no-cls, text-only or image-only.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        layer_tap: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one JSONL file and print metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Build the model from this config instead of the checkpoint's own.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every op and the toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write per-sample attention weights and FiLM activations as JSONL.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several variants over several seeds and print median test metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no-film,no-coatt,no-cls")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "7,8,9")]
        seeds: Vec<u64>,
        #[arg(long)]
        quiet: bool,
    },
}

fn base_config(path: Option<&PathBuf>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(TrainConfig::default()),
    }
}

fn parse_variant(name: &str) -> CliResult<Variant> {
    Variant::parse(name).map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    match cli.command {
        Command::Gen {
            out,
            n,
            seed,
            attr_noise,
            pixel_noise,
            text_noise,
            image_size,
            vocab_size,
        } => {
            let cfg = GeneratorConfig {
                n_samples: n,
                vocab_size,
                text_noise_tokens: text_noise,
                attribute_noise: attr_noise,
                pixel_noise,
                image_size,
                seed,
                ..GeneratorConfig::default()
            };
            let [tr, va, te] = cmd_gen(&out, &cfg)?;
            println!("wrote {} (train {tr}, val {va}, test {te})", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            layer_tap,
            seed,
            quiet,
        } => {
            let mut cfg = base_config(config.as_ref())?;
            if let Some(v) = variant {
                cfg.model.variant = parse_variant(&v)?;
            }
            if let Some(tap) = layer_tap {
                cfg.model.layer_tap = tap;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = cmd_train(&cfg, &data, &out, !quiet)?;
            let test = run.record.test.as_ref().expect("test metrics");
            println!(
                "best epoch {} val f1 {:.4} test f1 {:.4}; record {}",
                run.record.best_epoch,
                run.record.best_val.f1,
                test.f1,
                run.record_path.display()
            );
        }
        Command::Eval { checkpoint, data, config } => {
            let cfg = config.as_deref().map(load_config).transpose()?;
            let report = cmd_eval(&checkpoint, &data, cfg)?;
            println!("{}", serde_json::to_string_pretty(&metrics_json(&report)).expect("json"));
        }
        Command::Gradcheck { tol, seed } => {
            let (entries, ok) = cmd_gradcheck(tol, seed)?;
            print!("{}", gradcheck_table(&entries, tol));
            if !ok {
                eprintln!("gradient check failed at tolerance {tol:e}");
                return Ok(ExitCode::from(4));
            }
        }
        Command::DumpAttention { checkpoint, data, out } => {
            let n = cmd_dump_attention(&checkpoint, &data, &out)?;
            println!("wrote {n} traces to {}", out.display());
        }
        Command::Ablate {
            config,
            data,
            out,
            variants,
            seeds,
            quiet,
        } => {
            let cfg = base_config(config.as_ref())?;
            let variants = variants.iter().map(|v| parse_variant(v)).collect::<CliResult<Vec<_>>>()?;
            let results = cmd_ablate(&cfg, &data, &out, &variants, &seeds, !quiet)?;
            let rows: Vec<_> = results
                .iter()
                .filter_map(|(v, reports)| median_by_f1(reports).map(|m| (v.name().to_string(), m)))
                .collect();
            println!("median test metrics over seeds {seeds:?}");
            print!("{}", metrics_table(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

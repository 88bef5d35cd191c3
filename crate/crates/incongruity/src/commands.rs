//! The subcommands, as library functions returning their results.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use incongruity_core::data::{encode_all, generate_synthetic, split_dataset, synthetic_vocabulary, GeneratorConfig};
use incongruity_core::data::MultimodalSample;
use incongruity_core::gradcheck::{run_suite, GradcheckEntry};
use incongruity_core::metrics::MetricsReport;
use incongruity_core::model::{EncodedSample, ModelConfig, Variant};
use incongruity_core::text::Vocabulary;
use incongruity_core::train::{evaluate, train, EpochLog, RunRecord, TrainConfig, TrainHooks};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{read_jsonl, read_vocabulary, write_jsonl, write_vocabulary};
use crate::error::{CliError, CliResult};
use crate::report::{epoch_line, run_record_json};
use crate::trace::trace_sample;

pub const SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);
pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];
pub const VOCAB_FILE: &str = "vocab.txt";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Writes `train/val/test.jsonl` and `vocab.txt` under `out`; returns the split sizes.
pub fn cmd_gen(out: &Path, cfg: &GeneratorConfig) -> CliResult<[usize; 3]> {
    cfg.validate()?;
    let samples = generate_synthetic(cfg)?;
    let (train, val, test) = split_dataset(samples, SPLIT, cfg.seed)?;
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    for (name, part) in SPLIT_FILES.iter().zip([&train, &val, &test]) {
        write_jsonl(&out.join(name), part)?;
    }
    write_vocabulary(&out.join(VOCAB_FILE), &synthetic_vocabulary(cfg.vocab_size)?)?;
    Ok([train.len(), val.len(), test.len()])
}

pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let vocab = read_vocabulary(&dir.join(VOCAB_FILE))?;
    let [train, val, test] = SPLIT_FILES.map(|name| read_jsonl(&dir.join(name)));
    Ok(Dataset {
        vocab,
        train: train?,
        val: val?,
        test: test?,
    })
}

pub fn encode(samples: &[MultimodalSample], vocab: &Vocabulary, cfg: &ModelConfig) -> CliResult<Vec<EncodedSample>> {
    if vocab.len() > cfg.vocab_size {
        return Err(CliError::Config(format!(
            "vocabulary has {} tokens but vocab_size is {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    encode_all(samples, vocab, cfg).map_err(|e| CliError::Data(e.to_string()))
}

/// Wall-clock timing, with optional per-epoch progress on stderr.
pub struct WallClock {
    start: Instant,
    pub verbose: bool,
}

impl WallClock {
    pub fn new(verbose: bool) -> Self {
        Self {
            start: Instant::now(),
            verbose,
        }
    }
}

impl TrainHooks for WallClock {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn epoch_end(&mut self, log: &EpochLog) {
        if self.verbose {
            eprintln!("{}", epoch_line(log));
        }
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub checkpoint: PathBuf,
    pub record_path: PathBuf,
}

/// Trains on `data/train.jsonl`, selects on `val`, reports on `test`, then
/// writes `out/checkpoint/` and `out/run_record.json`.
pub fn cmd_train(config: &TrainConfig, data: &Path, out: &Path, verbose: bool) -> CliResult<TrainOutcome> {
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let ds = load_dataset(data)?;
    let [train_set, val_set, test_set] =
        [&ds.train, &ds.val, &ds.test].map(|part| encode(part, &ds.vocab, &config.model));
    let (train_set, val_set, test_set) = (train_set?, val_set?, test_set?);
    let (model, record) = train(config, &train_set, &val_set, Some(&test_set), &mut WallClock::new(verbose))?;

    let checkpoint = out.join(CHECKPOINT_DIR);
    save_checkpoint(&checkpoint, &model, config, &ds.vocab)?;
    let record_path = out.join(RUN_RECORD_FILE);
    let json = run_record_json(&record, config.model.variant.name(), config.model.layer_tap);
    let text = serde_json::to_string_pretty(&json).expect("record serializes");
    fs::write(&record_path, text + "\n").map_err(CliError::io(&record_path))?;
    Ok(TrainOutcome {
        record,
        checkpoint,
        record_path,
    })
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, config: Option<TrainConfig>) -> CliResult<MetricsReport> {
    let ckpt = load_checkpoint(checkpoint, config)?;
    let samples = encode(&read_jsonl(data)?, &ckpt.vocab, ckpt.model.config())?;
    Ok(evaluate(&ckpt.model, &samples)?.0)
}

/// Returns the suite entries and whether all of them pass at `tol`.
pub fn cmd_gradcheck(tol: f64, seed: u64) -> CliResult<(Vec<GradcheckEntry>, bool)> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(CliError::Config(format!("tolerance must be positive, got {tol}")));
    }
    let entries = run_suite(seed)?;
    let ok = entries.iter().all(|e| e.passes(tol));
    Ok((entries, ok))
}

/// Writes one trace object per line to `out`; returns the sample count.
pub fn cmd_dump_attention(checkpoint: &Path, data: &Path, out: &Path) -> CliResult<usize> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let raw = read_jsonl(data)?;
    let samples = encode(&raw, &ckpt.vocab, ckpt.model.config())?;
    let file = fs::File::create(out).map_err(CliError::io(out))?;
    let mut w = BufWriter::new(file);
    for (r, s) in raw.iter().zip(&samples) {
        let value = trace_sample(&ckpt.model, &ckpt.vocab, r, s)?;
        writeln!(w, "{value}").map_err(CliError::io(out))?;
    }
    w.flush().map_err(CliError::io(out))?;
    Ok(samples.len())
}

/// One training run per `(variant, seed)`, each under `out/<variant>-s<seed>/`.
/// Returns the test report of every run, grouped by variant.
pub fn cmd_ablate(
    base: &TrainConfig,
    data: &Path,
    out: &Path,
    variants: &[Variant],
    seeds: &[u64],
    verbose: bool,
) -> CliResult<Vec<(Variant, Vec<MetricsReport>)>> {
    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.variant = variant;
            cfg.seed = seed;
            if verbose {
                eprintln!("{} seed {seed}", variant.name());
            }
            let run = cmd_train(&cfg, data, &out.join(format!("{}-s{seed}", variant.name())), verbose)?;
            reports.push(run.record.test.expect("training reports test metrics"));
        }
        results.push((variant, reports));
    }
    Ok(results)
}

/// Median by F1 (lower middle for an even count).
pub fn median_by_f1(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let mut sorted = reports.to_vec();
    sorted.sort_by(|a, b| a.f1.total_cmp(&b.f1));
    sorted.get(sorted.len().saturating_sub(1) / 2).cloned()
}

//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every [`TrainConfig`] field,
//! including the model dimensions, has a key; unknown or repeated keys are
//! errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use incongruity_core::model::Variant;
use incongruity_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

pub const KEYS: &[&str] = &[
    "film_lr",
    "encoder_lr",
    "coattention_lr",
    "batch_size",
    "weight_decay",
    "clip_norm",
    "epochs",
    "seed",
    "variant",
    "vocab_size",
    "d_model",
    "num_layers",
    "num_heads",
    "layer_tap",
    "max_len",
    "max_attributes",
    "gru_embed_dim",
    "gru_hidden",
    "channels",
    "num_blocks",
    "q_film_dim",
    "dropout",
];

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("line {line}: cannot parse {key} = {value:?}")))
}

/// Applies `key = value` lines on top of `base`.
pub fn parse_config(text: &str, base: TrainConfig) -> CliResult<TrainConfig> {
    let mut cfg = base;
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(CliError::Config(format!("line {line}: expected `key = value`, got {content:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(CliError::Config(format!("line {line}: {key} given twice")));
        }
        let m = &mut cfg.model;
        match key {
            "film_lr" => cfg.film_lr = parse(line, key, value)?,
            "encoder_lr" => cfg.encoder_lr = parse(line, key, value)?,
            "coattention_lr" => cfg.coattention_lr = parse(line, key, value)?,
            "batch_size" => cfg.batch_size = parse(line, key, value)?,
            "weight_decay" => cfg.weight_decay = parse(line, key, value)?,
            "clip_norm" => cfg.clip_norm = parse(line, key, value)?,
            "epochs" => cfg.epochs = parse(line, key, value)?,
            "seed" => cfg.seed = parse(line, key, value)?,
            "variant" => {
                m.variant = Variant::parse(value).map_err(|e| CliError::Config(format!("line {line}: {e}")))?
            }
            "vocab_size" => m.vocab_size = parse(line, key, value)?,
            "d_model" => m.d_model = parse(line, key, value)?,
            "num_layers" => m.num_layers = parse(line, key, value)?,
            "num_heads" => m.num_heads = parse(line, key, value)?,
            "layer_tap" => m.layer_tap = parse(line, key, value)?,
            "max_len" => m.max_len = parse(line, key, value)?,
            "max_attributes" => m.max_attributes = parse(line, key, value)?,
            "gru_embed_dim" => m.gru_embed_dim = parse(line, key, value)?,
            "gru_hidden" => m.gru_hidden = parse(line, key, value)?,
            "channels" => m.channels = parse(line, key, value)?,
            "num_blocks" => m.num_blocks = parse(line, key, value)?,
            "q_film_dim" => m.q_film_dim = parse(line, key, value)?,
            "dropout" => m.dropout = parse(line, key, value)?,
            other => return Err(CliError::Config(format!("line {line}: unknown key {other:?}"))),
        }
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_config(&text, TrainConfig::default())
}

/// Renders every key, preceded by the learning-rate group assignment.
pub fn render_config(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let mut out = String::new();
    out.push_str("# learning-rate groups:\n");
    out.push_str("#   film_lr        GRU, its embeddings, FiLM projection, conv stem, blocks, visual head\n");
    out.push_str("#   encoder_lr     encoder embedding tables and layers\n");
    out.push_str("#   coattention_lr co-attention W and the fusion head\n");
    let pairs: [(&str, String); 22] = [
        ("film_lr", format!("{:e}", cfg.film_lr)),
        ("encoder_lr", format!("{:e}", cfg.encoder_lr)),
        ("coattention_lr", format!("{:e}", cfg.coattention_lr)),
        ("batch_size", cfg.batch_size.to_string()),
        ("weight_decay", format!("{:e}", cfg.weight_decay)),
        ("clip_norm", cfg.clip_norm.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("seed", cfg.seed.to_string()),
        ("variant", m.variant.name().to_string()),
        ("vocab_size", m.vocab_size.to_string()),
        ("d_model", m.d_model.to_string()),
        ("num_layers", m.num_layers.to_string()),
        ("num_heads", m.num_heads.to_string()),
        ("layer_tap", m.layer_tap.to_string()),
        ("max_len", m.max_len.to_string()),
        ("max_attributes", m.max_attributes.to_string()),
        ("gru_embed_dim", m.gru_embed_dim.to_string()),
        ("gru_hidden", m.gru_hidden.to_string()),
        ("channels", m.channels.to_string()),
        ("num_blocks", m.num_blocks.to_string()),
        ("q_film_dim", m.q_film_dim.to_string()),
        ("dropout", m.dropout.to_string()),
    ];
    debug_assert_eq!(pairs.len(), KEYS.len());
    for (key, value) in pairs {
        let _ = writeln!(out, "{key} = {value}");
    }
    out
}

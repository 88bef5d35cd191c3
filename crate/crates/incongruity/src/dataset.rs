//! JSONL datasets and vocabulary files.
//!
//! One sample per line:
//! `{"id", "text", "attributes", "image": {"shape", "data"}, "label"}` where
//! `text` is space-joined tokens and `data` is base64 of the little-endian
//! `f32` raster.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use incongruity_core::data::{Image, MultimodalSample};
use incongruity_core::text::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    shape: [usize; 3],
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    text: String,
    attributes: Vec<String>,
    image: ImageRecord,
    label: u8,
}

fn encode_pixels(pixels: &[f32]) -> String {
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_pixels(data: &str) -> Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(data).map_err(|e| format!("image data is not base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("image data has {} bytes, not a multiple of 4", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn sample_to_json(sample: &MultimodalSample) -> String {
    let record = SampleRecord {
        id: sample.id.clone(),
        text: sample.text_tokens.join(" "),
        attributes: sample.attribute_tokens.clone(),
        image: ImageRecord {
            shape: sample.image.shape,
            data: encode_pixels(&sample.image.pixels),
        },
        label: sample.label,
    };
    serde_json::to_string(&record).expect("sample records always serialize")
}

pub fn sample_from_json(line: &str) -> Result<MultimodalSample, String> {
    let record: SampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let pixels = decode_pixels(&record.image.data)?;
    let image = Image::new(record.image.shape, pixels).map_err(|e| e.to_string())?;
    let sample = MultimodalSample {
        id: record.id,
        text_tokens: record.text.split_whitespace().map(str::to_string).collect(),
        attribute_tokens: record.attributes,
        image,
        label: record.label,
    };
    sample.validate().map_err(|e| e.to_string())?;
    Ok(sample)
}

pub fn write_jsonl(path: &Path, samples: &[MultimodalSample]) -> CliResult<()> {
    let file = fs::File::create(path).map_err(CliError::io(path))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        writeln!(out, "{}", sample_to_json(s)).map_err(CliError::io(path))?;
    }
    out.flush().map_err(CliError::io(path))
}

/// Reads every non-blank line; errors name the 1-based line number.
pub fn read_jsonl(path: &Path) -> CliResult<Vec<MultimodalSample>> {
    let file = fs::File::open(path).map_err(CliError::io(path))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = sample_from_json(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> CliResult<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

/// One token per line; the line index is the id.
pub fn read_vocabulary(path: &Path) -> CliResult<Vocabulary> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let tokens = text.lines().map(str::to_string).collect();
    Vocabulary::new(tokens).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

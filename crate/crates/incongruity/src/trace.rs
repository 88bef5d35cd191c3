//! Per-sample attention and FiLM activation traces.

use incongruity_core::autograd::Graph;
use incongruity_core::data::MultimodalSample;
use incongruity_core::model::{EncodedSample, Model};
use incongruity_core::nn::Mode;
use incongruity_core::text::Vocabulary;
use serde_json::{json, Value};

use crate::error::CliResult;

/// Mean over the spatial positions of each channel of a `1×C×H×W` map.
fn channel_means(values: &[f64], channels: usize) -> Vec<f64> {
    let plane = values.len() / channels;
    values
        .chunks_exact(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect()
}

/// One JSON object for `sample`. `alpha[j]` belongs to `attribute_positions[j]`,
/// which lists the framed attribute sequence including `[CLS]` and `[SEP]`.
pub fn trace_sample(
    model: &Model,
    vocab: &Vocabulary,
    raw: &MultimodalSample,
    sample: &EncodedSample,
) -> CliResult<Value> {
    let mut graph = Graph::new();
    let out = model.forward(&mut graph, sample, &mut Mode::Eval)?;
    let prediction = out.prediction(&graph);

    let positions: Vec<&str> = sample
        .attr_ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?"))
        .collect();
    let alpha = prediction.attention.as_ref().map(|a| a.alpha.clone());

    let blocks: Vec<Value> = match (&out.film, &out.visual) {
        (Some(film), Some(visual)) => film
            .blocks
            .iter()
            .zip(&visual.blocks)
            .map(|(&(gamma, beta), block)| {
                let gamma = graph.value(gamma).data().to_vec();
                let means = channel_means(graph.value(block.modulated).data(), gamma.len());
                json!({
                    "gamma": gamma,
                    "beta": graph.value(beta).data(),
                    "channel_means": means,
                })
            })
            .collect(),
        (None, Some(visual)) => visual
            .blocks
            .iter()
            .map(|block| {
                let shape = graph.value(block.modulated).shape();
                let means = channel_means(graph.value(block.modulated).data(), shape[1]);
                json!({ "gamma": null, "beta": null, "channel_means": means })
            })
            .collect(),
        _ => Vec::new(),
    };

    Ok(json!({
        "id": raw.id,
        "label": raw.label,
        "logit": prediction.logit,
        "probability": prediction.probability,
        "prediction": prediction.label,
        "attribute_positions": positions,
        "attribute_mask": sample.attr_mask,
        "alpha": alpha,
        "film_blocks": blocks,
    }))
}

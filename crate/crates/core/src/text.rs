//! Vocabulary and the small transformer encoder producing text features `P`,
//! attribute features `Q` and the `[CLS]` vector.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::model::ModelConfig;
use crate::nn::{self, dropout, join, Linear, Mode, ModelRng};
use crate::{Error, Result, Tensor};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;

/// Dense token ↔ id mapping whose first three entries are `[PAD]`, `[CLS]`, `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[PAD_ID] != PAD || tokens[CLS_ID] != CLS || tokens[SEP_ID] != SEP {
            return Err(Error::Config(format!(
                "vocabulary must start with {PAD}, {CLS}, {SEP}"
            )));
        }
        let mut index = BTreeMap::new();
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {token:?} at line {}", id + 1)));
            }
            if index.insert(token.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {token:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Splits on whitespace and maps every piece to its id.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }
}

/// Token, position and segment tables, each `·×d`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: (ParamId, ParamId),
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: (ParamId, ParamId),
}

/// Output of one encoder layer plus its per-head attention matrices
/// (before dropout).
pub struct LayerOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

/// Embedding tables and a post-norm transformer stack.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embeddings: EmbeddingTable,
    layers: Vec<EncoderLayer>,
    num_heads: usize,
    layer_tap: usize,
    d_model: usize,
    max_len: usize,
    vocab_size: usize,
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let gain = store.add(join(name, "gain"), Tensor::filled([d], 1.0), ParamGroup::Encoder);
    let bias = store.add(join(name, "bias"), Tensor::zeros([d]), ParamGroup::Encoder);
    (gain, bias)
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ModelRng) -> Result<Self> {
        let d = cfg.d_model;
        if cfg.num_heads == 0 || !d.is_multiple_of(cfg.num_heads) {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by num_heads {}",
                cfg.num_heads
            )));
        }
        if cfg.layer_tap == 0 || cfg.layer_tap > cfg.num_layers {
            return Err(Error::Config(format!(
                "layer_tap {} outside 1..={}",
                cfg.layer_tap, cfg.num_layers
            )));
        }
        let max_positions = cfg.max_len.max(cfg.max_attributes + 2);
        let embeddings = EmbeddingTable {
            token: store.add(
                "encoder.embed.token",
                nn::normal_tensor(&[cfg.vocab_size, d], 0.02, rng),
                ParamGroup::Encoder,
            ),
            position: store.add(
                "encoder.embed.position",
                nn::normal_tensor(&[max_positions, d], 0.02, rng),
                ParamGroup::Encoder,
            ),
            segment: store.add("encoder.embed.segment", Tensor::zeros([2, d]), ParamGroup::Encoder),
        };
        let group = ParamGroup::Encoder;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let name = format!("encoder.layer{}", l + 1);
                EncoderLayer {
                    query: Linear::new(store, &join(&name, "query"), d, d, group, rng),
                    key: Linear::new(store, &join(&name, "key"), d, d, group, rng),
                    value: Linear::new(store, &join(&name, "value"), d, d, group, rng),
                    output: Linear::new(store, &join(&name, "attn_out"), d, d, group, rng),
                    attn_norm: norm_params(store, &join(&name, "attn_norm"), d),
                    ff_in: Linear::new(store, &join(&name, "ff_in"), d, 4 * d, group, rng),
                    ff_out: Linear::new(store, &join(&name, "ff_out"), 4 * d, d, group, rng),
                    ff_norm: norm_params(store, &join(&name, "ff_norm"), d),
                }
            })
            .collect();
        Ok(Self {
            embeddings,
            layers,
            num_heads: cfg.num_heads,
            layer_tap: cfg.layer_tap,
            d_model: d,
            max_len: max_positions,
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_tap(&self) -> usize {
        self.layer_tap
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Row `i` is `token[ids[i]] + position[i] + segment[segment_id]`.
    pub fn embed_sequence(&self, graph: &mut Graph, store: &ParamStore, ids: &[usize], segment_id: usize) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds the position table ({})",
                ids.len(),
                self.max_len
            )));
        }
        if segment_id > 1 {
            return Err(Error::Contract(format!("segment id {segment_id} is not 0 or 1")));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::VocabularyId {
                id,
                size: self.vocab_size,
            });
        }
        let tokens = graph.param(store, self.embeddings.token);
        let positions = graph.param(store, self.embeddings.position);
        let segments = graph.param(store, self.embeddings.segment);
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let seg_ids = alloc::vec![segment_id; ids.len()];
        let tok = graph.gather(tokens, ids)?;
        let pos = graph.gather(positions, &pos_ids)?;
        let seg = graph.gather(segments, &seg_ids)?;
        let sum = graph.add(tok, pos)?;
        graph.add(sum, seg)
    }

    /// One post-norm transformer layer (1-based `layer` index).
    pub fn layer_forward(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        layer: usize,
        x: Var,
        pad_mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<LayerOutput> {
        let l = self
            .layers
            .get(layer.wrapping_sub(1))
            .ok_or_else(|| Error::Contract(format!("no encoder layer {layer}")))?;
        if graph.shape(x).len() != 2 || graph.shape(x)[1] != self.d_model {
            return Err(Error::dim("encoder_layer", graph.shape(x), &[pad_mask.len(), self.d_model]));
        }
        if graph.shape(x)[0] != pad_mask.len() {
            return Err(Error::dim("encoder_layer", graph.shape(x), &[pad_mask.len()]));
        }
        if !pad_mask.iter().any(|&m| m) {
            return Err(Error::Mask("encoder_layer"));
        }

        let head_dim = self.d_model / self.num_heads;
        let q = l.query.forward(graph, store, x)?;
        let k = l.key.forward(graph, store, x)?;
        let v = l.value.forward(graph, store, x)?;
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut attention = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = graph.slice_cols(q, h * head_dim, head_dim)?;
            let kh = graph.slice_cols(k, h * head_dim, head_dim)?;
            let vh = graph.slice_cols(v, h * head_dim, head_dim)?;
            let kt = graph.transpose(kh)?;
            let scores = graph.matmul(qh, kt)?;
            let scores = graph.scale(scores, 1.0 / libm::sqrt(head_dim as f64))?;
            let probs = graph.softmax_rows(scores, pad_mask)?;
            attention.push(probs);
            let probs = dropout(graph, probs, mode)?;
            heads.push(graph.matmul(probs, vh)?);
        }
        let merged = graph.concat_cols(&heads)?;
        let attended = l.output.forward(graph, store, merged)?;
        let residual = graph.add(x, attended)?;
        let (gain, bias) = (graph.param(store, l.attn_norm.0), graph.param(store, l.attn_norm.1));
        let x1 = graph.layer_norm(residual, gain, bias)?;

        let hidden = l.ff_in.forward(graph, store, x1)?;
        let hidden = graph.gelu(hidden)?;
        let ff = l.ff_out.forward(graph, store, hidden)?;
        let ff = dropout(graph, ff, mode)?;
        let residual = graph.add(x1, ff)?;
        let (gain, bias) = (graph.param(store, l.ff_norm.0), graph.param(store, l.ff_norm.1));
        let out = graph.layer_norm(residual, gain, bias)?;
        Ok(LayerOutput { hidden: out, attention })
    }

    /// Embeds `ids` and runs layers `1..=depth`.
    pub fn run(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        pad_mask: &[bool],
        segment_id: usize,
        depth: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if pad_mask.len() != ids.len() {
            return Err(Error::dim("encoder", &[ids.len()], &[pad_mask.len()]));
        }
        let mut x = self.embed_sequence(graph, store, ids, segment_id)?;
        for layer in 1..=depth {
            x = self.layer_forward(graph, store, layer, x, pad_mask, mode)?.hidden;
        }
        Ok(x)
    }

    /// Text features `P` from the tapped layer, and `[CLS]` as its first row.
    pub fn encode_text(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        pad_mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let p = self.run(graph, store, ids, pad_mask, 0, self.layer_tap, mode)?;
        let cls = graph.select_row(p, 0)?;
        Ok((p, cls))
    }

    /// Attribute features `Q` from the last layer, segment 1.
    pub fn encode_attributes(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        pad_mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.run(graph, store, ids, pad_mask, 1, self.layers.len(), mode)
    }
}

/// Wraps tokens as `[CLS] t_1 … t_n [SEP]`, truncating the body to `max_len - 2`,
/// then right-pads with `[PAD]` up to `pad_to` when given.
pub fn frame_sequence(body: &[usize], max_len: usize, pad_to: Option<usize>) -> (Vec<usize>, Vec<bool>) {
    let keep = body.len().min(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS_ID);
    ids.extend_from_slice(&body[..keep]);
    ids.push(SEP_ID);
    let mut mask = alloc::vec![true; ids.len()];
    if let Some(len) = pad_to {
        while ids.len() < len {
            ids.push(PAD_ID);
            mask.push(false);
        }
    }
    (ids, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            max_len: 16,
            ..ModelConfig::toy()
        }
    }

    fn encoder(cfg: &ModelConfig) -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(3);
        let enc = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn vocabulary_requires_reserved_prefix() {
        let ok = Vocabulary::new(vec![PAD.into(), CLS.into(), SEP.into(), "love".into()]).unwrap();
        assert_eq!(ok.id("love").unwrap(), 3);
        assert_eq!(ok.tokenize("love love").unwrap(), vec![3, 3]);
        assert!(matches!(ok.id("hate"), Err(Error::UnknownToken(_))));
        assert!(Vocabulary::new(vec![CLS.into(), PAD.into(), SEP.into()]).is_err());
        assert!(Vocabulary::new(vec![PAD.into(), CLS.into(), SEP.into(), SEP.into()]).is_err());
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let cfg = tiny_config();
        let (enc, mut store) = encoder(&cfg);
        for id in [enc.embeddings.token, enc.embeddings.position, enc.embeddings.segment] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let e = enc.embed_sequence(&mut g, &store, &[1, 5, 2], 0).unwrap();
        assert_eq!(g.shape(e), &[3, 8]);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_is_sum_of_rows() {
        let cfg = tiny_config();
        let (enc, mut store) = encoder(&cfg);
        let seg = nn::normal_tensor(&[2, 8], 1.0, &mut ModelRng::seed_from_u64(9));
        *store.value_mut(enc.embeddings.segment) = seg;
        let mut g = Graph::new();
        let e = enc.embed_sequence(&mut g, &store, &[7], 1).unwrap();
        let tok = store.value(enc.embeddings.token).row(7);
        let pos = store.value(enc.embeddings.position).row(0);
        let seg = store.value(enc.embeddings.segment).row(1);
        for j in 0..8 {
            assert_eq!(g.value(e).data()[j], tok[j] + pos[j] + seg[j]);
        }
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let cfg = tiny_config();
        let (enc, store) = encoder(&cfg);
        let mut g = Graph::new();
        assert_eq!(
            enc.embed_sequence(&mut g, &store, &[1, 12, 2], 0),
            Err(Error::VocabularyId { id: 12, size: 12 })
        );
    }

    #[test]
    fn framed_text_has_n_plus_two_rows() {
        let cfg = tiny_config();
        let (enc, store) = encoder(&cfg);
        let (ids, mask) = frame_sequence(&[4, 5, 6, 7, 8], cfg.max_len, None);
        assert_eq!(ids.len(), 7);
        let mut g = Graph::new();
        let (p, cls) = enc.encode_text(&mut g, &store, &ids, &mask, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(p), &[7, 8]);
        assert_eq!(g.value(cls).data(), g.value(p).row(0));
        let q = enc.encode_attributes(&mut g, &store, &ids, &mask, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(q), &[7, 8]);

        let (empty, _) = frame_sequence(&[], cfg.max_len, None);
        assert_eq!(empty, vec![CLS_ID, SEP_ID]);
        let (long, _) = frame_sequence(&[3; 40], cfg.max_len, None);
        assert_eq!(long.len(), cfg.max_len);
    }

    #[test]
    fn full_depth_tap_matches_explicit_stack() {
        let cfg = ModelConfig {
            layer_tap: 2,
            ..tiny_config()
        };
        let (enc, store) = encoder(&cfg);
        let ids = [1, 4, 9, 2];
        let mask = [true; 4];
        let mut g = Graph::new();
        let (p, _) = enc.encode_text(&mut g, &store, &ids, &mask, &mut Mode::Eval).unwrap();
        let mut x = enc.embed_sequence(&mut g, &store, &ids, 0).unwrap();
        for layer in 1..=2 {
            x = enc.layer_forward(&mut g, &store, layer, x, &mask, &mut Mode::Eval).unwrap().hidden;
        }
        assert_eq!(g.value(p), g.value(x));
    }

    #[test]
    fn rejects_bad_layer_tap_and_heads() {
        let mut store = ParamStore::new();
        let mut rng = ModelRng::seed_from_u64(0);
        let bad_tap = ModelConfig {
            layer_tap: 3,
            ..tiny_config()
        };
        assert!(matches!(TextEncoder::new(&mut store, &bad_tap, &mut rng), Err(Error::Config(_))));
        let bad_heads = ModelConfig {
            num_heads: 3,
            ..tiny_config()
        };
        assert!(matches!(TextEncoder::new(&mut store, &bad_heads, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn fully_masked_layer_input_is_an_error() {
        let cfg = tiny_config();
        let (enc, store) = encoder(&cfg);
        let mut g = Graph::new();
        let x = enc.embed_sequence(&mut g, &store, &[1, 2], 0).unwrap();
        let res = enc.layer_forward(&mut g, &store, 1, x, &[false, false], &mut Mode::Eval);
        assert!(matches!(res, Err(Error::Mask(_))));
    }

    #[test]
    fn attention_is_row_stochastic_over_unmasked_keys() {
        let cfg = tiny_config();
        let (enc, store) = encoder(&cfg);
        let (ids, mask) = frame_sequence(&[4, 5, 6], cfg.max_len, Some(8));
        let mut g = Graph::new();
        let x = enc.embed_sequence(&mut g, &store, &ids, 0).unwrap();
        let out = enc.layer_forward(&mut g, &store, 1, x, &mask, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(out.hidden), &[8, 8]);
        for probs in out.attention {
            let a = g.value(probs);
            for i in 0..8 {
                let row = a.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
                for j in 0..8 {
                    if !mask[j] {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn padded_ids_do_not_change_unmasked_rows() {
        let cfg = tiny_config();
        let (enc, store) = encoder(&cfg);
        let (ids, mask) = frame_sequence(&[4, 5, 6], cfg.max_len, Some(7));
        let mut other = ids.clone();
        other[5] = 9;
        other[6] = 11;
        let mut g = Graph::new();
        let (p1, _) = enc.encode_text(&mut g, &store, &ids, &mask, &mut Mode::Eval).unwrap();
        let (p2, _) = enc.encode_text(&mut g, &store, &other, &mask, &mut Mode::Eval).unwrap();
        for i in (0..7).filter(|&i| mask[i]) {
            assert_eq!(g.value(p1).row(i), g.value(p2).row(i));
        }
    }

    #[test]
    fn gradient_reaches_only_used_embedding_rows() {
        let cfg = tiny_config();
        let (enc, mut store) = encoder(&cfg);
        let mut g = Graph::new();
        let (p, _) = enc.encode_text(&mut g, &store, &[1, 4, 4, 2], &[true; 4], &mut Mode::Eval).unwrap();
        // Layer norm makes a plain sum flat, so weight the outputs randomly.
        let weights = g.input(nn::normal_tensor(&[4, 8], 1.0, &mut ModelRng::seed_from_u64(5)));
        let weighted = g.mul(p, weights).unwrap();
        let s = g.sum(weighted).unwrap();
        g.backward(s).unwrap();
        store.accumulate_grads(&g);
        let grad = store.grad(enc.embeddings.token);
        for id in 0..cfg.vocab_size {
            let row = &grad[id * 8..(id + 1) * 8];
            let touched = row.iter().any(|&v| v != 0.0);
            assert_eq!(touched, [1, 2, 4].contains(&id), "row {id}");
        }
    }

    #[test]
    fn eval_encoding_is_bitwise_deterministic() {
        let cfg = tiny_config();
        let (enc, store) = encoder(&cfg);
        let ids = [1, 3, 8, 2];
        let mut g = Graph::new();
        let (a, _) = enc.encode_text(&mut g, &store, &ids, &[true; 4], &mut Mode::Eval).unwrap();
        let mut h = Graph::new();
        let (b, _) = enc.encode_text(&mut h, &store, &ids, &[true; 4], &mut Mode::Eval).unwrap();
        assert_eq!(g.value(a), h.value(b));
    }
}

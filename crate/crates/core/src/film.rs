//! Text-conditioned visual pipeline.
//!
//! A GRU reads the tweet through its own embedding table and its final hidden
//! state is mapped to one `(gamma, beta)` pair per residual block. Each block
//! modulates its normalized feature maps channel-wise with that pair before
//! the closing ReLU and the residual add. The pooled result is projected to
//! `Q_film`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::model::ModelConfig;
use crate::nn::{self, join, Linear, ModelRng};
use crate::text::PAD_ID;
use crate::{Error, Result, Tensor};

/// Minimum image side length accepted by the stem.
pub const MIN_IMAGE_SIDE: usize = 4;

/// Single-layer GRU cell. Gate weights are stored as `(input + hidden) × hidden`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    input: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ModelRng) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(Error::Config(format!("GRU sizes must be positive (input {input}, hidden {hidden})")));
        }
        let width = input + hidden;
        let group = ParamGroup::Film;
        Ok(Self {
            update: Linear::new(store, &join(name, "update"), width, hidden, group, rng),
            reset: Linear::new(store, &join(name, "reset"), width, hidden, group, rng),
            candidate: Linear::new(store, &join(name, "candidate"), width, hidden, group, rng),
            input,
            hidden,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    /// `h' = (1 - z) * n + z * h` with `z`, `r` sigmoid gates and
    /// `n = tanh(W_n [x; r * h] + b_n)`.
    pub fn step(&self, graph: &mut Graph, store: &ParamStore, x: Var, h_prev: Var) -> Result<Var> {
        if graph.shape(x) != [self.input] {
            return Err(Error::dim("gru_step", graph.shape(x), &[self.input]));
        }
        if graph.shape(h_prev) != [self.hidden] {
            return Err(Error::dim("gru_step", graph.shape(h_prev), &[self.hidden]));
        }
        let xh = graph.concat(&[x, h_prev])?;
        let z = self.update.forward(graph, store, xh)?;
        let z = graph.sigmoid(z)?;
        let r = self.reset.forward(graph, store, xh)?;
        let r = graph.sigmoid(r)?;
        let rh = graph.mul(r, h_prev)?;
        let xrh = graph.concat(&[x, rh])?;
        let n = self.candidate.forward(graph, store, xrh)?;
        let n = graph.tanh(n)?;
        let carry = graph.sub(h_prev, n)?;
        let carry = graph.mul(z, carry)?;
        graph.add(n, carry)
    }
}

/// Per-block modulation vectors, in block order.
#[derive(Debug, Clone)]
pub struct FilmParams {
    pub blocks: Vec<(Var, Var)>,
}

impl FilmParams {
    /// Constant `gamma = 1`, `beta = 0` for every block: no modulation.
    pub fn identity(graph: &mut Graph, channels: &[usize]) -> Self {
        let blocks = channels
            .iter()
            .map(|&c| (graph.input(Tensor::filled([c], 1.0)), graph.input(Tensor::zeros([c]))))
            .collect();
        Self { blocks }
    }
}

/// GRU over its own word embeddings, followed by one linear map to all
/// `(gamma, beta)` pairs.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    pub embedding: ParamId,
    pub gru: GruCell,
    pub projection: Linear,
    channels: Vec<usize>,
}

impl FilmGenerator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ModelRng) -> Result<Self> {
        let embedding = store.add(
            "film.embed",
            nn::normal_tensor(&[cfg.vocab_size, cfg.gru_embed_dim], 1.0, rng),
            ParamGroup::Film,
        );
        let gru = GruCell::new(store, "film.gru", cfg.gru_embed_dim, cfg.gru_hidden, rng)?;
        let channels = vec![cfg.channels; cfg.num_blocks];
        let total: usize = channels.iter().sum();
        let projection = Linear::new(store, "film.projection", cfg.gru_hidden, 2 * total, ParamGroup::Film, rng);
        // Start every gamma at one so the blocks pass features through at init.
        let bias = store.value_mut(projection.bias).data_mut();
        let mut offset = 0;
        for &c in &channels {
            bias[offset..offset + c].fill(1.0);
            offset += 2 * c;
        }
        Ok(Self {
            embedding,
            gru,
            projection,
            channels,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Final GRU state over `token_ids` (`[PAD]` skipped), starting from zero.
    pub fn encode(&self, graph: &mut Graph, store: &ParamStore, token_ids: &[usize]) -> Result<Var> {
        let table = graph.param(store, self.embedding);
        let mut h = graph.input(Tensor::zeros([self.gru.hidden_size()]));
        for &id in token_ids.iter().filter(|&&id| id != PAD_ID) {
            let row = graph.gather(table, &[id])?;
            let x = graph.reshape(row, &[self.gru.input_size()])?;
            h = self.gru.step(graph, store, x, h)?;
        }
        Ok(h)
    }

    /// Splits the projection of `hidden` into `(gamma, beta)` per block, gamma first.
    pub fn project(&self, graph: &mut Graph, store: &ParamStore, hidden: Var) -> Result<FilmParams> {
        let out = self.projection.forward(graph, store, hidden)?;
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(self.channels.len());
        for &c in &self.channels {
            let gamma = graph.slice(out, offset, c)?;
            let beta = graph.slice(out, offset + c, c)?;
            blocks.push((gamma, beta));
            offset += 2 * c;
        }
        Ok(FilmParams { blocks })
    }

    pub fn generate(&self, graph: &mut Graph, store: &ParamStore, token_ids: &[usize]) -> Result<FilmParams> {
        let h = self.encode(graph, store, token_ids)?;
        self.project(graph, store, h)
    }
}

/// `out[c, h, w] = gamma[c] * features[c, h, w] + beta[c]`.
pub fn film_modulate(graph: &mut Graph, features: Var, gamma: Var, beta: Var) -> Result<Var> {
    graph.scale_shift(features, gamma, beta)
}

/// `y = x + relu(film(instance_norm(conv3x3(relu(conv1x1(x) + b)))))`.
#[derive(Debug, Clone)]
pub struct FilmedBlock {
    pub conv1: ParamId,
    pub conv1_bias: ParamId,
    pub conv2: ParamId,
}

/// Activations of one block kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    /// `relu(film(...))`, before the residual add.
    pub modulated: Var,
    pub output: Var,
}

impl FilmedBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ModelRng) -> Self {
        let group = ParamGroup::Film;
        let conv1 = store.add(
            join(name, "conv1"),
            nn::normal_tensor(&[channels, channels, 1, 1], libm::sqrt(2.0 / channels as f64), rng),
            group,
        );
        let conv1_bias = store.add(join(name, "conv1_bias"), Tensor::zeros([channels]), group);
        let conv2 = store.add(
            join(name, "conv2"),
            nn::normal_tensor(&[channels, channels, 3, 3], libm::sqrt(2.0 / (9 * channels) as f64), rng),
            group,
        );
        Self {
            conv1,
            conv1_bias,
            conv2,
        }
    }

    /// `x` is `B×C×H×W`; `gamma` and `beta` have length `C`.
    pub fn forward(&self, graph: &mut Graph, store: &ParamStore, x: Var, gamma: Var, beta: Var) -> Result<BlockTrace> {
        let channels = graph.shape(x).get(1).copied().unwrap_or(0);
        for v in [gamma, beta] {
            if graph.shape(v) != [channels] {
                return Err(Error::dim("filmed_block", graph.shape(x), graph.shape(v)));
            }
        }
        let w1 = graph.param(store, self.conv1);
        let b1 = graph.param(store, self.conv1_bias);
        let w2 = graph.param(store, self.conv2);
        let ones = graph.input(Tensor::filled([channels], 1.0));
        let h = graph.conv2d(x, w1, 1, 0)?;
        let h = graph.scale_shift(h, ones, b1)?;
        let h = graph.relu(h)?;
        let h = graph.conv2d(h, w2, 1, 1)?;
        let h = graph.instance_norm(h)?;
        let h = film_modulate(graph, h, gamma, beta)?;
        let modulated = graph.relu(h)?;
        let output = graph.add(x, modulated)?;
        Ok(BlockTrace { modulated, output })
    }
}

/// Conv stem, FiLMed residual blocks, global average pool and a projection
/// to `q_film_dim`.
#[derive(Debug, Clone)]
pub struct VisualNet {
    pub stem: ParamId,
    pub stem_bias: ParamId,
    pub blocks: Vec<FilmedBlock>,
    pub head: Linear,
    channels: usize,
}

pub struct VisualOutput {
    pub q_film: Var,
    pub blocks: Vec<BlockTrace>,
}

/// Total "same" padding for a stride-`s` window of size `k` over `n` inputs.
fn same_padding(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (total / 2, total - total / 2)
}

impl VisualNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ModelRng) -> Result<Self> {
        if cfg.channels == 0 || cfg.num_blocks == 0 || cfg.q_film_dim == 0 {
            return Err(Error::Config("visual channels, blocks and q_film_dim must be positive".into()));
        }
        let c = cfg.channels;
        let stem = store.add(
            "visual.stem",
            nn::normal_tensor(&[c, 3, 3, 3], libm::sqrt(2.0 / 27.0), rng),
            ParamGroup::Film,
        );
        let stem_bias = store.add("visual.stem_bias", Tensor::zeros([c]), ParamGroup::Film);
        let blocks = (0..cfg.num_blocks)
            .map(|i| FilmedBlock::new(store, &format!("visual.block{}", i + 1), c, rng))
            .collect();
        let head = Linear::new(store, "visual.head", c, cfg.q_film_dim, ParamGroup::Film, rng);
        Ok(Self {
            stem,
            stem_bias,
            blocks,
            head,
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `image` is `3×H×W`. The stem is a stride-2 3×3 convolution with "same"
    /// padding, so the blocks see `ceil(H/2)×ceil(W/2)` maps.
    pub fn forward(&self, graph: &mut Graph, store: &ParamStore, image: Var, film: &FilmParams) -> Result<VisualOutput> {
        let &[channels, h, w] = graph.shape(image) else {
            return Err(Error::dim("visual_forward", graph.shape(image), &[3, 0, 0]));
        };
        if channels != 3 {
            return Err(Error::dim("visual_forward", graph.shape(image), &[3, h, w]));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "image {h}×{w} is smaller than the {MIN_IMAGE_SIDE}×{MIN_IMAGE_SIDE} minimum"
            )));
        }
        if film.blocks.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} FiLM pairs for {} blocks",
                film.blocks.len(),
                self.blocks.len()
            )));
        }
        let x = graph.reshape(image, &[1, 3, h, w])?;
        let (top, bottom) = same_padding(h, 3, 2);
        let (left, right) = same_padding(w, 3, 2);
        let x = graph.pad_spatial(x, top, bottom, left, right)?;
        let kernel = graph.param(store, self.stem);
        let bias = graph.param(store, self.stem_bias);
        let ones = graph.input(Tensor::filled([self.channels], 1.0));
        let x = graph.conv2d(x, kernel, 2, 0)?;
        let x = graph.scale_shift(x, ones, bias)?;
        let mut x = graph.relu(x)?;

        let mut traces = Vec::with_capacity(self.blocks.len());
        for (block, &(gamma, beta)) in self.blocks.iter().zip(&film.blocks) {
            let trace = block.forward(graph, store, x, gamma, beta)?;
            x = trace.output;
            traces.push(trace);
        }
        let pooled = graph.mean_spatial(x)?;
        let pooled = graph.reshape(pooled, &[self.channels])?;
        let q_film = self.head.forward(graph, store, pooled)?;
        Ok(VisualOutput { q_film, blocks: traces })
    }
}

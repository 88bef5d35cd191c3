//! The fused classifier and its ablation variants.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::autograd::{Graph, ParamGroup, ParamStore, Var};
use crate::coattention::{AttentionOutput, CoAttention};
use crate::film::{FilmGenerator, FilmParams, VisualNet, VisualOutput};
use crate::nn::{dropout, Linear, Mode, ModelRng};
use crate::text::TextEncoder;
use crate::{Error, Result, Tensor};

/// Which slices of the fusion vector a model builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Drops the whole visual pipeline; `[CLS]` and `q_att` remain.
    NoFilm,
    /// Drops attribute encoding and co-attention; `Q_film` and `[CLS]` remain.
    NoCoattention,
    /// Drops only the `[CLS]` slice.
    NoCls,
    /// `[CLS]` alone.
    TextOnly,
    /// `Q_film` alone, with the blocks left unmodulated.
    ImageOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoFilm,
        Variant::NoCoattention,
        Variant::NoCls,
        Variant::TextOnly,
        Variant::ImageOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFilm => "no-film",
            Variant::NoCoattention => "no-coatt",
            Variant::NoCls => "no-cls",
            Variant::TextOnly => "text-only",
            Variant::ImageOnly => "image-only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name || v.name().replace('-', "_") == name)
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
    }

    /// `Q_film` is part of the fusion vector.
    pub fn uses_visual(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCoattention | Variant::NoCls | Variant::ImageOnly)
    }

    /// The visual blocks are modulated by text-generated parameters.
    pub fn uses_film_generator(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCoattention | Variant::NoCls)
    }

    pub fn uses_coattention(self) -> bool {
        matches!(self, Variant::Full | Variant::NoFilm | Variant::NoCls)
    }

    pub fn uses_cls(self) -> bool {
        matches!(self, Variant::Full | Variant::NoFilm | Variant::NoCoattention | Variant::TextOnly)
    }

    pub fn uses_text_encoder(self) -> bool {
        self.uses_cls() || self.uses_coattention()
    }
}

/// Architecture sizes. Training hyperparameters live in
/// [`crate::train::TrainConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// 1-based encoder layer whose output is `P`.
    pub layer_tap: usize,
    /// Longest framed text sequence, `[CLS]` and `[SEP]` included.
    pub max_len: usize,
    pub max_attributes: usize,
    pub gru_embed_dim: usize,
    pub gru_hidden: usize,
    pub channels: usize,
    pub num_blocks: usize,
    pub q_film_dim: usize,
    pub dropout: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            layer_tap: 1,
            max_len: 360,
            max_attributes: 16,
            gru_embed_dim: 100,
            gru_hidden: 64,
            channels: 32,
            num_blocks: 4,
            q_film_dim: 1024,
            dropout: 0.1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Tiny dimensions for gradient checks.
    pub fn toy() -> Self {
        Self {
            vocab_size: 256,
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            layer_tap: 1,
            max_len: 32,
            max_attributes: 8,
            gru_embed_dim: 8,
            gru_hidden: 8,
            channels: 4,
            num_blocks: 4,
            q_film_dim: 16,
            dropout: 0.1,
            variant: Variant::Full,
        }
    }

    pub fn fusion_dim(&self) -> usize {
        let v = self.variant;
        let mut dim = 0;
        if v.uses_visual() {
            dim += self.q_film_dim;
        }
        if v.uses_cls() {
            dim += self.d_model;
        }
        if v.uses_coattention() {
            dim += self.d_model;
        }
        dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("gru_embed_dim", self.gru_embed_dim),
            ("gru_hidden", self.gru_hidden),
            ("channels", self.channels),
            ("num_blocks", self.num_blocks),
            ("q_film_dim", self.q_film_dim),
            ("max_attributes", self.max_attributes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover the three reserved tokens".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for [CLS] and [SEP]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.layer_tap == 0 || self.layer_tap > self.num_layers {
            return Err(Error::Config(format!(
                "layer_tap {} outside 1..={}",
                self.layer_tap, self.num_layers
            )));
        }
        Ok(())
    }
}

/// A sample mapped to ids and tensors, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    /// `[CLS] text [SEP]`, optionally padded.
    pub text_ids: Vec<usize>,
    pub text_mask: Vec<bool>,
    /// `[CLS] attributes [SEP]`, optionally padded.
    pub attr_ids: Vec<usize>,
    pub attr_mask: Vec<bool>,
    /// Bare text tokens read by the FiLM generator's GRU.
    pub word_ids: Vec<usize>,
    /// `3×H×W` raster.
    pub image: Tensor,
    pub label: u8,
}

/// Logistic output layer over the fusion vector.
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub linear: Linear,
    pub fusion_dim: usize,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, fusion_dim: usize, rng: &mut ModelRng) -> Self {
        let linear = Linear::with_std(store, "head", fusion_dim, 1, ParamGroup::CoAttention, 0.02, rng);
        Self { linear, fusion_dim }
    }
}

/// Joins the active components in the order `(Q_film, [CLS], q_att)`.
/// Components the variant drops are ignored; missing required ones are an error.
pub fn fuse_concat(
    graph: &mut Graph,
    q_film: Option<Var>,
    cls: Option<Var>,
    q_att: Option<Var>,
    variant: Variant,
) -> Result<Var> {
    let slots = [
        ("Q_film", q_film, variant.uses_visual()),
        ("[CLS]", cls, variant.uses_cls()),
        ("q_att", q_att, variant.uses_coattention()),
    ];
    let mut parts = Vec::with_capacity(3);
    for (name, part, needed) in slots {
        match (part, needed) {
            (Some(v), true) => parts.push(v),
            (None, true) => {
                return Err(Error::Contract(format!(
                    "variant {} needs {name} in the fusion vector",
                    variant.name()
                )))
            }
            (_, false) => {}
        }
    }
    graph.concat(&parts)
}

/// `logit = Wᵀ h + b`, as a length-1 vector.
pub fn classify(graph: &mut Graph, store: &ParamStore, h: Var, head: &FusionHead) -> Result<Var> {
    if graph.shape(h) != [head.fusion_dim] {
        return Err(Error::dim("classify", graph.shape(h), &[head.fusion_dim]));
    }
    head.linear.forward(graph, store, h)
}

/// Plain-value copy of the co-attention intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    pub affinity: Tensor,
    pub alpha: Vec<f64>,
    pub q_att: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    /// `sigmoid(logit)`.
    pub probability: f64,
    /// 1 iff `logit > 0`; a probability of exactly one half maps to 0.
    pub label: u8,
    pub attention: Option<AttentionSnapshot>,
}

/// Graph handles of everything one forward pass produced.
pub struct ForwardOutput {
    pub logit: Var,
    pub fusion: Var,
    pub text: Option<(Var, Var)>,
    pub attributes: Option<Var>,
    pub attention: Option<AttentionOutput>,
    pub film: Option<FilmParams>,
    pub visual: Option<VisualOutput>,
}

impl ForwardOutput {
    pub fn prediction(&self, graph: &Graph) -> Prediction {
        let logit = graph.value(self.logit).data()[0];
        let attention = self.attention.map(|a| AttentionSnapshot {
            affinity: graph.value(a.affinity).clone(),
            alpha: graph.value(a.alpha).data().to_vec(),
            q_att: graph.value(a.q_att).data().to_vec(),
        });
        Prediction {
            logit,
            probability: crate::autograd::sigmoid(logit),
            label: u8::from(logit > 0.0),
            attention,
        }
    }
}

/// Parameters and component layout of one model instance.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub encoder: Option<TextEncoder>,
    pub film: Option<FilmGenerator>,
    pub visual: Option<VisualNet>,
    pub coattention: Option<CoAttention>,
    pub head: FusionHead,
}

impl Model {
    /// Builds only the components the configured variant uses.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = config.variant;
        let encoder = v
            .uses_text_encoder()
            .then(|| TextEncoder::new(&mut store, &config, &mut rng))
            .transpose()?;
        let film = v
            .uses_film_generator()
            .then(|| FilmGenerator::new(&mut store, &config, &mut rng))
            .transpose()?;
        let visual = v
            .uses_visual()
            .then(|| VisualNet::new(&mut store, &config, &mut rng))
            .transpose()?;
        let coattention = v
            .uses_coattention()
            .then(|| CoAttention::new(&mut store, config.d_model, &mut rng));
        let head = FusionHead::new(&mut store, config.fusion_dim(), &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            film,
            visual,
            coattention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `(name, shape)` of every parameter in store order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name().into(), p.value().shape().to_vec()))
            .collect()
    }

    pub fn forward(&self, graph: &mut Graph, sample: &EncodedSample, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        self.forward_with(&self.store, graph, sample, mode)
    }

    /// Forward pass reading parameter values from `store`, which must share
    /// this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        graph: &mut Graph,
        sample: &EncodedSample,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardOutput> {
        let variant = self.config.variant;

        let text = match &self.encoder {
            Some(enc) => Some(enc.encode_text(graph, store, &sample.text_ids, &sample.text_mask, mode)?),
            None => None,
        };
        let (attributes, attention) = match (&self.coattention, &self.encoder, text) {
            (Some(co), Some(enc), Some((p, _))) => {
                if sample.attr_ids.len() > self.config.max_attributes + 2 {
                    return Err(Error::Contract(format!(
                        "{} attribute positions exceed the configured maximum of {}",
                        sample.attr_ids.len(),
                        self.config.max_attributes + 2
                    )));
                }
                let q = enc.encode_attributes(graph, store, &sample.attr_ids, &sample.attr_mask, mode)?;
                let att = co.forward(graph, store, p, q, &sample.text_mask, &sample.attr_mask)?;
                (Some(q), Some(att))
            }
            _ => (None, None),
        };

        let film = match &self.film {
            Some(generator) => Some(generator.generate(graph, store, &sample.word_ids)?),
            None => None,
        };
        let visual = match &self.visual {
            Some(net) => {
                let image = graph.input(sample.image.clone());
                let params = match &film {
                    Some(f) => f.clone(),
                    None => FilmParams::identity(graph, &vec![net.channels(); net.blocks.len()]),
                };
                Some(net.forward(graph, store, image, &params)?)
            }
            None => None,
        };

        let fusion = fuse_concat(
            graph,
            visual.as_ref().map(|v| v.q_film),
            text.map(|(_, cls)| cls),
            attention.map(|a| a.q_att),
            variant,
        )?;
        let dropped = dropout(graph, fusion, mode)?;
        let logit = classify(graph, store, dropped, &self.head)?;
        Ok(ForwardOutput {
            logit,
            fusion,
            text,
            attributes,
            attention,
            film,
            visual,
        })
    }

    /// Eval-mode prediction on a fresh graph.
    pub fn predict(&self, sample: &EncodedSample) -> Result<Prediction> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, sample, &mut Mode::Eval)?;
        Ok(out.prediction(&graph))
    }

    /// Runs forward and backward for one sample, adding `scale · ∂loss/∂θ`
    /// to the stored gradients. Returns the unscaled loss.
    pub fn accumulate_gradients(&mut self, sample: &EncodedSample, mode: &mut Mode<'_>, scale: f64) -> Result<f64> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, sample, mode)?;
        let loss = graph.bce_with_logits(out.logit, f64::from(sample.label))?;
        let value = graph.value(loss).data()[0];
        let scaled = graph.scale(loss, scale)?;
        graph.backward(scaled)?;
        self.store.accumulate_grads(&graph);
        Ok(value)
    }
}

//! Synthetic planted-incongruity corpus.
//!
//! Each sample draws a text class (positive or negative sentiment word) and an
//! image class (horizontal stripes or a filled disc) independently. The label
//! is 1 (sarcastic) exactly when the two disagree under the pairing
//! positive ↔ stripes, negative ↔ disc, i.e. `label = text_class XOR image_class`.
//! Either modality alone carries no information about the label.
//!
//! The image class reaches the model twice: through the pixels, with Gaussian
//! noise `σ`, and through the attribute tokens, each of which names the wrong
//! class with probability `ρ_a`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{EncodedSample, ModelConfig};
use crate::text::{frame_sequence, Vocabulary, CLS, PAD, SEP};
use crate::{Error, Result, Tensor};

pub const POSITIVE_WORDS: [&str; 6] = ["love", "great", "wonderful", "happy", "awesome", "fantastic"];
pub const NEGATIVE_WORDS: [&str; 6] = ["hate", "awful", "terrible", "sad", "horrible", "miserable"];
/// Attribute token naming each image class, indexed by class.
pub const IMAGE_CLASS_TOKENS: [&str; 2] = ["stripes", "disc"];

const NAMED_TOKENS: usize = 3 + POSITIVE_WORDS.len() + NEGATIVE_WORDS.len() + IMAGE_CLASS_TOKENS.len();

/// Reserved tokens, sentiment words, class tokens, then fillers `w000`, `w001`, …
/// up to `size` entries.
pub fn synthetic_vocabulary(size: usize) -> Result<Vocabulary> {
    if size <= NAMED_TOKENS {
        return Err(Error::Config(format!(
            "synthetic vocabulary needs more than {NAMED_TOKENS} tokens, got {size}"
        )));
    }
    let mut tokens: Vec<String> = [PAD, CLS, SEP]
        .iter()
        .chain(POSITIVE_WORDS.iter())
        .chain(NEGATIVE_WORDS.iter())
        .chain(IMAGE_CLASS_TOKENS.iter())
        .map(|t| t.to_string())
        .collect();
    tokens.extend((0..size - NAMED_TOKENS).map(|i| format!("w{i:03}")));
    Vocabulary::new(tokens)
}

/// Filler tokens of the synthetic vocabulary.
fn filler_tokens(vocab: &Vocabulary) -> &[String] {
    &vocab.tokens()[NAMED_TOKENS..]
}

/// Planar `channels × height × width` raster of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: [usize; 3],
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(shape: [usize; 3], pixels: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != pixels.len() {
            return Err(Error::shape(
                "image",
                format!("shape {shape:?} needs {} pixels, got {}", shape.iter().product::<usize>(), pixels.len()),
            ));
        }
        Ok(Self { shape, pixels })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape, self.pixels.iter().map(|&p| f64::from(p)).collect()).expect("validated shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub text_tokens: Vec<String>,
    pub attribute_tokens: Vec<String>,
    pub image: Image,
    /// 1 = sarcastic.
    pub label: u8,
}

impl MultimodalSample {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::Contract(format!("sample {:?}: {detail}", self.id)));
        if self.text_tokens.is_empty() {
            return fail("empty text".into());
        }
        if self.attribute_tokens.is_empty() {
            return fail("no attributes".into());
        }
        if self.label > 1 {
            return fail(format!("label {} is not binary", self.label));
        }
        if self.image.shape[0] != 3 {
            return fail(format!("image has {} channels, expected 3", self.image.shape[0]));
        }
        if self.image.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("pixel outside [0, 1]".into());
        }
        Ok(())
    }

    /// Maps tokens to ids and frames both sequences; no padding.
    pub fn encode(&self, vocab: &Vocabulary, config: &ModelConfig) -> Result<EncodedSample> {
        self.validate()?;
        if self.attribute_tokens.len() > config.max_attributes {
            return Err(Error::Contract(format!(
                "sample {:?} has {} attributes, limit is {}",
                self.id,
                self.attribute_tokens.len(),
                config.max_attributes
            )));
        }
        let words = vocab.encode(&self.text_tokens)?;
        let attrs = vocab.encode(&self.attribute_tokens)?;
        let (text_ids, text_mask) = frame_sequence(&words, config.max_len, None);
        let (attr_ids, attr_mask) = frame_sequence(&attrs, config.max_attributes + 2, None);
        let word_ids = text_ids[1..text_ids.len() - 1].to_vec();
        Ok(EncodedSample {
            text_ids,
            text_mask,
            attr_ids,
            attr_mask,
            word_ids,
            image: self.image.to_tensor(),
            label: self.label,
        })
    }
}

/// Encodes a whole dataset.
pub fn encode_all(samples: &[MultimodalSample], vocab: &Vocabulary, config: &ModelConfig) -> Result<Vec<EncodedSample>> {
    samples.iter().map(|s| s.encode(vocab, config)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub vocab_size: usize,
    pub num_attributes: usize,
    pub text_noise_tokens: usize,
    /// Probability that one attribute token names the wrong image class.
    pub attribute_noise: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            vocab_size: 256,
            num_attributes: 5,
            text_noise_tokens: 2,
            attribute_noise: 0.25,
            pixel_noise: 0.15,
            image_size: 32,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attribute_noise) {
            return Err(Error::Config(format!(
                "attribute noise {} outside [0, 1]",
                self.attribute_noise
            )));
        }
        if !self.pixel_noise.is_finite() || self.pixel_noise < 0.0 {
            return Err(Error::Config(format!("pixel noise {} must be finite and non-negative", self.pixel_noise)));
        }
        if self.num_attributes == 0 {
            return Err(Error::Config("at least one attribute per sample is required".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} is below 8", self.image_size)));
        }
        if self.vocab_size <= NAMED_TOKENS {
            return Err(Error::Config(format!(
                "vocab size {} leaves no filler tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Latent classes behind one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latent {
    /// 0 = positive sentiment, 1 = negative.
    pub text_class: u8,
    /// 0 = stripes, 1 = disc.
    pub image_class: u8,
}

impl Latent {
    pub fn label(self) -> u8 {
        self.text_class ^ self.image_class
    }
}

/// Generates `cfg.n_samples` samples. Sample `i` depends only on `cfg` and `i`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Vec<MultimodalSample>> {
    Ok(generate_with_latents(cfg)?.into_iter().map(|(s, _)| s).collect())
}

/// As [`generate_synthetic`], also returning the latent classes.
pub fn generate_with_latents(cfg: &GeneratorConfig) -> Result<Vec<(MultimodalSample, Latent)>> {
    cfg.validate()?;
    let vocab = synthetic_vocabulary(cfg.vocab_size)?;
    (0..cfg.n_samples).map(|i| Ok(generate_one(cfg, &vocab, i))).collect()
}

fn generate_one(cfg: &GeneratorConfig, vocab: &Vocabulary, index: usize) -> (MultimodalSample, Latent) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let latent = Latent {
        text_class: rng.random_range(0..2u8),
        image_class: rng.random_range(0..2u8),
    };

    let fillers = filler_tokens(vocab);
    let mut text_tokens: Vec<String> = (0..cfg.text_noise_tokens)
        .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
        .collect();
    let words = if latent.text_class == 0 { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
    let word = words[rng.random_range(0..words.len())];
    let slot = rng.random_range(0..=text_tokens.len());
    text_tokens.insert(slot, word.to_string());

    let attribute_tokens = (0..cfg.num_attributes)
        .map(|_| {
            let flipped = rng.random::<f64>() < cfg.attribute_noise;
            let class = latent.image_class ^ u8::from(flipped);
            IMAGE_CLASS_TOKENS[usize::from(class)].to_string()
        })
        .collect();

    let image = render(latent.image_class, cfg.image_size, cfg.pixel_noise, &mut rng);
    let sample = MultimodalSample {
        id: format!("syn-{index:06}"),
        text_tokens,
        attribute_tokens,
        image,
        label: latent.label(),
    };
    (sample, latent)
}

/// Stripes (class 0) or a disc (class 1) in random contrasting colours, plus
/// clamped Gaussian noise.
fn render(class: u8, size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut fg = [0.0f64; 3];
    let mut bg = [0.0f64; 3];
    for c in 0..3 {
        fg[c] = rng.random_range(0.6..1.0);
        bg[c] = rng.random_range(0.0..0.4);
    }
    if rng.random::<bool>() {
        core::mem::swap(&mut fg, &mut bg);
    }

    let s = size as f64;
    let inside: Vec<bool> = if class == 0 {
        let half_period = rng.random_range(2..=(size / 8).max(2));
        let phase = rng.random_range(0..2 * half_period);
        (0..size * size).map(|k| ((k / size + phase) / half_period).is_multiple_of(2)).collect()
    } else {
        let radius = rng.random_range(0.2 * s..0.35 * s);
        let cy = s / 2.0 + rng.random_range(-0.1 * s..0.1 * s);
        let cx = s / 2.0 + rng.random_range(-0.1 * s..0.1 * s);
        (0..size * size)
            .map(|k| {
                let dy = (k / size) as f64 + 0.5 - cy;
                let dx = (k % size) as f64 + 0.5 - cx;
                dy * dy + dx * dx <= radius * radius
            })
            .collect()
    };

    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let mut pixels = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for &on in &inside {
            let base = if on { fg[c] } else { bg[c] };
            let value = if sigma > 0.0 { base + noise.sample(rng) } else { base };
            pixels.push(value.clamp(0.0, 1.0) as f32);
        }
    }
    Image {
        shape: [3, size, size],
        pixels,
    }
}

/// Split sizes for `n` items: `floor(n·r)` for validation and test, the
/// remainder for training.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let val = libm::floor(n as f64 * b + 1e-9) as usize;
    let test = libm::floor(n as f64 * c + 1e-9) as usize;
    Ok((n - val - test, val, test))
}

/// Seeded shuffle, then contiguous train / validation / test slices.
pub fn split_dataset<T>(items: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (n_train, n_val, _) = split_sizes(items.len(), ratios)?;
    let mut items = items;
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = items.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok((items, rest, test))
}

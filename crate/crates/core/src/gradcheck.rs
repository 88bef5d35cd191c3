//! Finite-difference verification of every backward rule.
//!
//! Each check builds a scalar loss `Σ rᵢ·outᵢ` with fixed random weights `r`,
//! takes analytic gradients with respect to every input and parameter, and
//! compares them entrywise with central differences at `h = 1e-5`. The error
//! of one entry is `|a − n| / max(|a|, |n|, 1e-7)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::autograd::{Elementwise, Graph, ParamStore, Var};
use crate::coattention::affinity;
use crate::data::{generate_synthetic, synthetic_vocabulary, GeneratorConfig};
use crate::film::{film_modulate, GruCell};
use crate::model::{classify, FusionHead, Model, ModelConfig};
use crate::nn::{normal_tensor, Mode, ModelRng};
use crate::{Result, Tensor};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-7;

/// Worst entrywise error of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_error: f64,
    /// Number of gradient entries compared.
    pub checked: usize,
}

impl GradcheckEntry {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error < tol
    }
}

/// `|a - n| / max(|a|, |n|)`, or the plain difference `|a - n|` when both
/// magnitudes are below [`FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Compares analytic and central-difference gradients of `build` with respect
/// to each tensor in `inputs` and each parameter in `store`.
///
/// `build` receives the input leaves and must return a scalar.
pub fn check<F>(store: &mut ParamStore, inputs: &[Tensor], build: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = build(&mut graph, store, &leaves)?;
    graph.backward(loss)?;
    store.zero_grad();
    store.accumulate_grads(&graph);

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, store, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = graph.grad(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; work[i].numel()]);
        for k in 0..work[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + STEP;
            let plus = eval(store, &work)?;
            work[i].data_mut()[k] = orig - STEP;
            let minus = eval(store, &work)?;
            work[i].data_mut()[k] = orig;
            worst = worst.max(relative_error(analytic[k], (plus - minus) / (2.0 * STEP)));
            checked += 1;
        }
    }

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.grad(id).to_vec();
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + STEP;
            let plus = eval(store, &work)?;
            store.value_mut(id).data_mut()[k] = orig - STEP;
            let minus = eval(store, &work)?;
            store.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(relative_error(analytic[k], (plus - minus) / (2.0 * STEP)));
            checked += 1;
        }
    }
    store.zero_grad();
    Ok((worst, checked))
}

/// `Σ rᵢ·xᵢ` with `r` drawn from `rng`: a scalar whose gradient is `r`.
fn weighted_sum(graph: &mut Graph, x: Var, rng: &mut ModelRng) -> Result<Var> {
    let weights = (0..graph.value(x).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = graph.mul_const(x, weights)?;
    graph.sum(y)
}

/// Gaussian tensor with every entry at least `gap` away from zero, keeping
/// kinks out of reach of the difference step.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ModelRng) -> Tensor {
    let mut t = normal_tensor(shape, 1.0, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

struct Suite {
    rng: ModelRng,
    entries: Vec<GradcheckEntry>,
}

impl Suite {
    fn record<F>(&mut self, name: &str, mut store: ParamStore, inputs: Vec<Tensor>, build: F) -> Result<()>
    where
        F: Fn(&mut Graph, &ParamStore, &[Var], &mut ModelRng) -> Result<Var>,
    {
        let weight_seed = self.rng.random::<u64>();
        let (max_error, checked) = check(&mut store, &inputs, |g, s, v| {
            build(g, s, v, &mut ModelRng::seed_from_u64(weight_seed))
        })?;
        self.entries.push(GradcheckEntry {
            name: name.into(),
            max_error,
            checked,
        });
        Ok(())
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        normal_tensor(shape, 1.0, &mut self.rng)
    }
}

/// Runs every check at toy sizes. Deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut suite = Suite {
        rng: ModelRng::seed_from_u64(seed),
        entries: Vec::new(),
    };
    let empty = ParamStore::new;

    let inputs = vec![suite.normal(&[3, 4]), suite.normal(&[4, 2])];
    suite.record("matmul", empty(), inputs, |g, _, v, r| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, r)
    })?;

    let inputs = vec![suite.normal(&[1, 2, 5, 5]), suite.normal(&[3, 2, 3, 3])];
    suite.record("conv2d", empty(), inputs, |g, _, v, r| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(g, y, r)
    })?;

    for kind in [Elementwise::Tanh, Elementwise::Sigmoid, Elementwise::Relu, Elementwise::Gelu] {
        let x = away_from_zero(&[2, 5], 0.05, &mut suite.rng);
        let name = alloc::format!("elementwise:{}", kind_name(kind));
        suite.record(&name, empty(), vec![x], move |g, _, v, r| {
            let y = g.elementwise(kind, &[v[0]])?;
            weighted_sum(g, y, r)
        })?;
    }
    for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
        let inputs = vec![suite.normal(&[3, 3]), suite.normal(&[3, 3])];
        let name = alloc::format!("elementwise:{}", kind_name(kind));
        suite.record(&name, empty(), inputs, move |g, _, v, r| {
            let y = g.elementwise(kind, &[v[0], v[1]])?;
            weighted_sum(g, y, r)
        })?;
    }
    let inputs = vec![suite.normal(&[3, 2, 4]), suite.normal(&[3]), suite.normal(&[3])];
    suite.record("elementwise:scale_shift", empty(), inputs, |g, _, v, r| {
        let y = g.elementwise(Elementwise::ScaleShift, v)?;
        weighted_sum(g, y, r)
    })?;

    // Row 0 lifted well above the rest so every argmax is stable.
    let mut c = suite.normal(&[4, 3]);
    for j in 0..3 {
        c.data_mut()[j] += 5.0 + j as f64;
    }
    suite.record("maxpool_cols", empty(), vec![c], |g, _, v, r| {
        let y = g.maxpool_cols(v[0], &[true, true, false, true])?;
        weighted_sum(g, y, r)
    })?;

    let inputs = vec![suite.normal(&[3, 6]), suite.normal(&[6]), suite.normal(&[6])];
    suite.record("layer_norm", empty(), inputs, |g, _, v, r| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(g, y, r)
    })?;

    let inputs = vec![suite.normal(&[3, 4])];
    suite.record("softmax_rows", empty(), inputs, |g, _, v, r| {
        let y = g.softmax_rows(v[0], &[true, false, true, true])?;
        weighted_sum(g, y, r)
    })?;

    let inputs = vec![suite.normal(&[2, 3, 3])];
    suite.record("instance_norm", empty(), inputs, |g, _, v, r| {
        let y = g.instance_norm(v[0])?;
        weighted_sum(g, y, r)
    })?;

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 4, 3, &mut suite.rng)?;
    let inputs = vec![suite.normal(&[4]), suite.normal(&[3])];
    suite.record("gru_step", store, inputs, move |g, s, v, r| {
        let h = gru.step(g, s, v[0], v[1])?;
        weighted_sum(g, h, r)
    })?;

    let inputs = vec![suite.normal(&[3, 4, 4]), suite.normal(&[3]), suite.normal(&[3])];
    suite.record("film_modulate", empty(), inputs, |g, _, v, r| {
        let y = film_modulate(g, v[0], v[1], v[2])?;
        weighted_sum(g, y, r)
    })?;

    let d = 4;
    let inputs = vec![suite.normal(&[3, d]), suite.normal(&[5, d]), normal_tensor(&[d, d], 0.5, &mut suite.rng)];
    suite.record("affinity", empty(), inputs, |g, _, v, r| {
        let c = affinity(g, v[0], v[1], v[2])?;
        weighted_sum(g, c, r)
    })?;

    let mut store = ParamStore::new();
    let head = FusionHead::new(&mut store, 6, &mut suite.rng);
    for v in store.value_mut(head.linear.weight).data_mut() {
        *v *= 20.0;
    }
    let inputs = vec![suite.normal(&[6])];
    suite.record("classify", store, inputs, move |g, s, v, _| {
        let logit = classify(g, s, v[0], &head)?;
        g.sum(logit)
    })?;

    let inputs = vec![Tensor::vector(vec![suite.rng.random_range(-3.0..3.0)])];
    suite.record("bce_loss", empty(), inputs, |g, _, v, _| {
        let a = g.bce_with_logits(v[0], 1.0)?;
        let b = g.bce_with_logits(v[0], 0.0)?;
        let b = g.scale(b, 0.3)?;
        g.add(a, b)
    })?;

    model_check(&mut suite)?;
    debug_assert!(suite.entries.iter().all(|e| e.checked > 0));
    Ok(suite.entries)
}

fn model_check(suite: &mut Suite) -> Result<()> {
    let cfg = ModelConfig::toy();
    let gen = GeneratorConfig {
        n_samples: 1,
        vocab_size: cfg.vocab_size,
        image_size: 8,
        num_attributes: 3,
        text_noise_tokens: 4,
        seed: suite.rng.random(),
        ..GeneratorConfig::default()
    };
    let vocab = synthetic_vocabulary(cfg.vocab_size)?;
    let sample = generate_synthetic(&gen)?.remove(0).encode(&vocab, &cfg)?;
    let model = Model::new(cfg, suite.rng.random())?;
    // Zero-initialised biases put ReLU inputs exactly on the kink wherever a
    // block input is all zeros; jitter every parameter off those points.
    let mut store = model.params().clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let noise = normal_tensor(&shape, 0.05, &mut suite.rng);
        for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let (max_error, checked) = check(&mut store, &[], |g, s, _| {
        let out = model.forward_with(s, g, &sample, &mut Mode::Eval)?;
        g.bce_with_logits(out.logit, f64::from(sample.label))
    })?;
    suite.entries.push(GradcheckEntry {
        name: "model_forward".into(),
        max_error,
        checked,
    });
    Ok(())
}

fn kind_name(kind: Elementwise) -> &'static str {
    match kind {
        Elementwise::Tanh => "tanh",
        Elementwise::Sigmoid => "sigmoid",
        Elementwise::Relu => "relu",
        Elementwise::Gelu => "gelu",
        Elementwise::Add => "add",
        Elementwise::Sub => "sub",
        Elementwise::Mul => "mul",
        Elementwise::ScaleShift => "scale_shift",
    }
}

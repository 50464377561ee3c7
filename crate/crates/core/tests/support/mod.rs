//! Oracles shared by the property tests and the acceptance run.

#![allow(dead_code)]

use dmn_autodiff::gradcheck::{central_difference, relative_error};
use dmn_autodiff::{Gradients, ParamStore, Tape, Tensor, Var};
use dmn_core::dataset::{generate_dataset, DatasetConfig, Example};
use dmn_core::layout::{
    enumerate_valid, legal_next_tokens, ModuleKind, Output, StackState, Symbol, END_INDEX, NUM_SYMBOLS,
};
use dmn_core::model::{LayoutChoice, Model, ModelConfig};
use dmn_core::modules::{map_features, ModuleDims, NeuralModules};
use dmn_core::policy::{ContextMode, LayoutPolicy, PolicyDims, Vocabulary};
use dmn_core::scene::{generate_scene, scene_features, SceneConfig, FEATURE_DIM};
use dmn_core::trainer::{answer_loss, rollout_surrogate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- layouts ----

/// Reference validity check by recursive descent from the right end: a
/// valid program is exactly one Prediction-rooted tree whose internal
/// edges all carry attention maps.
pub fn reference_valid(seq: &[Symbol]) -> bool {
    fn parse(seq: &[Symbol], end: usize) -> Option<(usize, Output)> {
        let Symbol::Module(kind) = *seq.get(end.checked_sub(1)?)? else {
            return None;
        };
        let sig = kind.signature();
        let mut cursor = end - 1;
        for _ in 0..sig.arity {
            let (start, out) = parse(seq, cursor)?;
            if out != Output::Attention {
                return None;
            }
            cursor = start;
        }
        Some((cursor, sig.output))
    }
    matches!(parse(seq, seq.len()), Some((0, Output::Prediction)))
}

/// Every sequence over the full symbol alphabet of length `1..=max_len`.
pub fn all_sequences(max_len: usize) -> Vec<Vec<Symbol>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<Symbol>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(layer.len() * NUM_SYMBOLS);
        for prefix in &layer {
            for s in 0..NUM_SYMBOLS {
                let mut seq = prefix.clone();
                seq.push(Symbol::from_index(s));
                next.push(seq);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

pub fn to_kinds(seq: &[Symbol]) -> Vec<ModuleKind> {
    seq.iter()
        .map(|s| match s {
            Symbol::Module(k) => *k,
            Symbol::End => unreachable!("valid programs contain no END"),
        })
        .collect()
}

/// Samples uniformly among legal symbols until END.
pub fn random_rollout(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<ModuleKind> {
    let mut state = StackState::new();
    let mut out = Vec::new();
    loop {
        let mask = legal_next_tokens(&state, max_len);
        let legal: Vec<usize> = (0..NUM_SYMBOLS).filter(|&i| mask[i]).collect();
        assert!(!legal.is_empty(), "dead end after {out:?}");
        let sym = legal[rng.gen_range(0..legal.len())];
        if sym == END_INDEX {
            return out;
        }
        let Symbol::Module(k) = Symbol::from_index(sym) else { unreachable!() };
        out.push(k);
        state.push(Symbol::Module(k));
    }
}

// ---- finite differences ----

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

pub const MODULE_DIMS: ModuleDims = ModuleDims {
    cells: 25,
    d_img: FEATURE_DIM,
    d_txt: 6,
    d_hidden: 5,
};

pub fn flat_grads(store: &ParamStore, grads: &Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for (id, _, t) in store.iter() {
        match grads.param(id) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }
    out
}

fn flatten(store: &ParamStore, inputs: &[Tensor]) -> Vec<f64> {
    let mut out: Vec<f64> = store.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
    for t in inputs {
        out.extend_from_slice(t.data());
    }
    out
}

fn unflatten(store: &mut ParamStore, inputs: &mut [Tensor], flat: &[f64]) {
    let mut at = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let data = store.get_mut(id).data_mut();
        let n = data.len();
        data.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    for t in inputs {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Relative error between the tape gradient of `loss` and central
/// differences over every parameter and input.
pub fn gradient_error<F>(store: &ParamStore, inputs: Vec<Tensor>, loss: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let inputs: Vec<Tensor> = inputs.into_iter().map(Tensor::with_grad).collect();
    let analytic = {
        let mut tape = Tape::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
        let l = loss(&mut tape, &vars);
        let grads = tape.backward(l).unwrap();
        let mut g = flat_grads(store, &grads);
        for (v, t) in vars.iter().zip(&inputs) {
            match grads.input(*v) {
                Some(p) => g.extend_from_slice(p),
                None => g.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        g
    };
    let x0 = flatten(store, &inputs);
    let mut probe_store = store.clone();
    let mut probe_inputs = inputs.clone();
    let numeric = central_difference(
        |x| {
            unflatten(&mut probe_store, &mut probe_inputs, x);
            let mut tape = Tape::with_params(&probe_store);
            let vars: Vec<Var> = probe_inputs.iter().map(|t| tape.input(t)).collect();
            let l = loss(&mut tape, &vars);
            tape.item(l)
        },
        &x0,
        GRAD_STEP,
    );
    assert!(analytic.iter().any(|g| *g != 0.0), "gradient is identically zero");
    relative_error(&analytic, &numeric)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `Σ w ⊙ out` with fixed random weights so every output element matters.
fn probe(tape: &mut Tape<'_>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.numel(out);
    let w = tape
        .constant(tape.shape(out).to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// One module with randomized parameters, text vector and input maps.
pub fn module_gradient_error(kind: ModuleKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let modules = NeuralModules::new(&mut store, MODULE_DIMS, &mut rng).unwrap();
    // zero-initialized biases get exercised too
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
    let features = scene_features(&scene).data;
    let mut inputs = vec![random_tensor(&mut rng, vec![MODULE_DIMS.d_txt], 1.0)];
    for _ in 0..kind.arity() {
        inputs.push(random_tensor(&mut rng, vec![MODULE_DIMS.cells], 2.0));
    }
    gradient_error(&store, inputs, |tape, vars| {
        let x = tape
            .constant(vec![MODULE_DIMS.cells, FEATURE_DIM], features.clone())
            .unwrap();
        let maps: Vec<Var> = vars[1..].iter().map(|l| tape.softmax(*l, 0).unwrap()).collect();
        let out = modules.apply(tape, kind, &maps, vars[0], x).unwrap().var();
        probe(tape, out, seed ^ 0xabc)
    })
}

pub fn cardinality_gradient_error(seed: u64) -> f64 {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(&mut rng, vec![25], 3.0);
    gradient_error(&store, vec![logits], |tape, vars| {
        let t = tape.softmax(vars[0], 0).unwrap();
        let f = map_features(tape, t).unwrap();
        probe(tape, f, seed)
    })
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

const PATH_QUESTIONS: [(&str, &str); 5] = [
    ("how many red circles are there", "find filter count"),
    ("is there a small square left of the blue triangle", "find filter relocate filter exist"),
    ("are there more circles than squares", "find find greater_than"),
    ("what color is the large triangle", "find filter describe"),
    ("how many things are red or blue", "find find or count"),
];

/// Answer cross-entropy minus layout log-probability through encoder,
/// decoder, word attention and the assembled network.
pub fn full_path_gradient_error(seed: u64) -> f64 {
    let qs: Vec<Vec<String>> = PATH_QUESTIONS.iter().map(|(q, _)| words(q)).collect();
    let vocab = Vocabulary::build(qs.iter().map(Vec::as_slice));
    let config = ModelConfig {
        d_emb: 4,
        d_hidden: 5,
        d_att: 3,
        d_tok: 3,
        d_module: 4,
        ..ModelConfig::default()
    };
    let model = Model::new(config, vocab, seed).unwrap();
    let i = seed as usize % PATH_QUESTIONS.len();
    let q = &qs[i];
    let tokens: Vec<ModuleKind> = PATH_QUESTIONS[i].1.split(' ').map(|s| s.parse().unwrap()).collect();
    let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
    let target = (seed as usize * 7) % dmn_core::ANSWER_VOCAB_SIZE;
    gradient_error(&model.store, Vec::new(), |tape, _| {
        let (sample, exec) = model.forward(tape, &scene, q, LayoutChoice::Given(&tokens)).unwrap();
        let nll = answer_loss(tape, exec.logits, target).unwrap();
        let lp = tape.scale(sample.log_prob, -1.0);
        tape.add(nll, lp).unwrap()
    })
}

// ---- policy distributions ----

pub const MODES: [ContextMode; 2] = [ContextMode::Attention, ContextMode::FinalState];

/// A small policy with weights scaled up so distributions are far from
/// uniform.
pub fn peaked_policy(seed: u64, mode: ContextMode, max_len: usize) -> (ParamStore, LayoutPolicy) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = PolicyDims {
        vocab_size: 7,
        d_emb: 4,
        d_hidden: 6,
        d_att: 4,
        d_tok: 3,
        max_len,
    };
    let p = LayoutPolicy::new(&mut store, dims, mode, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v * 3.0 + rng.gen_range(-0.5..0.5);
        }
    }
    (store, p)
}

pub fn word_ids(seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.gen_range(1..7);
    (0..n).map(|_| rng.gen_range(0..7)).collect()
}

pub fn layout_log_prob(store: &ParamStore, p: &LayoutPolicy, q: &[usize], tokens: &[ModuleKind]) -> f64 {
    let mut tape = Tape::with_params(store);
    let enc = p.encode(&mut tape, q).unwrap();
    let s = p.teacher_force(&mut tape, &enc, tokens).unwrap();
    tape.item(s.log_prob)
}

/// `Σ exp(log P(p|q))` over every valid layout of length at most `max_len`.
/// The mask forbids overlong prefixes, so no mass is lost to truncation.
pub fn total_layout_probability(seed: u64, mode: ContextMode, max_len: usize) -> f64 {
    let (store, p) = peaked_policy(seed, mode, max_len);
    let q = word_ids(seed);
    enumerate_valid(max_len)
        .iter()
        .map(|t| layout_log_prob(&store, &p, &q, t).exp())
        .sum()
}

// ---- REINFORCE on a three-question toy ----

pub const TOY_MAX_LEN: usize = 4;

pub struct Toy {
    pub ds: Vec<Example>,
    pub model: Model,
}

/// Three questions over layouts of length at most four, small enough to
/// enumerate every layout exactly.
pub fn toy() -> Toy {
    let config = DatasetConfig {
        train: 3,
        val: 0,
        test: 0,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&config, 11).unwrap().train;
    let vocab = Vocabulary::build(ds.iter().map(Example::question));
    let config = ModelConfig {
        d_emb: 4,
        d_hidden: 6,
        d_att: 4,
        d_tok: 3,
        d_module: 5,
        max_len: TOY_MAX_LEN,
        ..ModelConfig::default()
    };
    Toy {
        model: Model::new(config, vocab, 5).unwrap(),
        ds,
    }
}

/// Answer loss and layout log-probability of one layout on `tape`.
fn score(tape: &mut Tape<'_>, model: &Model, ex: &Example, tokens: &[ModuleKind]) -> (Var, Var) {
    let x = model.features(tape, &ex.record.scene).unwrap();
    let enc = model.encode(tape, ex.question()).unwrap();
    let s = model.policy.teacher_force(tape, &enc, tokens).unwrap();
    let exec = model.execute(tape, &s.tokens, &s.contexts, x).unwrap();
    (answer_loss(tape, exec.logits, ex.answer().index()).unwrap(), s.log_prob)
}

/// Gradient of `Σ_q Σ_p P(p|q) L(p, q)` by differentiating the enumerated sum.
pub fn exact_expected_gradient(toy: &Toy) -> Vec<f64> {
    let layouts = enumerate_valid(TOY_MAX_LEN);
    let mut tape = Tape::with_params(&toy.model.store);
    let mut total = tape.scalar(0.0);
    for ex in &toy.ds {
        for p in &layouts {
            let (loss, lp) = score(&mut tape, &toy.model, ex, p);
            let prob = tape.exp(lp);
            let term = tape.mul(prob, loss).unwrap();
            total = tape.add(total, term).unwrap();
        }
    }
    flat_grads(&toy.model.store, &tape.backward(total).unwrap())
}

/// Exact expectation of the surrogate gradient with baseline `b`, weighting
/// each layout by its probability held constant.
pub fn expected_surrogate_gradient(toy: &Toy, b: f64) -> Vec<f64> {
    let layouts = enumerate_valid(TOY_MAX_LEN);
    let mut tape = Tape::with_params(&toy.model.store);
    let mut total = tape.scalar(0.0);
    for ex in &toy.ds {
        for p in &layouts {
            let (loss, lp) = score(&mut tape, &toy.model, ex, p);
            let weight = tape.item(lp).exp();
            let s = rollout_surrogate(&mut tape, loss, lp, b).unwrap();
            let s = tape.scale(s, weight);
            total = tape.add(total, s).unwrap();
        }
    }
    flat_grads(&toy.model.store, &tape.backward(total).unwrap())
}

/// Mean surrogate gradient over `rollouts` sampled layouts per question,
/// summed over questions, with a constant baseline `b`.
pub fn monte_carlo_gradient(toy: &Toy, rollouts: usize, b: f64, seed: u64) -> Vec<f64> {
    const PER_TAPE: usize = 250;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; toy.model.store.num_scalars()];
    for ex in &toy.ds {
        let mut left = rollouts;
        while left > 0 {
            let n = left.min(PER_TAPE);
            left -= n;
            let mut tape = Tape::with_params(&toy.model.store);
            let x = toy.model.features(&mut tape, &ex.record.scene).unwrap();
            let enc = toy.model.encode(&mut tape, ex.question()).unwrap();
            let mut total = tape.scalar(0.0);
            for _ in 0..n {
                let s = toy.model.policy.sample(&mut tape, &enc, &mut rng, 1.0).unwrap();
                let exec = toy.model.execute(&mut tape, &s.tokens, &s.contexts, x).unwrap();
                let loss = answer_loss(&mut tape, exec.logits, ex.answer().index()).unwrap();
                let sur = rollout_surrogate(&mut tape, loss, s.log_prob, b).unwrap();
                total = tape.add(total, sur).unwrap();
            }
            let g = flat_grads(&toy.model.store, &tape.backward(total).unwrap());
            for (acc, v) in sum.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }
    sum.iter().map(|v| v / rollouts as f64).collect()
}

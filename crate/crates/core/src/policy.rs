//! Question encoder and masked attention decoder over layout tokens.

use std::collections::HashMap;

use dmn_autodiff::{ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{legal_next_tokens, Mask, ModuleKind, StackState, Symbol, NUM_SYMBOLS};

pub const UNK: &str = "<unk>";

/// Word index: UNK at 0, then the corpus words in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a [String]>) -> Vocabulary {
        let mut words: Vec<String> = questions
            .into_iter()
            .flatten()
            .filter(|w| w.as_str() != UNK)
            .cloned()
            .collect();
        words.sort();
        words.dedup();
        words.insert(0, UNK.to_string());
        Vocabulary::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Vocabulary {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(self) -> Vocabulary {
        Vocabulary::from_words(self.words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Word ids; out-of-vocabulary words map to UNK.
    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.index.get(w.as_str()).copied().unwrap_or(0))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab_size: usize,
    pub d_emb: usize,
    /// Shared by encoder and decoder; also the text-vector width.
    pub d_hidden: usize,
    pub d_att: usize,
    pub d_tok: usize,
    pub max_len: usize,
}

/// Where the per-step text vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Soft attention over encoder states.
    Attention,
    /// The encoder's final state at every step (no attention).
    FinalState,
}

#[derive(Clone, Debug)]
struct Lstm {
    w: ParamId,
    b: ParamId,
    d: usize,
}

impl Lstm {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut R) -> Result<Lstm> {
        Ok(Lstm {
            w: store.glorot(format!("{name}.w"), d_in + d, 4 * d, rng)?,
            b: store.zeros(format!("{name}.b"), vec![4 * d])?,
            d,
        })
    }

    fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.d;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xh = tape.concat(&[x, h])?;
        let z = tape.matmul(xh, w)?;
        let gates = tape.add(z, b)?;
        let gi = tape.slice(gates, 0, d)?;
        let gf = tape.slice(gates, d, d)?;
        let gg = tape.slice(gates, 2 * d, d)?;
        let go = tape.slice(gates, 3 * d, d)?;
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

#[derive(Clone, Debug)]
pub struct LayoutPolicy {
    dims: PolicyDims,
    mode: ContextMode,
    word_emb: ParamId,
    encoder: Lstm,
    tok_emb: ParamId,
    decoder: Lstm,
    att_h: ParamId,
    att_s: ParamId,
    att_v: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Encoder output for one question, living on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Vec<Var>,
    /// States stacked as `[n, d]`.
    pub matrix: Var,
    /// `matrix · W_h`, precomputed for attention scoring.
    pub projected: Var,
    pub final_h: Var,
    pub final_c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    prev: usize,
    pub stack: StackState,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderStep {
    pub state: DecoderState,
    /// Attention over question words; absent in final-state mode.
    pub alpha: Option<Var>,
    pub context: Var,
    /// Masked log-probabilities over the symbol alphabet.
    pub log_probs: Var,
    pub mask: Mask,
}

/// A decoded layout with its per-step quantities. END is implicit after the
/// final token and has probability one under the mask.
#[derive(Clone, Debug)]
pub struct PolicySample {
    pub tokens: Vec<ModuleKind>,
    pub step_log_probs: Vec<Var>,
    pub contexts: Vec<Var>,
    pub alphas: Vec<Option<Var>>,
    pub log_prob: Var,
}

const START: usize = NUM_SYMBOLS;

impl LayoutPolicy {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: PolicyDims, mode: ContextMode, rng: &mut R) -> Result<Self> {
        if dims.vocab_size == 0 || dims.max_len < 2 {
            return Err(Error::Config(format!(
                "policy needs a nonempty vocabulary and max_len >= 2, got {} and {}",
                dims.vocab_size, dims.max_len
            )));
        }
        let d = dims.d_hidden;
        Ok(LayoutPolicy {
            dims,
            mode,
            word_emb: store.glorot("policy.word_emb", dims.vocab_size, dims.d_emb, rng)?,
            encoder: Lstm::new(store, "policy.encoder", dims.d_emb, d, rng)?,
            tok_emb: store.glorot("policy.tok_emb", NUM_SYMBOLS + 1, dims.d_tok, rng)?,
            decoder: Lstm::new(store, "policy.decoder", dims.d_tok, d, rng)?,
            att_h: store.glorot("policy.att.w_h", d, dims.d_att, rng)?,
            att_s: store.glorot("policy.att.w_s", d, dims.d_att, rng)?,
            att_v: store.glorot_vector("policy.att.v", dims.d_att, rng)?,
            w_out: store.glorot("policy.out.w", 2 * d, NUM_SYMBOLS, rng)?,
            b_out: store.zeros("policy.out.b", vec![NUM_SYMBOLS])?,
        })
    }

    pub fn dims(&self) -> PolicyDims {
        self.dims
    }

    pub fn mode(&self) -> ContextMode {
        self.mode
    }

    pub fn with_mode(&self, mode: ContextMode) -> LayoutPolicy {
        LayoutPolicy {
            mode,
            ..self.clone()
        }
    }

    pub fn encode(&self, tape: &mut Tape<'_>, word_ids: &[usize]) -> Result<Encoded> {
        if word_ids.is_empty() {
            return Err(Error::Config("empty question".into()));
        }
        let d = self.dims.d_hidden;
        let emb = tape.param(self.word_emb);
        let mut h = tape.constant(vec![d], vec![0.0; d])?;
        let mut c = tape.constant(vec![d], vec![0.0; d])?;
        let mut states = Vec::with_capacity(word_ids.len());
        let mut rows = Vec::with_capacity(word_ids.len());
        for &w in word_ids {
            if w >= self.dims.vocab_size {
                return Err(Error::VocabularyMismatch(format!(
                    "word id {w} outside a vocabulary of {}",
                    self.dims.vocab_size
                )));
            }
            let x = tape.slice(emb, w * self.dims.d_emb, self.dims.d_emb)?;
            (h, c) = self.encoder.step(tape, x, h, c)?;
            states.push(h);
            rows.push(tape.reshape(h, vec![1, d])?);
        }
        let matrix = tape.concat(&rows)?;
        let w_h = tape.param(self.att_h);
        let projected = tape.matmul(matrix, w_h)?;
        Ok(Encoded {
            states,
            matrix,
            projected,
            final_h: h,
            final_c: c,
        })
    }

    pub fn initial_state(&self, enc: &Encoded) -> DecoderState {
        DecoderState {
            h: enc.final_h,
            c: enc.final_c,
            prev: START,
            stack: StackState::new(),
        }
    }

    /// Advances the decoder by one step from `state` and scores the next
    /// symbol under the legality mask.
    pub fn step(&self, tape: &mut Tape<'_>, enc: &Encoded, state: &DecoderState) -> Result<DecoderStep> {
        let mask = legal_next_tokens(&state.stack, self.dims.max_len);
        if !mask.iter().any(|m| *m) {
            return Err(Error::Invariant("decoder mask has no legal symbol".into()));
        }
        let tok = tape.param(self.tok_emb);
        let x = tape.slice(tok, state.prev * self.dims.d_tok, self.dims.d_tok)?;
        let (h, c) = self.decoder.step(tape, x, state.h, state.c)?;
        let (alpha, context) = match self.mode {
            ContextMode::Attention => {
                let w_s = tape.param(self.att_s);
                let v = tape.param(self.att_v);
                let s = tape.matmul(h, w_s)?;
                let pre = tape.add(enc.projected, s)?;
                let act = tape.tanh(pre);
                let e = tape.matmul(act, v)?;
                let alpha = tape.softmax(e, 0)?;
                let ctx = tape.matmul(alpha, enc.matrix)?;
                (Some(alpha), ctx)
            }
            ContextMode::FinalState => (None, enc.final_h),
        };
        let w_out = tape.param(self.w_out);
        let b_out = tape.param(self.b_out);
        let feat = tape.concat(&[h, context])?;
        let z = tape.matmul(feat, w_out)?;
        let logits = tape.add(z, b_out)?;
        let penalty: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let penalty = tape.constant(vec![NUM_SYMBOLS], penalty)?;
        let masked = tape.add(logits, penalty)?;
        let log_probs = tape.log_softmax(masked, 0)?;
        Ok(DecoderStep {
            state: DecoderState {
                h,
                c,
                prev: state.prev,
                stack: state.stack,
            },
            alpha,
            context,
            log_probs,
            mask,
        })
    }

    /// Runs the decoder along `choose`'s picks until a Prediction token.
    fn rollout(
        &self,
        tape: &mut Tape<'_>,
        enc: &Encoded,
        mut choose: impl FnMut(usize, &[f64], &Mask) -> Result<usize>,
    ) -> Result<PolicySample> {
        let mut state = self.initial_state(enc);
        let mut sample = PolicySample {
            tokens: Vec::new(),
            step_log_probs: Vec::new(),
            contexts: Vec::new(),
            alphas: Vec::new(),
            log_prob: tape.scalar(0.0),
        };
        loop {
            let step = self.step(tape, enc, &state)?;
            let t = sample.tokens.len();
            let sym = choose(t, tape.value(step.log_probs), &step.mask)?;
            if !step.mask[sym] {
                return Err(Error::Invariant(format!(
                    "illegal symbol {} chosen at step {}",
                    Symbol::from_index(sym),
                    t + 1
                )));
            }
            let Symbol::Module(kind) = Symbol::from_index(sym) else {
                return Err(Error::Invariant("END chosen before a prediction".into()));
            };
            let lp = tape.slice(step.log_probs, sym, 1)?;
            sample.log_prob = tape.add(sample.log_prob, lp)?;
            sample.step_log_probs.push(lp);
            sample.contexts.push(step.context);
            sample.alphas.push(step.alpha);
            sample.tokens.push(kind);
            state = step.state;
            state.stack.push(Symbol::Module(kind));
            state.prev = sym;
            if state.stack.terminated {
                return Ok(sample);
            }
        }
    }

    /// Ancestral sampling at `temperature` (0 means argmax). Recorded
    /// log-probabilities are always those of the untempered policy.
    pub fn sample<R: Rng>(
        &self,
        tape: &mut Tape<'_>,
        enc: &Encoded,
        rng: &mut R,
        temperature: f64,
    ) -> Result<PolicySample> {
        self.rollout(tape, enc, |_, lp, mask| {
            if temperature <= 0.0 {
                return Ok(argmax(lp, mask));
            }
            let top = lp
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(l, _)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = lp
                .iter()
                .zip(mask)
                .map(|(l, m)| if *m { ((l - top) / temperature).exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut last = 0;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    last = i;
                    if u < *w {
                        return Ok(i);
                    }
                    u -= w;
                }
            }
            Ok(last)
        })
    }

    pub fn greedy(&self, tape: &mut Tape<'_>, enc: &Encoded) -> Result<PolicySample> {
        self.rollout(tape, enc, |_, lp, mask| Ok(argmax(lp, mask)))
    }

    /// Scores a given token sequence under the same masking as sampling.
    pub fn teacher_force(&self, tape: &mut Tape<'_>, enc: &Encoded, tokens: &[ModuleKind]) -> Result<PolicySample> {
        let report = crate::layout::validate(tokens);
        if !report.is_valid() {
            return Err(Error::InvalidLayout(report));
        }
        if tokens.len() > self.dims.max_len {
            return Err(Error::Config(format!(
                "layout of {} tokens exceeds max_len {}",
                tokens.len(),
                self.dims.max_len
            )));
        }
        self.rollout(tape, enc, |t, _, _| Ok(tokens[t].index()))
    }

    /// Masked beam search by total log-probability. Ties are broken by
    /// token-index order; the greedy sequence is always among the
    /// candidates, so the result never scores below it.
    pub fn beam_search(&self, tape: &mut Tape<'_>, enc: &Encoded, width: usize) -> Result<Vec<ModuleKind>> {
        if width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        struct Hyp {
            tokens: Vec<ModuleKind>,
            score: f64,
            state: DecoderState,
            done: bool,
        }
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            state: self.initial_state(enc),
            done: false,
        }];
        while beams.iter().any(|b| !b.done) {
            let mut next: Vec<Hyp> = Vec::new();
            for b in beams {
                if b.done {
                    next.push(b);
                    continue;
                }
                let step = self.step(tape, enc, &b.state)?;
                let lp = tape.value(step.log_probs).to_vec();
                for (sym, &legal) in step.mask.iter().enumerate() {
                    let Symbol::Module(kind) = Symbol::from_index(sym) else {
                        continue;
                    };
                    if !legal {
                        continue;
                    }
                    let mut state = step.state;
                    state.stack.push(Symbol::Module(kind));
                    state.prev = sym;
                    let mut tokens = b.tokens.clone();
                    tokens.push(kind);
                    next.push(Hyp {
                        tokens,
                        score: b.score + lp[sym],
                        done: state.stack.terminated,
                        state,
                    });
                }
            }
            // stable: equal scores keep parent order, then token order
            next.sort_by(|a, b| b.score.total_cmp(&a.score));
            next.truncate(width);
            beams = next;
        }
        let best = beams.into_iter().next().expect("at least one hypothesis");
        let greedy = self.greedy(tape, enc)?;
        if tape.item(greedy.log_prob) > best.score {
            Ok(greedy.tokens)
        } else {
            Ok(best.tokens)
        }
    }
}

/// First index of the largest legal log-probability.
fn argmax(lp: &[f64], mask: &Mask) -> usize {
    let mut best = None;
    for (i, (&l, &m)) in lp.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    best.expect("nonempty mask").0
}

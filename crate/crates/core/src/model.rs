//! Policy, modules and vocabulary bundled with checkpoint IO and inference.

use std::path::Path;

use dmn_autodiff::checkpoint;
use dmn_autodiff::{ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::Answer;
use crate::error::{Error, Result};
use crate::layout::{parse_rpn, ModuleKind, ModuleToken};
use crate::modules::{assemble_and_execute, Execution, ModuleDims, ModuleValue, NeuralModules};
use crate::policy::{ContextMode, Encoded, LayoutPolicy, PolicyDims, PolicySample, Vocabulary};
use crate::scene::{scene_features, SceneGraph, FEATURE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_size: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_att: usize,
    pub d_tok: usize,
    pub d_module: usize,
    pub max_len: usize,
    pub context: ContextMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_size: 5,
            d_emb: 64,
            d_hidden: 128,
            d_att: 64,
            d_tok: 32,
            d_module: 64,
            max_len: 9,
            context: ContextMode::Attention,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    vocabulary: Vocabulary,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub modules: NeuralModules,
    pub policy: LayoutPolicy,
}

/// Which layout a forward pass executes.
#[derive(Clone, Copy, Debug)]
pub enum LayoutChoice<'a> {
    Given(&'a [ModuleKind]),
    Beam(usize),
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Model> {
        if config.grid_size == 0 {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let policy = LayoutPolicy::new(
            &mut store,
            PolicyDims {
                vocab_size: vocab.len(),
                d_emb: config.d_emb,
                d_hidden: config.d_hidden,
                d_att: config.d_att,
                d_tok: config.d_tok,
                max_len: config.max_len,
            },
            config.context,
            &mut rng,
        )?;
        let modules = NeuralModules::new(
            &mut store,
            ModuleDims {
                cells: config.grid_size * config.grid_size,
                d_img: FEATURE_DIM,
                d_txt: config.d_hidden,
                d_hidden: config.d_module,
            },
            &mut rng,
        )?;
        Ok(Model {
            config,
            vocab,
            store,
            modules,
            policy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&Metadata {
            model: self.config,
            vocabulary: self.vocab.clone(),
        })?;
        checkpoint::save(path, &self.store, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let archive = checkpoint::load(path)?;
        let meta: Metadata = serde_json::from_str(&archive.metadata)
            .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut model = Model::new(meta.model, meta.vocabulary.reindex(), 0)?;
        if archive.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                archive.params.len(),
                model.store.len()
            )));
        }
        model.store.load_values(&archive.params)?;
        Ok(model)
    }

    pub fn features(&self, tape: &mut Tape<'_>, scene: &SceneGraph) -> Result<Var> {
        if scene.grid_size != self.config.grid_size {
            return Err(Error::Config(format!(
                "scene grid {} does not match model grid {}",
                scene.grid_size, self.config.grid_size
            )));
        }
        let f = scene_features(scene);
        Ok(tape.constant(vec![f.cells(), FEATURE_DIM], f.data)?)
    }

    pub fn encode(&self, tape: &mut Tape<'_>, question: &[String]) -> Result<Encoded> {
        let ids = self.vocab.encode(question);
        self.policy.encode(tape, &ids)
    }

    /// Assembles `tokens` into a network and runs it with per-token text
    /// vectors `contexts`.
    pub fn execute(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[ModuleKind],
        contexts: &[Var],
        x_img: Var,
    ) -> Result<Execution> {
        let bare: Vec<ModuleToken> = tokens.iter().map(|k| ModuleToken::bare(*k)).collect();
        let tree = parse_rpn(&bare)?;
        assemble_and_execute(&self.modules, tape, &tree, contexts, x_img)
    }

    /// Decodes (or teacher-forces) a layout and executes it.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        scene: &SceneGraph,
        question: &[String],
        choice: LayoutChoice<'_>,
    ) -> Result<(PolicySample, Execution)> {
        let x = self.features(tape, scene)?;
        let enc = self.encode(tape, question)?;
        let sample = match choice {
            LayoutChoice::Given(tokens) => self.policy.teacher_force(tape, &enc, tokens)?,
            LayoutChoice::Beam(width) if width <= 1 => self.policy.greedy(tape, &enc)?,
            LayoutChoice::Beam(width) => {
                let tokens = self.policy.beam_search(tape, &enc, width)?;
                self.policy.teacher_force(tape, &enc, &tokens)?
            }
        };
        let exec = self.execute(tape, &sample.tokens, &sample.contexts, x)?;
        Ok((sample, exec))
    }

    /// Answer and readable trace for one question.
    pub fn infer(
        &self,
        scene: &SceneGraph,
        question: &[String],
        choice: LayoutChoice<'_>,
    ) -> Result<Trace> {
        let mut tape = Tape::with_params(&self.store);
        let (sample, exec) = self.forward(&mut tape, scene, question, choice)?;
        let g = self.config.grid_size;
        let logits = tape.value(exec.logits).to_vec();
        let answer = Answer::from_index(argmax(&logits)).expect("logit length is the vocabulary size");
        let nodes = exec
            .nodes
            .iter()
            .map(|(position, kind, value)| NodeTrace {
                position: *position,
                module: kind.name().to_string(),
                attention: match value {
                    ModuleValue::Attention(v) => Some(tape.value(*v).chunks(g).map(<[f64]>::to_vec).collect()),
                    ModuleValue::Prediction(_) => None,
                },
            })
            .collect();
        Ok(Trace {
            question: question.to_vec(),
            unknown_words: question
                .iter()
                .filter(|w| !self.vocab.contains(w))
                .cloned()
                .collect(),
            layout: sample.tokens.iter().map(|k| k.name().to_string()).collect(),
            layout_log_prob: tape.item(sample.log_prob),
            word_attention: sample
                .alphas
                .iter()
                .map(|a| a.map(|a| tape.value(a).to_vec()))
                .collect(),
            nodes,
            logits,
            answer,
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeTrace {
    pub position: usize,
    pub module: String,
    /// `G × G` map for attention-producing modules.
    pub attention: Option<Vec<Vec<f64>>>,
}

/// Reasoning trace for one question: layout, per-step word attention,
/// per-node attention maps and final logits.
#[derive(Clone, Debug, Serialize)]
pub struct Trace {
    pub question: Vec<String>,
    pub unknown_words: Vec<String>,
    pub layout: Vec<String>,
    pub layout_log_prob: f64,
    pub word_attention: Vec<Option<Vec<f64>>>,
    pub nodes: Vec<NodeTrace>,
    pub logits: Vec<f64>,
    pub answer: Answer,
}

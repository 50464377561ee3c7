//! Cloning warm-up, REINFORCE fine-tuning, ablations and evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use dmn_autodiff::{Adam, AdamConfig, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{Answer, ANSWER_VOCAB_SIZE};
use crate::dataset::{Dataset, Example};
use crate::error::{Error, Result};
use crate::layout::{kinds_of, ModuleKind};
use crate::model::{argmax, LayoutChoice, Model, ModelConfig};
use crate::policy::{ContextMode, Vocabulary};
use crate::questions::Category;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "full")]
    Full,
    /// Decoder without word attention.
    #[serde(rename = "baseline1")]
    BaselineI,
    /// Expert layouts in place of the policy.
    #[serde(rename = "baseline2")]
    BaselineII,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::BaselineI, Ablation::BaselineII];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::BaselineI => "baseline1",
            Ablation::BaselineII => "baseline2",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation `{s}` (expected full, baseline1 or baseline2)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub cloning_epochs: usize,
    pub reinforce_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size during the REINFORCE phase.
    pub reinforce_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rollouts: usize,
    pub baseline_decay: f64,
    pub clip_norm: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cloning_epochs: 30,
            reinforce_epochs: 3,
            batch_size: 16,
            learning_rate: 3e-3,
            reinforce_learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rollouts: 4,
            baseline_decay: 0.9,
            clip_norm: 5.0,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rollouts == 0 {
            return bad("rollouts must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay {} outside [0, 1)", self.baseline_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.reinforce_learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning rates and clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam hyperparameters out of range".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Softmax cross-entropy of `logits` against answer index `answer`.
pub fn answer_loss(tape: &mut Tape<'_>, logits: Var, answer: usize) -> Result<Var> {
    let n = tape.numel(logits);
    if answer >= n {
        return Err(Error::UnknownAnswer(format!("index {answer} with {n} logits")));
    }
    let lp = tape.log_softmax(logits, 0)?;
    let pick = tape.slice(lp, answer, 1)?;
    Ok(tape.scale(pick, -1.0))
}

/// Exponential moving average of observed answer losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBaseline {
    pub value: Option<f64>,
    pub decay: f64,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        RewardBaseline { value: None, decay }
    }

    /// The first observation initializes the average.
    pub fn update(&mut self, batch_mean: f64) {
        self.value = Some(match self.value {
            None => batch_mean,
            Some(b) => self.decay * b + (1.0 - self.decay) * batch_mean,
        });
    }
}

/// `L̂ + (L̂ − b)·log P` for one executed rollout; its gradient is the
/// pathwise term plus the baseline-corrected score-function term.
pub fn rollout_surrogate(tape: &mut Tape<'_>, loss: Var, log_prob: Var, baseline: f64) -> Result<Var> {
    let advantage = tape.item(loss) - baseline;
    let score = tape.scale(log_prob, advantage);
    Ok(tape.add(loss, score)?)
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub baseline: RewardBaseline,
    pub discarded_rollouts: usize,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let adam = Adam::new(config.adam(), &model.store);
        Ok(Trainer {
            baseline: RewardBaseline::new(config.baseline_decay),
            discarded_rollouts: 0,
            adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            model,
            config,
        })
    }

    fn apply_update(&mut self) -> Result<()> {
        self.model.store.clip_grad_norm(self.config.clip_norm);
        self.adam.step(&mut self.model.store)?;
        if !self.model.store.all_finite() {
            return Err(Error::Invariant("non-finite parameter after update".into()));
        }
        Ok(())
    }

    /// Teacher-forced token cross-entropy plus answer loss through the
    /// expert layout, averaged over the batch; one optimizer step. With
    /// `token_loss` off only the answer term is trained.
    pub fn cloning_step(&mut self, batch: &[&Example]) -> Result<f64> {
        self.supervised_step(batch, true)
    }

    fn supervised_step(&mut self, batch: &[&Example], token_loss: bool) -> Result<f64> {
        self.model.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            let expert = kinds_of(&ex.layout);
            let (value, grads) = {
                let mut tape = Tape::with_params(&self.model.store);
                let (sample, exec) = self.model.forward(
                    &mut tape,
                    &ex.record.scene,
                    ex.question(),
                    LayoutChoice::Given(&expert),
                )?;
                let mut loss = answer_loss(&mut tape, exec.logits, ex.answer().index())?;
                if token_loss {
                    let nll = tape.scale(sample.log_prob, -1.0);
                    loss = tape.add(loss, nll)?;
                }
                let value = tape.item(loss);
                let obj = tape.scale(loss, scale);
                (value, tape.backward(obj)?)
            };
            self.model.store.accumulate(&grads);
            total += value;
        }
        self.apply_update()?;
        Ok(total * scale)
    }

    /// K sampled layouts per question, surrogate
    /// `(1/K) Σ [L̂ₖ + (L̂ₖ − b)·log P(pₖ|q)]`, one optimizer step, then the
    /// baseline update. Returns the mean sampled answer loss.
    pub fn reinforce_step(&mut self, batch: &[&Example]) -> Result<f64> {
        self.model.store.zero_grads();
        let k = self.config.rollouts;
        let mut losses = Vec::with_capacity(batch.len() * k);
        for ex in batch {
            let grads = {
                let model = &self.model;
                let mut tape = Tape::with_params(&model.store);
                let x = model.features(&mut tape, &ex.record.scene)?;
                let enc = model.encode(&mut tape, ex.question())?;
                let mut rollouts = Vec::with_capacity(k);
                for _ in 0..k {
                    let sample = model.policy.sample(&mut tape, &enc, &mut self.rng, 1.0)?;
                    match model.execute(&mut tape, &sample.tokens, &sample.contexts, x) {
                        Ok(exec) => {
                            let loss = answer_loss(&mut tape, exec.logits, ex.answer().index())?;
                            rollouts.push((loss, sample.log_prob));
                        }
                        Err(_) => self.discarded_rollouts += 1,
                    }
                }
                if rollouts.is_empty() {
                    continue;
                }
                let values: Vec<f64> = rollouts.iter().map(|(l, _)| tape.item(*l)).collect();
                let b = self
                    .baseline
                    .value
                    .unwrap_or_else(|| values.iter().sum::<f64>() / values.len() as f64);
                losses.extend_from_slice(&values);
                let mut obj: Option<Var> = None;
                for (loss, log_prob) in rollouts {
                    let s = rollout_surrogate(&mut tape, loss, log_prob, b)?;
                    obj = Some(match obj {
                        None => s,
                        Some(acc) => tape.add(acc, s)?,
                    });
                }
                let obj = tape.scale(obj.expect("nonempty"), 1.0 / (k * batch.len()) as f64);
                tape.backward(obj)?
            };
            self.model.store.accumulate(&grads);
        }
        self.apply_update()?;
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        if !losses.is_empty() {
            self.baseline.update(mean);
        }
        Ok(mean)
    }

    /// Answer loss through expert layouts only; the policy's token
    /// distribution is never trained.
    pub fn expert_step(&mut self, batch: &[&Example]) -> Result<f64> {
        self.supervised_step(batch, false)
    }
}

/// How evaluation picks the layout to execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalLayouts {
    Expert,
    Predicted { beam: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub correct: usize,
}

impl Tally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
    }

    pub fn merge(&mut self, other: &Tally) {
        self.total += other.total;
        self.correct += other.correct;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Tally,
    pub exist: Tally,
    pub count: Tally,
    pub yes_no: Tally,
    pub compare: Tally,
    pub layout_exact: Tally,
}

impl EvalReport {
    pub fn category(&self, c: Category) -> &Tally {
        match c {
            Category::Exist => &self.exist,
            Category::Count => &self.count,
            Category::YesNo => &self.yes_no,
            Category::Compare => &self.compare,
        }
    }

    fn category_mut(&mut self, c: Category) -> &mut Tally {
        match c {
            Category::Exist => &mut self.exist,
            Category::Count => &mut self.count,
            Category::YesNo => &mut self.yes_no,
            Category::Compare => &mut self.compare,
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy().unwrap_or(0.0)
    }

    pub fn layout_exact_match(&self) -> f64 {
        self.layout_exact.accuracy().unwrap_or(0.0)
    }

    /// Adds another report's counts, e.g. from a disjoint shard.
    pub fn merge(&mut self, other: &EvalReport) {
        self.overall.merge(&other.overall);
        for c in Category::ALL {
            self.category_mut(c).merge(other.category(c));
        }
        self.layout_exact.merge(&other.layout_exact);
    }

    /// Records one prediction.
    pub fn record(&mut self, category: Category, predicted: Answer, expected: Answer, layout_match: bool) {
        let ok = predicted == expected;
        self.overall.add(ok);
        self.category_mut(category).add(ok);
        self.layout_exact.add(layout_match);
    }
}

/// Fails if the split uses words the model's vocabulary has never seen.
pub fn check_vocabulary(vocab: &Vocabulary, examples: &[Example]) -> Result<()> {
    let mut missing: Vec<&str> = examples
        .iter()
        .flat_map(|e| e.question())
        .filter(|w| !vocab.contains(w))
        .map(String::as_str)
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::VocabularyMismatch(format!(
            "{} dataset words missing from the checkpoint vocabulary: {}",
            missing.len(),
            missing.join(", ")
        )))
    }
}

/// Answer accuracy overall and per category, plus layout exact-match
/// against the expert layouts.
pub fn evaluate(model: &Model, examples: &[Example], layouts: EvalLayouts) -> Result<EvalReport> {
    check_vocabulary(&model.vocab, examples)?;
    let mut report = EvalReport::default();
    for ex in examples {
        let expert = kinds_of(&ex.layout);
        let choice = match layouts {
            EvalLayouts::Expert => LayoutChoice::Given(&expert),
            EvalLayouts::Predicted { beam } => LayoutChoice::Beam(beam),
        };
        let mut tape = Tape::with_params(&model.store);
        let (sample, exec) = model.forward(&mut tape, &ex.record.scene, ex.question(), choice)?;
        let predicted = Answer::from_index(argmax(tape.value(exec.logits))).expect("vocabulary-sized logits");
        report.record(ex.category(), predicted, ex.answer(), sample.tokens == expert);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_exist: Option<f64>,
    pub val_count: Option<f64>,
    pub val_yes_no: Option<f64>,
    pub val_compare: Option<f64>,
    pub val_layout_exact_match: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: Ablation,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub discarded_rollouts: usize,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Model,
    pub report: TrainReport,
}

/// Layouts the given ablation executes at evaluation time.
pub fn eval_layouts(ablation: Ablation) -> EvalLayouts {
    match ablation {
        Ablation::BaselineII => EvalLayouts::Expert,
        Ablation::Full | Ablation::BaselineI => EvalLayouts::Predicted { beam: 1 },
    }
}

/// Cloning epochs followed by REINFORCE epochs (expert-layout epochs for
/// the second baseline), evaluating on the validation split after each
/// epoch. `on_epoch` sees every row as it is produced.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Config("dataset needs nonempty train and val splits".into()));
    }
    let mut model_config = *model_config;
    model_config.context = match config.ablation {
        Ablation::BaselineI => ContextMode::FinalState,
        Ablation::Full | Ablation::BaselineII => ContextMode::Attention,
    };
    let vocab = Vocabulary::build(dataset.train.iter().map(Example::question));
    check_vocabulary(&vocab, &dataset.val)?;
    for ex in dataset.train.iter().chain(&dataset.val) {
        let expert = kinds_of(&ex.layout);
        if expert.len() > model_config.max_len || !crate::layout::validate(&expert).is_valid() {
            return Err(Error::Dataset(format!(
                "expert layout `{}` is invalid or longer than max_len {}",
                ex.record.layout, model_config.max_len
            )));
        }
    }
    let model = Model::new(model_config, vocab, config.seed)?;
    let mut trainer = Trainer::new(model, *config)?;
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::new();
    let total = config.cloning_epochs + config.reinforce_epochs;
    for epoch in 1..=total {
        let start = Instant::now();
        let cloning = epoch <= config.cloning_epochs;
        let phase = match (config.ablation, cloning) {
            (Ablation::BaselineII, _) => "expert",
            (_, true) => "cloning",
            (_, false) => "reinforce",
        };
        if phase == "reinforce" {
            trainer.adam.set_lr(config.reinforce_learning_rate);
        }
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            loss_sum += match phase {
                "expert" => trainer.expert_step(&batch)?,
                "cloning" => trainer.cloning_step(&batch)?,
                _ => trainer.reinforce_step(&batch)?,
            };
            batches += 1;
        }
        let val = evaluate(&trainer.model, &dataset.val, eval_layouts(config.ablation))?;
        let row = EpochReport {
            epoch,
            phase: phase.to_string(),
            train_loss: loss_sum / batches as f64,
            val_accuracy: val.accuracy(),
            val_exist: val.exist.accuracy(),
            val_count: val.count.accuracy(),
            val_yes_no: val.yes_no.accuracy(),
            val_compare: val.compare.accuracy(),
            val_layout_exact_match: val.layout_exact_match(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        if best.as_ref().is_none_or(|(acc, _, _)| row.val_accuracy > *acc) {
            best = Some((row.val_accuracy, epoch, trainer.model.store.clone()));
        }
        epochs.push(row);
    }
    let discarded_rollouts = trainer.discarded_rollouts;
    let mut model = trainer.model;
    let (best_val_accuracy, best_epoch) = match best {
        Some((acc, epoch, store)) => {
            model.store = store;
            (acc, epoch)
        }
        None => (0.0, 0),
    };
    Ok(TrainOutcome {
        model,
        report: TrainReport {
            ablation: config.ablation,
            epochs,
            best_epoch,
            best_val_accuracy,
            discarded_rollouts,
        },
    })
}

/// Scores the expert layouts with the symbolic executor; 1.0 on any
/// self-consistent split.
pub fn oracle_accuracy(examples: &[Example]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for ex in examples {
        let predicted = crate::executor::symbolic_execute(&ex.layout, &ex.record.scene)?;
        report.record(ex.category(), predicted, ex.answer(), true);
    }
    Ok(report)
}

/// Expected accuracy of answering uniformly at random.
pub fn chance_accuracy() -> f64 {
    1.0 / ANSWER_VOCAB_SIZE as f64
}

/// Expert token sequence of an example.
pub fn expert_kinds(ex: &Example) -> Vec<ModuleKind> {
    kinds_of(&ex.layout)
}

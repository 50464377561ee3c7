//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. A manifest written by a previous run is also accepted, in which
//! case its `config` object is used.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use dmn_core::dataset::DatasetConfig;
use dmn_core::model::ModelConfig;
use dmn_core::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed for dataset generation.
    pub data_seed: u64,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| format!("`{key}`: cannot parse `{value}`: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let d = &mut self.dataset;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "grid_size" => {
                d.scene.grid_size = parse(key, value)?;
                m.grid_size = d.scene.grid_size;
            }
            "min_objects" => d.scene.min_objects = parse(key, value)?,
            "max_objects" => d.scene.max_objects = parse(key, value)?,
            "train_size" => d.train = parse(key, value)?,
            "val_size" => d.val = parse(key, value)?,
            "test_size" => d.test = parse(key, value)?,
            "questions_per_scene" => d.questions_per_scene = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "d_emb" => m.d_emb = parse(key, value)?,
            "d_hidden" => m.d_hidden = parse(key, value)?,
            "d_att" => m.d_att = parse(key, value)?,
            "d_tok" => m.d_tok = parse(key, value)?,
            "d_module" => m.d_module = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "cloning_epochs" => t.cloning_epochs = parse(key, value)?,
            "reinforce_epochs" => t.reinforce_epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "reinforce_learning_rate" => t.reinforce_learning_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "rollouts" => t.rollouts = parse(key, value)?,
            "baseline_decay" => t.baseline_decay = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "ablation" => t.ablation = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        let pairs: [(&str, String); 27] = [
            ("grid_size", d.scene.grid_size.to_string()),
            ("min_objects", d.scene.min_objects.to_string()),
            ("max_objects", d.scene.max_objects.to_string()),
            ("train_size", d.train.to_string()),
            ("val_size", d.val.to_string()),
            ("test_size", d.test.to_string()),
            ("questions_per_scene", d.questions_per_scene.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("d_emb", m.d_emb.to_string()),
            ("d_hidden", m.d_hidden.to_string()),
            ("d_att", m.d_att.to_string()),
            ("d_tok", m.d_tok.to_string()),
            ("d_module", m.d_module.to_string()),
            ("max_len", m.max_len.to_string()),
            ("cloning_epochs", t.cloning_epochs.to_string()),
            ("reinforce_epochs", t.reinforce_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("reinforce_learning_rate", t.reinforce_learning_rate.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("rollouts", t.rollouts.to_string()),
            ("baseline_decay", t.baseline_decay.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("ablation", t.ablation.to_string()),
            ("seed", t.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn parse_text(text: &str) -> Result<RunConfig, String> {
        let mut config = RunConfig::default();
        if text.trim_start().starts_with('{') {
            let manifest: serde_json::Value =
                serde_json::from_str(text).map_err(|e| format!("manifest: {e}"))?;
            let map = manifest
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or("manifest has no `config` object")?;
            for (k, v) in map {
                let v = v.as_str().ok_or_else(|| format!("manifest key `{k}` is not a string"))?;
                config.set(k, v)?;
            }
            return Ok(config);
        }
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            config
                .set(k.trim(), v.trim())
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(config)
    }
}

//! Generated question corpora and their JSON-lines records.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::Answer;
use crate::error::{Error, Result};
use crate::layout::{format_tokens, parse_tokens, ModuleToken};
use crate::questions::{generate_question, Category, NUM_TEMPLATES};
use crate::scene::{generate_scene, SceneConfig, SceneGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub split: Split,
    pub scene_id: u64,
    pub template: usize,
    pub scene: SceneGraph,
    pub question: Vec<String>,
    /// Expert layout in the text syntax.
    pub layout: String,
    pub answer: Answer,
    pub category: Category,
}

/// A record with its layout parsed.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub record: Record,
    pub layout: Vec<ModuleToken>,
}

impl Example {
    pub fn from_record(record: Record) -> Result<Example> {
        let layout = parse_tokens(&record.layout)
            .map_err(|e| Error::Dataset(format!("scene {}: {e}", record.scene_id)))?;
        Ok(Example { record, layout })
    }

    pub fn question(&self) -> &[String] {
        &self.record.question
    }

    pub fn answer(&self) -> Answer {
        self.record.answer
    }

    pub fn category(&self) -> Category {
        self.record.category
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub questions_per_scene: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            train: 2000,
            val: 400,
            test: 400,
            questions_per_scene: 4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.questions_per_scene == 0 {
            return Err(Error::Config("questions_per_scene must be positive".into()));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Example> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn from_records(records: impl IntoIterator<Item = Record>) -> Result<Dataset> {
        let mut ds = Dataset::default();
        for r in records {
            let split = r.split;
            ds.split_mut(split).push(Example::from_record(r)?);
        }
        Ok(ds)
    }
}

/// Generates all three splits. Scenes are numbered globally and each scene
/// contributes questions to exactly one split.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    let mut scene_id = 0u64;
    for split in Split::ALL {
        let target = config.size(split);
        let out = ds.split_mut(split);
        while out.len() < target {
            let scene = generate_scene(&config.scene, master.gen())?;
            let mut placed = 0;
            // An inapplicable template is replaced by another draw; the cap
            // stops pathological configs from looping forever.
            for _ in 0..config.questions_per_scene * 8 {
                if placed == config.questions_per_scene || out.len() == target {
                    break;
                }
                let template = master.gen_range(0..NUM_TEMPLATES);
                match generate_question(&scene, template, master.gen()) {
                    Ok(q) => {
                        let record = Record {
                            split,
                            scene_id,
                            template,
                            scene: scene.clone(),
                            question: q.question,
                            layout: format_tokens(&q.layout),
                            answer: q.answer,
                            category: q.category,
                        };
                        out.push(Example {
                            record,
                            layout: q.layout,
                        });
                        placed += 1;
                    }
                    Err(Error::TemplateInapplicable(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            scene_id += 1;
        }
    }
    Ok(ds)
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, &e.record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train: 40,
            val: 12,
            test: 12,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn split_sizes_and_disjoint_scenes() {
        let ds = generate_dataset(&small(), 5).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (40, 12, 12));
        let ids = |s: &[Example]| {
            s.iter()
                .map(|e| e.record.scene_id)
                .collect::<std::collections::HashSet<_>>()
        };
        assert!(ids(&ds.train).is_disjoint(&ids(&ds.test)));
        assert!(ids(&ds.train).is_disjoint(&ids(&ds.val)));
        assert!(ids(&ds.val).is_disjoint(&ids(&ds.test)));
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = generate_dataset(&small(), 9).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &ds.train).unwrap();
        let back = Dataset::from_records(read_jsonl(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.train, ds.train);
    }

    #[test]
    fn bad_line_reports_its_number() {
        let err = read_jsonl("\n{}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}

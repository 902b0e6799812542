//! Single-file persistence for everything sampling needs.
//!
//! A checkpoint is one file: a JSON manifest line (schema version,
//! architecture config, schedule config, vocabulary, training step, and
//! concept metadata) followed by one record per tensor — a JSON header
//! line `{"name", "shape"}` and then the raw row-major little-endian
//! f64 payload. Model parameters come first in module visit order, then
//! concept embeddings as `concept.<symbol>`. Saves stage to a sibling
//! temp file and rename into place, so a crash never leaves a partial
//! checkpoint behind; loads reproduce every tensor bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editing::{concept_slots, ConceptToken};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Module};
use crate::sampler::ConceptSlot;
use crate::schedule::{
    NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_TRAIN,
};
use crate::tensor::Tensor;
use crate::text::{TokenizedPrompt, Vocabulary};

/// Bumped whenever the on-disk layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

/// Serializable description of a [`NoiseSchedule`] (the schedule itself
/// stores derived tables, so only the three generators are persisted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_train: DEFAULT_T_TRAIN,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.t_train, self.beta_start, self.beta_end)
    }
}

/// A trained (or fresh) model plus everything needed to sample from it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub vocabulary: Vocabulary,
    pub training_step: usize,
    pub params: ModelParams,
    pub concepts: Vec<ConceptToken>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    model: ModelConfig,
    schedule: ScheduleConfig,
    vocabulary: Vec<String>,
    training_step: usize,
    concepts: Vec<ConceptMeta>,
}

#[derive(Serialize, Deserialize)]
struct ConceptMeta {
    symbol: String,
    source_images: Vec<String>,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// An untrained checkpoint with freshly initialized weights and the
    /// core vocabulary.
    pub fn fresh(model: ModelConfig, seed: u64) -> Self {
        let params = ModelParams::init(&model, seed);
        Checkpoint {
            model,
            schedule: ScheduleConfig::default(),
            vocabulary: Vocabulary::core(),
            training_step: 0,
            params,
            concepts: Vec::new(),
        }
    }

    /// Whether any training steps have been recorded.
    pub fn is_trained(&self) -> bool {
        self.training_step > 0
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    /// Concept substitutions for a prompt tokenized under this
    /// checkpoint's vocabulary.
    pub fn concept_slots(&self, prompt: &TokenizedPrompt) -> Result<Vec<ConceptSlot>> {
        concept_slots(&self.vocabulary, prompt, &self.concepts)
    }

    /// Writes the checkpoint atomically: the bytes are staged next to
    /// `path` and renamed into place only after a successful flush.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let temp = temp_sibling(path)?;
        let result = self.write_to(&temp).and_then(|()| {
            fs::rename(&temp, path)
                .map_err(|e| Error::invalid(format!("rename to {}: {e}", path.display())))
        });
        if result.is_err() {
            let _ = fs::remove_file(&temp);
        }
        result
    }

    fn validate(&self) -> Result<()> {
        let table_rows = self.model.encoder.vocab_size;
        if self.vocabulary.len() < table_rows {
            return Err(Error::invalid(format!(
                "vocabulary has {} words but the embedding table expects at least {table_rows}",
                self.vocabulary.len()
            )));
        }
        let dim = self.model.encoder.dim;
        for token in &self.concepts {
            if self.vocabulary.id(&token.symbol).is_none() {
                return Err(Error::invalid(format!(
                    "concept {:?} is not in the checkpoint vocabulary",
                    token.symbol
                )));
            }
            if token.embedding.shape() != [dim] {
                return Err(Error::invalid(format!(
                    "concept {:?} embedding has shape {:?}, expected [{dim}]",
                    token.symbol,
                    token.embedding.shape()
                )));
            }
        }
        Ok(())
    }

    fn write_to(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)
            .map_err(|e| Error::invalid(format!("create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            model: self.model.clone(),
            schedule: self.schedule,
            vocabulary: self.vocabulary.words().to_vec(),
            training_step: self.training_step,
            concepts: self
                .concepts
                .iter()
                .map(|t| ConceptMeta {
                    symbol: t.symbol.clone(),
                    source_images: t.source_images.clone(),
                    steps: t.steps,
                })
                .collect(),
        };
        let io = |e: std::io::Error| Error::invalid(format!("write {}: {e}", path.display()));
        serde_json::to_writer(&mut w, &manifest).map_err(Error::from)?;
        w.write_all(b"\n").map_err(io)?;

        let mut write_err: Option<std::io::Error> = None;
        self.params.visit("", &mut |name, tensor| {
            if write_err.is_none() {
                if let Err(e) = write_tensor(&mut w, name, tensor) {
                    write_err = Some(e);
                }
            }
        });
        if let Some(e) = write_err {
            return Err(io(e));
        }
        for token in &self.concepts {
            write_tensor(&mut w, &format!("concept.{}", token.symbol), &token.embedding)
                .map_err(io)?;
        }
        w.flush().map_err(io)?;
        w.into_inner()
            .map_err(|e| Error::invalid(format!("flush {}: {e}", path.display())))?
            .sync_all()
            .map_err(io)?;
        Ok(())
    }

    /// Reads a checkpoint, verifying the schema version and that the
    /// tensor records exactly cover the declared model and concepts.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = fs::File::open(path)
            .map_err(|e| Error::invalid(format!("open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line)
            .map_err(|e| Error::invalid(format!("read {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            return Err(Error::invalid(format!(
                "{} is not a checkpoint (missing manifest line)",
                path.display()
            )));
        }
        let manifest: Manifest = serde_json::from_str(line.trim_end())?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint schema version {} (this build reads {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }

        let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
        loop {
            let mut header = String::new();
            let n = r
                .read_line(&mut header)
                .map_err(|e| Error::invalid(format!("read {}: {e}", path.display())))?;
            if n == 0 {
                break;
            }
            if header.trim().is_empty() {
                continue;
            }
            let head: TensorHeader = serde_json::from_str(header.trim_end())?;
            let count: usize = head.shape.iter().product();
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes).map_err(|e| {
                Error::invalid(format!(
                    "tensor {:?} in {} is truncated: {e}",
                    head.name,
                    path.display()
                ))
            })?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let tensor = Tensor::new(head.shape.clone(), data)?;
            if blobs.insert(head.name.clone(), tensor).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate tensor record {:?} in {}",
                    head.name,
                    path.display()
                )));
            }
        }

        let mut params = ModelParams::init(&manifest.model, 0);
        let mut fill_error: Option<Error> = None;
        params.visit_mut("", &mut |name, slot| {
            if fill_error.is_some() {
                return;
            }
            match blobs.remove(name) {
                Some(tensor) if tensor.shape() == slot.shape() => *slot = tensor,
                Some(tensor) => {
                    fill_error = Some(Error::invalid(format!(
                        "tensor {name:?} has shape {:?}, model expects {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                None => {
                    fill_error = Some(Error::invalid(format!(
                        "checkpoint is missing tensor {name:?}"
                    )));
                }
            }
        });
        if let Some(e) = fill_error {
            return Err(e);
        }

        let vocabulary = Vocabulary::from_words(manifest.vocabulary);
        let mut concepts = Vec::with_capacity(manifest.concepts.len());
        for meta in manifest.concepts {
            let key = format!("concept.{}", meta.symbol);
            let embedding = blobs.remove(&key).ok_or_else(|| {
                Error::invalid(format!("checkpoint is missing tensor {key:?}"))
            })?;
            concepts.push(ConceptToken {
                symbol: meta.symbol,
                embedding,
                source_images: meta.source_images,
                steps: meta.steps,
            });
        }
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::invalid(format!(
                "checkpoint contains unexpected tensor {extra:?}"
            )));
        }

        let out = Checkpoint {
            model: manifest.model,
            schedule: manifest.schedule,
            vocabulary,
            training_step: manifest.training_step,
            params,
            concepts,
        };
        out.validate()?;
        Ok(out)
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> std::io::Result<()> {
    let header = TensorHeader {
        name: name.to_string(),
        shape: tensor.shape().to_vec(),
    };
    serde_json::to_writer(&mut *w, &header)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    w.write_all(b"\n")?;
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> Result<PathBuf> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?
        .to_string_lossy();
    Ok(path.with_file_name(format!("{name}.tmp-{}", std::process::id())))
}

//! Training snapshots and their on-disk archive.
//!
//! An archive is a safetensors file. Model arrays keep their parameter names,
//! the center is stored as `center`, optimizer moments as `optim.m.<name>` and
//! `optim.v.<name>`. Everything else lives in one JSON metadata record.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::config::{CurriculumConfig, OptimizerConfig};
use super::optim::{AdamW, Moments};
use crate::error::{Error, Result};
use crate::model::{init_model, EncoderConfig, ModelState};
use crate::nn::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "xmodal";

/// Model, optimizer and sampler state after a completed stage (or a fresh
/// start, `stage_id = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub stage_id: u8,
    /// Optimization steps taken since initialization, over all stages.
    pub step: u64,
    /// Steps taken with the domain loss active; drives the reversal ramp.
    pub adversarial_steps: u64,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub config_hash: String,
}

/// Stream of the data-sampling generator; the initializer uses stream 0.
const DATA_STREAM: u64 = 1;

impl Checkpoint {
    /// Stage-0 state for `config`: a freshly initialized model and a data
    /// generator derived from the same seed.
    pub fn fresh(config: &CurriculumConfig) -> Result<Self> {
        config.validate()?;
        let model = init_model(&config.encoder, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            model,
            stage_id: 0,
            step: 0,
            adversarial_steps: 0,
            optimizer: AdamW::new(config.optimizer.clone()),
            rng,
            config_hash: config.hash(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            arrays.push((name, shape, bytes));
        };
        for set in self.model_sets() {
            for (name, t) in set.iter() {
                push(name.clone(), t.shape().to_vec(), t.data());
            }
        }
        push("center".into(), vec![self.model.center.len()], &self.model.center);
        for (name, st) in &self.optimizer.state {
            push(format!("optim.m.{name}"), vec![st.m.len()], &st.m);
            push(format!("optim.v.{name}"), vec![st.v.len()], &st.v);
        }
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            encoder: self.model.config.clone(),
            stage_id: self.stage_id,
            step: self.step,
            adversarial_steps: self.adversarial_steps,
            optimizer: self.optimizer.config.clone(),
            optimizer_steps: self.optimizer.state.iter().map(|(k, s)| (k.clone(), s.steps)).collect(),
            rng: RngState {
                seed: hex::encode(self.rng.get_seed()),
                stream: self.rng.get_stream().to_string(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            config_hash: self.config_hash.clone(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Serde(e.to_string()))?;
        let views = arrays
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = HashMap::from([(METADATA_KEY.to_string(), json)]);
        safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt_err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
        let json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::Checkpoint("archive has no metadata record".into()))?;
        let version: VersionProbe = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if version.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported archive version {} (expected {FORMAT_VERSION})",
                version.format_version
            )));
        }
        let meta: Metadata = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name} is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(view.shape().to_vec(), data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            arrays.insert(name, tensor);
        }

        // shapes are checked against a template built from the stored config
        let template = init_model(&meta.encoder, 0)?;
        let mut take_set = |like: &ParamSet| -> Result<ParamSet> {
            let mut out = ParamSet::new();
            for (name, t) in like.iter() {
                let got = arrays
                    .remove(name)
                    .ok_or_else(|| Error::Checkpoint(format!("archive lacks {name}")))?;
                if got.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name} has shape {:?}, config implies {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
                out.insert(name.clone(), got);
            }
            Ok(out)
        };
        let student = take_set(&template.student)?;
        let teacher = take_set(&template.teacher)?;
        let domain = take_set(&template.domain)?;
        let decoder_he = take_set(&template.decoder_he)?;
        let decoder_sim = take_set(&template.decoder_sim)?;
        let center = arrays
            .remove("center")
            .ok_or_else(|| Error::Checkpoint("archive lacks center".into()))?;
        if center.shape() != [meta.encoder.proj_dim_dino] {
            return Err(Error::Checkpoint("center length does not match the config".into()));
        }
        let model = ModelState {
            config: meta.encoder.clone(),
            student,
            teacher,
            center: center.data().to_vec(),
            domain,
            decoder_he,
            decoder_sim,
        };

        let mut optimizer = AdamW::new(meta.optimizer.clone());
        for (name, steps) in &meta.optimizer_steps {
            let m = arrays.remove(&format!("optim.m.{name}"));
            let v = arrays.remove(&format!("optim.v.{name}"));
            let (Some(m), Some(v)) = (m, v) else {
                return Err(Error::Checkpoint(format!("optimizer state for {name} is incomplete")));
            };
            let param_len = model
                .param_len(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            if m.len() != param_len || v.len() != param_len {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong length")));
            }
            optimizer.state.insert(
                name.clone(),
                Moments {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    steps: *steps,
                },
            );
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra} in archive")));
        }

        let mut seed = [0u8; 32];
        hex::decode_to_slice(&meta.rng.seed, &mut seed)
            .map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let parse = |s: &str| s.parse::<u128>().map_err(|e| Error::Checkpoint(format!("rng state: {e}")));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse(&meta.rng.stream)? as u64);
        rng.set_word_pos(parse(&meta.rng.word_pos)?);

        Ok(Self {
            model,
            stage_id: meta.stage_id,
            step: meta.step,
            adversarial_steps: meta.adversarial_steps,
            optimizer,
            rng,
            config_hash: meta.config_hash,
        })
    }

    fn model_sets(&self) -> [&ParamSet; 5] {
        let m = &self.model;
        [&m.student, &m.teacher, &m.domain, &m.decoder_he, &m.decoder_sim]
    }
}

impl ModelState {
    pub(crate) fn param_len(&self, name: &str) -> Option<usize> {
        [&self.student, &self.teacher, &self.domain, &self.decoder_he, &self.decoder_sim]
            .into_iter()
            .find_map(|s| s.get(name).ok().map(Tensor::len))
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: String,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    encoder: EncoderConfig,
    stage_id: u8,
    step: u64,
    adversarial_steps: u64,
    optimizer: OptimizerConfig,
    optimizer_steps: BTreeMap<String, u64>,
    rng: RngState,
    config_hash: String,
}

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::modality::Modality;
use crate::objectives::{LossWeights, Temperatures};
use crate::views::ViewConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Unpaired,
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage_id: u8,
    pub weights: LossWeights,
    pub steps: usize,
    pub data_mode: DataMode,
    /// Modalities drawn each step. Both by default; a single entry gives a
    /// one-modality baseline.
    #[serde(default = "both_modalities")]
    pub modalities: Vec<Modality>,
}

fn both_modalities() -> Vec<Modality> {
    Modality::BOTH.to_vec()
}

impl StageSpec {
    /// The stage with its default weights, step count and sampling mode.
    pub fn default_for(stage_id: u8) -> Result<Self> {
        let (weights, data_mode) = match stage_id {
            1 => (LossWeights::new(1.0, 0.0, 0.0, 0.0), DataMode::Unpaired),
            2 => (LossWeights::new(1.0, 0.1, 0.0, 0.0), DataMode::Unpaired),
            3 => (LossWeights::new(1.0, 0.1, 0.5, 0.0), DataMode::Paired),
            4 => (LossWeights::new(1.0, 0.1, 0.5, 1.0), DataMode::Paired),
            other => return Err(Error::Config(format!("stage ids run from 1 to 4, got {other}"))),
        };
        Ok(Self {
            stage_id,
            weights,
            steps: 300,
            data_mode,
            modalities: both_modalities(),
        })
    }

    fn active(&self) -> [bool; 4] {
        self.weights.as_array().map(|w| w > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.stage_id;
        let bad = |msg: String| Err(Error::Config(format!("stage {id}: {msg}")));
        if !(1..=4).contains(&id) {
            return bad("stage id must lie in 1..=4".into());
        }
        self.weights.validate()?;
        let w = self.weights;
        if !self.active().iter().any(|&a| a) {
            return bad("at least one loss weight must be positive".into());
        }
        let forbidden = match id {
            1 => w.lambda2 > 0.0 || w.lambda3 > 0.0 || w.lambda4 > 0.0,
            2 => w.lambda3 > 0.0 || w.lambda4 > 0.0,
            3 => w.lambda4 > 0.0,
            _ => false,
        };
        if forbidden {
            return bad(format!("weights {:?} enable a loss introduced by a later stage", w.as_array()));
        }
        if id >= 3 && self.data_mode != DataMode::Paired {
            return bad("stages 3 and 4 need paired data".into());
        }
        if (w.lambda3 > 0.0 || w.lambda4 > 0.0) && self.data_mode != DataMode::Paired {
            return bad("paired losses need paired data".into());
        }
        let mut mods = self.modalities.clone();
        mods.sort();
        mods.dedup();
        if mods.len() != self.modalities.len() || mods.is_empty() {
            return bad("modalities must be a nonempty list without repeats".into());
        }
        let both = mods.len() == 2;
        if !both && (w.lambda2 > 0.0 || w.lambda3 > 0.0 || w.lambda4 > 0.0 || self.data_mode == DataMode::Paired) {
            return bad("cross-modal losses and paired sampling need both modalities".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            lr: 1e-4,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "adamw" {
            return Err(Error::Config(format!("unsupported optimizer {:?}", self.name)));
        }
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrlKind {
    Constant,
    Ramp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrlSchedule {
    pub kind: GrlKind,
    pub max_value: f64,
}

impl Default for GrlSchedule {
    fn default() -> Self {
        Self {
            kind: GrlKind::Ramp,
            max_value: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub stages: Vec<StageSpec>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub grl_schedule: GrlSchedule,
    pub temps: Temperatures,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub views: ViewConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            stages: (1..=4).map(|k| StageSpec::default_for(k).expect("valid id")).collect(),
            optimizer: OptimizerConfig::default(),
            batch_size: 24,
            ema_momentum: 0.996,
            center_momentum: 0.9,
            grl_schedule: GrlSchedule::default(),
            temps: Temperatures::default(),
            seed: 0,
            encoder: EncoderConfig::default(),
            views: ViewConfig::default(),
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.views.validate()?;
        self.optimizer.validate()?;
        self.temps.validate()?;
        if self.views.global_size != self.encoder.image_size {
            return Err(Error::Config(format!(
                "global views ({}px) must match the encoder image size ({}px)",
                self.views.global_size, self.encoder.image_size
            )));
        }
        if self.views.local_size % self.encoder.patch_size != 0 {
            return Err(Error::Config("local view size must be a multiple of the patch size".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, m) in [("ema_momentum", self.ema_momentum), ("center_momentum", self.center_momentum)] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {m}")));
            }
        }
        if !(self.grl_schedule.max_value.is_finite() && self.grl_schedule.max_value >= 0.0) {
            return Err(Error::Config("grl max_value must be finite and >= 0".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            stage.validate()?;
            if stage.stage_id as usize != i + 1 {
                return Err(Error::Config(format!(
                    "stages must run 1, 2, ... in order; position {} holds stage {}",
                    i + 1,
                    stage.stage_id
                )));
            }
            if i > 0 {
                let prev = self.stages[i - 1].active();
                let cur = stage.active();
                if prev.iter().zip(&cur).any(|(&p, &c)| p && !c) {
                    return Err(Error::Config(format!(
                        "stage {} drops a loss that stage {} used",
                        stage.stage_id,
                        stage.stage_id - 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn stage(&self, stage_id: u8) -> Result<&StageSpec> {
        self.stages
            .iter()
            .find(|s| s.stage_id == stage_id)
            .ok_or_else(|| Error::Config(format!("config has no stage {stage_id}")))
    }

    /// Steps of the first stage that trains the domain classifier; the
    /// reversal ramp spans this many steps.
    pub fn grl_ramp_steps(&self) -> usize {
        self.stages
            .iter()
            .find(|s| s.weights.lambda2 > 0.0)
            .map_or(1, |s| s.steps.max(1))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

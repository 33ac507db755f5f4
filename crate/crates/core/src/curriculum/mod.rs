//! Staged pretraining: configuration, the per-step update, teacher EMA,
//! reversal scheduling, checkpoints and loss traces.

mod checkpoint;
mod config;
mod optim;
pub mod step;

use std::io::Write;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{CurriculumConfig, DataMode, GrlKind, GrlSchedule, OptimizerConfig, StageSpec};
pub use optim::{AdamW, Moments};
pub use step::TrainingData;

use crate::error::{shape_err, Error, Result};
use crate::nn::{GrlCoefficient, ParamSet};
use crate::objectives::update_center;
use step::{loss_and_grads, prepare_step, ModelView, StepSettings};

/// θ' ← m·θ' + (1−m)·θ for every teacher array and its student counterpart.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum must lie in [0,1], got {m}")));
    }
    let m32 = m as f32;
    for (name, t) in teacher.iter_mut() {
        let sname = name.replacen("teacher.", "student.", 1);
        let s = student.get(&sname)?;
        if s.shape() != t.shape() {
            return Err(shape_err!("{name} is {:?} but {sname} is {:?}", t.shape(), s.shape()));
        }
        if m == 1.0 {
            continue;
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m32 * *a + (1.0 - m32) * b;
        }
    }
    Ok(())
}

/// Reversal magnitude after `step` adversarial steps out of a ramp of
/// `total_steps`.
pub fn grl_coeff(step: u64, total_steps: usize, schedule: &GrlSchedule) -> Result<GrlCoefficient> {
    let value = match schedule.kind {
        GrlKind::Constant => schedule.max_value,
        GrlKind::Ramp => {
            let p = step as f64 / total_steps.max(1) as f64;
            schedule.max_value * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
        }
    };
    GrlCoefficient::new(value)
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub stage: u8,
    pub l_dino: f64,
    pub l_domain: f64,
    pub l_contrast: f64,
    pub l_recon: f64,
    pub l_total: f64,
}

/// Appends rows to a CSV trace, writing the header only to an empty sink.
pub fn write_trace<W: Write>(out: W, rows: &[TraceRow], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn read_trace<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

/// Runs `spec.steps` optimization steps starting from `init`.
///
/// `init` must be the checkpoint of the preceding stage (stage 0 = fresh)
/// produced under the same configuration. Each step is reported to
/// `on_step` as it completes.
pub fn train_stage(
    spec: &StageSpec,
    data: &TrainingData,
    init: Checkpoint,
    config: &CurriculumConfig,
    on_step: &mut dyn FnMut(&TraceRow),
) -> Result<Checkpoint> {
    config.validate()?;
    spec.validate()?;
    if init.stage_id + 1 != spec.stage_id {
        return Err(Error::Sequencing(format!(
            "stage {} must start from the stage {} checkpoint, got stage {}",
            spec.stage_id,
            spec.stage_id - 1,
            init.stage_id
        )));
    }
    if init.config_hash != config.hash() {
        return Err(Error::Sequencing(
            "checkpoint was produced under a different configuration".into(),
        ));
    }
    if init.model.config != config.encoder {
        return Err(Error::Sequencing("checkpoint encoder shape differs from the config".into()));
    }
    let mut ck = init;
    ck.optimizer.config = config.optimizer.clone();
    let ramp = config.grl_ramp_steps();
    for _ in 0..spec.steps {
        let inputs = prepare_step(data, spec, config.batch_size, &config.views, &mut ck.rng)?;
        let coeff = if spec.weights.lambda2 > 0.0 {
            grl_coeff(ck.adversarial_steps, ramp, &config.grl_schedule)?
        } else {
            GrlCoefficient::new(0.0)?
        };
        let settings = StepSettings::new(config, spec, coeff);
        let center = Array1::from_iter(ck.model.center.iter().map(|&c| c as f64));
        let m = &ck.model;
        let view = ModelView {
            config: &m.config,
            student: &m.student,
            teacher: &m.teacher,
            domain: &m.domain,
            decoder_he: &m.decoder_he,
            decoder_sim: &m.decoder_sim,
        };
        let out = loss_and_grads::<f32>(&view, center.view(), &inputs, &settings)?;
        let step_no = ck.step + 1;
        let c = out.components;
        if !out.total.is_finite() || !out.grads.all_finite() {
            return Err(Error::NonFinite {
                stage: spec.stage_id,
                step: step_no as usize,
                detail: format!(
                    "dino={} domain={} contrast={} recon={} total={} grads_finite={}",
                    c.dino,
                    c.domain,
                    c.contrast,
                    c.recon,
                    out.total,
                    out.grads.all_finite()
                ),
            });
        }
        let model = &mut ck.model;
        for set in [
            &mut model.student,
            &mut model.domain,
            &mut model.decoder_he,
            &mut model.decoder_sim,
        ] {
            ck.optimizer.update(set, &out.grads)?;
        }
        ema_update(&mut model.teacher, &model.student, config.ema_momentum)?;
        if let Some(t) = &out.teacher_logits {
            let c64: Array1<f64> = model.center.iter().map(|&v| v as f64).collect();
            let next = update_center(ArrayView1::from(&c64), t.view(), config.center_momentum)?;
            model.center = next.iter().map(|&v| v as f32).collect();
        }
        if !model.all_finite() {
            return Err(Error::NonFinite {
                stage: spec.stage_id,
                step: step_no as usize,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        ck.step = step_no;
        if spec.weights.lambda2 > 0.0 {
            ck.adversarial_steps += 1;
        }
        on_step(&TraceRow {
            step: step_no,
            stage: spec.stage_id,
            l_dino: c.dino,
            l_domain: c.domain,
            l_contrast: c.contrast,
            l_recon: c.recon,
            l_total: out.total,
        });
    }
    ck.stage_id = spec.stage_id;
    Ok(ck)
}

/// Trains stages `1..=through` (all configured stages when `None`), each
/// starting from the previous stage's checkpoint. `on_stage` sees every
/// finished checkpoint.
pub fn run_curriculum(
    config: &CurriculumConfig,
    data: &TrainingData,
    through: Option<u8>,
    on_step: &mut dyn FnMut(&TraceRow),
    on_stage: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    let last = through.unwrap_or(config.stages.len() as u8);
    if last == 0 || last as usize > config.stages.len() {
        return Err(Error::Config(format!(
            "cannot stop after stage {last}; config has {} stages",
            config.stages.len()
        )));
    }
    let mut ck = Checkpoint::fresh(config)?;
    let mut out = Vec::with_capacity(last as usize);
    for spec in &config.stages[..last as usize] {
        ck = train_stage(spec, data, ck, config, on_step)?;
        on_stage(&ck)?;
        out.push(ck.clone());
    }
    Ok(out)
}

use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodal_core::curriculum::step::{loss_and_grads, prepare_step, ModelView, StepInputs, StepSettings};
use xmodal_core::curriculum::*;
use xmodal_core::model::{init_model, Branch, EncoderConfig, Head};
use xmodal_core::nn::{GrlCoefficient, ParamSet, Tensor};
use xmodal_core::objectives::{LossWeights, Temperatures};
use xmodal_core::raster::ImageBatch;
use xmodal_core::synthdata::{render, sample_latent_sized, MorphologyClass};
use xmodal_core::{Error, Modality};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        depth: 1,
        width: 8,
        heads: 2,
        embed_dim: 8,
        proj_dim_dino: 6,
        proj_dim_contrast: 4,
        channels: 3,
        mlp_ratio: 2,
        domain_hidden: 6,
    }
}

fn tiny_config(steps: usize) -> CurriculumConfig {
    let mut cfg = CurriculumConfig::default();
    cfg.encoder = tiny_encoder();
    cfg.batch_size = 2;
    cfg.views.global_size = 16;
    cfg.views.local_size = 8;
    cfg.views.n_local = 2;
    for s in cfg.stages.iter_mut() {
        s.steps = steps;
    }
    cfg
}

fn tiny_data(n: usize, size: usize, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ids, mut he, mut sim) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let latent = sample_latent_sized(MorphologyClass::ALL[i % 3], size, &mut rng);
        he.push(render(&latent, Modality::He, &mut rng));
        sim.push(render(&latent, Modality::Sim, &mut rng));
        ids.push(format!("pair{i}"));
    }
    TrainingData::new(ids, he, sim).unwrap()
}

struct F64Model {
    config: EncoderConfig,
    student: ParamSet<f64>,
    teacher: ParamSet<f64>,
    domain: ParamSet<f64>,
    decoder_he: ParamSet<f64>,
    decoder_sim: ParamSet<f64>,
}

impl F64Model {
    fn view(&self) -> ModelView<'_, f64> {
        ModelView {
            config: &self.config,
            student: &self.student,
            teacher: &self.teacher,
            domain: &self.domain,
            decoder_he: &self.decoder_he,
            decoder_sim: &self.decoder_sim,
        }
    }

    fn set_mut(&mut self, which: &str) -> &mut ParamSet<f64> {
        match which {
            "student" => &mut self.student,
            "domain" => &mut self.domain,
            "decoder_he" => &mut self.decoder_he,
            _ => &mut self.decoder_sim,
        }
    }
}

fn f64_model(seed: u64) -> F64Model {
    let m = init_model(&tiny_encoder(), seed).unwrap();
    let mut domain = m.domain.cast::<f64>();
    // a nonzero output layer so the domain gradient is not trivially zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for v in domain.get_mut("domain.fc2.weight").unwrap().data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    // zero biases put ReLU inputs exactly on the kink
    let mut decoder_he = m.decoder_he.cast::<f64>();
    let mut decoder_sim = m.decoder_sim.cast::<f64>();
    for set in [&mut decoder_he, &mut decoder_sim] {
        let biases: Vec<String> = set.names().filter(|n| n.ends_with(".bias")).cloned().collect();
        for name in biases {
            for v in set.get_mut(&name).unwrap().data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }
    F64Model {
        config: m.config.clone(),
        student: m.student.cast(),
        teacher: m.teacher.cast(),
        domain,
        decoder_he,
        decoder_sim,
    }
}

fn inputs(stage: u8, seed: u64) -> StepInputs {
    let cfg = tiny_config(1);
    let data = tiny_data(4, 16, seed);
    let spec = cfg.stage(stage).unwrap().clone();
    prepare_step(&data, &spec, cfg.batch_size, &cfg.views, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn total(model: &F64Model, center: &Array1<f64>, inp: &StepInputs, settings: &StepSettings<'_>) -> f64 {
    loss_and_grads(&model.view(), center.view(), inp, settings).unwrap().total
}

/// Checks up to `per_tensor` entries of every parameter that receives a
/// gradient; `sign` scales the finite difference (−λ for reversed paths).
/// Freshly initialized heads have tiny output norms, so the normalized
/// projections are steep and the whole-model check uses a small step.
fn check_step_gradients(
    model: &mut F64Model,
    inp: &StepInputs,
    settings: &StepSettings<'_>,
    prefixes: &[(&str, &str, f64)],
    per_tensor: usize,
    h: f64,
) -> usize {
    let center = Array1::from_shape_fn(model.config.proj_dim_dino, |i| 0.1 * i as f64);
    let out = loss_and_grads(&model.view(), center.view(), inp, settings).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for &(set, prefix, sign) in prefixes {
        let names: Vec<String> = model.set_mut(set).names().filter(|n| n.starts_with(prefix)).cloned().collect();
        for name in names {
            let Some(g) = out.grads.get(&name).map(|g| g.to_vec()) else { continue };
            let len = g.len();
            for _ in 0..per_tensor.min(len) {
                let i = rng.random_range(0..len);
                let orig = model.set_mut(set).get(&name).unwrap().data()[i];
                model.set_mut(set).get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = total(model, &center, inp, settings);
                model.set_mut(set).get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = total(model, &center, inp, settings);
                model.set_mut(set).get_mut(&name).unwrap().data_mut()[i] = orig;
                let fd = sign * (up - down) / (2.0 * h);
                let scale = fd.abs().max(g[i].abs());
                assert!(
                    (fd - g[i]).abs() <= 1e-3 * scale || (fd - g[i]).abs() < 1e-9,
                    "{name}[{i}]: analytic {} numeric {fd}",
                    g[i]
                );
                checked += 1;
            }
        }
    }
    checked
}

#[test]
fn full_step_gradients_match_finite_differences() {
    let temps = Temperatures {
        t_teacher: 0.5,
        t_student: 0.7,
        tau_contrast: 0.5,
    };
    let none = GrlCoefficient::new(0.0).unwrap();
    // self-distillation, contrast and reconstruction together (no reversal)
    let mut model = f64_model(1);
    let inp = inputs(4, 2);
    let settings = StepSettings {
        weights: LossWeights::new(1.0, 0.0, 0.5, 1.0),
        temps: &temps,
        m_global: 2,
        n_local: 2,
        grl: none,
    };
    let n = check_step_gradients(
        &mut model,
        &inp,
        &settings,
        &[("student", "student.", 1.0), ("decoder_he", "", 1.0), ("decoder_sim", "", 1.0)],
        3,
        1e-6,
    );
    assert!(n > 60, "only {n} entries checked");
}

#[test]
fn reversed_domain_gradient_is_negated_finite_difference() {
    let temps = Temperatures::default();
    let lambda = 0.7;
    let mut model = f64_model(3);
    let inp = inputs(2, 4);
    let settings = StepSettings {
        weights: LossWeights::new(0.0, 1.0, 0.0, 0.0),
        temps: &temps,
        m_global: 2,
        n_local: 2,
        grl: GrlCoefficient::new(lambda).unwrap(),
    };
    // classifier weights descend the domain loss; the encoder ascends it
    let n = check_step_gradients(
        &mut model,
        &inp,
        &settings,
        &[("domain", "domain.", 1.0), ("student", "student.", -lambda)],
        3,
        1e-6,
    );
    assert!(n > 20);
}

#[test]
fn zero_weight_losses_touch_nothing() {
    let cfg = tiny_config(3);
    let data = tiny_data(6, 16, 5);
    let fresh = Checkpoint::fresh(&cfg).unwrap();
    let stage1 = train_stage(cfg.stage(1).unwrap(), &data, fresh.clone(), &cfg, &mut |_| {}).unwrap();
    let bits = |p: &ParamSet| -> Vec<(String, Vec<u32>)> {
        p.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
    };
    assert_eq!(bits(&stage1.model.domain), bits(&fresh.model.domain));
    assert_eq!(bits(&stage1.model.decoder_he), bits(&fresh.model.decoder_he));
    assert_eq!(bits(&stage1.model.decoder_sim), bits(&fresh.model.decoder_sim));
    assert_eq!(
        bits(&stage1.model.student.subset("student.contrast_head.")),
        bits(&fresh.model.student.subset("student.contrast_head."))
    );
    assert_ne!(
        bits(&stage1.model.student.subset("student.patch_embed")),
        bits(&fresh.model.student.subset("student.patch_embed"))
    );

    // stage 3 leaves the decoders alone too
    let stage2 = train_stage(cfg.stage(2).unwrap(), &data, stage1, &cfg, &mut |_| {}).unwrap();
    assert_ne!(bits(&stage2.model.domain), bits(&fresh.model.domain));
    let stage3 = train_stage(cfg.stage(3).unwrap(), &data, stage2, &cfg, &mut |_| {}).unwrap();
    assert_eq!(bits(&stage3.model.decoder_he), bits(&fresh.model.decoder_he));
    assert_ne!(
        bits(&stage3.model.student.subset("student.contrast_head.")),
        bits(&fresh.model.student.subset("student.contrast_head."))
    );
}

#[test]
fn stages_inherit_their_predecessor_exactly() {
    let cfg = tiny_config(2);
    let data = tiny_data(6, 16, 6);
    let dir = tempfile::tempdir().unwrap();
    let mut saved = Vec::new();
    run_curriculum(&cfg, &data, None, &mut |_| {}, &mut |ck| {
        let path = dir.path().join(format!("stage{}.ckpt", ck.stage_id));
        ck.save(&path)?;
        saved.push(path);
        Ok(())
    })
    .unwrap();
    assert_eq!(saved.len(), 4);
    for k in 1..4usize {
        let prev = Checkpoint::load(&saved[k - 1]).unwrap();
        // resuming stage k+1 from the loaded file reproduces the saved one
        let next = train_stage(&cfg.stages[k], &data, prev.clone(), &cfg, &mut |_| {}).unwrap();
        assert_eq!(next.to_bytes().unwrap(), std::fs::read(&saved[k]).unwrap());
        assert_eq!(prev.stage_id as usize, k);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny_config(2);
    let data = tiny_data(4, 16, 7);
    let ck = run_curriculum(&cfg, &data, Some(2), &mut |_| {}, &mut |_| Ok(())).unwrap().pop().unwrap();
    let a = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&a).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), a);
}

#[test]
fn traces_are_reproducible() {
    let cfg = tiny_config(2);
    let data = tiny_data(5, 16, 8);
    let trace = |cfg: &CurriculumConfig| {
        let mut rows = Vec::new();
        run_curriculum(cfg, &data, None, &mut |r| rows.push(*r), &mut |_| Ok(())).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &rows, true).unwrap();
        (rows, buf)
    };
    let (rows, a) = trace(&cfg);
    let (_, b) = trace(&cfg);
    assert_eq!(a, b);
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    assert!(rows[..2].iter().all(|r| r.l_domain == 0.0 && r.l_contrast == 0.0));
    assert!(rows[6..].iter().all(|r| r.l_recon > 0.0));
    assert_eq!(read_trace(&a[..]).unwrap(), rows);
    let header = String::from_utf8(a).unwrap();
    assert!(header.starts_with("step,stage,l_dino,l_domain,l_contrast,l_recon,l_total\n"));

    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(trace(&other).1, b);
}

#[test]
fn sequencing_is_enforced() {
    let cfg = tiny_config(1);
    let data = tiny_data(4, 16, 9);
    let fresh = Checkpoint::fresh(&cfg).unwrap();
    let err = train_stage(cfg.stage(2).unwrap(), &data, fresh.clone(), &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Sequencing(_)));
    let mut other = cfg.clone();
    other.optimizer.lr *= 2.0;
    let err = train_stage(other.stage(1).unwrap(), &data, fresh, &other, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Sequencing(_)));
    assert!(run_curriculum(&cfg, &data, Some(5), &mut |_| {}, &mut |_| Ok(())).is_err());
}

#[test]
fn encode_is_deterministic_and_shaped() {
    let model = init_model(&tiny_encoder(), 3).unwrap();
    let data = tiny_data(5, 16, 10);
    let batch = ImageBatch::stack(&data.he).unwrap();
    for (head, width) in [(Head::None, 8), (Head::Dino, 6), (Head::Contrast, 4)] {
        let a = model.encode(&batch, Branch::Student, head).unwrap();
        let b = model.encode(&batch, Branch::Student, head).unwrap();
        assert_eq!(a.dim(), (5, width));
        assert_eq!(a, b);
    }
    let t = model.encode(&batch, Branch::Teacher, Head::None).unwrap();
    assert_eq!(t, model.encode(&batch, Branch::Student, Head::None).unwrap());
    assert_eq!(model.center, vec![0.0; 6]);
}

#[test]
fn reversal_schedule() {
    let ramp = GrlSchedule {
        kind: GrlKind::Ramp,
        max_value: 1.0,
    };
    assert_eq!(grl_coeff(0, 100, &ramp).unwrap().value(), 0.0);
    let end = grl_coeff(100, 100, &ramp).unwrap().value();
    assert!((end - (2.0 / (1.0 + (-10f64).exp()) - 1.0)).abs() < 1e-12);
    let mut prev = -1.0;
    for s in 0..=100 {
        let v = grl_coeff(s, 100, &ramp).unwrap().value();
        assert!(v >= prev && v <= 1.0);
        prev = v;
    }
    let flat = GrlSchedule {
        kind: GrlKind::Constant,
        max_value: 0.3,
    };
    assert_eq!(grl_coeff(7, 100, &flat).unwrap().value(), 0.3);
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = tiny_config(5);
    cfg.stages[0].modalities = vec![Modality::Sim];
    let text = cfg.to_toml().unwrap();
    let back = CurriculumConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert!(CurriculumConfig::from_toml("batch_size = 4\nmystery = 1\n").is_err());
    let mut bad = CurriculumConfig::default();
    bad.stages[0].weights = LossWeights::new(1.0, 0.1, 0.0, 0.0);
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

fn tensor(values: Vec<f32>) -> Tensor {
    Tensor::new(vec![values.len()], values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ema_stays_between_teacher_and_student(
        t in proptest::collection::vec(-10.0f32..10.0, 1..32),
        seed in any::<u64>(),
        m in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f32> = t.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut teacher = ParamSet::new();
        teacher.insert("teacher.w", tensor(t.clone()));
        let mut student = ParamSet::new();
        student.insert("student.w", tensor(s.clone()));
        ema_update(&mut teacher, &student, m).unwrap();
        for ((&after, &before), &target) in teacher.get("teacher.w").unwrap().data().iter().zip(&t).zip(&s) {
            let (lo, hi) = if before < target { (before, target) } else { (target, before) };
            prop_assert!(after >= lo && after <= hi, "{after} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn ema_rejects_bad_momentum() {
    let mut teacher = ParamSet::new();
    teacher.insert("teacher.w", tensor(vec![1.0]));
    let mut student = ParamSet::new();
    student.insert("student.w", tensor(vec![2.0]));
    assert!(ema_update(&mut teacher, &student, 1.5).is_err());
    ema_update(&mut teacher, &student, 1.0).unwrap();
    assert_eq!(teacher.get("teacher.w").unwrap().data(), &[1.0]);
    ema_update(&mut teacher, &student, 0.0).unwrap();
    assert_eq!(teacher.get("teacher.w").unwrap().data(), &[2.0]);
}

use super::*;
use crate::diffcore::{SamplerMode, SamplerParams};
use crate::model::tests::tiny;
use crate::stagesim::{build_dataset, DatasetConfig};

fn toy_data(n: usize, seed: u64) -> (tempfile::TempDir, TupleTensors) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { image_size: 16, env_height: 8, ..Default::default() };
    build_dataset(&cfg, n, seed, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let t = TupleTensors::from_dataset(&ds, 16).unwrap();
    (dir, t)
}

fn cfg(stage: TrainStage, steps: usize, lr: f64) -> TrainConfig {
    TrainConfig { stage, steps, batch_size: 4, lr, seed: 3, checkpoint_every: 0, model: tiny(), ..Default::default() }
}

fn snapshot(model: &HarmonyModel, prefix: &str) -> Vec<Vec<f32>> {
    model.store.ids_with_prefix(prefix).map(|id| model.store.value(id).data.clone()).collect()
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = TrainConfig::default();
    c.datasets.push(DatasetSource { path: "a".into(), weight: 2.0 });
    c.init = Some("x.ckpt".into());
    let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.lr, 5e-5);
    assert!(TrainConfig::from_toml("bogus = 1").is_err());
}

#[test]
fn freeze_set_must_match_stage() {
    let mut c = cfg(TrainStage::Finetune, 1, 1e-3);
    c.freeze = Some(vec!["branch".into(), "extract_bg".into(), "extract_env".into(), "align".into()]);
    assert!(c.validate().is_ok());
    c.freeze = Some(vec!["unet".into()]);
    assert!(c.validate().is_err());
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let store = crate::nn::ParamStore::<f32>::new();
    let mut t = Tape::new(&store);
    let e = t.constant(gaussian([2, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(0)));
    let l = crate::diffcore::denoising_loss(&mut t, e, e);
    assert_eq!(t.scalar(l), 0.0);
}

#[test]
fn one_step_moves_every_parameter_with_a_gradient() {
    let (_d, data) = toy_data(8, 0);
    let mut model = HarmonyModel::<f32>::new(&tiny(), 0).unwrap();
    apply_freeze(&mut model, TrainStage::Stage1Bg);
    let before = model.store.clone();
    let batch = data.gather(&[0, 1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Recompute the gradients the step will see.
    let grads = {
        let mut r = rng.clone();
        let ts: Vec<usize> = (0..4).map(|_| r.random_range(1..=model.schedule.steps)).collect();
        let eps: Tensor<f32> = gaussian(batch.x_b.shape, &mut r);
        let xt = q_sample_batch(&batch.x_b, &ts, &eps, &model.schedule).unwrap();
        let mut t = Tape::new(&model.store);
        let (x, a, m, e, y) =
            (t.constant(xt), t.constant(batch.x_a.clone()), t.constant(batch.m.clone()), t.constant(eps), t.constant(batch.y_b.clone()));
        let f = model.feature(&mut t, CondSource::Background, y).unwrap();
        let out = model.eps(&mut t, x, &ts, a, m, Some(f)).unwrap();
        let l = t.mse(out, e);
        t.backward(l)
    };
    let mut opt = Adam::new(1e-3);
    diffusion_step(&mut model, &mut opt, CondSource::Background, &batch, &mut rng).unwrap();
    let mut with_grad = 0;
    for (id, p) in model.store.iter() {
        let g = grads.get(id).map_or(0.0, |g| g.max_abs());
        if g > 0.0 && !p.frozen {
            with_grad += 1;
            assert_ne!(p.value.data, before.value(id).data, "{} did not move", p.name);
        } else {
            assert_eq!(p.value.data, before.value(id).data, "{} moved without gradient", p.name);
        }
    }
    assert!(with_grad > 20);
}

#[test]
fn smoke_run_reduces_loss() {
    let (_d, data) = toy_data(64, 1);
    let data = MixedData::single(data);
    let mut records = Vec::new();
    train_stage1(&data, CondSource::Background, &cfg(TrainStage::Stage1Bg, 200, 2e-3), None, &mut records).unwrap();
    assert_eq!(records.len(), 200);
    let first: f64 = records[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    let last: f64 = records[150..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (_d, data) = toy_data(12, 2);
    let data = MixedData::single(data);
    let c = cfg(TrainStage::Stage1Env, 6, 1e-3);
    let mut a = Vec::new();
    let ca = train_stage1(&data, CondSource::Environment, &c, None, &mut a).unwrap();
    let mut b = Vec::new();
    let cb = train_stage1(&data, CondSource::Environment, &c, None, &mut b).unwrap();
    let strip = |r: &[LossRecord]| r.iter().map(|r| (r.step, r.loss)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(ca.weights_hash(), cb.weights_hash());

    // Stop at 3, save, resume to 6.
    let mut part = Vec::new();
    let half = train_stage1(&data, CondSource::Environment, &TrainConfig { steps: 3, ..c.clone() }, None, &mut part).unwrap();
    let half = Checkpoint::from_bytes(&half.to_bytes()).unwrap();
    let mut rest = Vec::new();
    let full = train_stage1(&data, CondSource::Environment, &c, Some(half), &mut rest).unwrap();
    part.extend(rest);
    assert_eq!(strip(&part), strip(&a));
    assert_eq!(full.weights_hash(), ca.weights_hash());
}

fn stage1_pair(data: &MixedData) -> (Checkpoint, Checkpoint) {
    let bg = train_stage1(data, CondSource::Background, &cfg(TrainStage::Stage1Bg, 3, 1e-3), None, &mut Vec::new()).unwrap();
    let env = train_stage1(data, CondSource::Environment, &cfg(TrainStage::Stage1Env, 3, 1e-3), None, &mut Vec::new()).unwrap();
    (bg, env)
}

#[test]
fn align_touches_only_the_align_net() {
    let (_d, data) = toy_data(12, 3);
    let data = MixedData::single(data);
    let (bg, env) = stage1_pair(&data);
    let merged = merge_stage1(&bg, &env).unwrap();
    let out = train_align(&data, &bg, &env, &cfg(TrainStage::Align, 100, 1e-3), None, &mut Vec::new()).unwrap();
    assert_eq!(out.stage, StageTag::Align);
    for prefix in [UNET, BRANCH, EXTRACT_BG, EXTRACT_ENV] {
        assert_eq!(snapshot(&out.model, prefix), snapshot(&merged, prefix), "{prefix}");
    }
    assert_ne!(snapshot(&out.model, ALIGN), snapshot(&merged, ALIGN));
    // Fits the training pairs better than the identity map.
    let (aligned, identity) = align_gap(&out.model, &data.sources[0].1).unwrap();
    assert!(aligned < identity, "{aligned} vs {identity}");
}

#[test]
fn align_requires_stage1_checkpoints() {
    let (_d, data) = toy_data(4, 4);
    let data = MixedData::single(data);
    let (bg, env) = stage1_pair(&data);
    assert!(train_align(&data, &env, &bg, &cfg(TrainStage::Align, 1, 1e-3), None, &mut Vec::new()).is_err());
}

#[test]
fn assembly_substitutes_without_touching_weights() {
    let (_d, data) = toy_data(8, 5);
    let mdata = MixedData::single(data.clone());
    let (bg, env) = stage1_pair(&mdata);
    let align = train_align(&mdata, &bg, &env, &cfg(TrainStage::Align, 5, 1e-3), None, &mut Vec::new()).unwrap();
    let fin = assemble_final(&env, &bg, &align).unwrap();
    assert_eq!(fin.stage, StageTag::Final);
    assert_eq!(snapshot(&fin.model, UNET), snapshot(&env.model, UNET));
    assert_eq!(snapshot(&fin.model, BRANCH), snapshot(&env.model, BRANCH));
    assert_eq!(snapshot(&fin.model, EXTRACT_BG), snapshot(&bg.model, EXTRACT_BG));
    assert_eq!(snapshot(&fin.model, ALIGN), snapshot(&align.model, ALIGN));

    // With the lighting path stubbed to the exact env feature, the
    // assembled model reproduces the env-conditioned model bitwise.
    let b = data.gather(&[0, 1]);
    let p = SamplerParams { mode: SamplerMode::Ddim, steps: 4, seed: 9 };
    let f_env = env.model.compute_feature(CondSource::Environment, &b.z_thumb).unwrap();
    let want = env.model.sample(CondSource::Environment, &b.x_a, &b.m, &b.z_thumb, &p).unwrap();
    let got = fin.model.sample_with_feature(&b.x_a, &b.m, Some(&f_env), &p).unwrap();
    assert_eq!(got, want);

    // Wrong order of inputs or mismatched widths are refused.
    assert!(assemble_final(&bg, &env, &align).is_err());
    let mut other = tiny();
    other.lightcond.feature_channels = 8;
    let wide = Checkpoint::new(StageTag::Stage1Bg, HarmonyModel::new(&other, 0).unwrap(), 0);
    assert!(matches!(assemble_final(&env, &wide, &align), Err(Error::Config(_))));
}

#[test]
fn finetune_updates_only_the_denoiser() {
    let (_d, data) = toy_data(8, 6);
    let mdata = MixedData::single(data);
    let (bg, env) = stage1_pair(&mdata);
    let align = train_align(&mdata, &bg, &env, &cfg(TrainStage::Align, 2, 1e-3), None, &mut Vec::new()).unwrap();
    let fin = assemble_final(&env, &bg, &align).unwrap();
    let tuned = train_finetune(&mdata, fin.clone(), &cfg(TrainStage::Finetune, 4, 1e-3), &mut Vec::new()).unwrap();
    assert_eq!(tuned.stage, StageTag::Finetuned);
    for prefix in [BRANCH, EXTRACT_BG, EXTRACT_ENV, ALIGN] {
        assert_eq!(snapshot(&tuned.model, prefix), snapshot(&fin.model, prefix), "{prefix}");
    }
    assert_ne!(snapshot(&tuned.model, UNET), snapshot(&fin.model, UNET));
    assert!(train_finetune(&mdata, bg, &cfg(TrainStage::Finetune, 1, 1e-3), &mut Vec::new()).is_err());
}

#[test]
fn diverging_training_aborts_with_diagnostic() {
    let (_d, data) = toy_data(4, 7);
    let data = MixedData::single(data);
    let mut model = HarmonyModel::<f32>::new(&tiny(), 0).unwrap();
    let id = model.store.id("unet.out_conv.b").unwrap();
    model.store.value_mut(id).data[0] = f32::NAN;
    let init = Checkpoint::new(StageTag::Stage1Bg, model, 0);
    let err = train_stage1(&data, CondSource::Background, &cfg(TrainStage::Stage1Bg, 2, 1e-3), Some(init), &mut Vec::new())
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }), "{err}");
}

#[test]
fn file_observer_writes_tsv_and_checkpoints() {
    let (_d, data) = toy_data(4, 8);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("loss.tsv");
    let ck = dir.path().join("m.ckpt");
    let mut obs = FileObserver::new(Some(&log), Some(&ck)).unwrap();
    let c = TrainConfig { checkpoint_every: 2, ..cfg(TrainStage::Stage1Bg, 5, 1e-3) };
    train_stage1(&MixedData::single(data), CondSource::Background, &c, None, &mut obs).unwrap();
    let text = fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOSS_LOG_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("1\t"));
    let saved = Checkpoint::load(&ck).unwrap();
    assert_eq!(saved.step, 4);
    assert!(saved.optimizer.is_some());
}

use std::fs;

use super::*;
use crate::checkpoint::Checkpoint;
use crate::model::HarmonyModel;
use crate::stagesim::{load_dataset, manifest_hash, render_linear, validate_dataset, EnvStyle};

fn small() -> SynthConfig {
    let base = DatasetConfig { image_size: 16, env_height: 8, n_subjects: 4, n_envs: 6, ..Default::default() };
    SynthConfig {
        scenes: DatasetConfig { env_style: EnvStyle::Natural, pool_seed: 7, ..base.clone() },
        conditions: base,
        sampler_steps: 3,
        ..Default::default()
    }
}

fn scene_set() -> SceneSet {
    SceneSet::new(small().scenes).unwrap()
}

fn real(set: &SceneSet, seed: u64) -> RealImage {
    let scene = set.sample_scene(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    set.render_real(&format!("r{seed}"), &scene).unwrap()
}

#[test]
fn clean_background_is_the_projected_scene_env() {
    let set = scene_set();
    for seed in 0..4 {
        let r = real(&set, seed);
        let scene = r.scene.clone().unwrap();
        let clean = set.make_clean_background(&r).unwrap();
        let oracle = tonemap_ldr(&project_to_background(&set.pool.lit(&scene.lighting), &scene.crop)).quantize8();
        assert_eq!(clean, oracle);
        // The subject is gone: inside the mask the clean plate differs from the photo.
        assert!(foreground_diff(&clean, &r.image, &r.mask).unwrap() > 0.0);
    }
}

#[test]
fn clean_background_needs_scene_metadata() {
    let mut r = real(&scene_set(), 0);
    r.scene = None;
    assert!(matches!(scene_set().make_clean_background(&r), Err(Error::MissingScene(id)) if id == "r0"));
}

#[test]
fn recomposition_reproduces_the_photo() {
    let set = scene_set();
    for seed in 0..6 {
        let r = real(&set, seed);
        let scene = r.scene.as_ref().unwrap();
        let clean = set.make_clean_background(&r).unwrap();
        let radiance = crate::envlight::RadianceTable::new(&set.env(scene));
        let (lin, _) = render_linear(&scene.subject, &radiance, 16).unwrap();
        let again = composite(&tonemap_ldr(&lin), &r.mask, &clean).unwrap().quantize8();
        let s = 16isize;
        let fractional = |x: isize, y: isize| {
            (0..s).contains(&x) && (0..s).contains(&y) && {
                let v = r.mask.pixel(x as usize, y as usize)[0];
                v > 0.0 && v < 1.0
            }
        };
        for y in 0..s {
            for x in 0..s {
                let edge = (-1..=1).any(|dy| (-1..=1).any(|dx| fractional(x + dx, y + dy)));
                let (a, b) = (again.pixel(x as usize, y as usize), r.image.pixel(x as usize, y as usize));
                for k in 0..3 {
                    let d = (a[k] - b[k]).abs();
                    if edge {
                        assert!(d < 2.0 / 255.0, "edge ({x},{y}) {d}");
                    } else {
                        assert_eq!(d, 0.0, "({x},{y})");
                    }
                }
            }
        }
    }
}

/// Always draws the scene's own lighting.
fn same_condition(set: &SceneSet, r: &RealImage) -> Condition {
    let scene = r.scene.as_ref().unwrap();
    Condition::new(ConditionKind::Environment, scene.lighting, set.env(scene), &scene.crop)
}

#[test]
fn identical_condition_is_rejected() {
    let set = scene_set();
    let relighter = SimRelighter { image_size: 16 };
    let mut rejected = 0;
    for seed in 0..20 {
        let r = real(&set, seed);
        let clean = set.make_clean_background(&r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match relight_input(&r, &clean, &relighter, 0.02, 10, &mut rng, |_| Ok(same_condition(&set, &r))) {
            Err(Error::TooManyRejections(11)) => rejected += 1,
            other => panic!("{:?}", other.map(|(_, c)| c.id())),
        }
    }
    assert_eq!(rejected, 20);
}

#[test]
fn distinct_conditions_relight_the_foreground_only() {
    let cfg = small();
    let set = scene_set();
    let pool = SubjectPool::new(&cfg.conditions);
    let relighter = SimRelighter { image_size: 16 };
    let mut attempts = 0;
    for seed in 0..20 {
        let r = real(&set, seed);
        let clean = set.make_clean_background(&r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (input, cond) = relight_input(&r, &clean, &relighter, 0.02, 10, &mut rng, |rng| {
            attempts += 1;
            draw_condition(&cfg, &pool, &relighter, &r.scene.as_ref().unwrap().crop, rng)
        })
        .unwrap();
        assert!(foreground_diff(&input, &r.image, &r.mask).unwrap() > 0.02, "{}", cond.id());
        for (i, &m) in r.mask.data.iter().enumerate() {
            if m == 0.0 {
                assert_eq!(&input.data[i * 3..i * 3 + 3], &clean.data[i * 3..i * 3 + 3]);
            }
        }
    }
    // A random light-stage condition rarely leaves a natural scene unchanged.
    assert!(attempts < 30, "{attempts}");
}

#[test]
fn conditions_are_split_between_kinds() {
    let cfg = small();
    let pool = SubjectPool::new(&cfg.conditions);
    let crop = CropSpec::new(60.0, 0.0, 0.0, 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let relighter = SimRelighter { image_size: 16 };
    let n = 400;
    let env = (0..n)
        .filter(|_| draw_condition(&cfg, &pool, &relighter, &crop, &mut rng).unwrap().kind == ConditionKind::Environment)
        .count();
    assert!((env as f64 / n as f64 - 0.5).abs() < 0.1, "{env}");
}

#[test]
fn synthesized_dataset_contracts() {
    let cfg = small();
    let relighter = SimRelighter { image_size: 16 };
    let dir = tempfile::tempdir().unwrap();
    let rows = build_synth_dataset(&cfg, &relighter, 8, 3, dir.path()).unwrap();
    assert_eq!(validate_dataset(dir.path()).unwrap(), 8);
    let ds = load_dataset(dir.path()).unwrap();
    let set = SceneSet::new(cfg.scenes.clone()).unwrap();
    for (row, t) in rows.iter().zip(&ds.tuples) {
        let prov = t.provenance.as_deref().unwrap();
        assert!(prov.starts_with(&format!("source={};cond=", row.meta.id)) && prov.ends_with("ckpt=simulator"));
        // The target file is the untouched photo, byte for byte.
        let scene = Scene { subject: t.meta.subject.clone(), lighting: t.meta.lighting_b, crop: t.meta.crop };
        let photo = set.render_real(&t.meta.id, &scene).unwrap();
        let tmp = dir.path().join("photo.png");
        photo.image.save_png(&tmp).unwrap();
        assert_eq!(fs::read(&tmp).unwrap(), fs::read(dir.path().join(&row.files.x_b)).unwrap());
        for (i, &m) in t.m.data.iter().enumerate() {
            if m == 0.0 {
                assert_eq!(&t.x_a.data[i * 3..i * 3 + 3], &t.x_b.data[i * 3..i * 3 + 3]);
            }
        }
    }
}

#[test]
fn synthesis_is_deterministic() {
    let cfg = small();
    let relighter = SimRelighter { image_size: 16 };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_synth_dataset(&cfg, &relighter, 4, 9, a.path()).unwrap();
    build_synth_dataset(&cfg, &relighter, 4, 9, b.path()).unwrap();
    build_synth_dataset(&cfg, &relighter, 4, 10, c.path()).unwrap();
    assert_eq!(manifest_hash(a.path()).unwrap(), manifest_hash(b.path()).unwrap());
    assert_ne!(manifest_hash(a.path()).unwrap(), manifest_hash(c.path()).unwrap());
    assert!(build_synth_dataset(&cfg, &relighter, 0, 9, a.path()).is_err());
}

#[test]
fn model_relighter_pairs_conditions_with_stages() {
    let mut cfg = crate::model::tests::tiny();
    cfg.schedule_steps = 20;
    let model = HarmonyModel::<f32>::new(&cfg, 0).unwrap();
    let env_only = ModelRelighter::new(Checkpoint::new(StageTag::Stage1Env, model.clone(), 0), 3).unwrap();
    assert!(env_only.supports(ConditionKind::Environment) && !env_only.supports(ConditionKind::Background));
    assert!(ModelRelighter::new(Checkpoint::new(StageTag::Align, model.clone(), 0), 3).is_err());

    let relighter = ModelRelighter::new(Checkpoint::new(StageTag::Final, model, 0), 3).unwrap();
    assert!(relighter.supports(ConditionKind::Environment) && relighter.supports(ConditionKind::Background));
    let dir = tempfile::tempdir().unwrap();
    let synth = small();
    let rows = build_synth_dataset(&synth, &relighter, 3, 0, dir.path()).unwrap();
    assert!(rows[0].provenance.as_ref().unwrap().ends_with(&relighter.checkpoint_hash()));
    assert_eq!(validate_dataset(dir.path()).unwrap(), 3);
}

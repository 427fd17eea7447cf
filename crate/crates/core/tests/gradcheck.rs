use clickseg::losses::{LossWeights, SupervisionTargets};
use clickseg::model::{ModelConfig, ModelParams};
use clickseg::pipeline::PreparedScene;
use clickseg::sampling::{
    sample_click_candidates, subset_clicks, ClickSet, SamplerConfig, SubsetSize,
};
use clickseg::synthdata::{generate_scene, SceneSpec};
use clickseg::training::{grad_check, grad_check_with, GradCheckOptions};

fn fixture() -> (ModelParams, PreparedScene, ClickSet, SupervisionTargets) {
    let s = generate_scene(&SceneSpec {
        instances: (3, 3),
        points_per_instance: (10, 10),
        floor_points: 6,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let (inst, cls) = s.labels().unwrap();
    let cls: Vec<i64> = cls.iter().map(|c| c % 3).collect();
    let cands = sample_click_candidates(&s.cloud, inst, &SamplerConfig::default()).unwrap();
    let clicks = subset_clicks(&cands, SubsetSize::Fixed(1), 0);
    let targets = SupervisionTargets::from_clicks(&clicks, inst, &cls).unwrap();
    let model = ModelParams::new(ModelConfig {
        init_seed: 9,
        ..ModelConfig::tiny(2)
    })
    .unwrap();
    (model, PreparedScene::new(&s.cloud), clicks, targets)
}

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        coords_per_tensor: 6,
        ..Default::default()
    }
}

#[test]
fn analytic_gradients_pass() {
    let (model, scene, clicks, targets) = fixture();
    let r = grad_check(
        &model,
        &scene,
        &clicks,
        &targets,
        &LossWeights::default(),
        &opts(),
    )
    .unwrap();
    assert!(r.passed, "{:#?}", r.groups);
    assert!(r.loss.is_finite() && r.loss > 0.0);
}

#[test]
fn corrupted_gradient_is_caught() {
    let (model, scene, clicks, targets) = fixture();
    let victim = model
        .store
        .ids()
        .find(|&id| model.store.name(id).contains("mask_head"))
        .expect("mask head parameters");
    let group = ModelParams::group_of(model.store.name(victim));
    let r = grad_check_with(
        &model,
        &scene,
        &clicks,
        &targets,
        &LossWeights::default(),
        &GradCheckOptions::default(),
        |g| {
            g.get_mut(victim)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 1.01)
        },
    )
    .unwrap();
    assert!(!r.passed);
    let bad = r.group(&group).unwrap();
    assert!(!bad.passed && bad.max_rel_error > 1e-3, "{bad:?}");
    assert!(r
        .groups
        .iter()
        .filter(|g| g.group != group)
        .all(|g| g.passed));
}

#[test]
fn zero_weighted_terms_vanish_from_the_check() {
    let (model, scene, clicks, targets) = fixture();
    let w = LossWeights {
        bce: 0.0,
        dice: 0.0,
        ..Default::default()
    };
    let r = grad_check(&model, &scene, &clicks, &targets, &w, &opts()).unwrap();
    assert!(r.passed, "{:#?}", r.groups);
}

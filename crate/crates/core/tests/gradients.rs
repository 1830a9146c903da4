use maskcl::distill::DistillMode;
use maskcl::model::MaskActivation;
use maskcl::runner::{gradcheck, ExperimentConfig};

fn assert_clean(cfg: &ExperimentConfig, seed: u64) {
    let report = gradcheck(cfg, 40, seed).unwrap();
    for c in report.components.iter().filter(|c| c.active) {
        assert!(c.max_rel_error < 1e-4, "{} at seed {seed}: {:e} worst {:?}", c.component.name(), c.max_rel_error, c.worst);
    }
    assert_eq!(report.old_model_max_change, 0.0);
}

#[test]
fn softmax_masks_across_seeds() {
    let cfg = ExperimentConfig::default();
    for seed in 1..4 {
        assert_clean(&cfg, seed);
    }
}

#[test]
fn sigmoid_masks() {
    let mut cfg = ExperimentConfig::default();
    cfg.model.mask_activation = MaskActivation::Sigmoid;
    assert_clean(&cfg, 7);
}

#[test]
fn standard_distillation_and_custom_weights() {
    let mut cfg = ExperimentConfig::default();
    cfg.losses.distill_mode = DistillMode::Kd;
    cfg.losses.lambda_d = Some(3.0);
    cfg.losses.lambda_mask = 2.0;
    cfg.losses.gamma = 0.0;
    assert_clean(&cfg, 11);
}

#[test]
fn every_component_is_exercised() {
    let report = gradcheck(&ExperimentConfig::default(), 10, 0).unwrap();
    assert_eq!(report.components.len(), 6);
    assert!(report.components.iter().all(|c| c.active && c.probes == 10));
}

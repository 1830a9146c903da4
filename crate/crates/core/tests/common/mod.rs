use maskcl::runner::ExperimentConfig;

/// A protocol small enough to train in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "tiny".into();
    cfg.data.palette_size = 4;
    cfg.data.thing_classes = 2;
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg.data.max_instances = 1;
    cfg.data.train_per_class = 3;
    cfg.data.test_per_class = 2;
    cfg.protocol.initial = 2;
    cfg.protocol.increment = 1;
    cfg.model.queries = 4;
    cfg.model.dim = 8;
    cfg.model.hidden = 4;
    cfg.model.ffn = 8;
    cfg.optimization.steps_initial = 6;
    cfg.optimization.steps_per_class = 3;
    cfg.optimization.batch_size = 2;
    cfg
}

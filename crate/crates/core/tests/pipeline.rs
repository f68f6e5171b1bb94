use uwhfl::config::ExperimentConfig;
use uwhfl::federation::{self, MethodKind};
use uwhfl::metrics;

#[test]
fn training_lowers_the_loss_on_synthetic_defaults() {
    let mut cfg = ExperimentConfig::default();
    cfg.deployment.n_sensors = 50;
    cfg.method.kind = MethodKind::HflSelective;
    let out = federation::run_experiment(&cfg, 0).unwrap();
    assert_eq!(out.reports.len(), 20);
    let last = out.reports.last().unwrap().mean_train_loss;
    assert!(last < out.initial_train_loss, "{last} vs {}", out.initial_train_loss);
    for (k, r) in out.reports.iter().enumerate() {
        assert_eq!(r.round, k + 1);
        assert!(r.battery_min <= r.battery_mean && r.battery_mean <= cfg.energy.e_init);
    }
}

#[test]
fn battery_never_rises_and_reports_parse_back() {
    let mut cfg = ExperimentConfig::default();
    cfg.deployment.n_sensors = 30;
    cfg.rounds = 4;
    cfg.method.kind = MethodKind::HflNearest;
    cfg.data.n_train = 60;
    let out = federation::run_experiment(&cfg, 1).unwrap();
    for w in out.reports.windows(2) {
        assert!(w[1].battery_min <= w[0].battery_min);
        assert!(w[1].battery_mean <= w[0].battery_mean);
    }
    let mut buf = Vec::new();
    metrics::write_reports_csv(&mut buf, &out.reports).unwrap();
    assert_eq!(metrics::read_reports_csv(buf.as_slice()).unwrap(), out.reports);
}

#[test]
fn drifting_fogs_change_the_graph_but_not_determinism() {
    let mut cfg = ExperimentConfig::default();
    cfg.deployment.n_sensors = 30;
    cfg.rounds = 4;
    cfg.data.n_train = 60;
    cfg.mobility.enabled = true;
    cfg.mobility.mean_speed = 5.0;
    cfg.method.kind = MethodKind::HflSelective;
    let a = federation::run_experiment(&cfg, 2).unwrap();
    let b = federation::run_experiment(&cfg, 2).unwrap();
    assert_eq!(a.reports, b.reports);
    cfg.mobility.enabled = false;
    let still = federation::run_experiment(&cfg, 2).unwrap();
    assert_eq!(a.reports[0], still.reports[0]);
    assert_ne!(a.reports[3].e_s2f, still.reports[3].e_s2f);
}

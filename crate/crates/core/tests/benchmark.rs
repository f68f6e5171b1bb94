use std::fs;
use std::path::Path;

use uwhfl::config::ExperimentConfig;
use uwhfl::data::{self, BenchmarkKind, BenchmarkSpec, SynthConfig};
use uwhfl::federation::{self, MethodKind};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/entity_5x38.csv");

#[test]
fn loader_reads_and_re_emits_the_fixture() {
    let m = data::read_matrix(Path::new(FIXTURE), Some(BenchmarkKind::Smd.dim())).unwrap();
    assert_eq!((m.rows(), m.cols()), (5, 38));
    for i in 0..5 {
        for j in 0..38 {
            assert_eq!(m.row(i)[j], ((i * 38 + j) as f64 - 95.0) / 8.0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.csv");
    data::write_matrix(&out, &m).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(FIXTURE).unwrap());
}

#[test]
fn dimension_mismatch_is_an_error() {
    let err = data::read_matrix(Path::new(FIXTURE), Some(BenchmarkKind::Smap.dim()))
        .unwrap_err()
        .to_string();
    assert!(err.contains("38") && err.contains("25"), "{err}");
}

fn synth_entities(root: &Path, n: usize) -> Vec<data::LocalDataset> {
    let ds = data::synth_generate(&SynthConfig {
        n_sensors: n,
        n_train: 40,
        n_val: 10,
        n_test: 60,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    data::dump_datasets(root, &ds).unwrap();
    ds
}

#[test]
fn entities_map_onto_sensors() {
    let dir = tempfile::tempdir().unwrap();
    let original = synth_entities(dir.path(), 12);
    let spec = BenchmarkSpec {
        root: dir.path().to_path_buf(),
        dim: 32,
        ..Default::default()
    };
    let loaded = data::load_benchmark(&spec).unwrap();
    assert_eq!(loaded.len(), 12);
    for ((name, ds), orig) in loaded.iter().zip(&original) {
        assert!(name.starts_with("sensor_"));
        assert_eq!(ds.test_labels, orig.test_labels);
        assert_eq!((ds.train.rows(), ds.val.rows()), (40, 10));
        let mean: f64 = (0..ds.train.rows()).map(|r| ds.train.row(r)[0]).sum::<f64>() / 40.0;
        assert!(mean.abs() < 1e-9);
    }

    let mut cfg = ExperimentConfig::default();
    cfg.benchmark = Some(spec);
    cfg.rounds = 2;
    cfg.method.kind = MethodKind::HflSelective;
    let out = federation::run_experiment(&cfg, 0).unwrap();
    assert_eq!((out.n_sensors, out.n_fogs), (12, 2));
    assert_eq!(out.reports.len(), 2);
    assert!(out.evaluation.detection.f1.is_finite());
}

#[test]
fn label_count_must_match_test_rows() {
    let dir = tempfile::tempdir().unwrap();
    synth_entities(dir.path(), 2);
    fs::write(dir.path().join("sensor_001/labels.csv"), "0\n1\n").unwrap();
    let spec = BenchmarkSpec {
        root: dir.path().to_path_buf(),
        dim: 32,
        ..Default::default()
    };
    let err = data::load_benchmark(&spec).unwrap_err().to_string();
    assert!(err.contains("sensor_001") && err.contains("2 labels"), "{err}");
}

mod common;

use placefl_core::config::{ExperimentConfig, Mode, Study};
use placefl_core::experiment::{checkpoint_path, run_experiment};
use placefl_core::metrics::{read_metrics, MetricRecord, MetricsWriter, RunSummary};
use placefl_core::model::{init_params, ParamVector};
use placefl_core::partition::SplitKind;
use placefl_core::report::tables;

fn tiny(mode: Mode, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        mode,
        seeds: vec![0, 1],
        world: common::small_world(3),
        embedder: common::small_embedder(),
        ..Default::default()
    };
    cfg.partition.radius = 250.0;
    cfg.partition.validation_clients = 2;
    cfg.local.lr = 1e-2;
    cfg.local.max_local_iterations = 4;
    cfg.federation.rounds = rounds;
    cfg.federation.clients_per_round = 3;
    cfg.federation.eval_interval = 1;
    cfg.centralized.epochs = rounds;
    cfg.hierarchy.clients_per_cluster_per_round = 2;
    cfg.hierarchy.aggregation_interval = 2;
    cfg
}

fn run(cfg: &ExperimentConfig) -> (Vec<RunSummary>, Vec<MetricRecord>) {
    let mut records = Vec::new();
    let summaries = run_experiment(
        cfg,
        &mut |r: &MetricRecord| {
            records.push(r.clone());
            Ok(())
        },
        None,
    )
    .unwrap();
    (summaries, records)
}

#[test]
fn identical_configs_give_identical_records() {
    for mode in [Mode::Federated, Mode::Hierarchical, Mode::Centralized] {
        let cfg = tiny(mode, 3);
        let (a, ra) = run(&cfg);
        let (b, rb) = run(&cfg);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].final_checksum, a[1].final_checksum, "seeds should differ");
    }
}

#[test]
fn zero_rounds_leave_the_model_untouched() {
    for mode in [Mode::Federated, Mode::Hierarchical] {
        let cfg = tiny(mode, 0);
        let (summaries, _) = run(&cfg);
        for s in &summaries {
            let theta0 = init_params(&cfg.embedder, cfg.with_run_seed(s.key.seed).init_seed).unwrap();
            assert_eq!(s.final_checksum, theta0.checksum());
            assert_eq!(s.initial, s.final_recall);
        }
    }
}

#[test]
fn checkpoints_hold_the_final_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Mode::Federated, 2);
    let summaries = run_experiment(&cfg, &mut |_: &MetricRecord| Ok(()), Some(dir.path())).unwrap();
    for s in &summaries {
        let file = std::fs::File::open(checkpoint_path(dir.path(), &s.key, "final")).unwrap();
        let params = ParamVector::read_from(std::io::BufReader::new(file)).unwrap();
        assert_eq!(params.checksum(), s.final_checksum);
        assert!(checkpoint_path(dir.path(), &s.key, "best").is_file());
    }
}

#[test]
fn metrics_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let cfg = tiny(Mode::Federated, 2);
    let mut writer = MetricsWriter::create(&path).unwrap();
    let summaries = run_experiment(&cfg, &mut |r: &MetricRecord| writer.write(r), None).unwrap();
    drop(writer);
    let records = read_metrics(&path).unwrap();
    let read: Vec<&RunSummary> = placefl_core::metrics::summaries(&records);
    assert_eq!(read.len(), summaries.len());
    for (a, b) in read.iter().zip(&summaries) {
        assert_eq!(*a, b);
    }
    let rounds = records.iter().filter(|r| matches!(r, MetricRecord::Round { .. })).count();
    assert_eq!(rounds, 2 * 2);
}

#[test]
fn config_survives_a_toml_round_trip() {
    let mut cfg = tiny(Mode::Hierarchical, 5);
    cfg.study = Some(Study::AggregationInterval { values: vec![1, 5] });
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn study_grid_gives_one_row_per_variant() {
    let mut cfg = tiny(Mode::Federated, 1);
    cfg.study = Some(Study::Splits {
        splits: vec![SplitKind::Proximity, SplitKind::Random],
    });
    cfg.partition.n_clients = 6;
    let (summaries, _) = run(&cfg);
    assert_eq!(summaries.len(), 4);
    let t = tables(&summaries);
    assert_eq!(t.len(), 1);
    assert_eq!(t[0].rows.len(), 2);
    assert!(t[0].rows.iter().all(|r| r[1] == "2"));
}

use super::*;
use crate::policy::PolicyConfig;
use crate::trainer::{Benchmark, TrainConfig};

fn tiny(dir: &Path, strategy: Strategy) -> ExperimentConfig {
    ExperimentConfig {
        strategy,
        seeds: vec![1, 2],
        output_dir: dir.to_path_buf(),
        benchmark: Benchmark::one_by_one(3),
        policy: PolicyConfig {
            latent_dim: 8,
            expert_hidden: 16,
            euler_steps: 3,
            ..PolicyConfig::default()
        },
        train: TrainConfig {
            iterations_base: 5,
            iterations_incremental: 3,
            batch_size: 8,
            demos_per_task: 2,
            eval_episodes: 2,
            fisher_samples: 4,
            probe_count: 4,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn run_directory_has_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny(tmp.path(), Strategy::Er);
    let agg = run_experiment(&config, false, &mut ()).unwrap();
    assert_eq!(agg.seeds, vec![1, 2]);
    let dir = seed_dir(tmp.path(), Strategy::Er, 1);
    for f in ["config.json", "R.csv", "losses.csv", "memory_manifest.json", "metrics.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    for j in 0..3 {
        assert!(checkpoint_path(&dir, j).is_file());
        assert!(report_path(&dir, j).is_file());
    }
    let stored = ExperimentConfig::load(&dir.join("config.json")).unwrap();
    assert_eq!(stored.seeds, vec![1]);
    let losses = std::fs::read_to_string(dir.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 5 + 3 + 3);
    let metrics: Metrics = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, Metrics::compute(&SuccessMatrix::read_csv(&dir.join("R.csv")).unwrap()));
    assert!(strategy_dir(tmp.path(), Strategy::Er).join("aggregate.json").is_file());
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![3],
        ..tiny(tmp.path(), Strategy::Infovla)
    };
    let full = run_seed(&config, tmp.path(), 3, false, &mut ()).unwrap();
    let dir = seed_dir(tmp.path(), Strategy::Infovla, 3);
    let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
    let (r_csv, losses, manifest) = (read("R.csv"), read("losses.csv"), read("memory_manifest.json"));
    let last = read("checkpoints/stage-2.json");

    // Interrupted after stage 1.
    std::fs::remove_file(checkpoint_path(&dir, 2)).unwrap();
    std::fs::remove_file(dir.join("R.csv")).unwrap();
    let resumed = run_seed(&config, tmp.path(), 3, true, &mut ()).unwrap();
    assert_eq!(resumed.resumed_stages, 2);
    assert_eq!(resumed.metrics, full.metrics);
    assert_eq!(read("R.csv"), r_csv);
    assert_eq!(read("losses.csv"), losses);
    assert_eq!(read("memory_manifest.json"), manifest);
    assert_eq!(read("checkpoints/stage-2.json"), last);
}

#[test]
fn resume_refuses_a_different_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![4],
        ..tiny(tmp.path(), Strategy::Sequential)
    };
    run_seed(&config, tmp.path(), 4, false, &mut ()).unwrap();
    let mut changed = config.clone();
    changed.train.lr = 5e-3;
    match run_seed(&changed, tmp.path(), 4, true, &mut ()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "config"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn comparison_checks_orderings() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![5],
        ..tiny(tmp.path(), Strategy::Sequential)
    };
    let cmp = run_comparison(&config, &[Strategy::Sequential, Strategy::Er, Strategy::Infovla], false, &mut ()).unwrap();
    assert_eq!(cmp.aggregates.len(), 3);
    assert_eq!(cmp.checks.len(), 3);
    assert!(tmp.path().join("compare.txt").is_file());
    let single = run_comparison(&config, &[Strategy::Er], false, &mut ()).unwrap();
    assert!(single.checks.is_empty());
    assert_eq!(
        single.aggregates[0].faa,
        cmp.get(Strategy::Er).unwrap().faa,
        "strategies share suite and seeds"
    );
}

#[test]
fn stats_use_sample_deviation() {
    let s = Stat::of(&[1.0, 2.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert!((s.std - 1.0).abs() < 1e-12);
    assert_eq!(Stat::of(&[0.5]).std, 0.0);
}

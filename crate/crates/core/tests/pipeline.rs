use dafos_core::config::{ExperimentConfig, TrainOptions};
use dafos_core::data::{load_registry, make_class_splits, ClassSplits, DatasetRegistry};
use dafos_core::eval::evaluate;
use dafos_core::sweep::{run_sweep, SweepValues, SIGMA_GRID};
use dafos_core::trainer::{load_checkpoint, train};

fn setup(episodes: usize) -> (ExperimentConfig, DatasetRegistry, ClassSplits) {
    let mut cfg = ExperimentConfig {
        train: TrainOptions {
            episodes,
            lr: 0.01,
            episodes_per_step: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.eval.episodes = 5;
    cfg.validate().unwrap();
    let registry = load_registry(None, &cfg.dataset).unwrap();
    let splits = make_class_splits(&registry, &cfg.splits).unwrap();
    (cfg, registry, splits)
}

#[test]
fn single_episode_checkpoint_reloads_to_identical_eval() {
    let (cfg, registry, splits) = setup(1);
    let dir = tempfile::tempdir().unwrap();
    let (model, stats) = train(&registry, &splits, &cfg, Some(dir.path())).unwrap();
    assert_eq!(stats.len(), 1);
    let ckpt = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(ckpt.meta.episode, 1);
    assert_eq!(ckpt.splits, splits);
    let a = evaluate(&model, &registry, &splits, &cfg).unwrap();
    let b = evaluate(&ckpt.model, &registry, &ckpt.splits, &ckpt.config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shots_sweep_rows_match_direct_evaluation() {
    let (cfg, registry, splits) = setup(20);
    let (model, _) = train(&registry, &splits, &cfg, None).unwrap();
    let rows = run_sweep(&cfg, &registry, &splits, &SweepValues::Shots(vec![1, 5]), Some(&model)).unwrap();
    assert_eq!(rows.len(), 2);
    for (row, shots) in rows.iter().zip([1, 5]) {
        let mut c = cfg.clone();
        c.eval.shots = shots;
        let r = evaluate(&model, &registry, &splits, &c).unwrap().report;
        assert_eq!((row.acc, row.auroc), (r.acc_mean, r.auroc_mean));
        assert_eq!(row.value, shots.to_string());
        assert!(row.kl.is_none());
    }
}

#[test]
fn sigma_grid_sweep_has_six_rows_with_kl() {
    let (cfg, registry, splits) = setup(10);
    let rows = run_sweep(&cfg, &registry, &splits, &SweepValues::Sigma(SIGMA_GRID.to_vec()), None).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.kl.is_some_and(|k| k.is_finite() && k >= 0.0)));
    assert_eq!(rows[3].value, "0.3:0.9");
}

#[test]
fn empty_sweep_is_rejected() {
    let (cfg, registry, splits) = setup(1);
    assert!(run_sweep(&cfg, &registry, &splits, &SweepValues::OpenClasses(vec![]), None).is_err());
}

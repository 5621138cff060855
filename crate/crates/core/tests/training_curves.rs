use dafos_core::config::{apply_overrides, parse_config};
use dafos_core::data::{load_registry, make_class_splits};
use dafos_core::trainer::train;

const BENCHMARK: &str = include_str!("../../../configs/synthetic_benchmark.toml");

/// On the default task the classes are far apart and L_C starts near zero, so
/// the trend is checked on a task whose classes overlap (spread 1 instead of 3).
#[test]
fn compactness_trends_down_over_first_fifty_episodes() {
    let text = apply_overrides(BENCHMARK, &["dataset.synthetic.class_spread=1.0".into(), "train.episodes=50".into()])
        .unwrap();
    let base = parse_config(&text).unwrap();
    let registry = load_registry(None, &base.dataset).unwrap();
    let splits = make_class_splits(&registry, &base.splits).unwrap();
    let mut curve = vec![0.0; 41];
    let seeds = 4;
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let (_, stats) = train(&registry, &splits, &cfg, None).unwrap();
        assert_eq!(stats.len(), 50);
        // 10-episode moving average.
        for (i, c) in curve.iter_mut().enumerate() {
            *c += stats[i..i + 10].iter().map(|s| s.l_c).sum::<f64>() / 10.0 / seeds as f64;
        }
    }
    let n = curve.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = curve.iter().sum::<f64>() / n;
    let slope = curve.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>()
        / curve.iter().enumerate().map(|(i, _)| (i as f64 - xm).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "moving-average slope {slope}");
    assert!(curve[40] < curve[0], "first {} last {}", curve[0], curve[40]);
}

use dafos_core::cgan::{class_anchors, gaussian_noise, paired_noise, train_cgans_on_episode, DomainReal, DualGan, GanConfig};
use dafos_core::data::Domain;
use dafos_core::features::{FeatureBatch, Provenance};
use dafos_core::rng::DetRng;
use dafos_core::tape::Mat;
use ndarray::{concatenate, Axis};
use rand::SeedableRng;

fn cluster(rng: &mut DetRng, n: usize, mean: f64) -> Mat {
    gaussian_noise(n, 3, 1.0, rng).mapv(|v| v + mean)
}

/// Balanced real-vs-fake accuracy of the closed-space discriminator on fresh
/// real samples and fresh synthetic ones.
fn disc_accuracy(gans: &DualGan, cfg: &GanConfig, anchors: &Mat, rng: &mut DetRng) -> f64 {
    let m = 200;
    let held = concatenate![Axis(0), cluster(rng, m, 2.0), cluster(rng, m, -2.0)];
    let a = Mat::from_shape_fn((2 * m, 3), |(i, j)| anchors[[i / m, j]]);
    let doms = vec![Domain::Source; 2 * m];
    let (z, _) = paired_noise(2 * m, &cfg.noise(), rng);
    let fake = gans.low.generate_values(&z, &doms, &a);
    let real_hits = gans.low.disc_values(&held, &doms, &a).iter().filter(|&&x| x > 0.0).count();
    let fake_hits = gans.low.disc_values(&fake, &doms, &a).iter().filter(|&&x| x <= 0.0).count();
    (real_hits + fake_hits) as f64 / (4 * m) as f64
}

#[test]
fn discriminator_accuracy_drifts_toward_chance() {
    let (mut early, mut late) = (0.0, 0.0);
    for seed in 0..8 {
        let mut rng = DetRng::seed_from_u64(seed);
        let cfg = GanConfig {
            noise_dim: 3,
            hidden: 16,
            inner_steps: 5,
            inner_lr: 1e-2,
            ..Default::default()
        };
        let mut gans = DualGan::new(3, &cfg, &mut rng);
        let n = 20;
        let support = FeatureBatch::new(
            concatenate![Axis(0), cluster(&mut rng, n, 2.0), cluster(&mut rng, n, -2.0)],
            (0..2 * n).map(|i| i / n).collect(),
            Domain::Source,
            Provenance::Real,
        );
        let open = FeatureBatch::new(
            cluster(&mut rng, 20, 0.0).mapv(|v| 3.0 * v),
            vec![2; 20],
            Domain::Source,
            Provenance::Real,
        );
        let anchors = class_anchors(&support, 2).unwrap();
        let reals = [DomainReal {
            domain: Domain::Source,
            ways: 2,
            support: &support,
            open_queries: &open,
        }];
        for round in 1..=200 {
            train_cgans_on_episode(&mut gans, &reals, &cfg, 10, &mut rng).unwrap();
            if round % 10 == 0 {
                let gap = (disc_accuracy(&gans, &cfg, &anchors, &mut rng) - 0.5).abs();
                match round {
                    10..=60 => early += gap,
                    150..=200 => late += gap,
                    _ => {}
                }
            }
        }
    }
    let (early, late) = (early / 48.0, late / 48.0);
    assert!(late < early, "|acc - 0.5| early {early:.3}, late {late:.3}");
}

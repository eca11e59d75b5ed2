use edgedistill::adversarial::{gan_loss, CriticMode, CriticPair, ModalitySplit};
use edgedistill::distill::{sample_edge_times, TrainConfig};
use edgedistill::eval::{sliced_wasserstein, spearman, Histogram};
use edgedistill::models::{ema_update, few_step_times, ConsistencyFn, ConsistencyModel, EmaTeacher};
use edgedistill::nn::{Matrix, ParamVector, ScoreNet};
use edgedistill::oracle::gaussian;
use edgedistill::schedule::NoiseSchedule;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn column(values: &[f64]) -> Matrix {
    Matrix::from_fn(values.len(), 1, |i, _| values[i])
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn random_model(seed: u64, scale: f64) -> ConsistencyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ScoreNet::new(2, 8, 24, 2).unwrap();
    let params = ParamVector::init(net.layout().clone(), &mut rng, scale);
    ConsistencyModel::new(net, params, NoiseSchedule::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boundary_holds_for_any_network(seed in 0u64..10_000, scale in 0.1f64..3.0, spread in 0.1f64..20.0) {
        let m = random_model(seed, scale);
        let x = gaussian(16, 2, &mut ChaCha8Rng::seed_from_u64(seed ^ 7)).scale(spread);
        let y = m.apply(&x, m.schedule.t_min).unwrap();
        let rel = y.sub(&x).frobenius() / x.frobenius();
        prop_assert!(rel < 1e-12, "{rel}");
    }

    #[test]
    fn one_dimensional_sliced_w_is_sorted_matching(a in prop::collection::vec(-10.0f64..10.0, 1..40), shift in -3.0f64..3.0, seed in 0u64..100) {
        let b: Vec<f64> = a.iter().rev().map(|v| v * 0.5 + shift).collect();
        let (sa, sb) = (sorted(&a), sorted(&b));
        let oracle = (sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        let sw = sliced_wasserstein(&column(&a), &column(&b), 3, seed).unwrap();
        prop_assert!((sw - oracle).abs() < 1e-9 * (1.0 + oracle), "{sw} vs {oracle}");
    }

    #[test]
    fn sliced_w_handles_unequal_sizes(a in prop::collection::vec(-5.0f64..5.0, 1..20), b in prop::collection::vec(-5.0f64..5.0, 1..5), k in 1usize..4) {
        // Replicating every point of `b` k times leaves its distribution unchanged.
        let rep: Vec<f64> = b.iter().flat_map(|v| std::iter::repeat_n(*v, k)).collect();
        let direct = sliced_wasserstein(&column(&a), &column(&b), 2, 0).unwrap();
        let replicated = sliced_wasserstein(&column(&a), &column(&rep), 2, 0).unwrap();
        prop_assert!((direct - replicated).abs() < 1e-9);
    }

    #[test]
    fn sliced_w_is_a_symmetric_semimetric(seed in 0u64..500, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(n, 3, &mut rng);
        let b = gaussian(n + 3, 3, &mut rng).scale(2.0);
        let ab = sliced_wasserstein(&a, &b, 16, seed).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, seed).unwrap();
        prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-12);
        prop_assert!(sliced_wasserstein(&a, &a, 16, seed).unwrap() < 1e-12);
    }

    #[test]
    fn ema_stays_between_teacher_and_student(seed in 0u64..1000, decay in 0.0f64..=1.0) {
        let t = random_model(seed, 1.0).params;
        let s = random_model(seed + 1, 1.0).params;
        let e = ema_update(EmaTeacher::new(t.clone(), decay).unwrap(), &s, decay).unwrap();
        for ((e, t), s) in e.params.values().iter().zip(t.values()).zip(s.values()) {
            prop_assert!(*e >= t.min(*s) - 1e-15 && *e <= t.max(*s) + 1e-15);
        }
    }

    #[test]
    fn edge_times_respect_their_region(seed in 0u64..1000, bound in 0.05f64..=1.0, delta in 0.001f64..0.05) {
        let sched = NoiseSchedule::default();
        let cfg = TrainConfig { edge_bound: bound, delta, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let (t, dt) = sample_edge_times(&cfg, &sched, &mut rng);
            prop_assert!(t >= sched.t_min && t <= bound * sched.t_max + 1e-15);
            prop_assert!(dt >= 0.0 && dt <= delta * sched.t_max && t - dt >= sched.t_min - 1e-15);
        }
    }

    #[test]
    fn sampling_times_decrease(steps in 1usize..12, first in 0.01f64..1.0) {
        let sched = NoiseSchedule::default();
        let times = few_step_times(&sched, steps, first).unwrap();
        prop_assert_eq!(times.len(), steps);
        prop_assert_eq!(times[0], sched.t_max);
        for w in times.windows(2) {
            prop_assert!(w[1] <= w[0] && w[1] >= sched.t_min);
        }
    }

    #[test]
    fn histogram_counts_every_value(values in prop::collection::vec(-100.0f64..100.0, 0..200), bins in 1usize..40) {
        let h = Histogram::new(&values, bins);
        prop_assert_eq!(h.counts.iter().sum::<u64>() as usize, values.len());
        prop_assert_eq!(h.edges.len(), h.counts.len() + 1);
        prop_assert!(h.edges.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn spearman_is_a_rank_statistic(x in prop::collection::vec(-50.0f64..50.0, 3..30)) {
        let rho = spearman(&x, &x.iter().map(|v| v.powi(3) + 2.0 * v).collect::<Vec<_>>());
        prop_assert!((rho - 1.0).abs() < 1e-12 || x.windows(2).all(|w| w[0] == w[1]));
        let neg = spearman(&x, &x.iter().map(|v| -v).collect::<Vec<_>>());
        prop_assert!(neg <= -1.0 + 1e-12 || x.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn both_players_report_the_same_objective(seed in 0u64..500, mode in prop_oneof![Just(CriticMode::Dual), Just(CriticMode::Single)]) {
        let split = ModalitySplit::new(4, 0..2, 2..4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let critics = CriticPair::init(&split, mode, 8, 1, &mut rng);
        let (fake, real) = (gaussian(6, 4, &mut rng), gaussian(5, 4, &mut rng));
        let l = gan_loss(&critics, &fake, &real, &split).unwrap();
        // The generator descends and the critics ascend one shared value.
        prop_assert_eq!(l.g_loss, l.d_loss);
        prop_assert!(l.g_loss.is_finite());
    }
}

#[test]
fn modality_split_validation() {
    assert!(ModalitySplit::new(4, 0..2, 2..4).is_ok());
    assert!(ModalitySplit::new(2, 0..2, 2..2).is_ok());
    assert!(ModalitySplit::new(4, 0..3, 2..4).is_err(), "overlap");
    assert!(ModalitySplit::new(4, 0..2, 3..4).is_err(), "gap");
    assert!(ModalitySplit::new(4, 0..2, 2..5).is_err(), "out of range");
}

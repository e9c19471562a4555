use aid_core::actor_critic::PolicyConfig;
use aid_core::backbone::{sigma_grid, Schedule, ScoreBackbone};
use aid_core::baselines::{masked_mse, psnr_from_mse, run_baseline, BaselineKind};
use aid_core::neural::AdamState;
use aid_core::oracles::{hjb_grid_solve, policy_residual, value_shift_gap, HjbOptions, HjbProblem, StateMesh};
use aid_core::solver::{rollout, RolloutMode, TimeGrid, ZeroGuidance};
use aid_core::streams::Streams;
use aid_core::tasks::{sample_mask, sample_task, terminal_loss, MaskFamily, TerminalWeights};
use proptest::prelude::*;

fn image_backbone(seed: u64) -> ScoreBackbone {
    let mut rng = Streams::new(seed).stream("means", &[]);
    let means: Vec<Vec<f64>> =
        (0..3).map(|_| (0..16).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()).collect();
    ScoreBackbone::new(vec![0.2, 0.3, 0.5], means, vec![0.05, 0.1, 0.2]).unwrap()
}

fn family() -> impl Strategy<Value = MaskFamily> {
    prop_oneof![Just(MaskFamily::Freeform), Just(MaskFamily::Center), Just(MaskFamily::Strip)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_gaussian_score_is_affine(
        sigma in 0.002f64..80.0,
        x in prop::collection::vec(-5.0f64..5.0, 3),
        y in prop::collection::vec(-5.0f64..5.0, 3),
        a in -2.0f64..2.0,
    ) {
        let b = ScoreBackbone::single(vec![0.3, -0.2, 1.0], 0.4).unwrap();
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + (1.0 - a) * q).collect();
        let (sx, sy, sz) = (b.score(sigma, &x).unwrap(), b.score(sigma, &y).unwrap(), b.score(sigma, &z).unwrap());
        for i in 0..3 {
            let combo = a * sx[i] + (1.0 - a) * sy[i];
            prop_assert!((sz[i] - combo).abs() <= 1e-9 * (1.0 + combo.abs()));
        }
    }

    #[test]
    fn degenerate_mixture_matches_single(sigma in 0.002f64..80.0, x in prop::collection::vec(-4.0f64..4.0, 2)) {
        let mix = ScoreBackbone::new(vec![1.0, 0.0], vec![vec![0.5, -1.0], vec![3.0, 3.0]], vec![0.2, 0.7]).unwrap();
        let single = ScoreBackbone::single(vec![0.5, -1.0], 0.2).unwrap();
        let (a, b) = (mix.score(sigma, &x).unwrap(), single.score(sigma, &x).unwrap());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn sigma_grid_strictly_decreasing(k in 2usize..=256) {
        let g = sigma_grid(k, &Schedule::edm()).unwrap();
        prop_assert_eq!(g.len(), k);
        prop_assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn task_observation_supported_on_visible(seed in any::<u64>(), fam in family()) {
        let b = image_backbone(1);
        let t = sample_task(&b, &fam, Some((4, 4)), &mut Streams::new(seed).stream("task", &[])).unwrap();
        for ((y, m), c) in t.observation().iter().zip(t.mask().bits()).zip(t.clean()) {
            prop_assert_eq!(m * y, *y);
            prop_assert_eq!((1.0 - m) * y, 0.0);
            prop_assert_eq!(*y, m * c);
        }
    }

    #[test]
    fn terminal_loss_decomposes(seed in any::<u64>(), a in 0.01f64..5.0, b in 0.01f64..5.0) {
        let bb = image_backbone(2);
        let mut rng = Streams::new(seed).stream("x", &[]);
        let t = sample_task(&bb, &MaskFamily::Freeform, Some((4, 4)), &mut rng).unwrap();
        let x = bb.sample_data(&mut rng);
        let loss = |va, vh| terminal_loss(&TerminalWeights::new(va, vh).unwrap(), &x, &t).unwrap();
        let (vis, hole, both) = (loss(a, 0.0), loss(0.0, b), loss(a, b));
        prop_assert!((vis + hole - both).abs() <= 1e-12 * (1.0 + both.abs()));
    }

    #[test]
    fn mask_sampling_is_deterministic(seed in any::<u64>(), fam in family()) {
        let draw = || sample_mask(&fam, Some((8, 8)), &mut Streams::new(seed).stream("mask", &[])).unwrap();
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn freeform_missing_fraction_in_range(seed in any::<u64>()) {
        let m = sample_mask(&MaskFamily::Freeform, Some((8, 8)), &mut Streams::new(seed).stream("mask", &[])).unwrap();
        prop_assert!((0.2..=0.6).contains(&m.missing_fraction()));
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse(a in 1e-6f64..10.0, b in 1e-6f64..10.0, range in 0.5f64..4.0) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(psnr_from_mse(lo, range).unwrap() > psnr_from_mse(hi, range).unwrap());
    }

    #[test]
    fn adam_is_deterministic(
        grads in prop::collection::vec(-3.0f64..3.0, 8),
        start in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let run = || {
            let mut s = AdamState::new(8);
            let mut p = start.clone();
            for _ in 0..3 {
                s.step(&mut p, &grads, 1e-3, 1.0).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rollout_consumes_two_k_minus_one(k in 2usize..40, seed in any::<u64>()) {
        let b = image_backbone(3);
        let t = sample_task(&b, &MaskFamily::Center, Some((4, 4)), &mut Streams::new(seed).stream("t", &[])).unwrap();
        let cfg = PolicyConfig::new(1e-3, 1e-3, 16).unwrap();
        let grid = TimeGrid::new(Schedule::edm(), k).unwrap();
        let mut rng = Streams::new(seed).stream("r", &[]);
        let tr = rollout(&b, &grid, &ZeroGuidance, t.observable(), RolloutMode::Deterministic, &cfg, None, &mut rng).unwrap();
        prop_assert_eq!(tr.nfe, 2 * k - 1);
    }

    #[test]
    fn zero_policy_equals_unguided_baseline(k in 2usize..24, seed in any::<u64>()) {
        let b = image_backbone(4);
        let streams = Streams::new(seed);
        let t = sample_task(&b, &MaskFamily::Freeform, Some((4, 4)), &mut streams.stream("t", &[])).unwrap();
        let x0: Vec<f64> = aid_core::backbone::sample_prior(16, &Schedule::edm(), &mut streams.stream("p", &[]));
        let cfg = PolicyConfig::new(1e-3, 1e-3, 16).unwrap();
        let grid = TimeGrid::new(Schedule::edm(), k).unwrap();
        let mut rng = streams.stream("r", &[]);
        let tr = rollout(&b, &grid, &ZeroGuidance, t.observable(), RolloutMode::Deterministic, &cfg, Some(x0.clone()), &mut rng)
            .unwrap();
        let base = run_baseline(&BaselineKind::Unguided, &b, &grid, t.observable(), x0, &streams, 0).unwrap();
        prop_assert!(tr.terminal().iter().zip(&base.output).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn baselines_deterministic_and_replacement_exact(seed in any::<u64>()) {
        let b = image_backbone(5);
        let streams = Streams::new(seed);
        let t = sample_task(&b, &MaskFamily::Freeform, Some((4, 4)), &mut streams.stream("t", &[])).unwrap();
        let x0 = aid_core::backbone::sample_prior(16, &Schedule::edm(), &mut streams.stream("p", &[]));
        let grid = TimeGrid::new(Schedule::edm(), 12).unwrap();
        for kind in [BaselineKind::Unguided, BaselineKind::Replacement, BaselineKind::dps(10.0).unwrap()] {
            let run = || run_baseline(&kind, &b, &grid, t.observable(), x0.clone(), &streams, 7).unwrap().output;
            let (a, c) = (run(), run());
            prop_assert_eq!(&a, &c);
            prop_assert!(masked_mse(&a, &t).unwrap().is_finite());
            if kind == BaselineKind::Replacement {
                for ((o, m), y) in a.iter().zip(t.mask().bits()).zip(t.observation()) {
                    prop_assert!((m * o - y).abs() <= 1e-15);
                }
            }
        }
    }
}

fn grid_solve(slope: f64, shift: f64, target: f64, lambda: f64) -> aid_core::oracles::GridValue {
    let drift = move |_t: f64, x: f64| slope * x + shift * (x * 0.5).sin();
    let psi = move |x: f64| 0.5 * (x - target) * (x - target);
    let times: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
    let problem = HjbProblem { drift: &drift, terminal: &psi, beta: 0.5, lambda };
    hjb_grid_solve(&problem, StateMesh::new(-2.0, 2.0, 41).unwrap(), &times, HjbOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn value_shift_exact_on_identical_meshes(
        slope in -1.0f64..0.5,
        shift in -0.5f64..0.5,
        target in -0.8f64..0.8,
        li in 0usize..3,
    ) {
        let lambda = [1e-4, 1e-3, 1e-2][li];
        let base = grid_solve(slope, shift, target, 0.0);
        let shifted = grid_solve(slope, shift, target, lambda);
        prop_assert!(value_shift_gap(&base, &shifted).unwrap() <= 1e-10);
    }

    #[test]
    fn policy_residual_minimized_at_optimal_mean(
        slope in -1.0f64..0.5,
        target in -0.8f64..0.8,
        n in 1usize..8,
        i in 5usize..36,
        offset in -2.0f64..2.0,
    ) {
        let g = grid_solve(slope, 0.1, target, 1e-3);
        let drift = move |_t: f64, x: f64| slope * x + 0.1 * (x * 0.5).sin();
        let psi = move |x: f64| 0.5 * (x - target) * (x - target);
        let problem = HjbProblem { drift: &drift, terminal: &psi, beta: 0.5, lambda: 1e-3 };
        let star = -g.slice_gradient(n)[i] / 0.5;
        let at_star = policy_residual(&problem, &g, n, i, star);
        let other = policy_residual(&problem, &g, n, i, star + offset);
        // The residual is a parabola in mu with curvature beta.
        prop_assert!((other - at_star - 0.25 * offset * offset).abs() <= 1e-9);
        prop_assert!(other >= at_star);
    }
}

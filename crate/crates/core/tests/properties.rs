use flowmc::field::VelocityField;
use flowmc::flow::{flow_backward, flow_forward, TimeGrid};
use flowmc::importance::{
    log_weight_diagnostics, normalize_log_weights, self_normalized_estimate, transport_weights, vanilla_weights,
    Observable, WeightedBatch,
};
use flowmc::mcmc::iact;
use flowmc::objectives::chi2_batch;
use flowmc::targets::{GaussianMixture, TargetModel};
use flowmc::trainer::{Checkpoint, LrSchedule, ReplayBuffer, Provenance, TrainConfig, TrainerState};
use proptest::prelude::*;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(finite(-2.0, 2.0), d)
}

fn batch_of(log_weights: &[f64]) -> WeightedBatch {
    let pts: Vec<Vec<f64>> = (0..log_weights.len()).map(|i| vec![i as f64]).collect();
    WeightedBatch {
        base_points: pts.clone(),
        endpoints: pts,
        log_weights: log_weights.to_vec(),
        norm_weights: normalize_log_weights(log_weights).unwrap(),
        n_failed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_weights_sum_to_one_and_constant_estimate_is_one(
        lw in prop::collection::vec(finite(-50.0, 50.0), 1..40)
    ) {
        let wb = batch_of(&lw);
        let s: f64 = wb.norm_weights.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert_eq!(self_normalized_estimate(&wb, &Observable::One).value, 1.0);
    }

    #[test]
    fn weight_diagnostics_are_shift_invariant(
        lw in prop::collection::vec(finite(-20.0, 20.0), 2..40),
        c in finite(-300.0, 300.0),
    ) {
        let a = log_weight_diagnostics(&lw);
        let shifted: Vec<f64> = lw.iter().map(|l| l + c).collect();
        let b = log_weight_diagnostics(&shifted);
        prop_assert!((a.ess - b.ess).abs() <= 1e-9 * a.ess);
        prop_assert!((a.second_moment_ratio - b.second_moment_ratio).abs() <= 1e-9 * a.second_moment_ratio);
        prop_assert!((a.max_weight_fraction - b.max_weight_fraction).abs() <= 1e-12);
        // the empirical second-moment ratio is n / ESS >= 1
        prop_assert!(a.second_moment_ratio >= 1.0 - 1e-12);
        prop_assert!(a.ess <= lw.len() as f64 * (1.0 + 1e-12));
    }

    #[test]
    fn identity_transport_is_vanilla(xs in prop::collection::vec(point(2), 1..12)) {
        let target = TargetModel::double_well(2, 2.0).unwrap();
        let base = TargetModel::standard_normal(2).unwrap();
        let f = VelocityField::zero(2).unwrap();
        let a = transport_weights(&f, &target, &base, &xs, &TimeGrid::unit(8).unwrap()).unwrap();
        let b = vanilla_weights(&target, &base, &xs).unwrap();
        prop_assert_eq!(a.log_weights, b.log_weights);
    }

    #[test]
    fn backward_inverts_forward_for_random_fields(
        seed in any::<u64>(),
        x in point(2),
        t0 in finite(-0.5, 0.5),
    ) {
        let f = VelocityField::mlp(2, &[8, 8], seed, 0.5).unwrap();
        let grid = TimeGrid::new(64, t0, t0 + 1.0).unwrap();
        let (x1, lj) = flow_forward(&f, &x, &grid).unwrap();
        let (x0, lj_back) = flow_backward(&f, &x1, &grid).unwrap();
        for (a, b) in x0.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
        prop_assert!((lj - lj_back).abs() < 1e-6, "{} vs {}", lj, lj_back);
    }

    #[test]
    fn affine_derivatives_are_closed_form(
        a in prop::collection::vec(finite(-1.0, 1.0), 4),
        b in prop::collection::vec(finite(-1.0, 1.0), 2),
        x in point(2),
        t in finite(0.0, 1.0),
    ) {
        let f = VelocityField::affine(2, &a, &b).unwrap();
        let v = f.velocity(t, &x).unwrap();
        for i in 0..2 {
            prop_assert_eq!(v[i], a[2 * i] * x[0] + a[2 * i + 1] * x[1] + b[i]);
        }
        prop_assert_eq!(f.divergence(t, &x).unwrap(), a[0] + a[3]);
        prop_assert_eq!(f.jacobian(t, &x).unwrap(), a.clone());
        prop_assert_eq!(f.grad_divergence(t, &x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_evaluation_is_pure(seed in any::<u64>(), x in point(3), t in finite(0.0, 1.0)) {
        let f = VelocityField::mlp(3, &[6, 6], seed, 0.3).unwrap();
        let a = f.velocity_and_divergence(t, &x).unwrap();
        let b = f.velocity_and_divergence(t, &x).unwrap();
        prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn potential_gradient_matches_finite_differences(x in point(2), a in finite(0.5, 3.0)) {
        let mix = GaussianMixture::isotropic(2, vec![0.3, 0.7], vec![vec![-1.0, 0.5], vec![1.0, -0.5]], &[0.5, 1.5]).unwrap();
        for model in [TargetModel::double_well(2, a).unwrap(), TargetModel::gaussian_mixture(mix, 0.2).unwrap()] {
            let g = model.grad_potential(&x).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let (mut p, mut m) = (x.clone(), x.clone());
                p[j] += h;
                m[j] -= h;
                let fd = (model.potential(&p).unwrap() - model.potential(&m).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "{} vs {}", fd, g[j]);
            }
        }
    }

    #[test]
    fn chi2_jensen_gap_is_nonnegative(seed in any::<u64>(), xs in prop::collection::vec(point(1), 2..16)) {
        let f = VelocityField::mlp(1, &[4], seed, 0.5).unwrap();
        let target = TargetModel::isotropic_gaussian(1, 2.0).unwrap();
        let base = TargetModel::standard_normal(1).unwrap();
        let g = chi2_batch(&f, &target, &base, &xs, &TimeGrid::unit(8).unwrap()).unwrap();
        prop_assert!(g.diagnostics["jensen_gap"] >= -1e-12);
    }

    #[test]
    fn iact_is_positive_and_bounded(xs in prop::collection::vec(finite(-5.0, 5.0), 2..200)) {
        let t = iact(&xs);
        prop_assert!(t.value > 0.0 && t.value <= xs.len() as f64);
    }

    #[test]
    fn replay_buffer_keeps_the_newest(cap in 0usize..10, n in 0usize..30) {
        let mut b = ReplayBuffer::new(cap);
        for i in 0..n {
            b.push(vec![i as f64], Provenance::Mcmc);
        }
        prop_assert_eq!(b.len(), n.min(cap));
        let kept: Vec<f64> = b.iter().map(|(x, _)| x[0]).collect();
        let expected: Vec<f64> = (n.saturating_sub(cap)..n).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), step in 0u64..1000, h in finite(1e-4, 1.0)) {
        let field = VelocityField::mlp(2, &[5, 3], seed, 0.2).unwrap();
        let config = TrainConfig { seed, lr: LrSchedule::Constant { h }, ..Default::default() };
        let ck = Checkpoint { field, config, step, state: TrainerState::default() };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn robbins_monro_exactly_for_power_in_range(p in finite(0.0, 2.0), h0 in finite(1e-3, 1.0), k0 in finite(1.0, 1e3)) {
        let s = LrSchedule::RobbinsMonro { h0, k0, power: p };
        prop_assert_eq!(s.satisfies_robbins_monro(), p > 0.5 && p <= 1.0);
        prop_assert!(s.rate(10) <= s.rate(0));
    }
}

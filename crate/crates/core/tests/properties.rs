use agc_core::fixtures::{random_instance, RandomShape};
use agc_core::infograph::{pattern_qc, pattern_qn, pattern_y};
use agc_core::lifting::trajectory;
use agc_core::model::{default_second_moment, InstanceFile, MatrixInput, TimeSeries};
use agc_core::synthesis::{recover, SdpVariables};
use agc_core::{
    build_coupling_graphs, compute_decomposition, lift, validate_instance, InfoDecomposition,
    ProblemInstance, SparsityPattern,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> (ProblemInstance, InfoDecomposition) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&mut rng, RandomShape::default());
    let d = compute_decomposition(&inst, &build_coupling_graphs(&inst));
    (inst, d)
}

fn fill(pattern: &SparsityPattern, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (r, c) = pattern.shape();
    let mut m = DMatrix::zeros(r, c);
    for (i, j) in pattern.free_entries() {
        m[(i, j)] = rng.gen_range(-1.0..1.0);
    }
    m
}

fn with_edges(inst: &ProblemInstance, edges: Vec<[usize; 2]>) -> ProblemInstance {
    let mut file: InstanceFile = inst.to_file();
    file.info_edges = edges;
    validate_instance(file).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn observing_more_never_shrinks_own_nested_set(seed in any::<u64>(), extra in any::<u64>()) {
        let (inst, d) = instance(seed);
        let n = inst.subsystems();
        let mut edges: Vec<[usize; 2]> = inst
            .info_graph()
            .edges()
            .iter()
            .map(|&(a, b)| [a + 1, b + 1])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(extra);
        let target = rng.gen_range(0..n);
        for _ in 0..3 {
            edges.push([rng.gen_range(1..=n), target + 1]);
        }
        edges.sort_unstable();
        edges.dedup();
        let richer = with_edges(&inst, edges);
        let d2 = compute_decomposition(&richer, &build_coupling_graphs(&richer));
        prop_assert!(d.nested(target).is_subset(d2.nested(target)));
    }

    #[test]
    fn partial_nestedness_matches_empty_coupled_gain(seed in any::<u64>()) {
        let (inst, d) = instance(seed);
        prop_assert_eq!(d.is_partially_nested(), d.coupled_set().is_empty());
        if d.is_partially_nested() {
            prop_assert!(pattern_qc(&d, inst.layout()).is_all_zero());
        }
        for i in 0..inst.subsystems() {
            let vi = inst.info_graph().in_neighbors(i);
            prop_assert!(d.nested(i).is_disjoint(d.coupled(i)));
            let union: std::collections::BTreeSet<usize> =
                d.nested(i).union(d.coupled(i)).copied().collect();
            prop_assert_eq!(union, vi);
        }
    }

    #[test]
    fn coupled_gain_times_orientation_keeps_pattern(seed in any::<u64>()) {
        let (inst, d) = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let qc = pattern_qc(&d, inst.layout());
        let py = pattern_y(&d, inst.layout());
        let q = fill(&qc, &mut rng);
        let y = fill(&py, &mut rng);
        prop_assert!(qc.max_violation(&(&q * &y)) <= 1e-12);
    }

    #[test]
    fn inverse_orientation_keeps_pattern(seed in any::<u64>(), lambda in 1.0..4.0f64) {
        let (inst, d) = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let qc = pattern_qc(&d, inst.layout());
        let q = fill(&qc, &mut rng);
        let y = fill(&pattern_y(&d, inst.layout()), &mut rng);
        let z = DMatrix::identity(y.nrows(), y.ncols()) * lambda - y;
        let qv = z.transpose().solve_upper_triangular(&q.transpose()).unwrap().transpose();
        prop_assert!(qc.max_violation(&qv) <= 1e-9 * (1.0 + qv.amax()));
    }

    #[test]
    fn recovered_policy_reproduces_surrogate_inputs(seed in any::<u64>(), lambda in 1.0..3.0f64) {
        let (inst, d) = instance(seed);
        let layout = inst.layout();
        let (n_x, n_u) = (layout.state_len(), layout.input_len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let vars = SdpVariables {
            q_w: fill(&pattern_qn(&d, layout), &mut rng),
            q_xi: fill(&pattern_qc(&d, layout), &mut rng),
            y: fill(&pattern_y(&d, layout), &mut rng),
            u_bar: DVector::from_fn(n_u, |_, _| rng.gen_range(-1.0..1.0)),
            v_bar: DVector::from_fn(n_x, |_, _| rng.gen_range(-1.0..1.0)),
            x_bar: DVector::zeros(n_x),
            p_w: DMatrix::zeros(n_x, n_x),
            p_xi: DMatrix::zeros(n_x, n_x),
            lambda,
            beta: 0.0,
            t1: DVector::zeros(0),
            t2: DVector::zeros(0),
        };
        let (policy, _, _) = recover(&inst, &d, &vars).unwrap();
        let z = vars.z();
        for _ in 0..5 {
            let w = DVector::from_fn(n_x, |_, _| rng.gen_range(-1.0..1.0));
            let xi = DVector::from_fn(n_x, |_, _| rng.gen_range(-1.0..1.0));
            let surrogate = &vars.u_bar + &vars.q_w * &w + &vars.q_xi * &xi;
            let v = &vars.v_bar + &z * &xi;
            let recovered = &policy.u_open + &policy.q_w * &w + &policy.q_v * v;
            prop_assert!((surrogate - recovered).amax() <= 1e-9);
        }
    }

    #[test]
    fn surrogate_identity_holds(seed in any::<u64>()) {
        let (inst, d) = instance(seed);
        let lifted = lift(&inst, &d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let layout = inst.layout();
        for _ in 0..10 {
            let u = DVector::from_fn(layout.input_len(), |_, _| rng.gen_range(-1.0..1.0));
            let w = DVector::from_fn(layout.state_len(), |_, _| rng.gen_range(-1.0..1.0));
            let x = trajectory(&lifted, &u, &w).unwrap();
            let x_c = &lifted.pi_c * &x;
            let rhs = &lifted.b_tilde * &u + &lifted.l_tilde * &w + &lifted.h_tilde * x_c;
            prop_assert!((&x - rhs).amax() <= 1e-9 * (1.0 + x.amax()));
        }
    }

    #[test]
    fn sigma_factor_reproduces_sigma(seed in any::<u64>()) {
        let (inst, _) = instance(seed);
        let dist = inst.disturbance();
        let g = &dist.sigma_factor;
        let back = g * g.transpose();
        prop_assert!((&back - &dist.sigma).amax() <= 1e-10 * dist.sigma.amax());
        let m = default_second_moment(&dist.sigma, dist.sigma.nrows());
        prop_assert!(m.clone().cholesky().is_some());
        prop_assert!((&m - m.transpose()).amax() == 0.0);
    }

    #[test]
    fn constant_and_per_step_dynamics_agree(seed in any::<u64>()) {
        let (inst, _) = instance(seed);
        let mut file = inst.to_file();
        let a0 = MatrixInput::from_matrix(&inst.dynamics().a[0]);
        file.a = TimeSeries::Constant(a0.clone());
        let constant = validate_instance(file.clone()).unwrap();
        file.a = TimeSeries::PerStep(vec![a0; inst.horizon()]);
        let listed = validate_instance(file).unwrap();
        prop_assert_eq!(constant.content_hash(), listed.content_hash());
    }
}

//! Reference instances and random instance generation for tests, benches
//! and examples.

use nalgebra::DMatrix;
use rand::Rng;

use crate::layout::SubsystemDims;
use crate::model::{
    parse_instance, validate_instance, Distribution, InstanceFile, MatrixInput, ProblemInstance,
    TimeSeries,
};

pub const CHAIN2_NONCLASSICAL: &str = include_str!("../fixtures/chain2_nonclassical.json");
pub const CHAIN2_NESTED: &str = include_str!("../fixtures/chain2_nested.json");
pub const CHAIN2_INFEASIBLE: &str = include_str!("../fixtures/chain2_infeasible.json");
pub const CHAIN2_TIGHT: &str = include_str!("../fixtures/chain2_tight.json");

fn parse(text: &str, name: &str) -> InstanceFile {
    parse_instance(text, name).expect("bundled fixture parses")
}

/// Two scalar subsystems, fully coupled `A`, `B = I`, subsystem 2 observes
/// subsystem 1 but not conversely. Box constraints `|x| ≤ 5`, `|u| ≤ 1`,
/// `Σ = 0.01 I`, identity costs.
pub fn chain2_nonclassical_file() -> InstanceFile {
    parse(CHAIN2_NONCLASSICAL, "chain2_nonclassical.json")
}

pub fn chain2_nonclassical() -> ProblemInstance {
    validate_instance(chain2_nonclassical_file()).expect("fixture is valid")
}

/// Same as [`chain2_nonclassical`] with `A` lower block triangular.
pub fn chain2_nested() -> ProblemInstance {
    validate_instance(parse(CHAIN2_NESTED, "chain2_nested.json")).expect("fixture is valid")
}

/// [`chain2_nonclassical`] with `|x| ≤ 0.01`, which the uncontrolled
/// initial state already violates.
pub fn chain2_infeasible() -> ProblemInstance {
    validate_instance(parse(CHAIN2_INFEASIBLE, "chain2_infeasible.json")).expect("fixture is valid")
}

/// [`chain2_nonclassical`] with `|u| ≤ 0.02`, tight enough that the input
/// rows bind at the optimum.
pub fn chain2_tight() -> ProblemInstance {
    validate_instance(parse(CHAIN2_TIGHT, "chain2_tight.json")).expect("fixture is valid")
}

/// Single scalar subsystem with `A = a`, `B = b`, no constraints.
pub fn scalar(horizon: usize, a: f64, b: f64, sigma: f64) -> ProblemInstance {
    let n_x = horizon + 1;
    validate_instance(InstanceFile {
        subsystems: 1,
        horizon,
        dims: vec![SubsystemDims { state: 1, input: 1 }],
        a: TimeSeries::Constant(MatrixInput::Rows(vec![vec![a]])),
        b: TimeSeries::Constant(MatrixInput::Rows(vec![vec![b]])),
        info_edges: vec![[1, 1]],
        sigma: MatrixInput::ScaledIdentity { scaled_identity: sigma },
        second_moment: None,
        f_x: MatrixInput::Rows(vec![]),
        f_u: MatrixInput::Rows(vec![]),
        f_w: None,
        g: vec![],
        r_x: MatrixInput::ScaledIdentity { scaled_identity: 1.0 },
        r_u: MatrixInput::ScaledIdentity { scaled_identity: 1.0 },
        distribution: Distribution::UniformEllipsoid,
    })
    .unwrap_or_else(|e| panic!("scalar instance with n_x = {n_x}: {e}"))
}

/// Shape limits for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct RandomShape {
    pub max_subsystems: usize,
    pub max_horizon: usize,
    pub max_local_dim: usize,
    /// Probability that an off-diagonal block of `A`, `B` or `E_I` is present.
    pub density: f64,
}

impl Default for RandomShape {
    fn default() -> Self {
        Self {
            max_subsystems: 3,
            max_horizon: 4,
            max_local_dim: 2,
            density: 0.5,
        }
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Random time-varying instance with random block sparsity, a random
/// information graph (self-loops always present), a random positive
/// definite `Σ` and no constraints.
pub fn random_instance<R: Rng>(rng: &mut R, shape: RandomShape) -> ProblemInstance {
    let n = rng.gen_range(1..=shape.max_subsystems);
    let horizon = rng.gen_range(1..=shape.max_horizon);
    let dims: Vec<SubsystemDims> = (0..n)
        .map(|_| SubsystemDims {
            state: rng.gen_range(1..=shape.max_local_dim),
            input: rng.gen_range(1..=shape.max_local_dim),
        })
        .collect();
    let n_x: usize = dims.iter().map(|d| d.state).sum();
    let n_u: usize = dims.iter().map(|d| d.input).sum();

    let block_mask = |rng: &mut R| -> Vec<Vec<bool>> {
        (0..n)
            .map(|i| (0..n).map(|j| i == j || rng.gen_bool(shape.density)).collect())
            .collect()
    };
    let a_mask = block_mask(rng);
    let b_mask = block_mask(rng);
    let offsets = |sizes: &[usize]| -> Vec<usize> {
        sizes
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect()
    };
    let xs: Vec<usize> = dims.iter().map(|d| d.state).collect();
    let us: Vec<usize> = dims.iter().map(|d| d.input).collect();
    let (xo, uo) = (offsets(&xs), offsets(&us));

    let masked = |rng: &mut R, mask: &[Vec<bool>], cols: &[usize], col_off: &[usize], width: usize| {
        let mut m = random_matrix(rng, n_x, width, 0.8);
        for i in 0..n {
            for j in 0..n {
                if !mask[i][j] {
                    m.view_mut((xo[i], col_off[j]), (xs[i], cols[j])).fill(0.0);
                }
            }
        }
        MatrixInput::from_matrix(&m)
    };
    let a = (0..horizon).map(|_| masked(rng, &a_mask, &xs, &xo, n_x)).collect();
    let b = (0..horizon).map(|_| masked(rng, &b_mask, &us, &uo, n_u)).collect();

    let mut info_edges = Vec::new();
    for i in 1..=n {
        for j in 1..=n {
            if i == j || rng.gen_bool(shape.density) {
                info_edges.push([i, j]);
            }
        }
    }

    let big_x = n_x * (horizon + 1);
    let big_u = n_u * horizon;
    let root = random_matrix(rng, big_x, big_x, 1.0);
    let sigma = &root * root.transpose() + DMatrix::identity(big_x, big_x) * 0.5;

    validate_instance(InstanceFile {
        subsystems: n,
        horizon,
        dims,
        a: TimeSeries::PerStep(a),
        b: TimeSeries::PerStep(b),
        info_edges,
        sigma: MatrixInput::from_matrix(&sigma),
        second_moment: None,
        f_x: MatrixInput::Rows(vec![]),
        f_u: MatrixInput::Rows(vec![]),
        f_w: None,
        g: vec![],
        r_x: MatrixInput::from_matrix(&DMatrix::identity(big_x, big_x)),
        r_u: MatrixInput::from_matrix(&DMatrix::identity(big_u, big_u)),
        distribution: Distribution::UniformEllipsoid,
    })
    .expect("random instance is valid by construction")
}

//! Monte Carlo validation of a synthesized policy.
//!
//! Each sample draws `w` uniformly from the disturbance ellipsoid, closes
//! the loop on the true system, checks every constraint row and the
//! contract membership of the coupled states, and reconstructs every
//! locally nested disturbance from the trajectories. An independent `ξ` is
//! drawn alongside to estimate the surrogate cost the synthesis minimized.
//!
//! Samples are split into fixed-size chunks with one ChaCha stream per
//! chunk, so reports depend only on the seed, not on the thread count.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::infograph::{build_coupling_graphs, compute_decomposition, CouplingGraphs, InfoDecomposition};
use crate::lifting::{lift, LiftedSystem};
use crate::linalg::CompensatedSum;
use crate::model::{default_second_moment, ProblemInstance};
use crate::synthesis::{AffinePolicy, Contract, ContractChecker, ContractError, SynthesisResult};

/// Largest tolerated gap between the fixed-point and recursive rollouts,
/// relative to the trajectory size.
pub const ROLLOUT_TOL: f64 = 1e-8;

const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub samples: usize,
    pub seed: u64,
    /// Row `i` is violated when it exceeds `g_i + abs + rel·|g_i|`.
    pub feasibility_abs: f64,
    pub feasibility_rel: f64,
    pub membership_tol: f64,
    /// Keep one row per sample for [`write_table`].
    pub keep_samples: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            feasibility_abs: 1e-6,
            feasibility_rel: 1e-6,
            membership_tol: 1e-6,
            keep_samples: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("subsystem {i} cannot reconstruct the disturbance of subsystem {j}: not locally nested")]
    NotLocallyNested { i: usize, j: usize },
    #[error("closed-loop rollouts disagree by {gap:.3e}; the policy is not causal")]
    Causality { gap: f64 },
    #[error("{name} has length {found}, expected {expected}")]
    Length {
        name: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error("writing sample table {path}: {message}")]
    Table { path: String, message: String },
}

/// `w = G (r d)` with `d` uniform on the unit sphere and `r = U^{1/n}`,
/// uniform on `{w : wᵀ Σ⁻¹ w ≤ 1}` for `G Gᵀ = Σ`.
pub fn sample_disturbance<R: Rng + ?Sized>(sigma_factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let n = sigma_factor.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    let d = loop {
        let d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = d.norm();
        if norm > 0.0 {
            break d / norm;
        }
    };
    let r = rng.gen::<f64>().powf(1.0 / n as f64);
    sigma_factor * (d * r)
}

/// Closed loop of `u = u° + Q^w w + Q^v x` with `x = B u + L w`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    offset: DVector<f64>,
    gain: DMatrix<f64>,
    policy: AffinePolicy,
}

impl ClosedLoop {
    /// Solves `(I - B Q^v) x = B u° + (B Q^w + L) w` symbolically in `w`.
    pub fn new(lifted: &LiftedSystem, policy: &AffinePolicy) -> Self {
        let n_x = lifted.b.nrows();
        let lhs = DMatrix::identity(n_x, n_x) - &lifted.b * &policy.q_v;
        let lu = lhs.lu();
        let offset = lu
            .solve(&(&lifted.b * &policy.u_open))
            .expect("B Q^v is strictly lower triangular in time");
        let gain = lu
            .solve(&(&lifted.b * &policy.q_w + &lifted.l))
            .expect("B Q^v is strictly lower triangular in time");
        Self {
            offset,
            gain,
            policy: policy.clone(),
        }
    }

    pub fn rollout(&self, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let x = &self.offset + &self.gain * w;
        let u = &self.policy.u_open + &self.policy.q_w * w + &self.policy.q_v * &x;
        (x, u)
    }
}

/// Step-by-step rollout where `u(t)` only reads `x(0..=t)` and
/// `w(-1..t-1)`.
pub fn recursive_rollout(
    instance: &ProblemInstance,
    policy: &AffinePolicy,
    w: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let layout = instance.layout();
    let dynamics = instance.dynamics();
    let (n_x, n_u) = (layout.n_x(), layout.n_u());
    let mut x = DVector::zeros(layout.state_len());
    let mut u = DVector::zeros(layout.input_len());
    x.rows_mut(0, n_x).copy_from(&w.rows(0, n_x));
    for t in 0..layout.horizon() {
        let known = (t + 1) * n_x;
        let rows = t * n_u..(t + 1) * n_u;
        let ut = policy.u_open.rows(rows.start, n_u)
            + policy.q_w.view((rows.start, 0), (n_u, known)) * w.rows(0, known)
            + policy.q_v.view((rows.start, 0), (n_u, known)) * x.rows(0, known);
        u.rows_mut(rows.start, n_u).copy_from(&ut);
        let next = &dynamics.a[t] * x.rows(t * n_x, n_x)
            + &dynamics.b[t] * &ut
            + w.rows((t + 1) * n_x, n_x);
        x.rows_mut((t + 1) * n_x, n_x).copy_from(&next);
    }
    (x, u)
}

fn rollout_gap(a: &(DVector<f64>, DVector<f64>), b: &(DVector<f64>, DVector<f64>)) -> f64 {
    let scale = 1.0 + a.0.amax().max(a.1.amax());
    (&a.0 - &b.0).amax().max((&a.1 - &b.1).amax()) / scale
}

/// `(x, u)` from the closed-loop fixed point, cross-checked against
/// [`recursive_rollout`].
pub fn closed_loop(
    instance: &ProblemInstance,
    lifted: &LiftedSystem,
    policy: &AffinePolicy,
    w: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), SimError> {
    if w.len() != lifted.l.ncols() {
        return Err(SimError::Length {
            name: "disturbance trajectory",
            expected: lifted.l.ncols(),
            found: w.len(),
        });
    }
    let fixed = ClosedLoop::new(lifted, policy).rollout(w);
    let gap = rollout_gap(&fixed, &recursive_rollout(instance, policy, w));
    if gap > ROLLOUT_TOL {
        return Err(SimError::Causality { gap });
    }
    Ok(fixed)
}

/// `w_j(t-1)` as seen by subsystem `i` (zero-based), from `x_j(t)` and the
/// states and inputs that drive it; `t = 0` gives `x_j(0)`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_disturbance(
    instance: &ProblemInstance,
    graphs: &CouplingGraphs,
    decomp: &InfoDecomposition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    i: usize,
    j: usize,
    t: usize,
) -> Result<DVector<f64>, SimError> {
    if !decomp.nested(i).contains(&j) {
        return Err(SimError::NotLocallyNested { i: i + 1, j: j + 1 });
    }
    let layout = instance.layout();
    let mut w = DVector::from_column_slice(&x.as_slice()[layout.state_range(t, j)]);
    if t == 0 {
        return Ok(w);
    }
    for &k in graphs.a_in(j) {
        let xk = DVector::from_column_slice(&x.as_slice()[layout.state_range(t - 1, k)]);
        w -= instance.a_block(t - 1, j, k) * xk;
    }
    for &k in graphs.b_in(j) {
        let uk = DVector::from_column_slice(&u.as_slice()[layout.input_range(t - 1, k)]);
        w -= instance.b_block(t - 1, j, k) * uk;
    }
    Ok(w)
}

/// `(x_C - Π_C v̄)ᵀ S_C⁻¹ (x_C - Π_C v̄)`.
pub fn check_contract(contract: &Contract, x_c: &DVector<f64>) -> Result<f64, SimError> {
    Ok(contract.checker()?.membership(x_c)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: usize,
    /// `min_i (g_i - row_i)`.
    pub min_slack: f64,
    pub membership: f64,
    pub actual_cost: f64,
    pub surrogate_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub instance_hash: String,
    pub samples: usize,
    pub seed: u64,
    pub constraint_violations: usize,
    /// Smallest `g_i - row_i` over all rows and samples.
    pub worst_constraint_slack: f64,
    pub contract_violations: usize,
    pub worst_membership: f64,
    pub max_reconstruction_error: f64,
    pub max_rollout_gap: f64,
    /// `E[x̃ᵀ R_x x̃ + ũᵀ R_u ũ]` under sampled `(w, ξ)`.
    pub surrogate_cost: MeanEstimate,
    /// `E[xᵀ R_x x + uᵀ R_u u]` of the true closed loop.
    pub actual_cost: MeanEstimate,
    pub synthesis_objective: f64,
    /// Whether the instance's second moment is the sampler's, so that the
    /// surrogate cost estimates the synthesis objective.
    pub second_moment_matches_sampler: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rows: Option<Vec<SampleRow>>,
}

impl SimulationReport {
    pub fn violations(&self) -> usize {
        self.constraint_violations + self.contract_violations
    }
}

#[derive(Debug, Clone)]
struct Tally {
    violations: usize,
    worst_slack: f64,
    contract_violations: usize,
    worst_membership: f64,
    reconstruction: f64,
    rollout_gap: f64,
    surrogate: CompensatedSum,
    surrogate_sq: CompensatedSum,
    actual: CompensatedSum,
    actual_sq: CompensatedSum,
    rows: Vec<SampleRow>,
}

impl Tally {
    fn new() -> Self {
        Self {
            violations: 0,
            worst_slack: f64::INFINITY,
            contract_violations: 0,
            worst_membership: 0.0,
            reconstruction: 0.0,
            rollout_gap: 0.0,
            surrogate: CompensatedSum::default(),
            surrogate_sq: CompensatedSum::default(),
            actual: CompensatedSum::default(),
            actual_sq: CompensatedSum::default(),
            rows: Vec::new(),
        }
    }

    fn merge(&mut self, o: Tally) {
        self.violations += o.violations;
        self.worst_slack = self.worst_slack.min(o.worst_slack);
        self.contract_violations += o.contract_violations;
        self.worst_membership = self.worst_membership.max(o.worst_membership);
        self.reconstruction = self.reconstruction.max(o.reconstruction);
        self.rollout_gap = self.rollout_gap.max(o.rollout_gap);
        self.surrogate.merge(&o.surrogate);
        self.surrogate_sq.merge(&o.surrogate_sq);
        self.actual.merge(&o.actual);
        self.actual_sq.merge(&o.actual_sq);
        self.rows.extend(o.rows);
    }
}

fn estimate(sum: &CompensatedSum, sq: &CompensatedSum, n: usize) -> MeanEstimate {
    let nf = n as f64;
    let mean = sum.value() / nf;
    let var = if n > 1 {
        ((sq.value() - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    MeanEstimate {
        mean,
        std_error: (var / nf).sqrt(),
    }
}

struct Context<'a> {
    instance: &'a ProblemInstance,
    result: &'a SynthesisResult,
    config: &'a SimulationConfig,
    graphs: CouplingGraphs,
    decomp: InfoDecomposition,
    closed: ClosedLoop,
    recursive_check: bool,
    checker: Option<ContractChecker>,
}

fn quad(r: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(r * v))
}

impl Context<'_> {
    fn sample(&self, index: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<(), SimError> {
        let inst = self.instance;
        let factor = &inst.disturbance().sigma_factor;
        let w = sample_disturbance(factor, rng);
        let xi = sample_disturbance(factor, rng);

        let (x, u) = self.closed.rollout(&w);
        if self.recursive_check {
            let gap = rollout_gap(&(x.clone(), u.clone()), &recursive_rollout(inst, &self.closed.policy, &w));
            if gap > ROLLOUT_TOL {
                return Err(SimError::Causality { gap });
            }
            tally.rollout_gap = tally.rollout_gap.max(gap);
        }

        let c = inst.constraints();
        let lhs = &c.f_x * &x + &c.f_u * &u + &c.f_w * &w;
        let mut min_slack = f64::INFINITY;
        let mut violated = false;
        for i in 0..c.rows() {
            let slack = c.g[i] - lhs[i];
            min_slack = min_slack.min(slack);
            let tol = self.config.feasibility_abs + self.config.feasibility_rel * c.g[i].abs();
            violated |= slack < -tol;
        }
        tally.violations += violated as usize;
        tally.worst_slack = tally.worst_slack.min(min_slack);

        let membership = match &self.checker {
            Some(chk) => {
                let x_c = DVector::from_iterator(
                    self.result.contract.projection.len(),
                    self.result.contract.projection.iter().map(|&k| x[k]),
                );
                chk.membership(&x_c)?
            }
            None => 0.0,
        };
        if membership > 1.0 + self.config.membership_tol {
            tally.contract_violations += 1;
        }
        tally.worst_membership = tally.worst_membership.max(membership);

        let layout = inst.layout();
        for i in 0..layout.subsystems() {
            for &j in self.decomp.nested(i) {
                for t in 0..=layout.horizon() {
                    let rec = reconstruct_disturbance(inst, &self.graphs, &self.decomp, &x, &u, i, j, t)?;
                    let truth = w.rows(layout.state_range(t, j).start, layout.state_dim(j));
                    tally.reconstruction = tally.reconstruction.max((rec - truth).amax());
                }
            }
        }

        let cost = inst.cost();
        let actual = quad(&cost.r_x, &x) + quad(&cost.r_u, &u);
        let v = &self.result.variables;
        let xs = &v.x_bar + &v.p_w * &w + &v.p_xi * &xi;
        let us = &v.u_bar + &v.q_w * &w + &v.q_xi * &xi;
        let surrogate = quad(&cost.r_x, &xs) + quad(&cost.r_u, &us);
        tally.actual.add(actual);
        tally.actual_sq.add(actual * actual);
        tally.surrogate.add(surrogate);
        tally.surrogate_sq.add(surrogate * surrogate);
        if self.config.keep_samples {
            tally.rows.push(SampleRow {
                sample: index,
                min_slack,
                membership,
                actual_cost: actual,
                surrogate_cost: surrogate,
            });
        }
        Ok(())
    }
}

pub fn run(
    instance: &ProblemInstance,
    result: &SynthesisResult,
    config: &SimulationConfig,
) -> Result<SimulationReport, SimError> {
    if config.samples == 0 {
        return Err(SimError::NoSamples);
    }
    let graphs = build_coupling_graphs(instance);
    let decomp = compute_decomposition(instance, &graphs);
    let lifted = lift(instance, &decomp);
    let checker = if result.contract.dim() > 0 {
        Some(result.contract.checker()?)
    } else {
        None
    };
    let ctx = Context {
        instance,
        result,
        config,
        graphs,
        decomp,
        closed: ClosedLoop::new(&lifted, &result.policy),
        recursive_check: true,
        checker,
    };

    let chunks = config.samples.div_ceil(CHUNK);
    let tallies: Vec<Result<Tally, SimError>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(chunk as u64);
            let mut tally = Tally::new();
            let start = chunk * CHUNK;
            for index in start..(start + CHUNK).min(config.samples) {
                ctx.sample(index, &mut rng, &mut tally)?;
            }
            Ok(tally)
        })
        .collect();
    let mut total = Tally::new();
    for t in tallies {
        total.merge(t?);
    }

    let disturbance = instance.disturbance();
    let expected_m = default_second_moment(&disturbance.sigma, disturbance.sigma.nrows());
    Ok(SimulationReport {
        instance_hash: instance.content_hash(),
        samples: config.samples,
        seed: config.seed,
        constraint_violations: total.violations,
        worst_constraint_slack: total.worst_slack,
        contract_violations: total.contract_violations,
        worst_membership: total.worst_membership,
        max_reconstruction_error: total.reconstruction,
        max_rollout_gap: total.rollout_gap,
        surrogate_cost: estimate(&total.surrogate, &total.surrogate_sq, config.samples),
        actual_cost: estimate(&total.actual, &total.actual_sq, config.samples),
        synthesis_objective: result.objective,
        second_moment_matches_sampler: disturbance.second_moment == expected_m,
        rows: config.keep_samples.then_some(total.rows),
    })
}

/// One CSV row per sample.
pub fn write_table(path: &Path, rows: &[SampleRow]) -> Result<(), SimError> {
    let err = |e: csv::Error| SimError::Table {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        writer.serialize(row).map_err(err)?;
    }
    writer.flush().map_err(|e| err(e.into()))
}

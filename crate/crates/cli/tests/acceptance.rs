//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use agc_core::conic::{self, AffineExpr, ConicProgram, SocConstraint, Tolerances, TraceQuadratic};
use agc_core::fixtures::{self, random_instance, RandomShape};
use agc_core::infograph::{pattern_qc, pattern_qn, pattern_y};
use agc_core::lifting::{build_b_l, trajectory};
use agc_core::simulate::{self, sample_disturbance};
use agc_core::synthesis::{synthesize_with, ContractShape, SynthesisOptions};
use agc_core::{
    build_coupling_graphs, compute_decomposition, lift, InfoDecomposition, ProblemInstance,
    SimulationConfig, SparsityPattern, SynthesisResult,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Check);

fn decompose(instance: &ProblemInstance) -> InfoDecomposition {
    compute_decomposition(instance, &build_coupling_graphs(instance))
}

fn solve(instance: &ProblemInstance, shape: ContractShape) -> Result<SynthesisResult, String> {
    let options = SynthesisOptions {
        shape,
        ..SynthesisOptions::default()
    };
    synthesize_with(instance, &options).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fill(pattern: &SparsityPattern, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (r, c) = pattern.shape();
    let mut m = DMatrix::zeros(r, c);
    for (i, j) in pattern.free_entries() {
        m[(i, j)] = rng.sample(StandardNormal);
    }
    m
}

/// Half the draws uniform in the ellipsoid, half on its boundary.
fn draw(factor: &DMatrix<f64>, rng: &mut ChaCha8Rng, boundary: bool) -> DVector<f64> {
    if boundary {
        let d = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        factor * (&d / d.norm())
    } else {
        sample_disturbance(factor, rng)
    }
}

fn decomposition_oracle() -> Check {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/chain2_nonclassical.json");
    let out = Command::new(env!("CARGO_BIN_EXE_agc"))
        .arg("analyze")
        .arg(&path)
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || format!("analyze exited with {:?}", out.status))?;
    for line in [
        "subsystem 1: N(1) = ∅, C(1) = {1}",
        "subsystem 2: N(2) = {1, 2}, C(2) = ∅",
        "C = {1}; nonclassical",
    ] {
        ensure(text.contains(line), || format!("missing `{line}` in:\n{text}"))?;
    }
    let nested = decompose(&fixtures::chain2_nested());
    ensure(nested.coupled_set().is_empty(), || "chain2-nested has C ≠ ∅".into())?;
    Ok("chain2 sets exact; nested C = ∅".into())
}

fn surrogate_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let inst = random_instance(&mut rng, RandomShape::default());
        let lifted = lift(&inst, &decompose(&inst));
        let layout = inst.layout();
        for _ in 0..100 {
            let u = DVector::from_fn(layout.input_len(), |_, _| rng.sample(StandardNormal));
            let w = DVector::from_fn(layout.state_len(), |_, _| rng.sample(StandardNormal));
            let x = trajectory(&lifted, &u, &w).map_err(|e| e.to_string())?;
            let rhs = &lifted.b_tilde * &u + &lifted.l_tilde * &w + &lifted.h_tilde * (&lifted.pi_c * &x);
            worst = worst.max((&x - rhs).norm() / x.norm().max(f64::MIN_POSITIVE));
        }
    }
    ensure(worst <= 1e-9, || format!("relative residual {worst:.3e}"))?;
    Ok(format!("5000 trajectories, max relative residual {worst:.2e}"))
}

fn structural_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let instances = [
        fixtures::chain2_nonclassical(),
        fixtures::chain2_nested(),
        fixtures::chain2_tight(),
    ];
    for inst in &instances {
        let d = decompose(inst);
        let qc = pattern_qc(&d, inst.layout());
        let py = pattern_y(&d, inst.layout());
        for _ in 0..200 {
            let q = fill(&qc, &mut rng);
            let y = fill(&py, &mut rng);
            worst = worst.max(qc.max_violation(&(&q * &y)));
        }
    }
    ensure(worst <= 1e-12, || format!("forbidden-block magnitude {worst:.3e}"))?;
    Ok(format!("600 draws, max forbidden-block entry {worst:.1e}"))
}

/// Row values `F_x x̃ + F_u ũ + F_w w` of the surrogate at `(w, ξ)`.
fn surrogate_rows(inst: &ProblemInstance, r: &SynthesisResult, w: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    let v = &r.variables;
    let c = inst.constraints();
    let x = &v.x_bar + &v.p_w * w + &v.p_xi * xi;
    let u = &v.u_bar + &v.q_w * w + &v.q_xi * xi;
    &c.f_x * x + &c.f_u * u + &c.f_w * w
}

fn robust_rows() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_gap: f64 = 0.0;
    let mut max_excess = f64::NEG_INFINITY;
    for inst in [fixtures::chain2_nonclassical(), fixtures::chain2_tight()] {
        let r = solve(&inst, ContractShape::Oriented)?;
        let factor = &inst.disturbance().sigma_factor;
        let g = &inst.constraints().g;
        for (i, slack) in r.row_slacks.iter().enumerate() {
            let (w, xi) = r.row_maximizers(&inst, i);
            let value = surrogate_rows(&inst, &r, &w, &xi)[i];
            let worst_case = g[i] - slack.slack;
            max_gap = max_gap.max((value - worst_case).abs());
            max_excess = max_excess.max(value - g[i]);
        }
        for k in 0..10_000 {
            let w = draw(factor, &mut rng, k % 2 == 0);
            let xi = draw(factor, &mut rng, k % 4 < 2);
            let rows = surrogate_rows(&inst, &r, &w, &xi);
            max_excess = max_excess.max((rows - g).max());
        }
    }
    ensure(max_gap <= 1e-6, || format!("maximizer misses the worst case by {max_gap:.3e}"))?;
    ensure(max_excess <= 1e-6, || format!("row exceeded by {max_excess:.3e}"))?;
    Ok(format!(
        "maximizer gap {max_gap:.1e}, worst row excess {max_excess:.2e} over 2×10⁴ samples"
    ))
}

fn contract_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for inst in [fixtures::chain2_nonclassical(), fixtures::chain2_tight()] {
        let r = solve(&inst, ContractShape::Oriented)?;
        let checker = r.contract.checker().map_err(|e| e.to_string())?;
        let factor = &inst.disturbance().sigma_factor;
        let v = &r.variables;
        for k in 0..10_000 {
            let w = draw(factor, &mut rng, k % 2 == 0);
            let xi = draw(factor, &mut rng, k % 4 < 2);
            let x = &v.x_bar + &v.p_w * &w + &v.p_xi * &xi;
            let x_c = DVector::from_iterator(
                r.contract.projection.len(),
                r.contract.projection.iter().map(|&k| x[k]),
            );
            worst = worst.max(checker.membership(&x_c).map_err(|e| e.to_string())?);
        }
    }
    ensure(worst <= 1.0 + 1e-6, || format!("membership {worst:.9}"))?;
    Ok(format!("2×10⁴ Minkowski-sum points, max membership {worst:.6}"))
}

fn end_to_end() -> Check {
    let inst = fixtures::chain2_nonclassical();
    let sigma = &inst.disturbance().sigma;
    let n = sigma.nrows();
    ensure(*sigma == DMatrix::identity(n, n) * 0.01, || "Σ ≠ 0.01·I".into())?;
    let g = &inst.constraints().g;
    ensure(
        g.iter().take(12).all(|&b| b == 5.0) && g.iter().skip(12).all(|&b| b == 1.0),
        || "bounds are not |x| ≤ 5, |u| ≤ 1".into(),
    )?;
    let r = solve(&inst, ContractShape::Oriented)?;
    let config = SimulationConfig {
        samples: 10_000,
        seed: 6,
        ..SimulationConfig::default()
    };
    let report = simulate::run(&inst, &r, &config).map_err(|e| e.to_string())?;
    ensure(report.violations() == 0, || {
        format!(
            "{} constraint / {} contract violations",
            report.constraint_violations, report.contract_violations
        )
    })?;
    Ok(format!(
        "status {:?}, 10⁴ samples, 0 violations (worst slack {:.3}, worst membership {:.3})",
        r.status, report.worst_constraint_slack, report.worst_membership
    ))
}

fn objective_consistency() -> Check {
    let inst = fixtures::chain2_nonclassical();
    let r = solve(&inst, ContractShape::Oriented)?;
    let config = SimulationConfig {
        samples: 100_000,
        seed: 7,
        ..SimulationConfig::default()
    };
    let report = simulate::run(&inst, &r, &config).map_err(|e| e.to_string())?;
    ensure(report.second_moment_matches_sampler, || "M differs from the sampler".into())?;
    let est = report.surrogate_cost;
    let z = (est.mean - r.objective).abs() / est.std_error;
    ensure(z <= 3.0, || format!("{:.6e} vs {:.6e}: {z:.2} SE", est.mean, r.objective))?;
    Ok(format!(
        "objective {:.6e}, MC {:.6e} ± {:.1e} ({z:.2} SE)",
        r.objective, est.mean, est.std_error
    ))
}

fn round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut off: f64 = 0.0;
    for inst in [fixtures::chain2_nonclassical(), fixtures::chain2_tight()] {
        let r = solve(&inst, ContractShape::Oriented)?;
        let d = decompose(&inst);
        let qc = pattern_qc(&d, inst.layout());
        off = off.max(r.pattern_residual).max(qc.max_violation(&r.policy.q_v));
        let v = &r.variables;
        let z = v.z();
        let n_x = inst.layout().state_len();
        for _ in 0..1000 {
            let w = DVector::from_fn(n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
            let xi = DVector::from_fn(n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
            let surrogate = &v.u_bar + &v.q_w * &w + &v.q_xi * &xi;
            let vv = &v.v_bar + &z * &xi;
            let recovered = &r.policy.u_open + &r.policy.q_w * &w + &r.policy.q_v * vv;
            worst = worst.max((surrogate - recovered).amax());
        }
    }
    ensure(worst <= 1e-9, || format!("input residual {worst:.3e}"))?;
    ensure(off <= 1e-9, || format!("off-pattern {off:.3e}"))?;
    Ok(format!("input residual {worst:.1e}, off-pattern {off:.1e}"))
}

/// Robust affine disturbance feedback on the true system, built directly.
fn disturbance_feedback_objective(inst: &ProblemInstance) -> Result<f64, String> {
    let layout = inst.layout();
    let (n_x, n_u) = (layout.state_len(), layout.input_len());
    let (b, l) = build_b_l(inst);
    let cons = inst.constraints();
    let dist = inst.disturbance();
    let qn = pattern_qn(&decompose(inst), layout);

    let mut next = 0;
    let mut alloc = |k: usize| {
        let start = next;
        next += k;
        (start..next).collect::<Vec<_>>()
    };
    let free = qn.free_entries();
    let q_vars = alloc(free.len());
    let u_vars = alloc(n_u);
    let x_vars = alloc(n_x);
    let p_vars = alloc(n_x * n_x);
    let t_vars = alloc(cons.rows());
    let p = |r: usize, c: usize| p_vars[r * n_x + c];
    let mut q_expr = vec![vec![AffineExpr::constant(0.0); n_x]; n_u];
    for (k, &(r, c)) in free.iter().enumerate() {
        q_expr[r][c] = AffineExpr::var(q_vars[k]);
    }

    let mut prog = ConicProgram::new(next);
    for r in 0..n_x {
        let mut e = AffineExpr::var(x_vars[r]);
        for c in 0..n_u {
            e.add(u_vars[c], -b[(r, c)]);
        }
        prog.equalities.push(e);
        for c in 0..n_x {
            let mut e = AffineExpr::var(p(r, c));
            e.add_constant(-l[(r, c)]);
            for k in 0..n_u {
                e.add_expr(&q_expr[k][c], -b[(r, k)]);
            }
            prog.equalities.push(e);
        }
    }
    for i in 0..cons.rows() {
        let mut row = AffineExpr::constant(cons.g[i]);
        for r in 0..n_x {
            row.add(x_vars[r], -cons.f_x[(i, r)]);
        }
        for r in 0..n_u {
            row.add(u_vars[r], -cons.f_u[(i, r)]);
        }
        row.add(t_vars[i], -1.0);
        prog.nonnegatives.push(row);

        let coeff: Vec<AffineExpr> = (0..n_x)
            .map(|c| {
                let mut e = AffineExpr::constant(cons.f_w[(i, c)]);
                for r in 0..n_x {
                    e.add(p(r, c), cons.f_x[(i, r)]);
                }
                for r in 0..n_u {
                    e.add_expr(&q_expr[r][c], cons.f_u[(i, r)]);
                }
                e
            })
            .collect();
        let vector = (0..n_x)
            .map(|k| {
                let mut e = AffineExpr::constant(0.0);
                for c in 0..n_x {
                    e.add_expr(&coeff[c], dist.sigma_factor[(c, k)]);
                }
                e
            })
            .collect();
        prog.socs.push(SocConstraint {
            bound: AffineExpr::var(t_vars[i]),
            vector,
        });
    }
    let m = dist.second_moment.clone();
    prog.objective.quadratic.push(TraceQuadratic {
        rows: n_x,
        cols: n_x,
        entries: (0..n_x).flat_map(|r| (0..n_x).map(move |c| (r, c))).map(|(r, c)| (r, c, p(r, c))).collect(),
        left: inst.cost().r_x.clone(),
        right: m.clone(),
    });
    prog.objective.quadratic.push(TraceQuadratic {
        rows: n_u,
        cols: n_x,
        entries: free.iter().zip(&q_vars).map(|(&(r, c), &v)| (r, c, v)).collect(),
        left: inst.cost().r_u.clone(),
        right: m,
    });
    prog.objective.quadratic.push(TraceQuadratic::vector(&x_vars, inst.cost().r_x.clone()));
    prog.objective.quadratic.push(TraceQuadratic::vector(&u_vars, inst.cost().r_u.clone()));

    let sol = conic::solve(&prog, &Tolerances::default()).map_err(|e| e.to_string())?;
    ensure(sol.status.has_primal(), || format!("direct program: {:?}", sol.status))?;
    Ok(sol.objective)
}

fn degenerate_case() -> Check {
    let inst = fixtures::chain2_nested();
    ensure(decompose(&inst).coupled_set().is_empty(), || "C ≠ ∅".into())?;
    let r = solve(&inst, ContractShape::Oriented)?;
    ensure(r.lmi_dim == 0, || format!("LMI of dimension {}", r.lmi_dim))?;
    let direct = disturbance_feedback_objective(&inst)?;
    let rel = (r.objective - direct).abs() / direct.abs().max(f64::MIN_POSITIVE);
    ensure(rel <= 1e-6, || format!("{:.9e} vs {direct:.9e}: rel {rel:.2e}", r.objective))?;
    Ok(format!("no LMI, objective {:.9e} vs direct {direct:.9e} (rel {rel:.1e})", r.objective))
}

fn conservatism() -> Check {
    let inst = fixtures::chain2_nonclassical();
    let free = solve(&inst, ContractShape::Oriented)?.objective;
    let scaled = solve(&inst, ContractShape::Scaled)?.objective;
    ensure(free <= scaled + 1e-6, || format!("free {free:.9e} > scaled {scaled:.9e}"))?;
    Ok(format!(
        "free Y {free:.9e} ≤ Y = 0 {scaled:.9e} (improvement {:.3e})",
        scaled - free
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("decomposition oracle", Some(Duration::from_secs(1)), decomposition_oracle),
        ("surrogate identity", Some(Duration::from_secs(10)), surrogate_identity),
        ("structural invariance", Some(Duration::from_secs(5)), structural_invariance),
        ("robust row equivalence", None, robust_rows),
        ("contract soundness", None, contract_soundness),
        ("end-to-end feasibility", Some(Duration::from_secs(60)), end_to_end),
        ("objective consistency", None, objective_consistency),
        ("policy round trip", None, round_trip),
        ("partially nested case", None, degenerate_case),
        ("conservatism regression", None, conservatism),
    ];
    let mut failed = 0;
    for (k, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, limit) {
            if elapsed > *limit {
                outcome = Err(format!("took {elapsed:.2?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{elapsed:.2?}]", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{elapsed:.2?}]", k + 1);
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}

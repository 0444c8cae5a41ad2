//! Joint synthesis of a decentralized affine policy and an ellipsoidal
//! contract on the information-coupling states.
//!
//! The policy acts on the true system as
//! `u = u° + Q^w w + Q^v x`, where `Q^w` only reads disturbances that each
//! controller can reconstruct and `Q^v` only reads information-coupling
//! states. For the design, `x_C` is replaced by a fictitious signal
//! `v = v̄ + Z ξ` with `ξ` an independent copy of `w` and `Z = λI - Y`. The
//! substitution `ū = u° + Q^v v̄`, `Q^ξ = Q^v Z` makes the surrogate state
//!
//! ```text
//! x̃ = x̄ + P^w w + P^ξ ξ,  x̄ = B̃ū + H̃ Π_C v̄,
//! P^w = B̃ Q^w + L̃,         P^ξ = B̃ Q^ξ + H̃ Π_C Z
//! ```
//!
//! affine in the decision variables. Constraint rows are enforced for the
//! worst case over the ellipsoid with one cone per source of uncertainty,
//! and one LMI keeps the reachable coupled states inside the contract.
//!
//! Only rows of `Y` indexed by coupled states enter the program, and only
//! the coupled entries of `v̄`, so the remaining ones are not variables; the
//! reported `v̄` is completed with `x̄`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{
    backend_by_name, AffineExpr, ConicError, ConicProgram, LmiConstraint, SocConstraint,
    SolveStatus, SolverDiagnostics, Tolerances, TraceQuadratic, DEFAULT_BACKEND,
};
use crate::infograph::{
    build_coupling_graphs, compute_decomposition, pattern_qc, pattern_qn, pattern_y,
    InfoDecomposition, SparsityPattern,
};
use crate::lifting::{lift, LiftedSystem};
use crate::linalg::{cholesky_factor, inverse_quadratic_form};
use crate::model::ProblemInstance;

/// Largest off-pattern entry tolerated in the recovered `Q^v`.
pub const PATTERN_TOL: f64 = 1e-9;

/// Degrees of freedom of the contract shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractShape {
    /// Free `Y`: location, scale and orientation.
    #[default]
    Oriented,
    /// `Y = 0`: location and scale only.
    Scaled,
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub shape: ContractShape,
    pub backend: String,
    pub tolerances: Tolerances,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            shape: ContractShape::Oriented,
            backend: DEFAULT_BACKEND.to_string(),
            tolerances: Tolerances::default(),
        }
    }
}

impl SynthesisOptions {
    /// Backend from `AGC_BACKEND` and tolerances from the `AGC_*` variables.
    pub fn from_env() -> Self {
        Self {
            backend: std::env::var("AGC_BACKEND").unwrap_or_else(|_| DEFAULT_BACKEND.to_string()),
            tolerances: Tolerances::from_env(),
            ..Self::default()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("the contract program is infeasible ({})", .diagnostics.raw_status)]
    Infeasible { diagnostics: SolverDiagnostics },
    #[error("solver failed with status {:?} ({})", .status, .diagnostics.raw_status)]
    Solver {
        status: SolveStatus,
        diagnostics: SolverDiagnostics,
    },
    #[error("returned point fails the residual check: {}", .flagged.join("; "))]
    Residual { flagged: Vec<String> },
    #[error("recovered coupled-state gain leaves its pattern by {magnitude:.3e}")]
    OffPattern { magnitude: f64 },
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// Matrix of affine expressions, row-major.
#[derive(Debug, Clone)]
struct ExprMatrix {
    rows: usize,
    cols: usize,
    data: Vec<AffineExpr>,
}

impl ExprMatrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![AffineExpr::default(); rows * cols],
        }
    }

    fn from_vars(rows: usize, cols: usize, entries: &[(usize, usize, usize)]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for &(r, c, v) in entries {
            m.get_mut(r, c).add(v, 1.0);
        }
        m
    }

    fn get(&self, r: usize, c: usize) -> &AffineExpr {
        &self.data[r * self.cols + c]
    }

    fn get_mut(&mut self, r: usize, c: usize) -> &mut AffineExpr {
        &mut self.data[r * self.cols + c]
    }

    /// `self += scale · K X`.
    fn add_product(&mut self, k: &DMatrix<f64>, x: &ExprMatrix, scale: f64) {
        assert_eq!((k.nrows(), k.ncols(), x.cols), (self.rows, x.rows, self.cols));
        for r in 0..k.nrows() {
            for j in 0..k.ncols() {
                let kv = k[(r, j)];
                if kv == 0.0 {
                    continue;
                }
                for c in 0..x.cols {
                    let src = x.get(j, c);
                    if !src.terms.is_empty() || src.constant != 0.0 {
                        self.get_mut(r, c).add_expr(src, scale * kv);
                    }
                }
            }
        }
    }

    /// `self += scale · X K`.
    fn add_product_right(&mut self, x: &ExprMatrix, k: &DMatrix<f64>, scale: f64) {
        assert_eq!((x.rows, x.cols, k.ncols()), (self.rows, k.nrows(), self.cols));
        for r in 0..x.rows {
            for j in 0..x.cols {
                let src = x.get(r, j);
                if src.terms.is_empty() && src.constant == 0.0 {
                    continue;
                }
                for c in 0..k.ncols() {
                    let kv = k[(j, c)];
                    if kv != 0.0 {
                        self.get_mut(r, c).add_expr(src, scale * kv);
                    }
                }
            }
        }
    }

    fn add_constant(&mut self, k: &DMatrix<f64>, scale: f64) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                self.get_mut(r, c).add_constant(scale * k[(r, c)]);
            }
        }
    }

    fn compact(&mut self) {
        for e in &mut self.data {
            compact(e);
        }
    }
}

/// Merges repeated variables and drops cancelled terms.
fn compact(e: &mut AffineExpr) {
    if e.terms.len() < 2 {
        return;
    }
    e.terms.sort_unstable_by_key(|&(v, _)| v);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(e.terms.len());
    for &(v, c) in &e.terms {
        match out.last_mut() {
            Some((lv, lc)) if *lv == v => *lc += c,
            _ => out.push((v, c)),
        }
    }
    out.retain(|&(_, c)| c != 0.0);
    e.terms = out;
}

fn row_expr(terms: impl IntoIterator<Item = (usize, f64)>, constant: f64) -> AffineExpr {
    let mut e = AffineExpr::constant(constant);
    for (v, c) in terms {
        e.add(v, c);
    }
    compact(&mut e);
    e
}

/// Variable indices of an assembled program.
#[derive(Debug, Clone)]
pub struct SdpLayout {
    n_x: usize,
    n_u: usize,
    projection: Vec<usize>,
    q_w: Vec<(usize, usize, usize)>,
    q_xi: Vec<(usize, usize, usize)>,
    y: Vec<(usize, usize, usize)>,
    u_bar: usize,
    v_bar_c: usize,
    x_bar: usize,
    p_w: usize,
    p_xi: usize,
    lambda: usize,
    beta: usize,
    t1: usize,
    t2: usize,
    rows: usize,
    num_vars: usize,
    lmi_dim: usize,
}

impl SdpLayout {
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Side length of the containment LMI, `0` when there is none.
    pub fn lmi_dim(&self) -> usize {
        self.lmi_dim
    }

    fn dense(&self, x: &[f64], start: usize, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |r, c| x[start + c * rows + r])
    }

    fn sparse(&self, x: &[f64], entries: &[(usize, usize, usize)], rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for &(r, c, v) in entries {
            m[(r, c)] = x[v];
        }
        m
    }

    /// Decodes a primal vector.
    pub fn extract(&self, x: &[f64]) -> SdpVariables {
        let (n_x, n_u) = (self.n_x, self.n_u);
        let x_bar = DVector::from_column_slice(&x[self.x_bar..self.x_bar + n_x]);
        let mut v_bar = x_bar.clone();
        for (k, &idx) in self.projection.iter().enumerate() {
            v_bar[idx] = x[self.v_bar_c + k];
        }
        SdpVariables {
            q_w: self.sparse(x, &self.q_w, n_u, n_x),
            q_xi: self.sparse(x, &self.q_xi, n_u, n_x),
            y: self.sparse(x, &self.y, n_x, n_x),
            u_bar: DVector::from_column_slice(&x[self.u_bar..self.u_bar + n_u]),
            v_bar,
            x_bar,
            p_w: self.dense(x, self.p_w, n_x, n_x),
            p_xi: self.dense(x, self.p_xi, n_x, n_x),
            lambda: x[self.lambda],
            beta: x[self.beta],
            t1: DVector::from_column_slice(&x[self.t1..self.t1 + self.rows]),
            t2: DVector::from_column_slice(&x[self.t2..self.t2 + self.rows]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Assembled {
    pub program: ConicProgram,
    pub layout: SdpLayout,
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, n: usize) -> usize {
        let start = self.0;
        self.0 += n;
        start
    }

    fn entries(&mut self, pattern_entries: Vec<(usize, usize)>) -> Vec<(usize, usize, usize)> {
        let start = self.take(pattern_entries.len());
        pattern_entries
            .into_iter()
            .enumerate()
            .map(|(k, (r, c))| (r, c, start + k))
            .collect()
    }
}

fn dense_entries(start: usize, rows: usize, cols: usize) -> Vec<(usize, usize, usize)> {
    (0..cols)
        .flat_map(|c| (0..rows).map(move |r| (r, c, start + c * rows + r)))
        .collect()
}

/// Free entries of the orientation pattern on coupled-state rows.
fn orientation_entries(pattern: &SparsityPattern, projection: &[usize]) -> Vec<(usize, usize)> {
    let coupled: BTreeSet<usize> = projection.iter().copied().collect();
    pattern
        .free_entries()
        .into_iter()
        .filter(|(r, _)| coupled.contains(r))
        .collect()
}

pub fn assemble(
    instance: &ProblemInstance,
    decomp: &InfoDecomposition,
    lifted: &LiftedSystem,
    shape: ContractShape,
) -> Assembled {
    let layout = instance.layout();
    let (n_x, n_u) = (layout.state_len(), layout.input_len());
    let projection = decomp.projection().to_vec();
    let n_c = projection.len();
    let cons = instance.constraints();
    let m = cons.rows();
    let dist = instance.disturbance();

    let mut alloc = Alloc(0);
    let q_w = alloc.entries(pattern_qn(decomp, layout).free_entries());
    let q_xi = alloc.entries(pattern_qc(decomp, layout).free_entries());
    let y = match shape {
        ContractShape::Oriented => {
            alloc.entries(orientation_entries(&pattern_y(decomp, layout), &projection))
        }
        ContractShape::Scaled => Vec::new(),
    };
    let u_bar = alloc.take(n_u);
    let v_bar_c = alloc.take(n_c);
    let x_bar = alloc.take(n_x);
    let p_w = alloc.take(n_x * n_x);
    let p_xi = alloc.take(n_x * n_x);
    let lambda = alloc.take(1);
    let beta = alloc.take(1);
    let t1 = alloc.take(m);
    let t2 = alloc.take(m);
    let num_vars = alloc.0;
    let lmi_dim = if n_c > 0 { n_c + 2 * n_x } else { 0 };

    let sdp = SdpLayout {
        n_x,
        n_u,
        projection: projection.clone(),
        q_w: q_w.clone(),
        q_xi: q_xi.clone(),
        y: y.clone(),
        u_bar,
        v_bar_c,
        x_bar,
        p_w,
        p_xi,
        lambda,
        beta,
        t1,
        t2,
        rows: m,
        num_vars,
        lmi_dim,
    };

    let p_w_entries = dense_entries(p_w, n_x, n_x);
    let p_xi_entries = dense_entries(p_xi, n_x, n_x);
    let qw_m = ExprMatrix::from_vars(n_u, n_x, &q_w);
    let qxi_m = ExprMatrix::from_vars(n_u, n_x, &q_xi);
    let pw_m = ExprMatrix::from_vars(n_x, n_x, &p_w_entries);
    let pxi_m = ExprMatrix::from_vars(n_x, n_x, &p_xi_entries);
    // Rows of Y on coupled states, Π_C Y.
    let row_of: std::collections::HashMap<usize, usize> =
        projection.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let y_c_entries: Vec<(usize, usize, usize)> =
        y.iter().map(|&(r, c, v)| (row_of[&r], c, v)).collect();
    let y_c = ExprMatrix::from_vars(n_c, n_x, &y_c_entries);

    let mut program = ConicProgram::new(num_vars);

    // x̄ = B̃ū + H̃ v̄_C
    for r in 0..n_x {
        let terms = std::iter::once((x_bar + r, 1.0))
            .chain((0..n_u).map(|c| (u_bar + c, -lifted.b_tilde[(r, c)])))
            .chain((0..n_c).map(|k| (v_bar_c + k, -lifted.h_tilde[(r, k)])));
        program.equalities.push(row_expr(terms, 0.0));
    }
    // P^w = B̃ Q^w + L̃
    let mut rhs_w = ExprMatrix::zeros(n_x, n_x);
    rhs_w.add_product(&lifted.b_tilde, &qw_m, 1.0);
    rhs_w.add_constant(&lifted.l_tilde, 1.0);
    // P^ξ = B̃ Q^ξ + λ H̃ Π_C - H̃ Π_C Y
    let mut rhs_xi = ExprMatrix::zeros(n_x, n_x);
    rhs_xi.add_product(&lifted.b_tilde, &qxi_m, 1.0);
    rhs_xi.add_product(&lifted.h_tilde, &y_c, -1.0);
    for r in 0..n_x {
        for (k, &c) in projection.iter().enumerate() {
            rhs_xi.get_mut(r, c).add(lambda, lifted.h_tilde[(r, k)]);
        }
    }
    for (rhs, start) in [(&mut rhs_w, p_w), (&mut rhs_xi, p_xi)] {
        for c in 0..n_x {
            for r in 0..n_x {
                let mut e = AffineExpr::var(start + c * n_x + r);
                e.add_expr(rhs.get(r, c), -1.0);
                compact(&mut e);
                program.equalities.push(e);
            }
        }
    }
    // Π_C x̄ = v̄_C
    for (k, &idx) in projection.iter().enumerate() {
        program
            .equalities
            .push(row_expr([(x_bar + idx, 1.0), (v_bar_c + k, -1.0)], 0.0));
    }

    program.nonnegatives.push(row_expr([(lambda, 1.0)], -1.0));
    program.nonnegatives.push(row_expr([(beta, 1.0)], 0.0));
    program.nonnegatives.push(row_expr([(lambda, 1.0), (beta, -1.0)], 0.0));

    // Worst case of each row over both ellipsoids.
    let g_factor = &dist.sigma_factor;
    let mut k_w = ExprMatrix::zeros(m, n_x);
    k_w.add_product(&cons.f_x, &pw_m, 1.0);
    k_w.add_product(&cons.f_u, &qw_m, 1.0);
    k_w.add_constant(&cons.f_w, 1.0);
    let mut k_xi = ExprMatrix::zeros(m, n_x);
    k_xi.add_product(&cons.f_x, &pxi_m, 1.0);
    k_xi.add_product(&cons.f_u, &qxi_m, 1.0);
    let mut s_w = ExprMatrix::zeros(m, n_x);
    s_w.add_product_right(&k_w, g_factor, 1.0);
    s_w.compact();
    let mut s_xi = ExprMatrix::zeros(m, n_x);
    s_xi.add_product_right(&k_xi, g_factor, 1.0);
    s_xi.compact();
    for i in 0..m {
        for (s, t) in [(&s_w, t1), (&s_xi, t2)] {
            program.socs.push(SocConstraint {
                bound: AffineExpr::var(t + i),
                vector: (0..n_x).map(|c| s.get(i, c).clone()).collect(),
            });
        }
        let terms = (0..n_x)
            .map(|c| (x_bar + c, -cons.f_x[(i, c)]))
            .chain((0..n_u).map(|c| (u_bar + c, -cons.f_u[(i, c)])))
            .chain([(t1 + i, -1.0), (t2 + i, -1.0)]);
        program.nonnegatives.push(row_expr(terms, cons.g[i]));
    }

    if n_c > 0 {
        program.lmis.push(containment_lmi(
            &dist.sigma,
            g_factor,
            &projection,
            &y_c,
            &pw_m,
            &pxi_m,
            lambda,
            beta,
        ));
    }

    let weight = &dist.second_moment;
    let cost = instance.cost();
    let gain = |entries: Vec<(usize, usize, usize)>, rows, left: &DMatrix<f64>| TraceQuadratic {
        rows,
        cols: n_x,
        entries,
        left: left.clone(),
        right: weight.clone(),
    };
    let u_vars: Vec<usize> = (u_bar..u_bar + n_u).collect();
    let x_vars: Vec<usize> = (x_bar..x_bar + n_x).collect();
    program.objective.quadratic = vec![
        gain(p_w_entries, n_x, &cost.r_x),
        gain(p_xi_entries, n_x, &cost.r_x),
        gain(q_w, n_u, &cost.r_u),
        gain(q_xi, n_u, &cost.r_u),
        TraceQuadratic::vector(&x_vars, cost.r_x.clone()),
        TraceQuadratic::vector(&u_vars, cost.r_u.clone()),
    ];

    Assembled {
        program,
        layout: sdp,
    }
}

/// ```text
/// [ Π_C Σ̃ Π_Cᵀ   Π_C P^w    Π_C P^ξ       ]
/// [      ·        β Σ⁻¹      0             ]  ⪰ 0,  Σ̃ = λΣ - YΣ - ΣYᵀ
/// [      ·        0          (λ - β) Σ⁻¹   ]
/// ```
///
/// passed through the congruence `diag(s I, G, G)` with `G Gᵀ = Σ`, which
/// turns the lower blocks into `β I` and `(λ - β) I`; `s` brings the
/// coupled block to unit scale.
#[allow(clippy::too_many_arguments)]
fn containment_lmi(
    sigma: &DMatrix<f64>,
    g_factor: &DMatrix<f64>,
    projection: &[usize],
    y_c: &ExprMatrix,
    pw: &ExprMatrix,
    pxi: &ExprMatrix,
    lambda: usize,
    beta: usize,
) -> LmiConstraint {
    let n_x = sigma.nrows();
    let n_c = projection.len();
    let s = 1.0
        / projection
            .iter()
            .map(|&i| sigma[(i, i)])
            .fold(0.0, f64::max)
            .sqrt();
    let sigma_cols = sigma.select_columns(projection);
    let mut y_sigma = ExprMatrix::zeros(n_c, n_c);
    y_sigma.add_product_right(y_c, &sigma_cols, 1.0);
    let rows_of = |p: &ExprMatrix| {
        let mut sel = ExprMatrix::zeros(n_c, n_x);
        for (k, &idx) in projection.iter().enumerate() {
            for c in 0..n_x {
                *sel.get_mut(k, c) = p.get(idx, c).clone();
            }
        }
        let mut out = ExprMatrix::zeros(n_c, n_x);
        out.add_product_right(&sel, g_factor, s);
        out.compact();
        out
    };
    let (pw_g, pxi_g) = (rows_of(pw), rows_of(pxi));

    let mut lmi = LmiConstraint::new(n_c + 2 * n_x);
    for b in 0..n_c {
        for a in 0..=b {
            let e = lmi.entry_mut(a, b);
            e.add(lambda, s * s * sigma[(projection[a], projection[b])]);
            e.add_expr(y_sigma.get(a, b), -s * s);
            e.add_expr(y_sigma.get(b, a), -s * s);
            compact(e);
        }
    }
    for k in 0..n_c {
        for c in 0..n_x {
            *lmi.entry_mut(k, n_c + c) = pw_g.get(k, c).clone();
            *lmi.entry_mut(k, n_c + n_x + c) = pxi_g.get(k, c).clone();
        }
    }
    for a in 0..n_x {
        lmi.entry_mut(n_c + a, n_c + a).add(beta, 1.0);
        lmi.entry_mut(n_c + n_x + a, n_c + n_x + a).add(lambda, 1.0).add(beta, -1.0);
    }
    lmi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpVariables {
    #[serde(with = "crate::serde_matrix")]
    pub q_w: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub q_xi: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub y: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub u_bar: DVector<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub v_bar: DVector<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub x_bar: DVector<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub p_w: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub p_xi: DMatrix<f64>,
    pub lambda: f64,
    pub beta: f64,
    #[serde(with = "crate::serde_matrix::vector")]
    pub t1: DVector<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub t2: DVector<f64>,
}

impl SdpVariables {
    /// `Z = λI - Y`.
    pub fn z(&self) -> DMatrix<f64> {
        DMatrix::identity(self.y.nrows(), self.y.ncols()) * self.lambda - &self.y
    }
}

/// `Tr(P^ξᵀ R_x P^ξ M) + Tr(P^wᵀ R_x P^w M) + Tr(Q^wᵀ R_u Q^w M)
///  + Tr(Q^ξᵀ R_u Q^ξ M) + x̄ᵀ R_x x̄ + ūᵀ R_u ū`.
pub fn objective_value(
    vars: &SdpVariables,
    m: &DMatrix<f64>,
    r_x: &DMatrix<f64>,
    r_u: &DMatrix<f64>,
) -> f64 {
    let form = |p: &DMatrix<f64>, r: &DMatrix<f64>| (p.transpose() * r * p * m).trace();
    form(&vars.p_xi, r_x)
        + form(&vars.p_w, r_x)
        + form(&vars.q_w, r_u)
        + form(&vars.q_xi, r_u)
        + vars.x_bar.dot(&(r_x * &vars.x_bar))
        + vars.u_bar.dot(&(r_u * &vars.u_bar))
}

/// `u = u° + Q^w w + Q^v x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePolicy {
    #[serde(with = "crate::serde_matrix::vector")]
    pub u_open: DVector<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub q_w: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub q_v: DMatrix<f64>,
}

impl AffinePolicy {
    pub fn zero(n_u: usize, n_x: usize) -> Self {
        Self {
            u_open: DVector::zeros(n_u),
            q_w: DMatrix::zeros(n_u, n_x),
            q_v: DMatrix::zeros(n_u, n_x),
        }
    }
}

/// Contract set `Π_C(v̄ ⊕ Z W)` on the coupled-state trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    #[serde(with = "crate::serde_matrix::vector")]
    pub v_bar: DVector<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub z: DMatrix<f64>,
    pub projection: Vec<usize>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub center: DVector<f64>,
    /// `S_C = Π_C Z Σ Zᵀ Π_Cᵀ`.
    #[serde(with = "crate::serde_matrix")]
    pub shape: DMatrix<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ContractError {
    #[error("contract shape is not positive definite")]
    Degenerate,
    #[error("coupled-state vector has length {found}, expected {expected}")]
    Length { expected: usize, found: usize },
}

impl Contract {
    pub fn new(v_bar: DVector<f64>, z: DMatrix<f64>, sigma: &DMatrix<f64>, projection: &[usize]) -> Self {
        let zc = z.select_rows(projection);
        let shape = &zc * sigma * zc.transpose();
        let center = DVector::from_iterator(projection.len(), projection.iter().map(|&i| v_bar[i]));
        Self {
            v_bar,
            z,
            projection: projection.to_vec(),
            center,
            shape,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.len()
    }

    /// Prepared membership test.
    pub fn checker(&self) -> Result<ContractChecker, ContractError> {
        let factor = cholesky_factor(&self.shape).ok_or(ContractError::Degenerate)?;
        Ok(ContractChecker {
            center: self.center.clone(),
            factor,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ContractChecker {
    center: DVector<f64>,
    factor: DMatrix<f64>,
}

impl ContractChecker {
    /// `(x_C - c)ᵀ S_C⁻¹ (x_C - c)`; the set is where this is at most one.
    pub fn membership(&self, x_c: &DVector<f64>) -> Result<f64, ContractError> {
        if x_c.len() != self.center.len() {
            return Err(ContractError::Length {
                expected: self.center.len(),
                found: x_c.len(),
            });
        }
        Ok(inverse_quadratic_form(&self.factor, &(x_c - &self.center)))
    }
}

/// Worst case of one constraint row over `w, ξ ∈ W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSlack {
    pub row: usize,
    /// `F_x x̄ + F_u ū`.
    pub nominal: f64,
    /// `max_w` of the `w` part, `√(cᵀ Σ c)`.
    pub disturbance: f64,
    /// Same for the `ξ` part.
    pub fictitious: f64,
    pub bound: f64,
    /// `bound - nominal - disturbance - fictitious`.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub instance_hash: String,
    pub status: SolveStatus,
    pub shape: ContractShape,
    pub objective: f64,
    pub lmi_dim: usize,
    pub variables: SdpVariables,
    pub policy: AffinePolicy,
    pub contract: Contract,
    pub row_slacks: Vec<RowSlack>,
    /// Largest off-pattern magnitude of `Q^ξ Z⁻¹` before projection.
    pub pattern_residual: f64,
    pub diagnostics: SolverDiagnostics,
}

impl SynthesisResult {
    /// `(F_x P^w + F_u Q^w + F_w, F_x P^ξ + F_u Q^ξ)`: row `i` of each maps
    /// `w`, respectively `ξ`, into constraint row `i`.
    pub fn row_maps(&self, instance: &ProblemInstance) -> (DMatrix<f64>, DMatrix<f64>) {
        row_maps(instance, &self.variables)
    }

    /// Points of the ellipsoid maximizing the `w` and `ξ` parts of `row`,
    /// `Σc / √(cᵀΣc)` (zero when `c = 0`).
    pub fn row_maximizers(&self, instance: &ProblemInstance, row: usize) -> (DVector<f64>, DVector<f64>) {
        let (k_w, k_xi) = self.row_maps(instance);
        let sigma = &instance.disturbance().sigma;
        let arg = |c: DVector<f64>| {
            let sc = sigma * &c;
            let norm = c.dot(&sc).max(0.0).sqrt();
            if norm > 0.0 {
                sc / norm
            } else {
                DVector::zeros(c.len())
            }
        };
        (
            arg(k_w.row(row).transpose()),
            arg(k_xi.row(row).transpose()),
        )
    }
}

fn row_maps(instance: &ProblemInstance, v: &SdpVariables) -> (DMatrix<f64>, DMatrix<f64>) {
    let c = instance.constraints();
    (
        &c.f_x * &v.p_w + &c.f_u * &v.q_w + &c.f_w,
        &c.f_x * &v.p_xi + &c.f_u * &v.q_xi,
    )
}

pub fn row_slacks(instance: &ProblemInstance, v: &SdpVariables) -> Vec<RowSlack> {
    let c = instance.constraints();
    let g = &instance.disturbance().sigma_factor;
    let (k_w, k_xi) = row_maps(instance, v);
    let nominal = &c.f_x * &v.x_bar + &c.f_u * &v.u_bar;
    (0..c.rows())
        .map(|i| {
            let disturbance = (k_w.row(i) * g).norm();
            let fictitious = (k_xi.row(i) * g).norm();
            RowSlack {
                row: i,
                nominal: nominal[i],
                disturbance,
                fictitious,
                bound: c.g[i],
                slack: c.g[i] - nominal[i] - disturbance - fictitious,
            }
        })
        .collect()
}

/// Policy and contract implied by an optimal point.
///
/// Returns the policy, the contract and the off-pattern magnitude of
/// `Q^ξ Z⁻¹` before it is projected onto its pattern.
pub fn recover(
    instance: &ProblemInstance,
    decomp: &InfoDecomposition,
    v: &SdpVariables,
) -> Result<(AffinePolicy, Contract, f64), SynthesisError> {
    let z = v.z();
    // Q^v Z = Q^ξ  ⇔  Zᵀ Q^vᵀ = Q^ξᵀ, Zᵀ upper triangular.
    let q_v_raw = z
        .transpose()
        .solve_upper_triangular(&v.q_xi.transpose())
        .expect("Z has diagonal λ ≥ 1")
        .transpose();
    let pattern = pattern_qc(decomp, instance.layout());
    let magnitude = pattern.max_violation(&q_v_raw);
    if magnitude > PATTERN_TOL {
        return Err(SynthesisError::OffPattern { magnitude });
    }
    let q_v = pattern.project(&q_v_raw);
    let u_open = &v.u_bar - &q_v * &v.v_bar;
    let contract = Contract::new(
        v.v_bar.clone(),
        z,
        &instance.disturbance().sigma,
        decomp.projection(),
    );
    Ok((
        AffinePolicy {
            u_open,
            q_w: v.q_w.clone(),
            q_v,
        },
        contract,
        magnitude,
    ))
}

pub fn synthesize(instance: &ProblemInstance) -> Result<SynthesisResult, SynthesisError> {
    synthesize_with(instance, &SynthesisOptions::from_env())
}

pub fn synthesize_with(
    instance: &ProblemInstance,
    options: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let graphs = build_coupling_graphs(instance);
    let decomp = compute_decomposition(instance, &graphs);
    let lifted = lift(instance, &decomp);
    let assembled = assemble(instance, &decomp, &lifted, options.shape);
    let backend = backend_by_name(&options.backend)?;
    let solution = backend.solve(&assembled.program, &options.tolerances)?;
    let x = match (solution.status, &solution.primal) {
        (SolveStatus::Infeasible, _) => {
            return Err(SynthesisError::Infeasible {
                diagnostics: solution.diagnostics,
            })
        }
        (status, Some(x)) if status.has_primal() => x,
        (status, _) => {
            return Err(SynthesisError::Solver {
                status,
                diagnostics: solution.diagnostics,
            })
        }
    };
    let report = crate::conic::verify_solution(&assembled.program, x);
    let flagged = report.flagged(options.tolerances.acceptance);
    if !flagged.is_empty() {
        return Err(SynthesisError::Residual { flagged });
    }
    let variables = assembled.layout.extract(x);
    let (policy, contract, pattern_residual) = recover(instance, &decomp, &variables)?;
    Ok(SynthesisResult {
        instance_hash: instance.content_hash(),
        status: solution.status,
        shape: options.shape,
        objective: solution.objective,
        lmi_dim: assembled.layout.lmi_dim(),
        row_slacks: row_slacks(instance, &variables),
        variables,
        policy,
        contract,
        pattern_residual,
        diagnostics: solution.diagnostics,
    })
}

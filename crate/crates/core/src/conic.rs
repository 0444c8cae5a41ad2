//! Solver-agnostic conic programs over a vector of scalar variables.
//!
//! A [`ConicProgram`] minimizes a positive semidefinite quadratic plus an
//! affine term subject to affine equalities, affine nonnegativity rows,
//! second-order cones and linear matrix inequalities. Quadratic terms have
//! the trace form `Tr(Xᵀ L X R)` over a sparse matrix `X` of variables with
//! `L, R ⪰ 0`, which covers weighted quadratic costs on vectors and on gain
//! matrices alike.
//!
//! LMI blocks store the upper triangle column by column: entry `(i, j)` with
//! `i ≤ j` sits at position `j (j + 1) / 2 + i`. Backends that expect the
//! scaled symmetric vectorization multiply off-diagonal entries by `√2`
//! when translating (see [`svec_scaled`]).
//!
//! Backends are selected by name (`clarabel`, `clarabel-epigraph`) and the
//! default name and tolerances can be overridden through the `AGC_BACKEND`,
//! `AGC_FEAS_TOL`, `AGC_GAP_TOL`, `AGC_MAX_ITER` and `AGC_ACCEPT_TOL`
//! environment variables.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::linalg::is_psd;

/// `constant + Σ coeff · x[var]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn var(v: usize) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: usize, coeff: f64) -> Self {
        Self {
            constant: 0.0,
            terms: vec![(v, coeff)],
        }
    }

    /// Adds `coeff · x[v]`; exact zeros are dropped.
    pub fn add(&mut self, v: usize, coeff: f64) -> &mut Self {
        if coeff != 0.0 {
            self.terms.push((v, coeff));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_expr(&mut self, other: &AffineExpr, scale: f64) -> &mut Self {
        self.constant += scale * other.constant;
        for &(v, c) in &other.terms {
            self.add(v, scale * c);
        }
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(v, c)| acc + c * x[v])
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(|&(v, _)| v).max()
    }
}

/// `Tr(Xᵀ L X R)` where `X` is `rows × cols` with the listed entries equal
/// to variables and all others zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceQuadratic {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, variable)`.
    pub entries: Vec<(usize, usize, usize)>,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

impl TraceQuadratic {
    /// `xᵀ W x` for a vector of variables.
    pub fn vector(vars: &[usize], weight: DMatrix<f64>) -> Self {
        Self {
            rows: vars.len(),
            cols: 1,
            entries: vars.iter().enumerate().map(|(r, &v)| (r, 0, v)).collect(),
            left: weight,
            right: DMatrix::from_element(1, 1, 1.0),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = x[v];
        }
        (m.transpose() * &self.left * &m * &self.right).trace()
    }

    /// Hessian contributions `(v1, v2, k)` with `Σ k x_v1 x_v2` equal to the
    /// form, over ordered pairs of entries.
    fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().flat_map(move |&(a, b, v1)| {
            self.entries.iter().filter_map(move |&(c, d, v2)| {
                let k = self.left[(a, c)] * self.right[(d, b)];
                (k != 0.0).then_some((v1, v2, k))
            })
        })
    }

    /// Affine residuals `r` with `Σ r² = Tr(Xᵀ L X R)`.
    fn residuals(&self) -> Vec<AffineExpr> {
        let fl = psd_factor(&self.left);
        let fr = psd_factor(&self.right);
        let mut out = Vec::with_capacity(fl.nrows() * fr.nrows());
        for p in 0..fl.nrows() {
            for q in 0..fr.nrows() {
                let mut e = AffineExpr::default();
                for &(a, b, v) in &self.entries {
                    e.add(v, fl[(p, a)] * fr[(q, b)]);
                }
                if !e.terms.is_empty() {
                    out.push(e);
                }
            }
        }
        out
    }
}

/// `F` with `FᵀF = m` for symmetric PSD `m`, dropping null directions.
fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..m.nrows())
        .filter(|&k| eig.eigenvalues[k] > 1e-14 * top.max(f64::MIN_POSITIVE))
        .collect();
    DMatrix::from_fn(keep.len(), m.ncols(), |r, c| {
        eig.eigenvalues[keep[r]].sqrt() * eig.eigenvectors[(c, keep[r])]
    })
}

/// `Σ quadratic terms + linear(x)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Objective {
    pub quadratic: Vec<TraceQuadratic>,
    pub linear: AffineExpr,
}

impl Objective {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.quadratic.iter().map(|q| q.eval(x)).sum::<f64>() + self.linear.eval(x)
    }
}

/// `‖vector(x)‖₂ ≤ bound(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocConstraint {
    pub bound: AffineExpr,
    pub vector: Vec<AffineExpr>,
}

/// `F(x) ⪰ 0` for a symmetric affine matrix map of size `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiConstraint {
    pub dim: usize,
    /// Upper triangle, column by column.
    pub entries: Vec<AffineExpr>,
}

impl LmiConstraint {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![AffineExpr::default(); dim * (dim + 1) / 2],
        }
    }

    pub fn index(i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        j * (j + 1) / 2 + i
    }

    /// Entry `(i, j)`; the lower triangle aliases the upper one.
    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut AffineExpr {
        &mut self.entries[Self::index(i, j)]
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.entries[Self::index(i, j)].eval(x)
        })
    }
}

/// Scaled symmetric vectorization: upper triangle column by column with
/// off-diagonal entries multiplied by `√2`, so that the Euclidean inner
/// product of two vectorizations equals the trace inner product.
pub fn svec_scaled(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in 0..=j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out.push(if i == j { v } else { v * std::f64::consts::SQRT_2 });
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub objective: Objective,
    /// `expr(x) = 0`.
    pub equalities: Vec<AffineExpr>,
    /// `expr(x) ≥ 0`.
    pub nonnegatives: Vec<AffineExpr>,
    pub socs: Vec<SocConstraint>,
    pub lmis: Vec<LmiConstraint>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConicError {
    #[error("variable index {index} out of range for {num_vars} variables")]
    VariableOutOfRange { index: usize, num_vars: usize },
    #[error("LMI {which} has {found} entries, expected {expected}")]
    LmiShape {
        which: usize,
        found: usize,
        expected: usize,
    },
    #[error("quadratic term {0} has inconsistent shape or an indefinite weight")]
    Quadratic(usize),
    #[error("unknown conic backend `{0}` (expected `clarabel` or `clarabel-epigraph`)")]
    UnknownBackend(String),
    #[error("backend rejected the program: {0}")]
    Backend(String),
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            ..Default::default()
        }
    }

    fn all_exprs(&self) -> impl Iterator<Item = &AffineExpr> {
        std::iter::once(&self.objective.linear)
            .chain(&self.equalities)
            .chain(&self.nonnegatives)
            .chain(self.socs.iter().flat_map(|s| std::iter::once(&s.bound).chain(&s.vector)))
            .chain(self.lmis.iter().flat_map(|l| &l.entries))
    }

    /// Checks variable indices, quadratic weights and LMI entry counts.
    pub fn check(&self) -> Result<(), ConicError> {
        let quad_vars = self
            .objective
            .quadratic
            .iter()
            .flat_map(|q| q.entries.iter().map(|&(_, _, v)| v));
        if let Some(index) = self
            .all_exprs()
            .filter_map(AffineExpr::max_var)
            .chain(quad_vars)
            .find(|&v| v >= self.num_vars)
        {
            return Err(ConicError::VariableOutOfRange {
                index,
                num_vars: self.num_vars,
            });
        }
        for (which, q) in self.objective.quadratic.iter().enumerate() {
            let shapes_ok = q.left.shape() == (q.rows, q.rows)
                && q.right.shape() == (q.cols, q.cols)
                && q.entries.iter().all(|&(r, c, _)| r < q.rows && c < q.cols);
            if !shapes_ok || !is_psd(&q.left) || !is_psd(&q.right) {
                return Err(ConicError::Quadratic(which));
            }
        }
        for (which, l) in self.lmis.iter().enumerate() {
            let expected = l.dim * (l.dim + 1) / 2;
            if l.entries.len() != expected {
                return Err(ConicError::LmiShape {
                    which,
                    found: l.entries.len(),
                    expected,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Inaccurate,
    Failure,
}

impl SolveStatus {
    pub fn has_primal(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Inaccurate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub backend: String,
    pub raw_status: String,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    /// Present iff `status` is optimal or inaccurate.
    pub primal: Option<Vec<f64>>,
    /// Objective evaluated at the primal point, including constants.
    pub objective: f64,
    pub diagnostics: SolverDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Primal/dual feasibility and duality-gap tolerance handed to the solver.
    pub feasibility: f64,
    pub gap: f64,
    pub max_iter: u32,
    /// Threshold for the independent residual check of a returned point.
    pub acceptance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            feasibility: 1e-8,
            gap: 1e-8,
            max_iter: 200,
            acceptance: 1e-6,
        }
    }
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Option<T> {
    std::env::var(name).ok().and_then(|v| v.trim().parse().ok())
}

impl Tolerances {
    /// Defaults overridden by `AGC_FEAS_TOL`, `AGC_GAP_TOL`, `AGC_MAX_ITER`
    /// and `AGC_ACCEPT_TOL` when set.
    pub fn from_env() -> Self {
        let d = Self::default();
        Self {
            feasibility: env_parse("AGC_FEAS_TOL").unwrap_or(d.feasibility),
            gap: env_parse("AGC_GAP_TOL").unwrap_or(d.gap),
            max_iter: env_parse("AGC_MAX_ITER").unwrap_or(d.max_iter),
            acceptance: env_parse("AGC_ACCEPT_TOL").unwrap_or(d.acceptance),
        }
    }
}

pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, program: &ConicProgram, tol: &Tolerances) -> Result<ConicSolution, ConicError>;
}

pub const DEFAULT_BACKEND: &str = "clarabel";

pub fn backend_by_name(name: &str) -> Result<Box<dyn ConicBackend>, ConicError> {
    match name {
        "clarabel" => Ok(Box::new(Clarabel { epigraph: false })),
        "clarabel-epigraph" => Ok(Box::new(Clarabel { epigraph: true })),
        other => Err(ConicError::UnknownBackend(other.to_string())),
    }
}

/// Backend named by `AGC_BACKEND`, or the default.
pub fn backend_from_env() -> Result<Box<dyn ConicBackend>, ConicError> {
    let name = std::env::var("AGC_BACKEND").unwrap_or_else(|_| DEFAULT_BACKEND.to_string());
    backend_by_name(name.trim())
}

pub fn solve(program: &ConicProgram, tol: &Tolerances) -> Result<ConicSolution, ConicError> {
    backend_by_name(DEFAULT_BACKEND)?.solve(program, tol)
}

/// Clarabel interior-point solver. With `epigraph`, the quadratic objective
/// is moved into a second-order cone on an auxiliary epigraph variable.
#[derive(Debug, Clone, Copy)]
pub struct Clarabel {
    pub epigraph: bool,
}

/// Rows of `s = b - A x` in the order they are added.
#[derive(Default)]
struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    /// Adds a row with `s = scale · expr(x)`.
    fn push(&mut self, expr: &AffineExpr, scale: f64) {
        let row = self.b.len();
        for &(var, c) in &expr.terms {
            self.i.push(row);
            self.j.push(var);
            self.v.push(-scale * c);
        }
        self.b.push(scale * expr.constant);
    }
}

impl ConicBackend for Clarabel {
    fn name(&self) -> &'static str {
        if self.epigraph {
            "clarabel-epigraph"
        } else {
            "clarabel"
        }
    }

    fn solve(&self, program: &ConicProgram, tol: &Tolerances) -> Result<ConicSolution, ConicError> {
        program.check()?;
        let started = Instant::now();
        let n = program.num_vars;
        if n == 0 {
            return Ok(trivial_solution(program, self.name()));
        }
        let epi = n; // index of the epigraph variable when used
        let total_vars = if self.epigraph { n + 1 } else { n };

        let mut p_i = Vec::new();
        let mut p_j = Vec::new();
        let mut p_v = Vec::new();
        let mut q = vec![0.0; total_vars];
        for &(v, c) in &program.objective.linear.terms {
            q[v] += c;
        }
        if self.epigraph {
            q[epi] += 1.0;
        } else {
            // Clarabel takes ½ xᵀPx with P upper triangular.
            for term in &program.objective.quadratic {
                for (a, b, k) in term.pairs() {
                    if a <= b {
                        p_i.push(a);
                        p_j.push(b);
                        p_v.push(2.0 * k);
                    }
                }
            }
        }
        let p = CscMatrix::new_from_triplets(total_vars, total_vars, p_i, p_j, p_v);

        let mut rows = Rows::default();
        let mut cones = Vec::new();
        for e in &program.equalities {
            rows.push(e, 1.0);
        }
        if !program.equalities.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(program.equalities.len()));
        }
        for e in &program.nonnegatives {
            rows.push(e, 1.0);
        }
        if !program.nonnegatives.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(program.nonnegatives.len()));
        }
        for soc in &program.socs {
            rows.push(&soc.bound, 1.0);
            for e in &soc.vector {
                rows.push(e, 1.0);
            }
            cones.push(SupportedConeT::SecondOrderConeT(1 + soc.vector.len()));
        }
        for lmi in &program.lmis {
            for j in 0..lmi.dim {
                for i in 0..=j {
                    let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                    rows.push(&lmi.entries[LmiConstraint::index(i, j)], scale);
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(lmi.dim));
        }
        let residuals: Vec<AffineExpr> = if self.epigraph {
            program.objective.quadratic.iter().flat_map(TraceQuadratic::residuals).collect()
        } else {
            Vec::new()
        };
        if !residuals.is_empty() {
            // Σ r² ≤ t  ⇔  ‖(r, (t - 1)/2)‖ ≤ (t + 1)/2
            let mut upper = AffineExpr::term(epi, 0.5);
            upper.add_constant(0.5);
            rows.push(&upper, 1.0);
            for r in &residuals {
                rows.push(r, 1.0);
            }
            let mut lower = AffineExpr::term(epi, 0.5);
            lower.add_constant(-0.5);
            rows.push(&lower, 1.0);
            cones.push(SupportedConeT::SecondOrderConeT(residuals.len() + 2));
        } else if self.epigraph {
            rows.push(&AffineExpr::var(epi), 1.0);
            cones.push(SupportedConeT::NonnegativeConeT(1));
        }

        let m = rows.b.len();
        let a = CscMatrix::new_from_triplets(m, total_vars, rows.i, rows.j, rows.v);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(tol.feasibility)
            .tol_gap_abs(tol.gap)
            .tol_gap_rel(tol.gap)
            .max_iter(tol.max_iter)
            .build()
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &rows.b, &cones, settings)
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;

        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::Inaccurate,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            _ => SolveStatus::Failure,
        };
        let primal = status.has_primal().then(|| sol.x[..n].to_vec());
        let objective = primal
            .as_ref()
            .map_or(f64::NAN, |x| program.objective.eval(x));
        Ok(ConicSolution {
            status,
            primal,
            objective,
            diagnostics: SolverDiagnostics {
                backend: self.name().to_string(),
                raw_status: format!("{:?}", sol.status),
                iterations: sol.iterations,
                primal_residual: sol.r_prim,
                dual_residual: sol.r_dual,
                solve_seconds: started.elapsed().as_secs_f64(),
            },
        })
    }
}

fn trivial_solution(program: &ConicProgram, backend: &str) -> ConicSolution {
    let x: Vec<f64> = Vec::new();
    let feasible = program.equalities.iter().all(|e| e.constant == 0.0)
        && program.nonnegatives.iter().all(|e| e.constant >= 0.0)
        && program.socs.iter().all(|s| {
            s.vector.iter().map(|e| e.constant * e.constant).sum::<f64>().sqrt() <= s.bound.constant
        })
        && program
            .lmis
            .iter()
            .all(|l| min_eigenvalue(&l.eval(&x)) >= 0.0);
    ConicSolution {
        status: if feasible {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        },
        primal: feasible.then(Vec::new),
        objective: if feasible { program.objective.eval(&x) } else { f64::NAN },
        diagnostics: SolverDiagnostics {
            backend: backend.to_string(),
            raw_status: "NoVariables".to_string(),
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            solve_seconds: 0.0,
        },
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Constraint residuals of a point, computed without the solver.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `|expr(x)|` per equality.
    pub equalities: Vec<f64>,
    /// `expr(x)` per nonnegativity row (negative means violated).
    pub nonnegatives: Vec<f64>,
    /// `bound(x) - ‖vector(x)‖` per cone (negative means violated).
    pub soc_slacks: Vec<f64>,
    /// Smallest eigenvalue per LMI.
    pub lmi_min_eigenvalues: Vec<f64>,
    /// Frobenius norm per LMI block, for the relative threshold.
    pub lmi_norms: Vec<f64>,
}

impl ResidualReport {
    /// Human-readable description of every residual beyond `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (k, &r) in self.equalities.iter().enumerate() {
            if r > tol {
                out.push(format!("equality {k}: residual {r:.3e}"));
            }
        }
        for (k, &r) in self.nonnegatives.iter().enumerate() {
            if r < -tol {
                out.push(format!("inequality {k}: value {r:.3e}"));
            }
        }
        for (k, &r) in self.soc_slacks.iter().enumerate() {
            if r < -tol {
                out.push(format!("cone {k}: slack {r:.3e}"));
            }
        }
        for (k, (&ev, &norm)) in self.lmi_min_eigenvalues.iter().zip(&self.lmi_norms).enumerate() {
            if ev < -tol * (1.0 + norm) {
                out.push(format!("LMI {k}: min eigenvalue {ev:.3e}"));
            }
        }
        out
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.flagged(tol).is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.equalities.is_empty()
            && self.nonnegatives.is_empty()
            && self.soc_slacks.is_empty()
            && self.lmi_min_eigenvalues.is_empty()
    }
}

pub fn verify_solution(program: &ConicProgram, x: &[f64]) -> ResidualReport {
    ResidualReport {
        equalities: program.equalities.iter().map(|e| e.eval(x).abs()).collect(),
        nonnegatives: program.nonnegatives.iter().map(|e| e.eval(x)).collect(),
        soc_slacks: program
            .socs
            .iter()
            .map(|s| {
                let norm = s.vector.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
                s.bound.eval(x) - norm
            })
            .collect(),
        lmi_min_eigenvalues: program
            .lmis
            .iter()
            .map(|l| min_eigenvalue(&l.eval(x)))
            .collect(),
        lmi_norms: program.lmis.iter().map(|l| l.eval(x).norm()).collect(),
    }
}

//! Problem instances: dynamics, disturbance support, constraints, costs and
//! the information graph.
//!
//! [`InstanceFile`] is the on-disk form. It accepts a few shorthands
//! (constant dynamics, `{"scaled_identity": s}`, `{"diag": [...]}`, omitted
//! `M` and `F_w`). [`validate_instance`] checks every invariant and produces a
//! [`ProblemInstance`]; [`ProblemInstance::to_file`] writes the canonical
//! form with every matrix explicit and every dynamics matrix listed per step.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layout::{Layout, SubsystemDims};
use crate::linalg;
use crate::serde_matrix::{from_rows, to_rows};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("field `{field}`: {message}")]
    Dimension { field: &'static str, message: String },
    #[error("{0} not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("{0} not symmetric")]
    NotSymmetric(&'static str),
    #[error("{0} not positive semidefinite")]
    NotPsd(&'static str),
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("information graph: {0}")]
    Graph(String),
}

fn dim_err(field: &'static str, message: impl Into<String>) -> ModelError {
    ModelError::Dimension {
        field,
        message: message.into(),
    }
}

/// Matrix as written in an instance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Rows(Vec<Vec<f64>>),
    ScaledIdentity { scaled_identity: f64 },
    Diag { diag: Vec<f64> },
}

impl MatrixInput {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixInput::Rows(to_rows(m))
    }

    fn resolve(
        &self,
        field: &'static str,
        rows: Option<usize>,
        cols: usize,
    ) -> Result<DMatrix<f64>, ModelError> {
        let m = match self {
            MatrixInput::Rows(r) => from_rows(r, cols).map_err(|e| dim_err(field, e))?,
            MatrixInput::ScaledIdentity { scaled_identity } => {
                DMatrix::identity(cols, cols) * *scaled_identity
            }
            MatrixInput::Diag { diag } => DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        };
        let expected_rows = rows.unwrap_or(m.nrows());
        if m.nrows() != expected_rows || m.ncols() != cols {
            return Err(dim_err(
                field,
                format!(
                    "expected {expected_rows}x{cols}, found {}x{}",
                    m.nrows(),
                    m.ncols()
                ),
            ));
        }
        Ok(m)
    }
}

impl From<&DMatrix<f64>> for MatrixInput {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixInput::from_matrix(m)
    }
}

/// A dynamics matrix that is either constant or given per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSeries {
    Constant(MatrixInput),
    PerStep(Vec<MatrixInput>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform on the ellipsoid `{w : wᵀ Σ⁻¹ w ≤ 1}`.
    #[default]
    UniformEllipsoid,
}

/// On-disk instance document. Subsystem indices in `E_I` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    #[serde(alias = "N")]
    pub subsystems: usize,
    #[serde(alias = "T")]
    pub horizon: usize,
    pub dims: Vec<SubsystemDims>,
    #[serde(rename = "A")]
    pub a: TimeSeries,
    #[serde(rename = "B")]
    pub b: TimeSeries,
    #[serde(rename = "E_I")]
    pub info_edges: Vec<[usize; 2]>,
    #[serde(rename = "Sigma")]
    pub sigma: MatrixInput,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub second_moment: Option<MatrixInput>,
    #[serde(rename = "F_x")]
    pub f_x: MatrixInput,
    #[serde(rename = "F_u")]
    pub f_u: MatrixInput,
    #[serde(rename = "F_w", default, skip_serializing_if = "Option::is_none")]
    pub f_w: Option<MatrixInput>,
    pub g: Vec<f64>,
    #[serde(rename = "R_x")]
    pub r_x: MatrixInput,
    #[serde(rename = "R_u")]
    pub r_u: MatrixInput,
    #[serde(default)]
    pub distribution: Distribution,
}

/// Time-varying system matrices, one entry per step `t = 0..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceModel {
    /// Ellipsoid shape of the disturbance-trajectory support.
    pub sigma: DMatrix<f64>,
    /// Lower-triangular factor with `G Gᵀ = Σ`.
    pub sigma_factor: DMatrix<f64>,
    /// Second moment `E[w wᵀ]`.
    pub second_moment: DMatrix<f64>,
    pub distribution: Distribution,
}

/// Rows of `F_x x + F_u u + F_w w ≤ g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintData {
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    pub f_w: DMatrix<f64>,
    pub g: DVector<f64>,
}

impl ConstraintData {
    pub fn rows(&self) -> usize {
        self.g.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostData {
    pub r_x: DMatrix<f64>,
    pub r_u: DMatrix<f64>,
}

/// Directed information graph over zero-based subsystem indices. An edge
/// `(i, j)` means subsystem `j` observes subsystem `i`'s local state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl InfoGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, ModelError> {
        let edges: BTreeSet<_> = edges.into_iter().collect();
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(ModelError::Graph(format!(
                "edge ({}, {}) references a subsystem outside 1..={n}",
                i + 1,
                j + 1
            )));
        }
        if let Some(i) = (0..n).find(|&i| !edges.contains(&(i, i))) {
            return Err(ModelError::Graph(format!(
                "subsystem {} must observe its own state: add edge ({}, {})",
                i + 1,
                i + 1,
                i + 1
            )));
        }
        Ok(Self { n, edges })
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        Self { n, edges }
    }

    pub fn vertices(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn contains(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// `V_I^-(i)`: subsystems whose states `i` observes.
    pub fn in_neighbors(&self, i: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|&&(_, to)| to == i)
            .map(|&(from, _)| from)
            .collect()
    }
}

/// A validated problem instance. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    layout: Layout,
    dynamics: Dynamics,
    disturbance: DisturbanceModel,
    constraints: ConstraintData,
    cost: CostData,
    info_graph: InfoGraph,
}

impl ProblemInstance {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }
    pub fn horizon(&self) -> usize {
        self.layout.horizon()
    }
    pub fn subsystems(&self) -> usize {
        self.layout.subsystems()
    }
    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }
    pub fn disturbance(&self) -> &DisturbanceModel {
        &self.disturbance
    }
    pub fn constraints(&self) -> &ConstraintData {
        &self.constraints
    }
    pub fn cost(&self) -> &CostData {
        &self.cost
    }
    pub fn info_graph(&self) -> &InfoGraph {
        &self.info_graph
    }

    /// Block `(i, j)` of `A(t)`.
    pub fn a_block(&self, t: usize, i: usize, j: usize) -> DMatrix<f64> {
        let l = &self.layout;
        let (r, c) = (l.local_state(i), l.local_state(j));
        self.dynamics.a[t]
            .view((r.start, c.start), (r.len(), c.len()))
            .into_owned()
    }

    /// Block `(i, j)` of `B(t)`.
    pub fn b_block(&self, t: usize, i: usize, j: usize) -> DMatrix<f64> {
        let l = &self.layout;
        let (r, c) = (l.local_state(i), l.local_input(j));
        self.dynamics.b[t]
            .view((r.start, c.start), (r.len(), c.len()))
            .into_owned()
    }

    /// Returns a copy with a different constraint set, re-validated.
    pub fn with_constraints(&self, constraints: ConstraintData) -> Result<Self, ModelError> {
        let mut file = self.to_file();
        file.f_x = (&constraints.f_x).into();
        file.f_u = (&constraints.f_u).into();
        file.f_w = Some((&constraints.f_w).into());
        file.g = constraints.g.as_slice().to_vec();
        validate_instance(file)
    }

    /// Canonical file form: explicit matrices, dynamics listed per step.
    pub fn to_file(&self) -> InstanceFile {
        let per_step = |ms: &[DMatrix<f64>]| TimeSeries::PerStep(ms.iter().map(MatrixInput::from).collect());
        InstanceFile {
            subsystems: self.subsystems(),
            horizon: self.horizon(),
            dims: self.layout.dims().to_vec(),
            a: per_step(&self.dynamics.a),
            b: per_step(&self.dynamics.b),
            info_edges: self
                .info_graph
                .edges
                .iter()
                .map(|&(i, j)| [i + 1, j + 1])
                .collect(),
            sigma: (&self.disturbance.sigma).into(),
            second_moment: Some((&self.disturbance.second_moment).into()),
            f_x: (&self.constraints.f_x).into(),
            f_u: (&self.constraints.f_u).into(),
            f_w: Some((&self.constraints.f_w).into()),
            g: self.constraints.g.as_slice().to_vec(),
            r_x: (&self.cost.r_x).into(),
            r_u: (&self.cost.r_u).into(),
            distribution: self.disturbance.distribution,
        }
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("instance serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

impl fmt::Display for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} subsystems, horizon {}, N_x = {}, N_u = {}, {} constraint rows",
            self.subsystems(),
            self.horizon(),
            self.layout.state_len(),
            self.layout.input_len(),
            self.constraints.rows()
        )
    }
}

/// Second moment of the uniform law on `{w : wᵀ Σ⁻¹ w ≤ 1}` in dimension `n`.
pub fn default_second_moment(sigma: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    sigma / (n as f64 + 2.0)
}

fn expand_series(
    series: &TimeSeries,
    field: &'static str,
    horizon: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    match series {
        TimeSeries::Constant(m) => {
            let m = m.resolve(field, Some(rows), cols)?;
            Ok(vec![m; horizon])
        }
        TimeSeries::PerStep(list) => {
            if list.len() != horizon {
                return Err(dim_err(
                    field,
                    format!("expected {horizon} per-step matrices, found {}", list.len()),
                ));
            }
            list.iter().map(|m| m.resolve(field, Some(rows), cols)).collect()
        }
    }
}

fn symmetric(m: DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>, ModelError> {
    if linalg::is_symmetric(&m) {
        Ok(m)
    } else {
        Err(ModelError::NotSymmetric(name))
    }
}

/// Checks every instance invariant and canonicalizes the dynamics.
pub fn validate_instance(raw: InstanceFile) -> Result<ProblemInstance, ModelError> {
    let n = raw.subsystems;
    if n == 0 {
        return Err(dim_err("subsystems", "at least one subsystem is required"));
    }
    if raw.horizon < 1 {
        return Err(ModelError::Horizon);
    }
    if raw.dims.len() != n {
        return Err(dim_err(
            "dims",
            format!("expected {n} entries, found {}", raw.dims.len()),
        ));
    }
    if let Some(k) = raw.dims.iter().position(|d| d.state == 0 || d.input == 0) {
        return Err(dim_err(
            "dims",
            format!("subsystem {} has a zero dimension", k + 1),
        ));
    }
    let layout = Layout::new(raw.dims.clone(), raw.horizon);
    let (n_x, n_u) = (layout.n_x(), layout.n_u());
    let (big_x, big_u) = (layout.state_len(), layout.input_len());

    let a = expand_series(&raw.a, "A", raw.horizon, n_x, n_x)?;
    let b = expand_series(&raw.b, "B", raw.horizon, n_x, n_u)?;

    if let Some([i, j]) = raw
        .info_edges
        .iter()
        .find(|[i, j]| !(1..=n).contains(i) || !(1..=n).contains(j))
    {
        return Err(ModelError::Graph(format!(
            "edge [{i}, {j}] references a subsystem outside 1..={n}"
        )));
    }
    let info_graph = InfoGraph::new(n, raw.info_edges.iter().map(|&[i, j]| (i - 1, j - 1)))?;

    let sigma = symmetric(raw.sigma.resolve("Sigma", Some(big_x), big_x)?, "Sigma")?;
    let sigma_factor =
        linalg::cholesky_factor(&sigma).ok_or(ModelError::NotPositiveDefinite("Sigma"))?;
    let second_moment = match &raw.second_moment {
        Some(m) => symmetric(m.resolve("M", Some(big_x), big_x)?, "M")?,
        None => default_second_moment(&sigma, big_x),
    };
    if linalg::cholesky_factor(&second_moment).is_none() {
        return Err(ModelError::NotPositiveDefinite("M"));
    }

    let m = raw.g.len();
    let f_x = raw.f_x.resolve("F_x", Some(m), big_x)?;
    let f_u = raw.f_u.resolve("F_u", Some(m), big_u)?;
    let f_w = match &raw.f_w {
        Some(given) => given.resolve("F_w", Some(m), big_x)?,
        None => DMatrix::zeros(m, big_x),
    };

    let r_x = symmetric(raw.r_x.resolve("R_x", Some(big_x), big_x)?, "R_x")?;
    let r_u = symmetric(raw.r_u.resolve("R_u", Some(big_u), big_u)?, "R_u")?;
    if !linalg::is_psd(&r_x) {
        return Err(ModelError::NotPsd("R_x"));
    }
    if !linalg::is_psd(&r_u) {
        return Err(ModelError::NotPsd("R_u"));
    }

    Ok(ProblemInstance {
        layout,
        dynamics: Dynamics { a, b },
        disturbance: DisturbanceModel {
            sigma,
            sigma_factor,
            second_moment,
            distribution: raw.distribution,
        },
        constraints: ConstraintData {
            f_x,
            f_u,
            f_w,
            g: DVector::from_vec(raw.g),
        },
        cost: CostData { r_x, r_u },
        info_graph,
    })
}

/// Parses an instance document without validating it.
pub fn parse_instance(text: &str, origin: &str) -> Result<InstanceFile, ModelError> {
    serde_json::from_str(text).map_err(|e| ModelError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<ProblemInstance, ModelError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: shown.clone(),
        source,
    })?;
    validate_instance(parse_instance(&text, &shown)?)
}

pub fn save_instance(instance: &ProblemInstance, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&instance.to_file()).expect("instance serializes");
    std::fs::write(path, text + "\n").map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn chain2_with_identity_sigma_is_accepted() {
        let mut file = fixtures::chain2_nonclassical_file();
        file.sigma = MatrixInput::ScaledIdentity { scaled_identity: 1.0 };
        file.second_moment = None;
        let inst = validate_instance(file).unwrap();
        assert_eq!(inst.layout().state_len(), 6);
        assert_eq!(inst.layout().input_len(), 4);
        let g = &inst.disturbance().sigma_factor;
        assert!((g * g.transpose() - DMatrix::<f64>::identity(6, 6)).amax() < 1e-15);
        assert!((&inst.disturbance().second_moment - DMatrix::<f64>::identity(6, 6) / 8.0).amax() == 0.0);
    }

    #[test]
    fn zero_sigma_rejected() {
        let mut file = fixtures::chain2_nonclassical_file();
        file.sigma = MatrixInput::ScaledIdentity { scaled_identity: 0.0 };
        let err = validate_instance(file).unwrap_err();
        assert_eq!(err.to_string(), "Sigma not positive definite");
    }

    #[test]
    fn constraint_row_mismatch_rejected() {
        let mut file = fixtures::chain2_nonclassical_file();
        file.f_x = MatrixInput::Rows(vec![vec![0.0; 6]; 3]);
        file.f_u = MatrixInput::Rows(vec![vec![0.0; 4]; 2]);
        file.f_w = None;
        file.g = vec![1.0, 1.0];
        let err = validate_instance(file).unwrap_err();
        assert!(matches!(err, ModelError::Dimension { field: "F_x", .. }), "{err}");
    }

    #[test]
    fn horizon_zero_rejected() {
        let mut file = fixtures::chain2_nonclassical_file();
        file.horizon = 0;
        assert!(matches!(validate_instance(file), Err(ModelError::Horizon)));
    }

    #[test]
    fn indefinite_cost_rejected() {
        let mut file = fixtures::chain2_nonclassical_file();
        file.r_u = MatrixInput::Diag {
            diag: vec![1.0, -1.0, 1.0, 1.0],
        };
        assert!(matches!(validate_instance(file), Err(ModelError::NotPsd("R_u"))));
    }

    #[test]
    fn missing_self_loop_rejected() {
        let mut file = fixtures::chain2_nonclassical_file();
        file.info_edges = vec![[1, 1], [1, 2]];
        let err = validate_instance(file).unwrap_err();
        assert!(err.to_string().contains("subsystem 2 must observe its own state"));
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let mut file = fixtures::chain2_nonclassical_file();
        file.info_edges.push([3, 1]);
        assert!(matches!(validate_instance(file), Err(ModelError::Graph(_))));
    }

    #[test]
    fn missing_horizon_names_the_field() {
        let mut value = serde_json::to_value(fixtures::chain2_nonclassical_file()).unwrap();
        value.as_object_mut().unwrap().remove("horizon");
        let text = serde_json::to_string_pretty(&value).unwrap();
        let err = parse_instance(&text, "chain2.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing field `horizon`"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn constant_dynamics_broadcast_is_bit_identical() {
        let constant = fixtures::chain2_nonclassical_file();
        let mut listed = constant.clone();
        let TimeSeries::Constant(a) = &constant.a else {
            panic!("fixture uses constant A")
        };
        listed.a = TimeSeries::PerStep(vec![a.clone(); constant.horizon]);
        let x = serde_json::to_vec(&validate_instance(constant).unwrap().to_file()).unwrap();
        let y = serde_json::to_vec(&validate_instance(listed).unwrap().to_file()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn save_then_load_is_identity() {
        let inst = fixtures::chain2_nonclassical();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain2.json");
        save_instance(&inst, &path).unwrap();
        let back = load_instance(&path).unwrap();
        assert_eq!(back, inst);
        assert_eq!(back.content_hash(), inst.content_hash());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_instance("/nonexistent/instance.json").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/instance.json"));
    }

    #[test]
    fn default_second_moment_values() {
        let one = default_second_moment(&(DMatrix::identity(1, 1) * 4.0), 1);
        assert!((one[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
        let two = default_second_moment(&DMatrix::identity(2, 2), 2);
        assert_eq!(two, DMatrix::identity(2, 2) / 4.0);
    }
}

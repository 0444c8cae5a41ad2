//! Information decomposition: splits each subsystem's observed neighbors into
//! a locally nested part `N(i)`, whose disturbances it can reconstruct, and an
//! information-coupling part `C(i)`. Also builds the block sparsity patterns
//! of the policy gains and the contract orientation matrix.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::layout::Layout;
use crate::model::ProblemInstance;

/// Physical coupling read off the block sparsity of `A(t)` and `B(t)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingGraphs {
    a_in: Vec<BTreeSet<usize>>,
    b_in: Vec<BTreeSet<usize>>,
}

impl CouplingGraphs {
    /// `V_A^-(i)`: subsystems `j` with some nonzero `A_ij(t)`.
    pub fn a_in(&self, i: usize) -> &BTreeSet<usize> {
        &self.a_in[i]
    }

    /// `V_B^-(i)`: subsystems `j` with some nonzero `B_ij(t)`.
    pub fn b_in(&self, i: usize) -> &BTreeSet<usize> {
        &self.b_in[i]
    }

    /// Edge set `E_A` as `(from, to)` pairs.
    pub fn a_edges(&self) -> BTreeSet<(usize, usize)> {
        edges_of(&self.a_in)
    }

    pub fn b_edges(&self) -> BTreeSet<(usize, usize)> {
        edges_of(&self.b_in)
    }
}

fn edges_of(ins: &[BTreeSet<usize>]) -> BTreeSet<(usize, usize)> {
    ins.iter()
        .enumerate()
        .flat_map(|(i, set)| set.iter().map(move |&j| (j, i)))
        .collect()
}

/// Structural nonzeros only: any entry that is not exactly zero counts.
pub fn build_coupling_graphs(instance: &ProblemInstance) -> CouplingGraphs {
    let n = instance.subsystems();
    let horizon = instance.horizon();
    let mut a_in = vec![BTreeSet::new(); n];
    let mut b_in = vec![BTreeSet::new(); n];
    for i in 0..n {
        for j in 0..n {
            if (0..horizon).any(|t| instance.a_block(t, i, j).iter().any(|&v| v != 0.0)) {
                a_in[i].insert(j);
            }
            if (0..horizon).any(|t| instance.b_block(t, i, j).iter().any(|&v| v != 0.0)) {
                b_in[i].insert(j);
            }
        }
    }
    CouplingGraphs { a_in, b_in }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoDecomposition {
    nested: Vec<BTreeSet<usize>>,
    coupled: Vec<BTreeSet<usize>>,
    coupled_set: BTreeSet<usize>,
    coupling_edges: BTreeSet<(usize, usize)>,
    coupled_state_dim: usize,
    projection: Vec<usize>,
}

impl InfoDecomposition {
    pub fn subsystems(&self) -> usize {
        self.nested.len()
    }

    /// `N(i)`.
    pub fn nested(&self, i: usize) -> &BTreeSet<usize> {
        &self.nested[i]
    }

    /// `C(i)`.
    pub fn coupled(&self, i: usize) -> &BTreeSet<usize> {
        &self.coupled[i]
    }

    /// `C`, the union of all `C(i)`.
    pub fn coupled_set(&self) -> &BTreeSet<usize> {
        &self.coupled_set
    }

    /// `E_C = {(j, i) ∈ E_I : j ∈ C(i)}`.
    pub fn coupling_edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.coupling_edges
    }

    /// `V_C^+(i)`: subsystems for which `i` is information-coupling.
    pub fn coupling_out(&self, i: usize) -> BTreeSet<usize> {
        self.coupling_edges
            .iter()
            .filter(|&&(from, _)| from == i)
            .map(|&(_, to)| to)
            .collect()
    }

    /// `n_x^C`.
    pub fn coupled_state_dim(&self) -> usize {
        self.coupled_state_dim
    }

    /// `N_x^C`, the length of the coupled-state trajectory.
    pub fn coupled_len(&self) -> usize {
        self.projection.len()
    }

    /// State-trajectory index selected by each row of `Π_C`.
    pub fn projection(&self) -> &[usize] {
        &self.projection
    }

    /// `Π_C` as an explicit `N_x^C × N_x` selection matrix.
    pub fn projection_matrix(&self, state_len: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.projection.len(), state_len);
        for (r, &c) in self.projection.iter().enumerate() {
            p[(r, c)] = 1.0;
        }
        p
    }

    pub fn is_partially_nested(&self) -> bool {
        self.coupled_set.is_empty()
    }

    pub fn summary(&self) -> DecompositionSummary {
        let one_based = |s: &BTreeSet<usize>| s.iter().map(|&k| k + 1).collect::<Vec<_>>();
        DecompositionSummary {
            subsystems: (0..self.subsystems())
                .map(|i| SubsystemSummary {
                    subsystem: i + 1,
                    nested: one_based(&self.nested[i]),
                    coupled: one_based(&self.coupled[i]),
                })
                .collect(),
            coupled_set: one_based(&self.coupled_set),
            coupling_edges: self
                .coupling_edges
                .iter()
                .map(|&(a, b)| [a + 1, b + 1])
                .collect(),
            coupled_state_dim: self.coupled_state_dim,
            coupled_len: self.coupled_len(),
            partially_nested: self.is_partially_nested(),
        }
    }
}

/// Serializable decomposition with 1-based subsystem labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct DecompositionSummary {
    pub subsystems: Vec<SubsystemSummary>,
    pub coupled_set: Vec<usize>,
    pub coupling_edges: Vec<[usize; 2]>,
    pub coupled_state_dim: usize,
    pub coupled_len: usize,
    pub partially_nested: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct SubsystemSummary {
    pub subsystem: usize,
    pub nested: Vec<usize>,
    pub coupled: Vec<usize>,
}

/// Formats a 1-based set, `∅` when empty.
pub fn format_set(items: &[usize]) -> String {
    if items.is_empty() {
        "∅".to_string()
    } else {
        let parts: Vec<String> = items.iter().map(|k| k.to_string()).collect();
        format!("{{{}}}", parts.join(", "))
    }
}

impl fmt::Display for DecompositionSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.subsystems {
            writeln!(
                f,
                "subsystem {}: N({}) = {}, C({}) = {}",
                s.subsystem,
                s.subsystem,
                format_set(&s.nested),
                s.subsystem,
                format_set(&s.coupled)
            )?;
        }
        let edges: Vec<String> = self
            .coupling_edges
            .iter()
            .map(|[a, b]| format!("({a}, {b})"))
            .collect();
        if edges.is_empty() {
            writeln!(f, "E_C = ∅")?;
        } else {
            writeln!(f, "E_C = {{{}}}", edges.join(", "))?;
        }
        writeln!(
            f,
            "n_x^C = {}, N_x^C = {}",
            self.coupled_state_dim, self.coupled_len
        )?;
        let verdict = if self.partially_nested {
            "partially nested"
        } else {
            "nonclassical"
        };
        write!(f, "C = {}; {verdict}", format_set(&self.coupled_set))
    }
}

/// Applies the local nesting conditions: `j ∈ N(i)` iff `j` is observed by
/// `i`, every state driving `j` is observed by `i`, and every subsystem whose
/// input drives `j` observes nothing `i` does not.
pub fn compute_decomposition(instance: &ProblemInstance, graphs: &CouplingGraphs) -> InfoDecomposition {
    let n = instance.subsystems();
    let info = instance.info_graph();
    let observed: Vec<BTreeSet<usize>> = (0..n).map(|i| info.in_neighbors(i)).collect();

    let mut nested = Vec::with_capacity(n);
    let mut coupled = Vec::with_capacity(n);
    for i in 0..n {
        let vi = &observed[i];
        let n_i: BTreeSet<usize> = vi
            .iter()
            .copied()
            .filter(|&j| {
                graphs.a_in(j).is_subset(vi)
                    && graphs.b_in(j).iter().all(|&k| observed[k].is_subset(vi))
            })
            .collect();
        let c_i: BTreeSet<usize> = vi.difference(&n_i).copied().collect();
        nested.push(n_i);
        coupled.push(c_i);
    }

    let coupled_set: BTreeSet<usize> = coupled.iter().flatten().copied().collect();
    let coupling_edges = info
        .edges()
        .iter()
        .copied()
        .filter(|&(j, i)| coupled[i].contains(&j))
        .collect();

    let layout = instance.layout();
    let coupled_state_dim = coupled_set.iter().map(|&j| layout.state_dim(j)).sum();
    let mut projection = Vec::with_capacity(coupled_state_dim * (layout.horizon() + 1));
    for t in 0..=layout.horizon() {
        for &j in &coupled_set {
            projection.extend(layout.state_range(t, j));
        }
    }

    InfoDecomposition {
        nested,
        coupled,
        coupled_set,
        coupling_edges,
        coupled_state_dim,
        projection,
    }
}

/// Block-level free/zero mask over a matrix partitioned into time blocks and,
/// inside each, subsystem blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    time_rows: usize,
    time_cols: usize,
    row_dims: Vec<usize>,
    col_dims: Vec<usize>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
    mask: Vec<bool>,
}

fn prefix_offsets(dims: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    dims.iter()
        .map(|&d| {
            let o = acc;
            acc += d;
            o
        })
        .collect()
}

impl SparsityPattern {
    pub fn from_fn(
        time_rows: usize,
        time_cols: usize,
        row_dims: Vec<usize>,
        col_dims: Vec<usize>,
        free: impl Fn(usize, usize, usize, usize) -> bool,
    ) -> Self {
        let (nr, nc) = (row_dims.len(), col_dims.len());
        let mut mask = Vec::with_capacity(time_rows * time_cols * nr * nc);
        for t in 0..time_rows {
            for s in 0..time_cols {
                for i in 0..nr {
                    for j in 0..nc {
                        mask.push(free(t, s, i, j));
                    }
                }
            }
        }
        Self {
            time_rows,
            time_cols,
            row_offsets: prefix_offsets(&row_dims),
            col_offsets: prefix_offsets(&col_dims),
            row_dims,
            col_dims,
            mask,
        }
    }

    /// `(time_rows, time_cols, subsystem_rows, subsystem_cols)`.
    pub fn grid(&self) -> (usize, usize, usize, usize) {
        (
            self.time_rows,
            self.time_cols,
            self.row_dims.len(),
            self.col_dims.len(),
        )
    }

    fn row_width(&self) -> usize {
        self.row_dims.iter().sum()
    }

    fn col_width(&self) -> usize {
        self.col_dims.iter().sum()
    }

    /// Scalar shape of the matrices this pattern describes.
    pub fn shape(&self) -> (usize, usize) {
        (
            self.time_rows * self.row_width(),
            self.time_cols * self.col_width(),
        )
    }

    pub fn is_free(&self, t: usize, s: usize, i: usize, j: usize) -> bool {
        let (nr, nc) = (self.row_dims.len(), self.col_dims.len());
        self.mask[((t * self.time_cols + s) * nr + i) * nc + j]
    }

    fn row_block(&self, idx: usize) -> (usize, usize) {
        let w = self.row_width();
        let local = idx % w;
        (idx / w, self.row_offsets.partition_point(|&o| o <= local) - 1)
    }

    fn col_block(&self, idx: usize) -> (usize, usize) {
        let w = self.col_width();
        let local = idx % w;
        (idx / w, self.col_offsets.partition_point(|&o| o <= local) - 1)
    }

    pub fn is_free_entry(&self, row: usize, col: usize) -> bool {
        let (t, i) = self.row_block(row);
        let (s, j) = self.col_block(col);
        self.is_free(t, s, i, j)
    }

    /// Scalar `(row, col)` positions inside free blocks, column-major.
    pub fn free_entries(&self) -> Vec<(usize, usize)> {
        let (rows, cols) = self.shape();
        let mut out = Vec::new();
        for c in 0..cols {
            for r in 0..rows {
                if self.is_free_entry(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn is_all_zero(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    /// Largest magnitude found outside the free blocks.
    pub fn max_violation(&self, m: &DMatrix<f64>) -> f64 {
        assert_eq!(m.shape(), self.shape(), "matrix does not match pattern shape");
        let mut worst = 0.0_f64;
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if !self.is_free_entry(r, c) {
                    worst = worst.max(m[(r, c)].abs());
                }
            }
        }
        worst
    }

    /// Zeroes every entry outside the free blocks.
    pub fn project(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.shape(), self.shape(), "matrix does not match pattern shape");
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
            if self.is_free_entry(r, c) {
                m[(r, c)]
            } else {
                0.0
            }
        })
    }
}

fn gain_pattern(layout: &Layout, sets: &[BTreeSet<usize>]) -> SparsityPattern {
    let n = layout.subsystems();
    SparsityPattern::from_fn(
        layout.horizon(),
        layout.horizon() + 1,
        (0..n).map(|i| layout.input_dim(i)).collect(),
        (0..n).map(|i| layout.state_dim(i)).collect(),
        |t, s, i, j| t >= s && sets[i].contains(&j),
    )
}

/// Pattern of the disturbance-feedback gain: block `(t, s)` couples `u(t)`
/// to `w(s - 1)`; `(i, j)` is free iff `j ∈ N(i)` and `t ≥ s`.
pub fn pattern_qn(decomp: &InfoDecomposition, layout: &Layout) -> SparsityPattern {
    gain_pattern(layout, &decomp.nested)
}

/// Pattern of the coupled-state gain: `(i, j)` free iff `j ∈ C(i)`, `t ≥ s`.
pub fn pattern_qc(decomp: &InfoDecomposition, layout: &Layout) -> SparsityPattern {
    gain_pattern(layout, &decomp.coupled)
}

/// Pattern of the contract orientation matrix: strictly block lower
/// triangular in time, and block `(i, j)` free iff `V_C^+(i) ⊆ V_C^+(j)`.
pub fn pattern_y(decomp: &InfoDecomposition, layout: &Layout) -> SparsityPattern {
    let n = layout.subsystems();
    let out: Vec<BTreeSet<usize>> = (0..n).map(|i| decomp.coupling_out(i)).collect();
    let dims: Vec<usize> = (0..n).map(|i| layout.state_dim(i)).collect();
    SparsityPattern::from_fn(
        layout.horizon() + 1,
        layout.horizon() + 1,
        dims.clone(),
        dims,
        |t, s, i, j| t > s && out[i].is_subset(&out[j]),
    )
}

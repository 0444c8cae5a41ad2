//! Trajectory-space operators.
//!
//! With `Φ(t, s) = A(t-1) ⋯ A(s)` and `Φ(s, s) = I`, the true system maps
//! whole trajectories as `x = B u + L w` where block `(t, s)` of `B` is
//! `Φ(t, s+1) B(s)` for `t > s` and block `(t, s)` of `L` is `Φ(t, s)` for
//! `t ≥ s` (column block `s` of `L` multiplies `w(s - 1)`).
//!
//! The surrogate system drops, for each subsystem `i`, the direct influence
//! of the states in `C(i)` from `A(t)` and feeds it back through a separate
//! operator acting on the coupled-state trajectory:
//! `x = B̃ u + L̃ w + H̃ Π_C x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::infograph::InfoDecomposition;
use crate::layout::Layout;
use crate::model::ProblemInstance;

#[derive(Debug, thiserror::Error)]
pub enum LiftingError {
    #[error("{name} has length {found}, expected {expected}")]
    Length {
        name: &'static str,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedSystem {
    #[serde(with = "crate::serde_matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub l: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub b_tilde: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub l_tilde: DMatrix<f64>,
    /// `N_x × N_x` with a zero last column block; kept for inspection.
    #[serde(with = "crate::serde_matrix")]
    pub h: DMatrix<f64>,
    /// `H Π_Cᵀ`, of width `N_x^C`.
    #[serde(with = "crate::serde_matrix")]
    pub h_tilde: DMatrix<f64>,
    /// `N_x^C × N_x` row selection.
    #[serde(with = "crate::serde_matrix")]
    pub pi_c: DMatrix<f64>,
}

/// Splits `A(t) = Ã(t) + H̃(t)` where `H̃(t)` keeps exactly the blocks
/// `(i, j)` with `j ∈ C(i)`.
pub fn surrogate_split(
    instance: &ProblemInstance,
    decomp: &InfoDecomposition,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let layout = instance.layout();
    let n = layout.subsystems();
    let mut a_tilde = Vec::with_capacity(instance.horizon());
    let mut h_step = Vec::with_capacity(instance.horizon());
    for a in &instance.dynamics().a {
        let mut at = a.clone();
        let mut ht = DMatrix::zeros(a.nrows(), a.ncols());
        for i in 0..n {
            let rows = layout.local_state(i);
            for &j in decomp.coupled(i) {
                let cols = layout.local_state(j);
                let shape = (rows.len(), cols.len());
                ht.view_mut((rows.start, cols.start), shape)
                    .copy_from(&a.view((rows.start, cols.start), shape));
                at.view_mut((rows.start, cols.start), shape).fill(0.0);
            }
        }
        a_tilde.push(at);
        h_step.push(ht);
    }
    (a_tilde, h_step)
}

/// Block `(t, s)` equal to `Φ(t, s+1) G(s)` for `t > s`, over state row
/// blocks `t = 0..=T`, followed by a zero column block of width
/// `trailing_width`.
fn propagate_inputs(
    layout: &Layout,
    transitions: &[DMatrix<f64>],
    inputs: &[DMatrix<f64>],
    trailing_width: usize,
) -> DMatrix<f64> {
    let horizon = layout.horizon();
    let n_x = layout.n_x();
    let width = inputs.first().map_or(0, DMatrix::ncols);
    let mut out = DMatrix::zeros(layout.state_len(), width * horizon + trailing_width);
    for (s, g) in inputs.iter().enumerate() {
        let mut block = g.clone();
        for t in s + 1..=horizon {
            out.view_mut((t * n_x, s * width), (n_x, width)).copy_from(&block);
            if t < horizon {
                block = &transitions[t] * block;
            }
        }
    }
    out
}

/// Block `(t, s) = Φ(t, s)` for `t ≥ s`, `t, s = 0..=T`.
fn propagate_states(layout: &Layout, transitions: &[DMatrix<f64>]) -> DMatrix<f64> {
    let horizon = layout.horizon();
    let n_x = layout.n_x();
    let mut out = DMatrix::zeros(layout.state_len(), layout.state_len());
    for s in 0..=horizon {
        let mut block = DMatrix::identity(n_x, n_x);
        for t in s..=horizon {
            out.view_mut((t * n_x, s * n_x), (n_x, n_x)).copy_from(&block);
            if t < horizon {
                block = &transitions[t] * block;
            }
        }
    }
    out
}

pub fn build_b_l(instance: &ProblemInstance) -> (DMatrix<f64>, DMatrix<f64>) {
    let layout = instance.layout();
    let dyn_ = instance.dynamics();
    (
        propagate_inputs(layout, &dyn_.a, &dyn_.b, 0),
        propagate_states(layout, &dyn_.a),
    )
}

/// Returns `(B̃, L̃, H̃)`; also see [`lift`] for `H` and `Π_C`.
pub fn build_surrogate(
    instance: &ProblemInstance,
    decomp: &InfoDecomposition,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (b_tilde, l_tilde, h) = surrogate_parts(instance, decomp);
    let h_tilde = h.select_columns(decomp.projection());
    (b_tilde, l_tilde, h_tilde)
}

fn surrogate_parts(
    instance: &ProblemInstance,
    decomp: &InfoDecomposition,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let layout = instance.layout();
    let (a_tilde, h_step) = surrogate_split(instance, decomp);
    let b_tilde = propagate_inputs(layout, &a_tilde, &instance.dynamics().b, 0);
    let l_tilde = propagate_states(layout, &a_tilde);
    let h = propagate_inputs(layout, &a_tilde, &h_step, layout.n_x());
    (b_tilde, l_tilde, h)
}

pub fn lift(instance: &ProblemInstance, decomp: &InfoDecomposition) -> LiftedSystem {
    let (b, l) = build_b_l(instance);
    let (b_tilde, l_tilde, h) = surrogate_parts(instance, decomp);
    let h_tilde = h.select_columns(decomp.projection());
    let pi_c = decomp.projection_matrix(instance.layout().state_len());
    LiftedSystem {
        b,
        l,
        b_tilde,
        l_tilde,
        h,
        h_tilde,
        pi_c,
    }
}

/// State trajectory `x = B u + L w`.
pub fn trajectory(
    lifted: &LiftedSystem,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>, LiftingError> {
    if u.len() != lifted.b.ncols() {
        return Err(LiftingError::Length {
            name: "input trajectory",
            expected: lifted.b.ncols(),
            found: u.len(),
        });
    }
    if w.len() != lifted.l.ncols() {
        return Err(LiftingError::Length {
            name: "disturbance trajectory",
            expected: lifted.l.ncols(),
            found: w.len(),
        });
    }
    Ok(&lifted.b * u + &lifted.l * w)
}

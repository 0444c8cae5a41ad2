//! Index arithmetic for stacked trajectories.
//!
//! States are stacked time-major as `x = (x(0), ..., x(T))`, inputs as
//! `u = (u(0), ..., u(T-1))`, and within each time block the subsystem
//! components appear in ascending subsystem order. Disturbances use the
//! shifted stacking `w = (w(-1), w(0), ..., w(T-1))` with `w(-1) = x(0)`, so
//! disturbance column block `s` carries `w(s - 1)` and has the same offsets
//! as state block `s`.
//!
//! Every block-index computation in the crate goes through this type.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Local state and input dimensions of one subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemDims {
    pub state: usize,
    pub input: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    dims: Vec<SubsystemDims>,
    horizon: usize,
    state_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
    n_x: usize,
    n_u: usize,
}

impl Layout {
    /// Callers are expected to have checked that every dimension and the
    /// horizon are positive.
    pub fn new(dims: Vec<SubsystemDims>, horizon: usize) -> Self {
        let mut state_offsets = Vec::with_capacity(dims.len());
        let mut input_offsets = Vec::with_capacity(dims.len());
        let (mut n_x, mut n_u) = (0, 0);
        for d in &dims {
            state_offsets.push(n_x);
            input_offsets.push(n_u);
            n_x += d.state;
            n_u += d.input;
        }
        Self {
            dims,
            horizon,
            state_offsets,
            input_offsets,
            n_x,
            n_u,
        }
    }

    pub fn subsystems(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[SubsystemDims] {
        &self.dims
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Full state dimension `n_x` at a single time.
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Full input dimension `n_u` at a single time.
    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// Length of the state (and disturbance) trajectory, `n_x (T + 1)`.
    pub fn state_len(&self) -> usize {
        self.n_x * (self.horizon + 1)
    }

    /// Length of the input trajectory, `n_u T`.
    pub fn input_len(&self) -> usize {
        self.n_u * self.horizon
    }

    pub fn state_dim(&self, i: usize) -> usize {
        self.dims[i].state
    }

    pub fn input_dim(&self, i: usize) -> usize {
        self.dims[i].input
    }

    /// Range of subsystem `i` inside one time block of the state.
    pub fn local_state(&self, i: usize) -> Range<usize> {
        self.state_offsets[i]..self.state_offsets[i] + self.dims[i].state
    }

    /// Range of subsystem `i` inside one time block of the input.
    pub fn local_input(&self, i: usize) -> Range<usize> {
        self.input_offsets[i]..self.input_offsets[i] + self.dims[i].input
    }

    /// Rows of `x(t)` in the state trajectory, `t = 0..=T`.
    pub fn state_block(&self, t: usize) -> Range<usize> {
        debug_assert!(t <= self.horizon);
        t * self.n_x..(t + 1) * self.n_x
    }

    /// Rows of `u(t)` in the input trajectory, `t = 0..T`.
    pub fn input_block(&self, t: usize) -> Range<usize> {
        debug_assert!(t < self.horizon);
        t * self.n_u..(t + 1) * self.n_u
    }

    /// Entries of `w(s - 1)` in the disturbance trajectory, `s = 0..=T`.
    pub fn disturbance_block(&self, s: usize) -> Range<usize> {
        self.state_block(s)
    }

    /// Entries of `x_i(t)` in the state trajectory.
    pub fn state_range(&self, t: usize, i: usize) -> Range<usize> {
        let base = t * self.n_x + self.state_offsets[i];
        base..base + self.dims[i].state
    }

    /// Entries of `u_i(t)` in the input trajectory.
    pub fn input_range(&self, t: usize, i: usize) -> Range<usize> {
        let base = t * self.n_u + self.input_offsets[i];
        base..base + self.dims[i].input
    }

    /// Maps a state-trajectory index to `(t, subsystem)`.
    pub fn locate_state(&self, idx: usize) -> (usize, usize) {
        let t = idx / self.n_x;
        let local = idx % self.n_x;
        (t, self.subsystem_at(&self.state_offsets, local))
    }

    /// Maps an input-trajectory index to `(t, subsystem)`.
    pub fn locate_input(&self, idx: usize) -> (usize, usize) {
        let t = idx / self.n_u;
        let local = idx % self.n_u;
        (t, self.subsystem_at(&self.input_offsets, local))
    }

    fn subsystem_at(&self, offsets: &[usize], local: usize) -> usize {
        offsets.partition_point(|&o| o <= local) - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Layout {
        Layout::new(
            vec![
                SubsystemDims { state: 2, input: 1 },
                SubsystemDims { state: 1, input: 2 },
            ],
            3,
        )
    }

    #[test]
    fn sizes() {
        let l = chain();
        assert_eq!(l.n_x(), 3);
        assert_eq!(l.n_u(), 3);
        assert_eq!(l.state_len(), 12);
        assert_eq!(l.input_len(), 9);
    }

    #[test]
    fn ranges_and_lookup_agree() {
        let l = chain();
        assert_eq!(l.state_range(2, 1), 8..9);
        assert_eq!(l.input_range(1, 1), 4..6);
        assert_eq!(l.disturbance_block(0), 0..3);
        for idx in 0..l.state_len() {
            let (t, i) = l.locate_state(idx);
            assert!(l.state_range(t, i).contains(&idx));
        }
        for idx in 0..l.input_len() {
            let (t, i) = l.locate_input(idx);
            assert!(l.input_range(t, i).contains(&idx));
        }
    }
}

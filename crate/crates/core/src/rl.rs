//! Cell-action weights and the SARSA(0) learner over a state aggregation.

use serde::{Deserialize, Serialize};

use crate::aggregation::{CellMap, PartitionTree};
use crate::error::{Error, Result};

/// On-policy transition `(s, a, r, s', a')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub next_action: usize,
}

/// `X x A` weights; `Q_hat(s, a) = theta[cell(s), a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellValueTable {
    num_cells: usize,
    num_actions: usize,
    alpha: f64,
    theta: Vec<f64>,
}

impl CellValueTable {
    pub fn new(num_cells: usize, num_actions: usize, alpha: f64) -> Result<Self> {
        if num_cells == 0 || num_actions == 0 {
            return Err(Error::InvalidDimension(format!("X = {num_cells}, A = {num_actions}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha} not in (0, 1]")));
        }
        Ok(CellValueTable {
            num_cells,
            num_actions,
            alpha,
            theta: vec![0.0; num_cells * num_actions],
        })
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn weights(&self) -> &[f64] {
        &self.theta
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    #[inline]
    pub fn get(&self, cell: usize, action: usize) -> f64 {
        self.theta[cell * self.num_actions + action]
    }

    pub fn set(&mut self, cell: usize, action: usize, value: f64) {
        self.theta[cell * self.num_actions + action] = value;
    }

    pub fn predict(&self, map: &CellMap, state: usize, action: usize) -> Result<f64> {
        if action >= self.num_actions {
            return Err(Error::index("action", action, self.num_actions));
        }
        Ok(self.get(map.cell_of(state)?, action))
    }

    /// `Q_hat` for every state, row-major `S x A`.
    pub fn q_hat(&self, map: &CellMap) -> Vec<f64> {
        (0..map.num_states())
            .flat_map(|s| {
                let c = map.cell(s);
                self.theta[c * self.num_actions..(c + 1) * self.num_actions].iter().copied()
            })
            .collect()
    }

    /// One SARSA(0) step; returns the TD error.
    #[inline]
    pub fn td_update(&mut self, map: &CellMap, tr: &Transition, gamma: f64) -> f64 {
        let i = map.cell(tr.state) * self.num_actions + tr.action;
        let j = map.cell(tr.next_state) * self.num_actions + tr.next_action;
        let err = tr.reward + gamma * self.theta[j] - self.theta[i];
        self.theta[i] += self.alpha * err;
        err
    }

    /// Re-indexes the weights after the partition changes: every new cell takes
    /// the row of the old cell holding its lowest state.
    pub fn handle_resplit(&mut self, old: &PartitionTree, new: &PartitionTree) -> Result<()> {
        if (old.num_states(), old.base_cells(), old.num_cells())
            != (new.num_states(), new.base_cells(), new.num_cells())
            || new.num_cells() != self.num_cells
        {
            return Err(Error::InvalidParameter("partitions do not share (S, B, X) with the table".into()));
        }
        let a_n = self.num_actions;
        let mut theta = vec![0.0; self.theta.len()];
        for c in 0..new.existing_cells() {
            let from = old.cell_of(new.members(c).start)?;
            theta[c * a_n..(c + 1) * a_n].copy_from_slice(&self.theta[from * a_n..(from + 1) * a_n]);
        }
        self.theta = theta;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_table_predicts_zero() {
        let t = CellValueTable::new(3, 2, 0.1).unwrap();
        let map = PartitionTree::new(9, 3, 3).unwrap().convert().unwrap();
        for s in 0..9 {
            for a in 0..2 {
                assert_eq!(t.predict(&map, s, a).unwrap(), 0.0);
            }
        }
        assert!(t.predict(&map, 9, 0).is_err());
        assert!(t.predict(&map, 0, 2).is_err());
    }

    #[test]
    fn shared_cell_shares_prediction() {
        let map = PartitionTree::new(8, 2, 2).unwrap().convert().unwrap();
        let mut t = CellValueTable::new(2, 2, 0.5).unwrap();
        t.set(0, 1, 3.0);
        t.set(1, 0, -1.0);
        for a in 0..2 {
            assert_eq!(t.predict(&map, 0, a).unwrap(), t.predict(&map, 3, a).unwrap());
        }
        assert_eq!(t.predict(&map, 2, 1).unwrap(), 3.0);
    }

    #[test]
    fn full_refinement_is_tabular() {
        let map = PartitionTree::new(5, 1, 5).unwrap().convert().unwrap();
        let mut t = CellValueTable::new(5, 1, 1.0).unwrap();
        for s in 0..5 {
            t.set(map.cell(s), 0, s as f64);
        }
        assert_eq!(t.q_hat(&map), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn one_step_overwrite() {
        let map = PartitionTree::new(4, 2, 2).unwrap().convert().unwrap();
        let mut t = CellValueTable::new(2, 1, 1.0).unwrap();
        t.set(1, 0, 9.0);
        let tr = Transition {
            state: 0,
            action: 0,
            reward: 2.5,
            next_state: 3,
            next_action: 0,
        };
        t.td_update(&map, &tr, 0.0);
        assert_eq!(t.get(0, 0), 2.5);
    }

    #[test]
    fn fixed_point_is_stationary() {
        // Two-state deterministic loop 0 -> 1 -> 0 with r = (1, 2), gamma = 0.5:
        // q0 = 1 + 0.5 q1, q1 = 2 + 0.5 q0 => q0 = 8/3, q1 = 10/3.
        let map = PartitionTree::new(2, 2, 2).unwrap().convert().unwrap();
        let mut t = CellValueTable::new(2, 1, 0.3).unwrap();
        t.set(0, 0, 8.0 / 3.0);
        t.set(1, 0, 10.0 / 3.0);
        let before = t.clone();
        let err = t.td_update(
            &map,
            &Transition {
                state: 0,
                action: 0,
                reward: 1.0,
                next_state: 1,
                next_action: 0,
            },
            0.5,
        );
        assert!(err.abs() < 1e-15);
        assert!((t.get(0, 0) - before.get(0, 0)).abs() < 1e-15);
    }

    #[test]
    fn resplit_identity_and_inheritance() {
        let old = PartitionTree::from_rho(16, 2, 4, &[0, 0]).unwrap();
        let mut t = CellValueTable::new(4, 2, 0.1).unwrap();
        for (i, w) in t.weights_mut().iter_mut().enumerate() {
            *w = i as f64;
        }
        let before = t.clone();
        t.handle_resplit(&old, &old).unwrap();
        assert_eq!(t, before);

        // Move the second split from cell 0 to cell 1: new cell 3 = [12,16) sits
        // inside old cell 1 = [8,16).
        let new = PartitionTree::from_rho(16, 2, 4, &[0, 1]).unwrap();
        t.handle_resplit(&old, &new).unwrap();
        assert_eq!(&t.weights()[6..8], &before.weights()[2..4]);
        // Cell 0 = [0,4) now; it still holds old cell 0's row.
        assert_eq!(&t.weights()[0..2], &before.weights()[0..2]);

        let other = PartitionTree::new(16, 1, 4).unwrap();
        assert!(t.handle_resplit(&old, &other).is_err());
    }

    #[test]
    fn invalid_construction() {
        assert!(CellValueTable::new(0, 1, 0.1).is_err());
        assert!(CellValueTable::new(1, 1, 0.0).is_err());
        assert!(CellValueTable::new(1, 1, 1.5).is_err());
    }

    #[test]
    fn snapshot_serialises() {
        let t = CellValueTable::new(3, 2, 0.05).unwrap();
        let back: CellValueTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}

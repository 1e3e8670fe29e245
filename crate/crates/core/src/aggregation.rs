//! Interval partition tree.
//!
//! States `[0, S)` are first cut into `B` contiguous base cells (the larger
//! cells first). Each entry `rho[k]` of the split vector then halves the
//! current interval of cell `rho[k]`: the lower half (size `ceil(m / 2)`)
//! keeps the index and the upper half becomes cell `B + k`. After all `X - B`
//! splits there are `X` leaf cells.
//!
//! Each base cell owns a binary tree of intervals. A leaf is the current
//! interval of its cell; the right child created by a split is the *creation
//! interval* of the new cell, and the base root is the creation interval of a
//! base cell. The visit indicator of a state is the set of cells whose creation
//! interval contains it, which is read off the root-to-leaf path.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LEAF: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    lo: usize,
    hi: usize,
    /// Cell whose interval this node was when it was a leaf.
    owner: usize,
    left: usize,
    right: usize,
}

impl Node {
    fn leaf(lo: usize, hi: usize, owner: usize) -> Self {
        Node {
            lo,
            hi,
            owner,
            left: LEAF,
            right: LEAF,
        }
    }

    fn len(&self) -> usize {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTree {
    num_states: usize,
    base_cells: usize,
    num_cells: usize,
    /// Base cell sizes: the first `base_rem` cells have `base_len + 1` states.
    base_len: usize,
    base_rem: usize,
    rho: Vec<usize>,
    nodes: Vec<Node>,
    leaf_of_cell: Vec<usize>,
    creation_node: Vec<usize>,
    sigma: Vec<bool>,
}

impl PartitionTree {
    /// The base partition with no splits applied yet; room is reserved for `X` cells.
    pub fn base(num_states: usize, base_cells: usize, num_cells: usize) -> Result<Self> {
        if !(1 <= base_cells && base_cells <= num_cells && num_cells <= num_states) {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= B <= X <= S, got S = {num_states}, B = {base_cells}, X = {num_cells}"
            )));
        }
        let base_len = num_states / base_cells;
        let base_rem = num_states % base_cells;
        let mut nodes = Vec::with_capacity(2 * num_cells - base_cells);
        let mut lo = 0;
        for i in 0..base_cells {
            let len = base_len + usize::from(i < base_rem);
            nodes.push(Node::leaf(lo, lo + len, i));
            lo += len;
        }
        let mut leaf_of_cell = vec![LEAF; num_cells];
        let mut creation_node = vec![LEAF; num_cells];
        let mut sigma = vec![false; num_cells];
        for i in 0..base_cells {
            leaf_of_cell[i] = i;
            creation_node[i] = i;
            sigma[i] = nodes[i].len() <= 1;
        }
        Ok(PartitionTree {
            num_states,
            base_cells,
            num_cells,
            base_len,
            base_rem,
            rho: Vec::with_capacity(num_cells - base_cells),
            nodes,
            leaf_of_cell,
            creation_node,
            sigma,
        })
    }

    /// Builds the full partition with the initial split vector obtained by
    /// repeatedly splitting the largest non-singleton cell (lowest index on
    /// ties), i.e. the reselection sequence run on visit frequencies
    /// proportional to cell size.
    pub fn new(num_states: usize, base_cells: usize, num_cells: usize) -> Result<Self> {
        let mut tree = Self::base(num_states, base_cells, num_cells)?;
        while !tree.is_complete() {
            let existing = tree.existing_cells();
            let target = (0..existing)
                .filter(|&i| !tree.sigma[i])
                .max_by(|&a, &b| tree.members(a).len().cmp(&tree.members(b).len()).then(b.cmp(&a)))
                .expect("a non-singleton cell exists while X <= S");
            tree.split_next(target)?;
        }
        Ok(tree)
    }

    /// Rebuilds the partition from scratch for a full split vector.
    pub fn from_rho(num_states: usize, base_cells: usize, num_cells: usize, rho: &[usize]) -> Result<Self> {
        if rho.len() != num_cells.saturating_sub(base_cells) {
            return Err(Error::InvalidParameter(format!(
                "split vector has {} entries, expected X - B = {}",
                rho.len(),
                num_cells.saturating_sub(base_cells)
            )));
        }
        let mut tree = Self::base(num_states, base_cells, num_cells)?;
        for &target in rho {
            tree.split_next(target)?;
        }
        Ok(tree)
    }

    /// Applies the next split level, dividing cell `target` as evenly as
    /// possible, and refreshes the singleton mask.
    pub fn split_next(&mut self, target: usize) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Precondition(format!("all {} splits already applied", self.rho.len())));
        }
        let existing = self.existing_cells();
        if target >= existing {
            return Err(Error::index("split target", target, existing));
        }
        let leaf = self.leaf_of_cell[target];
        let Node { lo, hi, .. } = self.nodes[leaf];
        if hi - lo < 2 {
            return Err(Error::Precondition(format!("cell {target} is a singleton and cannot be split")));
        }
        let mid = lo + (hi - lo).div_ceil(2);
        let new_cell = existing;
        let left = self.nodes.len();
        self.nodes.push(Node::leaf(lo, mid, target));
        self.nodes.push(Node::leaf(mid, hi, new_cell));
        self.nodes[leaf].left = left;
        self.nodes[leaf].right = left + 1;
        self.leaf_of_cell[target] = left;
        self.leaf_of_cell[new_cell] = left + 1;
        self.creation_node[new_cell] = left + 1;
        self.sigma[target] = mid - lo <= 1;
        self.sigma[new_cell] = hi - mid <= 1;
        self.rho.push(target);
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn base_cells(&self) -> usize {
        self.base_cells
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    /// Number of splits applied so far.
    pub fn level(&self) -> usize {
        self.rho.len()
    }

    /// Cells that exist at the current level: `B + level`.
    pub fn existing_cells(&self) -> usize {
        self.base_cells + self.rho.len()
    }

    pub fn is_complete(&self) -> bool {
        self.existing_cells() == self.num_cells
    }

    pub fn rho(&self) -> &[usize] {
        &self.rho
    }

    /// Singleton mask at the current level (false for cells not yet created).
    pub fn sigma(&self) -> &[bool] {
        &self.sigma
    }

    pub fn is_singleton(&self, cell: usize) -> bool {
        self.sigma[cell]
    }

    /// Current interval of an existing cell.
    pub fn members(&self, cell: usize) -> Range<usize> {
        let n = &self.nodes[self.leaf_of_cell[cell]];
        n.lo..n.hi
    }

    /// Interval of a cell at the level it was created (level 0 for base cells).
    pub fn creation_interval(&self, cell: usize) -> Range<usize> {
        let n = &self.nodes[self.creation_node[cell]];
        n.lo..n.hi
    }

    #[inline]
    fn base_cell_of(&self, state: usize) -> usize {
        let big = self.base_rem * (self.base_len + 1);
        if state < big {
            state / (self.base_len + 1)
        } else {
            self.base_rem + (state - big) / self.base_len
        }
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state < self.num_states {
            Ok(())
        } else {
            Err(Error::index("state", state, self.num_states))
        }
    }

    pub fn cell_of(&self, state: usize) -> Result<usize> {
        self.cell_of_counted(state).map(|(c, _)| c)
    }

    /// Cell of `state` and the number of hops taken: one for the base lookup
    /// plus one per tree level descended.
    pub fn cell_of_counted(&self, state: usize) -> Result<(usize, usize)> {
        self.check_state(state)?;
        let mut node = self.base_cell_of(state);
        let mut hops = 1;
        while self.nodes[node].left != LEAF {
            hops += 1;
            let n = &self.nodes[node];
            node = if state < self.nodes[n.left].hi { n.left } else { n.right };
        }
        Ok((self.nodes[node].owner, hops))
    }

    /// Calls `f` for every cell whose creation interval contains `state`: the
    /// base cell first, then the cells created along the path, shallowest first.
    #[inline]
    pub fn for_each_indicator(&self, state: usize, mut f: impl FnMut(usize)) {
        let mut node = self.base_cell_of(state);
        f(node);
        while self.nodes[node].left != LEAF {
            let n = &self.nodes[node];
            if state < self.nodes[n.left].hi {
                node = n.left;
            } else {
                node = n.right;
                f(self.nodes[node].owner);
            }
        }
    }

    /// Sparse form of the visit-indicator vector of `state`.
    pub fn indicator_cells(&self, state: usize) -> Result<Vec<usize>> {
        self.check_state(state)?;
        let mut out = Vec::new();
        self.for_each_indicator(state, |c| out.push(c));
        Ok(out)
    }

    /// Leaf cells in state order.
    pub fn leaves(&self) -> Vec<(Range<usize>, usize)> {
        let mut leaves: Vec<_> = (0..self.existing_cells()).map(|c| (self.members(c), c)).collect();
        leaves.sort_by_key(|(r, _)| r.start);
        leaves
    }

    /// Cell intervals of partition `j` (after the first `j` splits), indexed by cell.
    pub fn level_partition(&self, j: usize) -> Result<Vec<Range<usize>>> {
        if j > self.rho.len() {
            return Err(Error::index("level", j, self.rho.len() + 1));
        }
        let mut t = Self::base(self.num_states, self.base_cells, self.num_cells)?;
        for &target in &self.rho[..j] {
            t.split_next(target)?;
        }
        Ok((0..t.existing_cells()).map(|c| t.members(c)).collect())
    }

    /// Materialises the leaf mapping for fast lookups.
    pub fn convert(&self) -> Result<CellMap> {
        if !self.is_complete() {
            return Err(Error::Precondition(format!(
                "{} of {} splits applied",
                self.rho.len(),
                self.num_cells - self.base_cells
            )));
        }
        let leaves = self.leaves();
        Ok(CellMap {
            num_states: self.num_states,
            starts: leaves.iter().map(|(r, _)| r.start).collect(),
            cells: leaves.iter().map(|&(_, c)| c).collect(),
        })
    }

    /// Stored slots across the tree's arrays (a node counts once).
    pub fn memory_entries(&self) -> usize {
        self.nodes.len() + self.leaf_of_cell.len() + self.creation_node.len() + self.sigma.len() + self.rho.len()
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            S: self.num_states,
            B: self.base_cells,
            X: self.num_cells,
            rho: self.rho.clone(),
            leaves: self.leaves().into_iter().map(|(r, c)| [r.start, r.end, c]).collect(),
        }
    }

    /// Rebuilds from the split vector and checks the recorded leaves match.
    pub fn from_snapshot(snap: &TreeSnapshot) -> Result<Self> {
        let tree = Self::from_rho(snap.S, snap.B, snap.X, &snap.rho)?;
        if tree.snapshot().leaves != snap.leaves {
            return Err(Error::InvalidParameter("leaf list does not match the split vector".into()));
        }
        Ok(tree)
    }
}

/// Serialised form of a [`PartitionTree`]; leaves are `[start, end, cell]`.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub S: usize,
    pub B: usize,
    pub X: usize,
    pub rho: Vec<usize>,
    pub leaves: Vec<[usize; 3]>,
}

/// Flat state-to-cell mapping: sorted leaf starts searched by bisection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMap {
    num_states: usize,
    starts: Vec<usize>,
    cells: Vec<usize>,
}

impl CellMap {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn cell(&self, state: usize) -> usize {
        let i = self.starts.partition_point(|&s| s <= state) - 1;
        self.cells[i]
    }

    pub fn cell_of(&self, state: usize) -> Result<usize> {
        if state < self.num_states {
            Ok(self.cell(state))
        } else {
            Err(Error::index("state", state, self.num_states))
        }
    }

    pub fn memory_entries(&self) -> usize {
        self.starts.len() + self.cells.len()
    }
}

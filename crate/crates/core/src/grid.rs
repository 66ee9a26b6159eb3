//! Spatial layout of the topographic layer.

use alloc::vec::Vec;

/// Side length of the topographic grid.
pub const GRID_SIDE: usize = 11;
/// Number of units in the topographic layer.
pub const GRID_UNITS: usize = GRID_SIDE * GRID_SIDE;

/// Square grid of units indexed row-major: unit `i` sits at
/// `(i / side, i % side)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoGrid {
    side: usize,
    neighbors: Vec<Vec<usize>>,
}

impl TopoGrid {
    pub fn new(side: usize) -> Self {
        assert!(side > 0, "grid side must be positive");
        let n = side * side;
        let neighbors = (0..n)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                let mut s = Vec::with_capacity(8);
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr >= 0 && nc >= 0 && (nr as usize) < side && (nc as usize) < side {
                            s.push(nr as usize * side + nc as usize);
                        }
                    }
                }
                s
            })
            .collect();
        Self { side, neighbors }
    }

    /// The 11×11 layout used by both networks.
    pub fn standard() -> Self {
        Self::new(GRID_SIDE)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn unit_count(&self) -> usize {
        self.side * self.side
    }

    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.side, i % self.side)
    }

    /// Euclidean distance between two units in grid steps.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (ri, ci) = self.position(i);
        let (rj, cj) = self.position(j);
        let dr = ri as f64 - rj as f64;
        let dc = ci as f64 - cj as f64;
        libm::sqrt(dr * dr + dc * dc)
    }

    /// Moore neighborhood of unit `i` (up to 8 surrounding cells).
    pub fn moore(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Every ordered neighbor pair `(i, j)` with `j` in `moore(i)`.
    pub fn ordered_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
    }

    pub fn ordered_pair_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

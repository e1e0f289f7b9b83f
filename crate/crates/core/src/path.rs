//! Discrete trajectories of state-space processes.

use crate::error::{invalid, Result};
use crate::spectral::ModeVector;

/// A state trajectory sampled on a uniform time grid, optionally paired with
/// an observed trajectory and the fixed-point increment history that
/// produced it.
#[derive(Debug, Clone)]
pub struct SolutionPath {
    /// Time grid, grid[0] = 0, uniform spacing.
    pub grid: Vec<f64>,
    /// State at each grid point; states.len() == grid.len().
    pub states: Vec<ModeVector>,
    /// Observed trajectory C_Λ X(t) when an observer was supplied.
    pub observed: Option<Vec<ModeVector>>,
    /// Successive fixed-point increment norms, outermost iteration last.
    pub iteration_increments: Vec<f64>,
}

impl SolutionPath {
    pub fn new(grid: Vec<f64>, states: Vec<ModeVector>) -> Result<Self> {
        if grid.len() != states.len() {
            return Err(invalid("grid and state counts differ"));
        }
        if grid.is_empty() {
            return Err(invalid("a path needs at least one grid point"));
        }
        Ok(Self {
            grid,
            states,
            observed: None,
            iteration_increments: Vec::new(),
        })
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Final state.
    pub fn last(&self) -> &ModeVector {
        self.states.last().expect("paths are nonempty")
    }

    /// Largest pointwise state distance to another path on the same grid.
    pub fn sup_dist(&self, rhs: &Self) -> f64 {
        assert_eq!(self.len(), rhs.len(), "grid mismatch in sup_dist");
        self.states
            .iter()
            .zip(&rhs.states)
            .map(|(a, b)| a.dist(b))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_grid_and_states() {
        let grid = vec![0.0, 0.5];
        let states = vec![ModeVector::zeros(2)];
        assert!(SolutionPath::new(grid, states).is_err());
    }

    #[test]
    fn sup_dist_picks_largest_pointwise_gap() {
        let grid = vec![0.0, 1.0, 2.0];
        let a = SolutionPath::new(
            grid.clone(),
            vec![
                ModeVector::from_real(&[0.0]),
                ModeVector::from_real(&[1.0]),
                ModeVector::from_real(&[2.0]),
            ],
        )
        .unwrap();
        let b = SolutionPath::new(
            grid,
            vec![
                ModeVector::from_real(&[0.0]),
                ModeVector::from_real(&[1.5]),
                ModeVector::from_real(&[2.25]),
            ],
        )
        .unwrap();
        assert_eq!(a.sup_dist(&b), 0.5);
    }
}

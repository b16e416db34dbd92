use crate::equilibrium::{check_security, solve_sep, EquilibriumPoint};
use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::state_space::StateSpaceMatrices;

/// A validated grid together with its stable equilibrium and Lur'e matrices.
#[derive(Clone, Debug)]
pub struct System {
    pub grid: GridModel,
    pub sep: EquilibriumPoint,
    pub ssm: StateSpaceMatrices,
    pub grid_hash: String,
}

impl System {
    /// Solves the equilibrium from a flat start and rejects insecure ones.
    pub fn new(grid: GridModel) -> Result<Self> {
        let report = grid.validate();
        if let Some(v) = report.violations.first() {
            return Err(Error::InvalidGrid(v.to_string()));
        }
        let sep = solve_sep(&grid, &vec![0.0; grid.n()])?;
        if !check_security(&sep, 0.0) {
            return Err(Error::Insecure { max_difference: sep.max_edge_difference() });
        }
        let ssm = StateSpaceMatrices::build(&grid, &sep);
        let grid_hash = grid.content_hash();
        Ok(System { grid, sep, ssm, grid_hash })
    }

    pub fn dim(&self) -> usize {
        self.ssm.dim()
    }

    pub fn check_hash(&self, hash: &str) -> Result<()> {
        if hash == self.grid_hash {
            Ok(())
        } else {
            Err(Error::GridMismatch { expected: hash.to_string(), actual: self.grid_hash.clone() })
        }
    }
}

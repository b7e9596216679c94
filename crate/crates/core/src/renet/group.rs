use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::grid::{grid_dims, grid_to_map, patch_grid};
use super::sweep::{renet_sweep, Direction, Exec, ReNetLayer};

/// A vertical layer over `s x t` patches followed by a horizontal layer over
/// the resulting grid cell by cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ReNetGroup<T> {
    pub first: ReNetLayer<T>,
    pub second: ReNetLayer<T>,
}

impl<T: Scalar> ReNetGroup<T> {
    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()?;
        if self.first.direction != Direction::Vertical || self.second.direction != Direction::Horizontal {
            return Err(Error::arg("a recurrent group sweeps vertically first, then horizontally"));
        }
        if self.second.patch != (1, 1) {
            return Err(Error::arg(format!(
                "the second layer of a group reads 1x1 cells, not {:?}",
                self.second.patch
            )));
        }
        if self.second.input_size() != self.first.output_channels() {
            return Err(Error::shape(format!(
                "second layer expects {} inputs but the first layer emits {}",
                self.second.input_size(),
                self.first.output_channels()
            )));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.second.output_channels()
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        grid_dims(height, width, self.first.patch)
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }
}

/// `[C,H,W] -> [2 d2, ceil(H/s), ceil(W/t)]` (batched maps likewise).
pub fn renet_group<T: Scalar>(map: &Tensor<T>, group: &ReNetGroup<T>, exec: Exec) -> Result<Tensor<T>> {
    group.validate()?;
    let (s, t) = group.first.patch;
    let grid = patch_grid(map, s, t)?;
    let v = renet_sweep(&grid, &group.first, exec)?;
    let h = renet_sweep(&v, &group.second, exec)?;
    grid_to_map(&h)
}

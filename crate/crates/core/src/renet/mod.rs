//! Spatially recurrent layers.
//!
//! A map is cut into a grid of patches; a ReNet layer runs two recurrences
//! with independent weights along every column (vertical) or row
//! (horizontal) of the grid, one in each order, and concatenates their hidden
//! states. A group stacks a vertical and a horizontal layer so that every
//! output cell depends on the whole input.
//!
//! All sweeps share one lane kernel. Lanes are independent and each keeps its
//! own trace, so running them on the rayon pool gives bit-identical results
//! to running them one after another.

mod cell;
mod grid;
mod group;
mod irnn;
mod lstm;
mod sweep;

pub use grid::{grid_dims, grid_to_map, map_to_grid, patch_grid, patch_grid_backward};
pub use group::{renet_group, ReNetGroup};
pub use irnn::{irnn_step, IrnnParams};
pub use lstm::{lstm_step, Gate, LstmParams, LstmState};
pub use sweep::{
    irnn_sweep, renet_sweep, renet_sweep_backward, renet_sweep_traced, CellKind, CellParams, Direction, Exec,
    ReNetLayer, SweepGrads, SweepTrace,
};

/// Checkpoint name of one recurrent tensor:
/// `renet<k>.<V|H>.<F|B>.<gate>.<W|U|b>`, with gate `r` for IRNN cells.
pub fn param_name(group: usize, direction: Direction, backward: bool, gate: &str, which: &str) -> String {
    format!(
        "renet{group}.{}.{}.{gate}.{which}",
        direction.tag(),
        if backward { "B" } else { "F" }
    )
}

/// Names for the tensors of [`CellParams::tensors`], in the same order.
pub fn cell_param_names(group: usize, direction: Direction, backward: bool, kind: CellKind) -> Vec<String> {
    let gates: Vec<&str> = match kind {
        CellKind::Lstm => Gate::ALL.iter().map(|g| g.tag()).collect(),
        CellKind::Irnn => vec!["r"],
    };
    gates
        .into_iter()
        .flat_map(|g| ["W", "U", "b"].map(|w| param_name(group, direction, backward, g, w)))
        .collect()
}

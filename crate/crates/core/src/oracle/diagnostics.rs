//! Per-block finite-difference maps used to inspect spatial correlation of the
//! loss and how it drifts after a single block step.

use serde::Serialize;

use super::{LogitsOracle, LossSpec};
use crate::error::{invalid, Result};
use crate::image::{apply_block_delta, BlockGrid, BlockIndex, Image};

/// `loss(x + eta e) - loss(x - eta e)` for every block `e`, in linear-index
/// order. Probes are not projected or clipped. Costs `2 * |E|` queries.
pub fn finite_difference_map<O: LogitsOracle + ?Sized>(
    oracle: &mut O,
    x: &Image,
    grid: &BlockGrid,
    eta: f64,
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(invalid("eta must be positive"));
    }
    let mut out = Vec::with_capacity(grid.num_blocks());
    for block in grid.blocks() {
        let plus = apply_block_delta(x, grid, &block, eta)?;
        let minus = apply_block_delta(x, grid, &block, -eta)?;
        let lp = spec.loss(&oracle.query(&plus)?)?;
        let lm = spec.loss(&oracle.query(&minus)?)?;
        out.push(lp - lm);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ChangeMap {
    pub stepped: BlockIndex,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub difference: Vec<f64>,
}

/// Finite-difference map before and after stepping `x <- x - eta e` on one
/// block. Without an explicit block, the block with the largest difference is
/// stepped. Costs `4 * |E|` queries.
pub fn change_map<O: LogitsOracle + ?Sized>(
    oracle: &mut O,
    x: &Image,
    grid: &BlockGrid,
    eta: f64,
    spec: &LossSpec,
    block: Option<BlockIndex>,
) -> Result<ChangeMap> {
    let before = finite_difference_map(oracle, x, grid, eta, spec)?;
    let stepped = match block {
        Some(b) => b,
        None => {
            let mut best = 0;
            for (n, v) in before.iter().enumerate() {
                if *v > before[best] {
                    best = n;
                }
            }
            grid.block_at(best)
        }
    };
    let next = apply_block_delta(x, grid, &stepped, -eta)?;
    let after = finite_difference_map(oracle, &next, grid, eta, spec)?;
    let difference = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    Ok(ChangeMap {
        stepped,
        before,
        after,
        difference,
    })
}

//! Optimality check for the GP + EI selection rule on a frozen reward field.
//!
//! Each block of a grid carries a fixed value. The probe runs the stage's
//! selection loop (Latin-hypercube warm start, then one likelihood step and an
//! EI argmax per query) without ever changing the field, and records how many
//! actions are strictly better than the best one found so far.

use std::io::Write;

use corrattack_core::acquisition::{expected_improvement, select_max, AcquisitionScore};
use corrattack_core::attack::{latin_hypercube_init, Selection};
use corrattack_core::bandit::{block_features, make_action_set, ActionMode, SampleSet};
use corrattack_core::gp::{AdamFitter, GpHyperparams, GpModel};
use corrattack_core::image::{make_grid, BlockGrid, Shape};
use corrattack_core::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::BenchError;

/// Per-block values over an `h x w x c` grid, in linear-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardField {
    pub grid: BlockGrid,
    pub values: Vec<f64>,
}

impl RewardField {
    fn grid(h: usize, w: usize, c: usize) -> BlockGrid {
        make_grid(Shape::new(c, 2 * h, 2 * w), 2).expect("positive grid")
    }

    /// White noise blurred with a Gaussian of `sigma` blocks in space and one
    /// block across channels, then standardized.
    pub fn smooth(h: usize, w: usize, c: usize, sigma: f64, seed: u64) -> Self {
        let grid = Self::grid(h, w, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..grid.num_blocks()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut values = vec![0.0; noise.len()];
        let weight = |d: f64, s: f64| (-0.5 * (d / s).powi(2)).exp();
        for t in grid.blocks() {
            let (mut acc, mut norm) = (0.0, 0.0);
            for s in grid.blocks() {
                let wgt = weight(t.i.abs_diff(s.i) as f64, sigma)
                    * weight(t.j.abs_diff(s.j) as f64, sigma)
                    * weight(t.k.abs_diff(s.k) as f64, 1.0);
                acc += wgt * noise[grid.linear_index(&s)];
                norm += wgt;
            }
            values[grid.linear_index(&t)] = acc / norm;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        Self { grid, values }
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Self {
        let grid = Self::grid(h, w, c);
        Self { grid, values: vec![value; grid.num_blocks()] }
    }

    /// Zero everywhere except one block.
    pub fn needle(h: usize, w: usize, c: usize, at: usize, value: f64) -> Self {
        let mut f = Self::constant(h, w, c, 0.0);
        f.values[at] = value;
        f
    }

    /// Fraction of actions strictly better (lower) than `value`.
    pub fn rank_of(&self, value: f64) -> f64 {
        self.values.iter().filter(|&&v| v < value).count() as f64 / self.values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Stop after this fraction of the actions has been queried.
    pub query_fraction: f64,
    pub sample_ratio: f64,
    pub window_ratio: f64,
    pub min_samples: usize,
    pub min_window: usize,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            query_fraction: 0.15,
            sample_ratio: 0.03,
            window_ratio: 0.09,
            min_samples: 4,
            min_window: 12,
            selection: Selection::BayesOpt,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankPoint {
    pub queries: usize,
    pub fraction: f64,
    pub block: usize,
    pub value: f64,
    pub best_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTrace {
    pub actions: usize,
    pub points: Vec<RankPoint>,
}

impl RankTrace {
    /// Best rank once at least `fraction` of the actions has been queried,
    /// or the last recorded rank.
    pub fn rank_at(&self, fraction: f64) -> Option<f64> {
        let needed = (fraction * self.actions as f64).ceil() as usize;
        self.points
            .iter()
            .find(|p| p.queries >= needed)
            .or(self.points.last())
            .map(|p| p.best_rank)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| BenchError::Io(std::io::Error::other(e));
        w.write_record(["queries", "fraction", "block", "value", "best_rank"]).map_err(io)?;
        for p in &self.points {
            w.write_record([
                p.queries.to_string(),
                format!("{:.6}", p.fraction),
                p.block.to_string(),
                format!("{:.9}", p.value),
                format!("{:.6}", p.best_rank),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the selection loop on a frozen field and traces the best-found rank.
pub fn bo_rank_probe(field: &RewardField, config: &ProbeConfig) -> Result<RankTrace> {
    let grid = field.grid;
    let n = grid.num_blocks();
    let budget = ((config.query_fraction * n as f64).ceil() as usize).clamp(1, n);
    let m = ((config.sample_ratio * n as f64).ceil() as usize).max(config.min_samples).min(n);
    let tau = ((config.window_ratio * n as f64).ceil() as usize).max(config.min_window);
    let features = block_features(&grid, &vec![0.5; n])?;
    let actions = make_action_set(ActionMode::Diff, &grid, &[], 1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut queried = vec![false; n];
    let mut window = SampleSet::new(tau);
    let mut best = f64::INFINITY;
    let mut points = Vec::with_capacity(budget);
    let mut observe = |idx: usize, queried: &mut Vec<bool>, window: &mut SampleSet| {
        queried[idx] = true;
        let v = field.values[idx];
        best = best.min(v);
        window.update(false, actions[idx].block, features[idx], v, 0);
        let q = points.len() + 1;
        points.push(RankPoint {
            queries: q,
            fraction: q as f64 / n as f64,
            block: idx,
            value: v,
            best_rank: field.rank_of(best),
        });
    };

    match config.selection {
        Selection::UniformRandom => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for idx in order.into_iter().take(budget) {
                observe(idx, &mut queried, &mut window);
            }
        }
        Selection::BayesOpt => {
            for idx in latin_hypercube_init(&actions, &grid, m.min(budget), &mut rng) {
                observe(idx, &mut queried, &mut window);
            }
            let mut fitter = AdamFitter::default();
            let mut hp = GpHyperparams::default();
            while queried.iter().filter(|&&q| q).count() < budget {
                let data = window.to_dataset()?;
                if data.len() >= 2 {
                    hp = fitter.fit_step(&hp, &data)?;
                }
                let gp = GpModel::condition(&hp, &data)?;
                let incumbent = window.best().unwrap_or(0.0);
                let scores = (0..n).filter(|&i| !queried[i]).map(|i| {
                    let post = gp.predict(&features[i]).destandardize(&data);
                    AcquisitionScore {
                        action: i,
                        ei: expected_improvement(post.mean, post.variance, incumbent),
                    }
                });
                let pick = select_max(scores)?;
                observe(pick.action, &mut queried, &mut window);
            }
        }
    }
    Ok(RankTrace { actions: n, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_fields_are_standardized_and_seeded() {
        let a = RewardField::smooth(6, 5, 3, 1.5, 3);
        assert_eq!(a.values.len(), 90);
        let mean = a.values.iter().sum::<f64>() / 90.0;
        assert!(mean.abs() < 1e-12);
        assert_eq!(a, RewardField::smooth(6, 5, 3, 1.5, 3));
        assert_ne!(a, RewardField::smooth(6, 5, 3, 1.5, 4));
    }

    #[test]
    fn rank_counts_strictly_better_actions() {
        let f = RewardField::needle(2, 2, 1, 3, -1.0);
        assert_eq!(f.rank_of(0.0), 0.25);
        assert_eq!(f.rank_of(-1.0), 0.0);
    }

    #[test]
    fn trace_length_follows_the_query_fraction() {
        let f = RewardField::smooth(14, 14, 3, 2.0, 0);
        let t = bo_rank_probe(&f, &ProbeConfig::default()).unwrap();
        assert_eq!(t.actions, 588);
        assert_eq!(t.points.len(), 89);
        let mut seen: Vec<usize> = t.points.iter().map(|p| p.block).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 89);
        assert!(t.points.windows(2).all(|w| w[1].best_rank <= w[0].best_rank));
    }
}

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bandit::ActionSpec;
use crate::image::BlockGrid;

/// Picks `min(m, |actions|)` distinct actions spread over the (i, j) grid.
///
/// Rows and columns are each cut into `m` strata; stratum pairs come from two
/// random permutations. Within a stratum a grid row (column) is drawn
/// uniformly, or a point inside the stratum when it holds no whole row. Each
/// target maps to the nearest not-yet-chosen action by (i, j) distance, ties
/// going to the lower channel and then the lower linear index.
///
/// Returns indices into `actions`.
pub fn latin_hypercube_init<R: Rng + ?Sized>(
    actions: &[ActionSpec],
    grid: &BlockGrid,
    m: usize,
    rng: &mut R,
) -> Vec<usize> {
    let count = m.min(actions.len());
    if count == 0 {
        return Vec::new();
    }
    let mut rows: Vec<usize> = (0..count).collect();
    let mut cols: Vec<usize> = (0..count).collect();
    rows.shuffle(rng);
    cols.shuffle(rng);

    let mut taken = vec![false; actions.len()];
    let mut chosen = Vec::with_capacity(count);
    for p in 0..count {
        let ti = stratum_target(rows[p], count, grid.h, rng);
        let tj = stratum_target(cols[p], count, grid.w, rng);
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for (idx, action) in actions.iter().enumerate() {
            if taken[idx] {
                continue;
            }
            let b = action.block;
            let d = (b.i as f64 - ti).powi(2) + (b.j as f64 - tj).powi(2);
            let key = (d, b.k, grid.linear_index(&b), idx);
            let better = match best {
                None => true,
                Some(cur) => {
                    key.0 < cur.0
                        || (key.0 == cur.0 && (key.1, key.2) < (cur.1, cur.2))
                }
            };
            if better {
                best = Some(key);
            }
        }
        let (_, _, _, idx) = best.expect("count <= actions.len()");
        taken[idx] = true;
        chosen.push(idx);
    }
    chosen
}

/// Coordinate (in block units) drawn from stratum `s` of `m` over `extent` cells.
fn stratum_target<R: Rng + ?Sized>(s: usize, m: usize, extent: usize, rng: &mut R) -> f64 {
    // cells c with floor(c * m / extent) == s
    let lo = (s * extent).div_ceil(m);
    let hi = ((s + 1) * extent).div_ceil(m);
    if hi > lo {
        rng.random_range(lo..hi) as f64
    } else {
        let u = (s as f64 + rng.random::<f64>()) / m as f64;
        (u * extent as f64).floor().min((extent - 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{make_action_set, ActionMode};
    use crate::image::{make_grid, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diff_actions(grid: &BlockGrid) -> Vec<ActionSpec> {
        make_action_set(ActionMode::Diff, grid, &[], 0.05, 0.03)
    }

    #[test]
    fn exhaustive_when_m_covers_all() {
        let grid = make_grid(Shape::new(3, 16, 16), 8).unwrap();
        let actions = diff_actions(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut picked = latin_hypercube_init(&actions, &grid, actions.len(), &mut rng);
        picked.sort_unstable();
        assert_eq!(picked, (0..actions.len()).collect::<Vec<_>>());
        let more = latin_hypercube_init(&actions, &grid, 100, &mut rng);
        assert_eq!(more.len(), actions.len());
    }

    #[test]
    fn single_sample_is_deterministic() {
        let grid = make_grid(Shape::new(3, 32, 32), 4).unwrap();
        let actions = diff_actions(&grid);
        let a = latin_hypercube_init(&actions, &grid, 1, &mut ChaCha8Rng::seed_from_u64(5));
        let b = latin_hypercube_init(&actions, &grid, 1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn marginal_strata_are_distinct() {
        let grid = make_grid(Shape::new(3, 56, 56), 4).unwrap(); // 14 x 14 x 3
        let actions = diff_actions(&grid);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for m in [1usize, 3, 5, 9, 14] {
                let picked = latin_hypercube_init(&actions, &grid, m, &mut rng);
                let mut si: Vec<usize> = picked.iter().map(|&p| actions[p].block.i * m / grid.h).collect();
                let mut sj: Vec<usize> = picked.iter().map(|&p| actions[p].block.j * m / grid.w).collect();
                si.sort_unstable();
                sj.sort_unstable();
                assert_eq!(si, (0..m).collect::<Vec<_>>(), "seed {seed} m {m}");
                assert_eq!(sj, (0..m).collect::<Vec<_>>(), "seed {seed} m {m}");
            }
        }
    }

    #[test]
    fn picks_are_distinct_on_sparse_action_sets() {
        let grid = make_grid(Shape::new(3, 32, 32), 8).unwrap();
        let actions: Vec<_> = diff_actions(&grid).into_iter().step_by(5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut picked = latin_hypercube_init(&actions, &grid, 7, &mut rng);
        picked.sort_unstable();
        picked.dedup();
        assert_eq!(picked.len(), 7);
    }
}

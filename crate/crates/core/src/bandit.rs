//! Arms of the block bandit: their features, how a pull is evaluated against
//! the oracle, and the forgetting sample window the GP is trained on.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gp::{FeatureVec, GpDataset};
use crate::image::{apply_block_delta, project_ball, BlockGrid, BlockIndex, Image};
use crate::oracle::{LogitsOracle, LossSpec};

pub const PCA_MAX_ITERS: usize = 200;
pub const PCA_SQUARINGS: usize = 8;
pub const PCA_TOLERANCE: f64 = 1e-10;

/// Projection of every block of `x0` onto the first principal direction of
/// the block population, min-max scaled to [0, 1]. Each channel of each block
/// is one sample of dimension `b^2`. Returns 0.5 everywhere when the blocks
/// carry no variance.
pub fn pca_first_component(x0: &Image, grid: &BlockGrid) -> Result<Vec<f64>> {
    if x0.shape != grid.image_shape() {
        return Err(invalid("image does not match grid"));
    }
    let n = grid.num_blocks();
    let d = grid.block_size * grid.block_size;
    let mut data = vec![0.0; n * d];
    for (row, block) in grid.blocks().enumerate() {
        for (col, offset) in grid.pixel_offsets(&block).enumerate() {
            data[row * d + col] = x0.pixels[offset];
        }
    }
    for col in 0..d {
        let mean = (0..n).map(|r| data[r * d + col]).sum::<f64>() / n as f64;
        (0..n).for_each(|r| data[r * d + col] -= mean);
    }
    let total_var: f64 = data.iter().map(|v| v * v).sum();
    if n < 2 || total_var <= 1e-24 {
        return Ok(vec![0.5; n]);
    }

    let Some(direction) = leading_direction(&data, n, d) else {
        return Ok(vec![0.5; n]);
    };
    let scores: Vec<f64> = (0..n)
        .map(|r| dot(&data[r * d..(r + 1) * d], &direction))
        .collect();
    Ok(min_max_scale(&scores))
}

/// Leading right singular vector of the centred `n x d` data matrix.
///
/// Power iteration runs on the smaller Gram matrix (`X^T X` or `X X^T`) after
/// squaring it [`PCA_SQUARINGS`] times, which raises the eigenvalue ratio to
/// the 256th power so nearly tied leading components still separate.
fn leading_direction(data: &[f64], n: usize, d: usize) -> Option<Vec<f64>> {
    let row = |r: usize| &data[r * d..(r + 1) * d];
    let over_features = d <= n;
    let s = if over_features { d } else { n };
    let mut gram = vec![0.0; s * s];
    if over_features {
        for r in 0..n {
            let x = row(r);
            for a in 0..d {
                for b in a..d {
                    gram[a * d + b] += x[a] * x[b];
                }
            }
        }
    } else {
        for a in 0..n {
            for b in a..n {
                gram[a * n + b] = dot(row(a), row(b));
            }
        }
    }
    for a in 0..s {
        for b in 0..a {
            gram[a * s + b] = gram[b * s + a];
        }
    }

    for _ in 0..PCA_SQUARINGS {
        gram = square_symmetric(&gram, s);
        let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        gram.iter_mut().for_each(|v| *v /= scale);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1ab1e);
    let mut v: Vec<f64> = (0..s).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut v)?;
    for _ in 0..PCA_MAX_ITERS {
        let mut next: Vec<f64> = (0..s).map(|a| dot(&gram[a * s..(a + 1) * s], &v)).collect();
        normalize(&mut next)?;
        let delta = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    if !over_features {
        // map the left singular vector back to feature space
        let mut w = vec![0.0; d];
        for (r, &u) in v.iter().enumerate() {
            w.iter_mut().zip(row(r)).for_each(|(acc, x)| *acc += u * x);
        }
        normalize(&mut w)?;
        v = w;
    }
    fix_sign(&mut v);
    Some(v)
}

fn square_symmetric(m: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for a in 0..s {
        for b in a..s {
            // m is symmetric, so column b equals row b
            let v = dot(&m[a * s..(a + 1) * s], &m[b * s..(b + 1) * s]);
            out[a * s + b] = v;
            out[b * s + a] = v;
        }
    }
    out
}

/// Flips `v` so its largest-magnitude loading is positive.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(())
}

fn min_max_scale(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * (hi.abs().max(lo.abs()).max(1.0))) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / span).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_coord(v: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        v as f64 / (extent - 1) as f64
    }
}

/// `(i, j, k, pca)` per block, all in [0, 1], in linear-index order.
pub fn block_features(grid: &BlockGrid, pca_scores: &[f64]) -> Result<Vec<FeatureVec>> {
    if pca_scores.len() != grid.num_blocks() {
        return Err(invalid("one pca score per block required"));
    }
    Ok(grid
        .blocks()
        .zip(pca_scores)
        .map(|(b, &p)| {
            [
                unit_coord(b.i, grid.h),
                unit_coord(b.j, grid.w),
                unit_coord(b.k, grid.c),
                p,
            ]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Try `+step` and `-step` on the block, keep the better one.
    Diff { step: f64 },
    /// Move the block's perturbation from -eps to +eps (adds `2 eps`).
    FlipToPos { magnitude: f64 },
    /// Move the block's perturbation from +eps to -eps (subtracts `2 eps`).
    FlipToNeg { magnitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub kind: ActionKind,
    pub block: BlockIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Diff,
    /// Flips blocks currently at -eps.
    FlipNegativePass,
    /// Flips blocks currently at +eps.
    FlipPositivePass,
}

/// Per-pixel sign of the pre-projection perturbation for a flip run.
pub type SignMap = Vec<i8>;

/// Sign of each block's perturbation as `sign(e^T (x_t - x))`, broadcast to
/// pixels. Blocks with zero net perturbation get sign 0.
pub fn signs_from_images(x_t: &Image, origin: &Image, grid: &BlockGrid) -> Result<SignMap> {
    if x_t.shape != origin.shape || x_t.shape != grid.image_shape() {
        return Err(invalid("image/grid shape mismatch"));
    }
    let mut signs = vec![0i8; x_t.pixels.len()];
    for block in grid.blocks() {
        let s: f64 = grid
            .pixel_offsets(&block)
            .map(|o| x_t.pixels[o] - origin.pixels[o])
            .sum();
        let sign = if s > 0.0 {
            1
        } else if s < 0.0 {
            -1
        } else {
            0
        };
        grid.pixel_offsets(&block).for_each(|o| signs[o] = sign);
    }
    Ok(signs)
}

/// Sign of `block`, read from its first pixel (flip perturbations are
/// block-constant at every grid the run has used so far).
pub fn block_sign(signs: &[i8], grid: &BlockGrid, block: &BlockIndex) -> i8 {
    let first = grid
        .pixel_offsets(block)
        .next()
        .expect("blocks are non-empty");
    signs[first]
}

pub fn make_action_set(
    mode: ActionMode,
    grid: &BlockGrid,
    signs: &[i8],
    epsilon: f64,
    eta: f64,
) -> Vec<ActionSpec> {
    let magnitude = 2.0 * epsilon;
    grid.blocks()
        .filter_map(|block| {
            let kind = match mode {
                ActionMode::Diff => ActionKind::Diff { step: eta },
                ActionMode::FlipNegativePass if block_sign(signs, grid, &block) < 0 => {
                    ActionKind::FlipToPos { magnitude }
                }
                ActionMode::FlipPositivePass if block_sign(signs, grid, &block) > 0 => {
                    ActionKind::FlipToNeg { magnitude }
                }
                _ => return None,
            };
            Some(ActionSpec { kind, block })
        })
        .collect()
}

/// Result of pulling one arm.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `loss(candidate) - loss(x_t)`
    pub g: f64,
    /// Signed amount added to the block in the kept candidate.
    pub step: f64,
    pub queries: usize,
    pub candidate: Image,
    pub candidate_loss: f64,
    pub candidate_logits: Vec<f64>,
    pub success: bool,
}

/// Tentatively applies `action` to `x_t` and measures the loss change.
///
/// Flip actions cost one query. Diff actions query `+step` then `-step` and
/// keep the lower loss; if the first probe already fools the model the second
/// is skipped.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_difference<O: LogitsOracle + ?Sized>(
    oracle: &mut O,
    x_t: &Image,
    current_loss: f64,
    origin: &Image,
    epsilon: f64,
    grid: &BlockGrid,
    action: &ActionSpec,
    spec: &LossSpec,
) -> Result<Evaluation> {
    let steps: &[f64] = match action.kind {
        ActionKind::Diff { step } => &[step, -step],
        ActionKind::FlipToPos { magnitude } => &[magnitude],
        ActionKind::FlipToNeg { magnitude } => &[-magnitude],
    };
    let mut best: Option<Evaluation> = None;
    let mut queries = 0;
    for &step in steps {
        let moved = apply_block_delta(x_t, grid, &action.block, step)?;
        let candidate = project_ball(&moved, origin, epsilon)?;
        let logits = oracle.query(&candidate)?;
        queries += 1;
        let loss = spec.loss(&logits)?;
        let success = spec.is_success(&logits);
        let better = best.as_ref().is_none_or(|b| loss < b.candidate_loss);
        if better {
            best = Some(Evaluation {
                g: loss - current_loss,
                step,
                queries,
                candidate,
                candidate_loss: loss,
                candidate_logits: logits,
                success,
            });
        }
        if success {
            break;
        }
    }
    let mut eval = best.expect("at least one probe");
    eval.queries = queries;
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub feature: FeatureVec,
    pub block: BlockIndex,
    pub g: f64,
    pub birth: u64,
}

/// Forgetting window of `(feature, difference)` observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    entries: VecDeque<SampleEntry>,
    capacity: usize,
    clock: u64,
}

impl SampleSet {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity,
            clock: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &SampleEntry> {
        self.entries.iter()
    }

    pub fn contains_block(&self, block: &BlockIndex) -> bool {
        self.entries.iter().any(|e| e.block == *block)
    }

    /// Smallest difference in the window.
    pub fn best(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.g).reduce(f64::min)
    }

    /// After an accepted action, drops every sample within spatial L1 radius
    /// `alpha` of `block` (all channels) and does not record the new one.
    /// After a rejected action, records it. Then evicts the oldest entries
    /// down to capacity.
    pub fn update(&mut self, accepted: bool, block: BlockIndex, feature: FeatureVec, g: f64, alpha: usize) {
        if accepted {
            self.entries.retain(|e| e.block.spatial_l1(&block) > alpha);
        } else {
            self.entries.push_back(SampleEntry {
                feature,
                block,
                g,
                birth: self.clock,
            });
            self.clock += 1;
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn to_dataset(&self) -> Result<GpDataset> {
        let features = self.entries.iter().map(|e| e.feature).collect();
        let values: Vec<f64> = self.entries.iter().map(|e| e.g).collect();
        GpDataset::standardized(features, &values)
    }
}

/// Free-function form of [`SampleSet::update`].
pub fn update_samples(
    mut samples: SampleSet,
    accepted: bool,
    block: BlockIndex,
    feature: FeatureVec,
    g: f64,
    alpha: usize,
) -> SampleSet {
    samples.update(accepted, block, feature, g, alpha);
    samples
}

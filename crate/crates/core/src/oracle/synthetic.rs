//! Small in-process classifiers used as attack targets in tests and benchmarks.
//!
//! Each model exposes its exact loss gradient. The gradient is only for
//! verification code; the attack itself never sees it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{argmax, LossKind, LossSpec};
use super::LogitsModel;
use crate::error::{invalid, Result};
use crate::image::{Image, Shape};

/// Benchmark target dimensions.
pub const BENCH_CLASSES: usize = 10;
pub const BENCH_SHAPE: Shape = Shape {
    channels: 3,
    height: 32,
    width: 32,
};
pub const BENCH_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub shape: Shape,
    pub classes: usize,
    /// classes x dims, row-major
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    /// Unit-normal weights with every row scaled to unit norm, zero bias.
    pub fn seeded(shape: Shape, classes: usize, seed: u64) -> Self {
        let dims = shape.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights: Vec<f64> = (0..classes * dims)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalize_rows(&mut weights, dims);
        Self {
            shape,
            classes,
            weights,
            bias: vec![0.0; classes],
        }
    }

    /// Like [`LinearModel::seeded`], but each weight map is box-blurred over a
    /// `(2 * radius + 1)^2` spatial window within its channel before row
    /// normalization, giving gradients with local spatial correlation.
    pub fn seeded_smooth(shape: Shape, classes: usize, seed: u64, radius: usize) -> Self {
        let mut model = Self::seeded(shape, classes, seed);
        let dims = shape.len();
        for row in model.weights.chunks_mut(dims) {
            let blurred = box_blur(row, shape, radius);
            row.copy_from_slice(&blurred);
        }
        normalize_rows(&mut model.weights, dims);
        model
    }

    pub fn benchmark() -> Self {
        Self::seeded(BENCH_SHAPE, BENCH_CLASSES, BENCH_SEED)
    }

    pub fn row(&self, class: usize) -> &[f64] {
        let dims = self.shape.len();
        &self.weights[class * dims..(class + 1) * dims]
    }

    pub fn logits_of(&self, x: &Image) -> Result<Vec<f64>> {
        check_shape(self.shape, x)?;
        Ok((0..self.classes)
            .map(|c| dot(self.row(c), &x.pixels) + self.bias[c])
            .collect())
    }

    /// Gradient of the hinge loss at `x`; zero where the margin floor is active.
    pub fn loss_gradient(&self, x: &Image, spec: &LossSpec) -> Result<Vec<f64>> {
        let logits = self.logits_of(x)?;
        let dims = self.shape.len();
        let Some((plus, minus)) = active_pair(&logits, spec)? else {
            return Ok(vec![0.0; dims]);
        };
        Ok(self
            .row(plus)
            .iter()
            .zip(self.row(minus))
            .map(|(a, b)| a - b)
            .collect())
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub shape: Shape,
    pub classes: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpModel {
    /// He-style normal initialisation from a fixed seed.
    pub fn seeded(shape: Shape, classes: usize, hidden: usize, seed: u64) -> Self {
        let dims = shape.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |scale: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
                .collect()
        };
        let w1 = normal((2.0 / dims as f64).sqrt(), hidden * dims);
        let b1 = normal(0.1, hidden);
        let w2 = normal((2.0 / hidden as f64).sqrt(), classes * hidden);
        let b2 = vec![0.0; classes];
        Self {
            shape,
            classes,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn benchmark() -> Self {
        Self::seeded(BENCH_SHAPE, BENCH_CLASSES, 64, BENCH_SEED)
    }

    fn hidden_pre(&self, x: &Image) -> Vec<f64> {
        let dims = self.shape.len();
        (0..self.hidden)
            .map(|h| dot(&self.w1[h * dims..(h + 1) * dims], &x.pixels) + self.b1[h])
            .collect()
    }

    pub fn logits_of(&self, x: &Image) -> Result<Vec<f64>> {
        check_shape(self.shape, x)?;
        let act: Vec<f64> = self.hidden_pre(x).into_iter().map(|v| v.max(0.0)).collect();
        Ok((0..self.classes)
            .map(|c| dot(&self.w2[c * self.hidden..(c + 1) * self.hidden], &act) + self.b2[c])
            .collect())
    }

    pub fn loss_gradient(&self, x: &Image, spec: &LossSpec) -> Result<Vec<f64>> {
        let logits = self.logits_of(x)?;
        let dims = self.shape.len();
        let Some((plus, minus)) = active_pair(&logits, spec)? else {
            return Ok(vec![0.0; dims]);
        };
        let pre = self.hidden_pre(x);
        let mut grad = vec![0.0; dims];
        for (h, &p) in pre.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let coeff = self.w2[plus * self.hidden + h] - self.w2[minus * self.hidden + h];
            if coeff == 0.0 {
                continue;
            }
            for (g, w) in grad.iter_mut().zip(&self.w1[h * dims..(h + 1) * dims]) {
                *g += coeff * w;
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticModel {
    Linear(LinearModel),
    Mlp2(MlpModel),
}

impl SyntheticModel {
    pub fn shape(&self) -> Shape {
        match self {
            SyntheticModel::Linear(m) => m.shape,
            SyntheticModel::Mlp2(m) => m.shape,
        }
    }

    pub fn loss_gradient(&self, x: &Image, spec: &LossSpec) -> Result<Vec<f64>> {
        match self {
            SyntheticModel::Linear(m) => m.loss_gradient(x, spec),
            SyntheticModel::Mlp2(m) => m.loss_gradient(x, spec),
        }
    }
}

impl LogitsModel for SyntheticModel {
    fn num_classes(&self) -> usize {
        match self {
            SyntheticModel::Linear(m) => m.classes,
            SyntheticModel::Mlp2(m) => m.classes,
        }
    }

    fn logits(&mut self, x: &Image) -> Result<Vec<f64>> {
        match self {
            SyntheticModel::Linear(m) => m.logits_of(x),
            SyntheticModel::Mlp2(m) => m.logits_of(x),
        }
    }
}

/// Classes whose logit difference forms the hinge loss, `(positive, negative)`;
/// `None` when the margin floor is active.
fn active_pair(logits: &[f64], spec: &LossSpec) -> Result<Option<(usize, usize)>> {
    let loss = spec.loss(logits)?;
    if loss <= -spec.margin {
        return Ok(None);
    }
    Ok(match spec.kind {
        LossKind::Untargeted { label } => {
            let mut other = if label == 0 { 1 } else { 0 };
            for (j, &v) in logits.iter().enumerate() {
                if j != label && v > logits[other] {
                    other = j;
                }
            }
            Some((label, other))
        }
        LossKind::Targeted { target } => {
            let top = argmax(logits);
            if top == target {
                None
            } else {
                Some((top, target))
            }
        }
    })
}

fn check_shape(shape: Shape, x: &Image) -> Result<()> {
    if x.shape != shape {
        return Err(invalid(format!(
            "model expects {:?}, got {:?}",
            shape, x.shape
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_rows(weights: &mut [f64], dims: usize) {
    for row in weights.chunks_mut(dims) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn box_blur(map: &[f64], shape: Shape, radius: usize) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![0.0; map.len()];
    for c in 0..shape.channels {
        let base = c * h * w;
        for r in 0..h {
            for col in 0..w {
                let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
                let (c0, c1) = (col.saturating_sub(radius), (col + radius).min(w - 1));
                let mut s = 0.0;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        s += map[base + rr * w + cc];
                    }
                }
                out[base + r * w + col] = s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(shape: Shape, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_image_gives_zero_logits() {
        let mut m = SyntheticModel::Linear(LinearModel::benchmark());
        let z = Image::filled(BENCH_SHAPE, 0.0);
        assert!(m.logits(&z).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_have_unit_norm() {
        let m = LinearModel::benchmark();
        for c in 0..m.classes {
            let n: f64 = m.row(c).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let s = LinearModel::seeded_smooth(BENCH_SHAPE, 10, 1, 2);
        let n: f64 = s.row(3).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut m = SyntheticModel::Linear(LinearModel::benchmark());
        assert!(m.logits(&Image::filled(Shape::new(1, 32, 32), 0.0)).is_err());
    }

    fn check_gradient(model: &mut SyntheticModel, spec: &LossSpec, x: &Image) {
        let grad = model.loss_gradient(x, spec).unwrap();
        let h = 1e-5;
        let base = spec.loss(&model.logits(x).unwrap()).unwrap();
        for p in (0..x.pixels.len()).step_by(97) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.pixels[p] += h;
            xm.pixels[p] -= h;
            let lp = spec.loss(&model.logits(&xp).unwrap()).unwrap();
            let lm = spec.loss(&model.logits(&xm).unwrap()).unwrap();
            // skip probes that straddle a kink
            let one_sided = ((lp - base) / h - (base - lm) / h).abs();
            if one_sided > 1e-6 {
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let scale = grad[p].abs().max(1e-3);
            assert!(
                (fd - grad[p]).abs() / scale < 1e-5,
                "pixel {p}: fd {fd} analytic {}",
                grad[p]
            );
        }
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut m = SyntheticModel::Linear(LinearModel::benchmark());
        let x = random_image(BENCH_SHAPE, 1);
        let y = argmax(&m.logits(&x).unwrap());
        check_gradient(&mut m, &LossSpec::untargeted(y, 0.05), &x);
        check_gradient(&mut m, &LossSpec::targeted((y + 1) % 10, 0.05), &x);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut m = SyntheticModel::Mlp2(MlpModel::benchmark());
        let x = random_image(BENCH_SHAPE, 2);
        let y = argmax(&m.logits(&x).unwrap());
        check_gradient(&mut m, &LossSpec::untargeted(y, 0.05), &x);
        check_gradient(&mut m, &LossSpec::targeted((y + 3) % 10, 0.05), &x);
    }

    #[test]
    fn linear_loss_is_linear_along_block_direction() {
        let mut m = SyntheticModel::Linear(LinearModel::benchmark());
        let x = random_image(BENCH_SHAPE, 4);
        let y = argmax(&m.logits(&x).unwrap());
        let spec = LossSpec::untargeted(y, 0.05);
        let grad = m.loss_gradient(&x, &spec).unwrap();
        // one 4x4 block of channel 1
        let offsets: Vec<usize> = (0..4)
            .flat_map(|r| (0..4).map(move |c| 1024 + r * 32 + c))
            .collect();
        let slope: f64 = offsets.iter().map(|&o| grad[o]).sum();
        let base = spec.loss(&m.logits(&x).unwrap()).unwrap();
        for step in [-1e-3, 1e-3, 2e-3] {
            let mut xs = x.clone();
            offsets.iter().for_each(|&o| xs.pixels[o] += step);
            let l = spec.loss(&m.logits(&xs).unwrap()).unwrap();
            assert!((l - base - step * slope).abs() < 1e-12);
        }
    }
}

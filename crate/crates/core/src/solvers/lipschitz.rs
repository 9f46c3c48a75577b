use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Axis-aligned box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        BoundingBox { lower, upper }
    }

    /// `[-r, r]^dim`
    pub fn cube(dim: usize, r: f64) -> Self {
        BoundingBox {
            lower: vec![-r; dim],
            upper: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

/// Sampled lower bound on the Lipschitz constant of `field` over `region`:
/// the largest `‖f(a) − f(b)‖ / ‖a − b‖` among all pairs of `samples`
/// uniformly drawn points.
pub fn estimate_lipschitz<F>(field: F, region: &BoundingBox, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if samples < 2 {
        return Err(Error::Config("Lipschitz estimate needs at least two samples".into()));
    }
    if region.lower.len() != region.upper.len() || region.lower.is_empty() {
        return Err(Error::Config("region bounds must have equal nonzero length".into()));
    }
    if region
        .lower
        .iter()
        .zip(&region.upper)
        .any(|(lo, hi)| !(hi > lo))
    {
        return Err(Error::Config("region has zero volume".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            region
                .lower
                .iter()
                .zip(&region.upper)
                .map(|(&lo, &hi)| rng.gen_range(lo..hi))
                .collect()
        })
        .collect();
    let values = points
        .iter()
        .map(|p| field(p))
        .collect::<Result<Vec<_>>>()?;
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = 0.0f64;
    for i in 0..samples {
        for j in i + 1..samples {
            let dx = dist(&points[i], &points[j]);
            if dx > 0.0 {
                best = best.max(dist(&values[i], &values[j]) / dx);
            }
        }
    }
    Ok(best)
}

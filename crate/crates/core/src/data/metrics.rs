//! Overlap and distance metrics on binary masks.
//!
//! Masks are tensors whose last two axes are `H, W`; any value other than
//! `0.0` counts as foreground. Predictions are binarized with [`binarize`]
//! first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub accuracy: f64,
    /// Average Hausdorff distance in pixels.
    pub ahd: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        MetricReport {
            dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
            accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n,
            ahd: reports.iter().map(|r| r.ahd).sum::<f64>() / n,
        }
    }
}

/// `1` where `p ≥ 0.5`, else `0`.
pub fn binarize(probabilities: &Tensor) -> Tensor {
    probabilities.map(|p| if p >= THRESHOLD { 1.0 } else { 0.0 })
}

fn check(pred: &Tensor, truth: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    if pred.ndim() < 2 {
        return Err(Error::shape(op, "masks need at least two axes"));
    }
    Ok(())
}

fn on(v: f64) -> bool {
    v != 0.0
}

/// `2|A∩B| / (|A|+|B|)`, and `1` when both masks are empty.
pub fn dice(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth, "dice")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        inter += usize::from(on(p) && on(t));
        total += usize::from(on(p)) + usize::from(on(t));
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Fraction of pixels on which the masks agree.
pub fn accuracy(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth, "accuracy")?;
    let agree = pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(&p, &t)| on(p) == on(t))
        .count();
    Ok(agree as f64 / pred.numel() as f64)
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform of one `h×w` plane: distance
/// from every pixel to the nearest foreground pixel.
fn squared_distance_transform(plane: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut d: Vec<f64> = plane.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = d[y * w + x];
        }
        lower_envelope(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&d[y * w..(y + 1) * w]);
        lower_envelope(&f[..w], &mut out[..w], &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    d
}

/// `out[q] = min_p (q − p)² + f[p]` by the lower envelope of parabolas.
fn lower_envelope(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let parabola = |p: usize| f[p] + (p * p) as f64;
        let mut s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Mean over foreground pixels of one set of the distance to the other set,
/// averaged over both directions. Leading axes are flattened into
/// independent planes whose values are averaged.
///
/// When exactly one mask is empty the image diagonal is returned; two empty
/// masks give `0`.
pub fn average_hausdorff(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth, "average_hausdorff")?;
    let nd = pred.ndim();
    let (h, w) = (pred.shape()[nd - 2], pred.shape()[nd - 1]);
    let planes = pred.numel() / (h * w);
    let mut total = 0.0;
    for i in 0..planes {
        let range = i * h * w..(i + 1) * h * w;
        let a: Vec<bool> = pred.data()[range.clone()].iter().map(|&v| on(v)).collect();
        let b: Vec<bool> = truth.data()[range].iter().map(|&v| on(v)).collect();
        total += plane_ahd(&a, &b, h, w);
    }
    Ok(total / planes as f64)
}

fn plane_ahd(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (na, nb) = (
        a.iter().filter(|&&x| x).count(),
        b.iter().filter(|&&x| x).count(),
    );
    match (na, nb) {
        (0, 0) => return 0.0,
        (0, _) | (_, 0) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let to_b = squared_distance_transform(b, h, w);
    let to_a = squared_distance_transform(a, h, w);
    let mean_dist = |set: &[bool], dt: &[f64], n: usize| {
        set.iter()
            .zip(dt)
            .filter(|(&s, _)| s)
            .map(|(_, d)| d.sqrt())
            .sum::<f64>()
            / n as f64
    };
    (mean_dist(a, &to_b, na) + mean_dist(b, &to_a, nb)) / 2.0
}

/// All three metrics of binarized `probabilities` against `truth`.
pub fn evaluate(probabilities: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    let pred = binarize(probabilities);
    Ok(MetricReport {
        dice: dice(&pred, truth)?,
        accuracy: accuracy(&pred, truth)?,
        ahd: average_hausdorff(&pred, truth)?,
    })
}

/// `sample_id,dice,accuracy,ahd` rows.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("sample_id,dice,accuracy,ahd\n");
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", r.dice, r.accuracy, r.ahd));
    }
    out
}

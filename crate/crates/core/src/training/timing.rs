use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::training::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeRatio {
    /// Median seconds per forward batch of the measured model.
    pub seconds: f64,
    /// Median seconds per forward batch of the baseline.
    pub baseline_seconds: f64,
    /// Median over batches of the per-batch time ratio.
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn forward_once(model: &Model, batch: &[&Example]) -> Result<f64> {
    let t0 = Instant::now();
    let mut g = Graph::new(&model.store);
    let l = model.logits(&mut g, batch)?;
    std::hint::black_box(g.value(l));
    Ok(t0.elapsed().as_secs_f64())
}

fn batches(xs: &[Example], batch_size: usize, n: usize) -> Result<Vec<Vec<&Example>>> {
    if xs.is_empty() || batch_size == 0 || n == 0 {
        return Err(Error::contract("timing needs examples, a batch size and at least one batch"));
    }
    Ok((0..n).map(|b| (0..batch_size).map(|i| &xs[(b * batch_size + i) % xs.len()]).collect()).collect())
}

/// Median forward seconds per batch over `n_batches`, after `warmup` unmeasured batches.
pub fn time_forward(model: &Model, xs: &[Example], batch_size: usize, n_batches: usize, warmup: usize) -> Result<f64> {
    let bs = batches(xs, batch_size, n_batches)?;
    for b in bs.iter().cycle().take(warmup) {
        forward_once(model, b)?;
    }
    Ok(median(bs.iter().map(|b| forward_once(model, b)).collect::<Result<_>>()?))
}

/// Forward cost of `model` relative to `baseline` on identical batches.
///
/// The two models alternate batch by batch, swapping which goes first, so
/// drift in machine load and cache effects hit both. The ratio pairs the two
/// timings of each batch before taking the median.
pub fn measure_time(
    model: &Model,
    baseline: &Model,
    xs: &[Example],
    batch_size: usize,
    n_batches: usize,
    warmup: usize,
) -> Result<TimeRatio> {
    let bs = batches(xs, batch_size, n_batches)?;
    for b in bs.iter().cycle().take(warmup) {
        forward_once(baseline, b)?;
        forward_once(model, b)?;
    }
    let (mut mine, mut base) = (Vec::new(), Vec::new());
    for (i, b) in bs.iter().enumerate() {
        if i % 2 == 0 {
            base.push(forward_once(baseline, b)?);
            mine.push(forward_once(model, b)?);
        } else {
            mine.push(forward_once(model, b)?);
            base.push(forward_once(baseline, b)?);
        }
    }
    let ratio = median(mine.iter().zip(&base).map(|(m, b)| m / b).collect());
    Ok(TimeRatio { seconds: median(mine), baseline_seconds: median(base), ratio })
}

/// Least-squares line through `(x, y)`: returns `(slope, intercept)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Largest `|y − fit| / fit` over the points.
pub fn max_relative_deviation(x: &[f64], y: &[f64]) -> f64 {
    let (a, b) = linear_fit(x, y);
    x.iter().zip(y).map(|(xi, yi)| ((yi - (a * xi + b)) / (a * xi + b)).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn exact_line_has_zero_deviation() {
        let x = [1.0, 2.0, 4.0, 8.0, 16.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + 0.1).collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a - 0.5).abs() < 1e-12 && (b - 0.1).abs() < 1e-12);
        assert!(max_relative_deviation(&x, &y) < 1e-12);
    }
}

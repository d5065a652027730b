//! Deterministic reductions over path arrays.
//!
//! Every sum is formed from fixed-size chunks whose partial results are
//! combined sequentially, so results do not depend on the thread count.

use rayon::prelude::*;

pub const CHUNK: usize = 4096;

/// Sum of `f(n)` over `0..len`, reduced in fixed chunks.
pub fn chunked_sum<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(len);
            let mut s = 0.0;
            for n in lo..hi {
                s += f(n);
            }
            s
        })
        .collect();
    partials.iter().sum()
}

/// Vector-valued variant of [`chunked_sum`]: `f(n, acc)` adds into `acc`.
pub fn chunked_sum_vec<F>(len: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    chunked_sum_vec_with(len, width, || (), |n, _, acc| f(n, acc))
}

/// [`chunked_sum_vec`] with per-chunk scratch built by `init`, so the
/// summand can reuse buffers instead of allocating per path.
pub fn chunked_sum_vec_with<S, I, F>(len: usize, width: usize, init: I, f: F) -> Vec<f64>
where
    I: Fn() -> S + Sync,
    F: Fn(usize, &mut S, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(len);
            let mut acc = vec![0.0; width];
            let mut scratch = init();
            for n in lo..hi {
                f(n, &mut scratch, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; width];
    for p in &partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    chunked_sum(xs.len(), |n| xs[n]) / xs.len() as f64
}

/// Sample mean and its standard error (sample standard deviation over sqrt(n)).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = mean(xs);
    if n == 1 {
        return (m, 0.0);
    }
    let ss = chunked_sum(n, |i| (xs[i] - m) * (xs[i] - m));
    (m, (ss / (n - 1) as f64 / n as f64).sqrt())
}

/// Sample variance (unbiased).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    chunked_sum(n, |i| (xs[i] - m) * (xs[i] - m)) / (n - 1) as f64
}

/// Standard error of the sample variance, from the fourth central moment.
pub fn variance_se(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let v = variance(xs);
    let m4 = chunked_sum(xs.len(), |i| (xs[i] - m).powi(4)) / n;
    ((m4 - v * v) / n).max(0.0).sqrt()
}

/// Standard error of the mean by batch means over `batches` contiguous batches.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let n = xs.len();
    let b = batches.min(n);
    if b < 2 {
        return 0.0;
    }
    let size = n / b;
    let means: Vec<f64> = (0..b)
        .map(|k| {
            let hi = if k + 1 == b { n } else { (k + 1) * size };
            mean(&xs[k * size..hi])
        })
        .collect();
    (variance(&means) / b as f64).sqrt()
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

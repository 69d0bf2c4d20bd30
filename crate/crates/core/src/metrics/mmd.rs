use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Pooled points used for the median heuristic are capped at this many.
const MEDIAN_POINTS: usize = 1000;

fn sq_dist<S: Scalar>(a: ndarray::ArrayView1<S>, b: ndarray::ArrayView1<S>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum()
}

/// Median pairwise Euclidean distance over the pooled sample (evenly strided
/// down to at most 1000 points). Falls back to 1 when the median is zero.
pub fn median_bandwidth<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> f64 {
    let pooled: Vec<_> = a.outer_iter().chain(b.outer_iter()).collect();
    let stride = pooled.len().div_ceil(MEDIAN_POINTS).max(1);
    let pts: Vec<_> = pooled.into_iter().step_by(stride).collect();
    let mut dists = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            dists.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn kernel_matrix<S: Scalar>(pooled: ArrayView2<S>, bandwidth: f64) -> Array2<f64> {
    let n = pooled.nrows();
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = 1.0;
        for j in i + 1..n {
            let v = (-sq_dist(pooled.row(i), pooled.row(j)) * scale).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Unbiased MMD² for a split of the pooled kernel matrix: rows with
/// `in_a[i]` form the first sample.
fn mmd_from_kernel(k: &Array2<f64>, in_a: &[bool]) -> f64 {
    let m = in_a.iter().filter(|&&x| x).count() as f64;
    let n = in_a.len() as f64 - m;
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for i in 0..in_a.len() {
        for j in 0..in_a.len() {
            if i == j {
                continue;
            }
            let v = k[[i, j]];
            match (in_a[i], in_a[j]) {
                (true, true) => aa += v,
                (false, false) => bb += v,
                (true, false) => ab += v,
                (false, true) => {}
            }
        }
    }
    aa / (m * (m - 1.0)) + bb / (n * (n - 1.0)) - 2.0 * ab / (m * n)
}

fn check_samples<S: Scalar>(a: &ArrayView2<S>, b: &ArrayView2<S>) -> Result<()> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("MMD needs at least two rows per sample"));
    }
    check_dim("MMD sample widths", a.ncols(), b.ncols())
}

/// Unbiased MMD² with an RBF kernel `exp(-d² / (2 h²))`, clamped at zero.
pub fn mmd_rbf_with_bandwidth<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    bandwidth: f64,
) -> Result<f64> {
    check_samples(&a, &b)?;
    let pooled = concatenate(Axis(0), &[a, b]).expect("widths checked");
    let k = kernel_matrix(pooled.view(), bandwidth);
    let in_a: Vec<bool> = (0..pooled.nrows()).map(|i| i < a.nrows()).collect();
    Ok(mmd_from_kernel(&k, &in_a).max(0.0))
}

/// [`mmd_rbf_with_bandwidth`] with the median-heuristic bandwidth.
pub fn mmd_rbf<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Result<f64> {
    check_samples(&a, &b)?;
    mmd_rbf_with_bandwidth(a, b, median_bandwidth(a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub bandwidth: f64,
    /// `(1 + #{null ≥ statistic}) / (1 + permutations)`.
    pub p_value: f64,
    /// Empirical 99th percentile of the permutation null.
    pub null_q99: f64,
}

/// Two-sample permutation test on the MMD² statistic (median bandwidth fixed
/// from the pooled sample, which every permutation shares).
pub fn mmd_permutation_test<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    check_samples(&a, &b)?;
    let bandwidth = median_bandwidth(a, b);
    let pooled = concatenate(Axis(0), &[a, b]).expect("widths checked");
    let k = kernel_matrix(pooled.view(), bandwidth);
    let mut in_a: Vec<bool> = (0..pooled.nrows()).map(|i| i < a.nrows()).collect();
    let statistic = mmd_from_kernel(&k, &in_a).max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        in_a.shuffle(&mut rng);
        null.push(mmd_from_kernel(&k, &in_a).max(0.0));
    }
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    null.sort_by(f64::total_cmp);
    let null_q99 = if null.is_empty() {
        f64::INFINITY
    } else {
        null[((null.len() as f64 * 0.99).ceil() as usize).clamp(1, null.len()) - 1]
    };
    Ok(PermutationTest {
        statistic,
        bandwidth,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        null_q99,
    })
}

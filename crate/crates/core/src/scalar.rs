//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the networks, the handler and the metrics.
///
/// Implemented for `f32` and `f64`. Constants are written as `f64` literals
/// and converted with [`Scalar::lit`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Smallest positive denominator allowed anywhere a division could blow up.
    const DENOM_FLOOR: f64 = 1e-12;

    #[inline(always)]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline(always)]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `max(self, DENOM_FLOOR)`.
    #[inline(always)]
    fn floored(self) -> Self {
        self.max(Self::lit(Self::DENOM_FLOOR))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable softmax of one row.
pub fn softmax<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = row.iter().map(|&z| (z - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax of `row / temperature`.
pub fn tempered_softmax<S: Scalar>(row: &[S], temperature: S) -> Vec<S> {
    let scaled: Vec<S> = row.iter().map(|&z| z / temperature).collect();
    softmax(&scaled)
}

/// `z / sum(z)`, with the sum floored at `DENOM_FLOOR`.
pub fn normalize<S: Scalar>(z: &[S]) -> Vec<S> {
    let total: S = z.iter().copied().sum();
    let total = total.floored();
    z.iter().map(|&v| v / total).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Indices of the largest and second-largest entries (lowest index wins ties).
///
/// Requires at least two entries.
pub fn top_two<S: Scalar>(row: &[S]) -> (usize, usize) {
    debug_assert!(row.len() >= 2);
    let first = argmax(row);
    let mut second = if first == 0 { 1 } else { 0 };
    for (j, &v) in row.iter().enumerate() {
        if j != first && v > row[second] {
            second = j;
        }
    }
    (first, second)
}

//! Exact evaluation of the label-shift error-gap bound on finite instances.
//!
//! With `P(x | y)` shared across domains, a stochastic classifier
//! `P(Ŷ = i | x) = softmax(f(x))_i`, and the adapted prediction
//! `P(Ŷ_o = i | x) ∝ P(Ŷ = i | x) · p_oe_i / p_s_i` on the target, the gap
//! `|ε(Ŷ | X_s) − ε(Ŷ_o | X_t)|` is compared with
//! `K1 · ‖1 − p_oe / p_t‖₁ · BSE + K2 · Δ_CE`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{normalize, softmax};

pub const MAX_INPUTS: usize = 12;
pub const MAX_CLASSES: usize = 4;
const GLS_TOLERANCE: f64 = 1e-12;
const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    /// `P(x | y)` on the source, `C × X`.
    pub source_conditionals: Array2<f64>,
    /// `P(x | y)` on the target; must equal the source table.
    pub target_conditionals: Array2<f64>,
    pub source_prior: Vec<f64>,
    pub target_prior: Vec<f64>,
    /// Classifier logits per input on the source domain, `X × C`.
    pub source_logits: Array2<f64>,
    /// Classifier logits per input after adaptation on the target, `X × C`.
    pub target_logits: Array2<f64>,
    /// Online target label estimate `p_oe`.
    pub online_estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub source_error: f64,
    pub target_error: f64,
    pub lhs: f64,
    pub k1: f64,
    pub k2: f64,
    pub bse: f64,
    pub delta_ce: f64,
    pub l1_term: f64,
    pub rhs: f64,
    pub bound_holds: bool,
}

fn check_simplex(name: &str, v: &[f64], strictly_positive: bool) -> Result<()> {
    let sum: f64 = v.iter().sum();
    let bad = v
        .iter()
        .any(|&p| !p.is_finite() || p < 0.0 || (strictly_positive && p <= 0.0));
    if bad || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!("{name} is not a valid distribution")));
    }
    Ok(())
}

impl DiscreteInstance {
    pub fn num_classes(&self) -> usize {
        self.source_prior.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.source_conditionals.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let x = self.num_inputs();
        if !(2..=MAX_CLASSES).contains(&c) || !(1..=MAX_INPUTS).contains(&x) {
            return Err(Error::invalid(format!(
                "instance must have 2..={MAX_CLASSES} classes and 1..={MAX_INPUTS} inputs"
            )));
        }
        for (name, m, rows, cols) in [
            ("source conditionals", &self.source_conditionals, c, x),
            ("target conditionals", &self.target_conditionals, c, x),
            ("source logits", &self.source_logits, x, c),
            ("target logits", &self.target_logits, x, c),
        ] {
            check_dim(name, rows, m.nrows())?;
            check_dim(name, cols, m.ncols())?;
        }
        check_dim("target prior", c, self.target_prior.len())?;
        check_dim("online estimate", c, self.online_estimate.len())?;
        check_simplex("source prior", &self.source_prior, true)?;
        check_simplex("target prior", &self.target_prior, true)?;
        check_simplex("online estimate", &self.online_estimate, false)?;
        for row in self.source_conditionals.outer_iter() {
            check_simplex("P(x | y)", row.as_slice().expect("contiguous"), false)?;
        }
        let gls_gap = (&self.source_conditionals - &self.target_conditionals)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if gls_gap > GLS_TOLERANCE {
            return Err(Error::invalid(format!(
                "class-conditional input distributions differ across domains by {gls_gap}"
            )));
        }
        Ok(())
    }

    /// Random instance with shared `P(x | y)`. Priors, conditionals and
    /// `p_oe` are flat-Dirichlet draws; source logits are `N(0, 2²)`, and the
    /// target logits add `N(0, 0.5²)` perturbations.
    pub fn random<R: Rng>(rng: &mut R, num_classes: usize, num_inputs: usize) -> Self {
        let mut simplex = |len: usize| -> Vec<f64> {
            let draws: Vec<f64> = (0..len).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
            let s: f64 = draws.iter().sum();
            draws.iter().map(|v| (v / s).max(1e-3)).collect::<Vec<f64>>()
        };
        let renorm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|p| p / s).collect::<Vec<f64>>()
        };
        let mut conditionals = Array2::zeros((num_classes, num_inputs));
        for mut row in conditionals.outer_iter_mut() {
            let p = renorm(simplex(num_inputs));
            row.assign(&ndarray::Array1::from(p));
        }
        let source_prior = renorm(simplex(num_classes));
        let target_prior = renorm(simplex(num_classes));
        let online_estimate = renorm(simplex(num_classes));
        let wide = Normal::new(0.0, 2.0).expect("valid normal");
        let narrow = Normal::new(0.0, 0.5).expect("valid normal");
        let source_logits =
            Array2::from_shape_simple_fn((num_inputs, num_classes), || wide.sample(rng));
        let target_logits = source_logits.mapv(|v| v + narrow.sample(rng));
        Self {
            target_conditionals: conditionals.clone(),
            source_conditionals: conditionals,
            source_prior,
            target_prior,
            source_logits,
            target_logits,
            online_estimate,
        }
    }
}

/// `P(Ŷ = i | Y = i')` as a `C × C` table (rows: true class).
fn conditional_predictions(conditionals: &Array2<f64>, predictions: &[Vec<f64>]) -> Array2<f64> {
    let c = conditionals.nrows();
    let mut table = Array2::zeros((c, c));
    for true_class in 0..c {
        for (x, pred) in predictions.iter().enumerate() {
            let px = conditionals[[true_class, x]];
            for (i, &p) in pred.iter().enumerate() {
                table[[true_class, i]] += px * p;
            }
        }
    }
    table
}

fn error_rate(prior: &[f64], table: &Array2<f64>) -> f64 {
    let c = prior.len();
    (0..c)
        .map(|t| prior[t] * (0..c).filter(|&i| i != t).map(|i| table[[t, i]]).sum::<f64>())
        .sum()
}

fn reweighted(logits: &Array2<f64>, weights: &[f64]) -> Vec<Vec<f64>> {
    logits
        .outer_iter()
        .map(|row| {
            let p = softmax(row.as_slice().expect("contiguous"));
            let w: Vec<f64> = p.iter().zip(weights).map(|(a, b)| a * b).collect();
            normalize(&w)
        })
        .collect()
}

/// Exact enumeration of both sides of the bound.
pub fn theorem_bound_check(instance: &DiscreteInstance) -> Result<BoundReport> {
    instance.validate()?;
    let c = instance.num_classes();
    let cf = c as f64;
    let p_s = &instance.source_prior;
    let p_t = &instance.target_prior;
    let p_oe = &instance.online_estimate;

    let ones = vec![1.0; c];
    let ratio: Vec<f64> = p_oe.iter().zip(p_s).map(|(o, s)| o / s).collect();
    let pred_source = reweighted(&instance.source_logits, &ones);
    let pred_target = reweighted(&instance.target_logits, &ones);
    let pred_adapted = reweighted(&instance.target_logits, &ratio);

    let cond_source = conditional_predictions(&instance.source_conditionals, &pred_source);
    let cond_target = conditional_predictions(&instance.target_conditionals, &pred_target);
    let cond_adapted = conditional_predictions(&instance.target_conditionals, &pred_adapted);

    let source_error = error_rate(p_s, &cond_source);
    let target_error = error_rate(p_t, &cond_adapted);
    let lhs = (source_error - target_error).abs();

    let bse = (0..c)
        .map(|t| (0..c).filter(|&i| i != t).map(|i| cond_source[[t, i]]).sum::<f64>())
        .fold(0.0, f64::max);
    let mut delta_ce = 0.0f64;
    for t in 0..c {
        for i in 0..c {
            if i != t {
                delta_ce = delta_ce.max((cond_source[[t, i]] - cond_target[[t, i]]).abs());
            }
        }
    }
    let max_pt = p_t.iter().copied().fold(0.0, f64::max);
    let min_ps = p_s.iter().copied().fold(f64::INFINITY, f64::min);
    let k1 = cf * (cf - 1.0).powi(2) * max_pt;
    let k2 = (cf - 1.0) + (cf - 1.0).powi(2) / min_ps;
    let l1_term: f64 = p_oe.iter().zip(p_t).map(|(o, t)| (1.0 - o / t).abs()).sum();
    let rhs = k1 * l1_term * bse + k2 * delta_ce;
    Ok(BoundReport {
        source_error,
        target_error,
        lhs,
        k1,
        k2,
        bse,
        delta_ce,
        l1_term,
        rhs,
        bound_holds: lhs <= rhs + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn symmetric_instance() -> DiscreteInstance {
        let cond = array![[0.5, 0.3, 0.2], [0.1, 0.2, 0.7]];
        let logits = array![[1.0, -0.5], [0.2, 0.1], [-1.5, 0.7]];
        DiscreteInstance {
            source_conditionals: cond.clone(),
            target_conditionals: cond,
            source_prior: vec![0.6, 0.4],
            target_prior: vec![0.6, 0.4],
            source_logits: logits.clone(),
            target_logits: logits,
            online_estimate: vec![0.6, 0.4],
        }
    }

    #[test]
    fn exact_weights_give_zero_both_sides() {
        let r = theorem_bound_check(&symmetric_instance()).unwrap();
        assert_eq!(r.delta_ce, 0.0);
        assert_eq!(r.l1_term, 0.0);
        assert_eq!(r.rhs, 0.0);
        assert_eq!(r.lhs, 0.0);
        assert!(r.bound_holds);
    }

    #[test]
    fn perturbing_estimate_grows_l1() {
        let mut inst = symmetric_instance();
        let base = theorem_bound_check(&inst).unwrap().l1_term;
        let mut last = base;
        for eps in [0.01, 0.05, 0.2] {
            inst.online_estimate = vec![0.6 - eps, 0.4 + eps];
            let l1 = theorem_bound_check(&inst).unwrap().l1_term;
            assert!(l1 > last);
            last = l1;
        }
    }

    #[test]
    fn mismatched_conditionals_rejected() {
        let mut inst = symmetric_instance();
        inst.target_conditionals[[0, 0]] = 0.4;
        inst.target_conditionals[[0, 1]] = 0.4;
        assert!(theorem_bound_check(&inst).is_err());
    }

    #[test]
    fn random_instances_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let inst = DiscreteInstance::random(&mut rng, 3, 7);
            inst.validate().unwrap();
            let r = theorem_bound_check(&inst).unwrap();
            assert!(r.lhs >= 0.0 && r.rhs >= 0.0 && r.bse >= 0.0);
        }
    }
}

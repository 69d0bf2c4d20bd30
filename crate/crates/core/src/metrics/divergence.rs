use crate::scalar::Scalar;

/// `KL(p || q)` in nats, with `0 · ln 0 = 0`.
pub fn kl_divergence<S: Scalar>(p: &[S], q: &[S]) -> S {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > S::zero())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats; bounded by `ln 2`.
pub fn js_divergence<S: Scalar>(p: &[S], q: &[S]) -> S {
    let half = S::lit(0.5);
    let m: Vec<S> = p.iter().zip(q).map(|(&a, &b)| half * (a + b)).collect();
    let js = half * kl_divergence(p, &m) + half * kl_divergence(q, &m);
    js.max(S::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_is_zero() {
        assert_eq!(js_divergence(&[0.3_f64, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn disjoint_support_is_ln2() {
        let js = js_divergence(&[1.0_f64, 0.0], &[0.0, 1.0]);
        assert!((js - std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(p in simplex(4), q in simplex(4)) {
            let a = js_divergence(&p, &q);
            let b = js_divergence(&q, &p);
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&a));
        }
    }
}

use crate::error::{Error, Result};
use crate::injection::{ContextVector, InjectionCoefficients, Provenance};

fn check_vector_shapes(uploads: &[ContextVector]) -> Result<&ContextVector> {
    let first = uploads.first().ok_or(Error::Empty("context vector cohort"))?;
    if let Some(bad) = uploads.iter().find(|v| !v.same_shape(first)) {
        return Err(Error::Shape(format!(
            "context vector {}×{} among {}×{}",
            bad.n_layers(),
            bad.d_model(),
            first.n_layers(),
            first.d_model()
        )));
    }
    Ok(first)
}

/// Unweighted element-wise mean of client context vectors, accumulated in
/// double precision in slice order. `count` is the number of vectors
/// averaged.
pub fn aggregate_context_vectors(uploads: &[ContextVector], round: u32) -> Result<ContextVector> {
    let weights = vec![1.0; uploads.len()];
    aggregate_context_vectors_weighted(uploads, &weights, round)
}

/// Weighted element-wise mean; weights need not be normalised.
pub fn aggregate_context_vectors_weighted(
    uploads: &[ContextVector],
    weights: &[f64],
    round: u32,
) -> Result<ContextVector> {
    let first = check_vector_shapes(uploads)?;
    if weights.len() != uploads.len() {
        return Err(Error::Shape("one weight per upload".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("aggregation weights must be non-negative with a positive sum".into()));
    }
    let mut acc = vec![0.0f64; first.as_slice().len()];
    for (v, &w) in uploads.iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
            *a += w * x as f64;
        }
    }
    ContextVector::from_parts(
        first.n_layers(),
        first.d_model(),
        acc.into_iter().map(|a| (a / total) as f32).collect(),
        count_of(uploads.len())?,
        Provenance::Global { round },
    )
}

fn count_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config("cohort too large".into()))
}

/// Unweighted element-wise mean of client coefficient sets.
pub fn aggregate_coefficients(uploads: &[InjectionCoefficients]) -> Result<InjectionCoefficients> {
    let weights = vec![1.0; uploads.len()];
    aggregate_coefficients_weighted(uploads, &weights)
}

pub fn aggregate_coefficients_weighted(
    uploads: &[InjectionCoefficients],
    weights: &[f64],
) -> Result<InjectionCoefficients> {
    let first = uploads.first().ok_or(Error::Empty("coefficient cohort"))?;
    if uploads.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Shape("coefficient sets of different lengths".into()));
    }
    if weights.len() != uploads.len() {
        return Err(Error::Shape("one weight per upload".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("aggregation weights must be non-negative with a positive sum".into()));
    }
    let mut acc = vec![0.0f64; first.len()];
    for (c, &w) in uploads.iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(c.as_slice()) {
            *a += w * x as f64;
        }
    }
    InjectionCoefficients::from_values(acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// Fold newly joined clients into a running mean over `prior_clients`
/// clients, giving the same result as averaging all client vectors at once.
pub fn update_global_vector_incremental(
    current: &ContextVector,
    new_uploads: &[ContextVector],
    prior_clients: usize,
) -> Result<ContextVector> {
    if prior_clients == 0 {
        return Err(Error::Config("prior client count must be at least 1".into()));
    }
    if let Some(bad) = new_uploads.iter().find(|v| !v.same_shape(current)) {
        return Err(Error::Shape(format!(
            "context vector {}×{} does not match {}×{}",
            bad.n_layers(),
            bad.d_model(),
            current.n_layers(),
            current.d_model()
        )));
    }
    if new_uploads.is_empty() {
        return Ok(current.clone());
    }
    let mut acc: Vec<f64> = current.as_slice().iter().map(|&x| x as f64 * prior_clients as f64).collect();
    for v in new_uploads {
        for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
            *a += x as f64;
        }
    }
    let n = prior_clients + new_uploads.len();
    let round = match current.provenance() {
        Provenance::Global { round } => round,
        _ => 0,
    };
    ContextVector::from_parts(
        current.n_layers(),
        current.d_model(),
        acc.into_iter().map(|a| (a / n as f64) as f32).collect(),
        count_of(n)?,
        Provenance::Global { round },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vector(l: usize, d: usize, data: Vec<f32>) -> ContextVector {
        ContextVector::from_parts(l, d, data, 1, Provenance::Unspecified).unwrap()
    }

    fn vectors(l: usize, d: usize, k: usize) -> impl Strategy<Value = Vec<ContextVector>> {
        prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 2 * l * d), k)
            .prop_map(move |vs| vs.into_iter().map(|v| vector(l, d, v)).collect())
    }

    #[test]
    fn single_client_is_identity() {
        let v = vector(1, 2, vec![1.0, -2.0, 3.5, 0.25]);
        let g = aggregate_context_vectors(std::slice::from_ref(&v), 1).unwrap();
        assert_eq!(g.as_slice(), v.as_slice());
        assert_eq!(g.provenance(), Provenance::Global { round: 1 });
        let c = InjectionCoefficients::from_values(vec![0.1, 0.9, -0.3, 1.2]).unwrap();
        assert_eq!(aggregate_coefficients(std::slice::from_ref(&c)).unwrap(), c);
    }

    #[test]
    fn empty_and_mismatched_cohorts_fail() {
        assert!(aggregate_context_vectors(&[], 0).is_err());
        assert!(aggregate_coefficients(&[]).is_err());
        let a = vector(1, 2, vec![0.0; 4]);
        let b = vector(2, 1, vec![0.0; 4]);
        assert!(aggregate_context_vectors(&[a.clone(), b.clone()], 0).is_err());
        assert!(update_global_vector_incremental(&a, &[b], 1).is_err());
        let c1 = InjectionCoefficients::neutral(1).unwrap();
        let c2 = InjectionCoefficients::neutral(2).unwrap();
        assert!(aggregate_coefficients(&[c1, c2]).is_err());
    }

    #[test]
    fn weighted_mode_weights_by_share() {
        let a = vector(1, 1, vec![0.0, 0.0]);
        let b = vector(1, 1, vec![4.0, 8.0]);
        let g = aggregate_context_vectors_weighted(&[a, b], &[3.0, 1.0], 0).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn vector_mean_matches_brute_force(vs in vectors(2, 3, 3)) {
            let g = aggregate_context_vectors(&vs, 0).unwrap();
            for i in 0..12 {
                let oracle = (vs[0].as_slice()[i] as f64 + vs[1].as_slice()[i] as f64 + vs[2].as_slice()[i] as f64) / 3.0;
                prop_assert!((g.as_slice()[i] as f64 - oracle).abs() <= 1e-6);
            }
        }

        #[test]
        fn identical_vectors_average_to_themselves(v in prop::collection::vec(-10.0f32..10.0, 8), k in 1usize..8) {
            let v = vector(2, 2, v);
            let g = aggregate_context_vectors(&vec![v.clone(); k], 0).unwrap();
            for (a, b) in g.as_slice().iter().zip(v.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn incremental_equals_batch(vs in vectors(1, 4, 5), split in 1usize..5) {
            let head = aggregate_context_vectors(&vs[..split], 0).unwrap();
            let inc = update_global_vector_incremental(&head, &vs[split..], split).unwrap();
            let batch = aggregate_context_vectors(&vs, 0).unwrap();
            for (a, b) in inc.as_slice().iter().zip(batch.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            prop_assert_eq!(inc.count(), 5);
        }

        #[test]
        fn adding_copies_of_the_mean_keeps_it(vs in vectors(1, 3, 3), k in 1usize..6) {
            let g = aggregate_context_vectors(&vs, 0).unwrap();
            let same = update_global_vector_incremental(&g, &vec![g.clone(); k], 3).unwrap();
            for (a, b) in same.as_slice().iter().zip(g.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            prop_assert_eq!(update_global_vector_incremental(&g, &[], 3).unwrap(), g);
        }

        #[test]
        fn coefficient_mean_matches_brute_force(
            // |x| < 2 keeps half an f32 ulp below 1e-7
            cs in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 8), 5)
        ) {
            let uploads: Vec<_> = cs.iter().map(|c| InjectionCoefficients::from_values(c.clone()).unwrap()).collect();
            let g = aggregate_coefficients(&uploads).unwrap();
            for i in 0..8 {
                let oracle = cs.iter().map(|c| c[i] as f64).sum::<f64>() / 5.0;
                prop_assert!((g.as_slice()[i] as f64 - oracle).abs() <= 1e-7);
            }
        }
    }
}

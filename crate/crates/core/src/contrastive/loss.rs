//! PointInfoNCE forward pass and analytic gradients.
//!
//! For the match set M with features f, the loss is
//!
//!   -sum_{(a,b) in M} log[ exp(f_a . f_b / tau) / sum_{(.,k) in M} exp(f_a . f_k / tau) ]
//!
//! where the denominator ranges over the target-side elements of M,
//! duplicates retained. Rows are stabilized by subtracting the per-row
//! maximum logit before exponentiation.

use thiserror::Error;

use super::features::FeatureStore;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LossError {
    #[error("empty match set")]
    EmptyMatchSet,
    #[error("non-finite feature value encountered")]
    NonFiniteFeature,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("pair index {0} out of container range {1}")]
    IndexOutOfRange(usize, usize),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Loss value plus gradient buffers shaped like the feature containers.
/// `grad_a`/`grad_b` are gradients of `loss_sum` with respect to the RAW
/// (pre-normalization) features; they are empty unless gradients were
/// requested.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss_sum: f64,
    pub loss_mean: f64,
    pub match_count: usize,
    pub tau: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Forward-only evaluation; gradient buffers are left empty.
pub fn point_info_nce<A, B>(
    store_a: &A,
    store_b: &B,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<LossReport, LossError>
where
    A: FeatureStore + ?Sized,
    B: FeatureStore + ?Sized,
{
    evaluate(store_a, store_b, pairs, tau, false)
}

/// Forward plus exact gradients of `loss_sum` with respect to every
/// participating raw feature vector; non-participating entries stay zero.
pub fn point_info_nce_grad<A, B>(
    store_a: &A,
    store_b: &B,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<LossReport, LossError>
where
    A: FeatureStore + ?Sized,
    B: FeatureStore + ?Sized,
{
    evaluate(store_a, store_b, pairs, tau, true)
}

fn evaluate<A, B>(
    store_a: &A,
    store_b: &B,
    pairs: &[(usize, usize)],
    tau: f64,
    with_grads: bool,
) -> Result<LossReport, LossError>
where
    A: FeatureStore + ?Sized,
    B: FeatureStore + ?Sized,
{
    let n = pairs.len();
    if n == 0 {
        return Err(LossError::EmptyMatchSet);
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let d = store_a.dim();
    if d != store_b.dim() {
        return Err(LossError::DimensionMismatch(d, store_b.dim()));
    }
    for &(ia, ib) in pairs {
        if ia >= store_a.count() {
            return Err(LossError::IndexOutOfRange(ia, store_a.count()));
        }
        if ib >= store_b.count() {
            return Err(LossError::IndexOutOfRange(ib, store_b.count()));
        }
        if store_a.vector(ia).iter().chain(store_b.vector(ib)).any(|x| !x.is_finite()) {
            return Err(LossError::NonFiniteFeature);
        }
    }

    // logits[i * n + j] = a_i . b_j / tau over the gathered pair features
    let mut logits = vec![0.0f64; n * n];
    for (i, &(ia, _)) in pairs.iter().enumerate() {
        let va = store_a.vector(ia);
        for (j, &(_, jb)) in pairs.iter().enumerate() {
            let vb = store_b.vector(jb);
            let mut dot = 0.0;
            for c in 0..d {
                dot += va[c] * vb[c];
            }
            logits[i * n + j] = dot / tau;
        }
    }

    let mut loss_sum = 0.0;
    let mut softmax = if with_grads { vec![0.0f64; n * n] } else { Vec::new() };
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let row_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut exp_sum = 0.0;
        for &l in row {
            exp_sum += (l - row_max).exp();
        }
        loss_sum += row_max + exp_sum.ln() - row[i];
        if with_grads {
            for j in 0..n {
                softmax[i * n + j] = (row[j] - row_max).exp() / exp_sum;
            }
        }
    }

    let (grad_a, grad_b) = if with_grads {
        let mut grad_a = vec![0.0f64; store_a.count() * d];
        let mut grad_b = vec![0.0f64; store_b.count() * d];
        // dL/dlogit_ij = softmax_ij - delta_ij, chained through the dot:
        //   dL/da_i += (s_ij - d_ij) b_j / tau, dL/db_j += (s_ij - d_ij) a_i / tau
        for (i, &(ia, _)) in pairs.iter().enumerate() {
            let va = store_a.vector(ia);
            for (j, &(_, jb)) in pairs.iter().enumerate() {
                let g = (softmax[i * n + j] - if i == j { 1.0 } else { 0.0 }) / tau;
                if g == 0.0 {
                    continue;
                }
                let vb = store_b.vector(jb);
                for c in 0..d {
                    grad_a[ia * d + c] += g * vb[c];
                    grad_b[jb * d + c] += g * va[c];
                }
            }
        }
        // chain through L2 normalization where the container was normalized:
        // for unit u = f / |f|, dL/df = (g - (g . u) u) / |f|
        apply_normalization_chain(store_a, &mut grad_a);
        apply_normalization_chain(store_b, &mut grad_b);
        (grad_a, grad_b)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(LossReport {
        loss_sum,
        loss_mean: loss_sum / n as f64,
        match_count: n,
        tau,
        grad_a,
        grad_b,
    })
}

fn apply_normalization_chain<S: FeatureStore + ?Sized>(store: &S, grads: &mut [f64]) {
    let Some(norms) = store.norms() else { return };
    let d = store.dim();
    for i in 0..store.count() {
        let g = &mut grads[i * d..(i + 1) * d];
        if g.iter().all(|x| *x == 0.0) {
            continue;
        }
        let u = store.vector(i);
        let dot: f64 = g.iter().zip(u).map(|(gx, ux)| gx * ux).sum();
        for c in 0..d {
            g[c] = (g[c] - dot * u[c]) / norms[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::features::FeatureMap;

    fn map_of(rows: &[&[f64]], normalize: bool) -> FeatureMap {
        let dim = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMap::from_raw(rows.len() as u32, 1, dim, data, normalize).unwrap()
    }

    fn diag_pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, i)).collect()
    }

    #[test]
    fn single_match_loss_is_exactly_zero() {
        let a = map_of(&[&[0.3, -1.2, 0.5]], false);
        let b = map_of(&[&[2.0, 0.1, -0.4]], false);
        let rep = point_info_nce_grad(&a, &b, &[(0, 0)], 0.4).unwrap();
        assert_eq!(rep.loss_sum, 0.0);
        assert_eq!(rep.loss_mean, 0.0);
        assert!(rep.grad_a.iter().all(|g| *g == 0.0));
        assert!(rep.grad_b.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn identical_features_give_count_times_ln_count() {
        let f: &[f64] = &[0.5, -0.25, 1.0, 0.125];
        for tau in [0.1, 0.4, 1.0, 10.0] {
            let a = map_of(&[f, f, f, f], false);
            let b = map_of(&[f, f, f, f], false);
            let rep = point_info_nce(&a, &b, &diag_pairs(4), tau).unwrap();
            assert!(
                (rep.loss_sum - 4.0 * 4.0f64.ln()).abs() < 1e-9,
                "tau={tau}: {}",
                rep.loss_sum
            );
            assert!((rep.loss_sum - rep.loss_mean * 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_orthonormal_pairs_closed_form() {
        let a = map_of(&[&[1.0, 0.0], &[0.0, 1.0]], false);
        let b = map_of(&[&[1.0, 0.0], &[0.0, 1.0]], false);
        let rep = point_info_nce(&a, &b, &diag_pairs(2), 1.0).unwrap();
        // each term is ln(1 + e^-1)
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((rep.loss_sum - 0.626523).abs() < 1e-6);
        assert!((rep.loss_sum - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_match_set_is_an_error() {
        let a = map_of(&[&[1.0, 0.0]], false);
        assert_eq!(point_info_nce(&a, &a, &[], 0.4), Err(LossError::EmptyMatchSet));
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let a = map_of(&[&[f64::NAN, 0.0]], false);
        let b = map_of(&[&[1.0, 0.0]], false);
        assert_eq!(
            point_info_nce(&a, &b, &[(0, 0)], 0.4),
            Err(LossError::NonFiniteFeature)
        );
    }

    #[test]
    fn invalid_temperature_is_rejected() {
        let a = map_of(&[&[1.0, 0.0]], false);
        assert_eq!(
            point_info_nce(&a, &a, &[(0, 0)], 0.0),
            Err(LossError::InvalidTemperature(0.0))
        );
    }

    #[test]
    fn loss_is_nonnegative_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let d = rng.gen_range(1..6);
            let raw_a: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let raw_b: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = FeatureMap::from_raw(n as u32, 1, d, raw_a, false).unwrap();
            let b = FeatureMap::from_raw(n as u32, 1, d, raw_b, false).unwrap();
            let rep = point_info_nce(&a, &b, &diag_pairs(n), 0.4).unwrap();
            assert!(rep.loss_sum >= 0.0);
            assert!((rep.loss_sum - rep.loss_mean * n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn per_row_constant_logit_shift_leaves_terms_unchanged() {
        // b_j = e_{j+1} + e_0, a_i = e_{i+1}: logits are the identity.
        // a_i' = a_i + c e_0 adds the constant c to every logit of row i.
        let n = 4;
        let d = n + 1;
        let mut raw_a = vec![0.0; n * d];
        let mut raw_b = vec![0.0; n * d];
        for i in 0..n {
            raw_a[i * d + i + 1] = 1.0;
            raw_b[i * d + i + 1] = 1.0;
            raw_b[i * d] = 1.0;
        }
        let mut raw_shifted = raw_a.clone();
        for i in 0..n {
            raw_shifted[i * d] = 37.5; // adds 37.5 to all logits of row i
        }
        let a = FeatureMap::from_raw(n as u32, 1, d, raw_a, false).unwrap();
        let a2 = FeatureMap::from_raw(n as u32, 1, d, raw_shifted, false).unwrap();
        let b = FeatureMap::from_raw(n as u32, 1, d, raw_b, false).unwrap();
        let r1 = point_info_nce(&a, &b, &diag_pairs(n), 1.0).unwrap();
        let r2 = point_info_nce(&a2, &b, &diag_pairs(n), 1.0).unwrap();
        assert!((r1.loss_sum - r2.loss_sum).abs() < 1e-12);
    }

    fn finite_difference_check(normalize: bool, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let n_cells = 20;
        let n_pairs = 16;
        let tau = 0.4;
        let raw_a: Vec<f64> = (0..n_cells * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let raw_b: Vec<f64> = (0..n_cells * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        // duplicate container entries across pairs to exercise scatter-add
        let pairs: Vec<(usize, usize)> = (0..n_pairs)
            .map(|_| (rng.gen_range(0..n_cells), rng.gen_range(0..n_cells)))
            .collect();

        let build = |raw: &[f64]| {
            FeatureMap::from_raw(n_cells as u32, 1, d, raw.to_vec(), normalize).unwrap()
        };
        let a = build(&raw_a);
        let b = build(&raw_b);
        let rep = point_info_nce_grad(&a, &b, &pairs, tau).unwrap();

        let h = 1e-5;
        let loss_of = |ra: &[f64], rb: &[f64]| {
            point_info_nce(&build(ra), &build(rb), &pairs, tau).unwrap().loss_sum
        };
        for idx in 0..raw_a.len() {
            let mut plus = raw_a.clone();
            let mut minus = raw_a.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let num = (loss_of(&plus, &raw_b) - loss_of(&minus, &raw_b)) / (2.0 * h);
            assert_grad_close(num, rep.grad_a[idx], "a", idx);
        }
        for idx in 0..raw_b.len() {
            let mut plus = raw_b.clone();
            let mut minus = raw_b.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let num = (loss_of(&raw_a, &plus) - loss_of(&raw_a, &minus)) / (2.0 * h);
            assert_grad_close(num, rep.grad_b[idx], "b", idx);
        }
    }

    fn assert_grad_close(numerical: f64, analytic: f64, side: &str, idx: usize) {
        let scale = numerical.abs().max(analytic.abs());
        if scale < 1e-7 {
            assert!(
                (numerical - analytic).abs() < 1e-8,
                "{side}[{idx}]: near-zero grads differ: {numerical} vs {analytic}"
            );
        } else {
            let rel = (numerical - analytic).abs() / scale;
            assert!(
                rel < 1e-5,
                "{side}[{idx}]: rel error {rel}: numerical {numerical} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_unnormalized() {
        finite_difference_check(false, 11);
    }

    #[test]
    fn gradients_match_finite_differences_normalized() {
        finite_difference_check(true, 13);
    }

    #[test]
    fn normalized_gradient_is_tangent_to_the_feature() {
        // identical features everywhere: the raw-space gradient of each
        // participating vector must be orthogonal to the vector itself
        let f: &[f64] = &[0.4, -0.3, 0.9];
        let a = map_of(&[f, f, f], true);
        let b = map_of(&[f, f, f], true);
        let rep = point_info_nce_grad(&a, &b, &diag_pairs(3), 0.4).unwrap();
        use crate::contrastive::features::FeatureStore;
        for i in 0..3 {
            let g = &rep.grad_a[i * 3..(i + 1) * 3];
            let u = a.vector(i);
            let dot: f64 = g.iter().zip(u).map(|(x, y)| x * y).sum();
            assert!(dot.abs() < 1e-12, "grad not tangent: {dot}");
        }
    }

    #[test]
    fn non_participating_entries_have_zero_gradient() {
        let a = map_of(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]], false);
        let b = map_of(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]], false);
        let rep = point_info_nce_grad(&a, &b, &[(0, 0), (1, 1)], 0.4).unwrap();
        assert!(rep.grad_a[4..6].iter().all(|g| *g == 0.0));
        assert!(rep.grad_b[4..6].iter().all(|g| *g == 0.0));
    }
}

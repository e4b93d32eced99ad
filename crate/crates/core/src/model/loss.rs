//! Training objectives: Gaussian NLL, point MSE, NT-Xent and their sum.
//!
//! The batched forms return the loss together with its gradient with
//! respect to their input matrix, for use by the backward pass.

use crate::error::{Error, Result};
use crate::model::matrix::Matrix;
use crate::model::EffectDist;
use crate::scalar::Scalar;
use crate::world::Effect;

/// Raw log-variance outputs are clamped to this range before exponentiation.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);

/// Negative log-likelihood of `e` under three independent Gaussians.
pub fn nll_loss(dist: &EffectDist, e: &Effect) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    dist.mean
        .iter()
        .zip(dist.log_var)
        .zip(e.to_array())
        .map(|((&mu, lv), x)| 0.5 * (ln_2pi + lv) + (x - mu).powi(2) / (2.0 * lv.exp()))
        .sum()
}

/// NT-Xent over a batch of concatenated `[z_o, z_a]` rows, with each row's
/// self-similarity as its positive.
pub fn nt_xent_loss(embeddings: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Degenerate(format!(
            "NT-Xent needs at least 2 rows, got {}",
            embeddings.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(i) = embeddings
        .iter()
        .position(|r| r.iter().all(|&v| v == 0.0))
    {
        return Err(Error::Degenerate(format!("embedding row {i} has zero norm")));
    }
    let z = Matrix::<f64>::from_rows(embeddings);
    Ok(nt_xent_batch(&z, temperature).0)
}

/// `λ (nll + ntxent)`.
pub fn total_loss(nll: f64, ntxent: f64, lambda: f64) -> f64 {
    lambda * (nll + ntxent)
}

/// Mean squared error over the three axes.
pub fn mse_loss(prediction: &Effect, target: &Effect) -> f64 {
    prediction
        .to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / 3.0
}

/// Batch-mean Gaussian NLL. `out` holds `[μ (3), raw log σ² (3)]` per row.
pub(crate) fn nll_batch<T: Scalar>(out: &Matrix<T>, effects: &Matrix<T>) -> (T, Matrix<T>) {
    let n = out.rows();
    let inv_n = T::one() / T::of(n as f64);
    let half = T::of(0.5);
    let ln_2pi = T::of((2.0 * std::f64::consts::PI).ln());
    let (lo, hi) = (T::of(LOG_VAR_RANGE.0), T::of(LOG_VAR_RANGE.1));
    let mut grad = Matrix::zeros(n, 6);
    let mut total = T::zero();
    for i in 0..n {
        let o = out.row(i);
        let e = effects.row(i);
        let g = grad.row_mut(i);
        for j in 0..3 {
            let raw = o[3 + j];
            let lv = raw.max(lo).min(hi);
            let inv_var = (-lv).exp();
            let r = e[j] - o[j];
            total += half * (ln_2pi + lv) + half * r * r * inv_var;
            g[j] = -r * inv_var * inv_n;
            g[3 + j] = if raw < lo || raw > hi {
                T::zero()
            } else {
                half * (T::one() - r * r * inv_var) * inv_n
            };
        }
    }
    (total * inv_n, grad)
}

/// Batch-mean of the per-row MSE over 3 axes.
pub(crate) fn mse_batch<T: Scalar>(out: &Matrix<T>, effects: &Matrix<T>) -> (T, Matrix<T>) {
    let n = out.rows();
    let scale = T::one() / T::of(3.0 * n as f64);
    let mut grad = Matrix::zeros(n, 3);
    let mut total = T::zero();
    for i in 0..n {
        for j in 0..3 {
            let d = out.get(i, j) - effects.get(i, j);
            total += d * d;
            grad.set(i, j, T::of(2.0) * d * scale);
        }
    }
    (total * scale, grad)
}

/// NT-Xent value and its gradient with respect to the un-normalized rows.
/// Zero rows are treated as having a tiny norm instead of failing.
pub(crate) fn nt_xent_batch<T: Scalar>(z: &Matrix<T>, temperature: f64) -> (T, Matrix<T>) {
    let n = z.rows();
    let d = z.cols();
    let tau = T::of(temperature);
    let tiny = T::of(1e-12);
    let inv_n = T::one() / T::of(n as f64);

    let norms: Vec<T> = (0..n)
        .map(|i| z.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny))
        .collect();
    let mut unit = z.clone();
    for (i, &nrm) in norms.iter().enumerate() {
        for v in unit.row_mut(i) {
            *v /= nrm;
        }
    }
    // logits[i][j] = s_ij / τ
    let logits = unit.matmul(&unit.transpose()).map(|s| s / tau);

    let mut total = T::zero();
    // dL/dS (already divided by τ), accumulated as G + Gᵀ below.
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&s| (s - m).exp()).sum();
        let lse = m + sum_exp.ln();
        total += lse - row[i];
        let gi = g.row_mut(i);
        for j in 0..n {
            let p = (row[j] - lse).exp();
            let delta = if i == j { T::one() } else { T::zero() };
            gi[j] = (p - delta) * inv_n / tau;
        }
    }
    let gs = {
        let gt = g.transpose();
        let mut s = g;
        for (a, &b) in s.data_mut().iter_mut().zip(gt.data()) {
            *a += b;
        }
        s
    };
    let du = gs.matmul(&unit);
    let mut dz = Matrix::zeros(n, d);
    for i in 0..n {
        let u = unit.row(i);
        let dui = du.row(i);
        let radial: T = u.iter().zip(dui).map(|(&a, &b)| a * b).sum();
        let out = dz.row_mut(i);
        for k in 0..d {
            out[k] = (dui[k] - u[k] * radial) / norms[i];
        }
    }
    (total * inv_n, dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the NT-Xent formula, written independently.
    fn ntxent_oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
        let unit: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        let s = |i: usize, j: usize| -> f64 { unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum() };
        let n = rows.len();
        -(0..n)
            .map(|i| {
                let num = (s(i, i) / tau).exp();
                let den: f64 = (0..n).map(|j| (s(i, j) / tau).exp()).sum();
                (num / den).ln()
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn nll_examples() {
        let d = EffectDist {
            mean: [0.1, -0.2, 0.3],
            log_var: [0.0; 3],
        };
        let e = Effect::new(0.1, -0.2, 0.3);
        // 3 · ½ ln(2π)
        assert!((nll_loss(&d, &e) - 2.756_815_599_614_018).abs() < 1e-12);

        let d2 = EffectDist {
            mean: [0.0; 3],
            log_var: [-1.0, 0.5, 2.0],
        };
        let exact: f64 = d2
            .log_var
            .iter()
            .map(|lv| 0.5 * (2.0 * std::f64::consts::PI * lv.exp()).ln())
            .sum();
        assert!((nll_loss(&d2, &Effect::default()) - exact).abs() < 1e-12);

        let base = nll_loss(&d2, &Effect::default());
        let r1 = nll_loss(&d2, &Effect::new(0.1, 0.0, 0.0)) - base;
        let r2 = nll_loss(&d2, &Effect::new(0.2, 0.0, 0.0)) - base;
        assert!((r2 - 4.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn ntxent_examples() {
        let orth = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let e = std::f64::consts::E;
        assert!((nt_xent_loss(&orth, 1.0).unwrap() + (e / (e + 1.0)).ln()).abs() < 1e-12);
        let same = vec![vec![0.3, 0.4], vec![0.3, 0.4]];
        assert!((nt_xent_loss(&same, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ntxent_errors() {
        assert!(matches!(nt_xent_loss(&[vec![1.0]], 1.0), Err(Error::Degenerate(_))));
        assert!(matches!(
            nt_xent_loss(&[vec![1.0, 0.0], vec![0.0, 0.0]], 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 0.5, 0.01) - 0.015).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.3), 0.0);
    }

    #[test]
    fn mse_zero() {
        assert_eq!(mse_loss(&Effect::default(), &Effect::default()), 0.0);
    }

    #[test]
    fn nll_batch_gradient_matches_fd() {
        let out = Matrix::<f64>::from_rows(&[[0.1, -0.2, 0.05, 0.3, -1.2, 2.0], [0.0, 0.4, -0.1, -0.5, 0.7, 0.1]]);
        let eff = Matrix::<f64>::from_rows(&[[0.2, 0.1, -0.3], [0.05, -0.1, 0.2]]);
        let (_, g) = nll_batch(&out, &eff);
        let h = 1e-6;
        for idx in 0..out.data().len() {
            let mut p = out.clone();
            p.data_mut()[idx] += h;
            let mut m = out.clone();
            m.data_mut()[idx] -= h;
            let fd = (nll_batch(&p, &eff).0 - nll_batch(&m, &eff).0) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", g.data()[idx]);
        }
    }

    proptest! {
        #[test]
        fn ntxent_matches_oracle_and_symmetries(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 2..8),
            tau in 0.1f64..2.0,
            scale in 0.1f64..10.0,
            rot in 0usize..8,
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
            let l = nt_xent_loss(&rows, tau).unwrap();
            prop_assert!((l - ntxent_oracle(&rows, tau)).abs() < 1e-10);
            prop_assert!(l >= 0.0);

            let mut permuted = rows.clone();
            let k = rot % permuted.len();
            permuted.rotate_left(k);
            prop_assert!((nt_xent_loss(&permuted, tau).unwrap() - l).abs() < 1e-10);

            let mut scaled = rows.clone();
            for v in scaled[0].iter_mut() { *v *= scale; }
            prop_assert!((nt_xent_loss(&scaled, tau).unwrap() - l).abs() < 1e-10);
        }

        #[test]
        fn ntxent_gradient_matches_fd(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 2..6),
            tau in 0.2f64..2.0,
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2));
            let z = Matrix::<f64>::from_rows(&rows);
            let (_, g) = nt_xent_batch(&z, tau);
            let h = 1e-6;
            for idx in 0..z.data().len() {
                let mut p = z.clone();
                p.data_mut()[idx] += h;
                let mut m = z.clone();
                m.data_mut()[idx] -= h;
                let fd = (nt_xent_batch(&p, tau).0 - nt_xent_batch(&m, tau).0) / (2.0 * h);
                prop_assert!((fd - g.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}

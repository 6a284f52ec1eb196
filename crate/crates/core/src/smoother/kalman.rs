//! Ensemble smoother update with the Kalman formula.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::ensemble::{anomalies, Ensemble};
use crate::error::{Error, Result};
use crate::obs::{noise_draws, ObservationSet};
use crate::rng::RngStream;
use crate::smoother::constraints::ParamConstraints;

/// Largest accepted condition number of `C_YY + alpha^2 R`.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanContext {
    /// Parameter-output cross-covariance, `N_m x N_y`.
    pub c_my: DMatrix<f64>,
    /// Output covariance, `N_y x N_y`.
    pub c_yy: DMatrix<f64>,
    /// Diagonal of the observation error covariance.
    pub r: DVector<f64>,
}

pub(crate) fn check_outputs<'a>(e: &'a Ensemble, obs: &ObservationSet) -> Result<&'a DMatrix<f64>> {
    let y = e.require_outputs()?;
    if y.nrows() != obs.len() {
        return Err(Error::DimensionMismatch {
            what: "ensemble outputs vs observations",
            expected: obs.len(),
            found: y.nrows(),
        });
    }
    Ok(y)
}

/// Sample covariances with the `N_e - 1` denominator.
pub fn kalman_context(e: &Ensemble, obs: &ObservationSet) -> Result<KalmanContext> {
    let y = check_outputs(e, obs)?;
    let scale = 1.0 / (e.n_members() as f64 - 1.0);
    let dm = anomalies(e.params());
    let dy = anomalies(y);
    let c_my = &dm * dy.transpose() * scale;
    let mut c_yy = &dy * dy.transpose() * scale;
    // Exact symmetry despite rounding in the product.
    for i in 0..c_yy.nrows() {
        for j in 0..i {
            let v = 0.5 * (c_yy[(i, j)] + c_yy[(j, i)]);
            c_yy[(i, j)] = v;
            c_yy[(j, i)] = v;
        }
    }
    Ok(KalmanContext {
        c_my,
        c_yy,
        r: obs.noise_variance(),
    })
}

/// Innovations `y_obs + alpha * eps_i - f(m_i)`, one column per member, with a fresh draw per member.
pub fn innovations(e: &Ensemble, obs: &ObservationSet, alpha: f64, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    let y = check_outputs(e, obs)?;
    let mut d = noise_draws(obs, alpha, e.n_members(), rng)?;
    for (c, mut col) in d.column_iter_mut().enumerate() {
        for (r, v) in col.iter_mut().enumerate() {
            *v += obs.values()[r] - y[(r, c)];
        }
    }
    Ok(d)
}

/// Corrections `C_MY (C_YY + alpha^2 R)^-1 D` for a matrix of innovations `D`.
pub fn kalman_corrections(ctx: &KalmanContext, alpha: f64, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut a = ctx.c_yy.clone();
    for (k, r) in ctx.r.iter().enumerate() {
        a[(k, k)] += alpha * alpha * r;
    }
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Numeric(format!(
            "C_YY + alpha^2 R is singular or ill-conditioned (eigenvalues in [{lo:.3e}, {hi:.3e}])"
        )));
    }
    let chol = Cholesky::new(a).ok_or_else(|| Error::Numeric("Cholesky factorization failed".into()))?;
    let x = chol.solve(d);
    Ok(&ctx.c_my * x)
}

/// Updated parameters `m_i + C_MY (C_YY + alpha^2 R)^-1 (y_obs + alpha eps_i - f(m_i))`, clamped.
pub fn es_kalman_update(
    e: &Ensemble,
    obs: &ObservationSet,
    alpha: f64,
    constraints: &ParamConstraints,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    let ctx = kalman_context(e, obs)?;
    let d = innovations(e, obs, alpha, rng)?;
    let mut m = e.params() + kalman_corrections(&ctx, alpha, &d)?;
    constraints.apply(&mut m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::{ObsKind, ObsLabel};

    fn obs(values: Vec<f64>, std: f64) -> ObservationSet {
        let labels = values
            .iter()
            .map(|_| ObsLabel {
                kind: ObsKind::Head,
                x: 0.0,
                y: 0.0,
                t: None,
            })
            .collect();
        let n = values.len();
        ObservationSet::new(values, vec![std; n], labels).unwrap()
    }

    #[test]
    fn degenerate_outputs_give_zero_covariance() {
        let p = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, 0.0, 1.0, 0.0]);
        let y = DMatrix::from_element(1, 3, 5.0);
        let e = Ensemble::new(p, 0).unwrap().with_outputs(y).unwrap();
        let ctx = kalman_context(&e, &obs(vec![5.0], 0.1)).unwrap();
        assert!(ctx.c_my.iter().all(|v| *v == 0.0));
        assert!(ctx.c_yy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_member_hand_covariance() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[1.0, 3.0]), 0)
            .unwrap()
            .with_outputs(DMatrix::from_row_slice(1, 2, &[10.0, 4.0]))
            .unwrap();
        let ctx = kalman_context(&e, &obs(vec![0.0], 1.0)).unwrap();
        // (m1 - mbar)(y1 - ybar) * 2 / (2 - 1) = (-1)(3) * 2
        assert!((ctx.c_my[(0, 0)] + 6.0).abs() < 1e-14);
        assert!((ctx.c_yy[(0, 0)] - 18.0).abs() < 1e-14);
    }

    #[test]
    fn covariances_match_brute_force() {
        let mut rng = RngStream::new(4, 0);
        let p = DMatrix::from_fn(4, 50, |_, _| rng.normal());
        let y = DMatrix::from_fn(3, 50, |_, _| rng.normal() * 3.0 + 1.0);
        let e = Ensemble::new(p.clone(), 0).unwrap().with_outputs(y.clone()).unwrap();
        let ctx = kalman_context(&e, &obs(vec![0.0; 3], 1.0)).unwrap();
        let mean = |row: Vec<f64>| row.iter().sum::<f64>() / row.len() as f64;
        for a in 0..4 {
            for b in 0..3 {
                let ma = mean(p.row(a).iter().copied().collect());
                let mb = mean(y.row(b).iter().copied().collect());
                let mut s = 0.0;
                for i in 0..50 {
                    s += (p[(a, i)] - ma) * (y[(b, i)] - mb);
                }
                assert!((ctx.c_my[(a, b)] - s / 49.0).abs() < 1e-12);
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let ma = mean(y.row(a).iter().copied().collect());
                let mb = mean(y.row(b).iter().copied().collect());
                let s: f64 = (0..50).map(|i| (y[(a, i)] - ma) * (y[(b, i)] - mb)).sum();
                assert!((ctx.c_yy[(a, b)] - s / 49.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gain_leaves_params() {
        let p = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let e = Ensemble::new(p.clone(), 0)
            .unwrap()
            .with_outputs(DMatrix::from_element(1, 3, 0.5))
            .unwrap();
        let m = es_kalman_update(&e, &obs(vec![1.0], 0.1), 1.0, &ParamConstraints::none(), &mut RngStream::new(1, 0))
            .unwrap();
        assert_eq!(m, p);
    }

    #[test]
    fn singular_system_rejected() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), 0)
            .unwrap()
            .with_outputs(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]))
            .unwrap();
        let o = obs(vec![0.0, 0.0], 1e-300);
        let r = es_kalman_update(&e, &o, 1.0, &ParamConstraints::none(), &mut RngStream::new(1, 0));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn missing_outputs_rejected() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), 0).unwrap();
        assert!(kalman_context(&e, &obs(vec![0.0], 1.0)).is_err());
    }
}

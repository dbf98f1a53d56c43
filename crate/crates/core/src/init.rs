//! Starting values from ridge-regularized least squares, one level at a time.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{Matrix2, Vector};
use crate::model::{Design, Pair, RandomEffects};

/// Penalty added to the (intercept, slope) normal equations of each unit.
pub(crate) const DEFAULT_RIDGE: f64 = 1.0;

fn ridge_fit(xtx: Matrix2, xtr: Vector<2>, ridge: f64) -> Pair {
    let m = xtx + Matrix2::from_diagonal([ridge, ridge]);
    match m.cholesky() {
        Ok(l) => l.chol_solve(&xtr),
        Err(_) => [0.0, 0.0],
    }
}

/// Fits the hierarchy top-down on `values` (one per design observation).
/// When `alpha` is given it is held fixed; otherwise it is fitted with a
/// negligible penalty. Visit effects are shrunken residual means.
pub(crate) fn ridge_init(
    design: &Design,
    values: &[f64],
    alpha: Option<Pair>,
    with_phi: bool,
    ridge: f64,
) -> RandomEffects {
    let mut fx = RandomEffects::zeros(design);
    let mut resid: Vec<f64> = values.to_vec();

    let fit_level = |groups: &[Vec<usize>], ridge: f64, resid: &mut [f64]| -> Vec<Pair> {
        let mut out = vec![[0.0; 2]; groups.len()];
        for (g, members) in groups.iter().enumerate() {
            let mut xtx = Matrix2::zeros();
            let mut xtr = [0.0; 2];
            for &k in members {
                let t = design.obs[k].years;
                xtx = xtx + Matrix2::new(1.0, t, t, t * t);
                xtr[0] += resid[k];
                xtr[1] += resid[k] * t;
            }
            let b = ridge_fit(xtx, xtr, ridge);
            for &k in members {
                resid[k] -= b[0] + b[1] * design.obs[k].years;
            }
            out[g] = b;
        }
        out
    };

    match alpha {
        Some(a) => {
            fx.alpha = a;
            for (k, o) in design.obs.iter().enumerate() {
                resid[k] -= a[0] + a[1] * o.years;
            }
        }
        None => {
            let all: Vec<usize> = (0..design.obs.len()).collect();
            fx.alpha = fit_level(&[all], 1e-8, &mut resid)[0];
        }
    }
    fx.gamma = fit_level(&design.eye_obs, ridge, &mut resid);
    fx.eta = fit_level(&design.hemifield_obs, ridge, &mut resid);
    fx.lambda = fit_level(&design.location_obs, ridge, &mut resid);
    if with_phi {
        for (v, members) in design.visit_obs.iter().enumerate() {
            let s: f64 = members.iter().map(|&k| resid[k]).sum();
            fx.phi[v] = s / (members.len() as f64 + ridge);
        }
    }
    fx
}

/// Mean squared residual of `values` around the fitted means.
pub(crate) fn residual_variance(
    design: &Design,
    values: &[f64],
    fx: &RandomEffects,
    with_phi: bool,
) -> f64 {
    if design.obs.is_empty() {
        return 1.0;
    }
    let variant = if with_phi {
        crate::model::ModelVariant::Model2
    } else {
        crate::model::ModelVariant::Model1
    };
    let fixed = crate::model::FixedEffects::ZERO;
    let ss: f64 = (0..design.obs.len())
        .map(|k| {
            let r = values[k] - fx.mu(design, &fixed, k, variant);
            r * r
        })
        .sum();
    (ss / design.obs.len() as f64).max(1e-6)
}

//! Joint (one-stage) Gibbs sampler for Models 1 and 2.
//!
//! All individuals are fitted together with α_i ~ N(β, Σα) and shared
//! covariance matrices, residual variance and visit-effect scale. It scales
//! poorly and exists as a reference for the two-stage estimates on small
//! problems where the individual variances really are shared.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::distributions::{self, Rng};
use crate::error::{Error, Result};
use crate::init;
use crate::linalg::{add_vec, sub_vec, Matrix2};
use crate::math;
use crate::model::{
    CovarianceSpec, Design, FixedEffects, IndividualData, ModelVariant, Pair, RandomEffects,
    VarianceParams,
};
use crate::stage1::{self, Stage1Priors, ETA, GAMMA, LAMBDA};

#[derive(Clone, Debug, PartialEq)]
pub struct OneStageConfig {
    pub model: ModelVariant,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub priors: Stage1Priors,
}

impl OneStageConfig {
    pub fn new(model: ModelVariant, iterations: usize, burn_in: usize, thin: usize) -> Self {
        OneStageConfig {
            model,
            iterations,
            burn_in,
            thin,
            priors: Stage1Priors::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.has_variance_link() {
            return Err(Error::Config(
                "the joint sampler covers Models 1 and 2 only".into(),
            ));
        }
        if self.thin == 0 || self.burn_in >= self.iterations {
            return Err(Error::Config(
                "need thin >= 1 and burn-in shorter than the run".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneStageDraw {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma2: f64,
    pub sigma2_phi: Option<f64>,
    pub cov_alpha: Matrix2,
}

struct Unit {
    d: Design,
    z: Vec<f64>,
    fx: RandomEffects,
    w: Vec<f64>,
}

/// Runs the joint sampler over every individual.
pub fn fit_one_stage(
    data: &[IndividualData],
    cfg: &OneStageConfig,
    rng: &mut Rng,
) -> Result<Vec<OneStageDraw>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no individuals".into()));
    }
    let variant = cfg.model;
    let with_phi = variant.has_visit_effects();
    let p = cfg.priors;

    let mut units = Vec::with_capacity(data.len());
    for ind in data {
        let d = Design::new(ind)?;
        let values: Vec<f64> = d.obs.iter().map(|o| o.value).collect();
        let fx = init::ridge_init(&d, &values, None, with_phi, init::DEFAULT_RIDGE);
        units.push(Unit {
            w: vec![1.0; d.visits.len()],
            z: values,
            fx,
            d,
        });
    }
    let n = units.len() as f64;
    let mut beta = [0.0; 2];
    for u in &units {
        beta = add_vec(&beta, &u.fx.alpha);
    }
    beta = [beta[0] / n, beta[1] / n];
    let mut cov_alpha = Matrix2::new(9.0, 0.0, 0.0, 0.1);
    let mut cov = [CovarianceSpec::diagonal(1.0, 0.01)?; 3];
    let mut sigma2 = units
        .iter()
        .map(|u| init::residual_variance(&u.d, &u.z, &u.fx, with_phi))
        .sum::<f64>()
        / n;
    let mut sigma2_phi = 1.0;

    let mut out = Vec::new();
    for it in 0..cfg.iterations {
        let q_alpha = CovarianceSpec::new(cov_alpha)?.precision();
        let alpha_info = q_alpha.mul_vec(&beta);
        let var = VarianceParams::homoscedastic(sigma2);
        for u in units.iter_mut() {
            stage1::update_latent_censored(&u.d, &u.fx, &var, variant, &mut u.z, rng)?;
            let resid: Vec<f64> = if with_phi {
                u.d.obs
                    .iter()
                    .zip(&u.z)
                    .map(|(o, z)| z - u.fx.phi[o.visit])
                    .collect()
            } else {
                u.z.clone()
            };
            stage1::tree_draw(
                &u.d,
                &resid,
                sigma2,
                &cov,
                &q_alpha,
                &alpha_info,
                &mut u.fx,
                rng,
            )?;
            if with_phi {
                for v in 0..u.w.len() {
                    u.w[v] = distributions::sample_mix_weight(u.fx.phi[v], sigma2_phi, rng)?;
                }
                gibbs_phi(u, sigma2, sigma2_phi, variant, rng);
                shift_phi(u, &beta, &cov_alpha, sigma2_phi, rng);
            }
        }

        let alphas: Vec<Pair> = units.iter().map(|u| u.fx.alpha).collect();
        let mut prec = Matrix2::identity().scale(1.0 / p.normal_var);
        let mut sum = [0.0; 2];
        for a in &alphas {
            prec = prec + q_alpha;
            sum = add_vec(&sum, a);
        }
        beta = distributions::sample_gaussian_canonical(&prec, &q_alpha.mul_vec(&sum), rng)?;

        let prior_scale = Matrix2::identity().scale(p.iw_scale);
        let mut s = prior_scale;
        for a in &alphas {
            let r = sub_vec(a, &beta);
            s = s + Matrix2::outer(&r, &r);
        }
        cov_alpha = distributions::sample_inverse_wishart2(p.iw_df + n, &s, rng)?;

        for level in [GAMMA, ETA, LAMBDA] {
            let mut s = prior_scale;
            let mut count = 0usize;
            for u in &units {
                let pairs = match level {
                    GAMMA => &u.fx.gamma,
                    ETA => &u.fx.eta,
                    _ => &u.fx.lambda,
                };
                for x in pairs {
                    s = s + Matrix2::outer(x, x);
                }
                count += pairs.len();
            }
            let draw = distributions::sample_inverse_wishart2(p.iw_df + count as f64, &s, rng)?;
            cov[level] = CovarianceSpec::new(draw)?;
        }

        let (mut ssr, mut n_obs) = (0.0, 0usize);
        for u in &units {
            for (k, z) in u.z.iter().enumerate() {
                let r = z - u.fx.mu(&u.d, &FixedEffects::ZERO, k, variant);
                ssr += r * r;
            }
            n_obs += u.z.len();
        }
        sigma2 = distributions::sample_inverse_gamma(
            p.ig_shape + 0.5 * n_obs as f64,
            p.ig_rate + 0.5 * ssr,
            rng,
        )?;

        if with_phi {
            let (mut ss, mut nv) = (0.0, 0usize);
            for u in &units {
                ss +=
                    u.fx.phi
                        .iter()
                        .zip(&u.w)
                        .map(|(f, w)| w * f * f)
                        .sum::<f64>();
                nv += u.fx.phi.len();
            }
            sigma2_phi = distributions::sample_inverse_gamma(
                p.ig_shape + 0.5 * nv as f64,
                p.ig_rate + 0.5 * ss,
                rng,
            )?;
        }

        if !(sigma2.is_finite() && sigma2_phi.is_finite() && beta.iter().all(|b| b.is_finite())) {
            return Err(Error::non_finite(format!("joint sampler, iteration {it}")));
        }
        if it >= cfg.burn_in && (it + 1 - cfg.burn_in) % cfg.thin == 0 {
            out.push(OneStageDraw {
                beta0: beta[0],
                beta1: beta[1],
                sigma2,
                sigma2_phi: with_phi.then_some(sigma2_phi),
                cov_alpha,
            });
        }
    }
    Ok(out)
}

fn gibbs_phi(u: &mut Unit, sigma2: f64, sigma2_phi: f64, variant: ModelVariant, rng: &mut Rng) {
    let inv_s2 = 1.0 / sigma2;
    for v in 0..u.w.len() {
        let members = &u.d.visit_obs[v];
        let mut info = 0.0;
        for &k in members {
            info +=
                (u.z[k] - (u.fx.mu(&u.d, &FixedEffects::ZERO, k, variant) - u.fx.phi[v])) * inv_s2;
        }
        let prec = members.len() as f64 * inv_s2 + u.w[v] / sigma2_phi;
        u.fx.phi[v] = info / prec + distributions::std_normal(rng) / math::sqrt(prec);
    }
}

/// Redraws α0 holding every α0 + φ_v fixed, under α0's prior given α1.
fn shift_phi(u: &mut Unit, beta: &Pair, cov_alpha: &Matrix2, sigma2_phi: f64, rng: &mut Rng) {
    let m = cov_alpha.0;
    let prior_mean = beta[0] + m[0][1] / m[1][1] * (u.fx.alpha[1] - beta[1]);
    let prior_var = m[0][0] - m[0][1] * m[0][1] / m[1][1];
    let mut prec = 1.0 / prior_var;
    let mut info = prior_mean / prior_var;
    for v in 0..u.w.len() {
        let c = u.fx.alpha[0] + u.fx.phi[v];
        let wv = u.w[v] / sigma2_phi;
        prec += wv;
        info += wv * c;
    }
    let new = info / prec + distributions::std_normal(rng) / math::sqrt(prec);
    let delta = new - u.fx.alpha[0];
    u.fx.alpha[0] = new;
    for p in u.fx.phi.iter_mut() {
        *p -= delta;
    }
}

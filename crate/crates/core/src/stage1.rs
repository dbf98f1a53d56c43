//! Per-individual sampler.
//!
//! Each individual is fitted on its own with the individual-level pair α
//! absorbing the population mean, vague normal priors on α and β*, and
//! individual covariance matrices for the eye, hemifield and location effects.
//! Censored readings are augmented with latent values below 0 dB.
//!
//! For Models 1 and 2 the Gaussian conditional of (α, γ, η, λ) given the
//! latent data is drawn in one exact pass over the hierarchy: messages are
//! collected upward (integrating each child effect out against its
//! covariance) and effects are then drawn top-down. Model 3 has a
//! mean-dependent residual SD, so every block moves by random-walk
//! Metropolis-Hastings, supplemented by exact moves along directions that
//! leave the likelihood unchanged (shifting mass between a parent and all of
//! its children).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::distributions::{self, Rng};
use crate::error::{Error, Result};
use crate::init;
use crate::linalg::{add_vec, sub_vec, Matrix, Matrix2, Vector};
use crate::math;
use crate::mh::{self, CovAdapter, ScaleAdapter};
use crate::model::{
    CovarianceSpec, Design, FixedEffects, IndividualData, ModelVariant, Pair, RandomEffects,
    VarianceParams,
};

/// Multipliers applied to the data-derived random-walk proposal scales (Model 3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    pub alpha_beta_star: f64,
    pub gamma: f64,
    pub eta: f64,
    pub lambda: f64,
    pub phi: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes {
            alpha_beta_star: 1.0,
            gamma: 1.0,
            eta: 1.0,
            lambda: 1.0,
            phi: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Priors {
    /// Variance of the independent normal priors on α and β* components.
    pub normal_var: f64,
    pub iw_df: f64,
    /// The inverse-Wishart scale matrix is `iw_scale * I`.
    pub iw_scale: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
}

impl Default for Stage1Priors {
    fn default() -> Self {
        Stage1Priors {
            normal_var: 1e8,
            iw_df: 2.0,
            iw_scale: 0.01,
            ig_shape: 0.001,
            ig_rate: 0.001,
        }
    }
}

/// Variance components held fixed instead of sampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clamp {
    pub sigma2: f64,
    pub sigma2_phi: f64,
    pub cov_gamma: CovarianceSpec,
    pub cov_eta: CovarianceSpec,
    pub cov_lambda: CovarianceSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub model: ModelVariant,
    pub step_sizes: StepSizes,
    /// Share of the burn-in during which Model 3 proposals adapt.
    pub adapt_burnin_fraction: f64,
    pub priors: Stage1Priors,
    pub clamp: Option<Clamp>,
    /// Keep every retained draw of the random effects (needed for predictive checks).
    pub keep_effects: bool,
}

/// Fewest retained draws a configuration may produce.
pub const MIN_RETAINED: usize = 100;

impl Stage1Config {
    pub fn desk(model: ModelVariant) -> Self {
        Self::with_lengths(model, 20_000, 10_000, 10)
    }

    pub fn paper(model: ModelVariant) -> Self {
        Self::with_lengths(model, 200_000, 150_000, 10)
    }

    pub fn with_lengths(
        model: ModelVariant,
        iterations: usize,
        burn_in: usize,
        thin: usize,
    ) -> Self {
        Stage1Config {
            iterations,
            burn_in,
            thin,
            model,
            step_sizes: StepSizes::default(),
            adapt_burnin_fraction: 0.8,
            priors: Stage1Priors::default(),
            clamp: None,
            keep_effects: false,
        }
    }

    pub fn retained(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config("burn-in must be shorter than the run".into()));
        }
        if self.retained() < MIN_RETAINED {
            return Err(Error::Config(format!(
                "(iterations - burn_in) / thin = {} retained draws; at least {MIN_RETAINED} required",
                self.retained()
            )));
        }
        if !(0.0..=1.0).contains(&self.adapt_burnin_fraction) {
            return Err(Error::Config(
                "adapt_burnin_fraction must lie in [0, 1]".into(),
            ));
        }
        let s = &self.step_sizes;
        if [s.alpha_beta_star, s.gamma, s.eta, s.lambda, s.phi]
            .iter()
            .any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        let p = &self.priors;
        if !(p.normal_var > 0.0
            && p.iw_df > 1.0
            && p.iw_scale > 0.0
            && p.ig_shape > 0.0
            && p.ig_rate > 0.0)
        {
            return Err(Error::Config("prior constants out of range".into()));
        }
        if let Some(c) = &self.clamp {
            if !(c.sigma2 > 0.0 && c.sigma2_phi > 0.0) {
                return Err(Error::Config("clamped variances must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One retained stage-1 draw of the quantities carried to stage 2.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolDraw {
    pub alpha: Pair,
    /// Model 3 only.
    pub beta_star: Option<Pair>,
    /// Cholesky elements (L11, L21, L22) of the eye, hemifield and location covariances.
    pub c_gamma: [f64; 3],
    pub c_eta: [f64; 3],
    pub c_lambda: [f64; 3],
    /// Models 2 and 3.
    pub sigma2_phi: Option<f64>,
    /// Models 1 and 2.
    pub sigma2: Option<f64>,
}

impl PoolDraw {
    pub fn column_names(variant: ModelVariant) -> Vec<&'static str> {
        let mut names = vec!["alpha0", "alpha1"];
        if variant.has_variance_link() {
            names.extend(["beta_star0", "beta_star1"]);
        }
        names.extend([
            "c_gamma11",
            "c_gamma21",
            "c_gamma22",
            "c_eta11",
            "c_eta21",
            "c_eta22",
            "c_lambda11",
            "c_lambda21",
            "c_lambda22",
        ]);
        if variant.has_visit_effects() {
            names.push("sigma2_phi");
        }
        if !variant.has_variance_link() {
            names.push("sigma2");
        }
        names
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = self.alpha.to_vec();
        if let Some(b) = self.beta_star {
            v.extend(b);
        }
        v.extend(self.c_gamma);
        v.extend(self.c_eta);
        v.extend(self.c_lambda);
        v.extend(self.sigma2_phi);
        v.extend(self.sigma2);
        v
    }

    pub fn from_values(variant: ModelVariant, values: &[f64]) -> Result<Self> {
        let n = Self::column_names(variant).len();
        if values.len() != n {
            return Err(Error::structure(format!(
                "pool row has {} values, expected {n}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        let mut next = || it.next().unwrap();
        let alpha = [next(), next()];
        let beta_star = variant.has_variance_link().then(|| [next(), next()]);
        let c_gamma = [next(), next(), next()];
        let c_eta = [next(), next(), next()];
        let c_lambda = [next(), next(), next()];
        let sigma2_phi = variant.has_visit_effects().then(&mut next);
        let sigma2 = (!variant.has_variance_link()).then(&mut next);
        let draw = PoolDraw {
            alpha,
            beta_star,
            c_gamma,
            c_eta,
            c_lambda,
            sigma2_phi,
            sigma2,
        };
        draw.validate()?;
        Ok(draw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pool draw has non-finite values"));
        }
        for c in [self.c_gamma, self.c_eta, self.c_lambda] {
            if !(c[0] > 0.0 && c[2] > 0.0) {
                return Err(Error::invalid(
                    "pool draw has a non-positive Cholesky diagonal",
                ));
            }
        }
        if self.sigma2_phi.is_some_and(|v| !(v > 0.0)) || self.sigma2.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::invalid("pool draw has a non-positive variance"));
        }
        Ok(())
    }

    pub fn covariances(&self) -> Result<[CovarianceSpec; 3]> {
        Ok([
            CovarianceSpec::from_cholesky(self.c_gamma)?,
            CovarianceSpec::from_cholesky(self.c_eta)?,
            CovarianceSpec::from_cholesky(self.c_lambda)?,
        ])
    }

    pub fn variance_params(&self) -> VarianceParams {
        let b = self.beta_star.unwrap_or([0.0, 0.0]);
        VarianceParams {
            beta_star0: b[0],
            beta_star1: b[1],
            sigma2: self.sigma2.unwrap_or(0.0),
        }
    }
}

/// Retained stage-1 draws of one individual.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool {
    pub individual_id: String,
    pub variant: ModelVariant,
    pub draws: Vec<PoolDraw>,
}

impl SamplePool {
    pub fn new(
        individual_id: impl Into<String>,
        variant: ModelVariant,
        draws: Vec<PoolDraw>,
    ) -> Result<Self> {
        let individual_id = individual_id.into();
        if draws.is_empty() {
            return Err(Error::Empty(format!("pool of individual {individual_id}")));
        }
        for d in &draws {
            d.validate()?;
            if d.beta_star.is_some() != variant.has_variance_link()
                || d.sigma2_phi.is_some() != variant.has_visit_effects()
                || d.sigma2.is_some() == variant.has_variance_link()
            {
                return Err(Error::structure(format!(
                    "pool draw does not match {variant}"
                )));
            }
        }
        Ok(SamplePool {
            individual_id,
            variant,
            draws,
        })
    }

    pub fn retained_count(&self) -> usize {
        self.draws.len()
    }
}

/// Full parameter state of one retained iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiDraw {
    pub effects: RandomEffects,
    pub var: VarianceParams,
    pub sigma2_phi: Option<f64>,
}

impl PsiDraw {
    pub fn column_names(design: &Design, variant: ModelVariant) -> Vec<String> {
        let mut names: Vec<String> = vec!["alpha0".into(), "alpha1".into()];
        if variant.has_variance_link() {
            names.extend(["beta_star0".into(), "beta_star1".into()]);
        } else {
            names.push("sigma2".into());
        }
        if variant.has_visit_effects() {
            names.push("sigma2_phi".into());
        }
        names.extend(design.effect_names(variant.has_visit_effects()));
        names
    }

    pub fn values(&self, variant: ModelVariant) -> Vec<f64> {
        let mut v = self.effects.alpha.to_vec();
        if variant.has_variance_link() {
            v.extend([self.var.beta_star0, self.var.beta_star1]);
        } else {
            v.push(self.var.sigma2);
        }
        if variant.has_visit_effects() {
            v.push(self.sigma2_phi.unwrap_or(f64::NAN));
        }
        v.extend(self.effects.to_flat(variant.has_visit_effects()));
        v
    }

    pub fn from_values(design: &Design, variant: ModelVariant, values: &[f64]) -> Result<Self> {
        let head = 3 + variant.has_variance_link() as usize + variant.has_visit_effects() as usize;
        if values.len() < head {
            return Err(Error::structure("state row too short"));
        }
        let alpha = [values[0], values[1]];
        let (var, mut at) = if variant.has_variance_link() {
            (VarianceParams::linked(values[2], values[3]), 4)
        } else {
            (VarianceParams::homoscedastic(values[2]), 3)
        };
        let sigma2_phi = if variant.has_visit_effects() {
            at += 1;
            Some(values[at - 1])
        } else {
            None
        };
        let with_phi = variant.has_visit_effects();
        let effects = RandomEffects::from_flat(design, alpha, &values[at..], with_phi)?;
        Ok(PsiDraw {
            effects,
            var,
            sigma2_phi,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Fit {
    pub pool: SamplePool,
    /// Retained full states; empty unless `keep_effects` was set.
    pub psi: Vec<PsiDraw>,
    /// Post-adaptation acceptance rates of the random-walk blocks (Model 3).
    pub acceptance: Vec<(&'static str, f64)>,
}

/// Mean and covariance of a pair's Gaussian full conditional given the
/// cross-products of its design (`xtx`, `xtr` over the residuals the pair
/// explains). `prior = None` means a flat prior.
pub fn pair_conditional(
    prior: Option<&CovarianceSpec>,
    xtx: &Matrix2,
    xtr: &Vector<2>,
    sigma2: f64,
) -> Result<(Pair, Matrix2)> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("sigma2 must be positive"));
    }
    let mut prec = xtx.scale(1.0 / sigma2);
    if let Some(p) = prior {
        prec = prec + p.precision();
    }
    let l = prec.symmetrized().cholesky()?;
    let mean = l.chol_solve(&[xtr[0] / sigma2, xtr[1] / sigma2]);
    Ok((mean, l.chol_inverse()))
}

/// Exact draw of an (intercept, slope) pair from its Gaussian full conditional.
pub fn gibbs_update_random_effect_pair(
    prior: Option<&CovarianceSpec>,
    xtx: &Matrix2,
    xtr: &Vector<2>,
    sigma2: f64,
    rng: &mut Rng,
) -> Result<Pair> {
    let (mean, cov) = pair_conditional(prior, xtx, xtr, sigma2)?;
    let l = cov.cholesky()?;
    Ok(distributions::sample_mvn_chol(&mean, &l, rng))
}

/// Redraws the latent value of every censored observation from its normal
/// predictive truncated to (-inf, 0). `latent` holds one value per design
/// observation; uncensored entries are left alone.
pub fn update_latent_censored(
    design: &Design,
    effects: &RandomEffects,
    var: &VarianceParams,
    variant: ModelVariant,
    latent: &mut [f64],
    rng: &mut Rng,
) -> Result<()> {
    if latent.len() != design.obs.len() {
        return Err(Error::structure(
            "latent vector length differs from the observation count",
        ));
    }
    for (k, o) in design.obs.iter().enumerate() {
        if o.censored {
            let mu = effects.mu(design, &FixedEffects::ZERO, k, variant);
            let sd = crate::model::residual_sd(mu, var, variant);
            latent[k] = distributions::sample_truncated_normal(mu, sd, 0.0, rng);
        }
    }
    Ok(())
}

/// Runs the stage-1 sampler for one individual.
pub fn fit_individual(
    data: &IndividualData,
    cfg: &Stage1Config,
    rng: &mut Rng,
) -> Result<Stage1Fit> {
    cfg.validate()?;
    if data.observations.is_empty() {
        return Err(Error::Empty(format!(
            "individual {} has no observations",
            data.individual_id
        )));
    }
    let times = data.distinct_times();
    if times < 2 {
        return Err(Error::TooFewVisits {
            id: data.individual_id.clone(),
            visits: times,
        });
    }
    let design = Design::new(data)?;
    let mut s = Sampler::new(&design, cfg)?;
    let adapt_until = (cfg.adapt_burnin_fraction * cfg.burn_in as f64) as usize;
    let mut draws = Vec::with_capacity(cfg.retained());
    let mut psi = Vec::new();
    for it in 0..cfg.iterations {
        if it == adapt_until {
            s.reset_counts();
        }
        s.sweep(it < adapt_until, rng)?;
        if !s.is_finite() {
            return Err(Error::non_finite(format!(
                "stage 1, individual {}, iteration {it}",
                data.individual_id
            )));
        }
        if it >= cfg.burn_in && (it + 1 - cfg.burn_in) % cfg.thin == 0 {
            draws.push(s.pool_draw());
            if cfg.keep_effects {
                psi.push(s.psi_draw());
            }
        }
    }
    Ok(Stage1Fit {
        pool: SamplePool::new(data.individual_id.clone(), cfg.model, draws)?,
        psi,
        acceptance: s.acceptance(),
    })
}

struct Model3Kernel {
    joint: CovAdapter<4>,
    gamma: ScaleAdapter,
    eta: ScaleAdapter,
    lambda: ScaleAdapter,
    phi: ScaleAdapter,
    /// Fisher information of each unit's pair at the starting state.
    info: [Vec<Matrix2>; 3],
    /// Proposal Cholesky factors, rebuilt whenever the covariances move.
    shapes: [Vec<Matrix2>; 3],
    phi_sd: Vec<f64>,
    /// Cached complete-data log-likelihood of each observation.
    ll: Vec<f64>,
    scratch: Vec<f64>,
}

struct Sampler<'a> {
    d: &'a Design,
    cfg: &'a Stage1Config,
    variant: ModelVariant,
    /// Observed values, with latent draws in the censored slots.
    z: Vec<f64>,
    fx: RandomEffects,
    beta_star: Pair,
    sigma2: f64,
    sigma2_phi: f64,
    /// Eye, hemifield and location covariances.
    cov: [CovarianceSpec; 3],
    w: Vec<f64>,
    m3: Option<Model3Kernel>,
}

pub(crate) const GAMMA: usize = 0;
pub(crate) const ETA: usize = 1;
pub(crate) const LAMBDA: usize = 2;

#[inline]
fn ll_linked(z: f64, mu: f64, bs: &Pair) -> f64 {
    let log_sd = bs[0] + bs[1] * mu;
    let r = (z - mu) * math::exp(-log_sd);
    -0.5 * r * r - log_sd
}

#[inline]
pub(crate) fn quad(q: &Matrix2, u: &Pair) -> f64 {
    u[0] * (q.0[0][0] * u[0] + q.0[0][1] * u[1]) + u[1] * (q.0[1][0] * u[0] + q.0[1][1] * u[1])
}

/// Integrates a child effect with precision `q` out of a message (p, b) on
/// parent + child, giving the message on the parent alone.
fn integrate_child(p: &Matrix2, b: &Vector<2>, q: &Matrix2) -> Result<(Matrix2, Vector<2>)> {
    let l = (*p + *q).cholesky()?;
    let a = l.chol_inverse();
    let pp = (*p * a * *q).symmetrized();
    let bb = q.mul_vec(&a.mul_vec(b));
    Ok((pp, bb))
}

/// Exact joint draw of (α, γ, η, λ) given residuals (data minus visit
/// effects) with constant variance `sigma2` and a Gaussian prior on α in
/// canonical form (`alpha_prec`, `alpha_info`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn tree_draw(
    d: &Design,
    resid: &[f64],
    sigma2: f64,
    cov: &[CovarianceSpec; 3],
    alpha_prec: &Matrix2,
    alpha_info: &Vector<2>,
    fx: &mut RandomEffects,
    rng: &mut Rng,
) -> Result<()> {
    let inv_s2 = 1.0 / sigma2;
    let q = cov.map(|c| c.precision());

    let nl = d.locations.len();
    let p_l: Vec<Matrix2> = d.location_xtx.iter().map(|m| m.scale(inv_s2)).collect();
    let mut b_l = vec![[0.0; 2]; nl];
    for (o, r) in d.obs.iter().zip(resid) {
        b_l[o.location][0] += r * inv_s2;
        b_l[o.location][1] += r * o.years * inv_s2;
    }
    let mut p_h = vec![Matrix2::zeros(); d.hemifields.len()];
    let mut b_h = vec![[0.0; 2]; d.hemifields.len()];
    for l in 0..nl {
        let (pp, bb) = integrate_child(&p_l[l], &b_l[l], &q[LAMBDA])?;
        let h = d.locations[l].hemifield;
        p_h[h] = p_h[h] + pp;
        b_h[h] = add_vec(&b_h[h], &bb);
    }
    let mut p_e = vec![Matrix2::zeros(); d.eyes.len()];
    let mut b_e = vec![[0.0; 2]; d.eyes.len()];
    for h in 0..d.hemifields.len() {
        let (pp, bb) = integrate_child(&p_h[h], &b_h[h], &q[ETA])?;
        let e = d.hemifields[h].eye;
        p_e[e] = p_e[e] + pp;
        b_e[e] = add_vec(&b_e[e], &bb);
    }
    let mut p_a = *alpha_prec;
    let mut b_a = *alpha_info;
    for e in 0..d.eyes.len() {
        let (pp, bb) = integrate_child(&p_e[e], &b_e[e], &q[GAMMA])?;
        p_a = p_a + pp;
        b_a = add_vec(&b_a, &bb);
    }

    let draw = |p: Matrix2, b: Vector<2>, rng: &mut Rng| {
        distributions::sample_gaussian_canonical(&p, &b, rng)
    };
    let alpha = draw(p_a, b_a, rng)?;
    fx.alpha = alpha;
    for e in 0..d.eyes.len() {
        let info = sub_vec(&b_e[e], &p_e[e].mul_vec(&alpha));
        fx.gamma[e] = draw(q[GAMMA] + p_e[e], info, rng)?;
    }
    for h in 0..d.hemifields.len() {
        let above = add_vec(&alpha, &fx.gamma[d.hemifields[h].eye]);
        let info = sub_vec(&b_h[h], &p_h[h].mul_vec(&above));
        fx.eta[h] = draw(q[ETA] + p_h[h], info, rng)?;
    }
    for l in 0..nl {
        let h = d.locations[l].hemifield;
        let above = add_vec(&add_vec(&alpha, &fx.gamma[d.hemifields[h].eye]), &fx.eta[h]);
        let info = sub_vec(&b_l[l], &p_l[l].mul_vec(&above));
        fx.lambda[l] = draw(q[LAMBDA] + p_l[l], info, rng)?;
    }
    Ok(())
}

/// Redraws each γ_e holding γ_e + η_h fixed for the eye's hemifields.
pub(crate) fn shift_gamma(
    d: &Design,
    fx: &mut RandomEffects,
    cov: &[CovarianceSpec; 3],
    rng: &mut Rng,
) -> Result<()> {
    let qg = cov[GAMMA].precision();
    let qe = cov[ETA].precision();
    for e in 0..d.eyes.len() {
        let hs = &d.eye_hemifields[e];
        let mut prec = qg;
        let mut sum = [0.0; 2];
        for &h in hs {
            prec = prec + qe;
            sum = add_vec(&sum, &add_vec(&fx.eta[h], &fx.gamma[e]));
        }
        let g = distributions::sample_gaussian_canonical(&prec, &qe.mul_vec(&sum), rng)?;
        let delta = sub_vec(&g, &fx.gamma[e]);
        for &h in hs {
            fx.eta[h] = sub_vec(&fx.eta[h], &delta);
        }
        fx.gamma[e] = g;
    }
    Ok(())
}

/// Redraws each η_h holding η_h + λ_l fixed for the hemifield's locations.
pub(crate) fn shift_eta(
    d: &Design,
    fx: &mut RandomEffects,
    cov: &[CovarianceSpec; 3],
    rng: &mut Rng,
) -> Result<()> {
    let qe = cov[ETA].precision();
    let ql = cov[LAMBDA].precision();
    for h in 0..d.hemifields.len() {
        let ls = &d.hemifield_locations[h];
        let mut prec = qe;
        let mut sum = [0.0; 2];
        for &l in ls {
            prec = prec + ql;
            sum = add_vec(&sum, &add_vec(&fx.lambda[l], &fx.eta[h]));
        }
        let n = distributions::sample_gaussian_canonical(&prec, &ql.mul_vec(&sum), rng)?;
        let delta = sub_vec(&n, &fx.eta[h]);
        for &l in ls {
            fx.lambda[l] = sub_vec(&fx.lambda[l], &delta);
        }
        fx.eta[h] = n;
    }
    Ok(())
}

/// Proposal Cholesky factors (info + Σ⁻¹)⁻¹ for every unit of every level.
fn proposal_shapes(
    info: &[Vec<Matrix2>; 3],
    cov: &[CovarianceSpec; 3],
) -> Result<[Vec<Matrix2>; 3]> {
    let build = |level: usize| -> Result<Vec<Matrix2>> {
        let q = cov[level].precision();
        info[level]
            .iter()
            .map(|m| (*m + q).spd_inverse()?.cholesky())
            .collect()
    };
    Ok([build(GAMMA)?, build(ETA)?, build(LAMBDA)?])
}

fn empirical_cov(pairs: &[Pair], floor: f64) -> Result<CovarianceSpec> {
    let n = pairs.len().max(1) as f64;
    let mut m = Matrix2::zeros();
    for p in pairs {
        m = m + Matrix2::outer(p, p);
    }
    let m = m.scale(1.0 / n);
    CovarianceSpec::diagonal(m.0[0][0] + floor, m.0[1][1] + floor * 0.01)
}

impl<'a> Sampler<'a> {
    fn new(d: &'a Design, cfg: &'a Stage1Config) -> Result<Self> {
        let variant = cfg.model;
        let with_phi = variant.has_visit_effects();
        let values: Vec<f64> = d.obs.iter().map(|o| o.value).collect();
        let fx = init::ridge_init(d, &values, None, with_phi, init::DEFAULT_RIDGE);
        let s2 = init::residual_variance(d, &values, &fx, with_phi);
        let mut z = values;
        for (k, o) in d.obs.iter().enumerate() {
            if o.censored {
                z[k] = fx.mu(d, &FixedEffects::ZERO, k, variant).min(0.0) - 0.5;
            }
        }
        let (cov, sigma2, sigma2_phi) = match &cfg.clamp {
            Some(c) => (
                [c.cov_gamma, c.cov_eta, c.cov_lambda],
                c.sigma2,
                c.sigma2_phi,
            ),
            None => {
                let phi2 = fx.phi.iter().map(|v| v * v).sum::<f64>() / fx.phi.len().max(1) as f64;
                (
                    [
                        empirical_cov(&fx.gamma, 0.1)?,
                        empirical_cov(&fx.eta, 0.1)?,
                        empirical_cov(&fx.lambda, 0.1)?,
                    ],
                    s2,
                    phi2 + 0.1,
                )
            }
        };
        let mut s = Sampler {
            d,
            cfg,
            variant,
            z,
            fx,
            beta_star: [0.5 * math::ln(s2), 0.0],
            sigma2,
            sigma2_phi,
            cov,
            w: vec![1.0; d.visits.len()],
            m3: None,
        };
        if variant.has_variance_link() {
            s.m3 = Some(s.model3_kernel()?);
        }
        Ok(s)
    }

    fn mu(&self, k: usize) -> f64 {
        self.fx.mu(self.d, &FixedEffects::ZERO, k, self.variant)
    }

    /// Proposal shapes from the Fisher information at the starting state.
    fn model3_kernel(&self) -> Result<Model3Kernel> {
        let d = self.d;
        let bs = self.beta_star;
        let inv_var: Vec<f64> = (0..d.obs.len())
            .map(|k| math::exp(-2.0 * (bs[0] + bs[1] * self.mu(k))))
            .collect();
        let info = |members: &[usize]| {
            let mut m = Matrix2::zeros();
            for &k in members {
                let t = d.obs[k].years;
                m = m + Matrix2::new(1.0, t, t, t * t).scale(inv_var[k]);
            }
            m
        };
        let unit_info = [&d.eye_obs, &d.hemifield_obs, &d.location_obs]
            .map(|groups| groups.iter().map(|g| info(g)).collect::<Vec<_>>());
        let all: Vec<usize> = (0..d.obs.len()).collect();
        let alpha_cov = (info(&all) + Matrix2::identity().scale(1e-6)).spd_inverse()?;
        let mut bs_info = Matrix2::zeros();
        for k in 0..d.obs.len() {
            let mu = self.mu(k);
            bs_info = bs_info + Matrix2::new(2.0, 2.0 * mu, 2.0 * mu, 2.0 * mu * mu);
        }
        let bs_cov = (bs_info + Matrix2::identity().scale(1e-6)).spd_inverse()?;
        let mut joint = Matrix::<4>::zeros();
        for i in 0..2 {
            for j in 0..2 {
                joint.0[i][j] = alpha_cov.0[i][j];
                joint.0[i + 2][j + 2] = bs_cov.0[i][j];
            }
        }
        let st = &self.cfg.step_sizes;
        let joint = joint.scale(st.alpha_beta_star * st.alpha_beta_star);
        let phi_sd = d
            .visit_obs
            .iter()
            .map(|g| {
                let p: f64 = g.iter().map(|&k| inv_var[k]).sum::<f64>() + 1.0 / self.sigma2_phi;
                1.0 / math::sqrt(p)
            })
            .collect();
        let ll: Vec<f64> = (0..d.obs.len())
            .map(|k| ll_linked(self.z[k], self.mu(k), &bs))
            .collect();
        Ok(Model3Kernel {
            joint: CovAdapter::new(joint, 0.25),
            gamma: ScaleAdapter::new(2.38 / math::SQRT_2 * st.gamma, 0.35),
            eta: ScaleAdapter::new(2.38 / math::SQRT_2 * st.eta, 0.35),
            lambda: ScaleAdapter::new(2.38 / math::SQRT_2 * st.lambda, 0.35),
            phi: ScaleAdapter::new(2.38 * st.phi, 0.44),
            shapes: proposal_shapes(&unit_info, &self.cov)?,
            info: unit_info,
            phi_sd,
            scratch: vec![0.0; ll.len()],
            ll,
        })
    }

    fn reset_counts(&mut self) {
        if let Some(m) = self.m3.as_mut() {
            m.joint.scale.reset_counts();
            for a in [&mut m.gamma, &mut m.eta, &mut m.lambda, &mut m.phi] {
                a.reset_counts();
            }
        }
    }

    fn acceptance(&self) -> Vec<(&'static str, f64)> {
        match &self.m3 {
            None => Vec::new(),
            Some(m) => vec![
                ("alpha_beta_star", m.joint.scale.acceptance_rate()),
                ("gamma", m.gamma.acceptance_rate()),
                ("eta", m.eta.acceptance_rate()),
                ("lambda", m.lambda.acceptance_rate()),
                ("phi", m.phi.acceptance_rate()),
            ],
        }
    }

    fn is_finite(&self) -> bool {
        let var_ok = if self.variant.has_variance_link() {
            self.beta_star.iter().all(|v| v.is_finite())
                && self
                    .m3
                    .as_ref()
                    .is_some_and(|m| m.ll.iter().all(|v| v.is_finite()))
        } else {
            self.sigma2.is_finite() && self.sigma2 > 0.0
        };
        var_ok
            && self.fx.check(self.d).is_ok()
            && self.sigma2_phi.is_finite()
            && self.z.iter().all(|v| v.is_finite())
    }

    fn pool_draw(&self) -> PoolDraw {
        let v = self.variant;
        PoolDraw {
            alpha: self.fx.alpha,
            beta_star: v.has_variance_link().then_some(self.beta_star),
            c_gamma: self.cov[GAMMA].cholesky_elements(),
            c_eta: self.cov[ETA].cholesky_elements(),
            c_lambda: self.cov[LAMBDA].cholesky_elements(),
            sigma2_phi: v.has_visit_effects().then_some(self.sigma2_phi),
            sigma2: (!v.has_variance_link()).then_some(self.sigma2),
        }
    }

    fn var_params(&self) -> VarianceParams {
        if self.variant.has_variance_link() {
            VarianceParams::linked(self.beta_star[0], self.beta_star[1])
        } else {
            VarianceParams::homoscedastic(self.sigma2)
        }
    }

    fn psi_draw(&self) -> PsiDraw {
        PsiDraw {
            effects: self.fx.clone(),
            var: self.var_params(),
            sigma2_phi: self.variant.has_visit_effects().then_some(self.sigma2_phi),
        }
    }

    fn sweep(&mut self, adapting: bool, rng: &mut Rng) -> Result<()> {
        let var = self.var_params();
        update_latent_censored(self.d, &self.fx, &var, self.variant, &mut self.z, rng)?;
        if self.variant.has_variance_link() {
            self.refresh_censored_ll();
            self.move_alpha_beta_star(adapting, rng)?;
            self.shift_alpha(rng)?;
            self.move_pairs(GAMMA, adapting, rng)?;
            self.shift_gamma(rng)?;
            self.move_pairs(ETA, adapting, rng)?;
            self.shift_eta(rng)?;
            self.move_pairs(LAMBDA, adapting, rng)?;
            self.update_weights(rng)?;
            self.move_phi(adapting, rng)?;
            self.shift_phi(rng)?;
        } else {
            self.tree_update(rng)?;
            if self.variant.has_visit_effects() {
                self.update_weights(rng)?;
                self.gibbs_phi(rng)?;
                self.shift_phi(rng)?;
            }
        }
        if self.cfg.clamp.is_none() {
            self.update_covariances(rng)?;
            if let Some(m) = self.m3.as_mut() {
                m.shapes = proposal_shapes(&m.info, &self.cov)?;
            }
            if self.variant.has_visit_effects() {
                self.update_sigma2_phi(rng)?;
            }
            if !self.variant.has_variance_link() {
                self.update_sigma2(rng)?;
            }
        }
        Ok(())
    }

    fn tree_update(&mut self, rng: &mut Rng) -> Result<()> {
        let resid: Vec<f64> = if self.variant.has_visit_effects() {
            self.d
                .obs
                .iter()
                .zip(&self.z)
                .map(|(o, z)| z - self.fx.phi[o.visit])
                .collect()
        } else {
            self.z.clone()
        };
        let alpha_prec = Matrix2::identity().scale(1.0 / self.cfg.priors.normal_var);
        tree_draw(
            self.d,
            &resid,
            self.sigma2,
            &self.cov,
            &alpha_prec,
            &[0.0; 2],
            &mut self.fx,
            rng,
        )
    }

    fn update_weights(&mut self, rng: &mut Rng) -> Result<()> {
        for v in 0..self.w.len() {
            self.w[v] = distributions::sample_mix_weight(self.fx.phi[v], self.sigma2_phi, rng)?;
        }
        Ok(())
    }

    /// Gaussian conditional of each visit effect (constant residual variance).
    fn gibbs_phi(&mut self, rng: &mut Rng) -> Result<()> {
        let inv_s2 = 1.0 / self.sigma2;
        for v in 0..self.w.len() {
            let members = &self.d.visit_obs[v];
            let mut info = 0.0;
            for &k in members {
                info += (self.z[k] - (self.mu(k) - self.fx.phi[v])) * inv_s2;
            }
            let prec = members.len() as f64 * inv_s2 + self.w[v] / self.sigma2_phi;
            self.fx.phi[v] = info / prec + distributions::std_normal(rng) / math::sqrt(prec);
        }
        Ok(())
    }

    /// Redraws α0 holding every α0 + φ_v fixed.
    fn shift_phi(&mut self, rng: &mut Rng) -> Result<()> {
        let mut prec = 1.0 / self.cfg.priors.normal_var;
        let mut info = 0.0;
        for v in 0..self.w.len() {
            let c = self.fx.alpha[0] + self.fx.phi[v];
            let wv = self.w[v] / self.sigma2_phi;
            prec += wv;
            info += wv * c;
        }
        let new = info / prec + distributions::std_normal(rng) / math::sqrt(prec);
        let delta = new - self.fx.alpha[0];
        self.fx.alpha[0] = new;
        for p in self.fx.phi.iter_mut() {
            *p -= delta;
        }
        Ok(())
    }

    /// Redraws α holding every α + γ_e fixed.
    fn shift_alpha(&mut self, rng: &mut Rng) -> Result<()> {
        let q = self.cov[GAMMA].precision();
        let s: Vec<Pair> = self
            .fx
            .gamma
            .iter()
            .map(|g| add_vec(g, &self.fx.alpha))
            .collect();
        let mut prec = Matrix2::identity().scale(1.0 / self.cfg.priors.normal_var);
        let mut sum = [0.0; 2];
        for se in &s {
            prec = prec + q;
            sum = add_vec(&sum, se);
        }
        let alpha = distributions::sample_gaussian_canonical(&prec, &q.mul_vec(&sum), rng)?;
        for (g, se) in self.fx.gamma.iter_mut().zip(&s) {
            *g = sub_vec(se, &alpha);
        }
        self.fx.alpha = alpha;
        Ok(())
    }

    fn shift_gamma(&mut self, rng: &mut Rng) -> Result<()> {
        shift_gamma(self.d, &mut self.fx, &self.cov, rng)
    }

    fn shift_eta(&mut self, rng: &mut Rng) -> Result<()> {
        shift_eta(self.d, &mut self.fx, &self.cov, rng)
    }

    fn refresh_censored_ll(&mut self) {
        let bs = self.beta_star;
        let m = self.m3.as_mut().expect("model 3 kernel");
        for (k, o) in self.d.obs.iter().enumerate() {
            if o.censored {
                let mu = self.fx.mu(self.d, &FixedEffects::ZERO, k, self.variant);
                m.ll[k] = ll_linked(self.z[k], mu, &bs);
            }
        }
    }

    /// Complete-data log-likelihood change over `members` at the current
    /// (proposed) state; new terms go to the scratch buffer.
    fn ll_delta(&mut self, members: &[usize]) -> f64 {
        let bs = self.beta_star;
        let mut m = self.m3.take().expect("model 3 kernel");
        let mut delta = 0.0;
        for &k in members {
            let new = ll_linked(self.z[k], self.mu(k), &bs);
            m.scratch[k] = new;
            delta += new - m.ll[k];
        }
        self.m3 = Some(m);
        delta
    }

    fn commit(&mut self, members: &[usize]) {
        let m = self.m3.as_mut().expect("model 3 kernel");
        for &k in members {
            m.ll[k] = m.scratch[k];
        }
    }

    fn move_alpha_beta_star(&mut self, adapting: bool, rng: &mut Rng) -> Result<()> {
        let cur = [
            self.fx.alpha[0],
            self.fx.alpha[1],
            self.beta_star[0],
            self.beta_star[1],
        ];
        let prop = self.m3.as_ref().unwrap().joint.propose(&cur, rng);
        let nv = self.cfg.priors.normal_var;
        let prior = |x: &[f64; 4]| -0.5 * x.iter().map(|v| v * v).sum::<f64>() / nv;
        self.fx.alpha = [prop[0], prop[1]];
        self.beta_star = [prop[2], prop[3]];
        let all: Vec<usize> = (0..self.d.obs.len()).collect();
        let lr = self.ll_delta(&all) + prior(&prop) - prior(&cur);
        if lr.is_nan() {
            return Err(Error::non_finite(format!(
                "stage 1 (alpha, beta*) update, individual {}",
                self.d.individual_id
            )));
        }
        let ok = mh::accept(lr, rng);
        if ok {
            self.commit(&all);
        } else {
            self.fx.alpha = [cur[0], cur[1]];
            self.beta_star = [cur[2], cur[3]];
        }
        let m = self.m3.as_mut().unwrap();
        m.joint.scale.record(ok, adapting);
        if adapting {
            let x = [
                self.fx.alpha[0],
                self.fx.alpha[1],
                self.beta_star[0],
                self.beta_star[1],
            ];
            m.joint.observe(&x);
        }
        Ok(())
    }

    fn move_pairs(&mut self, level: usize, adapting: bool, rng: &mut Rng) -> Result<()> {
        let q = self.cov[level].precision();
        let d = self.d;
        let n = match level {
            GAMMA => d.eyes.len(),
            ETA => d.hemifields.len(),
            _ => d.locations.len(),
        };
        for slot in 0..n {
            let (scale, shape) = {
                let m = self.m3.as_ref().unwrap();
                match level {
                    GAMMA => (m.gamma.scale(), m.shapes[GAMMA][slot]),
                    ETA => (m.eta.scale(), m.shapes[ETA][slot]),
                    _ => (m.lambda.scale(), m.shapes[LAMBDA][slot]),
                }
            };
            let members = match level {
                GAMMA => &d.eye_obs[slot],
                ETA => &d.hemifield_obs[slot],
                _ => &d.location_obs[slot],
            };
            let cur = match level {
                GAMMA => self.fx.gamma[slot],
                ETA => self.fx.eta[slot],
                _ => self.fx.lambda[slot],
            };
            let step = distributions::sample_mvn_chol(&[0.0; 2], &shape, rng);
            let prop = [cur[0] + scale * step[0], cur[1] + scale * step[1]];
            self.set_pair(level, slot, prop);
            let lr = self.ll_delta(members) - 0.5 * (quad(&q, &prop) - quad(&q, &cur));
            if lr.is_nan() {
                return Err(Error::non_finite(format!(
                    "stage 1 random-effect update, individual {}",
                    d.individual_id
                )));
            }
            let ok = mh::accept(lr, rng);
            if ok {
                self.commit(members);
            } else {
                self.set_pair(level, slot, cur);
            }
            let m = self.m3.as_mut().unwrap();
            match level {
                GAMMA => m.gamma.record(ok, adapting),
                ETA => m.eta.record(ok, adapting),
                _ => m.lambda.record(ok, adapting),
            }
        }
        Ok(())
    }

    fn set_pair(&mut self, level: usize, slot: usize, v: Pair) {
        match level {
            GAMMA => self.fx.gamma[slot] = v,
            ETA => self.fx.eta[slot] = v,
            _ => self.fx.lambda[slot] = v,
        }
    }

    fn move_phi(&mut self, adapting: bool, rng: &mut Rng) -> Result<()> {
        let d = self.d;
        for v in 0..d.visits.len() {
            let (scale, sd) = {
                let m = self.m3.as_ref().unwrap();
                (m.phi.scale(), m.phi_sd[v])
            };
            let cur = self.fx.phi[v];
            let prop = cur + scale * sd * distributions::std_normal(rng);
            self.fx.phi[v] = prop;
            let members = &d.visit_obs[v];
            let prior = -0.5 * self.w[v] * (prop * prop - cur * cur) / self.sigma2_phi;
            let lr = self.ll_delta(members) + prior;
            if lr.is_nan() {
                return Err(Error::non_finite(format!(
                    "stage 1 visit-effect update, individual {}",
                    d.individual_id
                )));
            }
            let ok = mh::accept(lr, rng);
            if ok {
                self.commit(members);
            } else {
                self.fx.phi[v] = cur;
            }
            self.m3.as_mut().unwrap().phi.record(ok, adapting);
        }
        Ok(())
    }

    fn update_covariances(&mut self, rng: &mut Rng) -> Result<()> {
        let p = self.cfg.priors;
        let prior_scale = Matrix2::identity().scale(p.iw_scale);
        for (level, units) in [
            (GAMMA, &self.fx.gamma),
            (ETA, &self.fx.eta),
            (LAMBDA, &self.fx.lambda),
        ] {
            let mut s = prior_scale;
            for u in units.iter() {
                s = s + Matrix2::outer(u, u);
            }
            let draw =
                distributions::sample_inverse_wishart2(p.iw_df + units.len() as f64, &s, rng)?;
            self.cov[level] = CovarianceSpec::new(draw)?;
        }
        Ok(())
    }

    fn update_sigma2_phi(&mut self, rng: &mut Rng) -> Result<()> {
        let p = self.cfg.priors;
        let ss: f64 = self
            .fx
            .phi
            .iter()
            .zip(&self.w)
            .map(|(f, w)| w * f * f)
            .sum();
        let n = self.fx.phi.len() as f64;
        self.sigma2_phi =
            distributions::sample_inverse_gamma(p.ig_shape + 0.5 * n, p.ig_rate + 0.5 * ss, rng)?;
        Ok(())
    }

    fn update_sigma2(&mut self, rng: &mut Rng) -> Result<()> {
        let p = self.cfg.priors;
        let ssr: f64 = (0..self.d.obs.len())
            .map(|k| {
                let r = self.z[k] - self.mu(k);
                r * r
            })
            .sum();
        let n = self.d.obs.len() as f64;
        self.sigma2 =
            distributions::sample_inverse_gamma(p.ig_shape + 0.5 * n, p.ig_rate + 0.5 * ssr, rng)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::RngStream;
    use crate::model::{Eye, Observation};

    #[test]
    fn pair_conditional_flat_prior_single_observation() {
        // One observation at years = 0 pins only the intercept; the vague
        // prior keeps the slope proper.
        let xtx = Matrix2::new(1.0, 0.0, 0.0, 0.0);
        let cov = CovarianceSpec::diagonal(1e8, 1e8).unwrap();
        let (mean, _) = pair_conditional(Some(&cov), &xtx, &[3.5, 0.0], 1.0).unwrap();
        assert!((mean[0] - 3.5).abs() < 1e-6);
        assert!(pair_conditional(None, &xtx, &[3.5, 0.0], 1.0).is_err());
    }

    #[test]
    fn pair_conditional_without_data_is_the_prior() {
        let cov = CovarianceSpec::new(Matrix2::new(2.0, 0.3, 0.3, 0.5)).unwrap();
        let (mean, c) = pair_conditional(Some(&cov), &Matrix2::zeros(), &[0.0, 0.0], 4.0).unwrap();
        assert_eq!(mean, [0.0, 0.0]);
        assert!(c.max_abs_diff(cov.matrix()) < 1e-12);
    }

    #[test]
    fn pool_draw_round_trip() {
        for variant in ModelVariant::ALL {
            let draw = PoolDraw {
                alpha: [20.0, -0.3],
                beta_star: variant.has_variance_link().then_some([2.8, -0.08]),
                c_gamma: [1.0, 0.1, 0.2],
                c_eta: [0.5, -0.1, 0.3],
                c_lambda: [2.0, 0.0, 0.1],
                sigma2_phi: variant.has_visit_effects().then_some(1.8),
                sigma2: (!variant.has_variance_link()).then_some(13.0),
            };
            let vals = draw.values();
            assert_eq!(vals.len(), PoolDraw::column_names(variant).len());
            assert_eq!(PoolDraw::from_values(variant, &vals).unwrap(), draw);
        }
        let mut bad = [1.0; 14];
        bad[2] = -1.0;
        assert!(PoolDraw::from_values(ModelVariant::Model1, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(Stage1Config::desk(ModelVariant::Model1).validate().is_ok());
        assert_eq!(Stage1Config::paper(ModelVariant::Model3).retained(), 5000);
        assert!(
            Stage1Config::with_lengths(ModelVariant::Model1, 100, 100, 1)
                .validate()
                .is_err()
        );
        assert!(
            Stage1Config::with_lengths(ModelVariant::Model1, 1000, 500, 10)
                .validate()
                .is_err()
        );
        assert!(
            Stage1Config::with_lengths(ModelVariant::Model1, 1000, 500, 0)
                .validate()
                .is_err()
        );
    }

    #[test]
    fn single_visit_is_refused() {
        let obs = (1..=5u8)
            .map(|l| Observation::from_reading(0, Eye::Od, 1, l, 1, 0.0, 20.0).unwrap())
            .collect();
        let data = IndividualData::new("one", obs).unwrap();
        let cfg = Stage1Config::with_lengths(ModelVariant::Model1, 300, 100, 1);
        let mut rng = RngStream::new(1, 1).rng();
        assert!(matches!(
            fit_individual(&data, &cfg, &mut rng),
            Err(Error::TooFewVisits { visits: 1, .. })
        ));
    }
}

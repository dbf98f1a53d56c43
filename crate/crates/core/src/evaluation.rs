//! Model assessment: posterior predictive checks, recovery of the random
//! effects dropped between the stages, and DIC.
//!
//! Recovery follows the method of composition. For a stage-2 draw the
//! individual's pool row fixes α, the variance parameters and the random
//! effect covariances; the random effects are then sampled from their
//! conditional posterior by a short blockwise random-walk chain started at a
//! ridge least-squares fit, keeping only its final state.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::distributions::{self, Rng, RngStream};
use crate::error::{Error, Result};
use crate::init;
use crate::linalg::Matrix2;
use crate::math;
use crate::mh::{self, ScaleAdapter};
use crate::model::{
    censor, loglik_individual, loglik_point, residual_sd, CovarianceSpec, Design, FixedEffects,
    ModelVariant, Pair, RandomEffects, VarianceParams,
};
use crate::stage1::{self, quad, PoolDraw, PsiDraw, SamplePool, ETA, GAMMA, LAMBDA};
use crate::stage2::Stage2Run;

/// Lower flag threshold for posterior predictive p-values.
pub const PPP_LOWER: f64 = 0.05;
/// Upper flag threshold for posterior predictive p-values.
pub const PPP_UPPER: f64 = 0.95;

/// Sum of squared standardized residuals, with E[y] the linear predictor
/// and var[y] the residual variance.
pub fn gelman_discrepancy(design: &Design, psi: &PsiDraw, variant: ModelVariant) -> Result<f64> {
    let values: Vec<f64> = design.obs.iter().map(|o| o.value).collect();
    discrepancy(design, &values, psi, variant, false)
}

/// Discrepancy on the censored scale: every reading is compared with the
/// mean and variance of the censored normal predictive, so censored zeros
/// enter the same way as the values a replicate would produce.
pub fn censored_discrepancy(
    design: &Design,
    values: &[f64],
    psi: &PsiDraw,
    variant: ModelVariant,
) -> Result<f64> {
    discrepancy(design, values, psi, variant, true)
}

fn discrepancy(
    design: &Design,
    values: &[f64],
    psi: &PsiDraw,
    variant: ModelVariant,
    censored_scale: bool,
) -> Result<f64> {
    if values.len() != design.obs.len() {
        return Err(Error::structure(
            "value count differs from the observation count",
        ));
    }
    psi.effects.check(design)?;
    let mut total = 0.0;
    for (k, y) in values.iter().enumerate() {
        let mu = psi.effects.mu(design, &FixedEffects::ZERO, k, variant);
        let sd = residual_sd(mu, &psi.var, variant);
        let (m, v) = if censored_scale {
            math::censored_normal_moments(mu, sd)
        } else {
            (mu, sd * sd)
        };
        if !(v > 0.0) {
            return Err(Error::invalid(format!(
                "predictive variance of observation {k} is {v}"
            )));
        }
        total += (y - m) * (y - m) / v;
    }
    if !total.is_finite() {
        return Err(Error::non_finite("discrepancy"));
    }
    Ok(total)
}

/// Posterior predictive p-value of one individual: the share of draws whose
/// replicated-data discrepancy does not exceed the observed one. Replicates
/// are drawn from the normal model and censored at 0 dB.
pub fn ppc_individual(
    design: &Design,
    chain: &[PsiDraw],
    variant: ModelVariant,
    rng: &mut Rng,
) -> Result<f64> {
    if chain.is_empty() {
        return Err(Error::Empty(format!(
            "no retained states for individual {}",
            design.individual_id
        )));
    }
    let observed: Vec<f64> = design.obs.iter().map(|o| o.value).collect();
    let mut replicate = vec![0.0; observed.len()];
    let mut hits = 0usize;
    for psi in chain {
        for (k, r) in replicate.iter_mut().enumerate() {
            let mu = psi.effects.mu(design, &FixedEffects::ZERO, k, variant);
            let sd = residual_sd(mu, &psi.var, variant);
            *r = censor(mu + sd * distributions::std_normal(rng));
        }
        let d_obs = censored_discrepancy(design, &observed, psi, variant)?;
        let d_rep = censored_discrepancy(design, &replicate, psi, variant)?;
        if d_rep <= d_obs {
            hits += 1;
        }
    }
    Ok(hits as f64 / chain.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PppEntry {
    pub individual_id: String,
    pub ppp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PppReport {
    /// Sorted ascending by p-value.
    pub entries: Vec<PppEntry>,
    pub mean_ppp: f64,
}

impl PppReport {
    pub fn new(mut entries: Vec<PppEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("no predictive p-values".into()));
        }
        if let Some(e) = entries.iter().find(|e| !(0.0..=1.0).contains(&e.ppp)) {
            return Err(Error::invalid(format!(
                "p-value {} of {} is outside [0, 1]",
                e.ppp, e.individual_id
            )));
        }
        entries.sort_by(|a, b| {
            a.ppp
                .total_cmp(&b.ppp)
                .then_with(|| a.individual_id.cmp(&b.individual_id))
        });
        let mean_ppp = entries.iter().map(|e| e.ppp).sum::<f64>() / entries.len() as f64;
        Ok(PppReport { entries, mean_ppp })
    }

    /// Entries in either tail.
    pub fn flagged(&self) -> Vec<&PppEntry> {
        self.entries
            .iter()
            .filter(|e| e.ppp < PPP_LOWER || e.ppp > PPP_UPPER)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryConfig {
    /// Number of stage-2 draws to condition on.
    pub draws: usize,
    pub inner_iterations: usize,
    /// Proposal scales adapt during this many leading inner iterations.
    pub adapt_iterations: usize,
    pub step_scale: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            draws: 1000,
            inner_iterations: 500,
            adapt_iterations: 250,
            step_scale: 1.0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 || self.inner_iterations == 0 {
            return Err(Error::Config(
                "recovery needs at least one draw and one inner iteration".into(),
            ));
        }
        if self.adapt_iterations > self.inner_iterations {
            return Err(Error::Config(
                "adaptation cannot outlast the inner chain".into(),
            ));
        }
        if !(self.step_scale > 0.0) {
            return Err(Error::Config("step scale must be positive".into()));
        }
        Ok(())
    }
}

/// `k` evenly strided positions out of `total` (all of them when `k >= total`).
pub fn select_draws(total: usize, k: usize) -> Vec<usize> {
    if k >= total {
        return (0..total).collect();
    }
    (0..k).map(|i| i * total / k).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredDraw {
    /// Stage-2 draw index, counted across chains.
    pub draw: usize,
    /// Pool row the draw conditioned on.
    pub theta: PoolDraw,
    /// Recovered random effects; `alpha` is copied from `theta`.
    pub effects: RandomEffects,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredEffects {
    pub individual_id: String,
    pub variant: ModelVariant,
    pub draws: Vec<RecoveredDraw>,
    /// Draws whose inner chain diverged, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Pool rows of `individual` at the given stage-2 draws.
pub fn composition_conditions(
    run: &Stage2Run,
    individual: usize,
    pool: &SamplePool,
    draws: &[usize],
) -> Result<Vec<(usize, PoolDraw)>> {
    if pool.variant != run.variant {
        return Err(Error::structure(
            "pool and stage-2 run use different models",
        ));
    }
    draws
        .iter()
        .map(|&k| {
            let row = run.pool_row(k, individual)?;
            let theta = pool.draws.get(row).ok_or_else(|| {
                Error::structure(format!("pool of {} has no row {row}", pool.individual_id))
            })?;
            Ok((k, theta.clone()))
        })
        .collect()
}

/// Stream for recovering `draw` of `individual_id`; keyed by content, not
/// by schedule.
pub fn recovery_stream(seed: u64, individual_id: &str, draw: usize) -> RngStream {
    RngStream::derive_named(seed, "recover", individual_id, draw as u64)
}

/// Recovers the random effects of one individual at every conditioning draw.
/// Draws whose inner chain diverges are recorded in `skipped`.
pub fn recover_random_effects(
    design: &Design,
    variant: ModelVariant,
    conditions: &[(usize, PoolDraw)],
    cfg: &RecoveryConfig,
    seed: u64,
) -> Result<RecoveredEffects> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(Error::Empty("no stage-2 draws to condition on".into()));
    }
    let mut out = RecoveredEffects {
        individual_id: design.individual_id.clone(),
        variant,
        draws: Vec::with_capacity(conditions.len()),
        skipped: Vec::new(),
    };
    for (k, theta) in conditions {
        let mut rng = recovery_stream(seed, &design.individual_id, *k).rng();
        match recover_draw(design, variant, theta, cfg, &mut rng) {
            Ok(effects) => out.draws.push(RecoveredDraw {
                draw: *k,
                theta: theta.clone(),
                effects,
            }),
            Err(e @ Error::NonFinite { .. }) => out.skipped.push((*k, format!("{e}"))),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One composition step: samples the random effects given a pool row and
/// returns the final state of the inner chain.
pub fn recover_draw(
    design: &Design,
    variant: ModelVariant,
    theta: &PoolDraw,
    cfg: &RecoveryConfig,
    rng: &mut Rng,
) -> Result<RandomEffects> {
    cfg.validate()?;
    theta.validate()?;
    if theta.beta_star.is_some() != variant.has_variance_link()
        || theta.sigma2_phi.is_some() != variant.has_visit_effects()
    {
        return Err(Error::structure(format!(
            "pool row does not match {variant}"
        )));
    }
    let mut s = Composition::new(design, variant, theta, cfg)?;
    for it in 0..cfg.inner_iterations {
        s.sweep(it < cfg.adapt_iterations, rng)?;
    }
    if s.fx.check(design).is_err() || s.ll.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!(
            "recovery, individual {}",
            design.individual_id
        )));
    }
    Ok(s.fx)
}

struct Composition<'a> {
    d: &'a Design,
    variant: ModelVariant,
    var: VarianceParams,
    sigma2_phi: f64,
    cov: [CovarianceSpec; 3],
    q: [Matrix2; 3],
    fx: RandomEffects,
    ll: Vec<f64>,
    scratch: Vec<f64>,
    shapes: [Vec<Matrix2>; 3],
    pair_scale: [ScaleAdapter; 3],
    phi_sd: Vec<f64>,
    phi_scale: ScaleAdapter,
    shift_scale: ScaleAdapter,
}

impl<'a> Composition<'a> {
    fn new(
        d: &'a Design,
        variant: ModelVariant,
        theta: &PoolDraw,
        cfg: &RecoveryConfig,
    ) -> Result<Self> {
        let with_phi = variant.has_visit_effects();
        let values: Vec<f64> = d.obs.iter().map(|o| o.value).collect();
        let fx = init::ridge_init(d, &values, Some(theta.alpha), with_phi, init::DEFAULT_RIDGE);
        let cov = theta.covariances()?;
        let q = cov.map(|c| c.precision());
        let var = theta.variance_params();
        let sigma2_phi = theta.sigma2_phi.unwrap_or(1.0);
        let mut s = Composition {
            d,
            variant,
            var,
            sigma2_phi,
            cov,
            q,
            fx,
            ll: Vec::new(),
            scratch: vec![0.0; d.obs.len()],
            shapes: [Vec::new(), Vec::new(), Vec::new()],
            pair_scale: [0; 3]
                .map(|_| ScaleAdapter::new(2.38 / math::SQRT_2 * cfg.step_scale, 0.35)),
            phi_sd: Vec::new(),
            phi_scale: ScaleAdapter::new(2.38 * cfg.step_scale, 0.44),
            shift_scale: ScaleAdapter::new(math::sqrt(sigma2_phi) * cfg.step_scale, 0.44),
        };
        s.ll = (0..d.obs.len()).map(|k| s.ll_at(k)).collect();
        let inv_var: Vec<f64> = (0..d.obs.len())
            .map(|k| {
                let sd = residual_sd(s.mu(k), &var, variant);
                1.0 / (sd * sd)
            })
            .collect();
        let info = |members: &[usize]| {
            let mut m = Matrix2::zeros();
            for &k in members {
                let t = d.obs[k].years;
                m = m + Matrix2::new(1.0, t, t, t * t).scale(inv_var[k]);
            }
            m
        };
        for (level, groups) in [
            (GAMMA, &d.eye_obs),
            (ETA, &d.hemifield_obs),
            (LAMBDA, &d.location_obs),
        ] {
            s.shapes[level] = groups
                .iter()
                .map(|g| (info(g) + q[level]).spd_inverse()?.cholesky())
                .collect::<Result<_>>()?;
        }
        s.phi_sd = d
            .visit_obs
            .iter()
            .map(|g| {
                1.0 / math::sqrt(g.iter().map(|&k| inv_var[k]).sum::<f64>() + 1.0 / sigma2_phi)
            })
            .collect();
        Ok(s)
    }

    fn mu(&self, k: usize) -> f64 {
        self.fx.mu(self.d, &FixedEffects::ZERO, k, self.variant)
    }

    fn ll_at(&self, k: usize) -> f64 {
        let mu = self.mu(k);
        let o = &self.d.obs[k];
        if !self.variant.has_variance_link() {
            return loglik_point(
                o.value,
                o.censored,
                mu,
                residual_sd(mu, &self.var, self.variant),
            );
        }
        let log_sd = self.var.beta_star0 + self.var.beta_star1 * mu;
        let inv_sd = math::exp(-log_sd);
        if o.censored {
            math::log_norm_cdf(-mu * inv_sd)
        } else {
            let z = (o.value - mu) * inv_sd;
            -0.5 * z * z - log_sd - math::LN_SQRT_2PI
        }
    }

    fn ll_delta(&mut self, members: &[usize]) -> f64 {
        let mut delta = 0.0;
        for &k in members {
            let new = self.ll_at(k);
            self.scratch[k] = new;
            delta += new - self.ll[k];
        }
        delta
    }

    fn commit(&mut self, members: &[usize]) {
        for &k in members {
            self.ll[k] = self.scratch[k];
        }
    }

    fn diverged(&self) -> Error {
        Error::non_finite(format!("recovery, individual {}", self.d.individual_id))
    }

    fn sweep(&mut self, adapting: bool, rng: &mut Rng) -> Result<()> {
        self.move_pairs(GAMMA, adapting, rng)?;
        stage1::shift_gamma(self.d, &mut self.fx, &self.cov, rng)?;
        self.move_pairs(ETA, adapting, rng)?;
        stage1::shift_eta(self.d, &mut self.fx, &self.cov, rng)?;
        self.move_pairs(LAMBDA, adapting, rng)?;
        if self.variant.has_visit_effects() {
            self.move_phi(adapting, rng)?;
            self.shift_eye_visits(adapting, rng)?;
        }
        Ok(())
    }

    fn move_pairs(&mut self, level: usize, adapting: bool, rng: &mut Rng) -> Result<()> {
        let d = self.d;
        let q = self.q[level];
        for slot in 0..self.shapes[level].len() {
            let members = match level {
                GAMMA => &d.eye_obs[slot],
                ETA => &d.hemifield_obs[slot],
                _ => &d.location_obs[slot],
            };
            let cur = self.pair(level, slot);
            let step = distributions::sample_mvn_chol(&[0.0; 2], &self.shapes[level][slot], rng);
            let scale = self.pair_scale[level].scale();
            let prop = [cur[0] + scale * step[0], cur[1] + scale * step[1]];
            self.set_pair(level, slot, prop);
            let lr = self.ll_delta(members) - 0.5 * (quad(&q, &prop) - quad(&q, &cur));
            if lr.is_nan() {
                return Err(self.diverged());
            }
            let ok = mh::accept(lr, rng);
            if ok {
                self.commit(members);
            } else {
                self.set_pair(level, slot, cur);
            }
            self.pair_scale[level].record(ok, adapting);
        }
        Ok(())
    }

    fn pair(&self, level: usize, slot: usize) -> Pair {
        match level {
            GAMMA => self.fx.gamma[slot],
            ETA => self.fx.eta[slot],
            _ => self.fx.lambda[slot],
        }
    }

    fn set_pair(&mut self, level: usize, slot: usize, v: Pair) {
        match level {
            GAMMA => self.fx.gamma[slot] = v,
            ETA => self.fx.eta[slot] = v,
            _ => self.fx.lambda[slot] = v,
        }
    }

    fn log_t3(&self, phi: f64) -> f64 {
        -2.0 * math::ln_1p(phi * phi / (3.0 * self.sigma2_phi))
    }

    fn move_phi(&mut self, adapting: bool, rng: &mut Rng) -> Result<()> {
        let d = self.d;
        for v in 0..d.visits.len() {
            let cur = self.fx.phi[v];
            let prop =
                cur + self.phi_scale.scale() * self.phi_sd[v] * distributions::std_normal(rng);
            self.fx.phi[v] = prop;
            let members = &d.visit_obs[v];
            let lr = self.ll_delta(members) + self.log_t3(prop) - self.log_t3(cur);
            if lr.is_nan() {
                return Err(self.diverged());
            }
            let ok = mh::accept(lr, rng);
            if ok {
                self.commit(members);
            } else {
                self.fx.phi[v] = cur;
            }
            self.phi_scale.record(ok, adapting);
        }
        Ok(())
    }

    /// Moves an eye intercept against all of that eye's visit effects; the
    /// likelihood is unchanged, so only the priors enter the ratio.
    fn shift_eye_visits(&mut self, adapting: bool, rng: &mut Rng) -> Result<()> {
        let d = self.d;
        let q = self.q[GAMMA];
        for e in 0..d.eyes.len() {
            let delta = self.shift_scale.scale() * distributions::std_normal(rng);
            let cur = self.fx.gamma[e];
            let prop = [cur[0] + delta, cur[1]];
            let mut lr = -0.5 * (quad(&q, &prop) - quad(&q, &cur));
            for (v, unit) in d.visits.iter().enumerate() {
                if unit.eye == e {
                    let phi = self.fx.phi[v];
                    lr += self.log_t3(phi - delta) - self.log_t3(phi);
                }
            }
            if lr.is_nan() {
                return Err(self.diverged());
            }
            let ok = mh::accept(lr, rng);
            if ok {
                self.fx.gamma[e] = prop;
                for (v, unit) in d.visits.iter().enumerate() {
                    if unit.eye == e {
                        self.fx.phi[v] -= delta;
                    }
                }
            }
            self.shift_scale.record(ok, adapting);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DicReport {
    /// Posterior mean deviance.
    pub dbar: f64,
    /// Deviance at the posterior means.
    pub dhat: f64,
    pub p_d: f64,
    pub dic: f64,
    pub draws: usize,
}

/// −2 × the summed exact log-likelihood of every individual, each at its own
/// (pool row, random effects) state.
pub fn deviance(
    designs: &[Design],
    variant: ModelVariant,
    states: &[(&PoolDraw, &RandomEffects)],
) -> Result<f64> {
    if designs.len() != states.len() {
        return Err(Error::structure("one state per individual is required"));
    }
    let mut ll = 0.0;
    for (d, (theta, effects)) in designs.iter().zip(states) {
        let mut fx = (*effects).clone();
        fx.alpha = theta.alpha;
        ll += loglik_individual(
            d,
            &FixedEffects::ZERO,
            &fx,
            &theta.variance_params(),
            variant,
        )?;
    }
    Ok(-2.0 * ll)
}

/// DIC over the draws recovered for every individual. Draws skipped for
/// any individual are dropped for all of them; the remaining draw indices
/// must then agree.
pub fn compute_dic(
    designs: &[Design],
    variant: ModelVariant,
    recovered: &[RecoveredEffects],
) -> Result<DicReport> {
    if designs.is_empty() || designs.len() != recovered.len() {
        return Err(Error::structure(
            "recovered effects must cover every individual exactly once",
        ));
    }
    for (d, r) in designs.iter().zip(recovered) {
        if d.individual_id != r.individual_id {
            return Err(Error::structure(format!(
                "recovered effects of {} paired with data of {}",
                r.individual_id, d.individual_id
            )));
        }
        if r.variant != variant {
            return Err(Error::structure(format!(
                "recovered effects of {} use {}",
                r.individual_id, r.variant
            )));
        }
    }
    let skipped: Vec<usize> = recovered
        .iter()
        .flat_map(|r| r.skipped.iter().map(|s| s.0))
        .collect();
    let kept: Vec<Vec<&RecoveredDraw>> = recovered
        .iter()
        .map(|r| {
            r.draws
                .iter()
                .filter(|d| !skipped.contains(&d.draw))
                .collect()
        })
        .collect();
    let reference: Vec<usize> = kept[0].iter().map(|d| d.draw).collect();
    for (r, k) in recovered.iter().zip(&kept) {
        if k.len() != reference.len() || k.iter().zip(&reference).any(|(d, &j)| d.draw != j) {
            return Err(Error::structure(format!(
                "draw indices of {} differ from those of {}",
                r.individual_id, recovered[0].individual_id
            )));
        }
    }
    let n = reference.len();
    if n == 0 {
        return Err(Error::Empty("no draws left for DIC".into()));
    }

    let mut total = 0.0;
    for t in 0..n {
        let states: Vec<(&PoolDraw, &RandomEffects)> =
            kept.iter().map(|k| (&k[t].theta, &k[t].effects)).collect();
        total += deviance(designs, variant, &states)?;
    }
    let dbar = total / n as f64;

    let means: Vec<(PoolDraw, RandomEffects)> = designs
        .iter()
        .zip(&kept)
        .map(|(d, k)| posterior_mean(d, k, variant))
        .collect::<Result<_>>()?;
    let states: Vec<(&PoolDraw, &RandomEffects)> = means.iter().map(|(t, e)| (t, e)).collect();
    let dhat = deviance(designs, variant, &states)?;
    let p_d = dbar - dhat;
    Ok(DicReport {
        dbar,
        dhat,
        p_d,
        dic: dbar + p_d,
        draws: n,
    })
}

/// Arithmetic means of the pool rows and random effects; Cholesky diagonals
/// are floored at 1e-8 so the averaged covariances stay valid.
fn posterior_mean(
    design: &Design,
    draws: &[&RecoveredDraw],
    variant: ModelVariant,
) -> Result<(PoolDraw, RandomEffects)> {
    let n = draws.len() as f64;
    let width = PoolDraw::column_names(variant).len();
    let mut theta = vec![0.0; width];
    let mut effects = vec![0.0; draws[0].effects.to_flat(true).len()];
    for d in draws {
        for (m, v) in theta.iter_mut().zip(d.theta.values()) {
            *m += v / n;
        }
        for (m, v) in effects.iter_mut().zip(d.effects.to_flat(true)) {
            *m += v / n;
        }
    }
    let mut theta = PoolDraw::from_values(variant, &theta)?;
    for c in [&mut theta.c_gamma, &mut theta.c_eta, &mut theta.c_lambda] {
        c[0] = c[0].max(1e-8);
        c[2] = c[2].max(1e-8);
    }
    let effects = RandomEffects::from_flat(design, theta.alpha, &effects, true)?;
    Ok((theta, effects))
}

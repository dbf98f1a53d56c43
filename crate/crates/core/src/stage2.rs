//! Population-level combination of the stage-1 pools.
//!
//! Each individual's parameter vector θ_i is resampled from its own pool by
//! an independence Metropolis-Hastings step whose proposal is the stage-1
//! posterior, so the likelihood cancels and only the population density and
//! the stage-1 prior remain in the ratio. Population means and covariances
//! then follow from conjugate normal / inverse-Wishart / inverse-gamma
//! conditionals.
//!
//! θ_i is grouped into blocks that each get their own population normal:
//! α (2), β* (2, Model 3), the Cholesky elements of the eye, hemifield and
//! location covariances (3 each), and the logs of σ²_φ (Models 2-3) and σ²
//! (Models 1-2).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diagnostics::{self, Summary};
use crate::distributions::{self, Rng, RngStream};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Matrix2, Vector};
use crate::math;
use crate::mh;
use crate::model::{FixedEffects, ModelVariant, Pair};
use crate::stage1::{PoolDraw, SamplePool, Stage1Priors};

/// Normal population block: mean vector and covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussBlock<const N: usize> {
    pub mean: Vector<N>,
    pub cov: Matrix<N>,
}

impl<const N: usize> GaussBlock<N> {
    fn chol(&self) -> Result<Matrix<N>> {
        self.cov.cholesky()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationState {
    /// Mean (β0, β1) and covariance Σ_α of the individual pairs.
    pub alpha: GaussBlock<2>,
    /// Mean (β*0, β*1) and covariance Σ_β*; Model 3 only.
    pub beta_star: Option<GaussBlock<2>>,
    /// Mean C̄ and covariance Σ_C of the eye, hemifield and location Cholesky elements.
    pub c: [GaussBlock<3>; 3],
    /// Location and spread of log σ²_φ; Models 2 and 3.
    pub log_sigma2_phi: Option<GaussBlock<1>>,
    /// Location and spread of log σ²; Models 1 and 2.
    pub log_sigma2: Option<GaussBlock<1>>,
}

const LEVELS: [&str; 3] = ["gamma", "eta", "lambda"];

impl PopulationState {
    pub fn fixed(&self) -> FixedEffects {
        FixedEffects {
            beta0: self.alpha.mean[0],
            beta1: self.alpha.mean[1],
        }
    }

    /// Population median exp(m) of the individual σ²_φ.
    pub fn sigma2_phi(&self) -> Option<f64> {
        self.log_sigma2_phi.map(|b| math::exp(b.mean[0]))
    }

    /// Population median exp(m) of the individual σ².
    pub fn sigma2(&self) -> Option<f64> {
        self.log_sigma2.map(|b| math::exp(b.mean[0]))
    }

    /// Headline parameter names of a variant, in reporting order.
    pub fn reported_names(variant: ModelVariant) -> Vec<&'static str> {
        let mut v = vec!["beta0", "beta1"];
        if variant.has_variance_link() {
            v.extend(["beta_star0", "beta_star1"]);
        } else {
            v.push("sigma2");
        }
        if variant.has_visit_effects() {
            v.push("sigma2_phi");
        }
        v
    }

    pub fn column_names(variant: ModelVariant) -> Vec<String> {
        let mut names: Vec<String> = Self::reported_names(variant)
            .into_iter()
            .map(String::from)
            .collect();
        names.extend(["sigma_alpha11", "sigma_alpha21", "sigma_alpha22"].map(String::from));
        if variant.has_variance_link() {
            names.extend(
                [
                    "sigma_beta_star11",
                    "sigma_beta_star21",
                    "sigma_beta_star22",
                ]
                .map(String::from),
            );
        }
        for level in LEVELS {
            for i in 1..=3 {
                names.push(format!("c_{level}_mean{i}"));
            }
            for i in 1..=3 {
                for j in 1..=i {
                    names.push(format!("c_{level}_cov{i}{j}"));
                }
            }
        }
        if variant.has_visit_effects() {
            names.extend(["log_sigma2_phi_mean", "log_sigma2_phi_var"].map(String::from));
        }
        if !variant.has_variance_link() {
            names.extend(["log_sigma2_mean", "log_sigma2_var"].map(String::from));
        }
        names
    }

    /// Values in [`PopulationState::column_names`] order.
    /// Whether every sampled quantity is finite; the reported exp(m) of the
    /// log-scale blocks may still overflow when m is poorly identified.
    pub fn is_finite(&self) -> bool {
        fn ok<const N: usize>(b: &GaussBlock<N>) -> bool {
            b.mean.iter().chain(b.cov.0.iter().flatten()).all(|v| v.is_finite())
        }
        ok(&self.alpha)
            && self.beta_star.as_ref().is_none_or(ok)
            && self.c.iter().all(ok)
            && self.log_sigma2_phi.as_ref().is_none_or(ok)
            && self.log_sigma2.as_ref().is_none_or(ok)
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = self.alpha.mean.to_vec();
        if let Some(b) = &self.beta_star {
            v.extend(b.mean);
        } else if let Some(s) = self.sigma2() {
            v.push(s);
        }
        if let Some(s) = self.sigma2_phi() {
            v.push(s);
        }
        let lower2 = |m: &Matrix2| [m.0[0][0], m.0[1][0], m.0[1][1]];
        v.extend(lower2(&self.alpha.cov));
        if let Some(b) = &self.beta_star {
            v.extend(lower2(&b.cov));
        }
        for b in &self.c {
            v.extend(b.mean);
            for i in 0..3 {
                for j in 0..=i {
                    v.push(b.cov.0[i][j]);
                }
            }
        }
        for b in [&self.log_sigma2_phi, &self.log_sigma2]
            .into_iter()
            .flatten()
        {
            v.extend([b.mean[0], b.cov.0[0][0]]);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.chol()?;
        if let Some(b) = &self.beta_star {
            b.chol()?;
        }
        for b in &self.c {
            b.chol()?;
        }
        for b in [&self.log_sigma2_phi, &self.log_sigma2]
            .into_iter()
            .flatten()
        {
            b.chol()?;
        }
        Ok(())
    }
}

/// Stage-2 view of one pool row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theta {
    pub alpha: Pair,
    pub beta_star: Option<Pair>,
    pub c: [Vector<3>; 3],
    pub log_sigma2_phi: Option<f64>,
    pub log_sigma2: Option<f64>,
}

impl Theta {
    pub fn from_draw(d: &PoolDraw) -> Self {
        Theta {
            alpha: d.alpha,
            beta_star: d.beta_star,
            c: [d.c_gamma, d.c_eta, d.c_lambda],
            log_sigma2_phi: d.sigma2_phi.map(math::ln),
            log_sigma2: d.sigma2.map(math::ln),
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.alpha.to_vec();
        v.extend(self.beta_star.into_iter().flatten());
        for c in &self.c {
            v.extend(c);
        }
        v.extend(self.log_sigma2_phi);
        v.extend(self.log_sigma2);
        v
    }
}

/// log |d Σ / d(L11, L21, L22)| for Σ = L Lᵀ, 2x2: log(4 L11² L22).
pub fn log_cholesky_jacobian(c: &Vector<3>) -> f64 {
    math::ln(4.0) + 2.0 * math::ln(c[0]) + math::ln(c[2])
}

/// Stage-1 prior density of θ in the coordinates stage 2 works in: normal
/// for α and β*, inverse-Wishart carried to Cholesky elements, and
/// inverse-gamma carried to the log scale.
pub fn stage1_log_prior(theta: &Theta, priors: &Stage1Priors) -> Result<f64> {
    let sd = math::sqrt(priors.normal_var);
    let mut lp = 0.0;
    for v in theta.alpha.iter().chain(theta.beta_star.iter().flatten()) {
        lp += distributions::logpdf_normal(*v, 0.0, sd)?;
    }
    let scale = Matrix2::identity().scale(priors.iw_scale);
    for c in &theta.c {
        let l = Matrix2::new(c[0], 0.0, c[1], c[2]);
        lp += distributions::logpdf_inverse_wishart(&l.lower_gram(), priors.iw_df, &scale)?
            + log_cholesky_jacobian(c);
    }
    for x in [theta.log_sigma2_phi, theta.log_sigma2]
        .into_iter()
        .flatten()
    {
        lp +=
            distributions::logpdf_inverse_gamma(math::exp(x), priors.ig_shape, priors.ig_rate)? + x;
    }
    Ok(lp)
}

/// Cholesky factors of the current population covariances.
struct PopCache {
    alpha: Matrix2,
    beta_star: Option<Matrix2>,
    c: [Matrix<3>; 3],
    log_sigma2_phi: Option<f64>,
    log_sigma2: Option<f64>,
}

impl PopCache {
    fn new(pop: &PopulationState) -> Result<Self> {
        let sd = |b: &Option<GaussBlock<1>>| b.map(|b| math::sqrt(b.cov.0[0][0]));
        Ok(PopCache {
            alpha: pop.alpha.chol()?,
            beta_star: pop.beta_star.map(|b| b.chol()).transpose()?,
            c: [pop.c[0].chol()?, pop.c[1].chol()?, pop.c[2].chol()?],
            log_sigma2_phi: sd(&pop.log_sigma2_phi),
            log_sigma2: sd(&pop.log_sigma2),
        })
    }
}

fn log_population_cached(theta: &Theta, pop: &PopulationState, cache: &PopCache) -> f64 {
    let mut lp = distributions::logpdf_mvn_chol(&theta.alpha, &pop.alpha.mean, &cache.alpha);
    if let (Some(x), Some(b), Some(l)) = (theta.beta_star, pop.beta_star, cache.beta_star) {
        lp += distributions::logpdf_mvn_chol(&x, &b.mean, &l);
    }
    for k in 0..3 {
        lp += distributions::logpdf_mvn_chol(&theta.c[k], &pop.c[k].mean, &cache.c[k]);
    }
    let scalar = |x: Option<f64>, b: Option<GaussBlock<1>>, sd: Option<f64>| match (x, b, sd) {
        (Some(x), Some(b), Some(sd)) => {
            let z = (x - b.mean[0]) / sd;
            -0.5 * z * z - math::ln(sd) - math::LN_SQRT_2PI
        }
        _ => 0.0,
    };
    lp + scalar(
        theta.log_sigma2_phi,
        pop.log_sigma2_phi,
        cache.log_sigma2_phi,
    ) + scalar(theta.log_sigma2, pop.log_sigma2, cache.log_sigma2)
}

/// Population log density of θ.
pub fn log_population_density(theta: &Theta, pop: &PopulationState) -> Result<f64> {
    Ok(log_population_cached(theta, pop, &PopCache::new(pop)?))
}

/// Independence Metropolis-Hastings step over pool rows: propose a row
/// uniformly and accept with min(1, w(prop)/w(cur)), where `log_weight(j)`
/// is log p(θ_j | population) − log p_stage1(θ_j). Returns the new index
/// and whether the proposal was accepted.
pub fn mh_update_individual<F: FnMut(usize) -> f64>(
    current: usize,
    current_log_weight: f64,
    n_rows: usize,
    mut log_weight: F,
    rng: &mut Rng,
) -> (usize, f64, bool) {
    let j = distributions::uniform_index(rng, n_rows);
    let w = log_weight(j);
    let ratio = w - current_log_weight;
    if w > f64::NEG_INFINITY && mh::accept(ratio, rng) {
        (j, w, true)
    } else {
        (current, current_log_weight, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Priors {
    pub normal_var: f64,
    /// Population covariance priors are IW(dim, iw_scale * I).
    pub iw_scale: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
}

impl Default for Stage2Priors {
    fn default() -> Self {
        Stage2Priors {
            normal_var: 1e8,
            iw_scale: 0.01,
            ig_shape: 0.001,
            ig_rate: 0.001,
        }
    }
}

/// Mean and covariance of the normal full conditional of a block mean,
/// given the block covariance and the current θ values of that block.
pub fn mean_conditional<const N: usize>(
    block: &GaussBlock<N>,
    xs: &[Vector<N>],
    normal_var: f64,
) -> Result<(Vector<N>, Matrix<N>)> {
    let q = block.chol()?.chol_inverse();
    let mut sum = [0.0; N];
    for x in xs {
        for i in 0..N {
            sum[i] += x[i];
        }
    }
    let prec = q.scale(xs.len() as f64) + Matrix::identity().scale(1.0 / normal_var);
    let l = prec.symmetrized().cholesky()?;
    Ok((l.chol_solve(&q.mul_vec(&sum)), l.chol_inverse()))
}

fn draw_mean<const N: usize>(
    block: &GaussBlock<N>,
    xs: &[Vector<N>],
    normal_var: f64,
    rng: &mut Rng,
) -> Result<Vector<N>> {
    let (mean, cov) = mean_conditional(block, xs, normal_var)?;
    Ok(distributions::sample_mvn_chol(
        &mean,
        &cov.symmetrized().cholesky()?,
        rng,
    ))
}

/// Scatter matrix of `xs` around `mean`.
fn scatter<const N: usize>(xs: &[Vector<N>], mean: &Vector<N>) -> Matrix<N> {
    let mut s = Matrix::zeros();
    for x in xs {
        let mut d = *x;
        for i in 0..N {
            d[i] -= mean[i];
        }
        s = s + Matrix::outer(&d, &d);
    }
    s
}

/// Degrees of freedom and scale matrix of the inverse-Wishart full
/// conditional of a block covariance.
pub fn covariance_conditional<const N: usize>(
    mean: &Vector<N>,
    xs: &[Vector<N>],
    priors: &Stage2Priors,
) -> (f64, Matrix<N>) {
    let scale = Matrix::<N>::identity().scale(priors.iw_scale) + scatter(xs, mean);
    (N as f64 + xs.len() as f64, scale.symmetrized())
}

/// Shape and rate of the inverse-gamma full conditional of a scalar spread.
pub fn scalar_variance_conditional(
    mean: f64,
    xs: &[Vector<1>],
    priors: &Stage2Priors,
) -> (f64, f64) {
    let ss: f64 = xs.iter().map(|x| (x[0] - mean) * (x[0] - mean)).sum();
    (
        priors.ig_shape + 0.5 * xs.len() as f64,
        priors.ig_rate + 0.5 * ss,
    )
}

fn draw_cov<const N: usize>(
    mean: &Vector<N>,
    xs: &[Vector<N>],
    priors: &Stage2Priors,
    rng: &mut Rng,
) -> Result<Matrix<N>> {
    let (df, scale) = covariance_conditional(mean, xs, priors);
    distributions::sample_inverse_wishart(df, &scale, rng)
}

fn draw_scalar_var(
    mean: f64,
    xs: &[Vector<1>],
    priors: &Stage2Priors,
    rng: &mut Rng,
) -> Result<f64> {
    let (shape, rate) = scalar_variance_conditional(mean, xs, priors);
    distributions::sample_inverse_gamma(shape, rate, rng)
}

struct Columns {
    alpha: Vec<Vector<2>>,
    beta_star: Vec<Vector<2>>,
    c: [Vec<Vector<3>>; 3],
    log_sigma2_phi: Vec<Vector<1>>,
    log_sigma2: Vec<Vector<1>>,
}

fn columns(thetas: &[Theta]) -> Columns {
    Columns {
        alpha: thetas.iter().map(|t| t.alpha).collect(),
        beta_star: thetas.iter().filter_map(|t| t.beta_star).collect(),
        c: [0, 1, 2].map(|k| thetas.iter().map(|t| t.c[k]).collect()),
        log_sigma2_phi: thetas
            .iter()
            .filter_map(|t| t.log_sigma2_phi.map(|v| [v]))
            .collect(),
        log_sigma2: thetas
            .iter()
            .filter_map(|t| t.log_sigma2.map(|v| [v]))
            .collect(),
    }
}

fn check_thetas(thetas: &[Theta]) -> Result<()> {
    if thetas.is_empty() {
        return Err(Error::Empty(
            "no individuals for the population update".into(),
        ));
    }
    Ok(())
}

/// Draws every population mean from its normal full conditional given the
/// current θ_i and the block covariances.
pub fn update_population_means(
    state: &PopulationState,
    thetas: &[Theta],
    priors: &Stage2Priors,
    rng: &mut Rng,
) -> Result<PopulationState> {
    check_thetas(thetas)?;
    let cols = columns(thetas);
    let mut next = state.clone();
    next.alpha.mean = draw_mean(&state.alpha, &cols.alpha, priors.normal_var, rng)?;
    if let Some(b) = next.beta_star.as_mut() {
        b.mean = draw_mean(b, &cols.beta_star, priors.normal_var, rng)?;
    }
    for k in 0..3 {
        next.c[k].mean = draw_mean(&state.c[k], &cols.c[k], priors.normal_var, rng)?;
    }
    if let Some(b) = next.log_sigma2_phi.as_mut() {
        b.mean = draw_mean(b, &cols.log_sigma2_phi, priors.normal_var, rng)?;
    }
    if let Some(b) = next.log_sigma2.as_mut() {
        b.mean = draw_mean(b, &cols.log_sigma2, priors.normal_var, rng)?;
    }
    Ok(next)
}

/// Draws every population covariance from its inverse-Wishart (matrix
/// blocks) or inverse-gamma (scalar blocks) full conditional.
pub fn update_population_covariances(
    state: &PopulationState,
    thetas: &[Theta],
    priors: &Stage2Priors,
    rng: &mut Rng,
) -> Result<PopulationState> {
    check_thetas(thetas)?;
    let cols = columns(thetas);
    let mut next = state.clone();
    next.alpha.cov = draw_cov(&state.alpha.mean, &cols.alpha, priors, rng)?;
    if let Some(b) = next.beta_star.as_mut() {
        b.cov = draw_cov(&b.mean, &cols.beta_star, priors, rng)?;
    }
    for k in 0..3 {
        next.c[k].cov = draw_cov(&state.c[k].mean, &cols.c[k], priors, rng)?;
    }
    if let Some(b) = next.log_sigma2_phi.as_mut() {
        b.cov.0[0][0] = draw_scalar_var(b.mean[0], &cols.log_sigma2_phi, priors, rng)?;
    }
    if let Some(b) = next.log_sigma2.as_mut() {
        b.cov.0[0][0] = draw_scalar_var(b.mean[0], &cols.log_sigma2, priors, rng)?;
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitRule {
    Min,
    Mean,
    Max,
}

impl InitRule {
    pub fn name(self) -> &'static str {
        match self {
            InitRule::Min => "min",
            InitRule::Mean => "mean",
            InitRule::Max => "max",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    /// Independence steps per individual in each sweep.
    pub mh_steps: usize,
    pub priors: Stage2Priors,
    pub stage1_priors: Stage1Priors,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            iterations: 50_000,
            burn_in: 10_000,
            thin: 20,
            chains: 3,
            mh_steps: 10,
            priors: Stage2Priors::default(),
            stage1_priors: Stage1Priors::default(),
        }
    }
}

impl Stage2Config {
    /// Chain c starts from the minimum, mean or maximum of the pools, cycling.
    pub fn init_rule(chain: usize) -> InitRule {
        [InitRule::Min, InitRule::Mean, InitRule::Max][chain % 3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.burn_in >= self.iterations {
            return Err(Error::Config(
                "stage 2 needs thin >= 1 and burn-in < iterations".into(),
            ));
        }
        if self.mh_steps == 0 {
            return Err(Error::Config(
                "stage 2 needs at least one MH step per sweep".into(),
            ));
        }
        if self.chains == 0 {
            return Err(Error::Config("stage 2 needs at least one chain".into()));
        }
        Ok(())
    }
}

/// Pools translated to stage-2 coordinates with their stage-1 prior values.
pub struct PreparedPools {
    pub variant: ModelVariant,
    pub individual_ids: Vec<String>,
    thetas: Vec<Vec<Theta>>,
    log_prior: Vec<Vec<f64>>,
}

impl PreparedPools {
    pub fn new(pools: &[SamplePool], stage1_priors: &Stage1Priors) -> Result<Self> {
        let first = pools
            .first()
            .ok_or_else(|| Error::Empty("no sample pools".into()))?;
        let variant = first.variant;
        let mut thetas = Vec::with_capacity(pools.len());
        let mut log_prior = Vec::with_capacity(pools.len());
        for p in pools {
            if p.variant != variant {
                return Err(Error::structure(format!(
                    "pool of {} was fitted with {}, expected {variant}",
                    p.individual_id, p.variant
                )));
            }
            if p.draws.is_empty() {
                return Err(Error::Empty(format!(
                    "pool of individual {}",
                    p.individual_id
                )));
            }
            let t: Vec<Theta> = p.draws.iter().map(Theta::from_draw).collect();
            let lp = t
                .iter()
                .map(|t| stage1_log_prior(t, stage1_priors))
                .collect::<Result<Vec<f64>>>()?;
            thetas.push(t);
            log_prior.push(lp);
        }
        Ok(PreparedPools {
            variant,
            individual_ids: pools.iter().map(|p| p.individual_id.clone()).collect(),
            thetas,
            log_prior,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.thetas.len()
    }

    pub fn theta(&self, individual: usize, row: usize) -> &Theta {
        &self.thetas[individual][row]
    }

    /// Pool row closest (in per-column standardized distance) to the
    /// column-wise minimum, mean or maximum of the pool.
    pub fn init_row(&self, individual: usize, rule: InitRule) -> usize {
        let flat: Vec<Vec<f64>> = self.thetas[individual].iter().map(Theta::flat).collect();
        let p = flat[0].len();
        let mut target = vec![0.0; p];
        let mut sd = vec![0.0; p];
        for c in 0..p {
            let col: Vec<f64> = flat.iter().map(|r| r[c]).collect();
            target[c] = match rule {
                InitRule::Min => col.iter().copied().fold(f64::INFINITY, f64::min),
                InitRule::Mean => diagnostics::mean(&col),
                InitRule::Max => col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            sd[c] = if col.len() > 1 {
                math::sqrt(diagnostics::variance(&col))
            } else {
                0.0
            };
            if !(sd[c] > 0.0) {
                sd[c] = 1.0;
            }
        }
        let dist = |r: &Vec<f64>| -> f64 {
            (0..p)
                .map(|c| {
                    let z = (r[c] - target[c]) / sd[c];
                    z * z
                })
                .sum()
        };
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, r) in flat.iter().enumerate() {
            let d = dist(r);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }
}

fn block_init<const N: usize>(xs: &[Vector<N>]) -> GaussBlock<N> {
    let n = xs.len() as f64;
    let mut mean = [0.0; N];
    for x in xs {
        for i in 0..N {
            mean[i] += x[i] / n;
        }
    }
    let cov = scatter(xs, &mean).scale(1.0 / n) + Matrix::identity().scale(0.01);
    GaussBlock { mean, cov }
}

/// Population state matching a set of θ_i: block means and (regularized)
/// empirical covariances.
pub fn initial_population(thetas: &[Theta]) -> Result<PopulationState> {
    check_thetas(thetas)?;
    let cols = columns(thetas);
    let opt1 = |xs: &Vec<Vector<1>>| (!xs.is_empty()).then(|| block_init(xs));
    Ok(PopulationState {
        alpha: block_init(&cols.alpha),
        beta_star: (!cols.beta_star.is_empty()).then(|| block_init(&cols.beta_star)),
        c: [
            block_init(&cols.c[0]),
            block_init(&cols.c[1]),
            block_init(&cols.c[2]),
        ],
        log_sigma2_phi: opt1(&cols.log_sigma2_phi),
        log_sigma2: opt1(&cols.log_sigma2),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Chain {
    pub init: InitRule,
    pub draws: Vec<PopulationState>,
    /// Pool row of every individual at each retained iteration.
    pub indices: Vec<Vec<u32>>,
    pub acceptance: f64,
}

/// Runs one stage-2 chain.
pub fn run_chain(
    prep: &PreparedPools,
    cfg: &Stage2Config,
    chain: usize,
    rng: &mut Rng,
) -> Result<Stage2Chain> {
    cfg.validate()?;
    let n = prep.n_individuals();
    let rule = Stage2Config::init_rule(chain);
    let mut idx: Vec<usize> = (0..n).map(|i| prep.init_row(i, rule)).collect();
    let mut current: Vec<Theta> = (0..n).map(|i| *prep.theta(i, idx[i])).collect();
    let mut pop = initial_population(&current)?;
    let mut draws = Vec::new();
    let mut indices = Vec::new();
    let (mut accepted, mut proposed) = (0u64, 0u64);
    for it in 0..cfg.iterations {
        let cache = PopCache::new(&pop)?;
        for i in 0..n {
            let weight = |j: usize| {
                log_population_cached(prep.theta(i, j), &pop, &cache) - prep.log_prior[i][j]
            };
            let mut cur_w = weight(idx[i]);
            for _ in 0..cfg.mh_steps {
                let (j, w, ok) =
                    mh_update_individual(idx[i], cur_w, prep.thetas[i].len(), weight, rng);
                idx[i] = j;
                cur_w = w;
                proposed += 1;
                accepted += ok as u64;
            }
            current[i] = *prep.theta(i, idx[i]);
        }
        pop = update_population_means(&pop, &current, &cfg.priors, rng)?;
        pop = update_population_covariances(&pop, &current, &cfg.priors, rng)?;
        if !pop.is_finite() {
            return Err(Error::non_finite(format!(
                "stage 2, chain {chain}, iteration {it}"
            )));
        }
        if it >= cfg.burn_in && (it + 1 - cfg.burn_in) % cfg.thin == 0 {
            draws.push(pop.clone());
            indices.push(idx.iter().map(|&j| j as u32).collect());
        }
    }
    Ok(Stage2Chain {
        init: rule,
        draws,
        indices,
        acceptance: accepted as f64 / proposed.max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Run {
    pub variant: ModelVariant,
    pub individual_ids: Vec<String>,
    pub chains: Vec<Stage2Chain>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSummary {
    pub name: String,
    pub summary: Summary,
    /// Split R-hat; NaN with fewer than 4 draws per chain.
    pub rhat: f64,
}

/// Stream used by stage-2 chain `chain`.
pub fn chain_stream(seed: u64, chain: usize) -> RngStream {
    RngStream::derive(seed, "stage2", &[chain as u64])
}

/// Runs all chains sequentially.
pub fn run_stage2(pools: &[SamplePool], cfg: &Stage2Config, seed: u64) -> Result<Stage2Run> {
    cfg.validate()?;
    let prep = PreparedPools::new(pools, &cfg.stage1_priors)?;
    let chains = (0..cfg.chains)
        .map(|c| run_chain(&prep, cfg, c, &mut chain_stream(seed, c).rng()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stage2Run {
        variant: prep.variant,
        individual_ids: prep.individual_ids,
        chains,
    })
}

impl Stage2Run {
    /// Column `name` of every chain.
    pub fn parameter_chains(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let names = PopulationState::column_names(self.variant);
        let col = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::structure(format!("no parameter named {name}")))?;
        Ok(self
            .chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d.values()[col]).collect())
            .collect())
    }

    /// Summaries over the concatenated chains for every population column.
    pub fn summaries(&self) -> Result<Vec<ParameterSummary>> {
        let names = PopulationState::column_names(self.variant);
        let rows: Vec<Vec<Vec<f64>>> = self
            .chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d.values()).collect())
            .collect();
        let mut out = Vec::with_capacity(names.len());
        for (col, name) in names.into_iter().enumerate() {
            let per_chain: Vec<Vec<f64>> = rows
                .iter()
                .map(|c| c.iter().map(|r| r[col]).collect())
                .collect();
            let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
            let refs: Vec<&[f64]> = per_chain.iter().map(|c| c.as_slice()).collect();
            out.push(ParameterSummary {
                name,
                summary: diagnostics::summarize(&all)?,
                rhat: diagnostics::split_rhat(&refs).unwrap_or(f64::NAN),
            });
        }
        Ok(out)
    }

    /// Retained draws over all chains.
    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// Pool row of `individual` at retained draw `draw`, counting draws
    /// across the chains in order.
    pub fn pool_row(&self, draw: usize, individual: usize) -> Result<usize> {
        let mut k = draw;
        for c in &self.chains {
            if k < c.indices.len() {
                return c.indices[k]
                    .get(individual)
                    .map(|&j| j as usize)
                    .ok_or_else(|| Error::structure(format!("no individual slot {individual}")));
            }
            k -= c.indices.len();
        }
        Err(Error::structure(format!(
            "stage-2 draw {draw} does not exist"
        )))
    }
}

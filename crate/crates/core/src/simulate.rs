//! Synthetic data with known truth.

use alloc::format;
use alloc::vec::Vec;

use crate::distributions::{self, Rng};
use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::math;
use crate::model::{
    censor, residual_sd, Design, Eye, FixedEffects, IndividualData, ModelVariant, Observation,
    Pair, RandomEffects, VarianceParams, LOCATIONS_PER_HEMIFIELD,
};

/// Population values used to generate data. Covariances may be zero, which
/// switches the corresponding effects off.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthConfig {
    pub variant: ModelVariant,
    pub fixed: FixedEffects,
    pub var: VarianceParams,
    pub sigma2_phi: f64,
    pub cov_alpha: Matrix2,
    pub cov_gamma: Matrix2,
    pub cov_eta: Matrix2,
    pub cov_lambda: Matrix2,
}

impl TruthConfig {
    fn default_covariances(
        variant: ModelVariant,
        fixed: FixedEffects,
        var: VarianceParams,
        sigma2_phi: f64,
    ) -> Self {
        TruthConfig {
            variant,
            fixed,
            var,
            sigma2_phi,
            cov_alpha: Matrix2::new(9.0, 0.1, 0.1, 0.09),
            cov_gamma: Matrix2::from_diagonal([1.0, 0.01]),
            cov_eta: Matrix2::from_diagonal([1.0, 0.01]),
            cov_lambda: Matrix2::from_diagonal([4.0, 0.04]),
        }
    }

    /// Heteroscedastic preset: beta = (19.89, -0.31), beta* = (2.82, -0.08).
    pub fn model3() -> Self {
        Self::default_covariances(
            ModelVariant::Model3,
            FixedEffects {
                beta0: 19.89,
                beta1: -0.31,
            },
            VarianceParams::linked(2.82, -0.08),
            1.87,
        )
    }

    /// Heteroscedastic preset with the milder variance link (2.60, -0.06).
    pub fn model3_alt() -> Self {
        let mut t = Self::model3();
        t.var = VarianceParams::linked(2.60, -0.06);
        t
    }

    /// Homoscedastic preset: beta = (20, -0.3), sigma^2 = 13.
    pub fn model1() -> Self {
        Self::default_covariances(
            ModelVariant::Model1,
            FixedEffects {
                beta0: 20.0,
                beta1: -0.3,
            },
            VarianceParams::homoscedastic(13.0),
            0.0,
        )
    }

    /// Model 1 preset plus t(3) visit effects with sigma2_phi = 1.87.
    pub fn model2() -> Self {
        let mut t = Self::model1();
        t.variant = ModelVariant::Model2;
        t.sigma2_phi = 1.87;
        t
    }

    pub fn preset(variant: ModelVariant) -> Self {
        match variant {
            ModelVariant::Model1 => Self::model1(),
            ModelVariant::Model2 => Self::model2(),
            ModelVariant::Model3 => Self::model3(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in [
            &self.cov_alpha,
            &self.cov_gamma,
            &self.cov_eta,
            &self.cov_lambda,
        ] {
            if *m != Matrix2::zeros() {
                m.cholesky()?;
            }
        }
        if self.variant.has_visit_effects() && !(self.sigma2_phi >= 0.0) {
            return Err(Error::invalid("sigma2_phi must be >= 0"));
        }
        if !self.variant.has_variance_link() && !(self.var.sigma2 >= 0.0) {
            return Err(Error::invalid("sigma2 must be >= 0"));
        }
        if self.variant.has_variance_link()
            && !(self.var.beta_star0.is_finite() && self.var.beta_star1.is_finite())
        {
            return Err(Error::invalid("beta* must be finite"));
        }
        Ok(())
    }
}

/// Shape of the simulated study.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationLayout {
    pub n_individuals: usize,
    pub visits_per_eye: usize,
    pub eyes: usize,
    pub hemifields: u8,
    pub locations_per_hemifield: u8,
    /// Mean spacing between visits in years.
    pub visit_spacing: f64,
    /// Half-width of the uniform jitter added to every visit after the first.
    pub jitter: f64,
    pub cap_db: f64,
}

impl SimulationLayout {
    /// Full 24-2 layout: two eyes, two hemifields of 26 locations, 6-monthly visits.
    pub fn new(n_individuals: usize, visits_per_eye: usize) -> Self {
        SimulationLayout {
            n_individuals,
            visits_per_eye,
            eyes: 2,
            hemifields: 2,
            locations_per_hemifield: LOCATIONS_PER_HEMIFIELD,
            visit_spacing: 0.5,
            jitter: 1.0 / 12.0,
            cap_db: 50.0,
        }
    }

    /// Visits per eye that fit a 10.5-year follow-up at the default spacing.
    pub fn default_visits() -> usize {
        22
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.visits_per_eye == 0 {
            return Err(Error::invalid(
                "simulation needs at least one individual and one visit",
            ));
        }
        if !(1..=2).contains(&self.eyes)
            || !(1..=2).contains(&self.hemifields)
            || !(1..=LOCATIONS_PER_HEMIFIELD).contains(&self.locations_per_hemifield)
        {
            return Err(Error::invalid("layout exceeds the 2 x 2 x 26 hierarchy"));
        }
        if !(self.visit_spacing > 0.0)
            || !(self.jitter >= 0.0)
            || self.jitter >= 0.5 * self.visit_spacing
        {
            return Err(Error::invalid(
                "jitter must be smaller than half the visit spacing",
            ));
        }
        Ok(())
    }
}

/// Generated effects of one individual; `effects.alpha` is the deviation from
/// the population mean, slot order follows the individual's [`Design`].
#[derive(Clone, Debug, PartialEq)]
pub struct IndividualTruth {
    pub individual_id: alloc::string::String,
    pub effects: RandomEffects,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTruth {
    pub config: TruthConfig,
    pub individuals: Vec<IndividualTruth>,
    /// Latent values above the instrument ceiling that were capped.
    pub cap_events: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub data: Vec<IndividualData>,
    pub truth: GeneratorTruth,
}

impl Simulation {
    pub fn censored_fraction(&self) -> f64 {
        let (mut c, mut n) = (0usize, 0usize);
        for d in &self.data {
            n += d.observations.len();
            c += d.observations.iter().filter(|o| o.censored).count();
        }
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }
}

fn draw_pair(cov: &Matrix2, rng: &mut Rng) -> Result<Pair> {
    if *cov == Matrix2::zeros() {
        return Ok([0.0, 0.0]);
    }
    let l = cov.cholesky()?;
    Ok(distributions::sample_mvn_chol(&[0.0, 0.0], &l, rng))
}

pub fn individual_id(i: usize) -> alloc::string::String {
    format!("P{:03}", i + 1)
}

/// Runs the model forward: effects from their population distributions,
/// visit effects from t(0, sigma2_phi, 3), residuals with the variant's SD,
/// then the 50 dB cap and censoring at 0 dB.
pub fn simulate(
    truth: &TruthConfig,
    layout: &SimulationLayout,
    rng: &mut Rng,
) -> Result<Simulation> {
    truth.validate()?;
    layout.validate()?;
    let variant = truth.variant;
    let eyes: Vec<Eye> = [Eye::Od, Eye::Os][..layout.eyes].to_vec();
    let mut data = Vec::with_capacity(layout.n_individuals);
    let mut individuals = Vec::with_capacity(layout.n_individuals);
    let mut cap_events = 0;
    for i in 0..layout.n_individuals {
        let id = individual_id(i);
        let times: Vec<f64> = (0..layout.visits_per_eye)
            .map(|j| {
                if j == 0 {
                    0.0
                } else {
                    let u = 2.0 * distributions::uniform(rng) - 1.0;
                    j as f64 * layout.visit_spacing + layout.jitter * u
                }
            })
            .collect();
        // Skeleton with placeholder readings to fix the slot order.
        let mut skeleton = Vec::new();
        for &eye in &eyes {
            for h in 1..=layout.hemifields {
                for l in 1..=layout.locations_per_hemifield {
                    for (j, &t) in times.iter().enumerate() {
                        skeleton.push(Observation::from_reading(
                            i,
                            eye,
                            h,
                            l,
                            j as u32 + 1,
                            t,
                            1.0,
                        )?);
                    }
                }
            }
        }
        let design = Design::new(&IndividualData::new(id.clone(), skeleton.clone())?)?;
        let mut fx = RandomEffects::zeros(&design);
        fx.alpha = draw_pair(&truth.cov_alpha, rng)?;
        for g in fx.gamma.iter_mut() {
            *g = draw_pair(&truth.cov_gamma, rng)?;
        }
        for n in fx.eta.iter_mut() {
            *n = draw_pair(&truth.cov_eta, rng)?;
        }
        for l in fx.lambda.iter_mut() {
            *l = draw_pair(&truth.cov_lambda, rng)?;
        }
        if variant.has_visit_effects() && truth.sigma2_phi > 0.0 {
            let s = math::sqrt(truth.sigma2_phi);
            for p in fx.phi.iter_mut() {
                *p = distributions::sample_gve_t(s, rng);
            }
        }
        let mut obs = skeleton;
        for (k, o) in obs.iter_mut().enumerate() {
            let mu = fx.mu(&design, &truth.fixed, k, variant);
            let sd = residual_sd(mu, &truth.var, variant);
            let mut y = mu + sd * distributions::std_normal(rng);
            if y > layout.cap_db {
                y = layout.cap_db;
                cap_events += 1;
            }
            let y = censor(y);
            o.observed_db = y;
            o.censored = y == 0.0;
        }
        data.push(IndividualData::new(id.clone(), obs)?);
        individuals.push(IndividualTruth {
            individual_id: id,
            effects: fx,
        });
    }
    Ok(Simulation {
        data,
        truth: GeneratorTruth {
            config: truth.clone(),
            individuals,
            cap_events,
        },
    })
}

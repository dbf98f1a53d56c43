//! Domain types of the individual / eye / hemifield / location hierarchy and
//! the deterministic model functions: censoring, linear predictors, the
//! variance link and the exact censored likelihood.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{Matrix2, Vector};
use crate::math;

/// Locations per hemifield once the two blind-spot points are removed.
pub const LOCATIONS_PER_HEMIFIELD: u8 = 26;

/// (intercept, slope) pair; index 0 is the intercept in dB, index 1 the slope in dB/year.
pub type Pair = Vector<2>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelVariant {
    /// Random intercepts and slopes at every level, constant residual variance.
    Model1,
    /// Model 1 plus a t(3) global visit effect per (eye, visit).
    Model2,
    /// Model 2 with log residual SD linear in the mean.
    Model3,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [Self::Model1, Self::Model2, Self::Model3];

    pub fn number(self) -> u8 {
        match self {
            Self::Model1 => 1,
            Self::Model2 => 2,
            Self::Model3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::Model1),
            2 => Ok(Self::Model2),
            3 => Ok(Self::Model3),
            _ => Err(Error::invalid(format!(
                "model variant must be 1, 2 or 3, got {n}"
            ))),
        }
    }

    pub fn has_visit_effects(self) -> bool {
        self != Self::Model1
    }

    pub fn has_variance_link(self) -> bool {
        self == Self::Model3
    }
}

impl core::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Model{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Eye {
    /// Right eye (oculus dexter), index 1.
    Od,
    /// Left eye (oculus sinister), index 2.
    Os,
}

impl Eye {
    pub fn index(self) -> u8 {
        match self {
            Eye::Od => 1,
            Eye::Os => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Eye::Od),
            2 => Ok(Eye::Os),
            _ => Err(Error::invalid(format!("eye index must be 1 or 2, got {i}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Eye::Od => "OD",
            Eye::Os => "OS",
        }
    }
}

/// One sensitivity measurement. `observed_db` is the instrument reading; a
/// latent value below 0 dB is recorded as 0 and flagged as censored.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub individual: usize,
    pub eye: Eye,
    /// 1 = superior, 2 = inferior.
    pub hemifield: u8,
    /// 1..=26 within the hemifield.
    pub location: u8,
    /// 1-based visit number within the eye.
    pub visit: u32,
    /// Years since the individual's first visit.
    pub years: f64,
    pub observed_db: f64,
    pub censored: bool,
}

impl Observation {
    /// Builds an observation from an instrument reading; 0 dB marks censoring.
    pub fn from_reading(
        individual: usize,
        eye: Eye,
        hemifield: u8,
        location: u8,
        visit: u32,
        years: f64,
        observed_db: f64,
    ) -> Result<Self> {
        let obs = Observation {
            individual,
            eye,
            hemifield,
            location,
            visit,
            years,
            observed_db,
            censored: observed_db == 0.0,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.hemifield) {
            return Err(Error::invalid(format!(
                "hemifield {} not in 1..=2",
                self.hemifield
            )));
        }
        if !(1..=LOCATIONS_PER_HEMIFIELD).contains(&self.location) {
            return Err(Error::invalid(format!(
                "location {} not in 1..=26",
                self.location
            )));
        }
        if self.visit == 0 {
            return Err(Error::invalid("visit numbers are 1-based"));
        }
        if !(self.years >= 0.0) || !self.years.is_finite() {
            return Err(Error::invalid(format!(
                "years must be finite and >= 0, got {}",
                self.years
            )));
        }
        if !self.observed_db.is_finite() {
            return Err(Error::invalid("observed value must be finite"));
        }
        if self.censored && self.observed_db != 0.0 {
            return Err(Error::invalid(
                "censored observations must be recorded at 0 dB",
            ));
        }
        if !self.censored && self.observed_db < 0.0 {
            return Err(Error::invalid("uncensored observations must be >= 0 dB"));
        }
        Ok(())
    }
}

/// All observations of one individual.
#[derive(Clone, Debug, PartialEq)]
pub struct IndividualData {
    pub individual_id: String,
    pub observations: Vec<Observation>,
    /// Distinct visit times per eye (index 0 = OD, 1 = OS), ordered by visit number.
    pub visit_times: [Vec<f64>; 2],
}

impl IndividualData {
    pub fn new(individual_id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let individual_id = individual_id.into();
        if let Some(first) = observations.first() {
            if observations
                .iter()
                .any(|o| o.individual != first.individual)
            {
                return Err(Error::structure(format!(
                    "individual {individual_id}: observations reference several individuals"
                )));
            }
        }
        let mut keys = Vec::with_capacity(observations.len());
        let mut visits: [Vec<(u32, f64)>; 2] = [Vec::new(), Vec::new()];
        for o in &observations {
            o.validate()?;
            keys.push((o.eye, o.visit, o.hemifield, o.location));
            let slot = &mut visits[(o.eye.index() - 1) as usize];
            match slot.iter().find(|(v, _)| *v == o.visit) {
                Some((_, t)) if *t != o.years => {
                    return Err(Error::structure(format!(
                        "individual {individual_id}: visit {} of {} has inconsistent times",
                        o.visit,
                        o.eye.label()
                    )))
                }
                Some(_) => {}
                None => slot.push((o.visit, o.years)),
            }
        }
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::structure(format!(
                "individual {individual_id}: duplicate (eye, visit, hemifield, location)"
            )));
        }
        let visit_times = visits.map(|mut v| {
            v.sort_by_key(|(visit, _)| *visit);
            v.into_iter().map(|(_, t)| t).collect()
        });
        Ok(IndividualData {
            individual_id,
            observations,
            visit_times,
        })
    }

    /// Number of distinct follow-up times over both eyes.
    pub fn distinct_times(&self) -> usize {
        let mut t: Vec<f64> = self.visit_times.iter().flatten().copied().collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FixedEffects {
    pub beta0: f64,
    pub beta1: f64,
}

impl FixedEffects {
    pub const ZERO: FixedEffects = FixedEffects {
        beta0: 0.0,
        beta1: 0.0,
    };

    pub fn as_pair(&self) -> Pair {
        [self.beta0, self.beta1]
    }
}

/// Residual-variance parameters. `sigma2` applies to Models 1-2, the
/// `beta_star` pair to Model 3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceParams {
    pub beta_star0: f64,
    pub beta_star1: f64,
    /// Residual variance; ignored by Model 3.
    pub sigma2: f64,
}

impl VarianceParams {
    pub fn homoscedastic(sigma2: f64) -> Self {
        VarianceParams {
            beta_star0: 0.0,
            beta_star1: 0.0,
            sigma2,
        }
    }

    pub fn linked(beta_star0: f64, beta_star1: f64) -> Self {
        VarianceParams {
            beta_star0,
            beta_star1,
            sigma2: 0.0,
        }
    }
}

/// A 2x2 covariance with its lower Cholesky factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceSpec {
    matrix: Matrix2,
    chol: Matrix2,
}

impl CovarianceSpec {
    pub fn new(matrix: Matrix2) -> Result<Self> {
        let chol = matrix.cholesky()?;
        Ok(CovarianceSpec { matrix, chol })
    }

    pub fn diagonal(v0: f64, v1: f64) -> Result<Self> {
        Self::new(Matrix2::from_diagonal([v0, v1]))
    }

    /// From the three free Cholesky elements `(L11, L21, L22)`.
    pub fn from_cholesky(elements: [f64; 3]) -> Result<Self> {
        let [l11, l21, l22] = elements;
        if !(l11 > 0.0 && l22 > 0.0) || !l21.is_finite() || !l11.is_finite() || !l22.is_finite() {
            return Err(Error::invalid(
                "Cholesky diagonal must be positive and finite",
            ));
        }
        let chol = Matrix2::new(l11, 0.0, l21, l22);
        Ok(CovarianceSpec {
            matrix: chol.lower_gram(),
            chol,
        })
    }

    pub fn matrix(&self) -> &Matrix2 {
        &self.matrix
    }

    pub fn chol(&self) -> &Matrix2 {
        &self.chol
    }

    /// `(L11, L21, L22)`.
    pub fn cholesky_elements(&self) -> [f64; 3] {
        [self.chol.0[0][0], self.chol.0[1][0], self.chol.0[1][1]]
    }

    pub fn precision(&self) -> Matrix2 {
        self.chol.chol_inverse()
    }
}

/// Scale of the t(3) global visit effect.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GveScale {
    sigma2_phi: f64,
}

impl GveScale {
    pub fn new(sigma2_phi: f64) -> Result<Self> {
        if !(sigma2_phi > 0.0) || !sigma2_phi.is_finite() {
            return Err(Error::invalid("sigma2_phi must be positive"));
        }
        Ok(GveScale { sigma2_phi })
    }

    pub fn sigma2_phi(&self) -> f64 {
        self.sigma2_phi
    }
}

/// Left-censoring at the instrument floor of 0 dB.
#[inline]
pub fn censor(y: f64) -> f64 {
    if y >= 0.0 {
        y
    } else {
        0.0
    }
}

/// Residual SD of one observation with mean `mu`.
#[inline]
pub fn residual_sd(mu: f64, var: &VarianceParams, variant: ModelVariant) -> f64 {
    if variant.has_variance_link() {
        math::exp(var.beta_star0 + var.beta_star1 * mu)
    } else {
        math::sqrt(var.sigma2)
    }
}

#[inline]
pub(crate) fn loglik_point(value: f64, censored: bool, mu: f64, sd: f64) -> f64 {
    if censored {
        math::log_norm_cdf(-mu / sd)
    } else {
        let z = (value - mu) / sd;
        -0.5 * z * z - math::ln(sd) - math::LN_SQRT_2PI
    }
}

/// Exact log-likelihood contribution: a normal density for observed values,
/// the probability mass below 0 dB for censored ones.
pub fn loglik_observation(obs: &Observation, mu: f64, sd: f64) -> f64 {
    loglik_point(obs.observed_db, obs.censored, mu, sd)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HemifieldUnit {
    pub eye: usize,
    pub hemifield: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocationUnit {
    pub hemifield: usize,
    pub location: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisitUnit {
    pub eye: usize,
    pub visit: u32,
    pub years: f64,
}

/// Slots of one observation inside a [`Design`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignObs {
    pub eye: usize,
    pub hemifield: usize,
    pub location: usize,
    pub visit: usize,
    pub years: f64,
    pub value: f64,
    pub censored: bool,
}

/// Slot indices of one (location, visit) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitIndex {
    pub location: usize,
    pub visit: usize,
}

/// Dense indexing of one individual's hierarchy. Units exist only where the
/// data have observations, so random effects never carry empty slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub individual_id: String,
    pub eyes: Vec<Eye>,
    pub hemifields: Vec<HemifieldUnit>,
    pub locations: Vec<LocationUnit>,
    pub visits: Vec<VisitUnit>,
    pub obs: Vec<DesignObs>,
    pub(crate) eye_hemifields: Vec<Vec<usize>>,
    pub(crate) hemifield_locations: Vec<Vec<usize>>,
    pub(crate) eye_obs: Vec<Vec<usize>>,
    pub(crate) hemifield_obs: Vec<Vec<usize>>,
    pub(crate) location_obs: Vec<Vec<usize>>,
    pub(crate) visit_obs: Vec<Vec<usize>>,
    /// Sum of x x^T with x = (1, years) over each location's observations.
    pub(crate) location_xtx: Vec<Matrix2>,
    distinct_times: usize,
}

impl Design {
    pub fn new(data: &IndividualData) -> Result<Self> {
        let mut eyes: Vec<Eye> = data.observations.iter().map(|o| o.eye).collect();
        eyes.sort_unstable();
        eyes.dedup();
        let eye_slot = |e: Eye| eyes.iter().position(|&x| x == e).unwrap();

        let mut hemis: Vec<(usize, u8)> = data
            .observations
            .iter()
            .map(|o| (eye_slot(o.eye), o.hemifield))
            .collect();
        hemis.sort_unstable();
        hemis.dedup();
        let hemi_slot = |e: usize, h: u8| hemis.binary_search(&(e, h)).unwrap();

        let mut locs: Vec<(usize, u8)> = data
            .observations
            .iter()
            .map(|o| (hemi_slot(eye_slot(o.eye), o.hemifield), o.location))
            .collect();
        locs.sort_unstable();
        locs.dedup();

        let mut visit_keys: Vec<(usize, u32)> = data
            .observations
            .iter()
            .map(|o| (eye_slot(o.eye), o.visit))
            .collect();
        visit_keys.sort_unstable();
        visit_keys.dedup();

        let mut visits: Vec<VisitUnit> = visit_keys
            .iter()
            .map(|&(eye, visit)| VisitUnit {
                eye,
                visit,
                years: f64::NAN,
            })
            .collect();

        let mut obs = Vec::with_capacity(data.observations.len());
        for o in &data.observations {
            let eye = eye_slot(o.eye);
            let hemifield = hemi_slot(eye, o.hemifield);
            let location = locs.binary_search(&(hemifield, o.location)).unwrap();
            let visit = visit_keys.binary_search(&(eye, o.visit)).unwrap();
            visits[visit].years = o.years;
            obs.push(DesignObs {
                eye,
                hemifield,
                location,
                visit,
                years: o.years,
                value: o.observed_db,
                censored: o.censored,
            });
        }

        let mut eye_hemifields = vec![Vec::new(); eyes.len()];
        for (slot, &(e, _)) in hemis.iter().enumerate() {
            eye_hemifields[e].push(slot);
        }
        let mut hemifield_locations = vec![Vec::new(); hemis.len()];
        for (slot, &(h, _)) in locs.iter().enumerate() {
            hemifield_locations[h].push(slot);
        }
        let mut eye_obs = vec![Vec::new(); eyes.len()];
        let mut hemifield_obs = vec![Vec::new(); hemis.len()];
        let mut location_obs = vec![Vec::new(); locs.len()];
        let mut visit_obs = vec![Vec::new(); visits.len()];
        let mut location_xtx = vec![Matrix2::zeros(); locs.len()];
        for (k, o) in obs.iter().enumerate() {
            eye_obs[o.eye].push(k);
            hemifield_obs[o.hemifield].push(k);
            location_obs[o.location].push(k);
            visit_obs[o.visit].push(k);
            let x = [1.0, o.years];
            location_xtx[o.location] = location_xtx[o.location] + Matrix2::outer(&x, &x);
        }

        Ok(Design {
            individual_id: data.individual_id.clone(),
            eyes,
            hemifields: hemis
                .into_iter()
                .map(|(eye, hemifield)| HemifieldUnit { eye, hemifield })
                .collect(),
            locations: locs
                .into_iter()
                .map(|(hemifield, location)| LocationUnit {
                    hemifield,
                    location,
                })
                .collect(),
            visits,
            obs,
            eye_hemifields,
            hemifield_locations,
            eye_obs,
            hemifield_obs,
            location_obs,
            visit_obs,
            location_xtx,
            distinct_times: data.distinct_times(),
        })
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn distinct_times(&self) -> usize {
        self.distinct_times
    }

    pub fn n_censored(&self) -> usize {
        self.obs.iter().filter(|o| o.censored).count()
    }

    pub fn unit_of(&self, obs_index: usize) -> Option<UnitIndex> {
        self.obs.get(obs_index).map(|o| UnitIndex {
            location: o.location,
            visit: o.visit,
        })
    }

    /// Column names of the flattened random effects, in [`RandomEffects::to_flat`] order.
    pub fn effect_names(&self, with_phi: bool) -> Vec<String> {
        let mut names = Vec::new();
        for e in &self.eyes {
            for c in 0..2 {
                names.push(format!("gamma{c}_e{}", e.index()));
            }
        }
        for h in &self.hemifields {
            let e = self.eyes[h.eye].index();
            for c in 0..2 {
                names.push(format!("eta{c}_e{e}h{}", h.hemifield));
            }
        }
        for l in &self.locations {
            let h = self.hemifields[l.hemifield];
            let e = self.eyes[h.eye].index();
            for c in 0..2 {
                names.push(format!("lambda{c}_e{e}h{}l{}", h.hemifield, l.location));
            }
        }
        if with_phi {
            for v in &self.visits {
                names.push(format!("phi_e{}v{}", self.eyes[v.eye].index(), v.visit));
            }
        }
        names
    }
}

/// Random effects of one individual. `alpha` is the individual-level pair;
/// the other vectors follow the slot order of the individual's [`Design`].
#[derive(Clone, Debug, PartialEq)]
pub struct RandomEffects {
    pub alpha: Pair,
    pub gamma: Vec<Pair>,
    pub eta: Vec<Pair>,
    pub lambda: Vec<Pair>,
    pub phi: Vec<f64>,
}

impl RandomEffects {
    pub fn zeros(design: &Design) -> Self {
        RandomEffects {
            alpha: [0.0; 2],
            gamma: vec![[0.0; 2]; design.eyes.len()],
            eta: vec![[0.0; 2]; design.hemifields.len()],
            lambda: vec![[0.0; 2]; design.locations.len()],
            phi: vec![0.0; design.visits.len()],
        }
    }

    /// Fails unless every slot of `design` has a finite entry.
    pub fn check(&self, design: &Design) -> Result<()> {
        let ok = self.gamma.len() == design.eyes.len()
            && self.eta.len() == design.hemifields.len()
            && self.lambda.len() == design.locations.len()
            && self.phi.len() == design.visits.len();
        if !ok {
            return Err(Error::structure(format!(
                "random effects do not match the hierarchy of individual {}",
                design.individual_id
            )));
        }
        let finite = self.alpha.iter().all(|v| v.is_finite())
            && self.gamma.iter().flatten().all(|v| v.is_finite())
            && self.eta.iter().flatten().all(|v| v.is_finite())
            && self.lambda.iter().flatten().all(|v| v.is_finite())
            && self.phi.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("random effects must be finite"));
        }
        Ok(())
    }

    /// Flattened gamma, eta, lambda and (optionally) phi values.
    pub fn to_flat(&self, with_phi: bool) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .gamma
            .iter()
            .chain(&self.eta)
            .chain(&self.lambda)
            .flatten()
            .copied()
            .collect();
        if with_phi {
            out.extend_from_slice(&self.phi);
        }
        out
    }

    pub fn from_flat(design: &Design, alpha: Pair, values: &[f64], with_phi: bool) -> Result<Self> {
        let mut fx = RandomEffects::zeros(design);
        fx.alpha = alpha;
        let pairs = 2 * (fx.gamma.len() + fx.eta.len() + fx.lambda.len());
        let expected = pairs + if with_phi { fx.phi.len() } else { 0 };
        if values.len() != expected {
            return Err(Error::structure(format!(
                "expected {expected} random-effect values for individual {}, got {}",
                design.individual_id,
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for p in fx
            .gamma
            .iter_mut()
            .chain(fx.eta.iter_mut())
            .chain(fx.lambda.iter_mut())
        {
            p[0] = it.next().unwrap();
            p[1] = it.next().unwrap();
        }
        if with_phi {
            for v in fx.phi.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(fx)
    }

    /// Mean of observation `k` without bounds checks beyond slice indexing.
    #[inline]
    pub(crate) fn mu(
        &self,
        design: &Design,
        fixed: &FixedEffects,
        k: usize,
        variant: ModelVariant,
    ) -> f64 {
        let o = &design.obs[k];
        let (a, g, n, l) = (
            self.alpha,
            self.gamma[o.eye],
            self.eta[o.hemifield],
            self.lambda[o.location],
        );
        let intercept = fixed.beta0 + a[0] + g[0] + n[0] + l[0];
        let slope = fixed.beta1 + a[1] + g[1] + n[1] + l[1];
        let mu = intercept + slope * o.years;
        if variant.has_visit_effects() {
            mu + self.phi[o.visit]
        } else {
            mu
        }
    }
}

/// Mean of the cell `unit` at time `years`: the Model 1 predictor, plus the
/// visit effect for Models 2 and 3.
pub fn linear_predictor(
    fixed: &FixedEffects,
    effects: &RandomEffects,
    design: &Design,
    unit: UnitIndex,
    years: f64,
    variant: ModelVariant,
) -> Result<f64> {
    let loc = design.locations.get(unit.location).ok_or_else(|| {
        Error::structure(format!("location slot {} does not exist", unit.location))
    })?;
    let h = loc.hemifield;
    let e = design.hemifields[h].eye;
    let missing = |what: &str| Error::structure(format!("random effect {what} missing"));
    let a = effects.alpha;
    let g = effects.gamma.get(e).ok_or_else(|| missing("gamma"))?;
    let n = effects.eta.get(h).ok_or_else(|| missing("eta"))?;
    let l = effects
        .lambda
        .get(unit.location)
        .ok_or_else(|| missing("lambda"))?;
    let intercept = fixed.beta0 + a[0] + g[0] + n[0] + l[0];
    let slope = fixed.beta1 + a[1] + g[1] + n[1] + l[1];
    let mut mu = intercept + slope * years;
    if variant.has_visit_effects() {
        mu += effects.phi.get(unit.visit).ok_or_else(|| missing("phi"))?;
    }
    Ok(mu)
}

/// Exact log-likelihood of one individual's data.
pub fn loglik_individual(
    design: &Design,
    fixed: &FixedEffects,
    effects: &RandomEffects,
    var: &VarianceParams,
    variant: ModelVariant,
) -> Result<f64> {
    effects.check(design)?;
    let mut total = 0.0;
    for (k, o) in design.obs.iter().enumerate() {
        let mu = effects.mu(design, fixed, k, variant);
        let sd = residual_sd(mu, var, variant);
        total += loglik_point(o.value, o.censored, mu, sd);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(eye: Eye, h: u8, l: u8, visit: u32, years: f64, y: f64) -> Observation {
        Observation::from_reading(0, eye, h, l, visit, years, y).unwrap()
    }

    fn small() -> IndividualData {
        let mut v = Vec::new();
        for (visit, t) in [(1, 0.0), (2, 0.5), (3, 1.1)] {
            v.push(obs(Eye::Od, 1, 3, visit, t, 20.0 - t));
            v.push(obs(Eye::Od, 2, 7, visit, t, 18.0));
            v.push(obs(Eye::Os, 1, 3, visit, t, 0.0));
        }
        IndividualData::new("p1", v).unwrap()
    }

    #[test]
    fn censor_examples() {
        assert_eq!(censor(5.0), 5.0);
        assert_eq!(censor(-3.0), 0.0);
        assert_eq!(censor(0.0), 0.0);
    }

    #[test]
    fn predictor_examples() {
        let data = small();
        let d = Design::new(&data).unwrap();
        let fx = RandomEffects::zeros(&d);
        let unit = UnitIndex {
            location: 0,
            visit: 0,
        };
        let fixed = FixedEffects {
            beta0: 19.89,
            beta1: 0.0,
        };
        let mu = linear_predictor(&fixed, &fx, &d, unit, 0.0, ModelVariant::Model1).unwrap();
        assert_eq!(mu, 19.89);
        let fixed = FixedEffects {
            beta0: 19.89,
            beta1: -0.31,
        };
        let mu = linear_predictor(&fixed, &fx, &d, unit, 10.0, ModelVariant::Model3).unwrap();
        assert!((mu - 16.79).abs() < 1e-12);

        let mut fx = fx;
        fx.alpha = [20.0, 0.0];
        fx.phi[0] = -4.0;
        let m2 = linear_predictor(
            &FixedEffects::ZERO,
            &fx,
            &d,
            unit,
            0.0,
            ModelVariant::Model2,
        )
        .unwrap();
        let m1 = linear_predictor(
            &FixedEffects::ZERO,
            &fx,
            &d,
            unit,
            0.0,
            ModelVariant::Model1,
        )
        .unwrap();
        assert_eq!((m1, m2), (20.0, 16.0));
    }

    #[test]
    fn predictor_missing_slot_is_structural() {
        let d = Design::new(&small()).unwrap();
        let fx = RandomEffects::zeros(&d);
        let err = linear_predictor(
            &FixedEffects::ZERO,
            &fx,
            &d,
            UnitIndex {
                location: 99,
                visit: 0,
            },
            0.0,
            ModelVariant::Model1,
        );
        assert!(matches!(err, Err(Error::Structure(_))));
        let mut short = fx.clone();
        short.phi.clear();
        let err = linear_predictor(
            &FixedEffects::ZERO,
            &short,
            &d,
            UnitIndex {
                location: 0,
                visit: 0,
            },
            0.0,
            ModelVariant::Model2,
        );
        assert!(matches!(err, Err(Error::Structure(_))));
    }

    #[test]
    fn residual_sd_examples() {
        let v = VarianceParams::linked(2.82, -0.08);
        assert!((residual_sd(0.0, &v, ModelVariant::Model3) - 2.82f64.exp()).abs() < 1e-12);
        assert!((residual_sd(0.0, &v, ModelVariant::Model3) - 16.78).abs() < 0.01);
        assert!((residual_sd(35.25, &v, ModelVariant::Model3) - 1.0).abs() < 1e-12);
        let v = VarianceParams::homoscedastic(13.42);
        assert!((residual_sd(7.0, &v, ModelVariant::Model1) - 3.663).abs() < 5e-4);
    }

    #[test]
    fn loglik_observation_examples() {
        let o = obs(Eye::Od, 1, 1, 1, 0.0, 12.0);
        assert!((loglik_observation(&o, 12.0, 1.0) + 0.918_938_533_204_672_8).abs() < 1e-15);
        let c = obs(Eye::Od, 1, 1, 1, 0.0, 0.0);
        assert!(c.censored);
        for sd in [0.1, 1.0, 7.0] {
            assert!((loglik_observation(&c, 0.0, sd) - 0.5f64.ln()).abs() < 1e-15);
        }
        assert!((loglik_observation(&c, 2.0, 1.0) - (-3.783_184_333_682_032)).abs() < 1e-12);
    }

    #[test]
    fn individual_loglik_is_additive() {
        let empty = IndividualData::new("e", Vec::new()).unwrap();
        let d = Design::new(&empty).unwrap();
        let fx = RandomEffects::zeros(&d);
        let v = VarianceParams::homoscedastic(1.0);
        assert_eq!(
            loglik_individual(&d, &FixedEffects::ZERO, &fx, &v, ModelVariant::Model1).unwrap(),
            0.0
        );

        let data = small();
        let d = Design::new(&data).unwrap();
        let mut fx = RandomEffects::zeros(&d);
        fx.alpha = [19.0, -0.5];
        fx.lambda[1] = [-1.0, 0.5];
        let total =
            loglik_individual(&d, &FixedEffects::ZERO, &fx, &v, ModelVariant::Model1).unwrap();
        let mut sum = 0.0;
        for (k, o) in data.observations.iter().enumerate() {
            let u = d.unit_of(k).unwrap();
            let mu = linear_predictor(
                &FixedEffects::ZERO,
                &fx,
                &d,
                u,
                o.years,
                ModelVariant::Model1,
            )
            .unwrap();
            sum += loglik_observation(o, mu, 1.0);
        }
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn duplicates_and_mixed_individuals_rejected() {
        let a = obs(Eye::Od, 1, 1, 1, 0.0, 10.0);
        assert!(matches!(
            IndividualData::new("x", vec![a.clone(), a.clone()]),
            Err(Error::Structure(_))
        ));
        let mut b = a.clone();
        b.individual = 3;
        b.location = 2;
        assert!(matches!(
            IndividualData::new("x", vec![a, b]),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn observation_invariants() {
        assert!(Observation::from_reading(0, Eye::Od, 3, 1, 1, 0.0, 1.0).is_err());
        assert!(Observation::from_reading(0, Eye::Od, 1, 27, 1, 0.0, 1.0).is_err());
        assert!(Observation::from_reading(0, Eye::Od, 1, 1, 1, -1.0, 1.0).is_err());
        assert!(Observation::from_reading(0, Eye::Od, 1, 1, 1, 0.0, -2.0).is_err());
        let mut o = Observation::from_reading(0, Eye::Od, 1, 1, 1, 0.0, 3.0).unwrap();
        o.censored = true;
        assert!(o.validate().is_err());
    }

    #[test]
    fn design_slots_and_names() {
        let data = small();
        let d = Design::new(&data).unwrap();
        assert_eq!(d.eyes, vec![Eye::Od, Eye::Os]);
        assert_eq!(d.hemifields.len(), 3);
        assert_eq!(d.locations.len(), 3);
        assert_eq!(d.visits.len(), 6);
        assert_eq!(d.n_censored(), 3);
        assert_eq!(d.distinct_times(), 3);
        let names = d.effect_names(true);
        assert_eq!(names.len(), 2 * (2 + 3 + 3) + 6);
        assert_eq!(names[0], "gamma0_e1");
        assert!(names.contains(&String::from("lambda1_e1h2l7")));
        assert_eq!(names.last().unwrap(), "phi_e2v3");
        let mut fx = RandomEffects::zeros(&d);
        fx.lambda[2] = [1.5, -0.25];
        fx.phi[4] = 3.0;
        let flat = fx.to_flat(true);
        assert_eq!(
            RandomEffects::from_flat(&d, fx.alpha, &flat, true).unwrap(),
            fx
        );
        assert!(RandomEffects::from_flat(&d, fx.alpha, &flat[1..], true).is_err());
    }
}

//! Random-variate generators and log densities.
//!
//! Base variates (uniform, standard normal, exponential, gamma) come from
//! `rand_distr`; everything built on top of them lives here.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Matrix2, Vector};
use crate::math;
use crate::model::CovarianceSpec;

/// Generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// A reproducible random stream: a seed shared by a whole run plus a stream
/// id unique to one (task, individual, chain).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Stream for a named task over an ordered list of keys.
    pub fn derive(seed: u64, tag: &str, keys: &[u64]) -> Self {
        let mut h = fnv1a(0xcbf2_9ce4_8422_2325, tag.as_bytes());
        for k in keys {
            h = fnv1a(h, &k.to_le_bytes());
        }
        RngStream {
            seed,
            stream_id: splitmix(h),
        }
    }

    /// Stream keyed by a string identifier, e.g. an individual id.
    pub fn derive_named(seed: u64, tag: &str, name: &str, key: u64) -> Self {
        let h = fnv1a(0xcbf2_9ce4_8422_2325, name.as_bytes());
        Self::derive(seed, tag, &[h, key])
    }

    pub fn rng(&self) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform on [0, 1).
#[inline]
pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniform index in 0..n.
#[inline]
pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Gamma(shape, rate) draw.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut Rng) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::invalid(
            "gamma shape and rate must be positive and finite",
        ));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|_| Error::invalid("gamma parameters"))?;
    Ok(g.sample(rng))
}

/// Inverse-gamma(shape, rate) draw: 1/Gamma(shape, rate).
pub fn sample_inverse_gamma(shape: f64, rate: f64, rng: &mut Rng) -> Result<f64> {
    Ok(1.0 / sample_gamma(shape, rate, rng)?)
}

/// Normal(mu, sd) conditioned on the draw lying below `upper` (may be +inf).
pub fn sample_truncated_normal(mu: f64, sd: f64, upper: f64, rng: &mut Rng) -> f64 {
    debug_assert!(sd > 0.0);
    // Work with z = (mu - x)/sd, which must exceed a.
    let a = (mu - upper) / sd;
    let z = if a <= 0.0 {
        loop {
            let z = std_normal(rng);
            if z > a {
                break z;
            }
        }
    } else {
        // Exponential proposal with the optimal rate for the tail beyond a.
        let lambda = 0.5 * (a + math::sqrt(a * a + 4.0));
        loop {
            let e: f64 = Exp1.sample(rng);
            let z = a + e / lambda;
            let d = z - lambda;
            if uniform(rng) < math::exp(-0.5 * d * d) {
                break z;
            }
        }
    };
    let x = mu - sd * z;
    // Guard the open boundary against rounding.
    if x < upper {
        x
    } else {
        upper - f64::EPSILON * math::abs(upper).max(1.0)
    }
}

/// `mean + L z` for lower-triangular `chol` and standard normal `z`.
pub fn sample_mvn_chol<const N: usize>(
    mean: &Vector<N>,
    chol: &Matrix<N>,
    rng: &mut Rng,
) -> Vector<N> {
    let mut z = [0.0; N];
    for v in z.iter_mut() {
        *v = std_normal(rng);
    }
    let mut out = *mean;
    for i in 0..N {
        for j in 0..=i {
            out[i] += chol.0[i][j] * z[j];
        }
    }
    out
}

pub fn sample_mvn2(mean: &Vector<2>, cov: &CovarianceSpec, rng: &mut Rng) -> Vector<2> {
    sample_mvn_chol(mean, cov.chol(), rng)
}

/// Draw from N(Q^{-1} b, Q^{-1}) given the precision `Q` and information vector `b`.
pub fn sample_gaussian_canonical<const N: usize>(
    precision: &Matrix<N>,
    info: &Vector<N>,
    rng: &mut Rng,
) -> Result<Vector<N>> {
    let l = precision.symmetrized().cholesky()?;
    let mean = l.chol_solve(info);
    let mut z = [0.0; N];
    for v in z.iter_mut() {
        *v = std_normal(rng);
    }
    let dev = l.backward_solve(&z);
    let mut out = mean;
    for i in 0..N {
        out[i] += dev[i];
    }
    Ok(out)
}

/// Inverse-Wishart(df, scale) draw via the Bartlett decomposition of the
/// Wishart(df, scale^{-1}) precision.
pub fn sample_inverse_wishart<const N: usize>(
    df: f64,
    scale: &Matrix<N>,
    rng: &mut Rng,
) -> Result<Matrix<N>> {
    if !(df > (N as f64) - 1.0) || !df.is_finite() {
        return Err(Error::invalid(
            "inverse-Wishart df must exceed dimension - 1",
        ));
    }
    let lp = scale.spd_inverse()?.cholesky()?;
    let mut a = Matrix::<N>::zeros();
    for i in 0..N {
        let c = sample_gamma(0.5 * (df - i as f64), 0.5, rng)?;
        a.0[i][i] = math::sqrt(c);
        for j in 0..i {
            a.0[i][j] = std_normal(rng);
        }
    }
    // Wishart draw W = (Lp A)(Lp A)^T; its inverse is the IW draw.
    let la = lp * a;
    let inv = la.chol_inverse_lower();
    Ok(inv)
}

pub fn sample_inverse_wishart2(df: f64, scale: &Matrix2, rng: &mut Rng) -> Result<Matrix2> {
    sample_inverse_wishart(df, scale, rng)
}

/// Generalized t with 3 df, location 0 and scale `sigma_phi`, as a normal
/// over the square root of a scaled chi-square.
pub fn sample_gve_t(sigma_phi: f64, rng: &mut Rng) -> f64 {
    let z = std_normal(rng);
    let w = sample_gamma(1.5, 0.5, rng).expect("fixed valid parameters");
    sigma_phi * z / math::sqrt(w / 3.0)
}

/// Conditional of the mixing weight w given phi when phi | w ~ N(0, s2/w)
/// and w ~ Gamma(3/2, rate 3/2).
pub fn sample_mix_weight(phi: f64, sigma2_phi: f64, rng: &mut Rng) -> Result<f64> {
    sample_gamma(2.0, 0.5 * (3.0 + phi * phi / sigma2_phi), rng)
}

/// Lower Cholesky factor of a 2x2 SPD matrix.
pub fn cholesky2(m: &Matrix2) -> Result<Matrix2> {
    m.cholesky()
}

fn check_positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(alloc::format!(
            "{what} must be positive and finite"
        )))
    }
}

pub fn logpdf_normal(x: f64, mu: f64, sd: f64) -> Result<f64> {
    check_positive(sd, "normal sd")?;
    let z = (x - mu) / sd;
    Ok(-0.5 * z * z - math::ln(sd) - math::LN_SQRT_2PI)
}

pub fn logpdf_mvn<const N: usize>(x: &Vector<N>, mean: &Vector<N>, cov: &Matrix<N>) -> Result<f64> {
    let l = cov.cholesky()?;
    Ok(logpdf_mvn_chol(x, mean, &l))
}

pub(crate) fn logpdf_mvn_chol<const N: usize>(
    x: &Vector<N>,
    mean: &Vector<N>,
    chol: &Matrix<N>,
) -> f64 {
    let mut d = *x;
    for i in 0..N {
        d[i] -= mean[i];
    }
    let u = chol.forward_solve(&d);
    let q: f64 = u.iter().map(|v| v * v).sum();
    -0.5 * q - 0.5 * chol.chol_log_det() - (N as f64) * math::LN_SQRT_2PI
}

pub fn logpdf_mvn2(x: &Vector<2>, mean: &Vector<2>, cov: &CovarianceSpec) -> f64 {
    logpdf_mvn_chol(x, mean, cov.chol())
}

pub fn logpdf_inverse_gamma(x: f64, shape: f64, rate: f64) -> Result<f64> {
    check_positive(shape, "inverse-gamma shape")?;
    check_positive(rate, "inverse-gamma rate")?;
    if !(x > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(shape * math::ln(rate) - math::ln_gamma(shape) - (shape + 1.0) * math::ln(x) - rate / x)
}

/// Density of the t distribution with 3 df, location `loc` and scale `scale`.
pub fn logpdf_t3(x: f64, loc: f64, scale: f64) -> Result<f64> {
    check_positive(scale, "t scale")?;
    let z = (x - loc) / scale;
    // Gamma(2)/(Gamma(3/2) sqrt(3 pi)) = 2/(pi sqrt 3)
    let c = math::ln(2.0) - math::ln(math::PI) - 0.5 * math::ln(3.0);
    Ok(c - math::ln(scale) - 2.0 * math::ln_1p(z * z / 3.0))
}

/// log of the multivariate gamma function Gamma_N(a).
pub fn ln_multigamma<const N: usize>(a: f64) -> f64 {
    let p = N as f64;
    let mut s = 0.25 * p * (p - 1.0) * math::ln(math::PI);
    for j in 0..N {
        s += math::ln_gamma(a - 0.5 * j as f64);
    }
    s
}

/// Inverse-Wishart(df, scale) log density at `x`.
pub fn logpdf_inverse_wishart<const N: usize>(
    x: &Matrix<N>,
    df: f64,
    scale: &Matrix<N>,
) -> Result<f64> {
    let lx = x.cholesky()?;
    let ls = scale.cholesky()?;
    let p = N as f64;
    let xinv = lx.chol_inverse();
    let tr = (*scale * xinv).trace();
    Ok(0.5 * df * ls.chol_log_det()
        - 0.5 * df * p * math::LN_2
        - ln_multigamma::<N>(0.5 * df)
        - 0.5 * (df + p + 1.0) * lx.chol_log_det()
        - 0.5 * tr)
}

impl<const N: usize> Matrix<N> {
    /// `(L L^T)^{-1}` for a lower-triangular `self` whose diagonal may be
    /// negative; used for products of triangular factors.
    fn chol_inverse_lower(&self) -> Self {
        let mut l = *self;
        for j in 0..N {
            if l.0[j][j] < 0.0 {
                for i in j..N {
                    l.0[i][j] = -l.0[i][j];
                }
            }
        }
        l.chol_inverse()
    }
}

//! Random-walk Metropolis-Hastings helpers with burn-in adaptation.

use crate::distributions::{self, Rng};
use crate::linalg::{Matrix, Vector};
use crate::math;

/// Accept with probability min(1, exp(log_ratio)).
#[inline]
pub(crate) fn accept(log_ratio: f64, rng: &mut Rng) -> bool {
    log_ratio >= 0.0 || math::ln(distributions::uniform(rng)) < log_ratio
}

/// Scalar proposal scale adapted on the log scale by Robbins-Monro steps
/// toward a target acceptance rate.
#[derive(Clone, Debug)]
pub(crate) struct ScaleAdapter {
    log_scale: f64,
    target: f64,
    updates: u64,
    accepted: u64,
    proposed: u64,
}

impl ScaleAdapter {
    pub fn new(scale: f64, target: f64) -> Self {
        ScaleAdapter {
            log_scale: math::ln(scale),
            target,
            updates: 0,
            accepted: 0,
            proposed: 0,
        }
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        math::exp(self.log_scale)
    }

    pub fn record(&mut self, accepted: bool, adapting: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
        if adapting {
            self.updates += 1;
            let gain = 1.0 / math::sqrt(1.0 + self.updates as f64 / 20.0);
            let a = if accepted { 1.0 } else { 0.0 };
            self.log_scale = (self.log_scale + gain * (a - self.target)).clamp(-25.0, 10.0);
        }
    }

    /// Forget acceptance counts, e.g. when adaptation ends.
    pub fn reset_counts(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Joint proposal whose shape tracks the running covariance of the chain.
#[derive(Clone, Debug)]
pub(crate) struct CovAdapter<const N: usize> {
    pub scale: ScaleAdapter,
    chol: Matrix<N>,
    initial: Matrix<N>,
    n: u64,
    mean: Vector<N>,
    m2: Matrix<N>,
}

impl<const N: usize> CovAdapter<N> {
    /// `initial` is the starting proposal covariance (before the 2.38/sqrt(N) factor).
    pub fn new(initial: Matrix<N>, target: f64) -> Self {
        let initial = initial.symmetrized();
        let chol = initial.cholesky().unwrap_or_else(|_| {
            Matrix::from_diagonal(initial.diagonal().map(|v| math::sqrt(v.abs().max(1e-12))))
        });
        CovAdapter {
            scale: ScaleAdapter::new(2.38 / math::sqrt(N as f64), target),
            chol,
            initial,
            n: 0,
            mean: [0.0; N],
            m2: Matrix::zeros(),
        }
    }

    pub fn propose(&self, current: &Vector<N>, rng: &mut Rng) -> Vector<N> {
        let step = distributions::sample_mvn_chol(&[0.0; N], &self.chol, rng);
        let s = self.scale.scale();
        let mut out = *current;
        for i in 0..N {
            out[i] += s * step[i];
        }
        out
    }

    /// Feed the post-step state; only called while adapting.
    pub fn observe(&mut self, x: &Vector<N>) {
        self.n += 1;
        let n = self.n as f64;
        let mut delta = [0.0; N];
        for i in 0..N {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / n;
        }
        for i in 0..N {
            for j in 0..N {
                self.m2.0[i][j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
        if self.n >= 20 * N as u64 && self.n % 50 == 0 {
            let mut cov = self.m2.scale(1.0 / (n - 1.0)).symmetrized();
            // Keep a sliver of the initial shape so the factor stays regular.
            cov = cov + self.initial.scale(1e-4);
            if let Ok(l) = cov.cholesky() {
                self.chol = l;
            }
        }
    }
}

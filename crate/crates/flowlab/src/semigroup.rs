//! Dense semigroup numerics: `T_t = exp(tL)` by uniformization, resolvents
//! `G_beta = (beta I - L)^{-1}`, their m-adjoints, and construction and
//! certification of excessive / coexcessive functions.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::htransform::HTransform;
use crate::model::ModelBundle;
use crate::STRUCT_TOL;

#[derive(Debug, Error)]
pub enum SemigroupError {
    #[error("beta = {beta} must exceed the spectral bound {bound}")]
    BetaTooSmall { beta: f64, bound: f64 },
    #[error("uniformization series length {lambda:.1} exceeds the cap {cap:.1} (t too large)")]
    HorizonOverflow { lambda: f64, cap: f64 },
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("vector must be strictly positive at entry {0}")]
    NotStrictlyPositive(usize),
}

/// Matrix exponential `exp(tL)` of a Metzler matrix by uniformization:
/// with `c >= max(-L_xx)` and `P = I + L/c`, the series
/// `e^{-ct} sum_k (ct)^k/k! P^k` has only nonnegative terms, so truncation
/// never produces negative entries.
pub fn expm_uniformized(
    l: &DMatrix<f64>,
    t: f64,
    truncation_tol: f64,
    series_cap: f64,
) -> Result<DMatrix<f64>, SemigroupError> {
    if t < 0.0 {
        return Err(SemigroupError::NegativeTime(t));
    }
    let n = l.nrows();
    if t == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let c = (0..n)
        .map(|x| -l[(x, x)])
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1.0);
    let p = DMatrix::identity(n, n) + l / c;
    // Row sums of P can exceed 1 when L creates mass; lambda bounds the
    // effective series length so the stopping rule below is safe.
    let p_norm = p
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(1.0_f64, f64::max);
    let lambda = c * t * p_norm;
    if lambda > series_cap {
        return Err(SemigroupError::HorizonOverflow {
            lambda,
            cap: series_cap,
        });
    }

    let scale = (-c * t).exp();
    let mut term = DMatrix::identity(n, n) * scale; // e^{-ct} (ct)^k/k! P^k
    let mut sum = term.clone();
    let mut k = 0.0_f64;
    loop {
        k += 1.0;
        term = (&term * &p) * (c * t / k);
        sum += &term;
        let term_norm = term.amax() * n as f64;
        // Past the mode of the weight sequence the terms shrink at least
        // geometrically with ratio lambda/(k+1); bound the whole tail.
        if k > lambda {
            let ratio = lambda / (k + 1.0);
            if term_norm / (1.0 - ratio) < truncation_tol {
                break;
            }
        }
        if k > 4.0 * lambda + 1000.0 {
            break; // numerical safety; unreachable for sane inputs
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone)]
pub struct ExcessiveFunction {
    pub h: DVector<f64>,
    pub alpha: f64,
    /// `(alpha I - L) h`; entrywise nonnegative iff h is alpha-excessive.
    pub slack: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct CoexcessiveFunction {
    pub g: DVector<f64>,
    pub gamma: f64,
    /// `(gamma I - L_hat) g` with `L_hat = D_m^{-1} L^T D_m`.
    pub slack: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ExcessivityReport {
    pub strictly_positive: bool,
    pub slack: DVector<f64>,
    /// Linear certificate: slack >= -tol entrywise.
    pub slack_ok: bool,
    /// Redundant time-grid spot check of `e^{-alpha t} T_t h <= h`.
    pub grid_ok: bool,
    pub is_excessive: bool,
}

/// Agreement report for the conjugation equivalence: `g` is gamma-excessive
/// for `L` iff `g/h` is `(gamma - alpha)`-excessive for `L^h`.
#[derive(Debug, Clone)]
pub struct ConjugationEquivalence {
    pub base_excessive: bool,
    pub transformed_excessive: bool,
}

impl ConjugationEquivalence {
    pub fn agree(&self) -> bool {
        self.base_excessive == self.transformed_excessive
    }
}

type MatrixCache = Mutex<HashMap<u64, Arc<DMatrix<f64>>>>;

/// Semigroup and resolvent engine over a validated model. Immutable after
/// construction; transition/resolvent results are memoized behind a lock and
/// are bit-identical regardless of access order because each entry is a pure
/// function of its key.
pub struct SemigroupEngine {
    bundle: ModelBundle,
    uniformization_rate: f64,
    truncation_tol: f64,
    series_cap: f64,
    transition_cache: MatrixCache,
    resolvent_cache: MatrixCache,
}

impl SemigroupEngine {
    pub fn new(bundle: ModelBundle) -> Self {
        let rate = (0..bundle.n())
            .map(|x| -bundle.generator().matrix()[(x, x)])
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            bundle,
            uniformization_rate: rate,
            truncation_tol: 1e-13,
            series_cap: 1e5,
            transition_cache: Mutex::new(HashMap::new()),
            resolvent_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn uniformization_rate(&self) -> f64 {
        self.uniformization_rate
    }

    pub fn n(&self) -> usize {
        self.bundle.n()
    }

    /// `T_t = exp(tL)`, entrywise nonnegative.
    pub fn transition(&self, t: f64) -> Result<Arc<DMatrix<f64>>, SemigroupError> {
        if let Some(hit) = self.transition_cache.lock().unwrap().get(&t.to_bits()) {
            return Ok(hit.clone());
        }
        let mat = Arc::new(expm_uniformized(
            self.bundle.generator().matrix(),
            t,
            self.truncation_tol,
            self.series_cap,
        )?);
        self.transition_cache
            .lock()
            .unwrap()
            .insert(t.to_bits(), mat.clone());
        Ok(mat)
    }

    pub fn apply_transition(
        &self,
        t: f64,
        f: &DVector<f64>,
    ) -> Result<DVector<f64>, SemigroupError> {
        Ok(self.transition(t)?.as_ref() * f)
    }

    /// `G_beta = (beta I - L)^{-1}`, entrywise nonnegative for
    /// `beta > s(L)`.
    pub fn resolvent(&self, beta: f64) -> Result<Arc<DMatrix<f64>>, SemigroupError> {
        let bound = self.bundle.generator().spectral_bound();
        if beta <= bound + STRUCT_TOL {
            return Err(SemigroupError::BetaTooSmall { beta, bound });
        }
        if let Some(hit) = self.resolvent_cache.lock().unwrap().get(&beta.to_bits()) {
            return Ok(hit.clone());
        }
        let n = self.n();
        let shifted = DMatrix::identity(n, n) * beta - self.bundle.generator().matrix();
        let inv = shifted
            .lu()
            .try_inverse()
            .expect("beta I - L invertible for beta above the spectral bound");
        let mat = Arc::new(inv);
        self.resolvent_cache
            .lock()
            .unwrap()
            .insert(beta.to_bits(), mat.clone());
        Ok(mat)
    }

    pub fn apply_resolvent(
        &self,
        beta: f64,
        f: &DVector<f64>,
    ) -> Result<DVector<f64>, SemigroupError> {
        Ok(self.resolvent(beta)?.as_ref() * f)
    }

    /// m-adjoint generator `L_hat = D_m^{-1} L^T D_m`, so that
    /// `(T_t u, v)_m = (u, T_hat_t v)_m` exactly.
    pub fn co_generator(&self) -> DMatrix<f64> {
        let m = self.bundle.measure().weights();
        let d = DMatrix::from_diagonal(m);
        let d_inv = DMatrix::from_diagonal(&m.map(|w| 1.0 / w));
        d_inv * self.bundle.generator().matrix().transpose() * d
    }

    /// `h = G_alpha g` for strictly positive data `g`; the slack is then `g`
    /// itself, so h is alpha-excessive by construction.
    pub fn make_excessive(
        &self,
        g: &DVector<f64>,
        alpha: f64,
    ) -> Result<ExcessiveFunction, SemigroupError> {
        if let Some(i) = g.iter().position(|&x| x <= 0.0) {
            return Err(SemigroupError::NotStrictlyPositive(i));
        }
        let h = self.apply_resolvent(alpha, g)?;
        let slack = &h * alpha - self.bundle.generator().matrix() * &h;
        Ok(ExcessiveFunction { h, alpha, slack })
    }

    /// Wrap a directly supplied vector, computing its slack (no validation of
    /// the sign; see [`Self::is_excessive`] / `HTransform::build`).
    pub fn excessive_from_vector(&self, h: DVector<f64>, alpha: f64) -> ExcessiveFunction {
        let slack = &h * alpha - self.bundle.generator().matrix() * &h;
        ExcessiveFunction { h, alpha, slack }
    }

    /// Linear certificate `(alpha I - L) h >= 0` plus a redundant spot check
    /// of `e^{-alpha t} T_t h <= h` on t in {0.1, 1, 10}.
    pub fn is_excessive(&self, h: &DVector<f64>, alpha: f64) -> ExcessivityReport {
        let slack = h * alpha - self.bundle.generator().matrix() * h;
        let strictly_positive = h.iter().all(|&x| x > 0.0);
        let slack_ok = slack.iter().all(|&s| s >= -STRUCT_TOL);
        let mut grid_ok = true;
        for t in [0.1, 1.0, 10.0] {
            if let Ok(tt) = self.transition(t) {
                let decayed = (tt.as_ref() * h) * (-alpha * t).exp();
                if decayed
                    .iter()
                    .zip(h.iter())
                    .any(|(&a, &b)| a > b + STRUCT_TOL)
                {
                    grid_ok = false;
                }
            }
        }
        ExcessivityReport {
            strictly_positive,
            slack: slack.clone(),
            slack_ok,
            grid_ok,
            is_excessive: strictly_positive && slack_ok,
        }
    }

    /// `g_hat = (gamma I - L_hat)^{-1} g0` for strictly positive `g0`.
    pub fn make_coexcessive(
        &self,
        g0: &DVector<f64>,
        gamma: f64,
    ) -> Result<CoexcessiveFunction, SemigroupError> {
        if let Some(i) = g0.iter().position(|&x| x <= 0.0) {
            return Err(SemigroupError::NotStrictlyPositive(i));
        }
        let bound = self.bundle.generator().spectral_bound();
        if gamma <= bound + STRUCT_TOL {
            return Err(SemigroupError::BetaTooSmall { beta: gamma, bound });
        }
        let n = self.n();
        let co = self.co_generator();
        let shifted = DMatrix::identity(n, n) * gamma - &co;
        let g = shifted
            .lu()
            .solve(g0)
            .expect("gamma I - L_hat invertible above the spectral bound");
        let slack = &g * gamma - co * &g;
        Ok(CoexcessiveFunction { g, gamma, slack })
    }

    /// Wrap a directly supplied coexcessive candidate, computing its slack.
    pub fn coexcessive_from_vector(&self, g: DVector<f64>, gamma: f64) -> CoexcessiveFunction {
        let slack = &g * gamma - self.co_generator() * &g;
        CoexcessiveFunction { g, gamma, slack }
    }

    /// Conjugation equivalence for excessive functions: membership for the
    /// base generator at level gamma must coincide with membership of `g/h`
    /// for the transformed generator at level `gamma - alpha`.
    pub fn conjugation_equivalence(
        &self,
        g: &DVector<f64>,
        gamma: f64,
        ht: &HTransform,
    ) -> ConjugationEquivalence {
        let base_slack = g * gamma - self.bundle.generator().matrix() * g;
        let base_excessive =
            g.iter().all(|&x| x >= 0.0) && base_slack.iter().all(|&s| s >= -STRUCT_TOL);

        let ratio = DVector::from_fn(g.len(), |i, _| g[i] / ht.h()[i]);
        let level = gamma - ht.alpha();
        let transformed_slack = &ratio * level - ht.generator() * &ratio;
        let transformed_excessive =
            ratio.iter().all(|&x| x >= 0.0) && transformed_slack.iter().all(|&s| s >= -STRUCT_TOL);

        ConjugationEquivalence {
            base_excessive,
            transformed_excessive,
        }
    }
}

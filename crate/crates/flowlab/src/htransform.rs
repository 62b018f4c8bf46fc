//! Doob h-transform: the conjugated generator `L^h = H^{-1}(L - alpha I)H`,
//! its killing rates, and the kernel `Q_t` that certifies proper association
//! with the base semigroup.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::semigroup::{expm_uniformized, ExcessiveFunction, SemigroupEngine, SemigroupError};
use crate::STRUCT_TOL;

/// Entries of h below this are treated as degenerate and rejected.
const H_FLOOR: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum HTransformError {
    #[error("h[{state}] = {value} is not strictly positive")]
    NotStrictlyPositive { state: usize, value: f64 },
    #[error("h is not {alpha}-excessive: slack[{state}] = {slack}")]
    NotExcessive {
        state: usize,
        alpha: f64,
        slack: f64,
    },
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
}

/// A strictly positive alpha-excessive h together with the sub-Markovian
/// generator it induces. Immutable after construction.
#[derive(Debug, Clone)]
pub struct HTransform {
    h: DVector<f64>,
    alpha: f64,
    lh: DMatrix<f64>,
    killing_rates: DVector<f64>,
}

impl HTransform {
    /// Conjugates the model generator by `diag(h)` after validating strict
    /// positivity and the excessivity slack.
    pub fn build(engine: &SemigroupEngine, h: &ExcessiveFunction) -> Result<Self, HTransformError> {
        if let Some((state, &value)) =
            h.h.iter()
                .enumerate()
                .find(|(_, &v)| v <= H_FLOOR || !v.is_finite())
        {
            return Err(HTransformError::NotStrictlyPositive { state, value });
        }
        if let Some((state, &slack)) = h.slack.iter().enumerate().find(|(_, &s)| s < -STRUCT_TOL) {
            return Err(HTransformError::NotExcessive {
                state,
                alpha: h.alpha,
                slack,
            });
        }
        let n = h.h.len();
        let l = engine.bundle().generator().matrix();
        let mut lh = DMatrix::zeros(n, n);
        for x in 0..n {
            for y in 0..n {
                let shift = if x == y { h.alpha } else { 0.0 };
                lh[(x, y)] = (l[(x, y)] - shift) * h.h[y] / h.h[x];
            }
        }
        // killing = -(row sum) = slack/h, nonnegative exactly when h is
        // excessive; clamp the tolerance band to zero for the sampler.
        let killing_rates = DVector::from_fn(n, |x, _| (-lh.row(x).sum()).max(0.0));
        Ok(Self {
            h: h.h.clone(),
            alpha: h.alpha,
            lh,
            killing_rates,
        })
    }

    /// Convenience: h given by resolvent data, `h = G_alpha g`.
    pub fn from_resolvent_data(
        engine: &SemigroupEngine,
        g: &DVector<f64>,
    ) -> Result<Self, HTransformError> {
        let alpha = engine.bundle().alpha();
        let h = engine.make_excessive(g, alpha)?;
        Self::build(engine, &h)
    }

    /// Convenience: directly supplied h, validated against the model's alpha.
    pub fn from_vector(engine: &SemigroupEngine, h: DVector<f64>) -> Result<Self, HTransformError> {
        let alpha = engine.bundle().alpha();
        let h = engine.excessive_from_vector(h, alpha);
        Self::build(engine, &h)
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The sub-Markovian generator `L^h`.
    pub fn generator(&self) -> &DMatrix<f64> {
        &self.lh
    }

    pub fn killing_rates(&self) -> &DVector<f64> {
        &self.killing_rates
    }

    pub fn n(&self) -> usize {
        self.h.len()
    }

    /// Semigroup of the killed chain, `exp(t L^h)`. The tight truncation
    /// matters because `q_kernel` scales the result by `e^{alpha t} h_x/h_y`,
    /// which amplifies any series tail.
    pub fn transition(&self, t: f64) -> Result<DMatrix<f64>, SemigroupError> {
        expm_uniformized(&self.lh, t, 1e-15, 1e5)
    }

    /// The kernel `Q_t = H e^{alpha t} exp(t L^h) H^{-1}`; equal to the base
    /// `T_t` for every valid h, which is the proper-association certificate.
    pub fn q_kernel(&self, t: f64) -> Result<DMatrix<f64>, SemigroupError> {
        let n = self.n();
        let mut q = self.transition(t)?;
        let scale = (self.alpha * t).exp();
        for x in 0..n {
            for y in 0..n {
                q[(x, y)] *= scale * self.h[x] / self.h[y];
            }
        }
        Ok(q)
    }

    /// Recovers the base generator, `L = H L^h H^{-1} + alpha I`.
    pub fn inverse_transform(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |x, y| {
            let shift = if x == y { self.alpha } else { 0.0 };
            self.lh[(x, y)] * self.h[x] / self.h[y] + shift
        })
    }
}

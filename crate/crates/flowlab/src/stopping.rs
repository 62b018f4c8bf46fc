//! Stopping-time calculus on sampled paths, expanded flows at stopping
//! times, the exact first-passage (Dirichlet) oracle, and the strong Markov
//! certificate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::htransform::HTransform;
use crate::pathsim::{mc_run, sample_path, Contribution, HitOutcome, McEstimate, PathSample};
use crate::semigroup::{SemigroupEngine, SemigroupError};
use crate::STRUCT_TOL;

#[derive(Debug, Error)]
pub enum StoppingError {
    #[error("the value exceeds the simulated horizon {horizon}")]
    Censored { horizon: f64 },
    #[error("target set must be a nonempty set of valid states")]
    BadTargetSet,
    #[error(
        "first-passage system is not solvable: interior spectral bound {bound} is not negative"
    )]
    NotSolvable { bound: f64 },
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
}

/// Stopping-time specification, evaluated recursively on sampled paths.
#[derive(Debug, Clone)]
pub enum StoppingKind {
    Constant(f64),
    /// First time in `(0, inf)` the chain sits in the set.
    Hitting(Vec<usize>),
    /// First time in `[0, inf)` the chain sits in the set.
    Entrance(Vec<usize>),
    Min(Box<StoppingTime>, Box<StoppingTime>),
    /// `sigma + tau o theta_sigma` (the lifetime cut is applied by the
    /// `zeta_truncate` flag of the enclosing spec).
    ShiftedSum(Box<StoppingTime>, Box<StoppingTime>),
}

#[derive(Debug, Clone)]
pub struct StoppingTime {
    pub kind: StoppingKind,
    /// Map the raw value v to v on {v < zeta} and +inf on {v >= zeta}.
    pub zeta_truncate: bool,
}

impl StoppingTime {
    pub fn constant(t: f64) -> Self {
        Self {
            kind: StoppingKind::Constant(t),
            zeta_truncate: false,
        }
    }

    pub fn hitting(states: Vec<usize>) -> Self {
        Self {
            kind: StoppingKind::Hitting(states),
            zeta_truncate: false,
        }
    }

    pub fn entrance(states: Vec<usize>) -> Self {
        Self {
            kind: StoppingKind::Entrance(states),
            zeta_truncate: false,
        }
    }

    pub fn shifted_sum(sigma: StoppingTime, tau: StoppingTime) -> Self {
        Self {
            kind: StoppingKind::ShiftedSum(Box::new(sigma), Box::new(tau)),
            zeta_truncate: true,
        }
    }

    /// A deterministic upper bound for the realized value, when one exists;
    /// lets fixed-time queries run with the tight horizon.
    pub fn deterministic_bound(&self) -> Option<f64> {
        match &self.kind {
            StoppingKind::Constant(t) => Some(*t),
            StoppingKind::Hitting(_) | StoppingKind::Entrance(_) => None,
            StoppingKind::Min(a, b) => match (a.deterministic_bound(), b.deterministic_bound()) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (Some(x), None) | (None, Some(x)) => Some(x),
                (None, None) => None,
            },
            StoppingKind::ShiftedSum(a, b) => {
                Some(a.deterministic_bound()? + b.deterministic_bound()?)
            }
        }
    }

    /// Hitting/entrance target sets appearing anywhere in the spec.
    pub fn target_sets(&self) -> Vec<&[usize]> {
        match &self.kind {
            StoppingKind::Constant(_) => vec![],
            StoppingKind::Hitting(b) | StoppingKind::Entrance(b) => vec![b.as_slice()],
            StoppingKind::Min(a, b) | StoppingKind::ShiftedSum(a, b) => {
                let mut sets = a.target_sets();
                sets.extend(b.target_sets());
                sets
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopValue {
    Finite(f64),
    Infinite,
}

/// Evaluates the stopping time on a recorded path. `Finite(v)` always has
/// `v <= horizon`; values that cannot be resolved inside the window come
/// back as `Censored`.
pub fn evaluate(spec: &StoppingTime, path: &PathSample) -> Result<StopValue, StoppingError> {
    let raw = match &spec.kind {
        StoppingKind::Constant(t) => {
            if *t > path.horizon() {
                return Err(StoppingError::Censored {
                    horizon: path.horizon(),
                });
            }
            StopValue::Finite(*t)
        }
        StoppingKind::Hitting(b) => hit_to_value(path.hitting_time(b), path.horizon())?,
        StoppingKind::Entrance(b) => hit_to_value(path.entrance_time(b), path.horizon())?,
        StoppingKind::Min(a, b) => {
            let va = evaluate(a, path);
            let vb = evaluate(b, path);
            match (va, vb) {
                (Ok(StopValue::Finite(x)), Ok(StopValue::Finite(y))) => StopValue::Finite(x.min(y)),
                // a censored branch is known to lie beyond the horizon, so a
                // resolved finite branch wins the minimum
                (Ok(StopValue::Finite(x)), _) | (_, Ok(StopValue::Finite(x))) => {
                    StopValue::Finite(x)
                }
                (Ok(StopValue::Infinite), Ok(StopValue::Infinite)) => StopValue::Infinite,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        StoppingKind::ShiftedSum(sigma, tau) => match evaluate(sigma, path)? {
            StopValue::Infinite => StopValue::Infinite,
            StopValue::Finite(s) => {
                let shifted = path.shift(s);
                match evaluate(tau, &shifted)? {
                    StopValue::Infinite => StopValue::Infinite,
                    StopValue::Finite(u) => StopValue::Finite(s + u),
                }
            }
        },
    };
    if spec.zeta_truncate {
        if let StopValue::Finite(v) = raw {
            if !path.alive_at(v) {
                return Ok(StopValue::Infinite);
            }
        }
    }
    Ok(raw)
}

fn hit_to_value(outcome: HitOutcome, horizon: f64) -> Result<StopValue, StoppingError> {
    match outcome {
        HitOutcome::Hit(t) => Ok(StopValue::Finite(t)),
        HitOutcome::NeverByDeath => Ok(StopValue::Infinite),
        HitOutcome::OpenAtHorizon => Err(StoppingError::Censored { horizon }),
    }
}

/// Expanded-flow Monte Carlo result.
#[derive(Debug, Clone)]
pub struct ExpandedFlowEstimate {
    pub estimate: McEstimate,
    pub censored_fraction: f64,
    /// Set when some hitting set in the spec fails the Dirichlet
    /// solvability check: expanded mass may be infinite.
    pub heavy_tail_warning: bool,
}

/// Core weighted estimator: mean of
/// `h(x) e^{alpha sigma} Y(path, sigma) / h(X_sigma)` over `{sigma < zeta}`.
/// Censored paths contribute zero and are counted.
#[allow(clippy::too_many_arguments)]
pub fn weighted_stop_mc<Y>(
    ht: &HTransform,
    x0: usize,
    spec: &StoppingTime,
    y: Y,
    n_paths: u64,
    seed: u64,
    stream_base: u64,
    horizon: f64,
) -> ExpandedFlowEstimate
where
    Y: Fn(&PathSample, f64) -> f64 + Sync,
{
    let (estimate, censored) = mc_run(n_paths, seed, stream_base, |rng, _| {
        let path = sample_path(ht, x0, horizon, rng);
        match evaluate(spec, &path) {
            Err(StoppingError::Censored { .. }) => Contribution {
                value: 0.0,
                censored: true,
            },
            Err(_) | Ok(StopValue::Infinite) => Contribution {
                value: 0.0,
                censored: false,
            },
            Ok(StopValue::Finite(sigma)) => {
                let value = match path.state_at(sigma) {
                    Ok(Some(state)) => {
                        ht.h()[x0] * (ht.alpha() * sigma).exp() / ht.h()[state] * y(&path, sigma)
                    }
                    _ => 0.0, // sigma >= zeta: the flow puts no mass here
                };
                Contribution {
                    value,
                    censored: false,
                }
            }
        }
    });
    ExpandedFlowEstimate {
        estimate,
        censored_fraction: censored as f64 / n_paths as f64,
        heavy_tail_warning: false,
    }
}

/// Expanded flow `Q-bar_{x,sigma}` of a bounded path functional Y.
#[allow(clippy::too_many_arguments)]
pub fn expanded_flow_mc<Y>(
    engine: &SemigroupEngine,
    ht: &HTransform,
    x0: usize,
    spec: &StoppingTime,
    y: Y,
    n_paths: u64,
    seed: u64,
    stream_base: u64,
    fallback_horizon: f64,
) -> ExpandedFlowEstimate
where
    Y: Fn(&PathSample, f64) -> f64 + Sync,
{
    let horizon = spec.deterministic_bound().unwrap_or(fallback_horizon);
    let mut result = weighted_stop_mc(ht, x0, spec, y, n_paths, seed, stream_base, horizon);
    result.heavy_tail_warning = spec
        .target_sets()
        .iter()
        .any(|b| !first_passage_solvable(engine, b));
    result
}

fn interior_and_submatrix(
    engine: &SemigroupEngine,
    b: &[usize],
) -> Result<(Vec<usize>, DMatrix<f64>), StoppingError> {
    let n = engine.n();
    if b.is_empty() || b.iter().any(|&s| s >= n) {
        return Err(StoppingError::BadTargetSet);
    }
    let interior: Vec<usize> = (0..n).filter(|s| !b.contains(s)).collect();
    let l = engine.bundle().generator().matrix();
    let k = interior.len();
    let sub = DMatrix::from_fn(k, k, |i, j| l[(interior[i], interior[j])]);
    Ok((interior, sub))
}

/// True when the interior part of the generator is strictly stable, so the
/// first-passage system has a unique nonnegative solution (and the expanded
/// flow at the hitting time has finite mass).
pub fn first_passage_solvable(engine: &SemigroupEngine, b: &[usize]) -> bool {
    match interior_and_submatrix(engine, b) {
        Ok((interior, sub)) => {
            interior.is_empty()
                || sub
                    .complex_eigenvalues()
                    .iter()
                    .map(|z| z.re)
                    .fold(f64::NEG_INFINITY, f64::max)
                    < -STRUCT_TOL
        }
        Err(_) => false,
    }
}

/// Exact value of the expanded flow `Q-bar_{x, sigma_B}[f(X_{sigma_B})]` for
/// every start x: solves `(Lw)|_{B^c} = 0, w|_B = f`. The h-transform
/// conjugation cancels, so the answer carries no reference to h.
pub fn first_passage_exact(
    engine: &SemigroupEngine,
    b: &[usize],
    f_on_b: &DVector<f64>,
) -> Result<DVector<f64>, StoppingError> {
    let (interior, sub) = interior_and_submatrix(engine, b)?;
    if f_on_b.len() != b.len() {
        return Err(StoppingError::BadTargetSet);
    }
    let n = engine.n();
    let mut w = DVector::zeros(n);
    for (i, &s) in b.iter().enumerate() {
        w[s] = f_on_b[i];
    }
    if interior.is_empty() {
        return Ok(w);
    }
    let bound = sub
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if bound >= -STRUCT_TOL {
        return Err(StoppingError::NotSolvable { bound });
    }
    let l = engine.bundle().generator().matrix();
    let rhs = DVector::from_fn(interior.len(), |i, _| {
        -b.iter()
            .enumerate()
            .map(|(j, &s)| l[(interior[i], s)] * f_on_b[j])
            .sum::<f64>()
    });
    let sol = sub
        .lu()
        .solve(&rhs)
        .ok_or(StoppingError::NotSolvable { bound })?;
    for (i, &s) in interior.iter().enumerate() {
        w[s] = sol[i];
    }
    Ok(w)
}

/// Max residual of `(Lw)_x` over the interior.
pub fn dirichlet_residual(engine: &SemigroupEngine, b: &[usize], w: &DVector<f64>) -> f64 {
    let lw = engine.bundle().generator().matrix() * w;
    (0..engine.n())
        .filter(|s| !b.contains(s))
        .map(|s| lw[s].abs())
        .fold(0.0, f64::max)
}

/// Inner stopping time of the strong Markov certificate; restricted to the
/// forms whose inner flow has an exact oracle.
#[derive(Debug, Clone)]
pub enum InnerTau {
    Constant(f64),
    Hitting(Vec<usize>),
}

impl InnerTau {
    fn as_spec(&self) -> StoppingTime {
        match self {
            InnerTau::Constant(u) => StoppingTime::constant(*u),
            InnerTau::Hitting(b) => StoppingTime::hitting(b.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StrongMarkovReport {
    pub lhs: McEstimate,
    pub rhs: McEstimate,
    pub z: f64,
    pub lhs_censored: f64,
    pub rhs_censored: f64,
    /// Exact inner flow values `y -> Q-bar_{y,tau}[Y; tau < zeta]`.
    pub inner_values: DVector<f64>,
    pub heavy_tail_warning: bool,
}

/// Strong Markov certificate: restarting the flow at `sigma` and running it
/// to `tau` matches the flow at the composed time `gamma`. The left side is
/// simulated at gamma; the right side is simulated at sigma with the exact
/// inner values plugged in at `X_sigma`; the two independent estimates must
/// agree within the z tolerance.
#[allow(clippy::too_many_arguments)]
pub fn strong_markov_check<G>(
    engine: &SemigroupEngine,
    ht: &HTransform,
    x0: usize,
    sigma: &StoppingTime,
    tau: &InnerTau,
    gamma_weight: G,
    y: &DVector<f64>,
    n_paths: u64,
    seed: u64,
    stream_base: u64,
    fallback_horizon: f64,
) -> Result<StrongMarkovReport, StoppingError>
where
    G: Fn(&PathSample, f64) -> f64 + Sync,
{
    let inner_values = match tau {
        InnerTau::Constant(u) => engine.apply_transition(*u, y)?,
        InnerTau::Hitting(b) => {
            let f_on_b = DVector::from_fn(b.len(), |i, _| y[b[i]]);
            first_passage_exact(engine, b, &f_on_b)?
        }
    };

    let composed = StoppingTime::shifted_sum(sigma.clone(), tau.as_spec());
    let lhs = expanded_flow_mc(
        engine,
        ht,
        x0,
        &composed,
        |path: &PathSample, gamma: f64| {
            let gate = match evaluate(sigma, path) {
                Ok(StopValue::Finite(s)) => gamma_weight(path, s),
                _ => 0.0,
            };
            match path.state_at(gamma) {
                Ok(Some(state)) => gate * y[state],
                _ => 0.0,
            }
        },
        n_paths,
        seed,
        stream_base,
        fallback_horizon,
    );

    let rhs = expanded_flow_mc(
        engine,
        ht,
        x0,
        sigma,
        |path: &PathSample, s: f64| match path.state_at(s) {
            Ok(Some(state)) => gamma_weight(path, s) * inner_values[state],
            _ => 0.0,
        },
        n_paths,
        seed,
        stream_base + (1 << 20),
        fallback_horizon,
    );

    let z = lhs.estimate.z_against(&rhs.estimate);
    Ok(StrongMarkovReport {
        lhs: lhs.estimate,
        rhs: rhs.estimate,
        z,
        lhs_censored: lhs.censored_fraction,
        rhs_censored: rhs.censored_fraction,
        inner_values,
        heavy_tail_warning: lhs.heavy_tail_warning || rhs.heavy_tail_warning,
    })
}

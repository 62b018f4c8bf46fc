//! Distribution flows: exact kernel-product evaluation, importance-weighted
//! Monte Carlo, and the certificates tying the two together (Markov identity,
//! mass non-consistency, independence from the choice of h).

use nalgebra::DVector;
use thiserror::Error;

use crate::htransform::HTransform;
use crate::pathsim::{McEstimate, PathSample};
use crate::semigroup::{SemigroupEngine, SemigroupError};
use crate::stopping::{weighted_stop_mc, StoppingTime};

/// Hard cap on dense cylinder tables (n_states ^ n_times entries).
const MAX_TABLE: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("cylinder times must be strictly increasing and nonnegative")]
    BadTimes,
    #[error("functional shape mismatch: {0}")]
    BadFunctional(String),
    #[error("initial distribution must be a nonnegative vector of length {0}")]
    BadInitial(usize),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
}

/// A function on `E^k`, either factorized per coordinate or a dense table
/// in row-major coordinate order.
#[derive(Debug, Clone)]
pub enum Functional {
    Product(Vec<DVector<f64>>),
    Table(Vec<f64>),
}

/// `f(X_{t_1}, ..., X_{t_k})` for a strictly increasing time grid; the flow
/// time is the last grid point. Functions vanish at the cemetery by
/// convention, so the functional itself is only ever evaluated on live
/// states.
#[derive(Debug, Clone)]
pub struct CylinderFunctional {
    times: Vec<f64>,
    f: Functional,
    n_states: usize,
}

impl CylinderFunctional {
    pub fn new(times: Vec<f64>, f: Functional, n_states: usize) -> Result<Self, FlowError> {
        if times.is_empty() || times[0] < 0.0 || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FlowError::BadTimes);
        }
        match &f {
            Functional::Product(factors) => {
                if factors.len() != times.len() {
                    return Err(FlowError::BadFunctional(format!(
                        "{} factors for {} times",
                        factors.len(),
                        times.len()
                    )));
                }
                if factors.iter().any(|v| v.len() != n_states) {
                    return Err(FlowError::BadFunctional("factor length".into()));
                }
            }
            Functional::Table(values) => {
                let expected = n_states
                    .checked_pow(times.len() as u32)
                    .filter(|&e| e <= MAX_TABLE)
                    .ok_or_else(|| FlowError::BadFunctional("table too large".into()))?;
                if values.len() != expected {
                    return Err(FlowError::BadFunctional(format!(
                        "table has {} entries, expected {}",
                        values.len(),
                        expected
                    )));
                }
            }
        }
        Ok(Self { times, f, n_states })
    }

    /// The single-time functional `f(X_t)`.
    pub fn at_time(t: f64, f: DVector<f64>) -> Result<Self, FlowError> {
        let n = f.len();
        Self::new(vec![t], Functional::Product(vec![f]), n)
    }

    /// `Omega` as a cylinder: the constant 1 observed at time t.
    pub fn ones_at(t: f64, n_states: usize) -> Self {
        Self::at_time(t, DVector::from_element(n_states, 1.0)).expect("valid")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn flow_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn eval(&self, states: &[usize]) -> f64 {
        debug_assert_eq!(states.len(), self.times.len());
        match &self.f {
            Functional::Product(factors) => {
                factors.iter().zip(states).map(|(f, &x)| f[x]).product()
            }
            Functional::Table(values) => {
                let idx = states
                    .iter()
                    .fold(0usize, |acc, &x| acc * self.n_states + x);
                values[idx]
            }
        }
    }

    /// Evaluate on a path; zero as soon as any observation time is at the
    /// cemetery or beyond the recorded horizon.
    pub fn eval_on_path(&self, path: &PathSample) -> f64 {
        let mut states = Vec::with_capacity(self.times.len());
        for &t in &self.times {
            match path.state_at(t) {
                Ok(Some(x)) => states.push(x),
                _ => return 0.0,
            }
        }
        self.eval(&states)
    }

    /// Appends an observation `factor(X_t)` at a time strictly after the
    /// current flow time.
    pub fn append_time(&self, t: f64, factor: &DVector<f64>) -> Result<Self, FlowError> {
        let mut times = self.times.clone();
        times.push(t);
        let f = match &self.f {
            Functional::Product(fs) => {
                let mut fs = fs.clone();
                fs.push(factor.clone());
                Functional::Product(fs)
            }
            Functional::Table(values) => {
                let mut out = Vec::with_capacity(values.len() * self.n_states);
                for &v in values {
                    for y in 0..self.n_states {
                        out.push(v * factor[y]);
                    }
                }
                Functional::Table(out)
            }
        };
        Self::new(times, f, self.n_states)
    }

    /// Multiplies the observation at the flow time by `factor`.
    pub fn scale_last(&self, factor: &DVector<f64>) -> Self {
        let f = match &self.f {
            Functional::Product(fs) => {
                let mut fs = fs.clone();
                let last = fs.last_mut().unwrap();
                *last = last.component_mul(factor);
                Functional::Product(fs)
            }
            Functional::Table(values) => {
                let n = self.n_states;
                Functional::Table(
                    values
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * factor[i % n])
                        .collect(),
                )
            }
        };
        Self {
            times: self.times.clone(),
            f,
            n_states: self.n_states,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Initial {
    Point(usize),
    /// Sub-probability weights over the states.
    Distribution(DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct FlowQuery {
    pub initial: Initial,
    pub functional: CylinderFunctional,
}

impl FlowQuery {
    pub fn point(x: usize, functional: CylinderFunctional) -> Self {
        Self {
            initial: Initial::Point(x),
            functional,
        }
    }
}

/// Backward kernel contraction: the vector
/// `x -> Q-bar_{x,t}[f(X_{t_1},...,X_{t_k})]`.
pub fn flow_exact_vector(
    engine: &SemigroupEngine,
    functional: &CylinderFunctional,
) -> Result<DVector<f64>, FlowError> {
    let n = engine.n();
    let times = functional.times();
    match &functional.f {
        Functional::Product(factors) => {
            let k = times.len();
            let mut v = factors[k - 1].clone();
            for i in (0..k - 1).rev() {
                let dt = times[i + 1] - times[i];
                v = factors[i].component_mul(&engine.apply_transition(dt, &v)?);
            }
            Ok(engine.apply_transition(times[0], &v)?)
        }
        Functional::Table(values) => {
            // contract the last coordinate repeatedly
            let k = times.len();
            let mut table = values.clone();
            for i in (1..k).rev() {
                let dt = times[i] - times[i - 1];
                let tt = engine.transition(dt)?;
                let rows = table.len() / n;
                let mut next = vec![0.0; rows];
                for (r, slot) in next.iter_mut().enumerate() {
                    // rows of `table` are indexed by (prefix, x_{i-1});
                    // contract x_i against the kernel row of x_{i-1}
                    let x_prev = r % n;
                    *slot = (0..n).map(|y| tt[(x_prev, y)] * table[r * n + y]).sum();
                }
                table = next;
            }
            let v = DVector::from_vec(table);
            Ok(engine.apply_transition(times[0], &v)?)
        }
    }
}

/// Exact flow value for a query, as a nested kernel product.
pub fn flow_exact(engine: &SemigroupEngine, query: &FlowQuery) -> Result<f64, FlowError> {
    let v = flow_exact_vector(engine, &query.functional)?;
    match &query.initial {
        Initial::Point(x) => Ok(v[*x]),
        Initial::Distribution(mu) => {
            if mu.len() != engine.n() || mu.iter().any(|&w| w < 0.0) {
                return Err(FlowError::BadInitial(engine.n()));
            }
            Ok(mu.dot(&v))
        }
    }
}

/// Monte Carlo estimator of the same flow value: mean of
/// `weight(t) * f(X_{t_1},...,X_{t_k})` over killed-chain paths.
pub fn flow_mc(
    ht: &HTransform,
    query: &FlowQuery,
    n_paths: u64,
    seed: u64,
    stream_base: u64,
) -> McEstimate {
    let t = query.functional.flow_time();
    let spec = StoppingTime::constant(t);
    let functional = &query.functional;
    match &query.initial {
        Initial::Point(x) => {
            weighted_stop_mc(
                ht,
                *x,
                &spec,
                |path: &PathSample, _sigma: f64| functional.eval_on_path(path),
                n_paths,
                seed,
                stream_base,
                t,
            )
            .estimate
        }
        Initial::Distribution(mu) => {
            // one extra uniform selects the start; the estimator is scaled
            // by the (sub-probability) total mass of mu
            let total: f64 = mu.iter().sum();
            let cumulative: Vec<f64> = mu
                .iter()
                .scan(0.0, |acc, &w| {
                    *acc += w;
                    Some(*acc)
                })
                .collect();
            let (est, _) = crate::pathsim::mc_run(n_paths, seed, stream_base, |rng, _| {
                let u: f64 = rand::Rng::random::<f64>(rng);
                let pick = u * total;
                let x = cumulative.partition_point(|&c| c <= pick).min(mu.len() - 1);
                let path = crate::pathsim::sample_path(ht, x, t, rng);
                let w = crate::pathsim::weight(ht, &path, t);
                crate::pathsim::Contribution {
                    value: total * w * functional.eval_on_path(&path),
                    censored: false,
                }
            });
            est
        }
    }
}

/// `(exp(tL) 1)(x)`: the total flow mass out of x at time t; values above 1
/// witness mass creation.
pub fn total_mass(engine: &SemigroupEngine, x: usize, t: f64) -> Result<f64, FlowError> {
    let ones = DVector::from_element(engine.n(), 1.0);
    Ok(engine.apply_transition(t, &ones)?[x])
}

/// Max-over-start-states residual of the kernel-product Markov identity
/// at the split `t = s + u`: observing `gamma` up to s and `f` at `s+u`
/// must equal observing `gamma` up to s weighted by `(T_u f)(X_s)`.
pub fn markov_check(
    engine: &SemigroupEngine,
    s: f64,
    u: f64,
    gamma: &CylinderFunctional,
    f: &DVector<f64>,
) -> Result<f64, FlowError> {
    let last = gamma.flow_time();
    if last > s {
        return Err(FlowError::BadTimes);
    }
    let lhs_fun = gamma.append_time(s + u, f)?;
    let qf = engine.apply_transition(u, f)?;
    let rhs_fun = if last == s {
        gamma.scale_last(&qf)
    } else {
        gamma.append_time(s, &qf)?
    };
    let lhs = flow_exact_vector(engine, &lhs_fun)?;
    let rhs = flow_exact_vector(engine, &rhs_fun)?;
    Ok((lhs - rhs).amax())
}

#[derive(Debug, Clone)]
pub struct ConsistencyWitness {
    pub s: f64,
    pub t: f64,
    /// States of the event `{X_s in A}`.
    pub event_states: Vec<usize>,
    /// `Q-bar_{x,t}(Gamma; s < zeta)`.
    pub lhs: f64,
    /// `Q-bar_{x,s}(Gamma)`.
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub enum ConsistencyVerdict {
    Witness(ConsistencyWitness),
    NoViolation,
}

/// Searches the grid s, t in {0, 0.1, ..., 2.0} for an event whose flow mass
/// strictly grows between the two observation times; the event is
/// `{X_s in A}` with `A` the states that create mass over the gap `t - s`.
/// The scan fixes the earliest s and prefers the widest gap, so the reported
/// witness is the longest-gap violation from the start of the grid.
/// Sub-Markovian generators admit no such event.
pub fn consistency_certificate(
    engine: &SemigroupEngine,
    x: usize,
) -> Result<ConsistencyVerdict, FlowError> {
    const GRID_STEPS: i64 = 20;
    const TOL: f64 = 1e-6;
    let n = engine.n();
    let ones = DVector::from_element(n, 1.0);
    for si in 0..GRID_STEPS {
        let s = si as f64 / 10.0;
        for ti in (si + 1..=GRID_STEPS).rev() {
            let t = ti as f64 / 10.0;
            let mass = engine.apply_transition(t - s, &ones)?;
            let event_states: Vec<usize> = (0..n).filter(|&y| mass[y] > 1.0 + TOL).collect();
            if event_states.is_empty() {
                continue;
            }
            let indicator =
                DVector::from_fn(n, |y, _| if event_states.contains(&y) { 1.0 } else { 0.0 });
            let rhs = if s == 0.0 {
                indicator[x]
            } else {
                flow_exact(
                    engine,
                    &FlowQuery::point(x, CylinderFunctional::at_time(s, indicator.clone())?),
                )?
            };
            let lhs_fun = if s == 0.0 {
                CylinderFunctional::new(
                    vec![0.0, t],
                    Functional::Product(vec![indicator.clone(), ones.clone()]),
                    n,
                )?
            } else {
                CylinderFunctional::at_time(s, indicator.clone())?.append_time(t, &ones)?
            };
            let lhs = flow_exact(engine, &FlowQuery::point(x, lhs_fun))?;
            if lhs > rhs + TOL * rhs.abs().max(1.0) {
                return Ok(ConsistencyVerdict::Witness(ConsistencyWitness {
                    s,
                    t,
                    event_states,
                    lhs,
                    rhs,
                }));
            }
        }
    }
    Ok(ConsistencyVerdict::NoViolation)
}

#[derive(Debug, Clone)]
pub struct HIndependenceReport {
    /// Largest entrywise gap between the Q_t kernels of any two h, over the
    /// time grid {0.1, 0.5, 1, 2, 5}.
    pub max_kernel_gap: f64,
    /// Per query: the MC estimate under each h.
    pub estimates: Vec<Vec<McEstimate>>,
    /// Largest pairwise z score over all queries.
    pub max_z: f64,
}

/// Certifies that the flow does not depend on which excessive function built
/// the simulated chain: exactly through the Q_t kernels, statistically
/// through pairwise z scores of the per-h estimators.
pub fn h_independence_check(
    engine: &SemigroupEngine,
    hts: &[HTransform],
    queries: &[FlowQuery],
    n_paths: u64,
    seed: u64,
) -> Result<HIndependenceReport, FlowError> {
    let mut max_kernel_gap = 0.0_f64;
    for t in [0.1, 0.5, 1.0, 2.0, 5.0] {
        let kernels: Vec<_> = hts
            .iter()
            .map(|ht| ht.q_kernel(t))
            .collect::<Result<_, _>>()?;
        for i in 0..kernels.len() {
            for j in i + 1..kernels.len() {
                max_kernel_gap = max_kernel_gap.max((&kernels[i] - &kernels[j]).amax());
            }
        }
        let base = engine.transition(t)?;
        for k in &kernels {
            max_kernel_gap = max_kernel_gap.max((k - base.as_ref()).amax());
        }
    }

    let mut estimates = Vec::with_capacity(queries.len());
    let mut max_z = 0.0_f64;
    for (qi, query) in queries.iter().enumerate() {
        let per_h: Vec<McEstimate> = hts
            .iter()
            .enumerate()
            .map(|(hi, ht)| {
                let stream_base = ((qi as u64) << 40) | ((hi as u64) << 32);
                flow_mc(ht, query, n_paths, seed, stream_base)
            })
            .collect();
        for i in 0..per_h.len() {
            for j in i + 1..per_h.len() {
                max_z = max_z.max(per_h[i].z_against(&per_h[j]));
            }
        }
        estimates.push(per_h);
    }
    Ok(HIndependenceReport {
        max_kernel_gap,
        estimates,
        max_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBundle;
    use approx::assert_abs_diff_eq;

    fn m2prime() -> SemigroupEngine {
        SemigroupEngine::new(
            ModelBundle::from_rows(&[-2.0, 3.0, 0.5, -2.0], &[1.0, 1.0], 2.0).unwrap(),
        )
    }

    fn m3() -> SemigroupEngine {
        SemigroupEngine::new(
            ModelBundle::from_rows(&[-1.0, 1.0, 1.0, -1.0], &[1.0, 1.0], 1.0).unwrap(),
        )
    }

    fn m1() -> SemigroupEngine {
        SemigroupEngine::new(ModelBundle::from_rows(&[0.5], &[1.0], 2.0).unwrap())
    }

    #[test]
    fn flow_mass_values_frozen() {
        // frozen from the 2x2 eigendecomposition of the generator
        let eng = m2prime();
        let q = FlowQuery::point(0, CylinderFunctional::ones_at(0.5, 2));
        assert_abs_diff_eq!(
            flow_exact(&eng, &q).unwrap(),
            1.0259998318703847,
            epsilon = 1e-10
        );
        let q = FlowQuery::point(0, CylinderFunctional::ones_at(1.0, 2));
        assert_abs_diff_eq!(
            flow_exact(&eng, &q).unwrap(),
            0.7655736343591811,
            epsilon = 1e-10
        );
    }

    #[test]
    fn point_mass_at_zero_time() {
        let eng = m2prime();
        let delta = DVector::from_vec(vec![1.0, 0.0]);
        let q = FlowQuery::point(0, CylinderFunctional::at_time(0.0, delta).unwrap());
        assert_abs_diff_eq!(flow_exact(&eng, &q).unwrap(), 1.0);
    }

    #[test]
    fn single_time_flow_equals_transition_row() {
        let eng = m2prime();
        let f = DVector::from_vec(vec![0.4, 1.9]);
        for t in [0.2, 0.9, 1.7] {
            let q = FlowQuery::point(1, CylinderFunctional::at_time(t, f.clone()).unwrap());
            let direct = (eng.transition(t).unwrap().as_ref() * &f)[1];
            assert_abs_diff_eq!(flow_exact(&eng, &q).unwrap(), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn table_and_product_agree() {
        let eng = m2prime();
        let fa = DVector::from_vec(vec![0.3, 1.1]);
        let fb = DVector::from_vec(vec![2.0, 0.7]);
        let product = CylinderFunctional::new(
            vec![0.4, 1.0],
            Functional::Product(vec![fa.clone(), fb.clone()]),
            2,
        )
        .unwrap();
        let mut table = vec![0.0; 4];
        for x in 0..2 {
            for y in 0..2 {
                table[x * 2 + y] = fa[x] * fb[y];
            }
        }
        let dense = CylinderFunctional::new(vec![0.4, 1.0], Functional::Table(table), 2).unwrap();
        let a = flow_exact(&eng, &FlowQuery::point(0, product)).unwrap();
        let b = flow_exact(&eng, &FlowQuery::point(0, dense)).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-13);
    }

    #[test]
    fn three_time_table_contraction() {
        // dense-table contraction against brute-force path enumeration
        let eng = m2prime();
        let times = vec![0.3, 0.7, 1.2];
        let mut table = vec![0.0; 8];
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    table[(x * 2 + y) * 2 + z] =
                        0.5 + x as f64 - 0.3 * y as f64 + 2.0 * z as f64 * x as f64;
                }
            }
        }
        let dense =
            CylinderFunctional::new(times.clone(), Functional::Table(table.clone()), 2).unwrap();
        let value = flow_exact(&eng, &FlowQuery::point(0, dense.clone())).unwrap();

        let t1 = eng.transition(times[0]).unwrap();
        let t2 = eng.transition(times[1] - times[0]).unwrap();
        let t3 = eng.transition(times[2] - times[1]).unwrap();
        let mut brute = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    brute += t1[(0, x)] * t2[(x, y)] * t3[(y, z)] * table[(x * 2 + y) * 2 + z];
                }
            }
        }
        assert_abs_diff_eq!(value, brute, epsilon = 1e-12);

        // append_time and scale_last keep the same coordinate order
        let f = DVector::from_vec(vec![0.4, 1.6]);
        let appended = dense.append_time(2.0, &f).unwrap();
        let t4 = eng.transition(2.0 - times[2]).unwrap();
        let mut brute4 = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    for w in 0..2 {
                        brute4 += t1[(0, x)]
                            * t2[(x, y)]
                            * t3[(y, z)]
                            * t4[(z, w)]
                            * table[(x * 2 + y) * 2 + z]
                            * f[w];
                    }
                }
            }
        }
        assert_abs_diff_eq!(
            flow_exact(&eng, &FlowQuery::point(0, appended)).unwrap(),
            brute4,
            epsilon = 1e-12
        );

        let scaled = dense.scale_last(&f);
        let mut brute_scaled = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    brute_scaled +=
                        t1[(0, x)] * t2[(x, y)] * t3[(y, z)] * table[(x * 2 + y) * 2 + z] * f[z];
                }
            }
        }
        assert_abs_diff_eq!(
            flow_exact(&eng, &FlowQuery::point(0, scaled)).unwrap(),
            brute_scaled,
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_mass_values() {
        let eng = m2prime();
        assert_abs_diff_eq!(
            total_mass(&eng, 0, 0.5).unwrap(),
            1.0259998318703847,
            epsilon = 1e-10
        );
        let scalar = m1();
        assert_abs_diff_eq!(
            total_mass(&scalar, 0, 2.0).unwrap(),
            1.0f64.exp(),
            epsilon = 1e-10
        );
        let cons = m3();
        for t in [0.3, 1.0, 2.0] {
            assert_abs_diff_eq!(total_mass(&cons, 0, t).unwrap(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn markov_identity_basic_cases() {
        let eng = m2prime();
        // Gamma = Omega observed at s, f = 1: both sides are the total mass
        let gamma = CylinderFunctional::ones_at(0.5, 2);
        let f = DVector::from_element(2, 1.0);
        assert!(markov_check(&eng, 0.5, 0.5, &gamma, &f).unwrap() <= 1e-9);

        // Gamma = {X_{0.25} = 2}, f = delta_1
        let gamma = CylinderFunctional::at_time(0.25, DVector::from_vec(vec![0.0, 1.0])).unwrap();
        let f = DVector::from_vec(vec![1.0, 0.0]);
        assert!(markov_check(&eng, 0.5, 0.75, &gamma, &f).unwrap() <= 1e-9);

        // s = 0 with observation at 0
        let gamma = CylinderFunctional::ones_at(0.0, 2);
        assert!(markov_check(&eng, 0.0, 1.0, &gamma, &f).unwrap() <= 1e-9);
    }

    #[test]
    fn markov_identity_rejects_late_events() {
        let eng = m2prime();
        let gamma = CylinderFunctional::ones_at(1.0, 2);
        let f = DVector::from_element(2, 1.0);
        assert!(markov_check(&eng, 0.5, 0.5, &gamma, &f).is_err());
    }

    #[test]
    fn consistency_witness_m2prime() {
        let eng = m2prime();
        match consistency_certificate(&eng, 0).unwrap() {
            ConsistencyVerdict::Witness(w) => {
                assert_eq!(w.s, 0.0);
                assert_abs_diff_eq!(w.t, 0.5);
                assert_eq!(w.event_states, vec![0]);
                assert_abs_diff_eq!(w.lhs, 1.0259998318703847, epsilon = 1e-10);
                assert_abs_diff_eq!(w.rhs, 1.0);
            }
            ConsistencyVerdict::NoViolation => panic!("expected a witness"),
        }
    }

    #[test]
    fn consistency_witness_scalar() {
        // the widest-gap scan reports (s=0, t=2): lhs e^1 against rhs 1
        let eng = m1();
        match consistency_certificate(&eng, 0).unwrap() {
            ConsistencyVerdict::Witness(w) => {
                assert_eq!(w.s, 0.0);
                assert_abs_diff_eq!(w.t, 2.0);
                assert_abs_diff_eq!(w.lhs, 1.0f64.exp(), epsilon = 1e-10);
                assert!(w.lhs > w.rhs);
            }
            ConsistencyVerdict::NoViolation => panic!("expected a witness"),
        }
    }

    #[test]
    fn consistency_no_violation_when_conservative() {
        let eng = m3();
        assert!(matches!(
            consistency_certificate(&eng, 0).unwrap(),
            ConsistencyVerdict::NoViolation
        ));
    }

    #[test]
    fn sub_markov_flows_never_gain_mass() {
        let eng = m3();
        let f = DVector::from_element(2, 1.0);
        for si in 0..5 {
            let s = si as f64 / 4.0;
            for ui in 1..5 {
                let u = ui as f64 / 4.0;
                let gamma =
                    CylinderFunctional::at_time(s.max(0.01), DVector::from_vec(vec![1.0, 0.0]))
                        .unwrap();
                let lhs = flow_exact_vector(&eng, &gamma.append_time(s.max(0.01) + u, &f).unwrap())
                    .unwrap();
                let rhs = flow_exact_vector(&eng, &gamma).unwrap();
                for x in 0..2 {
                    assert!(lhs[x] <= rhs[x] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn mc_matches_exact_for_both_h() {
        let eng = m2prime();
        let hts = [
            HTransform::from_resolvent_data(&eng, &DVector::from_vec(vec![1.0, 1.0])).unwrap(),
            HTransform::from_vector(&eng, DVector::from_vec(vec![1.0, 1.0])).unwrap(),
        ];
        let q = FlowQuery::point(0, CylinderFunctional::ones_at(0.5, 2));
        let exact = flow_exact(&eng, &q).unwrap();
        for (i, ht) in hts.iter().enumerate() {
            let est = flow_mc(ht, &q, 100_000, 2024, (i as u64) << 32);
            assert!(
                (est.mean - exact).abs() <= 4.0 * est.std_error,
                "h {i}: {} vs {} (se {})",
                est.mean,
                exact,
                est.std_error
            );
        }
    }

    #[test]
    fn conservative_flow_is_plain_probability() {
        let eng = m3();
        let ht = HTransform::from_resolvent_data(&eng, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        // cylinder event {X_0.4 = 2, X_1 = 1}
        let fun = CylinderFunctional::new(
            vec![0.4, 1.0],
            Functional::Product(vec![
                DVector::from_vec(vec![0.0, 1.0]),
                DVector::from_vec(vec![1.0, 0.0]),
            ]),
            2,
        )
        .unwrap();
        let q = FlowQuery::point(0, fun);
        let exact = flow_exact(&eng, &q).unwrap();
        let est = flow_mc(&ht, &q, 100_000, 77, 0);
        assert!((est.mean - exact).abs() <= 4.0 * est.std_error);
    }

    #[test]
    fn distribution_initial_is_weighted_sum() {
        let eng = m2prime();
        let fun = CylinderFunctional::ones_at(0.5, 2);
        let mu = DVector::from_vec(vec![0.3, 0.5]);
        let exact = flow_exact(
            &eng,
            &FlowQuery {
                initial: Initial::Distribution(mu.clone()),
                functional: fun.clone(),
            },
        )
        .unwrap();
        let by_hand = 0.3 * flow_exact(&eng, &FlowQuery::point(0, fun.clone())).unwrap()
            + 0.5 * flow_exact(&eng, &FlowQuery::point(1, fun.clone())).unwrap();
        assert_abs_diff_eq!(exact, by_hand, epsilon = 1e-12);

        let ht = HTransform::from_resolvent_data(&eng, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let est = flow_mc(
            &ht,
            &FlowQuery {
                initial: Initial::Distribution(mu),
                functional: fun,
            },
            100_000,
            5,
            0,
        );
        assert!((est.mean - exact).abs() <= 4.0 * est.std_error);
    }

    #[test]
    fn h_independence_exact_and_mc() {
        let eng = m2prime();
        let hts = vec![
            HTransform::from_resolvent_data(&eng, &DVector::from_vec(vec![1.0, 1.0])).unwrap(),
            HTransform::from_vector(&eng, DVector::from_vec(vec![1.0, 1.0])).unwrap(),
        ];
        let queries = vec![FlowQuery::point(0, CylinderFunctional::ones_at(0.5, 2))];
        let report = h_independence_check(&eng, &hts, &queries, 50_000, 99).unwrap();
        assert!(report.max_kernel_gap <= 1e-10);
        assert!(report.max_z <= 4.0, "z = {}", report.max_z);
    }
}

//! Python bindings: a `Model` class for the exact linear-algebra side, a
//! `KilledChain` class for simulation and Monte Carlo flows, and module
//! functions wrapping the scenario runner.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use flowlab::flows::{
    consistency_certificate, flow_exact, flow_mc, ConsistencyVerdict, CylinderFunctional,
    FlowQuery, Functional,
};
use flowlab::htransform::HTransform;
use flowlab::model::ModelBundle;
use flowlab::pathsim::{sample_path, RngStream};
use flowlab::revuz::{
    optional_measure_exact, optional_measure_mc, revuz_limit_check, yosida_construction,
    OptionalWindow, PcafSpec, SmoothMeasure,
};
use flowlab::scenario::{self, RunOptions};
use flowlab::semigroup::SemigroupEngine;
use flowlab::stopping::{expanded_flow_mc, first_passage_exact, StoppingTime};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|x| (0..m.ncols()).map(|y| m[(x, y)]).collect())
        .collect()
}

fn vector(values: Vec<f64>, n: usize, what: &str) -> PyResult<DVector<f64>> {
    if values.len() != n {
        return Err(PyValueError::new_err(format!(
            "{what} must have {n} entries, got {}",
            values.len()
        )));
    }
    Ok(DVector::from_vec(values))
}

/// A validated finite-state model: Metzler generator, reference measure and
/// shift, with the exact semigroup/resolvent machinery behind it.
#[pyclass]
struct Model {
    engine: Arc<SemigroupEngine>,
}

#[pymethods]
impl Model {
    /// Model(l, m, alpha): l is the generator as a list of rows.
    #[new]
    fn new(l: Vec<Vec<f64>>, m: Vec<f64>, alpha: f64) -> PyResult<Self> {
        let n = m.len();
        let mut rows = Vec::with_capacity(n * n);
        if l.len() != n {
            return Err(PyValueError::new_err("l must have one row per state"));
        }
        for row in &l {
            if row.len() != n {
                return Err(PyValueError::new_err("l rows must have n entries"));
            }
            rows.extend_from_slice(row);
        }
        let bundle = ModelBundle::from_rows(&rows, &m, alpha).map_err(value_err)?;
        Ok(Self {
            engine: Arc::new(SemigroupEngine::new(bundle)),
        })
    }

    fn n(&self) -> usize {
        self.engine.n()
    }

    fn alpha(&self) -> f64 {
        self.engine.bundle().alpha()
    }

    fn spectral_bound(&self) -> f64 {
        self.engine.bundle().generator().spectral_bound()
    }

    fn alpha0(&self) -> f64 {
        self.engine.bundle().form().alpha0
    }

    fn continuity_constant(&self) -> f64 {
        self.engine.bundle().form().continuity_constant
    }

    fn row_sums(&self) -> Vec<f64> {
        self.engine
            .bundle()
            .generator()
            .row_sums()
            .iter()
            .copied()
            .collect()
    }

    /// exp(t L) as nested lists.
    fn transition(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(
            self.engine.transition(t).map_err(runtime_err)?.as_ref(),
        ))
    }

    /// (beta I - L)^{-1} as nested lists.
    fn resolvent(&self, beta: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(
            self.engine.resolvent(beta).map_err(value_err)?.as_ref(),
        ))
    }

    /// Total flow mass (exp(tL) 1)(x); values above 1 witness mass creation.
    fn total_mass(&self, x: usize, t: f64) -> PyResult<f64> {
        flowlab::flows::total_mass(&self.engine, x, t).map_err(runtime_err)
    }

    /// h = G_alpha g for strictly positive data g.
    fn make_excessive(&self, g: Vec<f64>) -> PyResult<Vec<f64>> {
        let g = vector(g, self.engine.n(), "g")?;
        let h = self
            .engine
            .make_excessive(&g, self.engine.bundle().alpha())
            .map_err(value_err)?;
        Ok(h.h.iter().copied().collect())
    }

    /// Killed chain of a directly supplied excessive h.
    fn killed_chain(&self, h: Vec<f64>) -> PyResult<KilledChain> {
        let h = vector(h, self.engine.n(), "h")?;
        let ht = HTransform::from_vector(&self.engine, h).map_err(value_err)?;
        Ok(KilledChain {
            engine: self.engine.clone(),
            ht,
        })
    }

    /// Killed chain of h = G_alpha g.
    fn killed_chain_from_resolvent(&self, g: Vec<f64>) -> PyResult<KilledChain> {
        let g = vector(g, self.engine.n(), "g")?;
        let ht = HTransform::from_resolvent_data(&self.engine, &g).map_err(value_err)?;
        Ok(KilledChain {
            engine: self.engine.clone(),
            ht,
        })
    }

    /// Exact flow value of a product cylinder functional: times strictly
    /// increasing, one factor (a vector over states) per time.
    fn flow_exact(&self, x: usize, times: Vec<f64>, factors: Vec<Vec<f64>>) -> PyResult<f64> {
        let n = self.engine.n();
        let factors = factors
            .into_iter()
            .map(|f| vector(f, n, "factor"))
            .collect::<PyResult<Vec<_>>>()?;
        let functional =
            CylinderFunctional::new(times, Functional::Product(factors), n).map_err(value_err)?;
        flow_exact(&self.engine, &FlowQuery::point(x, functional)).map_err(runtime_err)
    }

    /// Searches for a witness that the flow is not the restriction of a
    /// single measure; returns (s, t, event_states, lhs, rhs) or None.
    #[allow(clippy::type_complexity)]
    fn consistency_witness(&self, x: usize) -> PyResult<Option<(f64, f64, Vec<usize>, f64, f64)>> {
        match consistency_certificate(&self.engine, x).map_err(runtime_err)? {
            ConsistencyVerdict::Witness(w) => Ok(Some((w.s, w.t, w.event_states, w.lhs, w.rhs))),
            ConsistencyVerdict::NoViolation => Ok(None),
        }
    }

    /// Solves (Lw)|_{B^c} = 0, w|_B = f; the expanded flow of f at the
    /// hitting time of B, independent of any h.
    fn first_passage(&self, b: Vec<usize>, f: Vec<f64>) -> PyResult<Vec<f64>> {
        let f_b = DVector::from_vec(f);
        let w = first_passage_exact(&self.engine, &b, &f_b).map_err(value_err)?;
        Ok(w.iter().copied().collect())
    }

    /// Revuz convergence table: rows (beta, value, target, abs_error).
    fn revuz_table(
        &self,
        v: Vec<f64>,
        f: Vec<f64>,
        gamma: f64,
        betas: Vec<f64>,
    ) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let n = self.engine.n();
        let pcaf = PcafSpec::new(vector(v, n, "v")?).map_err(value_err)?;
        let f = vector(f, n, "f")?;
        let g = self
            .engine
            .make_coexcessive(&DVector::from_element(n, 1.0), gamma)
            .map_err(value_err)?;
        let report = revuz_limit_check(&self.engine, &pcaf, &f, &g, &betas).map_err(runtime_err)?;
        Ok(report
            .rows
            .iter()
            .map(|r| (r.beta, r.value, r.target, r.abs_error))
            .collect())
    }

    /// Resolvent-approximation table: rows (n, sup_error).
    fn yosida_table(&self, v: Vec<f64>, beta: f64, ns: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
        let n = self.engine.n();
        let mu = SmoothMeasure::new(vector(v, n, "v")?).map_err(value_err)?;
        let report = yosida_construction(&self.engine, &mu, beta, &ns).map_err(runtime_err)?;
        Ok(report.rows.iter().map(|r| (r.n, r.sup_error)).collect())
    }

    /// Optional measure of the rectangle [from, to) x Omega by quadrature.
    fn optional_rectangle_exact(&self, v: Vec<f64>, x: usize, from: f64, to: f64) -> PyResult<f64> {
        let n = self.engine.n();
        let pcaf = PcafSpec::new(vector(v, n, "v")?).map_err(value_err)?;
        optional_measure_exact(&self.engine, &pcaf, x, from, to).map_err(value_err)
    }
}

/// The sub-Markov chain conjugated from the model by an excessive h, with
/// seeded simulation and importance-weighted flow estimators.
#[pyclass]
struct KilledChain {
    engine: Arc<SemigroupEngine>,
    ht: HTransform,
}

#[pymethods]
impl KilledChain {
    fn h(&self) -> Vec<f64> {
        self.ht.h().iter().copied().collect()
    }

    fn generator(&self) -> Vec<Vec<f64>> {
        to_rows(self.ht.generator())
    }

    fn killing_rates(&self) -> Vec<f64> {
        self.ht.killing_rates().iter().copied().collect()
    }

    /// The reweighted kernel; equals the model's transition matrix for every
    /// valid h.
    fn q_kernel(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.ht.q_kernel(t).map_err(runtime_err)?))
    }

    /// One seeded trajectory: (states, jump_times, lifetime_or_None).
    fn sample_path(
        &self,
        x: usize,
        horizon: f64,
        seed: u64,
        stream: u64,
    ) -> (Vec<usize>, Vec<f64>, Option<f64>) {
        let path = sample_path(&self.ht, x, horizon, &mut RngStream { seed, stream }.rng());
        (
            path.states().to_vec(),
            path.jump_times().to_vec(),
            path.lifetime(),
        )
    }

    /// Monte Carlo flow estimate of f(X_t) from x: (mean, std_error).
    fn flow_mc(
        &self,
        x: usize,
        t: f64,
        f: Vec<f64>,
        n_paths: u64,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let fv = vector(f, self.ht.n(), "f")?;
        let functional = CylinderFunctional::at_time(t, fv).map_err(value_err)?;
        let est = flow_mc(&self.ht, &FlowQuery::point(x, functional), n_paths, seed, 0);
        Ok((est.mean, est.std_error))
    }

    /// Expanded flow of f(X_sigma) at the hitting time of b:
    /// (mean, std_error, censored_fraction).
    fn expanded_flow_hitting(
        &self,
        x: usize,
        b: Vec<usize>,
        f: Vec<f64>,
        n_paths: u64,
        seed: u64,
        horizon: f64,
    ) -> PyResult<(f64, f64, f64)> {
        let fv = vector(f, self.ht.n(), "f")?;
        let est = expanded_flow_mc(
            &self.engine,
            &self.ht,
            x,
            &StoppingTime::hitting(b),
            move |path: &flowlab::pathsim::PathSample, s: f64| match path.state_at(s) {
                Ok(Some(state)) => fv[state],
                _ => 0.0,
            },
            n_paths,
            seed,
            0,
            horizon,
        );
        Ok((
            est.estimate.mean,
            est.estimate.std_error,
            est.censored_fraction,
        ))
    }

    /// Monte Carlo optional measure of [from, to) x Omega:
    /// (mean, std_error).
    #[allow(clippy::too_many_arguments)]
    fn optional_rectangle_mc(
        &self,
        v: Vec<f64>,
        x: usize,
        from: f64,
        to: f64,
        n_paths: u64,
        seed: u64,
        horizon: f64,
    ) -> PyResult<(f64, f64)> {
        let pcaf = PcafSpec::new(vector(v, self.ht.n(), "v")?).map_err(value_err)?;
        let window = OptionalWindow::Rectangle {
            from,
            to,
            event: None,
        };
        let est = optional_measure_mc(
            &self.engine,
            &self.ht,
            &pcaf,
            x,
            &window,
            n_paths,
            seed,
            0,
            horizon,
        );
        Ok((est.estimate.mean, est.estimate.std_error))
    }
}

/// Runs a scenario document (JSON text) and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (text, seed=None, n_paths=None))]
fn run_scenario(text: &str, seed: Option<u64>, n_paths: Option<u64>) -> PyResult<String> {
    let opts = RunOptions {
        seed,
        n_paths,
        ..Default::default()
    };
    let (report, _tables) = scenario::run_scenario_str(text, &opts).map_err(value_err)?;
    Ok(report.to_json())
}

/// Describes what a named check certifies.
#[pyfunction]
fn explain(check: &str) -> PyResult<String> {
    scenario::explain(check)
        .map(str::to_string)
        .map_err(value_err)
}

#[pymodule]
fn flowlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<KilledChain>()?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    Ok(())
}

//! Independent oracles for the integration suites: closed-form
//! eigendecomposition exponentials and resolvents for the shipped model
//! sizes, plus adaptive quadrature. Nothing here touches the uniformization
//! or LU paths used by the engine.
#![allow(dead_code)] // each test binary uses its own slice of the oracle

use flowlab::model::ModelBundle;
use flowlab::semigroup::SemigroupEngine;
use nalgebra::{DMatrix, DVector};

pub fn m1_bundle() -> ModelBundle {
    ModelBundle::from_rows(&[0.5], &[1.0], 2.0).unwrap()
}

pub fn m2prime_bundle() -> ModelBundle {
    ModelBundle::from_rows(&[-2.0, 3.0, 0.5, -2.0], &[1.0, 1.0], 2.0).unwrap()
}

pub fn m3_bundle() -> ModelBundle {
    ModelBundle::from_rows(&[-1.0, 1.0, 1.0, -1.0], &[1.0, 1.0], 1.0).unwrap()
}

pub fn m1_engine() -> SemigroupEngine {
    SemigroupEngine::new(m1_bundle())
}

pub fn m2prime_engine() -> SemigroupEngine {
    SemigroupEngine::new(m2prime_bundle())
}

pub fn m3_engine() -> SemigroupEngine {
    SemigroupEngine::new(m3_bundle())
}

/// `exp(tM)` by spectral decomposition, closed form for 1x1 and 2x2.
pub fn expm_eig(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    match m.nrows() {
        1 => DMatrix::from_element(1, 1, (t * m[(0, 0)]).exp()),
        2 => expm_eig_2x2(m, t),
        n => panic!("oracle supports 1x1 and 2x2 matrices, got {n}x{n}"),
    }
}

fn expm_eig_2x2(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let mean = 0.5 * (a + d);
    let disc = (a - d) * (a - d) + 4.0 * b * c;
    let eye = DMatrix::identity(2, 2);
    let scale = 1.0_f64.max(a.abs() + b.abs() + c.abs() + d.abs()).powi(2);
    if disc > 1e-12 * scale {
        let s = 0.5 * disc.sqrt();
        let (hi, lo) = (mean + s, mean - s);
        let p_hi = (m - eye.clone() * lo) / (hi - lo);
        let p_lo = (m - eye * hi) / (lo - hi);
        p_hi * (hi * t).exp() + p_lo * (lo * t).exp()
    } else if disc >= -1e-12 * scale {
        // defective (or exactly diagonal) repeated eigenvalue
        (eye.clone() + (m - eye * mean) * t) * (mean * t).exp()
    } else {
        let omega = 0.5 * (-disc).sqrt();
        (eye.clone() * (omega * t).cos() + (m - eye * mean) * ((omega * t).sin() / omega))
            * (mean * t).exp()
    }
}

/// `(beta I - M)^{-1}` by adjugate, closed form for 1x1 and 2x2.
pub fn resolvent_closed(m: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    match m.nrows() {
        1 => DMatrix::from_element(1, 1, 1.0 / (beta - m[(0, 0)])),
        2 => {
            let a = beta - m[(0, 0)];
            let b = -m[(0, 1)];
            let c = -m[(1, 0)];
            let d = beta - m[(1, 1)];
            let det = a * d - b * c;
            DMatrix::from_row_slice(2, 2, &[d, -b, -c, a]) / det
        }
        n => panic!("oracle supports 1x1 and 2x2 matrices, got {n}x{n}"),
    }
}

/// Total flow mass `(exp(tL) 1)(x)` from the eigendecomposition oracle.
pub fn mass_eig(bundle: &ModelBundle, x: usize, t: f64) -> f64 {
    let ones = DVector::from_element(bundle.n(), 1.0);
    (expm_eig(bundle.generator().matrix(), t) * ones)[x]
}

/// Adaptive Simpson quadrature to an absolute tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let mid = 0.5 * (a + b);
        let left = simpson(f, a, mid);
        let right = simpson(f, mid, b);
        if depth > 40 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, mid, left, tol / 2.0, depth + 1)
                + recurse(f, mid, b, right, tol / 2.0, depth + 1)
        }
    }
    recurse(f, a, b, simpson(f, a, b), tol, 0)
}

//! Model validation: state space, reference measure, Metzler generator and
//! the coercivity diagnostics of the associated bilinear form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::{BISECT_TOL, STRUCT_TOL};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("off-diagonal entry L[{row},{col}] = {value} is negative (Metzler violation)")]
    NonMetzler { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("reference measure must be strictly positive, m[{0}] = {1}")]
    NonPositiveMeasure(usize, f64),
    #[error("invalid state space: {0}")]
    InvalidStateSpace(String),
    #[error("alpha = {alpha} must exceed max(spectral bound {spectral_bound}, alpha0 {alpha0})")]
    AlphaTooSmall {
        alpha: f64,
        spectral_bound: f64,
        alpha0: f64,
    },
}

/// Finite state space with distinct labels.
#[derive(Debug, Clone)]
pub struct StateSpace {
    labels: Vec<String>,
}

impl StateSpace {
    pub fn new(labels: Vec<String>) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::InvalidStateSpace(
                "need at least one state".into(),
            ));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(ModelError::InvalidStateSpace(format!(
                    "duplicate label {a:?}"
                )));
            }
        }
        Ok(Self { labels })
    }

    /// Labels "1", "2", ... for quick construction.
    pub fn numbered(n: usize) -> Self {
        Self::new((1..=n).map(|i| i.to_string()).collect()).expect("n >= 1")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Strictly positive reference measure on the state space.
#[derive(Debug, Clone)]
pub struct ReferenceMeasure {
    weights: DVector<f64>,
}

impl ReferenceMeasure {
    pub fn new(weights: DVector<f64>) -> Result<Self, ModelError> {
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 || !w.is_finite() {
                return Err(ModelError::NonPositiveMeasure(i, w));
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.len() == 0
    }
}

/// Validated Metzler generator together with derived row sums and the
/// largest real part of its spectrum.
#[derive(Debug, Clone)]
pub struct Generator {
    matrix: DMatrix<f64>,
    row_sums: DVector<f64>,
    spectral_bound: f64,
}

impl Generator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row_sums(&self) -> &DVector<f64> {
        &self.row_sums
    }

    pub fn spectral_bound(&self) -> f64 {
        self.spectral_bound
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

/// Accepts a square matrix with nonnegative off-diagonal entries; rejects
/// anything else. Positivity of the off-diagonal part is exactly what makes
/// `exp(tL)` entrywise nonnegative on a finite space.
pub fn validate_generator(l: DMatrix<f64>, m: &ReferenceMeasure) -> Result<Generator, ModelError> {
    if l.nrows() != l.ncols() {
        return Err(ModelError::DimensionMismatch(format!(
            "generator must be square, got {}x{}",
            l.nrows(),
            l.ncols()
        )));
    }
    if l.nrows() != m.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "generator is {}x{} but measure has {} entries",
            l.nrows(),
            l.ncols(),
            m.len()
        )));
    }
    let n = l.nrows();
    for row in 0..n {
        for col in 0..n {
            if row != col && l[(row, col)] < 0.0 {
                return Err(ModelError::NonMetzler {
                    row,
                    col,
                    value: l[(row, col)],
                });
            }
        }
    }
    let row_sums = DVector::from_iterator(n, l.row_iter().map(|r| r.sum()));
    let spectral_bound = l
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Generator {
        matrix: l,
        row_sums,
        spectral_bound,
    })
}

/// Coercivity diagnostics of the bilinear form `E(u,v) = (-Lu, v)_m`:
/// the smallest shift `alpha0` making its symmetric part nonnegative, and the
/// sector continuity constant of the shifted form.
#[derive(Debug, Clone)]
pub struct CoerciveForm {
    pub alpha0: f64,
    pub continuity_constant: f64,
    sym_part: DMatrix<f64>,
    antisym_part: DMatrix<f64>,
}

impl CoerciveForm {
    /// Symmetric part of `D_m((1 + alpha0) I - L)`.
    pub fn sym_part(&self) -> &DMatrix<f64> {
        &self.sym_part
    }

    /// Antisymmetric part of `D_m((1 + alpha0) I - L)`.
    pub fn antisym_part(&self) -> &DMatrix<f64> {
        &self.antisym_part
    }
}

fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral norm of a (not necessarily symmetric) matrix.
fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    gram.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0_f64, f64::max)
        .max(0.0)
        .sqrt()
}

pub fn build_form(generator: &Generator, m: &ReferenceMeasure) -> CoerciveForm {
    let n = generator.len();
    let d_m = DMatrix::from_diagonal(m.weights());
    let shifted = |t: f64| &d_m * (DMatrix::identity(n, n) * t - generator.matrix());

    // alpha0: smallest t >= 0 with lambda_min(sym(D_m(tI - L))) >= -STRUCT_TOL.
    let alpha0 = if min_sym_eigenvalue(&shifted(0.0)) >= -STRUCT_TOL {
        0.0
    } else {
        let m_min = m.weights().min();
        let mut hi = (spectral_norm(&shifted(0.0)) + 1.0) / m_min;
        let mut lo = 0.0;
        debug_assert!(min_sym_eigenvalue(&shifted(hi)) >= -STRUCT_TOL);
        while hi - lo > BISECT_TOL {
            let mid = 0.5 * (lo + hi);
            if min_sym_eigenvalue(&shifted(mid)) >= -STRUCT_TOL {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let shifted_one = shifted(1.0 + alpha0);
    let sym_part = (&shifted_one + shifted_one.transpose()) * 0.5;
    let antisym_part = (&shifted_one - shifted_one.transpose()) * 0.5;

    // K = 1 + ||S^{-1/2} A S^{-1/2}||_2 with S the (positive definite)
    // symmetric part at shift 1 + alpha0.
    let eig = sym_part.clone().symmetric_eigen();
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(1e-300).powf(-0.5)));
    let s_inv_half = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let continuity_constant = 1.0 + spectral_norm(&(&s_inv_half * &antisym_part * &s_inv_half));

    CoerciveForm {
        alpha0,
        continuity_constant,
        sym_part,
        antisym_part,
    }
}

/// The validated model: state space, measure, generator, global shift alpha
/// and the coercivity diagnostics.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    space: StateSpace,
    measure: ReferenceMeasure,
    generator: Generator,
    alpha: f64,
    form: CoerciveForm,
}

impl ModelBundle {
    pub fn new(
        space: StateSpace,
        measure: ReferenceMeasure,
        l: DMatrix<f64>,
        alpha: f64,
    ) -> Result<Self, ModelError> {
        if space.len() != measure.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} states but {} measure entries",
                space.len(),
                measure.len()
            )));
        }
        let generator = validate_generator(l, &measure)?;
        let form = build_form(&generator, &measure);
        if alpha <= generator.spectral_bound() || alpha <= form.alpha0 {
            return Err(ModelError::AlphaTooSmall {
                alpha,
                spectral_bound: generator.spectral_bound(),
                alpha0: form.alpha0,
            });
        }
        Ok(Self {
            space,
            measure,
            generator,
            alpha,
            form,
        })
    }

    /// Model on states labelled "1".."n" from a row-major generator.
    pub fn from_rows(l_rows: &[f64], m: &[f64], alpha: f64) -> Result<Self, ModelError> {
        let n = m.len();
        if l_rows.len() != n * n {
            return Err(ModelError::DimensionMismatch(format!(
                "expected {} generator entries, got {}",
                n * n,
                l_rows.len()
            )));
        }
        ModelBundle::new(
            StateSpace::numbered(n),
            ReferenceMeasure::new(DVector::from_column_slice(m))?,
            DMatrix::from_row_slice(n, n, l_rows),
            alpha,
        )
    }

    pub fn n(&self) -> usize {
        self.space.len()
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn measure(&self) -> &ReferenceMeasure {
        &self.measure
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn form(&self) -> &CoerciveForm {
        &self.form
    }

    /// The shifted energy form `E_beta(u, v) = ((beta I - L) u, v)_m`.
    pub fn energy(&self, beta: f64, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let n = self.n();
        let shifted = u * beta - self.generator.matrix() * u;
        (0..n)
            .map(|x| self.measure.weights()[x] * shifted[x] * v[x])
            .sum()
    }
}

/// Result of sampling the positivity-preserving inequality
/// `E_{alpha0+1}(u, u+) >= 0` on random sign-indefinite vectors.
#[derive(Debug, Clone)]
pub struct PositivityReport {
    pub samples: usize,
    pub worst_value: f64,
    pub worst_witness: DVector<f64>,
    pub pass: bool,
}

pub fn check_positivity_preserving_form(
    bundle: &ModelBundle,
    samples: usize,
    seed: u64,
) -> PositivityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = bundle.n();
    let beta = bundle.form().alpha0 + 1.0;
    let mut worst_value = f64::INFINITY;
    let mut worst_witness = DVector::zeros(n);
    for _ in 0..samples {
        let u = DVector::from_fn(n, |_, _| sample_std_normal(&mut rng));
        let u_plus = u.map(|x| x.max(0.0));
        let value = bundle.energy(beta, &u, &u_plus);
        if value < worst_value {
            worst_value = value;
            worst_witness = u;
        }
    }
    PositivityReport {
        samples,
        worst_value,
        worst_witness,
        pass: worst_value >= -STRUCT_TOL,
    }
}

/// Box-Muller; two uniforms per draw keeps the stream layout obvious.
pub(crate) fn sample_std_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SemiDirichletVerdict {
    SubMarkovian,
    /// The state with the largest positive row sum, witnessing mass creation.
    MassCreation {
        state: usize,
        row_sum: f64,
    },
}

pub fn check_semi_dirichlet(bundle: &ModelBundle) -> SemiDirichletVerdict {
    let sums = bundle.generator().row_sums();
    let (state, &row_sum) = sums
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    if row_sum <= STRUCT_TOL {
        SemiDirichletVerdict::SubMarkovian
    } else {
        SemiDirichletVerdict::MassCreation { state, row_sum }
    }
}

//! Residual networks read as discrete dynamical systems
//! `h_{t+1} = f(h_t; w_t) + x_t`.
//!
//! A shared-weight ResNet is the homogeneous, time-invariant case
//! `h_n = (K + I)^n x_0`. Re-injecting the input at every step gives the
//! inhomogeneous system `h <- x + K' h` (with `K' = K + I`), whose partial
//! sums are the power series `(I + K' + K'^2 + ...) x`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// A state that can be summed, so `K(h) + h` is defined.
pub trait State: Clone {
    fn plus(&self, other: &Self) -> Result<Self>;
}

impl State for DVector<f64> {
    fn plus(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(shape_err!("state lengths {} and {} differ", self.len(), other.len()));
        }
        Ok(self + other)
    }
}

impl State for Tensor {
    fn plus(&self, other: &Self) -> Result<Self> {
        crate::tensor::add(self, other)
    }
}

/// A (possibly nonlinear) map `K` on states.
pub trait Operator<S> {
    fn apply(&self, h: &S) -> Result<S>;
}

/// Wraps any closure, e.g. a tensor pipeline, as an operator.
pub struct FnOperator<F>(pub F);

impl<S, F: Fn(&S) -> Result<S>> Operator<S> for FnOperator<F> {
    fn apply(&self, h: &S) -> Result<S> {
        (self.0)(h)
    }
}

/// A square, finite matrix acting on vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperator {
    matrix: DMatrix<f64>,
}

impl LinearOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(shape_err!("operator must be square, got {}x{}", matrix.nrows(), matrix.ncols()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("operator has non-finite entries".into()));
        }
        Ok(LinearOperator { matrix })
    }

    /// Row-major constructor.
    pub fn from_rows(n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * n {
            return Err(shape_err!("{} values for a {n}x{n} operator", values.len()));
        }
        Self::new(DMatrix::from_row_slice(n, n, values))
    }

    /// Gaussian random `n x n` matrix rescaled to the given spectral norm.
    pub fn random(n: usize, spectral_norm: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let op = LinearOperator { matrix: m };
        let norm = op.spectral_norm();
        LinearOperator {
            matrix: op.matrix * (spectral_norm / norm),
        }
    }

    /// Symmetric random matrix rescaled to the given spectral norm. For
    /// symmetric matrices the norm equals the spectral radius, so the power
    /// series converges exactly when `spectral_norm < 1`.
    pub fn random_symmetric(n: usize, spectral_norm: f64, seed: u64) -> Self {
        let m = Self::random(n, 1.0, seed).matrix;
        let op = LinearOperator { matrix: &m + m.transpose() };
        let norm = op.spectral_norm();
        LinearOperator {
            matrix: op.matrix * (spectral_norm / norm),
        }
    }

    pub fn scalar(k: f64) -> Self {
        LinearOperator { matrix: DMatrix::from_element(1, 1, k) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `K + I`.
    pub fn plus_identity(&self) -> Self {
        LinearOperator {
            matrix: &self.matrix + DMatrix::identity(self.dim(), self.dim()),
        }
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        self.matrix.singular_values().max()
    }

    /// Spectral radius estimated by `iters` steps of power iteration from a
    /// fixed all-ones start, as the geometric mean growth over the second
    /// half of the run (robust to complex eigenvalue pairs).
    pub fn spectral_radius(&self, iters: usize) -> f64 {
        let n = self.dim();
        if n == 0 || iters == 0 {
            return 0.0;
        }
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut logs = Vec::with_capacity(iters);
        for _ in 0..iters {
            let w = &self.matrix * &v;
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            logs.push(norm.ln());
            v = w / norm;
        }
        let tail = &logs[iters / 2..];
        (tail.iter().sum::<f64>() / tail.len() as f64).exp()
    }
}

impl Operator<DVector<f64>> for LinearOperator {
    fn apply(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        if h.len() != self.dim() {
            return Err(shape_err!("operator of size {} applied to a vector of length {}", self.dim(), h.len()));
        }
        Ok(&self.matrix * h)
    }
}

/// A value over time: constant, a Kronecker delta at t=0, or an explicit
/// finite list.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(Vec<f64>),
    Delta(Vec<f64>),
    Explicit(Vec<Vec<f64>>),
}

impl Schedule {
    /// Value at `t`, or `None` past the end of an explicit list.
    pub fn at(&self, t: usize) -> Option<Vec<f64>> {
        match self {
            Schedule::Constant(v) => Some(v.clone()),
            Schedule::Delta(v) if t == 0 => Some(v.clone()),
            Schedule::Delta(v) => Some(vec![0.0; v.len()]),
            Schedule::Explicit(list) => list.get(t).cloned(),
        }
    }

    fn zero_after_start(&self) -> bool {
        let zero = |v: &Vec<f64>| v.iter().all(|&x| x == 0.0);
        match self {
            Schedule::Constant(v) => zero(v),
            Schedule::Delta(_) => true,
            Schedule::Explicit(list) => list.iter().skip(1).all(zero),
        }
    }

    fn constant(&self) -> bool {
        match self {
            Schedule::Constant(_) => true,
            Schedule::Delta(v) => v.iter().all(|&x| x == 0.0),
            Schedule::Explicit(list) => list.windows(2).all(|w| w[0] == w[1]),
        }
    }
}

/// Input and weight schedules of `h_{t+1} = f(h_t; w_t) + x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemDescriptor {
    pub input: Schedule,
    pub weights: Schedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classification {
    /// `x_t = 0` for all `t > 0`.
    pub homogeneous: bool,
    /// `w_t = w` for all `t`.
    pub time_invariant: bool,
}

pub fn classify(d: &SystemDescriptor) -> Classification {
    Classification {
        homogeneous: d.input.zero_after_start(),
        time_invariant: d.weights.constant(),
    }
}

/// `n` residual steps `h <- K(h) + h` from `x0`, i.e. `(K + I)^n x0`.
pub fn iterate_homogeneous<S: State, K: Operator<S> + ?Sized>(k: &K, x0: &S, n: usize) -> Result<S> {
    let mut h = x0.clone();
    for _ in 0..n {
        h = k.apply(&h)?.plus(&h)?;
    }
    Ok(h)
}

/// Steps of `h <- x + K' h` starting from `h = 0`; the `n`-th iterate
/// (counting the first, `x`, as iterate 0) is `sum_{k=0}^{n} K'^k x`.
pub fn iterate_inhomogeneous(k_prime: &LinearOperator, x: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    let mut h = DVector::zeros(x.len());
    for _ in 0..=n {
        h = x + k_prime.apply(&h)?;
    }
    Ok(h)
}

/// Default cap on series terms.
pub const MAX_SERIES_TERMS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSolution {
    pub state: DVector<f64>,
    /// Number of terms summed into `state`.
    pub terms_used: usize,
    pub converged: bool,
    /// Norm of each computed term `K'^k x`, starting at `k = 0`.
    pub term_norms: Vec<f64>,
}

/// Sum `x + K' x + K'^2 x + ...` until the next term's norm drops below
/// `tol` (converged) or `max_terms` is reached or the terms blow up (not
/// converged). On convergence the residual `(I - K')h - x` equals minus
/// the first omitted term, so its norm is below `tol`.
pub fn power_series_solve_capped(
    k_prime: &LinearOperator,
    x: &DVector<f64>,
    tol: f64,
    max_terms: usize,
) -> Result<SeriesSolution> {
    let x_norm = x.norm();
    let mut sum = x.clone();
    let mut term = x.clone();
    let mut norms = vec![x_norm];
    let mut converged = x_norm < tol;
    let mut terms = 1;
    while !converged && terms < max_terms {
        let next = k_prime.apply(&term)?;
        let norm = next.norm();
        norms.push(norm);
        if norm < tol {
            converged = true;
            break;
        }
        if !norm.is_finite() || norm > 1e10 * x_norm.max(tol) {
            break;
        }
        sum += &next;
        term = next;
        terms += 1;
    }
    Ok(SeriesSolution {
        state: sum,
        terms_used: terms,
        converged,
        term_norms: norms,
    })
}

pub fn power_series_solve(k_prime: &LinearOperator, x: &DVector<f64>, tol: f64) -> Result<SeriesSolution> {
    power_series_solve_capped(k_prime, x, tol, MAX_SERIES_TERMS)
}

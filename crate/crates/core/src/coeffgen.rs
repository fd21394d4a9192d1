//! Exact-rational generation of Adams-Bashforth and LTS-AB coefficients.
//!
//! All coefficients are produced with arbitrary-precision rationals. The
//! integrators convert them to `f64` exactly once, at construction.
//!
//! Notation used below:
//!
//! * `gamma_j(xi) = (-1)^j \int_0^xi binom(-s, j) ds`, the weights of the
//!   backward differences in the Newton form of the AB interpolant;
//! * `gamma_tilde_j = d/dxi gamma_j`;
//! * `alpha_l`, the classical k-step AB weights of `y_{n-l}`;
//! * `beta_{m,l}`, the weights of `B(I-P) y_{n-l}` in local substep `m`.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

/// Largest supported step count.
pub const MAX_K: usize = 20;
/// Largest supported local refinement ratio.
pub const MAX_P: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoeffError {
    #[error("step count k = {0} outside supported range 1..={MAX_K}")]
    StepCount(usize),
    #[error("refinement ratio p = {0} outside supported range 1..={MAX_P}")]
    Refinement(usize),
    #[error("coefficient identity failed for k = {k}, p = {p}: {what}")]
    Identity { k: usize, p: usize, what: String },
}

pub fn rat(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn int(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Polynomial with exact rational coefficients, ascending degree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RationalPoly {
    coeffs: Vec<BigRational>,
}

impl RationalPoly {
    pub fn new(coeffs: Vec<BigRational>) -> Self {
        let mut p = Self { coeffs };
        p.normalize();
        p
    }

    pub fn zero() -> Self {
        Self { coeffs: Vec::new() }
    }

    pub fn constant(c: BigRational) -> Self {
        Self::new(vec![c])
    }

    /// The monomial `xi`.
    pub fn identity() -> Self {
        Self::new(vec![BigRational::zero(), BigRational::one()])
    }

    fn normalize(&mut self) {
        while self.coeffs.last().is_some_and(|c| c.is_zero()) {
            self.coeffs.pop();
        }
    }

    pub fn coeffs(&self) -> &[BigRational] {
        &self.coeffs
    }

    /// Coefficient of `xi^i` (zero past the degree).
    pub fn coeff(&self, i: usize) -> BigRational {
        self.coeffs.get(i).cloned().unwrap_or_else(BigRational::zero)
    }

    /// Degree, `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.coeffs.len().checked_sub(1)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Horner evaluation, exact.
    pub fn eval(&self, xi: &BigRational) -> BigRational {
        self.coeffs
            .iter()
            .rev()
            .fold(BigRational::zero(), |acc, c| acc * xi + c)
    }

    pub fn eval_f64(&self, xi: f64) -> f64 {
        self.coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * xi + c.to_f64().unwrap_or(f64::NAN))
    }

    pub fn derivative(&self) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, c)| c * int(i as i64))
            .collect();
        Self::new(coeffs)
    }

    /// Antiderivative vanishing at zero.
    pub fn antiderivative(&self) -> Self {
        let mut coeffs = Vec::with_capacity(self.coeffs.len() + 1);
        coeffs.push(BigRational::zero());
        for (i, c) in self.coeffs.iter().enumerate() {
            coeffs.push(c / int(i as i64 + 1));
        }
        Self::new(coeffs)
    }

    pub fn mul(&self, other: &Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        let mut coeffs = vec![BigRational::zero(); self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                coeffs[i + j] += a * b;
            }
        }
        Self::new(coeffs)
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        Self::new((0..n).map(|i| self.coeff(i) + other.coeff(i)).collect())
    }

    pub fn scale(&self, s: &BigRational) -> Self {
        Self::new(self.coeffs.iter().map(|c| c * s).collect())
    }
}

impl fmt::Display for RationalPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (i, c) in self.coeffs.iter().enumerate().rev() {
            if c.is_zero() {
                continue;
            }
            let sign = if c.is_negative() { "-" } else { "+" };
            if first {
                if c.is_negative() {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            first = false;
            let a = c.abs();
            match i {
                0 => write!(f, "{a}")?,
                1 if a.is_one() => write!(f, "xi")?,
                1 => write!(f, "{a} xi")?,
                _ if a.is_one() => write!(f, "xi^{i}")?,
                _ => write!(f, "{a} xi^{i}")?,
            }
        }
        Ok(())
    }
}

/// `gamma_j(xi)`: the integral from 0 to `xi` of the rising factorial
/// `s (s+1) ... (s+j-1) / j!`, which equals `(-1)^j binom(-s, j)`.
pub fn gamma_poly(j: usize) -> RationalPoly {
    rising_factorial_poly(j).antiderivative()
}

/// `gamma_tilde_j = d/dxi gamma_j`.
pub fn gamma_tilde_poly(j: usize) -> RationalPoly {
    gamma_poly(j).derivative()
}

/// `s (s+1) ... (s+j-1) / j!` as a polynomial in `s`.
fn rising_factorial_poly(j: usize) -> RationalPoly {
    let mut acc = RationalPoly::constant(BigRational::one());
    for i in 0..j {
        let factor = RationalPoly::new(vec![int(i as i64), BigRational::one()]);
        acc = acc.mul(&factor).scale(&rat(1, i as i64 + 1));
    }
    acc
}

fn check_k(k: usize) -> Result<(), CoeffError> {
    if (1..=MAX_K).contains(&k) {
        Ok(())
    } else {
        Err(CoeffError::StepCount(k))
    }
}

fn check_p(p: usize) -> Result<(), CoeffError> {
    if (1..=MAX_P).contains(&p) {
        Ok(())
    } else {
        Err(CoeffError::Refinement(p))
    }
}

/// Coefficient of `y_{n-l}` in the backward difference `nabla^j y_n`.
fn backward_difference_weight(j: usize, l: usize) -> BigRational {
    if l > j {
        return BigRational::zero();
    }
    let b = BigRational::from_integer(binomial(j, l));
    if l.is_multiple_of(2) {
        b
    } else {
        -b
    }
}

/// Classical k-step Adams-Bashforth weights `alpha_0..alpha_{k-1}`, obtained
/// by expanding the backward differences at `xi = 1`.
pub fn ab_coefficients(k: usize) -> Result<Vec<BigRational>, CoeffError> {
    check_k(k)?;
    let gamma_at_one: Vec<BigRational> =
        (0..k).map(|j| gamma_poly(j).eval(&BigRational::one())).collect();
    Ok((0..k)
        .map(|l| {
            (l..k)
                .map(|j| &gamma_at_one[j] * backward_difference_weight(j, l))
                .fold(BigRational::zero(), |a, b| a + b)
        })
        .collect())
}

/// The `p x k` matrix `beta_{m,l}` of the LTS-ABk(p) scheme.
pub fn lts_beta(k: usize, p: usize) -> Result<Vec<Vec<BigRational>>, CoeffError> {
    check_k(k)?;
    check_p(p)?;
    let alpha = ab_coefficients(k)?;
    let gamma_tilde: Vec<RationalPoly> = (0..k).map(gamma_tilde_poly).collect();
    lts_beta_from(&alpha, &gamma_tilde, p)
}

fn lts_beta_from(
    alpha: &[BigRational],
    gamma_tilde: &[RationalPoly],
    p: usize,
) -> Result<Vec<Vec<BigRational>>, CoeffError> {
    let k = alpha.len();
    let pq = BigInt::from(p);
    // gamma_tilde_j((m - i)/p) only depends on m - i in -(k-1)..=p-1.
    let offset = k as i64 - 1;
    let table: Vec<Vec<BigRational>> = (-offset..p as i64)
        .map(|d| {
            let xi = BigRational::new(BigInt::from(d), pq.clone());
            gamma_tilde.iter().map(|g| g.eval(&xi)).collect()
        })
        .collect();
    let mut beta = vec![vec![BigRational::zero(); k]; p];
    for (m, row) in beta.iter_mut().enumerate() {
        for (l, entry) in row.iter_mut().enumerate() {
            let mut acc = BigRational::zero();
            for (i, a) in alpha.iter().enumerate() {
                let g = &table[(m as i64 - i as i64 + offset) as usize];
                let inner = (l..k)
                    .map(|j| backward_difference_weight(j, l) * &g[j])
                    .fold(BigRational::zero(), |s, t| s + t);
                acc += a * inner;
            }
            *entry = acc;
        }
    }
    Ok(beta)
}

/// Outcome of the algebraic identity checks for one `(k, p)`.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub k: usize,
    pub p: usize,
    /// `sum_l alpha_l == 1`.
    pub alpha_sum: bool,
    /// Per `l`: `sum_m beta_{m,l} == p * alpha_l`.
    pub beta_column_sums: Vec<bool>,
    /// For `p == 1` only: `beta_{0,l} == alpha_l`.
    pub reduces_to_ab: Option<bool>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.alpha_sum && self.beta_column_sums.iter().all(|&b| b) && self.reduces_to_ab != Some(false)
    }
}

fn identities(alpha: &[BigRational], beta: &[Vec<BigRational>], k: usize, p: usize) -> IdentityReport {
    let alpha_sum = alpha.iter().fold(BigRational::zero(), |a, b| a + b).is_one();
    let pr = int(p as i64);
    let beta_column_sums = (0..k)
        .map(|l| {
            let s = beta.iter().fold(BigRational::zero(), |a, row| a + &row[l]);
            s == &pr * &alpha[l]
        })
        .collect();
    let reduces_to_ab = (p == 1).then(|| beta[0].as_slice() == alpha);
    IdentityReport { k, p, alpha_sum, beta_column_sums, reduces_to_ab }
}

/// Checks `sum alpha = 1` and `sum_m beta_{m,l} = p alpha_l` exactly.
pub fn verify_identities(k: usize, p: usize) -> Result<IdentityReport, CoeffError> {
    let alpha = ab_coefficients(k)?;
    let beta = lts_beta(k, p)?;
    Ok(identities(&alpha, &beta, k, p))
}

/// Every coefficient of an LTS-ABk(p) scheme, exact.
///
/// Construction verifies the algebraic identities and fails if any of them
/// does not hold.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    pub k: usize,
    pub p: usize,
    pub alpha: Vec<BigRational>,
    pub beta: Vec<Vec<BigRational>>,
    pub gamma: Vec<RationalPoly>,
    pub gamma_tilde: Vec<RationalPoly>,
}

impl CoefficientSet {
    pub fn new(k: usize, p: usize) -> Result<Self, CoeffError> {
        check_k(k)?;
        check_p(p)?;
        let gamma: Vec<RationalPoly> = (0..k).map(gamma_poly).collect();
        let gamma_tilde: Vec<RationalPoly> = gamma.iter().map(RationalPoly::derivative).collect();
        let alpha = ab_coefficients(k)?;
        let beta = lts_beta_from(&alpha, &gamma_tilde, p)?;
        let report = identities(&alpha, &beta, k, p);
        if !report.passed() {
            return Err(CoeffError::Identity { k, p, what: format!("{report:?}") });
        }
        Ok(Self { k, p, alpha, beta, gamma, gamma_tilde })
    }

    pub fn alpha_f64(&self) -> Vec<f64> {
        self.alpha.iter().map(to_f64).collect()
    }

    pub fn beta_f64(&self) -> Vec<Vec<f64>> {
        self.beta.iter().map(|row| row.iter().map(to_f64).collect()).collect()
    }
}

/// Round-to-nearest conversion of an exact rational.
pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

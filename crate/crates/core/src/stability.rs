//! Stability limits of Adams-Bashforth and local time-stepping schemes.
//!
//! A scheme step is linear in its stacked history, so the one-step
//! (companion) operator is obtained column by column by stepping unit
//! histories. The maximal stable time step is located by bisection on the
//! spectral radius of that operator.
//!
//! Reference limits of plain Adams-Bashforth on equidistant meshes use the
//! eigenvalues of `B` directly: the scheme is stable iff every `dt * mu`
//! lies in the stability region of the k-step method.

use ndarray::Array2;
use ndarray_linalg::{Eig, Eigh, UPLO};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffgen::{CoeffError, CoefficientSet};
use crate::integrator::{IntegratorError, Scheme, StateHistory};
use crate::linalg::{dense_spectral_radius, eigenvalues, to_dense};
use crate::mesh1d::{build_mesh, fine_dof_mask, Discretization, Family, InterfaceRule, MeshError};
use crate::spacedisc::{assemble, to_first_order, Flux, Medium, SemiDiscreteSystem, SpaceError};
use crate::sparse::{norm2, symmetric_spectrum_bounds};

#[derive(Debug, Error, PartialEq)]
pub enum StabilityError {
    #[error("one-step operator of dimension {dim} exceeds the dense cap {cap}")]
    CapExceeded { dim: usize, cap: usize },
    #[error("no stability boundary found in [{lo:e}, {hi:e}]")]
    NoBoundary { lo: f64, hi: f64 },
    #[error("eigenvalue computation failed")]
    Eigen,
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Threshold on the spectral radius below which a step is called stable.
pub const STABILITY_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityOptions {
    /// Largest one-step operator that is formed densely.
    pub dense_cap: usize,
    /// Largest operator whose spectrum is computed by a dense eigensolver;
    /// larger ones use norm-growth estimation.
    pub eig_cap: usize,
    /// Relative width at which bisection stops.
    pub tol_rel: f64,
    pub seed: u64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self { dense_cap: 5000, eig_cap: 2000, tol_rel: 1e-3, seed: 7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusMethod {
    /// Dense eigenvalues of the one-step operator.
    Eig,
    /// Norm growth of repeated application.
    Growth,
    /// Root moduli of the Adams-Bashforth polynomial over the spectrum of `B`.
    Modal,
}

impl std::fmt::Display for RadiusMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RadiusMethod::Eig => "eig",
            RadiusMethod::Growth => "growth",
            RadiusMethod::Modal => "modal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusEstimate {
    pub rho: f64,
    pub method: RadiusMethod,
    /// False when the growth estimate did not settle within its budget.
    pub converged: bool,
}

/// Which entries of the stacked history vector hold what.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotLayout {
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub fine: Vec<usize>,
    /// Offsets `j` (state at `t_n - j dt / p`) with their own fine slot;
    /// offsets that are multiples of `p` reuse the coarse state.
    pub fractional: Vec<usize>,
}

impl SlotLayout {
    pub fn new(scheme: &Scheme) -> Self {
        let (k, p) = (scheme.k(), scheme.p());
        Self {
            k,
            p,
            n: scheme.dim(),
            fine: scheme.fine_indices().to_vec(),
            fractional: (1..k).filter(|j| j % p != 0).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.k * self.n + self.fractional.len() * self.fine.len()
    }

    /// `[y_n, ..., y_{n-k+1}, P y_{n-j/p} restricted to the fine set ...]`.
    pub fn stack(&self, hist: &StateHistory) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for y in hist.y.iter().take(self.k) {
            v.extend_from_slice(y);
        }
        for &j in &self.fractional {
            let f = &hist.fine[j - 1];
            v.extend(self.fine.iter().map(|&i| f[i]));
        }
        v
    }

    pub fn unstack(&self, scheme: &Scheme, v: &[f64]) -> StateHistory {
        let n = self.n;
        let nf = self.fine.len();
        let y: Vec<Vec<f64>> = (0..self.k).map(|l| v[l * n..(l + 1) * n].to_vec()).collect();
        let w = y.iter().map(|y| scheme.coarse_product(y)).collect();
        let base = self.k * n;
        let fine = (1..self.k)
            .map(|j| {
                if j % self.p == 0 {
                    scheme.select_fine(&y[j / self.p])
                } else {
                    let s = self.fractional.iter().position(|&f| f == j).unwrap();
                    let mut f = vec![0.0; n];
                    for (c, &i) in self.fine.iter().enumerate() {
                        f[i] = v[base + s * nf + c];
                    }
                    f
                }
            })
            .collect();
        StateHistory { y: y.into(), w, fine, n: self.k - 1, t: 0.0 }
    }
}

/// Dense one-step operator of a scheme at a fixed time step.
#[derive(Clone, Debug)]
pub struct OneStepOperator {
    pub matrix: Array2<f64>,
    pub layout: SlotLayout,
}

impl OneStepOperator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.dot(&ndarray::ArrayView1::from(v)).to_vec()
    }
}

/// Advances a stacked history by one scheme step.
pub fn step_stacked(scheme: &mut Scheme, layout: &SlotLayout, v: &[f64]) -> Vec<f64> {
    let mut hist = layout.unstack(scheme, v);
    scheme.lts_ab_step(&mut hist).expect("history built with the scheme's own layout");
    layout.stack(&hist)
}

/// Probes the scheme with unit histories.
pub fn build_onestep(scheme: &mut Scheme, cap: usize) -> Result<OneStepOperator, StabilityError> {
    let layout = SlotLayout::new(scheme);
    let dim = layout.dim();
    if dim > cap {
        return Err(StabilityError::CapExceeded { dim, cap });
    }
    let mut matrix = Array2::zeros((dim, dim));
    let mut e = vec![0.0; dim];
    for c in 0..dim {
        e[c] = 1.0;
        let col = step_stacked(scheme, &layout, &e);
        e[c] = 0.0;
        for (r, v) in col.into_iter().enumerate() {
            matrix[[r, c]] = v;
        }
    }
    Ok(OneStepOperator { matrix, layout })
}

/// Spectral radius by norm growth: `apply` is iterated from several random
/// vectors and the mean log growth over the tail of the run is taken.
pub fn growth_radius(
    dim: usize,
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    iters: usize,
    starts: usize,
    seed: u64,
) -> RadiusEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skip = iters / 5;
    let mut best: f64 = 0.0;
    let mut converged = true;
    for _ in 0..starts {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut logs = Vec::with_capacity(iters);
        for _ in 0..iters {
            v = apply(&v);
            let nv = norm2(&v);
            if nv == 0.0 || !nv.is_finite() {
                logs.push(if nv == 0.0 { f64::NEG_INFINITY } else { f64::INFINITY });
                break;
            }
            logs.push(nv.ln());
            v.iter_mut().for_each(|x| *x /= nv);
        }
        let tail = &logs[skip.min(logs.len())..];
        if tail.is_empty() {
            continue;
        }
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        // Compare the two halves of the tail as a settling check.
        let half = tail.len() / 2;
        if half > 0 {
            let a = tail[..half].iter().sum::<f64>() / half as f64;
            let b = tail[half..].iter().sum::<f64>() / (tail.len() - half) as f64;
            if (a - b).abs() > 1e-3 {
                converged = false;
            }
        }
        best = best.max(mean.exp());
    }
    RadiusEstimate { rho: best, method: RadiusMethod::Growth, converged }
}

/// Spectral radius of a one-step operator: dense eigenvalues up to
/// `eig_cap`, norm growth beyond.
pub fn spectral_radius(op: &OneStepOperator, eig_cap: usize, seed: u64) -> Result<RadiusEstimate, StabilityError> {
    if op.dim() <= eig_cap {
        let rho = dense_spectral_radius(&op.matrix).ok_or(StabilityError::Eigen)?;
        Ok(RadiusEstimate { rho, method: RadiusMethod::Eig, converged: true })
    } else {
        Ok(growth_radius(op.dim(), |v| op.apply(v), 4000, 3, seed))
    }
}

/// Radius of the scheme's one-step map at its configured step.
pub fn scheme_radius(scheme: &mut Scheme, opts: &StabilityOptions) -> Result<RadiusEstimate, StabilityError> {
    let layout = SlotLayout::new(scheme);
    if layout.dim() <= opts.dense_cap {
        let op = build_onestep(scheme, opts.dense_cap)?;
        spectral_radius(&op, opts.eig_cap, opts.seed)
    } else {
        let dim = layout.dim();
        Ok(growth_radius(dim, |v| step_stacked(scheme, &layout, v), 4000, 3, opts.seed))
    }
}

/// Largest modulus among the roots of
/// `zeta^k - zeta^{k-1} - z sum_l alpha_l zeta^{k-1-l}`.
pub fn ab_root_modulus(alpha: &[f64], z: Complex64) -> f64 {
    let k = alpha.len();
    if k == 1 {
        return (Complex64::new(1.0, 0.0) + z * alpha[0]).norm();
    }
    // Companion matrix of the monic polynomial.
    let mut c = Array2::<Complex64>::zeros((k, k));
    c[[0, 0]] = Complex64::new(1.0, 0.0) + z * alpha[0];
    for l in 1..k {
        c[[0, l]] = z * alpha[l];
        c[[l, l - 1]] = Complex64::new(1.0, 0.0);
    }
    match c.eig() {
        Ok((vals, _)) => vals.iter().map(|v| v.norm()).fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    }
}

/// Scalar AB one-step matrix for `y' = lambda y` (companion form).
pub fn scalar_ab_companion(alpha: &[f64], dt_lambda: f64) -> Array2<f64> {
    let k = alpha.len();
    let mut c = Array2::zeros((k, k));
    c[[0, 0]] = 1.0 + dt_lambda * alpha[0];
    for l in 1..k {
        c[[0, l]] = dt_lambda * alpha[l];
        c[[l, l - 1]] = 1.0;
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CflResult {
    /// `None` when no positive step is stable.
    pub dt_max: Option<f64>,
    pub dt_ref: Option<f64>,
    pub ratio: Option<f64>,
    pub method: RadiusMethod,
}

/// Result of a bisection for the largest stable step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Boundary {
    /// `None` if the scheme is unstable for every positive step.
    pub dt: Option<f64>,
    pub method: RadiusMethod,
}

fn bisect(
    mut stable: impl FnMut(f64) -> Result<(bool, f64, RadiusMethod), StabilityError>,
    bracket: (f64, f64),
    tol_rel: f64,
) -> Result<Boundary, StabilityError> {
    let (mut lo, mut hi) = bracket;
    let (ok, _, mut method) = stable(lo)?;
    if !ok {
        let mut found = false;
        for _ in 0..60 {
            hi = lo;
            lo /= 2.0;
            if stable(lo)?.0 {
                found = true;
                break;
            }
        }
        if !found {
            return Err(StabilityError::NoBoundary { lo, hi: bracket.1 });
        }
    } else {
        let mut found = false;
        for _ in 0..60 {
            let (ok, _, m) = stable(hi)?;
            method = m;
            if !ok {
                found = true;
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        if !found {
            return Err(StabilityError::NoBoundary { lo: bracket.0, hi });
        }
    }
    while hi - lo > tol_rel * lo {
        let mid = 0.5 * (lo + hi);
        let (ok, _, m) = stable(mid)?;
        method = m;
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Growth of order (mu dt)^{k+2} near dt -> 0 can hide below the slack:
    // a boundary with unstable radii at dt/2 and dt/4 marks a scheme that is
    // unstable for every step.
    let (_, r2, _) = stable(lo / 2.0)?;
    let (_, r4, _) = stable(lo / 4.0)?;
    if r2 - 1.0 > 1e-10 && r4 - 1.0 > 1e-10 {
        return Ok(Boundary { dt: None, method });
    }
    Ok(Boundary { dt: Some(lo), method })
}

/// Largest stable step of the scheme on `system` by bisection on the
/// spectral radius of the one-step operator.
pub fn max_stable_dt(
    system: &SemiDiscreteSystem,
    coeffs: &CoefficientSet,
    bracket: (f64, f64),
    opts: &StabilityOptions,
) -> Result<Boundary, StabilityError> {
    bisect(
        |dt| {
            let mut scheme = Scheme::new(system, coeffs, dt)?;
            let r = scheme_radius(&mut scheme, opts)?;
            Ok((r.rho <= 1.0 + STABILITY_SLACK, r.rho, r.method))
        },
        bracket,
        opts.tol_rel,
    )
}

/// Eigenvalues relevant for plain AB stability of `system`, one per
/// conjugate pair, sorted by decreasing modulus.
pub fn operator_modes(system: &SemiDiscreteSystem, opts: &StabilityOptions) -> Result<Vec<Complex64>, StabilityError> {
    let mut modes = match (&system.a, scalar_damping(system)) {
        (Some(a), Some(sigma)) => {
            let n = a.nrows();
            let lambdas: Vec<f64> = if n <= opts.eig_cap {
                let (vals, _) = to_dense(a).eigh(UPLO::Lower).map_err(|_| StabilityError::Eigen)?;
                vals.to_vec()
            } else {
                // Dense sampling of the spectral interval of A.
                let (lo, hi) = symmetric_spectrum_bounds(a, 1e-10);
                let m = 4000;
                (0..=m).map(|i| lo + (hi - lo) * i as f64 / m as f64).collect()
            };
            lambdas.into_iter().flat_map(|l| damped_modes(l.max(0.0), sigma)).collect::<Vec<_>>()
        }
        _ => {
            if system.dim > opts.eig_cap {
                return Err(StabilityError::CapExceeded { dim: system.dim, cap: opts.eig_cap });
            }
            eigenvalues(&to_dense(&system.b))
                .ok_or(StabilityError::Eigen)?
                .into_iter()
                .filter(|z| z.im >= 0.0)
                .collect()
        }
    };
    modes.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    Ok(modes)
}

/// Roots of `mu^2 + sigma mu + lambda = 0`, one per conjugate pair.
fn damped_modes(lambda: f64, sigma: f64) -> Vec<Complex64> {
    let disc = sigma * sigma / 4.0 - lambda;
    if disc >= 0.0 {
        let r = disc.sqrt();
        vec![Complex64::new(-sigma / 2.0 - r, 0.0), Complex64::new(-sigma / 2.0 + r, 0.0)]
    } else {
        vec![Complex64::new(-sigma / 2.0, (-disc).sqrt())]
    }
}

/// `sigma` if `D = sigma I`.
fn scalar_damping(system: &SemiDiscreteSystem) -> Option<f64> {
    let d = system.d.as_ref()?;
    let n = d.nrows();
    if d.nnz() == 0 {
        return Some(0.0);
    }
    let s = d.get(0, 0);
    let ok = (0..n).all(|i| d.row(i).all(|(j, v)| if i == j { (v - s).abs() <= 1e-10 * s.abs() } else { v.abs() <= 1e-12 * s.abs() }));
    ok.then_some(s)
}

/// Largest AB root modulus over `modes` at step `dt`.
pub fn modal_radius(alpha: &[f64], modes: &[Complex64], dt: f64) -> f64 {
    let mut r: f64 = 0.0;
    for &m in modes {
        r = r.max(ab_root_modulus(alpha, m * dt));
        if r > 1.0 + STABILITY_SLACK {
            break;
        }
    }
    r
}

/// Largest stable step of plain k-step AB on `system` from its spectrum.
pub fn ab_reference_dt(
    system: &SemiDiscreteSystem,
    k: usize,
    opts: &StabilityOptions,
) -> Result<Boundary, StabilityError> {
    let alpha = CoefficientSet::new(k, 1)?.alpha_f64();
    let modes = operator_modes(system, opts)?;
    let mu_max = modes.first().map_or(1.0, |m| m.norm()).max(1e-300);
    bisect(
        |dt| {
            let r = modal_radius(&alpha, &modes, dt);
            Ok((r <= 1.0 + STABILITY_SLACK, r, RadiusMethod::Modal))
        },
        (0.1 / mu_max, 1.0 / mu_max),
        opts.tol_rel,
    )
}

/// A mesh/discretization/medium combination for CFL experiments.
#[derive(Clone, Debug)]
pub struct CflProblem {
    pub disc: Discretization,
    pub medium: Medium,
    pub penalty: Option<f64>,
    pub flux: Flux,
    pub domain: (f64, f64),
    pub fine_region: Option<(f64, f64)>,
    pub h_coarse: f64,
    pub interface: InterfaceRule,
}

impl CflProblem {
    pub fn system(&self, p: usize) -> Result<SemiDiscreteSystem, StabilityError> {
        self.system_on(self.domain, self.fine_region, p)
    }

    fn system_on(
        &self,
        domain: (f64, f64),
        fine: Option<(f64, f64)>,
        p: usize,
    ) -> Result<SemiDiscreteSystem, StabilityError> {
        let mesh = build_mesh(domain, fine, self.h_coarse, p)?;
        let asm = assemble(&mesh, &self.disc, &self.medium, self.penalty, self.flux)?;
        let part = fine_dof_mask(&mesh, &self.disc, self.interface);
        Ok(to_first_order(&asm, &part)?)
    }

    /// Plain AB limit on the equidistant coarse mesh. Nodal DG systems too
    /// large for a dense eigensolve use a shorter domain with the same `h`.
    pub fn reference_dt(&self, k: usize, opts: &StabilityOptions) -> Result<Boundary, StabilityError> {
        let sys = self.system_on(self.domain, None, 1)?;
        let needs_proxy = self.disc.family == Family::Ndg && sys.dim > opts.eig_cap;
        if !needs_proxy {
            return ab_reference_dt(&sys, k, opts);
        }
        let per_element = 2 * (self.disc.degree + 1);
        let n_el = (opts.eig_cap / per_element).max(2);
        let len = n_el as f64 * self.h_coarse;
        let proxy = self.system_on((self.domain.0, self.domain.0 + len), None, 1)?;
        log::info!(
            "reference step for {} P{} at h = {} taken on a proxy domain of {} elements",
            self.disc.family,
            self.disc.degree,
            self.h_coarse,
            n_el
        );
        ab_reference_dt(&proxy, k, opts)
    }

    /// CFL ratio of LTS-ABk(p) on the locally refined mesh.
    pub fn cfl(&self, k: usize, p: usize, opts: &StabilityOptions) -> Result<CflResult, StabilityError> {
        let reference = self.reference_dt(k, opts)?;
        let coeffs = CoefficientSet::new(k, p)?;
        let sys = self.system(p)?;
        let guess = reference.dt.unwrap_or(0.01 * self.h_coarse);
        let lts = max_stable_dt(&sys, &coeffs, (0.7 * guess, 1.02 * guess), opts)?;
        let ratio = match (lts.dt, reference.dt) {
            (Some(a), Some(b)) => Some(a / b),
            _ => None,
        };
        Ok(CflResult { dt_max: lts.dt, dt_ref: reference.dt, ratio, method: lts.method })
    }
}

/// One row of a CFL table.
#[derive(Clone, Debug)]
pub struct CflRow {
    pub family: Family,
    pub degree: usize,
    pub k: usize,
    pub p: usize,
    pub sigma: f64,
    pub h_coarse: f64,
    pub result: Result<CflResult, String>,
}

/// All combinations of the given cells, computed on a bounded worker pool.
/// Failed cells are reported in place.
pub fn cfl_ratio_table(
    cells: &[(CflProblem, usize, usize, f64)],
    opts: &StabilityOptions,
    workers: usize,
) -> Vec<CflRow> {
    let run = || {
        cells
            .par_iter()
            .map(|(prob, k, p, sigma)| CflRow {
                family: prob.disc.family,
                degree: prob.disc.degree,
                k: *k,
                p: *p,
                sigma: *sigma,
                h_coarse: prob.h_coarse,
                result: prob.cfl(*k, *p, opts).map_err(|e| e.to_string()),
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

/// `family,l,k,p,sigma,h_coarse,dt_ref,dt_max,ratio,method` rows; unstable
/// or failed entries are written as `-` / `NaN`.
pub fn write_cfl_csv<W: std::io::Write>(w: W, rows: &[CflRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["family", "l", "k", "p", "sigma", "h_coarse", "dt_ref", "dt_max", "ratio", "method"])?;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
    for r in rows {
        let (dt_ref, dt_max, ratio, method) = match &r.result {
            Ok(c) => (opt(c.dt_ref), opt(c.dt_max), c.ratio.map_or("-".into(), |v| format!("{v:.4}")), c.method.to_string()),
            Err(_) => ("NaN".into(), "NaN".into(), "NaN".into(), "error".into()),
        };
        out.write_record([
            r.family.to_string(),
            r.degree.to_string(),
            r.k.to_string(),
            r.p.to_string(),
            format!("{}", r.sigma),
            format!("{}", r.h_coarse),
            dt_ref,
            dt_max,
            ratio,
            method,
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh1d::DofPartition;
    use crate::sparse::Csr;
    use approx::assert_relative_eq;

    fn coeffs(k: usize, p: usize) -> CoefficientSet {
        CoefficientSet::new(k, p).unwrap()
    }

    #[test]
    fn scalar_ab2_companion_matches_probe() {
        let lambda = -3.0;
        let dt = 0.1;
        let mut s = Scheme::with_operator(&Csr::diagonal(&[lambda]), &[false], &coeffs(2, 1), dt).unwrap();
        let op = build_onestep(&mut s, 100).unwrap();
        let expect = scalar_ab_companion(&[1.5, -0.5], dt * lambda);
        assert_eq!(op.dim(), 2);
        for i in 0..2 {
            for j in 0..2 {
                assert!((op.matrix[[i, j]] - expect[[i, j]]).abs() < 1e-15);
            }
        }
        assert!((op.matrix[[0, 0]] - (1.0 + 1.5 * dt * lambda)).abs() < 1e-15);
        assert!((op.matrix[[0, 1]] + 0.5 * dt * lambda).abs() < 1e-15);
    }

    #[test]
    fn zero_step_radius_is_one() {
        let b = Csr::from_dense(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let mut s = Scheme::with_operator(&b, &[false, true], &coeffs(3, 2), 1e-300).unwrap();
        let op = build_onestep(&mut s, 100).unwrap();
        let r = spectral_radius(&op, 100, 1).unwrap();
        assert_relative_eq!(r.rho, 1.0, epsilon = 1e-12);
        let id = OneStepOperator { matrix: Array2::eye(5), layout: op.layout.clone() };
        assert_relative_eq!(spectral_radius(&id, 100, 1).unwrap().rho, 1.0, epsilon = 1e-14);
        assert_relative_eq!(spectral_radius(&id, 0, 1).unwrap().rho, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ab2_real_axis_boundary() {
        // Roots of zeta^2 - (1 + 3mu/2) zeta + mu/2 at mu = -1: 1/2 +- ... -> {-1, 1/2}.
        let alpha = [1.5, -0.5];
        let r = ab_root_modulus(&alpha, Complex64::new(-1.0, 0.0));
        assert_relative_eq!(r, 1.0, epsilon = 1e-12);
        let c = scalar_ab_companion(&alpha, -1.0);
        assert_relative_eq!(dense_spectral_radius(&c).unwrap(), 1.0, epsilon = 1e-12);
        assert!(ab_root_modulus(&alpha, Complex64::new(-1.01, 0.0)) > 1.0);
        assert!(ab_root_modulus(&alpha, Complex64::new(-0.99, 0.0)) < 1.0);
    }

    #[test]
    fn growth_estimate_matches_dense() {
        let a = ndarray::arr2(&[[0.9, 0.5, 0.0], [-0.5, 0.9, 0.1], [0.0, 0.0, 0.3]]);
        let exact = dense_spectral_radius(&a).unwrap();
        let g = growth_radius(3, |v| a.dot(&ndarray::ArrayView1::from(v)).to_vec(), 3000, 2, 3);
        assert!((g.rho - exact).abs() < 1e-3, "{} vs {exact}", g.rho);
        // Nilpotent shift: the transient is discarded and the radius is 0.
        let shift = ndarray::arr2(&[[0.0, 1.0], [0.0, 0.0]]);
        let g = growth_radius(2, |v| shift.dot(&ndarray::ArrayView1::from(v)).to_vec(), 100, 2, 3);
        assert_eq!(g.rho, 0.0);
    }

    #[test]
    fn probe_reproduces_step_on_random_histories() {
        let b = Csr::from_dense(&[
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![-2.0, 1.0, -0.1, 0.0],
            vec![1.0, -2.0, 0.0, -0.1],
        ]);
        let mask = [false, true, false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, p) in [(2, 2), (3, 2), (4, 3)] {
            let mut s = Scheme::with_operator(&b, &mask, &coeffs(k, p), 0.05).unwrap();
            let op = build_onestep(&mut s, 100).unwrap();
            for _ in 0..20 {
                let v: Vec<f64> = (0..op.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let direct = step_stacked(&mut s, &op.layout, &v);
                let via = op.apply(&v);
                let scale = norm2(&direct);
                for (a, b) in direct.iter().zip(&via) {
                    assert!((a - b).abs() <= 1e-13 * scale);
                }
            }
        }
    }

    #[test]
    fn lts_ab2_2_blocks_on_two_by_two_system() {
        // Companion of LTS-AB2(2) with P = diag(0, 1), expanded by hand.
        let b = ndarray::arr2(&[[-0.3, 1.0], [-2.0, -0.1]]);
        let bc = Csr::from_dense(&[vec![-0.3, 1.0], vec![-2.0, -0.1]]);
        let dt = 0.1;
        let mut s = Scheme::with_operator(&bc, &[false, true], &coeffs(2, 2), dt).unwrap();
        let op = build_onestep(&mut s, 100).unwrap();
        assert_eq!(op.dim(), 5);
        let i2 = Array2::<f64>::eye(2);
        let p = ndarray::arr2(&[[0.0, 0.0], [0.0, 1.0]]);
        let q = &i2 - &p;
        let bq = b.dot(&q);
        let bpm = b.dot(&p);
        let t = dt / 2.0;
        // y~_{1/2} = y_n + t B Q (5/4 y_n - 1/4 y_{n-1}) + t BP (3/2 y_n - 1/2 y_{-1/2})
        let h_yn = &i2 + &(bq.clone() * (t * 1.25)) + &(bpm.clone() * (t * 1.5));
        let h_y1 = bq.clone() * (-t * 0.25);
        let h_f = bpm.clone() * (-t * 0.5);
        // y_{n+1} = y~_{1/2} + t B Q (7/4 y_n - 3/4 y_{n-1}) + t BP (3/2 y~_{1/2} - 1/2 y_n)
        let bpp = bpm.dot(&p);
        let n_yn = &h_yn + &(bq.clone() * (t * 1.75)) + &(bpp.dot(&h_yn) * (t * 1.5)) - &(bpp.clone() * (t * 0.5));
        let n_y1 = &h_y1 - &(bq.clone() * (t * 0.75)) + &(bpp.dot(&h_y1) * (t * 1.5));
        let n_f = &h_f + &(bpp.dot(&h_f) * (t * 1.5));
        for i in 0..2 {
            for j in 0..2 {
                assert!((op.matrix[[i, j]] - n_yn[[i, j]]).abs() < 1e-15);
                assert!((op.matrix[[i, 2 + j]] - n_y1[[i, j]]).abs() < 1e-15);
                assert_eq!(op.matrix[[2 + i, j]], if i == j { 1.0 } else { 0.0 });
            }
            assert!((op.matrix[[i, 4]] - n_f[[i, 1]]).abs() < 1e-15);
        }
        // New fractional slot is the fine part of y~_{1/2}.
        assert!((op.matrix[[4, 0]] - h_yn[[1, 0]]).abs() < 1e-15);
        assert!((op.matrix[[4, 4]] - h_f[[1, 1]]).abs() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let b = Csr::identity(10);
        let mut s = Scheme::with_operator(&b, &[false; 10], &coeffs(4, 1), 0.1).unwrap();
        assert_eq!(build_onestep(&mut s, 39).unwrap_err(), StabilityError::CapExceeded { dim: 40, cap: 39 });
    }

    #[test]
    fn modal_reference_matches_companion_bisection() {
        let mesh = build_mesh((0.0, 2.0), None, 0.2, 1).unwrap();
        let disc = Discretization::new(Family::Cg, 1);
        let asm = assemble(&mesh, &disc, &Medium::constant(1.0, 0.1), None, Flux::Upwind).unwrap();
        let sys = to_first_order(&asm, &DofPartition::all_coarse(asm.n_scalar)).unwrap();
        let opts = StabilityOptions { tol_rel: 1e-5, ..Default::default() };
        for k in 2..=4 {
            let modal = ab_reference_dt(&sys, k, &opts).unwrap().dt.unwrap();
            let probe = max_stable_dt(&sys, &coeffs(k, 1), (0.5 * modal, 1.5 * modal), &opts).unwrap().dt.unwrap();
            assert!((modal - probe).abs() < 1e-4 * modal, "k={k}: {modal} vs {probe}");
        }
    }

    #[test]
    fn undamped_ab2_is_unconditionally_unstable() {
        let mesh = build_mesh((0.0, 2.0), None, 0.2, 1).unwrap();
        let disc = Discretization::new(Family::Cg, 1);
        let asm = assemble(&mesh, &disc, &Medium::constant(1.0, 0.0), None, Flux::Upwind).unwrap();
        let sys = to_first_order(&asm, &DofPartition::all_coarse(asm.n_scalar)).unwrap();
        let opts = StabilityOptions::default();
        assert_eq!(ab_reference_dt(&sys, 2, &opts).unwrap().dt, None);
        assert!(ab_reference_dt(&sys, 3, &opts).unwrap().dt.is_some());
    }

    #[test]
    fn sampled_spectrum_route_agrees_with_eigh() {
        let mesh = build_mesh((0.0, 6.0), None, 0.1, 1).unwrap();
        let disc = Discretization::new(Family::Ipdg, 1);
        let asm = assemble(&mesh, &disc, &Medium::constant(1.0, 0.1), Some(5.0), Flux::Upwind).unwrap();
        let sys = to_first_order(&asm, &DofPartition::all_coarse(asm.n_scalar)).unwrap();
        let exact = StabilityOptions { tol_rel: 1e-5, ..Default::default() };
        let sampled = StabilityOptions { eig_cap: 10, ..exact };
        let a = ab_reference_dt(&sys, 3, &exact).unwrap().dt.unwrap();
        let b = ab_reference_dt(&sys, 3, &sampled).unwrap().dt.unwrap();
        assert!((a - b).abs() < 2e-4 * a, "{a} vs {b}");
    }

    #[test]
    fn csv_marks_unstable_cells() {
        let rows = vec![CflRow {
            family: Family::Cg,
            degree: 1,
            k: 2,
            p: 2,
            sigma: 0.0,
            h_coarse: 0.1,
            result: Ok(CflResult { dt_max: None, dt_ref: None, ratio: None, method: RadiusMethod::Eig }),
        }];
        let mut buf = Vec::new();
        write_cfl_csv(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(1).unwrap(), "cg,1,2,2,0,0.1,-,-,-,eig");
    }
}

//! Adams-Bashforth time stepping, with and without local time-stepping in
//! the fine part of the system.
//!
//! The local scheme advances `dy/dt = B y` by one global step `dt` while the
//! unknowns selected by `P` take `p` substeps of `dt / p`:
//!
//! ```text
//! y~_{(m+1)/p} = y~_{m/p} + dtau sum_l beta_{m,l} B (I - P) y_{n-l}
//!                         + dtau B P sum_l alpha_l y~_{(m-l)/p}
//! ```
//!
//! Only rows reached by `B P` or belonging to the fine set change during the
//! substeps; every other row takes the plain Adams-Bashforth update.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffgen::CoefficientSet;
use crate::sparse::{norm2, CompactOperator, Csr};
use crate::spacedisc::SemiDiscreteSystem;

#[derive(Debug, Error, PartialEq)]
pub enum IntegratorError {
    #[error("history holds {got} coarse states, scheme needs {need}")]
    ColdHistory { got: usize, need: usize },
    #[error("coefficients are for (k={ck}, p={cp}), scheme is (k={k}, p={p})")]
    Mismatch { k: usize, p: usize, ck: usize, cp: usize },
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("exact start requested without an exact solution")]
    NoExactSolution,
    #[error("solution norm {norm:.3e} exceeds {limit:.1e} x initial norm at step {step} (t = {t})")]
    Unstable { step: usize, t: f64, norm: f64, limit: f64 },
}

/// How the first `k - 1` steps are provided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Startup {
    /// Sample the exact solution at negative times.
    #[default]
    Exact,
    /// Run classical RK4 with step `dt / p` from `t = 0`.
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchemeConfig {
    pub k: usize,
    pub p: usize,
    pub dt: f64,
    pub startup: Startup,
}

/// Operator application counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub steps: usize,
    /// Full-width products with `B (I - P)`.
    pub coarse_products: usize,
    /// Products with `B P` on fine-supported vectors.
    pub fine_products: usize,
    /// Full products with `B` (plain Adams-Bashforth path).
    pub full_products: usize,
}

/// Recent states of a multistep run. Index 0 is the newest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct StateHistory {
    /// `y[l] = y_{n-l}`, `l = 0..k`.
    pub y: VecDeque<Vec<f64>>,
    /// `w[l] = B (I - P) y_{n-l}`.
    pub w: VecDeque<Vec<f64>>,
    /// `fine[l - 1] = P y_{n-l/p}`, `l = 1..k`, zero outside the fine set.
    pub fine: VecDeque<Vec<f64>>,
    pub n: usize,
    pub t: f64,
}

impl StateHistory {
    pub fn current(&self) -> &[f64] {
        &self.y[0]
    }
}

/// Adams-Bashforth scheme bound to one system, coefficient set and step.
#[derive(Clone, Debug)]
pub struct Scheme {
    pub config: SchemeConfig,
    alpha: Vec<f64>,
    beta: Vec<Vec<f64>>,
    dim: usize,
    b: Csr,
    b_coarse: Csr,
    bp: CompactOperator,
    fine: Vec<usize>,
    mask: Vec<bool>,
    /// Rows changed by the substeps: rows of `B P` and the fine set.
    active: Vec<usize>,
    fine_in_active: Vec<usize>,
    bp_in_active: Vec<usize>,
    work: Workspace,
    pub stats: StepStats,
}

/// Buffers reused across steps.
#[derive(Clone, Debug, Default)]
struct Workspace {
    seq: Vec<Vec<f64>>,
    ya: Vec<f64>,
    wa: Vec<f64>,
    comb: Vec<f64>,
}

impl Scheme {
    pub fn new(system: &SemiDiscreteSystem, coeffs: &CoefficientSet, dt: f64) -> Result<Self, IntegratorError> {
        Self::with_operator(&system.b, &system.partition.fine_mask, coeffs, dt)
    }

    pub fn with_operator(b: &Csr, mask: &[bool], coeffs: &CoefficientSet, dt: f64) -> Result<Self, IntegratorError> {
        if !(dt > 0.0) {
            return Err(IntegratorError::TimeStep(dt));
        }
        let dim = b.nrows();
        assert_eq!(mask.len(), dim, "mask length must match the operator");
        let fine: Vec<usize> = (0..dim).filter(|&i| mask[i]).collect();
        let b_coarse = b.filter_columns(|j| !mask[j]).pruned();
        let bp = CompactOperator::from_columns(b, &fine);
        let mut in_active = vec![false; dim];
        for &i in fine.iter().chain(&bp.rows) {
            in_active[i] = true;
        }
        let active: Vec<usize> = (0..dim).filter(|&i| in_active[i]).collect();
        let mut pos = vec![usize::MAX; dim];
        for (r, &i) in active.iter().enumerate() {
            pos[i] = r;
        }
        let fine_in_active = fine.iter().map(|&i| pos[i]).collect();
        let bp_in_active = bp.rows.iter().map(|&i| pos[i]).collect();
        Ok(Self {
            config: SchemeConfig { k: coeffs.k, p: coeffs.p, dt, startup: Startup::Exact },
            alpha: coeffs.alpha_f64(),
            beta: coeffs.beta_f64(),
            dim,
            b: b.clone(),
            b_coarse,
            bp,
            fine,
            mask: mask.to_vec(),
            active,
            fine_in_active,
            bp_in_active,
            work: Workspace::default(),
            stats: StepStats::default(),
        })
    }

    /// Scheme for `config`, checking that `coeffs` were generated for the
    /// same `(k, p)`.
    pub fn from_config(
        system: &SemiDiscreteSystem,
        coeffs: &CoefficientSet,
        config: SchemeConfig,
    ) -> Result<Self, IntegratorError> {
        if (coeffs.k, coeffs.p) != (config.k, config.p) {
            return Err(IntegratorError::Mismatch { k: config.k, p: config.p, ck: coeffs.k, cp: coeffs.p });
        }
        Ok(Self::new(system, coeffs, config.dt)?.with_startup(config.startup))
    }

    pub fn with_startup(mut self, startup: Startup) -> Self {
        self.config.startup = startup;
        self
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn operator(&self) -> &Csr {
        &self.b
    }

    pub fn fine_indices(&self) -> &[usize] {
        &self.fine
    }

    pub fn fine_mask(&self) -> &[bool] {
        &self.mask
    }

    /// `B (I - P) y`.
    pub fn coarse_product(&self, y: &[f64]) -> Vec<f64> {
        self.b_coarse.mul_vec(y)
    }

    /// `P y`.
    pub fn select_fine(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &i in &self.fine {
            out[i] = y[i];
        }
        out
    }

    /// History from samples; `sample(j)` returns the state at `t0 + j dt / p`
    /// for `j = -(k-1) p ..= 0`.
    pub fn history_from(&self, n: usize, t0: f64, mut sample: impl FnMut(isize) -> Vec<f64>) -> StateHistory {
        let (k, p) = (self.k() as isize, self.p() as isize);
        let mut y = VecDeque::new();
        let mut w = VecDeque::new();
        for l in 0..k {
            let s = sample(-l * p);
            w.push_back(self.coarse_product(&s));
            y.push_back(s);
        }
        let fine = (1..k).map(|l| self.select_fine(&sample(-l))).collect();
        StateHistory { y, w, fine, n, t: t0 }
    }

    fn check(&self, hist: &StateHistory) -> Result<(), IntegratorError> {
        let k = self.k();
        if hist.y.len() < k || hist.w.len() < k || hist.fine.len() + 1 < k {
            return Err(IntegratorError::ColdHistory { got: hist.y.len().min(hist.w.len()), need: k });
        }
        Ok(())
    }

    /// Plain k-step Adams-Bashforth step `y_{n+1} = y_n + dt B sum_l alpha_l y_{n-l}`.
    /// Maintains `y` and `w`; the fractional fine history is left as is.
    pub fn ab_step(&mut self, hist: &mut StateHistory) -> Result<(), IntegratorError> {
        self.check(hist)?;
        let mut comb = vec![0.0; self.dim];
        for (a, y) in self.alpha.iter().zip(&hist.y) {
            for (c, v) in comb.iter_mut().zip(y) {
                *c += a * v;
            }
        }
        let bc = self.b.mul_vec(&comb);
        self.stats.full_products += 1;
        let dt = self.dt();
        let next: Vec<f64> = hist.y[0].iter().zip(&bc).map(|(y, b)| y + dt * b).collect();
        self.push(hist, next);
        Ok(())
    }

    fn push(&mut self, hist: &mut StateHistory, next: Vec<f64>) {
        let k = self.k();
        // Recycle the buffer of the history entry that drops out.
        let mut wn = if hist.w.len() >= k { hist.w.pop_back().unwrap() } else { vec![0.0; self.dim] };
        wn.resize(self.dim, 0.0);
        self.b_coarse.mul_vec_into(&next, &mut wn);
        self.stats.coarse_products += 1;
        self.stats.steps += 1;
        hist.y.push_front(next);
        hist.w.push_front(wn);
        hist.y.truncate(k);
        hist.w.truncate(k);
        hist.n += 1;
        hist.t = hist.n as f64 * self.dt();
    }

    /// One global step of the local time-stepping scheme.
    pub fn lts_ab_step(&mut self, hist: &mut StateHistory) -> Result<(), IntegratorError> {
        self.check(hist)?;
        let (k, p) = (self.k(), self.p());
        let dt = self.dt();
        let dtau = dt / p as f64;
        let nf = self.fine.len();
        let na = self.active.len();

        // Rows outside the active set: plain AB update from cached w.
        let mut next = hist.y[0].clone();
        for (a, w) in self.alpha.iter().zip(&hist.w) {
            let s = dt * a;
            for (y, v) in next.iter_mut().zip(w) {
                *y += s * v;
            }
        }

        if na > 0 {
            let mut work = std::mem::take(&mut self.work);
            // seq[j + k - 1] = fine part of y~_{j/p}, j = -(k-1) ..= p.
            work.seq.resize_with(k + p, Vec::new);
            for v in work.seq.iter_mut() {
                v.resize(nf, 0.0);
            }
            for l in 1..k {
                let src = &hist.fine[l - 1];
                for (s, &i) in work.seq[k - 1 - l].iter_mut().zip(&self.fine) {
                    *s = src[i];
                }
            }
            for (s, &i) in work.seq[k - 1].iter_mut().zip(&self.fine) {
                *s = hist.y[0][i];
            }
            work.ya.clear();
            work.ya.extend(self.active.iter().map(|&i| hist.y[0][i]));
            work.comb.resize(nf, 0.0);
            // w history on the active rows, interleaved: wa[r * k + l].
            work.wa.clear();
            work.wa.resize(na * k, 0.0);
            for (l, w) in hist.w.iter().take(k).enumerate() {
                for (r, &i) in self.active.iter().enumerate() {
                    work.wa[r * k + l] = w[i];
                }
            }
            let mut sb = vec![0.0; k];
            for m in 0..p {
                for (s, b) in sb.iter_mut().zip(&self.beta[m]) {
                    *s = dtau * b;
                }
                for (y, w) in work.ya.iter_mut().zip(work.wa.chunks_exact(k)) {
                    *y += sb.iter().zip(w).map(|(s, w)| s * w).sum::<f64>();
                }
                work.comb.iter_mut().for_each(|c| *c = 0.0);
                for (l, a) in self.alpha.iter().enumerate() {
                    for (c, v) in work.comb.iter_mut().zip(&work.seq[m + k - 1 - l]) {
                        *c += a * v;
                    }
                }
                let ya = &mut work.ya;
                let slots = &self.bp_in_active;
                self.bp.for_each_row(&work.comb, |r, v| ya[slots[r]] += dtau * v);
                self.stats.fine_products += 1;
                let dst = &mut work.seq[m + k];
                for (d, &r) in dst.iter_mut().zip(&self.fine_in_active) {
                    *d = work.ya[r];
                }
            }
            for (&i, v) in self.active.iter().zip(&work.ya) {
                next[i] = *v;
            }
            // Fine history for the next step: P y~_{(p-l)/p}.
            hist.fine.truncate(k - 1);
            for l in 1..k {
                let src = &work.seq[p + k - 1 - l];
                let dst = &mut hist.fine[l - 1];
                for (&i, v) in self.fine.iter().zip(src) {
                    dst[i] = *v;
                }
            }
            self.work = work;
        }
        self.push(hist, next);
        Ok(())
    }

    /// Advances `hist` to time `t_end` (snapped to a whole number of steps),
    /// calling `observer(step, t, state)` after each step.
    pub fn run(
        &mut self,
        hist: &mut StateHistory,
        t_end: f64,
        mut observer: impl FnMut(usize, f64, &[f64]),
    ) -> Result<RunSummary, IntegratorError> {
        let dt = self.dt();
        let total = (t_end / dt).round().max(0.0) as usize;
        let snapped = total as f64 * dt;
        if (snapped - t_end).abs() > 1e-9 * dt.max(t_end.abs()) {
            log::warn!("final time {t_end} is not a multiple of dt = {dt}; using T = {snapped} ({total} steps)");
        }
        let initial = norm2(&hist.y[0]).max(f64::MIN_POSITIVE);
        const LIMIT: f64 = 1e12;
        while hist.n < total {
            self.lts_ab_step(hist)?;
            let norm = norm2(&hist.y[0]);
            if !(norm <= LIMIT * initial) {
                return Err(IntegratorError::Unstable { step: hist.n, t: hist.t, norm, limit: LIMIT });
            }
            observer(hist.n, hist.t, &hist.y[0]);
        }
        Ok(RunSummary { steps: total, t_end: snapped })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub t_end: f64,
}

/// Startup history. Exact mode samples `exact(t)` at `t = -l dt` and
/// `t = -l dt / p`; RK4 mode integrates forward from `y0` with step `dt / p`
/// for `k - 1` global steps, so the scheme starts at step `k - 1`.
pub fn warm_start(
    scheme: &Scheme,
    y0: &[f64],
    exact: Option<&dyn Fn(f64) -> Vec<f64>>,
) -> Result<StateHistory, IntegratorError> {
    let (k, p, dt) = (scheme.k(), scheme.p(), scheme.dt());
    let tau = dt / p as f64;
    match scheme.config.startup {
        Startup::Exact => {
            let exact = exact.ok_or(IntegratorError::NoExactSolution)?;
            Ok(scheme.history_from(0, 0.0, |j| if j == 0 { y0.to_vec() } else { exact(j as f64 * tau) }))
        }
        Startup::Rk4 => {
            let subs = (k - 1) * p;
            let mut states = vec![y0.to_vec()];
            for _ in 0..subs {
                let next = rk4_step(scheme.operator(), states.last().unwrap(), tau);
                states.push(next);
            }
            let n = k - 1;
            Ok(scheme.history_from(n, n as f64 * dt, |j| states[(subs as isize + j) as usize].clone()))
        }
    }
}

/// One classical RK4 step for `dy/dt = B y`.
pub fn rk4_step(b: &Csr, y: &[f64], h: f64) -> Vec<f64> {
    let axpy = |a: &[f64], s: f64, x: &[f64]| -> Vec<f64> { a.iter().zip(x).map(|(a, x)| a + s * x).collect() };
    let k1 = b.mul_vec(y);
    let k2 = b.mul_vec(&axpy(y, h / 2.0, &k1));
    let k3 = b.mul_vec(&axpy(y, h / 2.0, &k2));
    let k4 = b.mul_vec(&axpy(y, h, &k3));
    y.iter()
        .enumerate()
        .map(|(i, v)| v + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// RK4 from `y0` over `steps` steps of size `h`.
pub fn rk4_integrate(b: &Csr, y0: &[f64], h: f64, steps: usize) -> Vec<f64> {
    (0..steps).fold(y0.to_vec(), |y, _| rk4_step(b, &y, h))
}

/// Writes `t,dof_0,...` rows.
pub fn write_state_series<W: Write>(w: W, rows: &[(f64, Vec<f64>)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n = rows.first().map_or(0, |r| r.1.len());
    let header: Vec<String> = std::iter::once("t".to_string()).chain((0..n).map(|i| format!("dof_{i}"))).collect();
    out.write_record(&header)?;
    for (t, y) in rows {
        out.write_record(std::iter::once(format!("{t}")).chain(y.iter().map(|v| format!("{v:e}"))))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `t,l2_error` rows.
pub fn write_error_series<W: Write>(w: W, rows: &[(f64, f64)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "l2_error"])?;
    for (t, e) in rows {
        out.write_record([format!("{t}"), format!("{e:e}")])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffgen::CoefficientSet;
    use crate::sparse::TripletBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coeffs(k: usize, p: usize) -> CoefficientSet {
        CoefficientSet::new(k, p).unwrap()
    }

    fn scalar(lambda: f64) -> Csr {
        Csr::diagonal(&[lambda])
    }

    #[test]
    fn ab2_hand_value() {
        let mut s = Scheme::with_operator(&scalar(-1.0), &[false], &coeffs(2, 1), 0.1).unwrap();
        let mut h = s.history_from(0, 0.0, |_| vec![1.0]);
        s.ab_step(&mut h).unwrap();
        assert!((h.y[0][0] - 0.9).abs() < 1e-15);
        let mut h2 = s.history_from(0, 0.0, |_| vec![1.0]);
        s.lts_ab_step(&mut h2).unwrap();
        assert!((h2.y[0][0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn forward_euler_and_zero_operator() {
        let mut s = Scheme::with_operator(&scalar(-3.0), &[false], &coeffs(1, 1), 0.01).unwrap();
        let mut h = s.history_from(0, 0.0, |_| vec![2.0]);
        s.lts_ab_step(&mut h).unwrap();
        assert!((h.y[0][0] - 2.0 * (1.0 - 0.03)).abs() < 1e-15);

        let zero = Csr::zeros(3, 3);
        let mut s = Scheme::with_operator(&zero, &[false, true, true], &coeffs(3, 4), 0.1).unwrap();
        let mut h = s.history_from(0, 0.0, |_| vec![1.0, -2.0, 3.0]);
        for _ in 0..5 {
            s.lts_ab_step(&mut h).unwrap();
        }
        assert_eq!(h.y[0], vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn cold_history_and_mismatch_rejected() {
        let mut s = Scheme::with_operator(&scalar(-1.0), &[false], &coeffs(3, 1), 0.1).unwrap();
        let mut h = s.history_from(0, 0.0, |_| vec![1.0]);
        h.y.pop_back();
        assert!(matches!(s.lts_ab_step(&mut h), Err(IntegratorError::ColdHistory { .. })));
        assert_eq!(
            Scheme::with_operator(&scalar(-1.0), &[false], &coeffs(3, 1), 0.0).unwrap_err(),
            IntegratorError::TimeStep(0.0)
        );
        let sys = SemiDiscreteSystem::from_operator(toy(1.0, 0.0), crate::mesh1d::DofPartition::all_coarse(2));
        let cfg = SchemeConfig { k: 2, p: 2, dt: 0.1, startup: Startup::Rk4 };
        assert_eq!(
            Scheme::from_config(&sys, &coeffs(3, 2), cfg).unwrap_err(),
            IntegratorError::Mismatch { k: 2, p: 2, ck: 3, cp: 2 }
        );
        assert_eq!(Scheme::from_config(&sys, &coeffs(2, 2), cfg).unwrap().config, cfg);
    }

    fn toy(omega2: f64, sigma: f64) -> Csr {
        Csr::from_dense(&[vec![0.0, 1.0], vec![-omega2, -sigma]])
    }

    /// Literal expansion of one LTS-AB2(2) step for B with P = diag(0, 1).
    #[test]
    fn lts_ab2_2_matches_literal_expansion() {
        let b = toy(3.0, 0.4);
        let dt = 0.07;
        let mut s = Scheme::with_operator(&b, &[false, true], &coeffs(2, 2), dt).unwrap();
        let y0 = vec![0.3, -0.8];
        let y1 = vec![0.25, -0.6];
        let f_half = vec![0.0, -0.7];
        let mut h = StateHistory {
            y: VecDeque::from(vec![y0.clone(), y1.clone()]),
            w: VecDeque::from(vec![s.coarse_product(&y0), s.coarse_product(&y1)]),
            fine: VecDeque::from(vec![f_half.clone()]),
            n: 1,
            t: dt,
        };
        s.lts_ab_step(&mut h).unwrap();

        let bm = b.to_dense();
        let mul = |v: &[f64]| [bm[0][0] * v[0] + bm[0][1] * v[1], bm[1][0] * v[0] + bm[1][1] * v[1]];
        let pr = |v: &[f64]| [0.0, v[1]];
        let qr = |v: &[f64]| [v[0], 0.0];
        let dtau = dt / 2.0;
        let (w0, w1) = (mul(&qr(&y0)), mul(&qr(&y1)));
        let (a0, a1) = (1.5, -0.5);
        // m = 0: beta_0 = (5/4, -1/4)
        let bp0 = mul(&pr(&[a0 * y0[0] + a1 * f_half[0], a0 * y0[1] + a1 * f_half[1]]));
        let yh: Vec<f64> = (0..2).map(|i| y0[i] + dtau * (1.25 * w0[i] - 0.25 * w1[i]) + dtau * bp0[i]).collect();
        // m = 1: beta_1 = (7/4, -3/4)
        let bp1 = mul(&pr(&[a0 * yh[0] + a1 * y0[0], a0 * yh[1] + a1 * y0[1]]));
        let y2: Vec<f64> = (0..2).map(|i| yh[i] + dtau * (1.75 * w0[i] - 0.75 * w1[i]) + dtau * bp1[i]).collect();
        for i in 0..2 {
            assert!((h.y[0][i] - y2[i]).abs() < 1e-15, "{:?} vs {:?}", h.y[0], y2);
        }
        assert!((h.fine[0][1] - yh[1]).abs() < 1e-15);
        assert_eq!(h.fine[0][0], 0.0);
        assert_eq!(s.stats.coarse_products, 1);
        assert_eq!(s.stats.fine_products, 2);
    }

    /// First substep of LTS-AB3(2) in closed form.
    #[test]
    fn lts_ab3_2_first_half_step() {
        let b = toy(2.0, 0.3);
        let dt = 0.05;
        let mut s = Scheme::with_operator(&b, &[false, true], &coeffs(3, 2), dt).unwrap();
        let ys = [vec![0.3, -0.8], vec![0.2, -0.7], vec![0.1, -0.5]];
        let f = [vec![0.0, -0.75], vec![0.0, -0.7]];
        let mut h = StateHistory {
            y: ys.iter().cloned().collect(),
            w: ys.iter().map(|y| s.coarse_product(y)).collect(),
            fine: f.iter().cloned().collect(),
            n: 2,
            t: 2.0 * dt,
        };
        s.lts_ab_step(&mut h).unwrap();
        let bm = b.to_dense();
        let mul = |v: [f64; 2]| [bm[0][0] * v[0] + bm[0][1] * v[1], bm[1][0] * v[0] + bm[1][1] * v[1]];
        let c = |a: f64, b: f64, c3: f64, i: usize, src: [&[f64]; 3]| a * src[0][i] + b * src[1][i] + c3 * src[2][i];
        let coarse = mul([c(17.0 / 12.0, -7.0 / 12.0, 2.0 / 12.0, 0, [&ys[0], &ys[1], &ys[2]]), 0.0]);
        let fine = mul([0.0, c(23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0, 1, [&ys[0], &f[0], &ys[1]])]);
        let half: Vec<f64> = (0..2).map(|i| ys[0][i] + dt / 2.0 * (coarse[i] + fine[i])).collect();
        // The new fine history entry P y~_{1/2}.
        assert!((h.fine[0][1] - half[1]).abs() < 1e-15);
    }

    fn random_stable(n: usize, rng: &mut ChaCha8Rng) -> Csr {
        // Skew part plus negative diagonal keeps the spectrum in the left half plane.
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, -rng.gen_range(0.1..1.0));
            for _ in 0..3 {
                let j = rng.gen_range(0..n);
                if j != i {
                    let v = rng.gen_range(-1.0..1.0);
                    b.add(i, j, v);
                    b.add(j, i, -v);
                }
            }
        }
        b.build()
    }

    #[test]
    fn reduction_to_ab_for_p1_and_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = 6;
            let b = random_stable(n, &mut rng);
            let k = 1 + trial % 4;
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let p = if trial % 2 == 0 { 1 } else { 3 };
            let mask = if p == 1 { mask } else { vec![false; n] };
            let mut lts = Scheme::with_operator(&b, &mask, &coeffs(k, p), 0.05).unwrap();
            let mut ab = Scheme::with_operator(&b, &vec![false; n], &coeffs(k, 1), 0.05).unwrap();
            let start: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut h1 = lts.history_from(0, 0.0, |j| start[(-j) as usize / p].clone());
            let mut h2 = ab.history_from(0, 0.0, |j| start[(-j) as usize].clone());
            lts.lts_ab_step(&mut h1).unwrap();
            ab.ab_step(&mut h2).unwrap();
            let scale = norm2(&h2.y[0]);
            for (a, b) in h1.y[0].iter().zip(&h2.y[0]) {
                assert!((a - b).abs() <= 1e-14 * scale, "trial {trial}");
            }
        }
    }

    #[test]
    fn cost_counts_and_history_integrity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let b = random_stable(n, &mut rng);
        let mask: Vec<bool> = (0..n).map(|i| (4..8).contains(&i)).collect();
        let mut s = Scheme::with_operator(&b, &mask, &coeffs(3, 5), 0.02).unwrap();
        let mut h = s.history_from(0, 0.0, |j| (0..n).map(|i| ((i as isize + j) as f64).sin()).collect());
        let before = s.stats;
        for _ in 0..7 {
            s.lts_ab_step(&mut h).unwrap();
            for (y, w) in h.y.iter().zip(&h.w) {
                assert_eq!(&s.coarse_product(y), w);
            }
            for f in &h.fine {
                for i in 0..n {
                    if !mask[i] {
                        assert_eq!(f[i], 0.0);
                    }
                }
            }
        }
        assert_eq!(s.stats.coarse_products - before.coarse_products, 7);
        assert_eq!(s.stats.fine_products - before.fine_products, 35);
        assert_eq!(s.stats.full_products, 0);
        assert_eq!((h.y.len(), h.w.len(), h.fine.len()), (3, 3, 2));
    }

    #[test]
    fn step_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 8;
        let b = random_stable(n, &mut rng);
        let mask: Vec<bool> = (0..n).map(|i| i >= 5).collect();
        let mut s = Scheme::with_operator(&b, &mask, &coeffs(4, 3), 0.03).unwrap();
        let r1: Vec<Vec<f64>> = (0..10).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r2: Vec<Vec<f64>> = (0..10).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let idx = |j: isize| (-j) as usize;
        let mut h1 = s.history_from(0, 0.0, |j| r1[idx(j)].clone());
        let mut h2 = s.history_from(0, 0.0, |j| r2[idx(j)].clone());
        let mut h3 = s.history_from(0, 0.0, |j| r1[idx(j)].iter().zip(&r2[idx(j)]).map(|(a, b)| 2.0 * a - b).collect());
        for h in [&mut h1, &mut h2, &mut h3] {
            s.lts_ab_step(h).unwrap();
        }
        for i in 0..n {
            assert!((2.0 * h1.y[0][i] - h2.y[0][i] - h3.y[0][i]).abs() < 1e-13);
        }
    }

    #[test]
    fn rk4_start_close_to_exact_start() {
        let b = toy(4.0, 0.2);
        let (om, sg) = (4.0f64, 0.2f64);
        let wd = (om - sg * sg / 4.0).sqrt();
        let exact = move |t: f64| {
            let e = (-sg * t / 2.0).exp();
            let u = e * (wd * t).sin() / wd;
            let v = e * ((wd * t).cos() - sg / 2.0 * (wd * t).sin() / wd);
            vec![u, v]
        };
        for dt in [0.04, 0.02] {
            let s = Scheme::with_operator(&b, &[false, true], &coeffs(3, 2), dt).unwrap().with_startup(Startup::Rk4);
            let h = warm_start(&s, &exact(0.0), None).unwrap();
            assert_eq!(h.n, 2);
            for (l, y) in h.y.iter().enumerate() {
                let e = exact((2 - l) as f64 * dt);
                let err = (y[0] - e[0]).abs().max((y[1] - e[1]).abs());
                assert!(err < 0.5 * dt.powi(4), "dt={dt} l={l} err={err}");
            }
            let s = s.with_startup(Startup::Exact);
            assert_eq!(warm_start(&s, &exact(0.0), None).unwrap_err(), IntegratorError::NoExactSolution);
            let h = warm_start(&s, &exact(0.0), Some(&exact)).unwrap();
            assert_eq!(h.y[2], exact(-2.0 * dt));
            assert_eq!(h.fine[0], vec![0.0, exact(-dt / 2.0)[1]]);
        }
    }

    #[test]
    fn run_snaps_and_detects_blow_up() {
        let b = toy(4.0, 0.0);
        let mut s = Scheme::with_operator(&b, &[false, false], &coeffs(2, 1), 0.01).unwrap();
        let mut h = s.history_from(0, 0.0, |_| vec![1.0, 0.0]);
        let summary = s.run(&mut h, 0.0, |_, _, _| {}).unwrap();
        assert_eq!(summary.steps, 0);
        assert_eq!(h.y[0], vec![1.0, 0.0]);
        let mut seen = 0;
        let summary = s.run(&mut h, 0.1049, |_, _, _| seen += 1).unwrap();
        assert_eq!((summary.steps, seen), (10, 10));

        let mut s = Scheme::with_operator(&scalar(-100.0), &[false], &coeffs(2, 1), 0.5).unwrap();
        let mut h = s.history_from(0, 0.0, |_| vec![1.0]);
        assert!(matches!(s.run(&mut h, 100.0, |_, _, _| {}), Err(IntegratorError::Unstable { .. })));
    }

    #[test]
    fn time_series_csv() {
        let mut buf = Vec::new();
        write_state_series(&mut buf, &[(0.0, vec![1.0, 2.0]), (0.5, vec![0.5, 0.25])]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,dof_0,dof_1\n0,1e0,2e0\n"));
        let mut buf = Vec::new();
        write_error_series(&mut buf, &[(1.0, 0.125)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,l2_error\n1,1.25e-1\n");
    }
}

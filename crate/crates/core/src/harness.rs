//! Experiment orchestration: configuration files, the closed-form damped
//! standing wave, convergence and CFL studies, single runs and CSV output.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::{self, IntoDeserializer};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coeffgen::{CoeffError, CoefficientSet};
use crate::integrator::{warm_start, IntegratorError, Scheme, SchemeConfig, Startup};
use crate::mesh1d::{build_mesh, fine_dof_mask, Boundary, Discretization, Family, InterfaceRule, Mesh1D, MeshError};
use crate::spacedisc::{
    assemble, default_penalty, l2_error, project_initial, to_first_order, Flux, GridFunction, Layout, Medium,
    SemiDiscreteSystem, SpaceError,
};
use crate::stability::{cfl_ratio_table, CflProblem, CflRow, StabilityError, StabilityOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("closed-form solution needs sigma < 2 pi, got {0}")]
    Overdamped(f64),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("no stable Adams-Bashforth step for {0}")]
    NoReferenceStep(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Overdamped(_) | HarnessError::Coeff(_) => 2,
            HarnessError::Integrator(IntegratorError::Unstable { .. }) => 3,
            _ => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Closed-form test problem

/// `u`, its first and second partial derivatives, for the damped standing
/// wave with `c = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactDerivatives {
    pub u: f64,
    pub u_t: f64,
    pub u_tt: f64,
    pub u_x: f64,
    pub u_xx: f64,
}

/// `u = 2 e^{-sigma t / 2} / sqrt(4 pi^2 - sigma^2) sin(pi x) sin(omega t)`
/// with `omega = sqrt(4 pi^2 - sigma^2) / 2`.
pub fn exact_derivatives(x: f64, t: f64, sigma: f64) -> Result<ExactDerivatives, HarnessError> {
    use std::f64::consts::PI;
    let disc = 4.0 * PI * PI - sigma * sigma;
    if !(disc > 0.0) || !sigma.is_finite() {
        return Err(HarnessError::Overdamped(sigma));
    }
    let root = disc.sqrt();
    let omega = 0.5 * root;
    let amp = 2.0 / root;
    let decay = (-0.5 * sigma * t).exp();
    let (sw, cw) = (omega * t).sin_cos();
    let (sx, cx) = (PI * x).sin_cos();
    // Time factor T(t) = amp e^{-sigma t/2} sin(omega t) and its derivatives.
    let tt0 = amp * decay * sw;
    let tt1 = amp * decay * (omega * cw - 0.5 * sigma * sw);
    let tt2 = amp * decay * ((0.25 * sigma * sigma - omega * omega) * sw - sigma * omega * cw);
    Ok(ExactDerivatives {
        u: sx * tt0,
        u_t: sx * tt1,
        u_tt: sx * tt2,
        u_x: PI * cx * tt0,
        u_xx: -PI * PI * sx * tt0,
    })
}

/// `(u, v, w)` with `v = u_t` and `w = -u_x`.
pub fn exact_solution(x: f64, t: f64, sigma: f64) -> Result<(f64, f64, f64), HarnessError> {
    let d = exact_derivatives(x, t, sigma)?;
    Ok((d.u, d.u_t, -d.u_x))
}

/// `u_tt + sigma u_t - u_xx` of the closed form.
pub fn pde_residual(x: f64, t: f64, sigma: f64) -> Result<f64, HarnessError> {
    let d = exact_derivatives(x, t, sigma)?;
    Ok(d.u_tt + sigma * d.u_t - d.u_xx)
}

// ---------------------------------------------------------------------------
// Configuration

/// A scalar or a list in the config file.
#[derive(Clone, Debug, PartialEq)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }

    pub fn single(&self, name: &str) -> Result<T, HarnessError> {
        match self {
            OneOrMany::One(v) => Ok(v.clone()),
            OneOrMany::Many(v) if v.len() == 1 => Ok(v[0].clone()),
            OneOrMany::Many(v) => Err(HarnessError::Config(format!("`{name}` must be a single value, got {} values", v.len()))),
        }
    }
}

impl<T: Serialize> Serialize for OneOrMany<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            OneOrMany::One(v) => v.serialize(s),
            OneOrMany::Many(v) => v.serialize(s),
        }
    }
}

struct OneOrManyVisitor<T>(PhantomData<T>);

impl<'de, T: Deserialize<'de>> de::Visitor<'de> for OneOrManyVisitor<T> {
    type Value = OneOrMany<T>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a value or a list of values")
    }

    fn visit_seq<A: de::SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
        let mut out = Vec::new();
        while let Some(v) = seq.next_element()? {
            out.push(v);
        }
        Ok(OneOrMany::Many(out))
    }

    fn visit_bool<E: de::Error>(self, v: bool) -> Result<Self::Value, E> {
        T::deserialize(v.into_deserializer()).map(OneOrMany::One)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
        T::deserialize(v.into_deserializer()).map(OneOrMany::One)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
        T::deserialize(v.into_deserializer()).map(OneOrMany::One)
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
        T::deserialize(v.into_deserializer()).map(OneOrMany::One)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
        T::deserialize(v.into_deserializer()).map(OneOrMany::One)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for OneOrMany<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(OneOrManyVisitor(PhantomData))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Coeffs,
    #[default]
    Converge,
    Stability,
    Run,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Coeffs => "coeffs",
            Experiment::Converge => "converge",
            Experiment::Stability => "stability",
            Experiment::Run => "run",
        })
    }
}

/// How the global step is chosen for each mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DtRule {
    Fixed { value: f64 },
    /// `factor * dt_ABk` of the equidistant coarse mesh; the factor defaults
    /// to 0.8 for `k = 2` and 1 otherwise.
    FracOfAb {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        factor: Option<f64>,
    },
}

impl Default for DtRule {
    fn default() -> Self {
        DtRule::FracOfAb { factor: None }
    }
}

impl DtRule {
    pub fn factor(&self, k: usize) -> f64 {
        match *self {
            DtRule::FracOfAb { factor: Some(f) } => f,
            _ if k == 2 => 0.8,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub dense_cap: usize,
    pub eig_cap: usize,
    pub tol_rel: f64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        let o = StabilityOptions::default();
        Self { dense_cap: o.dense_cap, eig_cap: o.eig_cap, tol_rel: o.tol_rel }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Steps between rows of the time series; 0 picks about 200 rows.
    pub every: usize,
    /// Sample points of the final snapshot.
    pub snapshot_points: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { every: 0, snapshot_points: 601 }
    }
}

/// Everything an experiment needs; reproducible from the file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub family: OneOrMany<Family>,
    /// Polynomial degree; `k - 1` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    pub k: OneOrMany<usize>,
    pub p: OneOrMany<usize>,
    pub sigma: OneOrMany<f64>,
    pub c: f64,
    pub domain: [f64; 2],
    pub fine_region: [f64; 2],
    /// Coarse mesh sizes.
    pub h: OneOrMany<f64>,
    pub dt: DtRule,
    #[serde(alias = "T")]
    pub t_end: f64,
    pub startup: Startup,
    /// Interior-penalty parameter; per-degree default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    pub flux: Flux,
    pub boundary: Boundary,
    /// Per-family default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interface: Option<InterfaceRule>,
    pub output: PathBuf,
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub stability: StabilitySection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Converge,
            family: OneOrMany::One(Family::Cg),
            degree: None,
            k: OneOrMany::One(2),
            p: OneOrMany::Many(vec![2, 5, 7]),
            sigma: OneOrMany::One(0.1),
            c: 1.0,
            domain: [0.0, 6.0],
            fine_region: [2.0, 4.0],
            h: OneOrMany::Many(vec![0.02, 0.01, 0.005, 0.0025]),
            dt: DtRule::default(),
            t_end: 10.0,
            startup: Startup::Exact,
            penalty: None,
            flux: Flux::Upwind,
            boundary: Boundary::Dirichlet,
            interface: None,
            output: PathBuf::from("out"),
            seed: 7,
            workers: None,
            stability: StabilitySection::default(),
            run: RunSection::default(),
        }
    }
}

/// Sets `key = value` (dotted keys address sub-tables) in a parsed document.
/// The value is read as a TOML value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(HarnessError::Config(format!("override '{assignment}' has an empty key")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config document and applies `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let cfg: Self = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?
        } else {
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            Self::deserialize(toml::Value::Table(table)).map_err(|e| HarnessError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let lists = [self.family.values().len(), self.k.values().len(), self.p.values().len()];
        if lists.contains(&0) || self.sigma.values().is_empty() || self.h.values().is_empty() {
            return bad("family, k, p, sigma and h need at least one value".into());
        }
        if let Some(h) = self.h.values().iter().find(|h| !(**h > 0.0)) {
            return bad(format!("mesh size must be positive, got {h}"));
        }
        if let Some(s) = self.sigma.values().iter().find(|s| !(**s >= 0.0)) {
            return bad(format!("sigma must be non-negative, got {s}"));
        }
        if !(self.c > 0.0) {
            return bad(format!("wave speed must be positive, got {}", self.c));
        }
        if !(self.t_end >= 0.0) {
            return bad(format!("final time must be non-negative, got {}", self.t_end));
        }
        if let Some(d) = self.degree {
            if !(1..=3).contains(&d) {
                return bad(format!("degree must be 1, 2 or 3, got {d}"));
            }
        }
        if let DtRule::Fixed { value } = self.dt {
            if !(value > 0.0) {
                return bad(format!("fixed time step must be positive, got {value}"));
            }
        }
        if matches!(self.experiment, Experiment::Converge | Experiment::Run) {
            // The closed-form reference is the c = 1 standing wave.
            if self.c != 1.0 {
                return bad(format!("{} uses the c = 1 closed form; got c = {}", self.experiment, self.c));
            }
            for s in self.sigma.values() {
                exact_derivatives(0.0, 0.0, s)?;
            }
        }
        Ok(())
    }

    pub fn stability_options(&self) -> StabilityOptions {
        StabilityOptions {
            dense_cap: self.stability.dense_cap,
            eig_cap: self.stability.eig_cap,
            tol_rel: self.stability.tol_rel,
            seed: self.seed,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }

    pub fn degree_for(&self, k: usize) -> usize {
        self.degree.unwrap_or(k.saturating_sub(1).max(1))
    }

    /// Spatial problem for one cell of the experiment grid.
    pub fn problem(&self, family: Family, degree: usize, sigma: f64, h: f64) -> CflProblem {
        let mut disc = Discretization::new(family, degree);
        disc.boundary = self.boundary;
        CflProblem {
            disc,
            medium: Medium::constant(self.c, sigma),
            penalty: if family == Family::Ipdg { Some(self.penalty.unwrap_or_else(|| default_penalty(degree))) } else { None },
            flux: self.flux,
            domain: (self.domain[0], self.domain[1]),
            fine_region: Some((self.fine_region[0], self.fine_region[1])),
            h_coarse: h,
            interface: self.interface.unwrap_or_else(|| InterfaceRule::default_for(family)),
        }
    }
}

/// `# ltswaves <version>` and `# config_sha256 <hex>` comment lines.
pub fn provenance_header(cfg: &ExperimentConfig) -> String {
    format!("# ltswaves {VERSION}\n# config_sha256 {}\n", cfg.digest())
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool with a positive worker count")
}

// ---------------------------------------------------------------------------
// Reference steps

/// Key of a cached reference step: everything the equidistant AB limit
/// depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DtKey {
    pub family: Family,
    pub degree: usize,
    pub k: usize,
    h_bits: u64,
    sigma_bits: u64,
    penalty_bits: u64,
}

impl DtKey {
    pub fn new(prob: &CflProblem, k: usize, sigma: f64) -> Self {
        Self {
            family: prob.disc.family,
            degree: prob.disc.degree,
            k,
            h_bits: prob.h_coarse.to_bits(),
            sigma_bits: sigma.to_bits(),
            penalty_bits: prob.penalty.unwrap_or(0.0).to_bits(),
        }
    }
}

/// Reference steps `dt_ABk`, computed once per key.
#[derive(Clone, Debug, Default)]
pub struct DtCache {
    map: HashMap<DtKey, f64>,
}

impl DtCache {
    pub fn get(&self, key: &DtKey) -> Option<f64> {
        self.map.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Computes every missing entry on the pool.
    pub fn fill(
        &mut self,
        items: &[(CflProblem, usize, f64)],
        opts: &StabilityOptions,
        workers: usize,
    ) -> Result<(), HarnessError> {
        use rayon::prelude::*;
        let mut todo: Vec<(DtKey, &CflProblem, usize)> = Vec::new();
        for (prob, k, sigma) in items {
            let key = DtKey::new(prob, *k, *sigma);
            if !self.map.contains_key(&key) && !todo.iter().any(|(q, _, _)| *q == key) {
                todo.push((key, prob, *k));
            }
        }
        let found: Vec<(DtKey, Result<f64, HarnessError>)> = pool(workers).install(|| {
            todo.par_iter()
                .map(|(key, prob, k)| (*key, reference_dt(prob, *k, opts)))
                .collect()
        });
        for (key, dt) in found {
            self.map.insert(key, dt?);
        }
        Ok(())
    }
}

/// Largest stable plain ABk step on the equidistant coarse mesh.
pub fn reference_dt(prob: &CflProblem, k: usize, opts: &StabilityOptions) -> Result<f64, HarnessError> {
    prob.reference_dt(k, opts)?.dt.ok_or_else(|| {
        HarnessError::NoReferenceStep(format!("{} P{} k={} h={}", prob.disc.family, prob.disc.degree, k, prob.h_coarse))
    })
}

// ---------------------------------------------------------------------------
// Simulation

/// A locally refined problem set up for time stepping.
pub struct Simulation {
    pub mesh: Mesh1D,
    pub system: SemiDiscreteSystem,
    pub sigma: f64,
}

impl Simulation {
    pub fn new(prob: &CflProblem, p: usize, sigma: f64) -> Result<Self, HarnessError> {
        let fine = if p > 1 { prob.fine_region } else { None };
        let mesh = build_mesh(prob.domain, fine, prob.h_coarse, p)?;
        let asm = assemble(&mesh, &prob.disc, &prob.medium, prob.penalty, prob.flux)?;
        let part = fine_dof_mask(&mesh, &prob.disc, prob.interface);
        let system = to_first_order(&asm, &part)?;
        Ok(Self { mesh, system, sigma })
    }

    /// Projected closed-form state at time `t`.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>, HarnessError> {
        exact_derivatives(0.0, t, self.sigma)?;
        let sigma = self.sigma;
        let (a, b) = project_initial(&self.mesh, &self.system.disc, t, |x| {
            exact_solution(x, t, sigma).expect("sigma checked above")
        })?;
        Ok(self.system.pack(&a.coeffs, &b.coeffs))
    }

    /// Primary fields of a state: `u_h` for second-order forms, `(v_h, w_h)`
    /// for nodal DG.
    pub fn fields(&self, y: &[f64], t: f64) -> (GridFunction, GridFunction) {
        let (a, b) = self.system.unpack(y);
        let disc = self.system.disc;
        (GridFunction { coeffs: a, disc, t }, GridFunction { coeffs: b, disc, t })
    }

    /// L2 error against the closed form at time `t`: of `u` for continuous
    /// and interior-penalty elements, of the pair `(v, w)` for nodal DG.
    pub fn error(&self, y: &[f64], t: f64) -> f64 {
        let s = self.sigma;
        let (a, b) = self.fields(y, t);
        let ex = |x: f64| exact_solution(x, t, s).expect("sigma validated");
        match self.system.layout {
            Layout::SecondOrder { .. } => l2_error(&self.mesh, &a, |x| ex(x).0),
            Layout::FirstOrder { .. } => {
                let ev = l2_error(&self.mesh, &a, |x| ex(x).1);
                let ew = l2_error(&self.mesh, &b, |x| ex(x).2);
                ev.hypot(ew)
            }
        }
    }

    /// L2 norm of the displayed field (`u_h`, or `v_h` for nodal DG).
    pub fn field_norm(&self, y: &[f64], t: f64) -> f64 {
        let (a, _) = self.fields(y, t);
        l2_error(&self.mesh, &a, |_| 0.0)
    }

    /// Value of the displayed field and of its closed form at `x`.
    pub fn field_at(&self, y: &[f64], t: f64, x: f64) -> (f64, f64) {
        let (a, _) = self.fields(y, t);
        let (u, v, _) = exact_solution(x, t, self.sigma).expect("sigma validated");
        let exact = match self.system.layout {
            Layout::SecondOrder { .. } => u,
            Layout::FirstOrder { .. } => v,
        };
        (a.evaluate(&self.mesh, x), exact)
    }

    pub fn scheme(&self, k: usize, p: usize, dt: f64, startup: Startup) -> Result<Scheme, HarnessError> {
        let coeffs = CoefficientSet::new(k, p)?;
        Ok(Scheme::from_config(&self.system, &coeffs, SchemeConfig { k, p, dt, startup })?)
    }

    /// Runs LTS-ABk(p) from the closed-form start to `t_end` and returns the
    /// final state and time.
    pub fn solve(
        &self,
        k: usize,
        p: usize,
        dt: f64,
        t_end: f64,
        startup: Startup,
        mut observer: impl FnMut(usize, f64, &[f64]),
    ) -> Result<(Vec<f64>, f64), HarnessError> {
        let mut scheme = self.scheme(k, p, dt, startup)?;
        let y0 = self.state_at(0.0)?;
        let exact = |t: f64| self.state_at(t).expect("sigma validated");
        let mut hist = warm_start(&scheme, &y0, Some(&exact))?;
        observer(hist.n, hist.t, &hist.y[0]);
        let summary = scheme.run(&mut hist, t_end, observer)?;
        Ok((hist.y[0].clone(), summary.t_end.max(hist.t)))
    }
}

// ---------------------------------------------------------------------------
// Convergence

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub family: Family,
    pub degree: usize,
    pub k: usize,
    pub p: usize,
    pub sigma: f64,
    pub h: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Final-time L2 error, or the reason the row was aborted.
    pub error: Result<f64, String>,
    /// Observed order against the previous (coarser) row of the same study.
    pub rate: Option<f64>,
}

impl ConvergenceRow {
    fn same_study(&self, other: &Self) -> bool {
        (self.family, self.degree, self.k, self.p) == (other.family, other.degree, other.k, other.p)
            && self.sigma == other.sigma
    }
}

/// Final-time error of one mesh.
pub fn convergence_error(
    prob: &CflProblem,
    k: usize,
    p: usize,
    sigma: f64,
    dt: f64,
    t_end: f64,
    startup: Startup,
) -> Result<(f64, f64), HarnessError> {
    let sim = Simulation::new(prob, p, sigma)?;
    let (y, t) = sim.solve(k, p, dt, t_end, startup, |_, _, _| {})?;
    Ok((sim.error(&y, t), t))
}

/// `log(e_prev / e) / log(h_prev / h)` between consecutive rows of each study,
/// after sorting every study by decreasing `h`.
pub fn fill_rates(rows: &mut [ConvergenceRow]) {
    rows.sort_by(|a, b| {
        let key = |r: &ConvergenceRow| (r.family as u8, r.degree, r.k, r.p);
        key(a)
            .cmp(&key(b))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(b.h.total_cmp(&a.h))
    });
    for i in 0..rows.len() {
        rows[i].rate = None;
        if i == 0 || !rows[i].same_study(&rows[i - 1]) {
            continue;
        }
        if let (Ok(prev), Ok(cur)) = (&rows[i - 1].error, &rows[i].error) {
            if *prev > 0.0 && *cur > 0.0 {
                rows[i].rate = Some((prev / cur).ln() / (rows[i - 1].h / rows[i].h).ln());
            }
        }
    }
}

/// Error table over family x k x p x sigma x h; instabilities abort single
/// rows only.
pub fn converge_experiment(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRow>, HarnessError> {
    use rayon::prelude::*;
    let opts = cfg.stability_options();
    let workers = cfg.workers();
    let mut cells = Vec::new();
    for family in cfg.family.values() {
        for k in cfg.k.values() {
            let degree = cfg.degree_for(k);
            for p in cfg.p.values() {
                for sigma in cfg.sigma.values() {
                    for h in cfg.h.values() {
                        cells.push((cfg.problem(family, degree, sigma, h), k, p, sigma));
                    }
                }
            }
        }
    }
    let mut cache = DtCache::default();
    if let DtRule::FracOfAb { .. } = cfg.dt {
        let items: Vec<(CflProblem, usize, f64)> = cells.iter().map(|(q, k, _, s)| (q.clone(), *k, *s)).collect();
        cache.fill(&items, &opts, workers)?;
    }
    let dt_of = |prob: &CflProblem, k: usize, sigma: f64| match cfg.dt {
        DtRule::Fixed { value } => value,
        DtRule::FracOfAb { .. } => {
            cfg.dt.factor(k) * cache.get(&DtKey::new(prob, k, sigma)).expect("cache filled above")
        }
    };
    let mut rows: Vec<ConvergenceRow> = pool(workers).install(|| {
        cells
            .par_iter()
            .map(|(prob, k, p, sigma)| {
                let dt = dt_of(prob, *k, *sigma);
                let result = convergence_error(prob, *k, *p, *sigma, dt, cfg.t_end, cfg.startup);
                let (error, t_end) = match result {
                    Ok((e, t)) => (Ok(e), t),
                    Err(e) => {
                        log::error!(
                            "{} P{} k={} p={} h={}: {e}",
                            prob.disc.family,
                            prob.disc.degree,
                            k,
                            p,
                            prob.h_coarse
                        );
                        (Err(e.to_string()), cfg.t_end)
                    }
                };
                ConvergenceRow {
                    family: prob.disc.family,
                    degree: prob.disc.degree,
                    k: *k,
                    p: *p,
                    sigma: *sigma,
                    h: prob.h_coarse,
                    dt,
                    t_end,
                    error,
                    rate: None,
                }
            })
            .collect()
    });
    fill_rates(&mut rows);
    Ok(rows)
}

/// `family,l,k,p,sigma,h,dt,T,l2_error,rate`; aborted rows carry `nan` and
/// an empty rate.
pub fn write_convergence_csv<W: Write>(mut w: W, header: &str, rows: &[ConvergenceRow]) -> Result<(), HarnessError> {
    w.write_all(header.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["family", "l", "k", "p", "sigma", "h", "dt", "T", "l2_error", "rate"])?;
    for r in rows {
        out.write_record([
            r.family.to_string(),
            r.degree.to_string(),
            r.k.to_string(),
            r.p.to_string(),
            r.sigma.to_string(),
            r.h.to_string(),
            format!("{:e}", r.dt),
            r.t_end.to_string(),
            r.error.as_ref().map_or("nan".to_string(), |e| format!("{e:e}")),
            r.rate.map_or(String::new(), |v| format!("{v:.4}")),
        ])?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stability

/// CFL ratio table over family x k x p x sigma x h.
pub fn stability_experiment(cfg: &ExperimentConfig) -> Vec<CflRow> {
    let mut cells = Vec::new();
    for family in cfg.family.values() {
        for k in cfg.k.values() {
            let degree = cfg.degree_for(k);
            for p in cfg.p.values() {
                for sigma in cfg.sigma.values() {
                    for h in cfg.h.values() {
                        cells.push((cfg.problem(family, degree, sigma, h), k, p, sigma));
                    }
                }
            }
        }
    }
    cfl_ratio_table(&cells, &cfg.stability_options(), cfg.workers())
}

// ---------------------------------------------------------------------------
// Single run

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub dt: f64,
    pub steps: usize,
    pub t_end: f64,
    /// `(t, ||field||, error)` rows.
    pub series: Vec<(f64, f64, f64)>,
    /// `(x, field, closed form)` at the final time.
    pub snapshot: Vec<(f64, f64, f64)>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let family = cfg.family.single("family")?;
    let k = cfg.k.single("k")?;
    let p = cfg.p.single("p")?;
    let sigma = cfg.sigma.single("sigma")?;
    let h = cfg.h.single("h")?;
    let prob = cfg.problem(family, cfg.degree_for(k), sigma, h);
    let dt = match cfg.dt {
        DtRule::Fixed { value } => value,
        DtRule::FracOfAb { .. } => cfg.dt.factor(k) * reference_dt(&prob, k, &cfg.stability_options())?,
    };
    let sim = Simulation::new(&prob, p, sigma)?;
    let total = (cfg.t_end / dt).round() as usize;
    let every = if cfg.run.every > 0 { cfg.run.every } else { (total / 200).max(1) };
    let mut series = Vec::new();
    let (y, t) = if total == 0 {
        let y = sim.state_at(0.0)?;
        series.push((0.0, sim.field_norm(&y, 0.0), sim.error(&y, 0.0)));
        (y, 0.0)
    } else {
        sim.solve(k, p, dt, cfg.t_end, cfg.startup, |n, t, y| {
            if n % every == 0 || n == total {
                series.push((t, sim.field_norm(y, t), sim.error(y, t)));
            }
        })?
    };
    let (a, b) = sim.mesh.domain();
    let np = cfg.run.snapshot_points.max(2);
    let snapshot = (0..np)
        .map(|i| {
            let x = a + (b - a) * i as f64 / (np - 1) as f64;
            let (fh, fe) = sim.field_at(&y, t, x);
            (x, fh, fe)
        })
        .collect();
    Ok(RunReport { dt, steps: total, t_end: t, series, snapshot })
}

pub fn write_run_csv<W: Write>(mut w: W, header: &str, report: &RunReport) -> Result<(), HarnessError> {
    w.write_all(header.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "norm", "l2_error"])?;
    for (t, n, e) in &report.series {
        out.write_record([t.to_string(), format!("{n:e}"), format!("{e:e}")])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_snapshot_csv<W: Write>(mut w: W, header: &str, report: &RunReport) -> Result<(), HarnessError> {
    w.write_all(header.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x", "numerical", "exact"])?;
    for (x, a, b) in &report.snapshot {
        out.write_record([x.to_string(), format!("{a:e}"), format!("{b:e}")])?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Coefficient tables

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoeffFormat {
    #[default]
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for CoeffFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table" => Ok(CoeffFormat::Table),
            "csv" => Ok(CoeffFormat::Csv),
            "json" => Ok(CoeffFormat::Json),
            _ => Err(format!("unknown format '{s}' (expected table, csv or json)")),
        }
    }
}

/// Exact `alpha` and `beta` of LTS-ABk(p) as fractions with their decimal
/// values.
pub fn coeffs_report(k: usize, p: usize, format: CoeffFormat) -> Result<String, HarnessError> {
    use std::fmt::Write as _;
    let set = CoefficientSet::new(k, p)?;
    let frac = |r: &num_rational::BigRational| (r.numer().to_string(), r.denom().to_string());
    let val = crate::coeffgen::to_f64;
    let mut s = String::new();
    match format {
        CoeffFormat::Table => {
            writeln!(s, "LTS-AB{k}({p})").unwrap();
            for (l, a) in set.alpha.iter().enumerate() {
                writeln!(s, "  alpha[{l}] = {a:>12}  {:>22.16}", val(a)).unwrap();
            }
            for (m, row) in set.beta.iter().enumerate() {
                for (l, b) in row.iter().enumerate() {
                    writeln!(s, "  beta[{m}][{l}] = {b:>12}  {:>22.16}", val(b)).unwrap();
                }
            }
        }
        CoeffFormat::Csv => {
            writeln!(s, "k,p,kind,m,l,numerator,denominator,value").unwrap();
            for (l, a) in set.alpha.iter().enumerate() {
                let (n, d) = frac(a);
                writeln!(s, "{k},{p},alpha,,{l},{n},{d},{:e}", val(a)).unwrap();
            }
            for (m, row) in set.beta.iter().enumerate() {
                for (l, b) in row.iter().enumerate() {
                    let (n, d) = frac(b);
                    writeln!(s, "{k},{p},beta,{m},{l},{n},{d},{:e}", val(b)).unwrap();
                }
            }
        }
        CoeffFormat::Json => {
            let entry = |r: &num_rational::BigRational| {
                let (n, d) = frac(r);
                serde_json::json!({ "numerator": n, "denominator": d, "value": val(r) })
            };
            let doc = serde_json::json!({
                "k": k,
                "p": p,
                "alpha": set.alpha.iter().map(entry).collect::<Vec<_>>(),
                "beta": set.beta.iter().map(|row| row.iter().map(entry).collect::<Vec<_>>()).collect::<Vec<_>>(),
            });
            s = serde_json::to_string_pretty(&doc).expect("json values serialize");
            s.push('\n');
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Driver

/// What an experiment produced; `aborted` counts rows stopped by an
/// instability.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub aborted: usize,
}

/// Runs `cfg.experiment` and writes its CSV files under `out`.
pub fn execute(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, HarnessError> {
    std::fs::create_dir_all(out)?;
    let header = provenance_header(cfg);
    let mut outcome = Outcome::default();
    let mut create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>, HarnessError> {
        let path = out.join(name);
        let f = std::fs::File::create(&path)?;
        outcome.files.push(path);
        Ok(std::io::BufWriter::new(f))
    };
    match cfg.experiment {
        Experiment::Coeffs => {
            let mut w = create("coeffs.csv")?;
            w.write_all(header.as_bytes())?;
            let mut first = true;
            for k in cfg.k.values() {
                for p in cfg.p.values() {
                    let body = coeffs_report(k, p, CoeffFormat::Csv)?;
                    let body = if first { body.as_str() } else { body.split_once('\n').map_or("", |x| x.1) };
                    w.write_all(body.as_bytes())?;
                    first = false;
                }
            }
        }
        Experiment::Converge => {
            let rows = converge_experiment(cfg)?;
            write_convergence_csv(create("convergence.csv")?, &header, &rows)?;
            outcome.aborted = rows.iter().filter(|r| r.error.is_err()).count();
        }
        Experiment::Stability => {
            let rows = stability_experiment(cfg);
            let mut w = create("stability.csv")?;
            w.write_all(header.as_bytes())?;
            crate::stability::write_cfl_csv(w, &rows)?;
        }
        Experiment::Run => {
            let report = run_experiment(cfg)?;
            write_run_csv(create("series.csv")?, &header, &report)?;
            write_snapshot_csv(create("snapshot.csv")?, &header, &report)?;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    #[test]
    fn closed_form_start_and_residual() {
        for x in [0.1, 0.5, 1.7, 3.25] {
            let (u, v, _) = exact_solution(x, 0.0, 0.1).unwrap();
            assert_eq!(u, 0.0);
            assert!((v - (PI * x).sin()).abs() < 1e-15);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (x, t) = (rng.gen_range(0.0..6.0), rng.gen_range(0.0..10.0));
            assert!(pde_residual(x, t, 0.1).unwrap().abs() <= 1e-10);
        }
        // Undamped: (1/pi) sin(pi x) sin(pi t).
        let (u, _, _) = exact_solution(0.3, 0.7, 0.0).unwrap();
        assert!((u - (PI * 0.3).sin() * (PI * 0.7).sin() / PI).abs() < 1e-15);
        assert!(matches!(exact_solution(0.0, 0.0, 2.0 * PI), Err(HarnessError::Overdamped(_))));
    }

    #[test]
    fn config_defaults_round_trip_and_overrides() {
        let cfg = ExperimentConfig::parse("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap(), cfg);

        let src = "experiment = \"stability\"\nfamily = [\"cg\", \"ipdg\"]\nk = [2, 3]\nsigma = 0\n\n[stability]\ntol_rel = 0.01\n";
        let cfg = ExperimentConfig::parse(src, &[]).unwrap();
        assert_eq!(cfg.family.values(), vec![Family::Cg, Family::Ipdg]);
        assert_eq!(cfg.sigma.values(), vec![0.0]);
        assert_eq!(cfg.stability.tol_rel, 0.01);
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml(), &[]).unwrap(), cfg);

        let over = ExperimentConfig::parse(
            src,
            &["p=[1, 3]".into(), "stability.eig_cap=100".into(), "dt={rule=\"fixed\", value=0.01}".into()],
        )
        .unwrap();
        assert_eq!(over.p.values(), vec![1, 3]);
        assert_eq!(over.stability.eig_cap, 100);
        assert_eq!(over.dt, DtRule::Fixed { value: 0.01 });
        assert_ne!(over.digest(), cfg.digest());
    }

    #[test]
    fn config_errors_are_reported() {
        let e = ExperimentConfig::parse("family = \"fem\"\n", &[]).unwrap_err();
        let msg = e.to_string();
        assert_eq!(e.exit_code(), 2);
        assert!(msg.contains("line 1") && msg.contains("fem"), "{msg}");
        let e = ExperimentConfig::parse("", &["family=fem".into()]).unwrap_err();
        assert!(e.to_string().contains("fem"));
        assert!(ExperimentConfig::parse("bogus = 1\n", &[]).is_err());
        assert!(ExperimentConfig::parse("sigma = 7.0\n", &[]).is_err());
        assert!(ExperimentConfig::parse("h = [0.1, -0.05]\n", &[]).is_err());
    }

    #[test]
    fn rates_follow_decreasing_h() {
        let row = |h: f64, e: f64| ConvergenceRow {
            family: Family::Cg,
            degree: 1,
            k: 2,
            p: 2,
            sigma: 0.1,
            h,
            dt: 0.0,
            t_end: 10.0,
            error: Ok(e),
            rate: None,
        };
        let mut rows = vec![row(0.05, 2.5e-3), row(0.1, 1e-2), row(0.025, 6.25e-4)];
        fill_rates(&mut rows);
        assert_eq!(rows[0].h, 0.1);
        assert_eq!(rows[0].rate, None);
        assert!((rows[1].rate.unwrap() - 2.0).abs() < 1e-12);
        assert!((rows[2].rate.unwrap() - 2.0).abs() < 1e-12);

        let mut single = vec![row(0.1, 1e-2)];
        fill_rates(&mut single);
        assert_eq!(single[0].rate, None);
        let mut buf = Vec::new();
        write_convergence_csv(&mut buf, "# h\n", &single).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with(",\n"), "{text}");
    }

    #[test]
    fn coefficient_report_formats() {
        let t = coeffs_report(3, 2, CoeffFormat::Table).unwrap();
        assert!(t.contains("beta[0][0] =        17/12"), "{t}");
        let c = coeffs_report(2, 2, CoeffFormat::Csv).unwrap();
        assert!(c.contains("2,2,alpha,,0,3,2,"));
        let j = coeffs_report(2, 1, CoeffFormat::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&j).unwrap();
        assert_eq!(v["beta"][0][1]["numerator"], "-1");
    }

    #[test]
    fn short_run_tracks_closed_form() {
        let cfg = ExperimentConfig::parse(
            "experiment = \"run\"\nk = 3\np = 2\nh = 0.2\nt_end = 1.0\n\n[run]\nsnapshot_points = 11\n",
            &[],
        )
        .unwrap();
        let r = run_experiment(&cfg).unwrap();
        assert!(r.steps > 0);
        assert_eq!(r.snapshot.len(), 11);
        let (_, _, err) = *r.series.last().unwrap();
        assert!(err < 5e-3, "error {err}");

        let zero = ExperimentConfig { t_end: 0.0, ..cfg };
        let r = run_experiment(&zero).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(r.series.len(), 1);
        assert!(r.snapshot.iter().all(|(_, a, b)| a.abs() < 1e-12 && *b == 0.0));
    }
}

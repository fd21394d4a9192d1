//! Finite element semi-discretizations of the damped wave equation
//! `u_tt + sigma u_t - (c^2 u_x)_x = 0` in 1D, and their reduction to
//! `dy/dt = B y`.
//!
//! Three families are supported on nodal Gauss-Lobatto bases of degree 1..=3:
//! continuous elements with lumped mass, symmetric interior-penalty DG, and
//! nodal DG for the first-order system `v = u_t`, `w = -u_x`.

use std::fmt;
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::spd_block_function;
use crate::mesh1d::{Boundary, Discretization, DofPartition, Family, Mesh1D};
use crate::quadrature::{gauss_legendre, gauss_lobatto, LagrangeBasis};
use crate::sparse::{dot, BandedSym, Csr, TripletBuilder};

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("polynomial degree {0} not supported (expected 1, 2 or 3)")]
    Degree(usize),
    #[error("wave speed must be positive, got c({x}) = {c}")]
    Speed { x: f64, c: f64 },
    #[error("damping must be non-negative, got sigma({x}) = {sigma}")]
    Damping { x: f64, sigma: f64 },
    #[error("penalty parameter must be positive, got {0}")]
    Penalty(f64),
    #[error("mass matrix is not symmetric positive definite")]
    MassNotSpd,
    #[error("partition has {got} entries, system has {expected} scalar unknowns")]
    Partition { expected: usize, got: usize },
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Wave speed `c(x)` and damping `sigma(x)`.
#[derive(Clone)]
pub struct Medium {
    c: ScalarFn,
    sigma: ScalarFn,
}

impl fmt::Debug for Medium {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Medium").finish_non_exhaustive()
    }
}

impl Medium {
    pub fn constant(c: f64, sigma: f64) -> Self {
        Self::new(move |_| c, move |_| sigma)
    }

    pub fn new(
        c: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { c: Arc::new(c), sigma: Arc::new(sigma) }
    }

    pub fn c(&self, x: f64) -> f64 {
        (self.c)(x)
    }

    pub fn sigma(&self, x: f64) -> f64 {
        (self.sigma)(x)
    }

    fn check(&self, x: f64) -> Result<(), SpaceError> {
        let c = self.c(x);
        if !(c > 0.0) {
            return Err(SpaceError::Speed { x, c });
        }
        let sigma = self.sigma(x);
        if !(sigma >= 0.0) {
            return Err(SpaceError::Damping { x, sigma });
        }
        Ok(())
    }
}

/// Numerical flux of the nodal DG scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flux {
    #[default]
    Upwind,
    Central,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderForm {
    /// `M U'' + M_sigma U' + K U = 0`.
    Second,
    /// `M Q' + M_sigma Q + C Q = 0`.
    First,
}

#[derive(Clone, Debug)]
pub struct AssembledSystem {
    pub disc: Discretization,
    pub penalty: Option<f64>,
    pub flux: Option<Flux>,
    pub order_form: OrderForm,
    pub mass: Csr,
    pub mass_sigma: Csr,
    /// `K` for second-order forms, `C` for nodal DG.
    pub stiff: Csr,
    /// Scalar unknowns per field.
    pub n_scalar: usize,
}

impl AssembledSystem {
    /// Writes `mass.mtx`, `mass_sigma.mtx` and `stiff.mtx` into `dir`.
    pub fn export_matrix_market(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, m) in [("mass", &self.mass), ("mass_sigma", &self.mass_sigma), ("stiff", &self.stiff)] {
            let f = std::fs::File::create(dir.join(format!("{name}.mtx")))?;
            m.write_matrix_market(io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

/// Per-degree reference data: GLL nodal basis sampled at Gauss points.
struct RefElement {
    basis: LagrangeBasis,
    qx: Vec<f64>,
    qw: Vec<f64>,
    /// `phi[q][i]`
    phi: Vec<Vec<f64>>,
    /// `dphi[q][i]`, reference derivative
    dphi: Vec<Vec<f64>>,
}

impl RefElement {
    fn new(degree: usize, n_quad: usize) -> Result<Self, SpaceError> {
        if !(1..=3).contains(&degree) {
            return Err(SpaceError::Degree(degree));
        }
        let basis = LagrangeBasis::gll(degree);
        let (qx, qw) = gauss_legendre(n_quad);
        let phi = qx.iter().map(|&x| basis.values(x)).collect();
        let dphi = qx.iter().map(|&x| basis.derivatives(x)).collect();
        Ok(Self { basis, qx, qw, phi, dphi })
    }

    fn n(&self) -> usize {
        self.basis.len()
    }

    fn map(a: f64, b: f64, xi: f64) -> f64 {
        0.5 * (a + b) + 0.5 * (b - a) * xi
    }

    /// Physical quadrature points of element `[a, b]`.
    fn points(&self, a: f64, b: f64) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let h = b - a;
        self.qx.iter().zip(&self.qw).enumerate().map(move |(q, (&xi, &w))| (q, Self::map(a, b, xi), w * h / 2.0))
    }

    /// Element mass matrix with weight `rho`.
    fn mass(&self, a: f64, b: f64, rho: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut m = vec![vec![0.0; n]; n];
        for (q, x, w) in self.points(a, b) {
            let r = rho(x) * w;
            for i in 0..n {
                for j in 0..n {
                    m[i][j] += r * self.phi[q][i] * self.phi[q][j];
                }
            }
        }
        m
    }

    /// Element stiffness `int c^2 phi_i' phi_j'`.
    fn stiffness(&self, a: f64, b: f64, medium: &Medium) -> Vec<Vec<f64>> {
        let n = self.n();
        let s = 2.0 / (b - a);
        let mut k = vec![vec![0.0; n]; n];
        for (q, x, w) in self.points(a, b) {
            let c = medium.c(x);
            let r = c * c * w * s * s;
            for i in 0..n {
                for j in 0..n {
                    k[i][j] += r * self.dphi[q][i] * self.dphi[q][j];
                }
            }
        }
        k
    }
}

fn check_medium(mesh: &Mesh1D, re: &RefElement, medium: &Medium) -> Result<(), SpaceError> {
    for &x in &mesh.vertices {
        medium.check(x)?;
    }
    for e in 0..mesh.n_elements() {
        let (a, b) = mesh.bounds(e);
        for (_, x, _) in re.points(a, b) {
            medium.check(x)?;
        }
    }
    Ok(())
}

fn quad_points(degree: usize) -> usize {
    degree + 2
}

/// Continuous Lagrange elements with GLL-lumped mass.
pub fn assemble_continuous(
    mesh: &Mesh1D,
    degree: usize,
    medium: &Medium,
    boundary: Boundary,
) -> Result<AssembledSystem, SpaceError> {
    let re = RefElement::new(degree, quad_points(degree))?;
    check_medium(mesh, &re, medium)?;
    let disc = Discretization { family: Family::Cg, degree, boundary };
    let n = disc.n_scalar_dofs(mesh);
    let (gll_x, gll_w) = gauss_lobatto(degree);
    let mut m = vec![0.0; n];
    let mut ms = vec![0.0; n];
    let mut kb = TripletBuilder::new(n, n);
    for e in 0..mesh.n_elements() {
        let (a, b) = mesh.bounds(e);
        let h = b - a;
        let dofs: Vec<Option<usize>> = (0..=degree).map(|i| disc.dof(mesh, e, i)).collect();
        let ke = re.stiffness(a, b, medium);
        for i in 0..=degree {
            let Some(di) = dofs[i] else { continue };
            let x = RefElement::map(a, b, gll_x[i]);
            m[di] += gll_w[i] * h / 2.0;
            ms[di] += gll_w[i] * h / 2.0 * medium.sigma(x);
            for j in 0..=degree {
                if let Some(dj) = dofs[j] {
                    kb.add(di, dj, ke[i][j]);
                }
            }
        }
    }
    Ok(AssembledSystem {
        disc,
        penalty: None,
        flux: None,
        order_form: OrderForm::Second,
        mass: Csr::diagonal(&m),
        mass_sigma: Csr::diagonal(&ms).pruned(),
        stiff: kb.build(),
        n_scalar: n,
    })
}

/// Penalty `alpha c^2 / h` at vertex `v`, with the larger adjacent speed and
/// the smaller adjacent element size.
pub fn edge_penalty(mesh: &Mesh1D, medium: &Medium, alpha: f64, v: usize) -> f64 {
    let x = mesh.vertices[v];
    let ne = mesh.n_elements();
    let mut h = f64::INFINITY;
    if v > 0 {
        h = h.min(mesh.size(v - 1));
    }
    if v < ne {
        h = h.min(mesh.size(v));
    }
    let c = medium.c(x);
    alpha * c * c / h
}

fn block_mass(re: &RefElement, mesh: &Mesh1D, offset: usize, b: &mut TripletBuilder, rho: impl Fn(f64) -> f64 + Copy) {
    let n = re.n();
    for e in 0..mesh.n_elements() {
        let (xa, xb) = mesh.bounds(e);
        let me = re.mass(xa, xb, rho);
        for i in 0..n {
            for j in 0..n {
                if me[i][j] != 0.0 {
                    b.add(offset + e * n + i, offset + e * n + j, me[i][j]);
                }
            }
        }
    }
}

/// Symmetric interior-penalty DG.
pub fn assemble_ipdg(
    mesh: &Mesh1D,
    degree: usize,
    medium: &Medium,
    alpha: f64,
    boundary: Boundary,
) -> Result<AssembledSystem, SpaceError> {
    if !(alpha > 0.0) {
        return Err(SpaceError::Penalty(alpha));
    }
    let re = RefElement::new(degree, quad_points(degree))?;
    check_medium(mesh, &re, medium)?;
    let disc = Discretization { family: Family::Ipdg, degree, boundary };
    let nb = degree + 1;
    let ne = mesh.n_elements();
    let n = ne * nb;
    let mut mb = TripletBuilder::new(n, n);
    let mut sb = TripletBuilder::new(n, n);
    block_mass(&re, mesh, 0, &mut mb, |_| 1.0);
    block_mass(&re, mesh, 0, &mut sb, |x| medium.sigma(x));
    let mut kb = TripletBuilder::new(n, n);
    for e in 0..ne {
        let (a, b) = mesh.bounds(e);
        let ke = re.stiffness(a, b, medium);
        for i in 0..nb {
            for j in 0..nb {
                kb.add(e * nb + i, e * nb + j, ke[i][j]);
            }
        }
    }
    let d_left = re.basis.derivatives(-1.0);
    let d_right = re.basis.derivatives(1.0);
    let mut edge = |jump: &[(usize, f64)], avg: &[(usize, f64)], pen: f64| {
        for &(a, ja) in jump {
            for &(b, gb) in avg {
                kb.add(a, b, -ja * gb);
                kb.add(b, a, -ja * gb);
            }
            for &(b, jb) in jump {
                kb.add(a, b, pen * ja * jb);
            }
        }
    };
    for v in 0..=ne {
        let x = mesh.vertices[v];
        let c2 = medium.c(x).powi(2);
        let pen = edge_penalty(mesh, medium, alpha, v);
        if v == 0 || v == ne {
            if boundary == Boundary::Neumann {
                continue;
            }
            // Boundary jump is u n, average is the one-sided trace.
            let (e, node, normal, d) = if v == 0 { (0, 0, -1.0, &d_left) } else { (ne - 1, degree, 1.0, &d_right) };
            let s = 2.0 / mesh.size(e);
            let jump = [(e * nb + node, normal)];
            let avg: Vec<(usize, f64)> = (0..nb).map(|i| (e * nb + i, c2 * d[i] * s)).collect();
            edge(&jump, &avg, pen);
        } else {
            let (l, r) = (v - 1, v);
            let (sl, sr) = (2.0 / mesh.size(l), 2.0 / mesh.size(r));
            let jump = [(l * nb + degree, 1.0), (r * nb, -1.0)];
            let avg: Vec<(usize, f64)> = (0..nb)
                .map(|i| (l * nb + i, 0.5 * c2 * d_right[i] * sl))
                .chain((0..nb).map(|i| (r * nb + i, 0.5 * c2 * d_left[i] * sr)))
                .collect();
            edge(&jump, &avg, pen);
        }
    }
    Ok(AssembledSystem {
        disc,
        penalty: Some(alpha),
        flux: None,
        order_form: OrderForm::Second,
        mass: mb.build(),
        mass_sigma: sb.build().pruned(),
        stiff: kb.build(),
        n_scalar: n,
    })
}

/// Sparse linear combination of unknowns.
#[derive(Clone, Debug, Default)]
struct Lin(Vec<(usize, f64)>);

impl Lin {
    fn var(i: usize) -> Self {
        Lin(vec![(i, 1.0)])
    }
    fn scaled(&self, s: f64) -> Self {
        Lin(self.0.iter().map(|&(i, v)| (i, v * s)).collect())
    }
    fn plus(&self, o: &Lin) -> Self {
        Lin(self.0.iter().chain(&o.0).copied().collect())
    }
    fn minus(&self, o: &Lin) -> Self {
        self.plus(&o.scaled(-1.0))
    }
}

/// Nodal DG for `v_t + sigma v + (c^2 w)_x = 0`, `w_t + v_x = 0`, unknowns
/// ordered as `[v; w]`.
pub fn assemble_nodal_dg(
    mesh: &Mesh1D,
    degree: usize,
    medium: &Medium,
    boundary: Boundary,
    flux: Flux,
) -> Result<AssembledSystem, SpaceError> {
    let re = RefElement::new(degree, quad_points(degree))?;
    check_medium(mesh, &re, medium)?;
    let disc = Discretization { family: Family::Ndg, degree, boundary };
    let nb = degree + 1;
    let ne = mesh.n_elements();
    let n = ne * nb;
    let mut mb = TripletBuilder::new(2 * n, 2 * n);
    block_mass(&re, mesh, 0, &mut mb, |_| 1.0);
    block_mass(&re, mesh, n, &mut mb, |_| 1.0);
    let mut sb = TripletBuilder::new(2 * n, 2 * n);
    block_mass(&re, mesh, 0, &mut sb, |x| medium.sigma(x));

    let mut cb = TripletBuilder::new(2 * n, 2 * n);
    let nodes = re.basis.nodes().to_vec();
    // S_ij = int phi_i phi_j' (independent of h).
    let mut s = vec![vec![0.0; nb]; nb];
    for q in 0..re.qx.len() {
        for i in 0..nb {
            for j in 0..nb {
                s[i][j] += re.qw[q] * re.phi[q][i] * re.dphi[q][j];
            }
        }
    }
    for e in 0..ne {
        let (a, b) = mesh.bounds(e);
        for j in 0..nb {
            let c = medium.c(RefElement::map(a, b, nodes[j]));
            for i in 0..nb {
                cb.add(e * nb + i, n + e * nb + j, s[i][j] * c * c);
                cb.add(n + e * nb + i, e * nb + j, s[i][j]);
            }
        }
    }

    let vdof = |e: usize, i: usize| e * nb + i;
    let wdof = |e: usize, i: usize| n + e * nb + i;
    let mut face = |x: f64, left: Option<usize>, right: Option<usize>| {
        let c = medium.c(x);
        let c2 = c * c;
        let interior = |e: usize, i: usize| (Lin::var(vdof(e, i)), Lin::var(wdof(e, i)).scaled(c2));
        let ghost = |(v, s): &(Lin, Lin)| match boundary {
            Boundary::Dirichlet => (v.scaled(-1.0), s.clone()),
            Boundary::Neumann => (v.clone(), s.scaled(-1.0)),
        };
        let (l, r) = match (left, right) {
            (Some(l), Some(r)) => (interior(l, degree), interior(r, 0)),
            (Some(l), None) => {
                let l = interior(l, degree);
                let g = ghost(&l);
                (l, g)
            }
            (None, Some(r)) => {
                let r = interior(r, 0);
                (ghost(&r), r)
            }
            (None, None) => unreachable!(),
        };
        let ((vl, sl), (vr, sr)) = (&l, &r);
        let (v_star, s_star) = match flux {
            Flux::Upwind => {
                let v_star = sl.minus(sr).plus(&vl.scaled(c)).plus(&vr.scaled(c)).scaled(1.0 / (2.0 * c));
                let s_star = sl.minus(&v_star.minus(vl).scaled(c));
                (v_star, s_star)
            }
            Flux::Central => (vl.plus(vr).scaled(0.5), sl.plus(sr).scaled(0.5)),
        };
        // +(F* - F-) psi at the right end of the left element,
        // -(F* - F-) psi at the left end of the right element.
        if let Some(e) = left {
            for &(j, v) in &s_star.minus(sl).0 {
                cb.add(vdof(e, degree), j, v);
            }
            for &(j, v) in &v_star.minus(vl).0 {
                cb.add(wdof(e, degree), j, v);
            }
        }
        if let Some(e) = right {
            for &(j, v) in &s_star.minus(sr).0 {
                cb.add(vdof(e, 0), j, -v);
            }
            for &(j, v) in &v_star.minus(vr).0 {
                cb.add(wdof(e, 0), j, -v);
            }
        }
    };
    for v in 0..=ne {
        let left = (v > 0).then(|| v - 1);
        let right = (v < ne).then_some(v);
        face(mesh.vertices[v], left, right);
    }
    Ok(AssembledSystem {
        disc,
        penalty: None,
        flux: Some(flux),
        order_form: OrderForm::First,
        mass: mb.build(),
        mass_sigma: sb.build().pruned(),
        stiff: cb.build().pruned(),
        n_scalar: n,
    })
}

/// Layout of the first-order state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `y = [M^{1/2} U; M^{1/2} U']`, `n` unknowns per block.
    SecondOrder { n: usize },
    /// `y = [v; w]`, `n` unknowns per block.
    FirstOrder { n: usize },
}

impl Layout {
    pub fn block(&self) -> usize {
        match *self {
            Layout::SecondOrder { n } | Layout::FirstOrder { n } => n,
        }
    }
}

/// `dy/dt = B y` with its coarse/fine split.
#[derive(Clone, Debug)]
pub struct SemiDiscreteSystem {
    pub disc: Discretization,
    pub b: Csr,
    pub partition: DofPartition,
    pub dim: usize,
    pub layout: Layout,
    /// `M^{-1/2} K M^{-1/2}` (second-order origin only).
    pub a: Option<Csr>,
    /// `M^{-1/2} M_sigma M^{-1/2}` (second-order origin only).
    pub d: Option<Csr>,
    m_sqrt: Option<Csr>,
    m_inv_sqrt: Option<Csr>,
}

fn block_2x2(n: usize, blocks: [[Option<&Csr>; 2]; 2]) -> Csr {
    let mut b = TripletBuilder::new(2 * n, 2 * n);
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, m) in row.iter().enumerate() {
            if let Some(m) = m {
                for (i, j, v) in m.triplets() {
                    b.add(bi * n + i, bj * n + j, v);
                }
            }
        }
    }
    b.build()
}

/// Reduces an assembled system to `dy/dt = B y`; the scalar partition is
/// repeated over both blocks of the state.
pub fn to_first_order(asm: &AssembledSystem, partition: &DofPartition) -> Result<SemiDiscreteSystem, SpaceError> {
    let n = asm.n_scalar;
    if partition.n_dofs != n {
        return Err(SpaceError::Partition { expected: n, got: partition.n_dofs });
    }
    let full = partition.repeated(2);
    match asm.order_form {
        OrderForm::Second => {
            let mis = spd_block_function(&asm.mass, |l| 1.0 / l.sqrt()).ok_or(SpaceError::MassNotSpd)?;
            let ms = spd_block_function(&asm.mass, f64::sqrt).ok_or(SpaceError::MassNotSpd)?;
            let a = symmetrized(&mis.matmul(&asm.stiff).matmul(&mis));
            let d = symmetrized(&mis.matmul(&asm.mass_sigma).matmul(&mis));
            let id = Csr::identity(n);
            let b = block_2x2(n, [[None, Some(&id)], [Some(&a.scale(-1.0)), Some(&d.scale(-1.0))]]).pruned();
            Ok(SemiDiscreteSystem {
                disc: asm.disc,
                b,
                partition: full,
                dim: 2 * n,
                layout: Layout::SecondOrder { n },
                a: Some(a),
                d: Some(d),
                m_sqrt: Some(ms),
                m_inv_sqrt: Some(mis),
            })
        }
        OrderForm::First => {
            let minv = spd_block_function(&asm.mass, |l| 1.0 / l).ok_or(SpaceError::MassNotSpd)?;
            let b = minv.matmul(&asm.mass_sigma.add(&asm.stiff)).scale(-1.0).pruned();
            Ok(SemiDiscreteSystem {
                disc: asm.disc,
                b,
                partition: full,
                dim: 2 * n,
                layout: Layout::FirstOrder { n },
                a: None,
                d: None,
                m_sqrt: None,
                m_inv_sqrt: None,
            })
        }
    }
}

/// `(S + S^T) / 2`, removing assembly roundoff from a symmetric product.
fn symmetrized(s: &Csr) -> Csr {
    s.add(&s.transpose()).scale(0.5).pruned()
}

impl SemiDiscreteSystem {
    /// Wraps an arbitrary operator, mainly for tests and toy problems.
    pub fn from_operator(b: Csr, partition: DofPartition) -> Self {
        assert_eq!(b.nrows(), partition.n_dofs);
        let dim = b.nrows();
        Self {
            disc: Discretization::new(Family::Ndg, 1),
            b,
            partition,
            dim,
            layout: Layout::FirstOrder { n: dim / 2 },
            a: None,
            d: None,
            m_sqrt: None,
            m_inv_sqrt: None,
        }
    }

    /// State from field coefficients: `(U, U')` for second-order origin,
    /// `(v, w)` for nodal DG.
    pub fn pack(&self, first: &[f64], second: &[f64]) -> Vec<f64> {
        let (f, s) = match &self.m_sqrt {
            Some(ms) => (ms.mul_vec(first), ms.mul_vec(second)),
            None => (first.to_vec(), second.to_vec()),
        };
        [f, s].concat()
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.layout.block();
        let (f, s) = y.split_at(n);
        match &self.m_inv_sqrt {
            Some(mis) => (mis.mul_vec(f), mis.mul_vec(s)),
            None => (f.to_vec(), s.to_vec()),
        }
    }

    /// `|z'|^2 + z^T A z` for second-order origin.
    pub fn energy(&self, y: &[f64]) -> Option<f64> {
        let a = self.a.as_ref()?;
        let n = self.layout.block();
        let (z, dz) = y.split_at(n);
        Some(dot(dz, dz) + dot(z, &a.mul_vec(z)))
    }
}

/// Coefficient vector of one scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub coeffs: Vec<f64>,
    pub disc: Discretization,
    pub t: f64,
}

impl GridFunction {
    pub fn evaluate(&self, mesh: &Mesh1D, x: f64) -> f64 {
        let e = mesh.locate(x).expect("point outside the mesh");
        let (a, b) = mesh.bounds(e);
        let xi = (2.0 * x - a - b) / (b - a);
        let basis = LagrangeBasis::gll(self.disc.degree);
        (0..=self.disc.degree)
            .filter_map(|i| self.disc.dof(mesh, e, i).map(|d| self.coeffs[d] * basis.value(i, xi)))
            .sum()
    }
}

/// Consistent mass matrix of one scalar field over `disc`'s unknowns.
pub fn consistent_mass(mesh: &Mesh1D, disc: &Discretization) -> Result<Csr, SpaceError> {
    let re = RefElement::new(disc.degree, quad_points(disc.degree))?;
    let n = disc.n_scalar_dofs(mesh);
    let mut b = TripletBuilder::new(n, n);
    for e in 0..mesh.n_elements() {
        let (xa, xb) = mesh.bounds(e);
        let me = re.mass(xa, xb, |_| 1.0);
        for i in 0..=disc.degree {
            for j in 0..=disc.degree {
                if let (Some(di), Some(dj)) = (disc.dof(mesh, e, i), disc.dof(mesh, e, j)) {
                    b.add(di, dj, me[i][j]);
                }
            }
        }
    }
    Ok(b.build())
}

/// L2 projection of `f` onto the discrete space (homogeneous Dirichlet
/// values for continuous elements with Dirichlet boundary).
pub fn l2_project(mesh: &Mesh1D, disc: &Discretization, f: impl Fn(f64) -> f64) -> Result<Vec<f64>, SpaceError> {
    let re = RefElement::new(disc.degree, disc.degree + 3)?;
    let m = consistent_mass(mesh, disc)?;
    let mut rhs = vec![0.0; m.nrows()];
    for e in 0..mesh.n_elements() {
        let (a, b) = mesh.bounds(e);
        for (q, x, w) in re.points(a, b) {
            let fx = f(x) * w;
            for i in 0..=disc.degree {
                if let Some(d) = disc.dof(mesh, e, i) {
                    rhs[d] += fx * re.phi[q][i];
                }
            }
        }
    }
    BandedSym::from_csr(&m).cholesky().ok_or(SpaceError::MassNotSpd)?.solve_in_place(&mut rhs);
    Ok(rhs)
}

/// Projects initial data given pointwise as `(u, v, w)` with `v = u_t` and
/// `w = -u_x`. Returns `(U, V)` for second-order forms and `(v, w)` for
/// nodal DG.
pub fn project_initial(
    mesh: &Mesh1D,
    disc: &Discretization,
    t: f64,
    data: impl Fn(f64) -> (f64, f64, f64),
) -> Result<(GridFunction, GridFunction), SpaceError> {
    let (a, b) = match disc.family {
        Family::Cg | Family::Ipdg => (
            l2_project(mesh, disc, |x| data(x).0)?,
            l2_project(mesh, disc, |x| data(x).1)?,
        ),
        Family::Ndg => (
            l2_project(mesh, disc, |x| data(x).1)?,
            l2_project(mesh, disc, |x| data(x).2)?,
        ),
    };
    Ok((
        GridFunction { coeffs: a, disc: *disc, t },
        GridFunction { coeffs: b, disc: *disc, t },
    ))
}

/// `|| g - exact ||_{L2}` by element-wise Gauss quadrature.
pub fn l2_error(mesh: &Mesh1D, g: &GridFunction, exact: impl Fn(f64) -> f64) -> f64 {
    let disc = &g.disc;
    let re = RefElement::new(disc.degree, disc.degree + 3).expect("degree validated at assembly");
    let mut s = 0.0;
    for e in 0..mesh.n_elements() {
        let (a, b) = mesh.bounds(e);
        let dofs: Vec<Option<usize>> = (0..=disc.degree).map(|i| disc.dof(mesh, e, i)).collect();
        for (q, x, w) in re.points(a, b) {
            let uh: f64 = dofs
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.map(|d| g.coeffs[d] * re.phi[q][i]))
                .sum();
            s += w * (uh - exact(x)).powi(2);
        }
    }
    s.sqrt()
}

/// Assembles a family with its default options.
pub fn assemble(
    mesh: &Mesh1D,
    disc: &Discretization,
    medium: &Medium,
    penalty: Option<f64>,
    flux: Flux,
) -> Result<AssembledSystem, SpaceError> {
    match disc.family {
        Family::Cg => assemble_continuous(mesh, disc.degree, medium, disc.boundary),
        Family::Ipdg => {
            let alpha = penalty.unwrap_or_else(|| default_penalty(disc.degree));
            assemble_ipdg(mesh, disc.degree, medium, alpha, disc.boundary)
        }
        Family::Ndg => assemble_nodal_dg(mesh, disc.degree, medium, disc.boundary, flux),
    }
}

/// Interior-penalty parameter used for each degree unless overridden.
pub fn default_penalty(degree: usize) -> f64 {
    match degree {
        1 => 5.0,
        2 => 12.0,
        _ => 20.0,
    }
}

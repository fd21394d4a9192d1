//! Locally refined 1D meshes and the coarse/fine degree-of-freedom split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("invalid interval [{0}, {1}]")]
    Interval(f64, f64),
    #[error("fine region [{0}, {1}] is not contained in the domain")]
    NotContained(f64, f64),
    #[error("{what} = {value} is not an integer multiple of h_coarse = {h}")]
    NotCommensurate { what: &'static str, value: f64, h: f64 },
    #[error("refinement ratio must be at least 1")]
    Ratio,
    #[error("h_coarse must be positive, got {0}")]
    Spacing(f64),
    #[error("malformed mesh text: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Coarse,
    Fine,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Coarse => "coarse",
            Region::Fine => "fine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Element {
    pub left: usize,
    pub right: usize,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh1D {
    pub vertices: Vec<f64>,
    pub elements: Vec<Element>,
    pub h_coarse: f64,
    pub h_fine: f64,
    pub p: usize,
}

fn steps(len: f64, h: f64, what: &'static str) -> Result<usize, MeshError> {
    let n = (len / h).round();
    if (n * h - len).abs() > 1e-9 * h.max(len.abs()) {
        return Err(MeshError::NotCommensurate { what, value: len, h });
    }
    Ok(n as usize)
}

/// Equidistant coarse mesh of `domain` with the interval `fine` refined by
/// the factor `p`. With `fine = None` or `p = 1` every element is coarse.
pub fn build_mesh(
    domain: (f64, f64),
    fine: Option<(f64, f64)>,
    h_coarse: f64,
    p: usize,
) -> Result<Mesh1D, MeshError> {
    let (a, b) = domain;
    if !(a < b) {
        return Err(MeshError::Interval(a, b));
    }
    if !(h_coarse > 0.0) {
        return Err(MeshError::Spacing(h_coarse));
    }
    if p == 0 {
        return Err(MeshError::Ratio);
    }
    let n_total = steps(b - a, h_coarse, "domain length")?;
    let (n_left, n_mid) = match fine {
        Some((f0, f1)) => {
            if !(f0 < f1) {
                return Err(MeshError::Interval(f0, f1));
            }
            if f0 < a - 1e-12 || f1 > b + 1e-12 {
                return Err(MeshError::NotContained(f0, f1));
            }
            (
                steps(f0 - a, h_coarse, "fine region offset")?,
                steps(f1 - f0, h_coarse, "fine region length")?,
            )
        }
        None => (0, 0),
    };
    let refine = p > 1 && n_mid > 0;
    let h_fine = h_coarse / p as f64;
    let mut vertices = Vec::new();
    let mut regions = Vec::new();
    for i in 0..n_left {
        vertices.push(a + i as f64 * h_coarse);
        regions.push(Region::Coarse);
    }
    let f0 = a + n_left as f64 * h_coarse;
    let sub = if refine { p } else { 1 };
    for j in 0..n_mid * sub {
        vertices.push(f0 + j as f64 * (h_coarse / sub as f64));
        regions.push(if refine { Region::Fine } else { Region::Coarse });
    }
    let f1 = f0 + n_mid as f64 * h_coarse;
    for i in 0..(n_total - n_left - n_mid) {
        vertices.push(f1 + i as f64 * h_coarse);
        regions.push(Region::Coarse);
    }
    vertices.push(b);
    let elements = regions
        .into_iter()
        .enumerate()
        .map(|(e, region)| Element { left: e, right: e + 1, region })
        .collect();
    Ok(Mesh1D { vertices, elements, h_coarse, h_fine: if refine { h_fine } else { h_coarse }, p })
}

impl Mesh1D {
    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_fine(&self) -> usize {
        self.elements.iter().filter(|e| e.region == Region::Fine).count()
    }

    pub fn bounds(&self, e: usize) -> (f64, f64) {
        let el = &self.elements[e];
        (self.vertices[el.left], self.vertices[el.right])
    }

    pub fn size(&self, e: usize) -> f64 {
        let (a, b) = self.bounds(e);
        b - a
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.vertices[0], *self.vertices.last().unwrap())
    }

    pub fn min_size(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.size(e)).fold(f64::INFINITY, f64::min)
    }

    /// Element index containing `x` (right-closed on the last element).
    pub fn locate(&self, x: f64) -> Option<usize> {
        let (a, b) = self.domain();
        if x < a || x > b {
            return None;
        }
        let i = self.vertices.partition_point(|&v| v <= x);
        Some(i.saturating_sub(1).min(self.n_elements() - 1))
    }

    /// Plain-text form: vertex count, one coordinate per line, then
    /// `left right tag` per element.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.vertices.len());
        for v in &self.vertices {
            s.push_str(&format!("{v:.17e}\n"));
        }
        for e in &self.elements {
            s.push_str(&format!("{} {} {}\n", e.left, e.right, e.region));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        let bad = |m: &str| MeshError::Parse(m.to_string());
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| bad("empty input"))?
            .parse()
            .map_err(|_| bad("vertex count"))?;
        let mut vertices = Vec::with_capacity(n);
        for _ in 0..n {
            let v = lines.next().ok_or_else(|| bad("missing vertex"))?;
            vertices.push(v.parse::<f64>().map_err(|_| bad(v))?);
        }
        if vertices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("vertices not strictly increasing"));
        }
        let mut elements = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(line));
            }
            let left = f[0].parse().map_err(|_| bad(line))?;
            let right = f[1].parse().map_err(|_| bad(line))?;
            let region = match f[2] {
                "coarse" => Region::Coarse,
                "fine" => Region::Fine,
                _ => return Err(bad(line)),
            };
            if right != left + 1 || right >= n {
                return Err(bad(line));
            }
            elements.push(Element { left, right, region });
        }
        if elements.len() + 1 != n {
            return Err(bad("element count does not match vertices"));
        }
        let size = |e: &Element| vertices[e.right] - vertices[e.left];
        let h_coarse = elements
            .iter()
            .filter(|e| e.region == Region::Coarse)
            .map(size)
            .fold(0.0, f64::max);
        let h_fine = elements
            .iter()
            .filter(|e| e.region == Region::Fine)
            .map(size)
            .fold(f64::INFINITY, f64::min);
        let (h_fine, p) = if h_fine.is_finite() {
            (h_fine, (h_coarse / h_fine).round() as usize)
        } else {
            (h_coarse, 1)
        };
        Ok(Self { vertices, elements, h_coarse, h_fine, p })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Continuous Lagrange elements with lumped mass.
    Cg,
    /// Symmetric interior-penalty DG.
    Ipdg,
    /// Nodal DG for the first-order (v, w) system.
    Ndg,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Cg => "cg",
            Family::Ipdg => "ipdg",
            Family::Ndg => "ndg",
        })
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cg" => Ok(Family::Cg),
            "ipdg" => Ok(Family::Ipdg),
            "ndg" => Ok(Family::Ndg),
            _ => Err(format!("unknown family '{s}' (expected cg, ipdg or ndg)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Dirichlet,
    Neumann,
}

/// Which unknowns next to the coarse/fine interface take the fine step. Under
/// `Fine` a continuous-FE vertex shared by a coarse and a fine element is fine,
/// under `Coarse` it is coarse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterfaceRule {
    #[default]
    Fine,
    Coarse,
    /// As `Fine`, plus every unknown of a coarse element that shares a vertex
    /// with a fine element.
    Halo,
}

impl InterfaceRule {
    /// `Halo` for interior-penalty DG, whose interface penalty is scaled by
    /// the fine element size on both sides; `Fine` otherwise.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Ipdg => InterfaceRule::Halo,
            _ => InterfaceRule::Fine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Discretization {
    pub family: Family,
    pub degree: usize,
    pub boundary: Boundary,
}

impl Discretization {
    pub fn new(family: Family, degree: usize) -> Self {
        Self { family, degree, boundary: Boundary::Dirichlet }
    }

    /// Number of scalar unknowns per field.
    pub fn n_scalar_dofs(&self, mesh: &Mesh1D) -> usize {
        let (ne, l) = (mesh.n_elements(), self.degree);
        match self.family {
            Family::Cg => {
                let n = ne * l + 1;
                match self.boundary {
                    Boundary::Dirichlet => n - 2,
                    Boundary::Neumann => n,
                }
            }
            Family::Ipdg | Family::Ndg => ne * (l + 1),
        }
    }

    /// Scalar dof of local node `i` on element `e`; `None` for an eliminated
    /// Dirichlet node.
    pub fn dof(&self, mesh: &Mesh1D, e: usize, i: usize) -> Option<usize> {
        let l = self.degree;
        match self.family {
            Family::Cg => {
                let g = e * l + i;
                match self.boundary {
                    Boundary::Neumann => Some(g),
                    Boundary::Dirichlet => {
                        let last = mesh.n_elements() * l;
                        (g != 0 && g != last).then(|| g - 1)
                    }
                }
            }
            Family::Ipdg | Family::Ndg => Some(e * (l + 1) + i),
        }
    }
}

/// Diagonal 0/1 selection over the scalar unknowns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DofPartition {
    pub n_dofs: usize,
    pub fine_mask: Vec<bool>,
}

impl DofPartition {
    pub fn all_coarse(n: usize) -> Self {
        Self { n_dofs: n, fine_mask: vec![false; n] }
    }

    pub fn n_fine(&self) -> usize {
        self.fine_mask.iter().filter(|&&b| b).count()
    }

    pub fn fine_indices(&self) -> Vec<usize> {
        (0..self.n_dofs).filter(|&i| self.fine_mask[i]).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.n_fine() == 0
    }

    /// The mask repeated over `blocks` consecutive copies of the layout.
    pub fn repeated(&self, blocks: usize) -> Self {
        let fine_mask: Vec<bool> =
            (0..blocks).flat_map(|_| self.fine_mask.iter().copied()).collect();
        Self { n_dofs: fine_mask.len(), fine_mask }
    }
}

/// Marks every scalar unknown supported on a fine element.
pub fn fine_dof_mask(mesh: &Mesh1D, disc: &Discretization, interface: InterfaceRule) -> DofPartition {
    let n = disc.n_scalar_dofs(mesh);
    let mut fine = vec![false; n];
    let mut coarse_touch = vec![false; n];
    for (e, el) in mesh.elements.iter().enumerate() {
        for i in 0..=disc.degree {
            if let Some(d) = disc.dof(mesh, e, i) {
                match el.region {
                    Region::Fine => fine[d] = true,
                    Region::Coarse => coarse_touch[d] = true,
                }
            }
        }
    }
    match interface {
        InterfaceRule::Fine => {}
        InterfaceRule::Coarse => {
            for (f, c) in fine.iter_mut().zip(&coarse_touch) {
                *f &= !c;
            }
        }
        InterfaceRule::Halo => {
            let ne = mesh.n_elements();
            let is_fine = |e: usize| mesh.elements[e].region == Region::Fine;
            for e in (0..ne).filter(|&e| !is_fine(e)) {
                let touches = (e > 0 && is_fine(e - 1)) || (e + 1 < ne && is_fine(e + 1));
                if touches {
                    for i in 0..=disc.degree {
                        if let Some(d) = disc.dof(mesh, e, i) {
                            fine[d] = true;
                        }
                    }
                }
            }
        }
    }
    DofPartition { n_dofs: n, fine_mask: fine }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_mesh(h: f64, p: usize) -> Mesh1D {
        build_mesh((0.0, 6.0), Some((2.0, 4.0)), h, p).unwrap()
    }

    #[test]
    fn refined_mesh_counts() {
        let m = reference_mesh(0.1, 2);
        assert_eq!(m.n_elements(), 80);
        assert_eq!(m.n_fine(), 40);
        assert!((m.h_fine - 0.05).abs() < 1e-15);
        assert_eq!(m.domain(), (0.0, 6.0));
        for e in 0..80 {
            let expect = if (20..60).contains(&e) { 0.05 } else { 0.1 };
            assert!((m.size(e) - expect).abs() < 1e-12);
        }

        let m = reference_mesh(0.2, 1);
        assert_eq!(m.n_elements(), 30);
        assert_eq!(m.n_fine(), 0);

        let m = reference_mesh(0.2, 7);
        assert_eq!(m.n_elements(), 90);
        assert_eq!(m.n_fine(), 70);
        assert!((m.h_fine - 0.2 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_commensurate_geometry() {
        assert!(matches!(
            build_mesh((0.0, 6.0), Some((2.05, 4.0)), 0.1, 2),
            Err(MeshError::NotCommensurate { .. })
        ));
        assert!(build_mesh((0.0, 6.0), Some((5.0, 7.0)), 0.1, 2).is_err());
        assert!(build_mesh((0.0, 6.0), None, 0.25, 2).is_ok());
        assert!(build_mesh((0.0, 6.0), None, 0.35, 2).is_err());
        assert_eq!(build_mesh((0.0, 6.0), None, 0.1, 0), Err(MeshError::Ratio));
    }

    #[test]
    fn text_round_trip() {
        let m = reference_mesh(0.2, 3);
        let back = Mesh1D::from_text(&m.to_text()).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.elements, m.elements);
        assert_eq!(back.p, 3);
        assert!(Mesh1D::from_text("2\n0\n1\n0 1 medium\n").is_err());
    }

    #[test]
    fn locate_finds_element() {
        let m = reference_mesh(0.1, 2);
        assert_eq!(m.locate(0.0), Some(0));
        assert_eq!(m.locate(2.01), Some(20));
        assert_eq!(m.locate(6.0), Some(79));
        assert_eq!(m.locate(6.5), None);
    }

    #[test]
    fn dof_masks() {
        let m = reference_mesh(0.1, 2);
        let ip = fine_dof_mask(&m, &Discretization::new(Family::Ipdg, 1), InterfaceRule::Fine);
        assert_eq!(ip.n_dofs, 160);
        assert_eq!(ip.n_fine(), 80);

        let cg = fine_dof_mask(&m, &Discretization::new(Family::Cg, 1), InterfaceRule::Fine);
        assert_eq!(cg.n_dofs, 79);
        assert_eq!(cg.n_fine(), 41);
        let cgc = fine_dof_mask(&m, &Discretization::new(Family::Cg, 1), InterfaceRule::Coarse);
        assert_eq!(cgc.n_fine(), 39);
        let iph = fine_dof_mask(&m, &Discretization::new(Family::Ipdg, 1), InterfaceRule::Halo);
        assert_eq!(iph.n_fine(), 84);
        let cgh = fine_dof_mask(&m, &Discretization::new(Family::Cg, 1), InterfaceRule::Halo);
        assert_eq!(cgh.n_fine(), 43);

        let cg3 = fine_dof_mask(&m, &Discretization::new(Family::Cg, 3), InterfaceRule::Fine);
        assert_eq!(cg3.n_fine(), 40 * 3 + 1);

        let flat = reference_mesh(0.2, 1);
        for fam in [Family::Cg, Family::Ipdg, Family::Ndg] {
            let d = fine_dof_mask(&flat, &Discretization::new(fam, 2), InterfaceRule::Fine);
            assert!(d.is_empty());
        }
        assert_eq!(ip.repeated(2).n_fine(), 160);
    }
}

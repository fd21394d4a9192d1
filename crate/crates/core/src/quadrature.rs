//! Gauss rules and Lagrange bases on the reference element `[-1, 1]`.

/// Gauss–Legendre rule with `n` points, `(nodes, weights)`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, z);
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss–Lobatto–Legendre nodes and weights for polynomial degree
/// `degree` (`degree + 1` points), `1 <= degree <= 3`.
pub fn gauss_lobatto(degree: usize) -> (Vec<f64>, Vec<f64>) {
    match degree {
        1 => (vec![-1.0, 1.0], vec![1.0, 1.0]),
        2 => (vec![-1.0, 0.0, 1.0], vec![1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0]),
        3 => {
            let a = 1.0 / 5f64.sqrt();
            (vec![-1.0, -a, a, 1.0], vec![1.0 / 6.0, 5.0 / 6.0, 5.0 / 6.0, 1.0 / 6.0])
        }
        _ => panic!("Gauss-Lobatto rule implemented for degrees 1..=3, got {degree}"),
    }
}

/// Lagrange basis on fixed nodes.
#[derive(Clone, Debug)]
pub struct LagrangeBasis {
    nodes: Vec<f64>,
    denom: Vec<f64>,
}

impl LagrangeBasis {
    pub fn new(nodes: Vec<f64>) -> Self {
        let denom = (0..nodes.len())
            .map(|i| {
                (0..nodes.len())
                    .filter(|&j| j != i)
                    .map(|j| nodes[i] - nodes[j])
                    .product()
            })
            .collect();
        Self { nodes, denom }
    }

    /// Basis on the GLL nodes of the given degree.
    pub fn gll(degree: usize) -> Self {
        Self::new(gauss_lobatto(degree).0)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, i: usize, x: f64) -> f64 {
        let n = &self.nodes;
        (0..n.len()).filter(|&j| j != i).map(|j| x - n[j]).product::<f64>() / self.denom[i]
    }

    pub fn derivative(&self, i: usize, x: f64) -> f64 {
        let n = &self.nodes;
        let mut s = 0.0;
        for m in (0..n.len()).filter(|&m| m != i) {
            s += (0..n.len())
                .filter(|&j| j != i && j != m)
                .map(|j| x - n[j])
                .product::<f64>();
        }
        s / self.denom[i]
    }

    pub fn values(&self, x: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i, x)).collect()
    }

    pub fn derivatives(&self, x: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.derivative(i, x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_to_degree_2n_minus_1() {
        for n in 1..=8 {
            let (x, w) = gauss_legendre(n);
            for d in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(d as i32)).sum();
                let exact = if d % 2 == 1 { 0.0 } else { 2.0 / (d as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} d={d}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn lobatto_integrates_to_degree_2n_minus_3() {
        for deg in 1..=3 {
            let (x, w) = gauss_lobatto(deg);
            for d in 0..=(2 * deg - 1) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(d as i32)).sum();
                let exact = if d % 2 == 1 { 0.0 } else { 2.0 / (d as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lagrange_partition_of_unity_and_derivative() {
        let b = LagrangeBasis::gll(3);
        for &x in &[-0.9, -0.1, 0.3, 0.77] {
            let s: f64 = b.values(x).iter().sum();
            let ds: f64 = b.derivatives(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            assert!(ds.abs() < 1e-13);
            let dx: f64 = b.derivatives(x).iter().zip(b.nodes()).map(|(d, n)| d * n * n).sum();
            assert!((dx - 2.0 * x).abs() < 1e-13);
        }
        for i in 0..4 {
            for j in 0..4 {
                let v = b.value(i, b.nodes()[j]);
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }
}

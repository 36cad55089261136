//! Structured grids on the model manifolds: the flat torus T^n (n = 2, 3, 4) with
//! period 2*pi per axis, and the round unit sphere S^2 in a staggered latitude and
//! longitude chart. The grid owns pointwise metric data, Christoffel symbols,
//! curvature, and quadrature weights; everything downstream reads from here.

use crate::{Error, Result};
use sha2::Digest;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryKind {
    Torus { n: usize, period: f64 },
    Sphere,
}

/// Curvature payload. Both model geometries have constant sectional curvature,
/// which keeps the Weitzenboeck and sectional-curvature code paths exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurvatureData {
    ConstantSectional(f64),
}

/// A structured grid with node-indexed geometric data. Immutable after
/// construction; shared read-only behind `Arc` by fields and operators.
///
/// Node index is row-major with axis 0 slowest. On the sphere axis 0 is theta
/// (colatitude, staggered: theta_i = (i + 1/2) * pi / n_theta) and axis 1 is phi
/// with n_phi = 2 * n_theta equispaced points, so no node sits on a pole.
#[derive(Debug, Clone)]
pub struct ManifoldGrid {
    pub kind: GeometryKind,
    pub dim: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    /// Node chart coordinates, node-major, dim per node.
    pub coords: Vec<f64>,
    /// Metric g_ij packed symmetric (i <= j, lexicographic), s2 = dim*(dim+1)/2 per node.
    pub metric: Vec<f64>,
    /// Inverse metric g^ij, same packing.
    pub metric_inv: Vec<f64>,
    /// Christoffel symbols Gamma^k_{ij}, k-major then packed (i, j), dim*s2 per node.
    pub christoffel: Vec<f64>,
    pub curvature: CurvatureData,
    /// Quadrature weight per node; sums to the manifold volume.
    pub quad_weights: Vec<f64>,
}

/// Packed index of the symmetric pair (i, j), i <= j, in lexicographic order.
pub fn sym_pair_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // entries before row i: sum_{r<i} (dim - r) = i (2 dim - i + 1) / 2
    i * (2 * dim - i + 1) / 2 + (j - i)
}

/// Inverse of `sym_pair_index`.
pub fn sym_pair(dim: usize, mut p: usize) -> (usize, usize) {
    for i in 0..dim {
        let row = dim - i;
        if p < row {
            return (i, i + p);
        }
        p -= row;
    }
    panic!("packed index out of range");
}

impl ManifoldGrid {
    pub fn nnodes(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn s2(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn node_coords(&self, node: usize) -> &[f64] {
        &self.coords[node * self.dim..(node + 1) * self.dim]
    }

    pub fn metric_at(&self, node: usize) -> &[f64] {
        &self.metric[node * self.s2()..(node + 1) * self.s2()]
    }

    pub fn metric_inv_at(&self, node: usize) -> &[f64] {
        &self.metric_inv[node * self.s2()..(node + 1) * self.s2()]
    }

    /// g_ij at a node, unpacked.
    pub fn g(&self, node: usize, i: usize, j: usize) -> f64 {
        self.metric_at(node)[sym_pair_index(self.dim, i, j)]
    }

    /// g^ij at a node, unpacked.
    pub fn ginv(&self, node: usize, i: usize, j: usize) -> f64 {
        self.metric_inv_at(node)[sym_pair_index(self.dim, i, j)]
    }

    /// Gamma^k_{ij} at a node.
    pub fn gamma(&self, node: usize, k: usize, i: usize, j: usize) -> f64 {
        let s2 = self.s2();
        self.christoffel[node * self.dim * s2 + k * s2 + sym_pair_index(self.dim, i, j)]
    }

    pub fn grid_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for (a, &c) in multi.iter().enumerate() {
            idx = idx * self.shape[a] + c;
        }
        idx
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.dim];
        for a in (0..self.dim).rev() {
            out[a] = node % self.shape[a];
            node /= self.shape[a];
        }
        out
    }

    /// Resolves the node `offset` steps along `axis` from `node`. Returns the
    /// target node index and whether the step crossed a sphere pole, in which case
    /// tensor components pick up a sign of (-1)^(number of theta indices) because
    /// the chart continuation through the pole is (theta, phi) -> (-theta, phi + pi).
    pub fn shift(&self, node: usize, axis: usize, offset: isize) -> (usize, bool) {
        let mut multi = self.multi_index(node);
        let n_ax = self.shape[axis] as isize;
        let raw = multi[axis] as isize + offset;
        match self.kind {
            GeometryKind::Torus { .. } => {
                multi[axis] = raw.rem_euclid(n_ax) as usize;
                (self.grid_index(&multi), false)
            }
            GeometryKind::Sphere => {
                if axis == 1 {
                    multi[1] = raw.rem_euclid(n_ax) as usize;
                    return (self.grid_index(&multi), false);
                }
                // theta axis: reflect across a pole and rotate phi by half a turn
                let n_phi = self.shape[1] as isize;
                if raw < 0 {
                    multi[0] = (-1 - raw) as usize;
                    multi[1] = ((multi[1] as isize + n_phi / 2) % n_phi) as usize;
                    (self.grid_index(&multi), true)
                } else if raw >= n_ax {
                    multi[0] = (2 * n_ax - 1 - raw) as usize;
                    multi[1] = ((multi[1] as isize + n_phi / 2) % n_phi) as usize;
                    (self.grid_index(&multi), true)
                } else {
                    multi[0] = raw as usize;
                    (self.grid_index(&multi), false)
                }
            }
        }
    }

    /// Total volume from the quadrature weights.
    pub fn volume(&self) -> f64 {
        self.quad_weights.iter().sum()
    }

    /// SHA-256 over the geometric payload; embedded in reports so a result can be
    /// tied to the exact grid that produced it.
    pub fn hash_hex(&self) -> String {
        let mut h = sha2::Sha256::new();
        match &self.kind {
            GeometryKind::Torus { n, period } => {
                h.update(b"torus");
                h.update((*n as u64).to_le_bytes());
                h.update(period.to_le_bytes());
            }
            GeometryKind::Sphere => h.update(b"sphere"),
        }
        for &s in &self.shape {
            h.update((s as u64).to_le_bytes());
        }
        for v in [&self.spacing, &self.coords, &self.metric, &self.quad_weights] {
            for &x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Structural sanity: g * g^{-1} = id to 1e-12, positive weights, volume.
    pub fn check_invariants(&self) -> Result<()> {
        let d = self.dim;
        for x in 0..self.nnodes() {
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += self.g(x, i, k) * self.ginv(x, k, j);
                    }
                    let want = if i == j { 1.0 } else { 0.0 };
                    if (s - want).abs() > 1e-12 {
                        return Err(Error::InvalidMetric(format!(
                            "g g^-1 defect {:.3e} at node {x}",
                            (s - want).abs()
                        )));
                    }
                }
            }
            if self.quad_weights[x] <= 0.0 {
                return Err(Error::InvalidMetric(format!("nonpositive weight at node {x}")));
            }
        }
        let vol = self.volume();
        let expect = match self.kind {
            GeometryKind::Torus { n, period } => period.powi(n as i32),
            GeometryKind::Sphere => 4.0 * std::f64::consts::PI,
        };
        if (vol - expect).abs() > 1e-10 * expect {
            return Err(Error::InvalidMetric(format!(
                "volume {vol:.15e} differs from {expect:.15e}"
            )));
        }
        Ok(())
    }
}

/// Flat torus [0, period)^n with grid_n nodes per axis, identity metric.
pub fn build_flat_torus(n: usize, grid_n: usize, period: f64) -> Result<ManifoldGrid> {
    if !(2..=4).contains(&n) {
        return Err(Error::InvalidParameter(format!("torus dimension {n} not in 2..=4")));
    }
    if grid_n < 4 || grid_n % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "torus grid size {grid_n} must be even and at least 4"
        )));
    }
    if !(period > 0.0) {
        return Err(Error::InvalidParameter("torus period must be positive".into()));
    }
    let h = period / grid_n as f64;
    let shape = vec![grid_n; n];
    let nnodes: usize = shape.iter().product();
    let s2 = n * (n + 1) / 2;
    let mut coords = vec![0.0; nnodes * n];
    let mut metric = vec![0.0; nnodes * s2];
    let mut metric_inv = vec![0.0; nnodes * s2];
    let christoffel = vec![0.0; nnodes * n * s2];
    let quad_weights = vec![h.powi(n as i32); nnodes];
    let mut multi = vec![0usize; n];
    for node in 0..nnodes {
        for a in 0..n {
            coords[node * n + a] = multi[a] as f64 * h;
        }
        for i in 0..n {
            let p = node * s2 + sym_pair_index(n, i, i);
            metric[p] = 1.0;
            metric_inv[p] = 1.0;
        }
        // advance multi-index, last axis fastest
        for a in (0..n).rev() {
            multi[a] += 1;
            if multi[a] < grid_n {
                break;
            }
            multi[a] = 0;
        }
    }
    Ok(ManifoldGrid {
        kind: GeometryKind::Torus { n, period },
        dim: n,
        shape,
        spacing: vec![h; n],
        coords,
        metric,
        metric_inv,
        christoffel,
        curvature: CurvatureData::ConstantSectional(0.0),
        quad_weights,
    })
}

/// Round unit sphere S^2 on a staggered (theta, phi) grid with n_phi = 2 * n_theta.
/// Weights are exact cell integrals of the area element, so they sum to 4*pi at
/// machine precision.
pub fn build_round_sphere(n_theta: usize) -> Result<ManifoldGrid> {
    if n_theta < 8 || n_theta % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "sphere n_theta {n_theta} must be even and at least 8"
        )));
    }
    let n_phi = 2 * n_theta;
    let dth = std::f64::consts::PI / n_theta as f64;
    let dph = 2.0 * std::f64::consts::PI / n_phi as f64;
    let nnodes = n_theta * n_phi;
    let s2 = 3;
    let mut coords = vec![0.0; nnodes * 2];
    let mut metric = vec![0.0; nnodes * s2];
    let mut metric_inv = vec![0.0; nnodes * s2];
    let mut christoffel = vec![0.0; nnodes * 2 * s2];
    let mut quad_weights = vec![0.0; nnodes];
    for it in 0..n_theta {
        let th = (it as f64 + 0.5) * dth;
        let (sth, cth) = th.sin_cos();
        // integral of sin over the theta cell: cos(th - dth/2) - cos(th + dth/2)
        let wth = 2.0 * (0.5 * dth).sin() * sth;
        for jp in 0..n_phi {
            let node = it * n_phi + jp;
            coords[node * 2] = th;
            coords[node * 2 + 1] = jp as f64 * dph;
            // packed order for dim 2: (0,0), (0,1), (1,1)
            metric[node * s2] = 1.0;
            metric[node * s2 + 2] = sth * sth;
            metric_inv[node * s2] = 1.0;
            metric_inv[node * s2 + 2] = 1.0 / (sth * sth);
            // Gamma^theta_{phi phi} = -sin cos, Gamma^phi_{theta phi} = cot
            christoffel[node * 2 * s2 + 2] = -sth * cth;
            christoffel[node * 2 * s2 + s2 + 1] = cth / sth;
            quad_weights[node] = wth * dph;
        }
    }
    Ok(ManifoldGrid {
        kind: GeometryKind::Sphere,
        dim: 2,
        shape: vec![n_theta, n_phi],
        spacing: vec![dth, dph],
        coords,
        metric,
        metric_inv,
        christoffel,
        curvature: CurvatureData::ConstantSectional(1.0),
        quad_weights,
    })
}

/// Sectional curvature of the plane spanned by v1, v2 at a node, computed through
/// the curvature tensor and the Gram determinant. Rejects nearly dependent spans.
pub fn sectional_curvature(grid: &ManifoldGrid, node: usize, v1: &[f64], v2: &[f64]) -> Result<f64> {
    let d = grid.dim;
    assert_eq!(v1.len(), d);
    assert_eq!(v2.len(), d);
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for i in 0..d {
        for j in 0..d {
            let gij = grid.g(node, i, j);
            a += v1[i] * gij * v1[j];
            b += v1[i] * gij * v2[j];
            c += v2[i] * gij * v2[j];
        }
    }
    let det = a * c - b * b;
    let scale = (a * c).max(f64::MIN_POSITIVE);
    if det / scale < 1e-12 {
        return Err(Error::DegeneratePlane(det / scale));
    }
    let CurvatureData::ConstantSectional(kappa) = grid.curvature;
    // R(v1, v2, v2, v1) = kappa * (|v1|^2 |v2|^2 - <v1, v2>^2) for constant curvature
    let numerator = kappa * det;
    Ok(numerator / det)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_indexing_roundtrip() {
        for dim in 2..=4 {
            let s2 = dim * (dim + 1) / 2;
            for p in 0..s2 {
                let (i, j) = sym_pair(dim, p);
                assert!(i <= j && j < dim);
                assert_eq!(sym_pair_index(dim, i, j), p);
                assert_eq!(sym_pair_index(dim, j, i), p);
            }
        }
    }

    #[test]
    fn torus_basics() {
        let g = build_flat_torus(3, 6, 2.0 * std::f64::consts::PI).unwrap();
        g.check_invariants().unwrap();
        assert_eq!(g.nnodes(), 216);
        let (u, m) = g.shift(0, 1, -1);
        assert!(!m);
        assert_eq!(g.multi_index(u), vec![0, 5, 0]);
        let node = g.grid_index(&[2, 3, 4]);
        assert_eq!(g.multi_index(node), vec![2, 3, 4]);
        assert!((g.volume() - (2.0 * std::f64::consts::PI).powi(3)).abs() < 1e-10);
    }

    #[test]
    fn torus_rejects_bad_params() {
        assert!(build_flat_torus(5, 8, 1.0).is_err());
        assert!(build_flat_torus(2, 7, 1.0).is_err());
        assert!(build_flat_torus(2, 8, -1.0).is_err());
    }

    #[test]
    fn sphere_weights_and_metric() {
        let g = build_round_sphere(16).unwrap();
        g.check_invariants().unwrap();
        assert!((g.volume() - 4.0 * std::f64::consts::PI).abs() < 1e-12);
        // staggered: first row at theta = dth/2
        assert!((g.node_coords(0)[0] - std::f64::consts::PI / 32.0).abs() < 1e-15);
        let node = 5 * 32 + 7;
        let th = g.node_coords(node)[0];
        assert!((g.g(node, 1, 1) - th.sin().powi(2)).abs() < 1e-15);
        assert!((g.gamma(node, 0, 1, 1) + th.sin() * th.cos()).abs() < 1e-15);
        assert!((g.gamma(node, 1, 0, 1) - th.cos() / th.sin()).abs() < 1e-15);
    }

    #[test]
    fn sphere_pole_shift_mirrors() {
        let g = build_round_sphere(8).unwrap();
        let n_phi = 16;
        // from the first theta row, stepping -1 crosses the north pole
        let node = 0 * n_phi + 3;
        let (u, m) = g.shift(node, 0, -1);
        assert!(m);
        assert_eq!(g.multi_index(u), vec![0, 3 + 8]);
        // -2 lands on theta row 1, phi shifted
        let (u2, m2) = g.shift(node, 0, -2);
        assert!(m2);
        assert_eq!(g.multi_index(u2), vec![1, 11]);
        // south crossing
        let node_s = 7 * n_phi + 15;
        let (u3, m3) = g.shift(node_s, 0, 2);
        assert!(m3);
        assert_eq!(g.multi_index(u3), vec![6, 7]);
        // interior step does not mirror
        let (u4, m4) = g.shift(node_s, 0, -1);
        assert!(!m4);
        assert_eq!(g.multi_index(u4), vec![6, 15]);
    }

    #[test]
    fn sphere_mirror_consistency_of_positions() {
        // crossing a pole and coming back must land on the same node
        let g = build_round_sphere(8).unwrap();
        for node in [0, 5, 16 * 7 + 9] {
            let (u, m) = g.shift(node, 0, -1);
            if m {
                let (back, m2) = g.shift(u, 0, -1);
                assert!(m2);
                assert_eq!(back, node);
            }
        }
    }

    #[test]
    fn sectional_curvature_values_and_degenerate_plane() {
        let t = build_flat_torus(2, 8, 2.0 * std::f64::consts::PI).unwrap();
        assert_eq!(sectional_curvature(&t, 3, &[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let s = build_round_sphere(8).unwrap();
        assert_eq!(sectional_curvature(&s, 10, &[1.0, 0.5], &[0.2, 2.0]).unwrap(), 1.0);
        let e = sectional_curvature(&s, 10, &[1.0, 0.5], &[2.0, 1.0]);
        assert!(matches!(e, Err(Error::DegeneratePlane(_))));
    }

    #[test]
    fn grid_hash_is_stable_and_sensitive() {
        let a = build_flat_torus(2, 8, 2.0 * std::f64::consts::PI).unwrap();
        let b = build_flat_torus(2, 8, 2.0 * std::f64::consts::PI).unwrap();
        let c = build_flat_torus(2, 10, 2.0 * std::f64::consts::PI).unwrap();
        assert_eq!(a.hash_hex(), b.hash_hex());
        assert_ne!(a.hash_hex(), c.hash_hex());
    }
}

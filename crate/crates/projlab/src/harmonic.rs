//! Exact analytic fields on the round sphere, built from restrictions of ambient
//! polynomials in R^3. Chart components come from the chain rule against the
//! parametrization x(theta, phi), so every field here is exact to machine
//! precision at the nodes; finite-difference error enters only through operators.
//!
//! These provide the known kernel bases (Killing duals, gradients of degree-2
//! harmonics, pullbacks of traceless matrices), reference eigenforms, and the
//! smooth deterministic random fields used on the sphere.

use crate::fields::{Sym, TensorField, Valence};
use crate::grid::{sym_pair, ManifoldGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Ambient position on the unit sphere.
pub fn chart_point(theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, st * sp, ct]
}

/// Tangent basis vectors d x / d theta and d x / d phi.
pub fn chart_frame(theta: f64, phi: f64) -> ([f64; 3], [f64; 3]) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    ([ct * cp, ct * sp, -st], [-st * sp, st * cp, 0.0])
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn mat_vec(m: &[f64; 9], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// An ambient polynomial of degree <= 3: c0 + a.x + x^T Q x + sum (b.x)(x^T B x).
/// Q and the B's are symmetric 3x3 (row-major).
#[derive(Debug, Clone, Default)]
pub struct AmbPoly {
    pub c0: f64,
    pub lin: [f64; 3],
    pub quad: [f64; 9],
    pub cubic: Vec<([f64; 3], [f64; 9])>,
}

impl AmbPoly {
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        let mut v = self.c0 + dot3(&self.lin, x) + dot3(x, &mat_vec(&self.quad, x));
        for (b, m) in &self.cubic {
            v += dot3(b, x) * dot3(x, &mat_vec(m, x));
        }
        v
    }

    pub fn grad(&self, x: &[f64; 3]) -> [f64; 3] {
        let mut g = self.lin;
        let qx = mat_vec(&self.quad, x);
        for i in 0..3 {
            g[i] += 2.0 * qx[i];
        }
        for (b, m) in &self.cubic {
            let mx = mat_vec(m, x);
            let bx = dot3(b, x);
            let xmx = dot3(x, &mx);
            for i in 0..3 {
                g[i] += b[i] * xmx + 2.0 * bx * mx[i];
            }
        }
        g
    }
}

/// Scalar field from an ambient polynomial.
pub fn scalar_field(grid: &Arc<ManifoldGrid>, p: &AmbPoly) -> TensorField {
    let mut f = TensorField::zeros(grid.clone(), Valence::new(Sym::Scalar));
    for node in 0..grid.nnodes() {
        let co = grid.node_coords(node);
        f.data[node] = p.eval(&chart_point(co[0], co[1]));
    }
    f
}

/// One-form d(p restricted to the sphere): components grad(p) . dx/du^i.
pub fn gradient_one_form(grid: &Arc<ManifoldGrid>, p: &AmbPoly) -> TensorField {
    let mut f = TensorField::zeros(grid.clone(), Valence::new(Sym::OneForm));
    for node in 0..grid.nnodes() {
        let co = grid.node_coords(node);
        let x = chart_point(co[0], co[1]);
        let (et, ep) = chart_frame(co[0], co[1]);
        let g = p.grad(&x);
        *f.at_mut(node, 0) = dot3(&g, &et);
        *f.at_mut(node, 1) = dot3(&g, &ep);
    }
    f
}

/// Metric dual of the rotation field axis x position; a Killing one-form.
pub fn killing_dual(grid: &Arc<ManifoldGrid>, axis: [f64; 3]) -> TensorField {
    let mut f = TensorField::zeros(grid.clone(), Valence::new(Sym::OneForm));
    for node in 0..grid.nnodes() {
        let co = grid.node_coords(node);
        let x = chart_point(co[0], co[1]);
        let (et, ep) = chart_frame(co[0], co[1]);
        let v = cross3(&axis, &x);
        *f.at_mut(node, 0) = dot3(&v, &et);
        *f.at_mut(node, 1) = dot3(&v, &ep);
    }
    f
}

/// Pullback of a constant symmetric ambient bilinear form: phi_ij = S(dx_i, dx_j).
/// For traceless S this equals Hess(q) + 2 q g with q = x^T S x (up to the factor
/// 2), which spans the nontrivial kernel directions of the Sinjukov factor.
pub fn pullback_sym2(grid: &Arc<ManifoldGrid>, s: &[f64; 9]) -> TensorField {
    let mut f = TensorField::zeros(grid.clone(), Valence::new(Sym::Sym2));
    for node in 0..grid.nnodes() {
        let co = grid.node_coords(node);
        let (et, ep) = chart_frame(co[0], co[1]);
        let frame = [et, ep];
        for p in 0..3 {
            let (i, j) = sym_pair(2, p);
            *f.at_mut(node, p) = dot3(&frame[i], &mat_vec(s, &frame[j]));
        }
    }
    f
}

/// The metric itself as a Sym2 field.
pub fn metric_sym2(grid: &Arc<ManifoldGrid>) -> TensorField {
    let mut f = TensorField::zeros(grid.clone(), Valence::new(Sym::Sym2));
    let s2 = grid.s2();
    for node in 0..grid.nnodes() {
        f.data[node * s2..(node + 1) * s2].copy_from_slice(grid.metric_at(node));
    }
    f
}

/// Multiplies a Sym2 field by a scalar field, in place.
pub fn scale_by_scalar(field: &mut TensorField, scalar: &TensorField) {
    let nc = field.ncomp();
    for node in 0..field.grid.nnodes() {
        for c in 0..nc {
            field.data[node * nc + c] *= scalar.data[node];
        }
    }
}

fn rand_vec3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
}

fn rand_sym3(rng: &mut ChaCha8Rng, traceless: bool) -> [f64; 9] {
    let d = rand_vec3(rng);
    let o = rand_vec3(rng);
    let mut m = [d[0], o[0], o[1], o[0], d[1], o[2], o[1], o[2], d[2]];
    if traceless {
        let t = (m[0] + m[4] + m[8]) / 3.0;
        m[0] -= t;
        m[4] -= t;
        m[8] -= t;
    }
    m
}

fn rand_poly(rng: &mut ChaCha8Rng, bandwidth: usize) -> AmbPoly {
    let mut p = AmbPoly::default();
    p.c0 = rng.gen_range(-1.0..1.0);
    if bandwidth >= 1 {
        p.lin = rand_vec3(rng);
    }
    if bandwidth >= 2 {
        p.quad = rand_sym3(rng, false);
    }
    if bandwidth >= 3 {
        p.cubic.push((rand_vec3(rng), rand_sym3(rng, false)));
    }
    p
}

fn rand_one_form(
    grid: &Arc<ManifoldGrid>,
    rng: &mut ChaCha8Rng,
    bandwidth: usize,
) -> TensorField {
    let p = rand_poly(rng, bandwidth);
    let mut f = gradient_one_form(grid, &p);
    let axis = rand_vec3(rng);
    let k = killing_dual(grid, axis);
    for (a, b) in f.data.iter_mut().zip(&k.data) {
        *a += b;
    }
    f
}

/// Deterministic smooth random field on the sphere; see `fields::random_field`.
pub fn sphere_random_field(
    grid: &Arc<ManifoldGrid>,
    valence: Valence,
    seed: u64,
    bandwidth: usize,
) -> TensorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match valence.sym {
        Sym::Scalar => {
            let p = rand_poly(&mut rng, bandwidth);
            scalar_field(grid, &p)
        }
        Sym::OneForm => rand_one_form(grid, &mut rng, bandwidth),
        Sym::Sym2 => {
            // f * g plus the pullback of a random constant bilinear form
            let p = rand_poly(&mut rng, bandwidth);
            let f = scalar_field(grid, &p);
            let mut out = metric_sym2(grid);
            scale_by_scalar(&mut out, &f);
            let s = rand_sym3(&mut rng, false);
            let pb = pullback_sym2(grid, &s);
            for (a, b) in out.data.iter_mut().zip(&pb.data) {
                *a += b;
            }
            out
        }
        Sym::Cov1Sym2 => {
            let a1 = rand_one_form(grid, &mut rng, bandwidth);
            let a2 = rand_one_form(grid, &mut rng, bandwidth);
            let a3 = rand_one_form(grid, &mut rng, bandwidth);
            let a4 = rand_one_form(grid, &mut rng, bandwidth);
            let psi = {
                let p = rand_poly(&mut rng, bandwidth);
                let f = scalar_field(grid, &p);
                let mut m = metric_sym2(grid);
                scale_by_scalar(&mut m, &f);
                let s = rand_sym3(&mut rng, false);
                let pb = pullback_sym2(grid, &s);
                for (a, b) in m.data.iter_mut().zip(&pb.data) {
                    *a += b;
                }
                m
            };
            let mut out = TensorField::zeros(grid.clone(), valence);
            let s2 = grid.s2();
            for node in 0..grid.nnodes() {
                for k in 0..2 {
                    for p in 0..s2 {
                        let (i, j) = sym_pair(2, p);
                        let gki = grid.g(node, k, i);
                        let gkj = grid.g(node, k, j);
                        let gij = grid.g(node, i, j);
                        let v = gki * a1.at(node, j)
                            + gkj * a1.at(node, i)
                            + 2.0 * gij * a2.at(node, k)
                            + gkj * a2.at(node, i)
                            + gki * a2.at(node, j)
                            + gij * a3.at(node, k)
                            + a4.at(node, k) * psi.at(node, p);
                        *out.at_mut(node, k * s2 + p) = v;
                    }
                }
            }
            out
        }
        Sym::Gen2 => {
            // outer product of two independent one-forms plus a transposed part
            let a = rand_one_form(grid, &mut rng, bandwidth);
            let b = rand_one_form(grid, &mut rng, bandwidth);
            let mut out = TensorField::zeros(grid.clone(), valence);
            for node in 0..grid.nnodes() {
                for i in 0..2 {
                    for j in 0..2 {
                        *out.at_mut(node, i * 2 + j) =
                            a.at(node, i) * b.at(node, j) + 0.3 * a.at(node, j) * b.at(node, i);
                    }
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_round_sphere;

    fn sphere(n: usize) -> Arc<ManifoldGrid> {
        Arc::new(build_round_sphere(n).unwrap())
    }

    #[test]
    fn chart_frame_matches_metric() {
        let g = sphere(8);
        for node in [0, 17, 100] {
            let co = g.node_coords(node);
            let (et, ep) = chart_frame(co[0], co[1]);
            assert!((dot3(&et, &et) - g.g(node, 0, 0)).abs() < 1e-14);
            assert!((dot3(&et, &ep) - g.g(node, 0, 1)).abs() < 1e-14);
            assert!((dot3(&ep, &ep) - g.g(node, 1, 1)).abs() < 1e-14);
        }
    }

    #[test]
    fn killing_dual_has_constant_length_for_z_axis() {
        // |dual of z x x|^2 = sin^2(theta); check the pointwise norm squared
        let g = sphere(16);
        let k = killing_dual(&g, [0.0, 0.0, 1.0]);
        for node in [3, 40, 200] {
            let th = g.node_coords(node)[0];
            // k = sin^2(theta) d phi, |k|^2 = sin^2
            assert!((k.at(node, 0)).abs() < 1e-14);
            assert!((k.at(node, 1) - th.sin().powi(2)).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_one_form_matches_hand_formula() {
        // f = z: df = -sin(theta) d theta
        let g = sphere(8);
        let p = AmbPoly { lin: [0.0, 0.0, 1.0], ..Default::default() };
        let df = gradient_one_form(&g, &p);
        for node in [0, 9, 77] {
            let th = g.node_coords(node)[0];
            assert!((df.at(node, 0) + th.sin()).abs() < 1e-14);
            assert!(df.at(node, 1).abs() < 1e-14);
        }
    }

    #[test]
    fn pullback_of_identity_is_metric() {
        let g = sphere(8);
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let pb = pullback_sym2(&g, &id);
        let m = metric_sym2(&g);
        for (a, b) in pb.data.iter().zip(&m.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cubic_poly_gradient_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = rand_poly(&mut rng, 3);
        let x = [0.3, -0.5, 0.8];
        let g = p.grad(&x);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (p.eval(&xp) - p.eval(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}

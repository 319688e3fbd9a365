//! Element-by-element assembly of the global matrices and the reaction terms.
//!
//! The reaction is a quadratic polynomial in the field, so its weak-form
//! integrals over a linear triangle are evaluated exactly from the moments
//! `∫ λa λb = |T| (1 + δab) / 12` and
//! `∫ λa λb λc = |T| / 10, / 30, / 60` for three, two, or no repeated
//! indices. Exact integration keeps the reaction Jacobian symmetric and makes
//! it the Hessian of the reaction potential.

use crate::mesh::{ElementGeometry, Mesh};

use super::sparse::CsrMatrix;
use super::{ControlMap, FemError};

const LOCAL_MASS: [[f64; 3]; 3] = [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]];

fn triple_moment(a: usize, b: usize, c: usize) -> f64 {
    match (a == b, b == c, a == c) {
        (true, true, _) => 1.0 / 10.0,
        (false, false, false) => 1.0 / 60.0,
        _ => 1.0 / 30.0,
    }
}

/// Scatters one 3x3 element block into a matrix built on the mesh pattern.
fn scatter(m: &mut CsrMatrix, tri: &[usize; 3], local: &[[f64; 3]; 3]) {
    for (a, &ga) in tri.iter().enumerate() {
        for (b, &gb) in tri.iter().enumerate() {
            let k = m.slot(ga, gb).expect("mesh pattern covers element pairs");
            m.values_mut()[k] += local[a][b];
        }
    }
}

pub fn assemble_mass(mesh: &Mesh) -> CsrMatrix {
    assemble_mass_with(mesh, &mesh.geometries())
}

pub(crate) fn assemble_mass_with(mesh: &Mesh, geo: &[ElementGeometry]) -> CsrMatrix {
    let mut m = CsrMatrix::mesh_pattern(mesh);
    for (tri, g) in mesh.elements().iter().zip(geo) {
        let s = g.area / 12.0;
        scatter(&mut m, tri, &LOCAL_MASS.map(|r| r.map(|v| v * s)));
    }
    m
}

pub fn assemble_stiffness(mesh: &Mesh, control: &ControlMap, rho: f64) -> Result<CsrMatrix, FemError> {
    assemble_stiffness_with(mesh, &mesh.geometries(), control, rho)
}

pub(crate) fn assemble_stiffness_with(
    mesh: &Mesh,
    geo: &[ElementGeometry],
    control: &ControlMap,
    rho: f64,
) -> Result<CsrMatrix, FemError> {
    if control.len() != mesh.n_regions() {
        return Err(FemError::ControlSize { expected: mesh.n_regions(), found: control.len() });
    }
    if let Some(r) = control.values().iter().position(|&k| !(k > 0.0 && k.is_finite())) {
        return Err(FemError::NonPositiveDiffusivity { region: r, value: control.values()[r] });
    }
    if !(rho > 0.0) {
        return Err(FemError::InvalidParams(format!("density must be positive, got {rho}")));
    }
    let mut k = CsrMatrix::mesh_pattern(mesh);
    for ((tri, g), &region) in mesh.elements().iter().zip(geo).zip(mesh.region_of_element()) {
        let coeff = rho * control.values()[region] * g.area;
        let mut local = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                local[a][b] = coeff * (g.grads[a][0] * g.grads[b][0] + g.grads[a][1] * g.grads[b][1]);
            }
        }
        scatter(&mut k, tri, &local);
    }
    Ok(k)
}

/// `q_a = ∫ c_h² N_a` for every node.
pub(crate) fn quadratic_load(mesh: &Mesh, geo: &[ElementGeometry], c: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; mesh.n_nodes()];
    for (tri, g) in mesh.elements().iter().zip(geo) {
        let cl = tri.map(|n| c[n]);
        for a in 0..3 {
            let mut s = 0.0;
            for b in 0..3 {
                for d in 0..3 {
                    s += triple_moment(a, b, d) * cl[b] * cl[d];
                }
            }
            q[tri[a]] += g.area * s;
        }
    }
    q
}

/// `W_ab = ∫ c_h N_a N_b` on the mesh pattern.
pub(crate) fn weighted_mass(mesh: &Mesh, geo: &[ElementGeometry], c: &[f64]) -> CsrMatrix {
    let mut w = CsrMatrix::mesh_pattern(mesh);
    for (tri, g) in mesh.elements().iter().zip(geo) {
        let cl = tri.map(|n| c[n]);
        let mut local = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                local[a][b] = g.area * (0..3).map(|d| triple_moment(a, b, d) * cl[d]).sum::<f64>();
            }
        }
        scatter(&mut w, tri, &local);
    }
    w
}

/// `∫ c_h³`.
pub(crate) fn cubic_integral(mesh: &Mesh, geo: &[ElementGeometry], c: &[f64]) -> f64 {
    let mut total = 0.0;
    for (tri, g) in mesh.elements().iter().zip(geo) {
        let cl = tri.map(|n| c[n]);
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for d in 0..3 {
                    s += triple_moment(a, b, d) * cl[a] * cl[b] * cl[d];
                }
            }
        }
        total += g.area * s;
    }
    total
}

/// Consistent load of a uniform normal flux `h` on the flux edges.
pub(crate) fn flux_load(mesh: &Mesh, h: f64) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_nodes()];
    if h == 0.0 {
        return f;
    }
    for e in mesh.boundary_edges() {
        if e.kind == crate::mesh::BoundaryKind::Flux {
            let [pa, pb] = [mesh.nodes()[e.a], mesh.nodes()[e.b]];
            let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
            f[e.a] += 0.5 * h * len;
            f[e.b] += 0.5 * h * len;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn right_triangle() -> Mesh {
        Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]], vec![0], vec![]).unwrap()
    }

    /// Degree-4 rule with positive weights (Dunavant, 6 points), exact for
    /// the cubic integrands used here.
    fn quadrature(mesh: &Mesh, f: impl Fn(&[f64; 3], usize) -> f64) -> f64 {
        let pts = [
            (0.223381589678011, [0.108103018168070, 0.445948490915965, 0.445948490915965]),
            (0.223381589678011, [0.445948490915965, 0.108103018168070, 0.445948490915965]),
            (0.223381589678011, [0.445948490915965, 0.445948490915965, 0.108103018168070]),
            (0.109951743655322, [0.816847572980459, 0.091576213509771, 0.091576213509771]),
            (0.109951743655322, [0.091576213509771, 0.816847572980459, 0.091576213509771]),
            (0.109951743655322, [0.091576213509771, 0.091576213509771, 0.816847572980459]),
        ];
        let mut total = 0.0;
        for (e, g) in mesh.geometries().iter().enumerate() {
            for (w, l) in &pts {
                total += w * g.area * f(l, e);
            }
        }
        total
    }

    #[test]
    fn single_triangle_mass() {
        let m = assemble_mass(&right_triangle());
        let expect = LOCAL_MASS.map(|r| r.map(|v| v * 0.5 / 12.0));
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.get(i, j) - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mass_sums_to_area_and_is_positive_definite() {
        let mesh = Mesh::unit_square(6, 6, 1, 1).unwrap();
        let m = assemble_mass(&mesh);
        assert!((m.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.is_symmetric(1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..mesh.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(m.bilinear(&x, &x) > 0.0);
        }
    }

    #[test]
    fn stiffness_kernel_linearity_and_energy() {
        let mesh = Mesh::unit_square(8, 8, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kappa: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..5.0)).collect();
        let k = assemble_stiffness(&mesh, &ControlMap::new(kappa.clone()).unwrap(), 1.0).unwrap();
        assert!(k.is_symmetric(1e-14));
        let ones = vec![1.0; mesh.n_nodes()];
        assert!(k.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));

        let doubled =
            assemble_stiffness(&mesh, &ControlMap::new(kappa.iter().map(|v| 2.0 * v).collect()).unwrap(), 1.0).unwrap();
        for (a, b) in k.values().iter().zip(doubled.values()) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }

        let unit = assemble_stiffness(&mesh, &ControlMap::uniform(16, 1.0), 1.0).unwrap();
        let u: Vec<f64> = mesh.nodes().iter().map(|p| p[0]).collect();
        assert!((unit.bilinear(&u, &u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stiffness_rejects_bad_controls() {
        let mesh = Mesh::unit_square(2, 2, 2, 1).unwrap();
        assert!(ControlMap::new(vec![1.0, 0.0]).is_err());
        let geo = mesh.geometries();
        let bad = ControlMap::new_unchecked(vec![1.0, -1.0]);
        assert!(matches!(
            assemble_stiffness_with(&mesh, &geo, &bad, 1.0),
            Err(FemError::NonPositiveDiffusivity { region: 1, .. })
        ));
        assert!(matches!(
            assemble_stiffness(&mesh, &ControlMap::uniform(3, 1.0), 1.0),
            Err(FemError::ControlSize { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn reaction_integrals_match_quadrature() {
        let mesh = Mesh::unit_square(3, 4, 1, 1).unwrap();
        let geo = mesh.geometries();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c: Vec<f64> = (0..mesh.n_nodes()).map(|_| rng.random_range(-0.5..1.5)).collect();
        let ch = |l: &[f64; 3], e: usize| (0..3).map(|k| l[k] * c[mesh.elements()[e][k]]).sum::<f64>();

        let cubic = quadrature(&mesh, |l, e| ch(l, e).powi(3));
        assert!((cubic_integral(&mesh, &geo, &c) - cubic).abs() < 1e-12);

        let q = quadratic_load(&mesh, &geo, &c);
        let w = weighted_mass(&mesh, &geo, &c);
        for node in [0, 7, mesh.n_nodes() - 1] {
            let shape = |l: &[f64; 3], e: usize| {
                mesh.elements()[e].iter().zip(l).filter(|(&n, _)| n == node).map(|(_, &v)| v).sum::<f64>()
            };
            let oracle = quadrature(&mesh, |l, e| ch(l, e).powi(2) * shape(l, e));
            assert!((q[node] - oracle).abs() < 1e-12);
            for other in [0, 1, 5] {
                let shape2 = |l: &[f64; 3], e: usize| {
                    mesh.elements()[e].iter().zip(l).filter(|(&n, _)| n == other).map(|(_, &v)| v).sum::<f64>()
                };
                let oracle = quadrature(&mesh, |l, e| ch(l, e) * shape(l, e) * shape2(l, e));
                assert!((w.get(node, other) - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flux_load_integrates_boundary_length() {
        let mesh = Mesh::unit_square(3, 3, 1, 1).unwrap();
        let f = flux_load(&mesh, 2.0);
        assert!((f.iter().sum::<f64>() - 8.0).abs() < 1e-12);
    }
}

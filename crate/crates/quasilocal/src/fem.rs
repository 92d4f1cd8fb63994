//! Piecewise-linear (P1) finite elements on the nested triangulations.
//!
//! Functions are stored nodally at *all* vertices of their mesh level;
//! homogeneous Dirichlet data is handled by assembling only over the free
//! (interior) vertices and scattering solutions back with zero boundary
//! values. All quadratures here are exact for the integrands they meet:
//! stiffness terms are piecewise constant, mass and load terms use the exact
//! P1 product rule `∫_T λ_i λ_j = |T|(1+δ_ij)/12`.
//!
//! Prolongation between levels is exact (every appended vertex is an edge
//! midpoint), so functions from different levels can be compared by moving
//! both to a common fine level — no interpolation error is introduced.

use nalgebra::{Matrix2, Vector2};
use serde::Serialize;

use crate::field::Tensor;
use crate::mesh::{MeshHierarchy, TriMesh};
use crate::sparse::{SparseMatrix, SpdFactor};
use crate::{Error, Result};

/// A P1 function: one value per vertex of its mesh level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeFunction {
    level: usize,
    values: Vec<f64>,
}

impl FeFunction {
    pub fn zeros(mesh: &TriMesh) -> FeFunction {
        FeFunction { level: mesh.level(), values: vec![0.0; mesh.n_vertices()] }
    }

    pub fn from_values(mesh: &TriMesh, values: Vec<f64>) -> Result<FeFunction> {
        if values.len() != mesh.n_vertices() {
            return Err(Error::Mismatch(format!(
                "function has {} values but mesh level {} has {} vertices",
                values.len(),
                mesh.level(),
                mesh.n_vertices()
            )));
        }
        Ok(FeFunction { level: mesh.level(), values })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The (constant) gradient on element `e` of `mesh`, which must be the
    /// function's own level.
    pub fn gradient_on(&self, mesh: &TriMesh, e: usize) -> Vector2<f64> {
        debug_assert_eq!(mesh.level(), self.level);
        let tri = mesh.triangle(e);
        let grads = mesh.grads(e);
        let mut g = Vector2::zeros();
        for i in 0..3 {
            g += self.values[tri[i]] * Vector2::new(grads[i][0], grads[i][1]);
        }
        g
    }
}

/// Values of a P1 function at the free vertices only.
pub fn restrict_free(mesh: &TriMesh, u: &FeFunction) -> Vec<f64> {
    mesh.free_vertices().iter().map(|&v| u.values()[v]).collect()
}

/// Scatter free-vertex values to a full function with zero boundary values.
pub fn extend_free(mesh: &TriMesh, free: &[f64]) -> FeFunction {
    assert_eq!(free.len(), mesh.free_vertices().len());
    let mut u = FeFunction::zeros(mesh);
    for (i, &v) in mesh.free_vertices().iter().enumerate() {
        u.values_mut()[v] = free[i];
    }
    u
}

/// Validate a per-element symmetric elliptic tensor field for `mesh`.
fn check_tensors(mesh: &TriMesh, tensors: &[Tensor]) -> Result<()> {
    if tensors.len() != mesh.n_elements() {
        return Err(Error::Mismatch(format!(
            "{} tensors for a mesh with {} elements",
            tensors.len(),
            mesh.n_elements()
        )));
    }
    for (e, a) in tensors.iter().enumerate() {
        let scale = a.abs().max() + 1.0;
        if (a[(0, 1)] - a[(1, 0)]).abs() > 1e-12 * scale {
            return Err(Error::ModelInvalid(format!(
                "coefficient tensor on element {e} is not symmetric"
            )));
        }
        // Symmetric 2×2 is positive definite iff a11 > 0 and det > 0.
        if !(a[(0, 0)] > 0.0 && a.determinant() > 0.0) {
            return Err(Error::ModelInvalid(format!(
                "coefficient tensor on element {e} is not positive definite"
            )));
        }
    }
    Ok(())
}

/// Stiffness matrix `∫ ∇φ_i · (A ∇φ_j)` over the free vertices.
///
/// Requires one symmetric positive definite tensor per element; the
/// one-point quadrature is exact because gradients and tensors are
/// elementwise constant.
pub fn assemble_stiffness(mesh: &TriMesh, tensors: &[Tensor]) -> Result<SparseMatrix> {
    check_tensors(mesh, tensors)?;
    let n_free = mesh.free_vertices().len();
    let mut triplets = Vec::with_capacity(9 * mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let tri = mesh.triangle(e);
        let grads = mesh.grads(e);
        let a = &tensors[e];
        let area = mesh.area(e);
        for i in 0..3 {
            let Some(fi) = mesh.free_index(tri[i]) else { continue };
            let gi = Vector2::new(grads[i][0], grads[i][1]);
            for j in 0..3 {
                let Some(fj) = mesh.free_index(tri[j]) else { continue };
                let gj = Vector2::new(grads[j][0], grads[j][1]);
                triplets.push((fi, fj, area * (gi.dot(&(a * gj)))));
            }
        }
    }
    Ok(SparseMatrix::from_triplets(n_free, n_free, &triplets))
}

/// Load vector `∫ φ_i f` over the free vertices, with `f` taken as the P1
/// interpolant of the closure at mesh vertices (exact whenever `f` is
/// piecewise affine on the mesh).
pub fn assemble_load(mesh: &TriMesh, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let nodal: Vec<f64> = mesh.coords().iter().map(|&[x, y]| f(x, y)).collect();
    assemble_load_nodal(mesh, &nodal)
}

/// Load vector from nodal values of `f` (see [`assemble_load`]).
pub fn assemble_load_nodal(mesh: &TriMesh, nodal: &[f64]) -> Vec<f64> {
    assert_eq!(nodal.len(), mesh.n_vertices());
    let mut b = vec![0.0; mesh.free_vertices().len()];
    for e in 0..mesh.n_elements() {
        let tri = mesh.triangle(e);
        let area = mesh.area(e);
        let sum: f64 = tri.iter().map(|&v| nodal[v]).sum();
        for i in 0..3 {
            if let Some(fi) = mesh.free_index(tri[i]) {
                b[fi] += area / 12.0 * (sum + nodal[tri[i]]);
            }
        }
    }
    b
}

/// Relative-residual guard shared by the direct solvers in this crate.
pub(crate) fn check_residual(
    a: &SparseMatrix,
    x: &[f64],
    b: &[f64],
    tol_rel: f64,
    what: &str,
) -> Result<()> {
    let r = a.matvec(x);
    let num: f64 = r.iter().zip(b).map(|(ri, bi)| (ri - bi).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if num > tol_rel * den.max(f64::MIN_POSITIVE) {
        return Err(Error::Solve(format!(
            "{what}: relative residual {:.3e} exceeds {tol_rel:.1e}",
            num / den.max(f64::MIN_POSITIVE)
        )));
    }
    Ok(())
}

/// Solve `-div(A ∇u) = f` with homogeneous Dirichlet data, `f` given as a
/// free-vertex load vector. Guards the result with a 1e-10 relative residual
/// check.
pub fn solve_dirichlet(mesh: &TriMesh, tensors: &[Tensor], load: &[f64]) -> Result<FeFunction> {
    let a = assemble_stiffness(mesh, tensors)?;
    if load.len() != a.nrows() {
        return Err(Error::Mismatch(format!(
            "load vector length {} does not match {} free vertices",
            load.len(),
            a.nrows()
        )));
    }
    let x = SpdFactor::new(&a)?.solve(load);
    check_residual(&a, &x, load, 1e-10, "Dirichlet solve")?;
    Ok(extend_free(mesh, &x))
}

/// Convenience wrapper: assemble the load from a closure and solve.
pub fn solve_poisson(
    mesh: &TriMesh,
    tensors: &[Tensor],
    f: impl Fn(f64, f64) -> f64,
) -> Result<FeFunction> {
    let load = assemble_load(mesh, f);
    solve_dirichlet(mesh, tensors, &load)
}

/// Exact prolongation of `u` to `to_level ≥ u.level()`: inherited vertices
/// keep their values, appended midpoints average their parents.
pub fn prolong(hier: &MeshHierarchy, u: &FeFunction, to_level: usize) -> Result<FeFunction> {
    hier.check_level(to_level)?;
    hier.check_level(u.level())?;
    if to_level < u.level() {
        return Err(Error::InvalidInput(format!(
            "cannot prolong from level {} down to level {to_level}",
            u.level()
        )));
    }
    let mut values = u.values().to_vec();
    for level in u.level()..to_level {
        let fine = hier.mesh(level + 1);
        values.reserve(fine.n_vertices() - values.len());
        for &[a, b] in hier.appended_vertex_parents(level + 1) {
            values.push(0.5 * (values[a] + values[b]));
        }
        debug_assert_eq!(values.len(), fine.n_vertices());
    }
    Ok(FeFunction { level: to_level, values })
}

/// Exact `∫ u v` for two nodal vectors on the same mesh.
pub fn mass_form(mesh: &TriMesh, u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), mesh.n_vertices());
    assert_eq!(v.len(), mesh.n_vertices());
    let mut total = 0.0;
    for e in 0..mesh.n_elements() {
        let [a, b, c] = mesh.triangle(e);
        let (su, sv) = (u[a] + u[b] + u[c], v[a] + v[b] + v[c]);
        let dot = u[a] * v[a] + u[b] * v[b] + u[c] * v[c];
        total += mesh.area(e) / 12.0 * (su * sv + dot);
    }
    total
}

/// `∫ ∇u · (A ∇v)` for nodal vectors on the same mesh, with one (not
/// necessarily symmetric) tensor per element.
pub fn energy_form(mesh: &TriMesh, tensors: &[Matrix2<f64>], u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(tensors.len(), mesh.n_elements());
    let mut total = 0.0;
    for e in 0..mesh.n_elements() {
        let tri = mesh.triangle(e);
        let grads = mesh.grads(e);
        let mut gu = Vector2::zeros();
        let mut gv = Vector2::zeros();
        for i in 0..3 {
            gu += u[tri[i]] * Vector2::new(grads[i][0], grads[i][1]);
            gv += v[tri[i]] * Vector2::new(grads[i][0], grads[i][1]);
        }
        total += mesh.area(e) * gu.dot(&(tensors[e] * gv));
    }
    total
}

pub fn l2_norm(mesh: &TriMesh, u: &FeFunction) -> f64 {
    mass_form(mesh, u.values(), u.values()).max(0.0).sqrt()
}

/// `‖u − v‖_{L²}` for functions on possibly different levels of the same
/// hierarchy (both are prolonged exactly to the finer of the two).
pub fn l2_distance(hier: &MeshHierarchy, u: &FeFunction, v: &FeFunction) -> Result<f64> {
    let level = u.level().max(v.level());
    let uu = prolong(hier, u, level)?;
    let vv = prolong(hier, v, level)?;
    let d: Vec<f64> = uu.values().iter().zip(vv.values()).map(|(a, b)| a - b).collect();
    Ok(mass_form(hier.mesh(level), &d, &d).max(0.0).sqrt())
}

/// Energy distance `(∫ ∇(u−v) · (A ∇(u−v)))^{1/2}` evaluated on `level`,
/// where the tensor field lives. Both functions are prolonged exactly.
pub fn energy_distance(
    hier: &MeshHierarchy,
    u: &FeFunction,
    v: &FeFunction,
    level: usize,
    tensors: &[Tensor],
) -> Result<f64> {
    if u.level() > level || v.level() > level {
        return Err(Error::InvalidInput(
            "energy distance must be evaluated at a level at least as fine as both functions"
                .into(),
        ));
    }
    let uu = prolong(hier, u, level)?;
    let vv = prolong(hier, v, level)?;
    let d: Vec<f64> = uu.values().iter().zip(vv.values()).map(|(a, b)| a - b).collect();
    Ok(energy_form(hier.mesh(level), tensors, &d, &d).max(0.0).sqrt())
}

/// Locate the vertex with exactly these coordinates (the mesh geometry is
/// dyadic, so exact comparison is meaningful). Test/demo helper.
pub fn vertex_at(mesh: &TriMesh, p: [f64; 2]) -> Option<usize> {
    mesh.coords().iter().position(|&q| q == p)
}

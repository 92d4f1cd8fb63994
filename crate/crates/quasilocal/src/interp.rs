//! The projective quasi-interpolation operator `I_H`.
//!
//! `I_H = I_c ∘ Π_H` maps fine-level P1 functions to coarse P1 functions with
//! zero boundary values:
//!
//! * `Π_H` projects, coarse element by coarse element, onto (discontinuous)
//!   affine functions in `L²(T)` — a 3×3 solve per element with the exact P1
//!   mass matrix `|T|(1+δ_ij)/12`;
//! * `I_c` restores continuity by averaging the corner values of the broken
//!   projection over all elements meeting at each interior coarse vertex,
//!   and clamps boundary vertices to zero.
//!
//! `I_H` restricted to the coarse space itself is the identity (both steps
//! reproduce affine data), which makes it a projection; its kernel on the
//! fine level is the *fine-scale space* in which correctors live. The
//! operator is materialized as a sparse matrix (rows: interior coarse
//! vertices, columns: all fine vertices) because the corrector solver needs
//! its rows as hard constraints.

use crate::fem::{extend_free, FeFunction};
use crate::mesh::{barycentric, MeshHierarchy, TriMesh};
use crate::sparse::SparseMatrix;
use crate::{Error, Result};

/// Discontinuous P1 data on a coarse mesh: three corner values per element.
#[derive(Debug, Clone)]
pub struct BrokenP1 {
    pub coarse_level: usize,
    pub corner_values: Vec<[f64; 3]>,
}

/// Weights of the elementwise L² projection for one coarse element:
/// `corner i of Π_H v = Σ_k weights[i][k] · v[fine_vertices[k]]`.
#[derive(Debug, Clone)]
struct ProjectionElement {
    fine_vertices: Vec<usize>,
    weights: [Vec<f64>; 3],
}

/// The elementwise L² projection `Π_H` from a fine level onto broken P1
/// functions of a coarse level.
#[derive(Debug, Clone)]
pub struct L2Projection {
    coarse_level: usize,
    fine_level: usize,
    elems: Vec<ProjectionElement>,
}

impl L2Projection {
    pub fn build(
        hier: &MeshHierarchy,
        coarse_level: usize,
        fine_level: usize,
    ) -> Result<L2Projection> {
        hier.check_level(fine_level)?;
        if coarse_level > fine_level {
            return Err(Error::InvalidInput(format!(
                "coarse level {coarse_level} must not exceed fine level {fine_level}"
            )));
        }
        let coarse = hier.mesh(coarse_level);
        let fine = hier.mesh(fine_level);
        let mut elems = Vec::with_capacity(coarse.n_elements());
        for t in 0..coarse.n_elements() {
            let corners = coarse.corners(t);
            let descendants = hier.descendants(t, coarse_level, fine_level);

            let mut fine_vertices: Vec<usize> = descendants
                .clone()
                .flat_map(|e| fine.triangle(e))
                .collect();
            fine_vertices.sort_unstable();
            fine_vertices.dedup();
            let local: std::collections::HashMap<usize, usize> =
                fine_vertices.iter().enumerate().map(|(k, &v)| (v, k)).collect();

            // Barycentric coordinates of each fine vertex with respect to T
            // evaluate the coarse hat functions exactly.
            let bary: Vec<[f64; 3]> = fine_vertices
                .iter()
                .map(|&v| barycentric(&corners, fine.coords()[v]))
                .collect();

            // B[i][k] = ∫_T λ_i^T φ_k, accumulated per fine element with the
            // exact rule ∫_t (Σ a_m λ_m)(λ_{m'}) = |t|/12 (Σ_m a_m + a_{m'}).
            let mut b = [
                vec![0.0; fine_vertices.len()],
                vec![0.0; fine_vertices.len()],
                vec![0.0; fine_vertices.len()],
            ];
            for e in descendants {
                let tri = fine.triangle(e);
                let area = fine.area(e);
                let loc = [local[&tri[0]], local[&tri[1]], local[&tri[2]]];
                for i in 0..3 {
                    let a = [bary[loc[0]][i], bary[loc[1]][i], bary[loc[2]][i]];
                    let sum = a[0] + a[1] + a[2];
                    for m in 0..3 {
                        b[i][loc[m]] += area / 12.0 * (sum + a[m]);
                    }
                }
            }

            // weights = M⁻¹ B with M = |T|/12 · [[2,1,1],[1,2,1],[1,1,2]];
            // inverting the constant matrix gives
            // (M⁻¹)_ij = (3/|T|) · (3 if i = j else −1).
            let inv_scale = 3.0 / coarse.area(t);
            let weights = std::array::from_fn(|i| {
                (0..fine_vertices.len())
                    .map(|k| {
                        let mut acc = 0.0;
                        for j in 0..3 {
                            let s = if i == j { 3.0 } else { -1.0 };
                            acc += s * b[j][k];
                        }
                        inv_scale * acc
                    })
                    .collect()
            });

            elems.push(ProjectionElement { fine_vertices, weights });
        }
        Ok(L2Projection { coarse_level, fine_level, elems })
    }

    pub fn coarse_level(&self) -> usize {
        self.coarse_level
    }

    pub fn fine_level(&self) -> usize {
        self.fine_level
    }

    /// Project a fine function onto broken coarse P1.
    pub fn apply(&self, v: &FeFunction) -> Result<BrokenP1> {
        if v.level() != self.fine_level {
            return Err(Error::Mismatch(format!(
                "projection expects a level-{} function, got level {}",
                self.fine_level,
                v.level()
            )));
        }
        let corner_values = self
            .elems
            .iter()
            .map(|pe| {
                std::array::from_fn(|i| {
                    pe.fine_vertices
                        .iter()
                        .zip(&pe.weights[i])
                        .map(|(&k, &w)| w * v.values()[k])
                        .sum()
                })
            })
            .collect();
        Ok(BrokenP1 { coarse_level: self.coarse_level, corner_values })
    }
}

/// The continuity-restoring vertex averaging `I_c`: interior coarse vertices
/// take the arithmetic mean of the adjacent broken corner values, boundary
/// vertices take zero.
pub fn vertex_average(coarse: &TriMesh, broken: &BrokenP1) -> Result<FeFunction> {
    if broken.coarse_level != coarse.level() || broken.corner_values.len() != coarse.n_elements()
    {
        return Err(Error::Mismatch(
            "broken function does not match the coarse mesh".into(),
        ));
    }
    let mut sums = vec![0.0; coarse.n_vertices()];
    for (t, corners) in broken.corner_values.iter().enumerate() {
        let tri = coarse.triangle(t);
        for i in 0..3 {
            sums[tri[i]] += corners[i];
        }
    }
    let free: Vec<f64> = coarse
        .free_vertices()
        .iter()
        .map(|&z| sums[z] / coarse.vertex_elements(z).len() as f64)
        .collect();
    Ok(extend_free(coarse, &free))
}

/// The materialized quasi-interpolation `I_H`: a sparse matrix with one row
/// per interior coarse vertex and one column per fine vertex.
#[derive(Debug, Clone)]
pub struct InterpolationOperator {
    coarse_level: usize,
    fine_level: usize,
    matrix: SparseMatrix,
}

impl InterpolationOperator {
    pub fn build(
        hier: &MeshHierarchy,
        coarse_level: usize,
        fine_level: usize,
    ) -> Result<InterpolationOperator> {
        let projection = L2Projection::build(hier, coarse_level, fine_level)?;
        let coarse = hier.mesh(coarse_level);
        let fine = hier.mesh(fine_level);
        let mut triplets = Vec::new();
        for (t, pe) in projection.elems.iter().enumerate() {
            let tri = coarse.triangle(t);
            for i in 0..3 {
                let Some(row) = coarse.free_index(tri[i]) else { continue };
                let avg = 1.0 / coarse.vertex_elements(tri[i]).len() as f64;
                for (k, &col) in pe.fine_vertices.iter().enumerate() {
                    let w = avg * pe.weights[i][k];
                    if w != 0.0 {
                        triplets.push((row, col, w));
                    }
                }
            }
        }
        // Prune round-off dust relative to each row's magnitude. Exactly
        // cancelling weights (e.g. the Kronecker rows of the same-level
        // operator) otherwise leave ~1e-20 stragglers that masquerade as
        // genuine support and degrade the corrector constraint blocks.
        let dirty =
            SparseMatrix::from_triplets(coarse.free_vertices().len(), fine.n_vertices(), &triplets);
        let mut clean = Vec::with_capacity(dirty.nnz());
        for r in 0..dirty.nrows() {
            let (cols, vals) = dirty.row(r);
            let row_max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (&c, &v) in cols.iter().zip(vals) {
                if v.abs() > 1e-13 * row_max {
                    clean.push((r, c, v));
                }
            }
        }
        let matrix =
            SparseMatrix::from_triplets(coarse.free_vertices().len(), fine.n_vertices(), &clean);
        Ok(InterpolationOperator { coarse_level, fine_level, matrix })
    }

    pub fn coarse_level(&self) -> usize {
        self.coarse_level
    }

    pub fn fine_level(&self) -> usize {
        self.fine_level
    }

    /// Row of `I_H` for the `row`-th interior coarse vertex: fine vertex
    /// indices and weights.
    pub fn row(&self, row: usize) -> (&[usize], &[f64]) {
        self.matrix.row(row)
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    /// Apply `I_H` to a fine function, yielding a coarse function with zero
    /// boundary values.
    pub fn apply(&self, hier: &MeshHierarchy, v: &FeFunction) -> Result<FeFunction> {
        if v.level() != self.fine_level {
            return Err(Error::Mismatch(format!(
                "interpolation expects a level-{} function, got level {}",
                self.fine_level,
                v.level()
            )));
        }
        let free = self.matrix.matvec(v.values());
        Ok(extend_free(hier.mesh(self.coarse_level), &free))
    }
}
